"""Compact text classifier: embeddings, one self-attention block, CLS head.

The network is small enough to train from scratch on a desk CPU while
still producing genuinely contextual token representations: embedding +
learned positional rows, one single-head scaled dot-product attention
block with a GELU position-wise feed-forward and a final layer norm, a
bias-free softmax classifier on the CLS hidden state, and an optional
token reconstructor head whose output projection is the embedding matrix
transposed (weight tying; no separate V x d_e matrix exists).

Graph-building functions (``build_*``) record the forward pass on a
:class:`~advtext.numerics.GradTape`; the plain functions are value-level
wrappers over a throwaway tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import GradTape, as_f64

ATTENTION_MASK_BIAS = -1e9

_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    num_classes: int
    max_len: int  # includes the CLS position

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_classes", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2 (CLS + at least one token)")


@dataclass
class ReconstructorParams:
    ff_w: np.ndarray  # [d_h, d_e]
    ff_b: np.ndarray  # [d_e]
    norm_gain: np.ndarray  # [d_e]
    norm_bias: np.ndarray  # [d_e]


@dataclass
class ModelParams:
    embedding: np.ndarray  # [V, d_e]; also the tied reconstructor projection
    positional: np.ndarray  # [L, d_e]
    w_query: np.ndarray  # [d_e, d_h]
    w_key: np.ndarray  # [d_e, d_h]
    w_value: np.ndarray  # [d_e, d_h]
    ff_w: np.ndarray  # [d_h, d_h]
    ff_b: np.ndarray  # [d_h]
    classifier: np.ndarray  # [C, d_h]
    reconstructor: ReconstructorParams | None = None

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in a stable order; the tied embedding appears once."""
        out = {
            "embedding": self.embedding,
            "positional": self.positional,
            "w_query": self.w_query,
            "w_key": self.w_key,
            "w_value": self.w_value,
            "ff_w": self.ff_w,
            "ff_b": self.ff_b,
            "classifier": self.classifier,
        }
        if self.reconstructor is not None:
            rec = self.reconstructor
            out["rec.ff_w"] = rec.ff_w
            out["rec.ff_b"] = rec.ff_b
            out["rec.norm_gain"] = rec.norm_gain
            out["rec.norm_bias"] = rec.norm_bias
        return out

    def replace_tensors(self, named: dict[str, np.ndarray]) -> "ModelParams":
        """New ModelParams with the given tensors substituted by name."""
        current = self.named_tensors()
        merged = {name: named.get(name, arr) for name, arr in current.items()}
        return params_from_named(merged)

    def copy(self) -> "ModelParams":
        return params_from_named({k: v.copy() for k, v in self.named_tensors().items()})


@dataclass
class EncodedExample:
    token_hidden: np.ndarray  # [L, d_h]
    sentence_rep: np.ndarray  # [d_h], equals token_hidden[0] (the CLS row)


def params_from_named(named: dict[str, np.ndarray]) -> ModelParams:
    rec = None
    if "rec.ff_w" in named:
        rec = ReconstructorParams(
            ff_w=named["rec.ff_w"],
            ff_b=named["rec.ff_b"],
            norm_gain=named["rec.norm_gain"],
            norm_bias=named["rec.norm_bias"],
        )
    return ModelParams(
        embedding=named["embedding"],
        positional=named["positional"],
        w_query=named["w_query"],
        w_key=named["w_key"],
        w_value=named["w_value"],
        ff_w=named["ff_w"],
        ff_b=named["ff_b"],
        classifier=named["classifier"],
        reconstructor=rec,
    )


def init_params(config: ModelConfig, seed: int, reconstructor: bool = False) -> ModelParams:
    """Seeded init: weight matrices ~ U(-0.05, 0.05), biases zero, norm gain one."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        return rng.uniform(-0.05, 0.05, size=shape)

    v, d_e, d_h = config.vocab_size, config.embed_dim, config.hidden_dim
    params = ModelParams(
        embedding=w(v, d_e),
        positional=w(config.max_len, d_e),
        w_query=w(d_e, d_h),
        w_key=w(d_e, d_h),
        w_value=w(d_e, d_h),
        ff_w=w(d_h, d_h),
        ff_b=np.zeros(d_h),
        classifier=w(config.num_classes, d_h),
    )
    if reconstructor:
        params.reconstructor = ReconstructorParams(
            ff_w=w(d_h, d_e),
            ff_b=np.zeros(d_e),
            norm_gain=np.ones(d_e),
            norm_bias=np.zeros(d_e),
        )
    return params


def param_count(params: ModelParams) -> int:
    """Total trainable scalars; the tied embedding is counted once."""
    return sum(t.size for t in params.named_tensors().values())


# ---------------------------------------------------------------------------
# tape-level graph builders
# ---------------------------------------------------------------------------


def register_params(tape: GradTape, params: ModelParams) -> dict[str, int]:
    """Register every trainable tensor as a tape leaf; returns name -> node id."""
    return {name: tape.leaf(arr) for name, arr in params.named_tensors().items()}


def build_embed(tape: GradTape, refs: dict[str, int], token_ids: Sequence[int]) -> int:
    """Token embedding plus learned positional row, for a full-length id list."""
    length = tape.value(refs["positional"]).shape[0]
    if len(token_ids) != length:
        raise ValueError(f"expected {length} token ids (padded), got {len(token_ids)}")
    gathered = tape.gather_rows(refs["embedding"], token_ids)
    return tape.add(gathered, refs["positional"])


def attention_bias(mask: Sequence[int]) -> np.ndarray:
    """[L, L] additive score bias: masked-out key columns get a large negative."""
    m = np.asarray(mask, dtype=np.float64)
    row = np.where(m > 0, 0.0, ATTENTION_MASK_BIAS)
    return np.tile(row, (len(mask), 1))


def build_encode(
    tape: GradTape, refs: dict[str, int], x: int, mask: Sequence[int]
) -> tuple[int, int]:
    """Single-head self-attention block; returns (token_hidden, sentence_rep) nodes.

    sentence_rep is the CLS row of token_hidden, shaped [1, d_h].
    """
    if not mask or mask[0] != 1:
        raise ValueError("mask[0] must be 1: the CLS position is always valid")
    d_h = tape.value(refs["w_query"]).shape[1]
    q = tape.matmul(x, refs["w_query"])
    k = tape.matmul(x, refs["w_key"])
    v = tape.matmul(x, refs["w_value"])
    scores = tape.scale(tape.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d_h))
    scores = tape.add(scores, tape.constant(attention_bias(mask)))
    attn = tape.softmax_rows(scores)
    ctx = tape.matmul(attn, v)
    h = tape.gelu(tape.add(tape.matmul(ctx, refs["ff_w"]), refs["ff_b"]))
    token_hidden = tape.layer_norm(
        h, tape.constant(np.ones(d_h)), tape.constant(np.zeros(d_h))
    )
    sentence = tape.gather_rows(token_hidden, [0])
    return token_hidden, sentence


def build_classify_logits(tape: GradTape, refs: dict[str, int], sentence: int) -> int:
    """Class logits W h from the [1, d_h] sentence node; no bias term."""
    return tape.matmul(sentence, refs["classifier"], transpose_b=True)


def build_classification_loss(
    tape: GradTape, refs: dict[str, int], sentence: int, label: int
) -> int:
    logits = build_classify_logits(tape, refs, sentence)
    return tape.cross_entropy(logits, [label], [1])


def build_reconstruct_logits(tape: GradTape, refs: dict[str, int], token_hidden: int) -> int:
    """Reconstructor head: FF -> GELU -> layer norm -> tied projection by E^T."""
    if "rec.ff_w" not in refs:
        raise ValueError("no reconstructor head in these parameters")
    h = tape.gelu(tape.add(tape.matmul(token_hidden, refs["rec.ff_w"]), refs["rec.ff_b"]))
    hn = tape.layer_norm(h, refs["rec.norm_gain"], refs["rec.norm_bias"])
    return tape.matmul(hn, refs["embedding"], transpose_b=True)


def reconstruction_mask(mask: Sequence[int]) -> list[int]:
    """Positions scored by the reconstruction loss: masked-in, CLS excluded."""
    return [0] + [int(m) for m in mask[1:]]


def build_reconstruction_loss(
    tape: GradTape,
    refs: dict[str, int],
    token_hidden: int,
    token_ids: Sequence[int],
    mask: Sequence[int],
) -> int:
    logits = build_reconstruct_logits(tape, refs, token_hidden)
    return tape.cross_entropy(logits, token_ids, reconstruction_mask(mask))


# ---------------------------------------------------------------------------
# value-level wrappers
# ---------------------------------------------------------------------------


def embed(token_ids: Sequence[int], params: ModelParams) -> np.ndarray:
    tape = GradTape()
    refs = register_params(tape, params)
    return tape.value(build_embed(tape, refs, token_ids))


def encode(embeddings: np.ndarray, mask: Sequence[int], params: ModelParams) -> EncodedExample:
    tape = GradTape()
    refs = register_params(tape, params)
    x = tape.constant(embeddings)
    token_hidden, sentence = build_encode(tape, refs, x, mask)
    return EncodedExample(
        token_hidden=tape.value(token_hidden), sentence_rep=tape.value(sentence)[0]
    )


def attention_weights(
    embeddings: np.ndarray, mask: Sequence[int], params: ModelParams
) -> np.ndarray:
    """[L, L] attention matrix for inspection; rows sum to 1 over masked-in keys."""
    d_h = params.w_query.shape[1]
    tape = GradTape()
    x = tape.constant(embeddings)
    q = tape.matmul(x, tape.constant(params.w_query))
    k = tape.matmul(x, tape.constant(params.w_key))
    scores = tape.scale(tape.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d_h))
    scores = tape.add(scores, tape.constant(attention_bias(mask)))
    return tape.value(tape.softmax_rows(scores))


def classify(sentence_rep: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class probability vector softmax(W h)."""
    tape = GradTape()
    w = tape.leaf(params.classifier)
    h = tape.constant(as_f64(sentence_rep).reshape(1, -1))
    probs = tape.softmax_rows(tape.matmul(h, w, transpose_b=True))
    return tape.value(probs)[0]


def reconstruct_logits(token_hidden: np.ndarray, params: ModelParams) -> np.ndarray:
    tape = GradTape()
    refs = register_params(tape, params)
    return tape.value(build_reconstruct_logits(tape, refs, tape.constant(token_hidden)))


def reconstruction_loss(
    logits: np.ndarray, token_ids: Sequence[int], mask: Sequence[int]
) -> float:
    tape = GradTape()
    node = tape.cross_entropy(tape.constant(logits), token_ids, reconstruction_mask(mask))
    return float(tape.value(node))


def forward_encoded(
    params: ModelParams,
    token_ids: Sequence[int],
    mask: Sequence[int],
    delta: np.ndarray | None = None,
) -> EncodedExample:
    """Embed (optionally perturbed) and encode in one pass."""
    tape = GradTape()
    refs = register_params(tape, params)
    x = build_embed(tape, refs, token_ids)
    if delta is not None:
        x = tape.add(x, tape.constant(delta))
    token_hidden, sentence = build_encode(tape, refs, x, mask)
    return EncodedExample(
        token_hidden=tape.value(token_hidden), sentence_rep=tape.value(sentence)[0]
    )


def predict_probs(
    params: ModelParams,
    token_ids: Sequence[int],
    mask: Sequence[int],
    delta: np.ndarray | None = None,
) -> np.ndarray:
    """Class probabilities for one (optionally perturbed) example."""
    encoded = forward_encoded(params, token_ids, mask, delta)
    return classify(encoded.sentence_rep, params)


# ---------------------------------------------------------------------------
# checkpoint container: named tensors + plain-text header
# ---------------------------------------------------------------------------

_MAGIC = "advtext-tensors 1"
_CONFIG_KEYS = ("vocab_size", "embed_dim", "hidden_dim", "num_classes", "max_len")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write a flat container: text header (meta + tensor directory), then
    the concatenated little-endian float64 payload in directory order."""
    lines = [_MAGIC]
    for key, value in (meta or {}).items():
        if any(ch in key for ch in " =\n") or "\n" in value:
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key}={value}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims}".rstrip())
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(header)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"end\n"
    cut = blob.find(b"\n" + marker)
    if cut < 0:
        raise ValueError(f"not a tensor container (no header terminator): {path}")
    header = blob[:cut].decode("utf-8").split("\n")
    payload = blob[cut + 1 + len(marker):]
    if not header or header[0] != _MAGIC:
        raise ValueError(f"not a tensor container (bad magic): {path}")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            name, shape = parts[0], tuple(int(d) for d in parts[1:])
            size = int(np.prod(shape)) if shape else 1
            nbytes = size * 8
            if offset + nbytes > len(payload):
                raise ValueError(f"truncated tensor payload in {path}")
            arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_F64)
            tensors[name] = arr.reshape(shape).astype(np.float64)
            offset += nbytes
        else:
            raise ValueError(f"unrecognized header line {line!r} in {path}")
    if offset != len(payload):
        raise ValueError(f"trailing bytes after tensor payload in {path}")
    return tensors, meta


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    meta = {key: str(getattr(config, key)) for key in _CONFIG_KEYS}
    save_tensors(path, params.named_tensors(), meta)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    tensors, meta = load_tensors(path)
    try:
        config = ModelConfig(**{key: int(meta[key]) for key in _CONFIG_KEYS})
    except KeyError as exc:
        raise ValueError(f"checkpoint {path} is missing config field {exc}") from exc
    params = params_from_named(tensors)
    expected = {
        "embedding": (config.vocab_size, config.embed_dim),
        "positional": (config.max_len, config.embed_dim),
        "classifier": (config.num_classes, config.hidden_dim),
    }
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValueError(
                f"checkpoint {path} tensor {name} has shape {tensors[name].shape}, "
                f"config implies {shape}"
            )
    return config, params

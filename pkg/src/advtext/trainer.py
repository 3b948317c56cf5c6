"""Training loop: objective dispatch per mode, Adam updates, contrastive
delayed start, and memory-bank lifecycle.

Modes:
  plain   - clean classification loss only
  freelb  - mean adversarial classification loss over the n ascent steps,
            one parameter update per batch (inner iterations only accumulate)
  carl    - freelb plus, after the configured start step, the contrastive
            term with fresh anchors and memory-bank negatives
  rar     - freelb plus the weighted token reconstruction loss at the
            final perturbation

All randomness is derived statelessly from (seed, tag, step, example), so
identical configs replay bitwise and a saved state resumes the exact
trajectory.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import carl as carl_mod
from . import evaluation
from . import model as mdl
from .adversary import FreeLBConfig, freelb_generate
from .carl import CarlConfig, MemoryBank
from .data import TokenizedExample
from .numerics import GradTape
from .seeding import derive_rng

MODES = ("plain", "freelb", "carl", "rar")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    freelb: FreeLBConfig = FreeLBConfig()
    carl: CarlConfig | None = None
    w_r: float = 0.1  # reconstruction loss weight (rar mode)
    learning_rate: float = 1e-5
    batch_size: int = 32
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "carl" and self.carl is None:
            raise ValueError("carl mode requires a CarlConfig")
        if self.w_r < 0:
            raise ValueError("w_r must be >= 0")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, max_steps and eval_every must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: mdl.ModelParams) -> "AdamState":
        named = params.named_tensors()
        return cls(
            m={k: np.zeros_like(a) for k, a in named.items()},
            v={k: np.zeros_like(a) for k, a in named.items()},
        )


def adam_step(
    params: mdl.ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> mdl.ModelParams:
    """One bias-corrected Adam update; mutates the moment state, returns new
    parameters."""
    named = params.named_tensors()
    missing = set(named) - set(grads)
    if missing:
        raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
    for name, g in grads.items():
        if name in named and g.shape != named[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {named[name].shape} for {name}"
            )
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    updated = {}
    for name, value in named.items():
        g = grads[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params.replace_tensors(updated)


@dataclass
class StepRecord:
    step: int
    l_c: float
    l_d: float | None = None
    l_r: float | None = None
    val_acc: float | None = None


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    CSV_HEADER = "step,l_c,l_d,l_r,val_acc"

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.step},{fmt(r.l_c)},{fmt(r.l_d)},{fmt(r.l_r)},{fmt(r.val_acc)}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())


def total_loss(
    components: dict[str, float], mode: str, step: int, config: TrainConfig
) -> float:
    """Scalar training objective from its parts.

    plain/freelb use the (clean/adversarial) classification loss alone;
    carl adds the contrastive term once the start step is reached; rar
    adds the weighted reconstruction loss.
    """
    if "l_c" not in components:
        raise ValueError("total_loss requires the classification component l_c")
    l_c = components["l_c"]
    if mode in ("plain", "freelb"):
        return l_c
    if mode == "carl":
        assert config.carl is not None
        if step < config.carl.start_step:
            return l_c
        if "l_d" not in components:
            raise ValueError(f"carl mode at step {step} requires the contrastive component l_d")
        return l_c + components["l_d"]
    if mode == "rar":
        if "l_r" not in components:
            raise ValueError("rar mode requires the reconstruction component l_r")
        return l_c + config.w_r * components["l_r"]
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# per-example gradients
# ---------------------------------------------------------------------------


def _merge(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name in into:
            into[name] = into[name] + g
        else:
            into[name] = g


def _clean_loss_grads(params, example):
    tape = GradTape()
    refs = mdl.register_params(tape, params)
    x = mdl.build_embed(tape, refs, example.token_ids)
    _, sent = mdl.build_encode(tape, refs, x, example.mask)
    loss = mdl.build_classification_loss(tape, refs, sent, example.label)
    grads = tape.backward(loss, refs.values())
    return float(tape.value(loss)), {name: grads[ref] for name, ref in refs.items()}


def _contrastive_loss_grads(params, example, delta_values, neg_orig, neg_adv, cfg: CarlConfig):
    """Fresh clean and adversarial anchors on one tape; bank rows enter as
    constants. Returns (loss, grads, unit anchor values for the bank)."""
    tape = GradTape()
    refs = mdl.register_params(tape, params)
    x = mdl.build_embed(tape, refs, example.token_ids)
    _, sent_clean = mdl.build_encode(tape, refs, x, example.mask)
    x_adv = tape.add(x, tape.constant(delta_values))
    _, sent_adv = mdl.build_encode(tape, refs, x_adv, example.mask)
    anchor_orig = tape.unit_norm(sent_clean)
    anchor_adv = tape.unit_norm(sent_adv)
    loss = carl_mod.build_contrastive_loss(
        tape, anchor_orig, anchor_adv, neg_orig, neg_adv, cfg.temperature
    )
    grads = tape.backward(loss, refs.values())
    return (
        float(tape.value(loss)),
        {name: grads[ref] for name, ref in refs.items()},
        tape.value(anchor_orig)[0].copy(),
        tape.value(anchor_adv)[0].copy(),
    )


def _reconstruction_loss_grads(params, example, delta_values, w_r):
    """Reconstruction of the original ids from the perturbed representation;
    gradients come back already scaled by w_r."""
    tape = GradTape()
    refs = mdl.register_params(tape, params)
    x = mdl.build_embed(tape, refs, example.token_ids)
    x_adv = tape.add(x, tape.constant(delta_values))
    hidden, _ = mdl.build_encode(tape, refs, x_adv, example.mask)
    l_r = mdl.build_reconstruction_loss(tape, refs, hidden, example.token_ids, example.mask)
    grads = tape.backward(tape.scale(l_r, w_r), refs.values())
    return float(tape.value(l_r)), {name: grads[ref] for name, ref in refs.items()}


@dataclass
class ExampleResult:
    components: dict[str, float]
    grads: dict[str, np.ndarray]
    bank_entry: tuple[int, np.ndarray, np.ndarray] | None = None


def example_gradients(
    params: mdl.ModelParams,
    example: TokenizedExample,
    config: TrainConfig,
    step: int,
    bank: MemoryBank | None,
    labels: Sequence[int],
) -> ExampleResult:
    """Loss components and summed parameter gradients for one example."""
    if config.mode == "plain":
        loss, grads = _clean_loss_grads(params, example)
        return ExampleResult(components={"l_c": loss}, grads=grads)

    rng = derive_rng(config.seed, "freelb", step, example.index)
    res = freelb_generate(example, params, config.freelb, rng)
    components = {"l_c": res.mean_loss}
    grads = dict(res.grads)
    bank_entry = None

    if config.mode == "carl" and step >= config.carl.start_step:
        if bank is None or not bank.initialized:
            raise ValueError("contrastive loss requires an initialized memory bank")
        neg_rng = derive_rng(config.seed, "negatives", step, example.index)
        idx = carl_mod.sample_negatives(labels, example.label, config.carl.m, neg_rng)
        l_d, d_grads, fresh_orig, fresh_adv = _contrastive_loss_grads(
            params, example, res.delta.values, bank.orig[idx], bank.adv[idx], config.carl
        )
        components["l_d"] = l_d
        _merge(grads, d_grads)
        bank_entry = (example.index, fresh_orig, fresh_adv)
    elif config.mode == "rar":
        l_r, r_grads = _reconstruction_loss_grads(
            params, example, res.delta.values, config.w_r
        )
        components["l_r"] = l_r
        _merge(grads, r_grads)

    return ExampleResult(components=components, grads=grads, bank_entry=bank_entry)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: mdl.ModelParams
    adam: AdamState
    next_step: int
    bank: MemoryBank | None = None


@dataclass
class TrainResult:
    params: mdl.ModelParams
    bank: MemoryBank | None
    history: TrainHistory
    state: TrainState
    best_params: mdl.ModelParams
    best_val_acc: float
    best_step: int


def _validate_dataset(train_set: Sequence[TokenizedExample], config: TrainConfig) -> list[int]:
    indices = sorted(ex.index for ex in train_set)
    if indices != list(range(len(train_set))):
        raise ValueError("training example indices must be a bijection onto [0, N)")
    labels = [0] * len(train_set)
    for ex in train_set:
        labels[ex.index] = ex.label
    if config.mode == "carl":
        counts = np.bincount(labels)
        available = len(labels) - counts[counts > 0]
        if config.carl.m > int(available.min()):
            raise ValueError(
                f"carl.m={config.carl.m} exceeds the available negatives "
                f"({int(available.min())}) for some class"
            )
    return labels


def train(
    train_set: Sequence[TokenizedExample],
    val_set: Sequence[TokenizedExample],
    model_config: mdl.ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    resume: TrainState | None = None,
) -> TrainResult:
    """Run max_steps mini-batch steps and return the trained parameters,
    the memory bank (carl mode), and the per-step history.

    With ``out_dir`` set, emits a model checkpoint at every evaluation
    point plus ``final.ckpt``, ``best.ckpt``, ``state.bin`` and
    ``history.csv``.
    """
    labels = _validate_dataset(train_set, train_config)
    by_index = [None] * len(train_set)
    for ex in train_set:
        by_index[ex.index] = ex

    history = TrainHistory()
    if resume is not None:
        params, adam, bank = resume.params, resume.adam, resume.bank
        first_step = resume.next_step
    else:
        params = mdl.init_params(
            model_config, train_config.seed, reconstructor=train_config.mode == "rar"
        )
        adam = AdamState.for_params(params)
        bank = None
        first_step = 0

    if train_config.mode == "carl" and train_config.carl.start_step >= train_config.max_steps:
        note = (
            f"carl start_step {train_config.carl.start_step} >= max_steps "
            f"{train_config.max_steps}: the contrastive loss never activates"
        )
        history.notes.append(note)
        warnings.warn(note)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    best_params = params.copy()
    best_val_acc = -1.0
    best_step = -1
    n = len(train_set)
    batch_size = min(train_config.batch_size, n)

    for step in range(first_step, train_config.max_steps):
        if (
            train_config.mode == "carl"
            and step == train_config.carl.start_step
            and (bank is None or not bank.initialized)
        ):
            bank = carl_mod.bank_init(
                params,
                by_index,
                train_config.freelb,
                train_config.carl.momentum,
                train_config.seed,
            )

        batch_rng = derive_rng(train_config.seed, "batch", step)
        batch = batch_rng.choice(n, size=batch_size, replace=False)

        grad_sums: dict[str, np.ndarray] = {}
        component_sums: dict[str, float] = {}
        component_counts: dict[str, int] = {}
        pending_bank: list[tuple[int, np.ndarray, np.ndarray]] = []
        for index in batch:
            result = example_gradients(
                params, by_index[index], train_config, step, bank, labels
            )
            _merge(grad_sums, result.grads)
            for key, value in result.components.items():
                component_sums[key] = component_sums.get(key, 0.0) + value
                component_counts[key] = component_counts.get(key, 0) + 1
            if result.bank_entry is not None:
                pending_bank.append(result.bank_entry)

        for index, fresh_orig, fresh_adv in pending_bank:
            carl_mod.bank_update(bank, index, fresh_orig, fresh_adv)

        mean_grads = {name: g / float(batch_size) for name, g in grad_sums.items()}
        params = adam_step(params, mean_grads, adam, train_config.learning_rate)

        record = StepRecord(
            step=step,
            l_c=component_sums["l_c"] / component_counts["l_c"],
            l_d=(
                component_sums["l_d"] / component_counts["l_d"]
                if "l_d" in component_sums
                else None
            ),
            l_r=(
                component_sums["l_r"] / component_counts["l_r"]
                if "l_r" in component_sums
                else None
            ),
        )
        at_eval = (step + 1) % train_config.eval_every == 0
        last = step + 1 == train_config.max_steps
        if (at_eval or last) and val_set:
            record.val_acc = evaluation.accuracy(params, val_set)
            if record.val_acc > best_val_acc:
                best_val_acc = record.val_acc
                best_step = step
                best_params = params.copy()
            if out_dir is not None and at_eval:
                mdl.save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{step + 1:06d}.ckpt"),
                    model_config,
                    params,
                )
        history.records.append(record)

    state = TrainState(params=params, adam=adam, next_step=train_config.max_steps, bank=bank)
    if best_step < 0:  # no evaluation points: fall back to the final model
        best_params, best_val_acc, best_step = params.copy(), float("nan"), train_config.max_steps - 1

    if out_dir is not None:
        mdl.save_checkpoint(os.path.join(out_dir, "final.ckpt"), model_config, params)
        mdl.save_checkpoint(os.path.join(out_dir, "best.ckpt"), model_config, best_params)
        save_train_state(os.path.join(out_dir, "state.bin"), model_config, state)
        history.write_csv(os.path.join(out_dir, "history.csv"))

    return TrainResult(
        params=params,
        bank=bank,
        history=history,
        state=state,
        best_params=best_params,
        best_val_acc=best_val_acc,
        best_step=best_step,
    )


# ---------------------------------------------------------------------------
# full-state persistence (resume support)
# ---------------------------------------------------------------------------


def save_train_state(path, model_config: mdl.ModelConfig, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = dict(state.params.named_tensors())
    for name, arr in state.adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam.v.{name}"] = arr
    meta = {key: str(getattr(model_config, key)) for key in mdl._CONFIG_KEYS}
    meta["adam.t"] = str(state.adam.t)
    meta["next_step"] = str(state.next_step)
    if state.bank is not None:
        tensors["bank.orig"] = state.bank.orig
        tensors["bank.adv"] = state.bank.adv
        meta["bank.momentum"] = repr(state.bank.momentum)
        meta["bank.initialized"] = str(int(state.bank.initialized))
    mdl.save_tensors(path, tensors, meta)


def load_train_state(path) -> tuple[mdl.ModelConfig, TrainState]:
    tensors, meta = mdl.load_tensors(path)
    config = mdl.ModelConfig(**{key: int(meta[key]) for key in mdl._CONFIG_KEYS})
    param_tensors = {
        k: v for k, v in tensors.items() if not k.startswith(("adam.", "bank."))
    }
    params = mdl.params_from_named(param_tensors)
    adam = AdamState(
        m={k: tensors[f"adam.m.{k}"] for k in param_tensors},
        v={k: tensors[f"adam.v.{k}"] for k in param_tensors},
        t=int(meta["adam.t"]),
    )
    bank = None
    if "bank.orig" in tensors:
        bank = MemoryBank(
            orig=tensors["bank.orig"].copy(),
            adv=tensors["bank.adv"].copy(),
            momentum=float(meta["bank.momentum"]),
            initialized=bool(int(meta["bank.initialized"])),
        )
    return config, TrainState(
        params=params, adam=adam, next_step=int(meta["next_step"]), bank=bank
    )

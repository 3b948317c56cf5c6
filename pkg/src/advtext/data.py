"""Dataset ingestion, vocabulary, tokenization, and a synthetic task generator.

Datasets are plain TSV (``label<TAB>text``, no header). Tokenization is
lowercased whitespace splitting against a frequency-built vocabulary with
three reserved ids: 0=[PAD], 1=[UNK], 2=[CLS]. The synthetic generator
plants class-indicator words into filler text, giving a linearly
separable task that grounds the training acceptance thresholds.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")


@dataclass
class RawDataset:
    records: list[tuple[int, str]]
    num_classes: int

    def __post_init__(self):
        if not self.records:
            raise ValueError("dataset is empty")
        for label, _ in self.records:
            if not 0 <= label < self.num_classes:
                raise ValueError(f"label {label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]


@dataclass(frozen=True)
class TokenizedExample:
    index: int  # memory-bank row id, unique within a dataset
    token_ids: tuple[int, ...]
    mask: tuple[int, ...]
    label: int


def load_tsv(path) -> RawDataset:
    """Read ``label<TAB>text`` lines; CRLF tolerated, malformed lines rejected."""
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        label_str, tab, text = line.partition("\t")
        if not tab:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text', got {line!r}")
        try:
            label = int(label_str)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: label {label_str!r} is not an integer")
        if label < 0:
            raise ValueError(f"{path}:{lineno}: label must be nonnegative")
        records.append((label, text))
    num_classes = max(label for label, _ in records) + 1
    return RawDataset(records=records, num_classes=num_classes)


def save_tsv(dataset: RawDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for label, text in dataset.records:
            f.write(f"{label}\t{text}\n")


def build_vocab(raw: RawDataset, min_freq: int = 1, max_size: int = 10000) -> Vocabulary:
    """Frequency vocabulary over lowercased whitespace tokens.

    Keeps tokens with frequency >= min_freq, most frequent first, ties
    broken lexicographically, truncated to max_size; reserved ids prepended.
    """
    counts: Counter[str] = Counter()
    for _, text in raw.records:
        counts.update(text.lower().split())
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )[:max_size]
    id_to_token = list(RESERVED) + kept
    return Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=id_to_token,
    )


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[int]]:
    """[CLS] + token ids, truncated to max_len - 1 tokens and PAD-filled.

    Returns (token_ids, mask); the mask marks CLS plus real tokens.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    words = text.lower().split()[: max_len - 1]
    ids = [CLS_ID] + [vocab.lookup(w) for w in words]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return ids + [PAD_ID] * pad, mask + [0] * pad


def detokenize(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of tokenize for in-vocabulary text; drops CLS and PAD."""
    words = [vocab.token(t) for t in token_ids if t not in (PAD_ID, CLS_ID)]
    return " ".join(words)


def tokenize_dataset(
    raw: RawDataset, vocab: Vocabulary, max_len: int
) -> list[TokenizedExample]:
    """Tokenize every record; indices enumerate records as bank row ids."""
    out = []
    for index, (label, text) in enumerate(raw.records):
        ids, mask = tokenize(text, vocab, max_len)
        out.append(
            TokenizedExample(index=index, token_ids=tuple(ids), mask=tuple(mask), label=label)
        )
    return out


def indicator_word(label: int, j: int) -> str:
    """The j-th class-indicator word planted by the synthetic generator."""
    return f"key{label}x{j}"


def filler_word(k: int) -> str:
    return f"w{k:03d}"


def synth_generate(
    num_classes: int,
    num_examples: int,
    vocab_size: int,
    len_range: tuple[int, int],
    keyword_count_per_class: int,
    seed: int,
) -> RawDataset:
    """Seeded synthetic classification task, linearly separable by construction.

    Reserves keyword_count_per_class indicator words per class plus a
    shared filler pool (vocab_size words in total). Each example draws a
    length from len_range, plants 1-3 indicator words of its own class at
    random positions, fills the rest with filler words. Classes are
    balanced to within one example.
    """
    n_keywords = num_classes * keyword_count_per_class
    if vocab_size <= n_keywords:
        raise ValueError(
            f"vocab_size must exceed {n_keywords} "
            f"({num_classes} classes x {keyword_count_per_class} keywords)"
        )
    if len_range[0] < 1 or len_range[1] < len_range[0]:
        raise ValueError(f"bad length range {len_range}")
    fillers = [filler_word(k) for k in range(vocab_size - n_keywords)]
    keywords = {
        c: [indicator_word(c, j) for j in range(keyword_count_per_class)]
        for c in range(num_classes)
    }
    rng = np.random.default_rng(seed)
    records = []
    for i in range(num_examples):
        label = i % num_classes  # balanced assignment
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        n_ind = min(int(rng.integers(1, 4)), length)
        positions = set(rng.choice(length, size=n_ind, replace=False).tolist())
        words = [
            keywords[label][int(rng.integers(keyword_count_per_class))]
            if pos in positions
            else fillers[int(rng.integers(len(fillers)))]
            for pos in range(length)
        ]
        records.append((label, " ".join(words)))
    order = rng.permutation(num_examples)
    records = [records[i] for i in order]
    return RawDataset(records=records, num_classes=num_classes)

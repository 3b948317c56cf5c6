"""Contrastive adversarial representation learning.

Dual memory banks hold one unit-normalized clean and adversarial
sentence representation per training example, refreshed by momentum
mixing. The contrastive loss scores anchor/positive pairs against m
sampled different-label negatives with an exponentiated, temperature-
scaled dot product; both anchored terms are evaluated in log space so
the reported temperature of 0.07 cannot overflow.

The denominator sums over the negatives only, exactly as the objective
is stated, which admits negative loss values; an
``include_positive_in_denominator`` switch (default off) restores the
more common formulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as mdl
from .adversary import FreeLBConfig, freelb_generate
from .data import TokenizedExample
from .numerics import GradTape
from .seeding import derive_rng

# training step after which the contrastive term switches on, per corpus
CARL_START_STEPS = {"sst2": 6315, "yahoo": 7200, "yelp": 5625, "agnews": 7750}


@dataclass(frozen=True)
class CarlConfig:
    m: int  # sampled negatives per anchor
    temperature: float = 0.07
    momentum: float = 0.5
    start_step: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")


@dataclass
class MemoryBank:
    orig: np.ndarray  # [N, d_h], unit rows once initialized
    adv: np.ndarray  # [N, d_h]
    momentum: float
    initialized: bool = False

    @classmethod
    def allocate(cls, n: int, hidden_dim: int, momentum: float) -> "MemoryBank":
        return cls(
            orig=np.zeros((n, hidden_dim)),
            adv=np.zeros((n, hidden_dim)),
            momentum=momentum,
        )

    @property
    def size(self) -> int:
        return self.orig.shape[0]


def unit(v: np.ndarray) -> np.ndarray:
    """v scaled to unit L2 norm; zero-norm input is an error."""
    n = float(np.sqrt(np.dot(v.ravel(), v.ravel())))
    if n < 1e-12:
        raise ValueError("cannot unit-normalize a zero-norm representation")
    return v / n


def bank_init(
    params: mdl.ModelParams,
    dataset: Sequence[TokenizedExample],
    freelb_cfg: FreeLBConfig,
    momentum: float,
    seed: int,
) -> MemoryBank:
    """Full pass over the training set filling both banks.

    Each example contributes its clean sentence representation and the
    representation at the final multi-step perturbation (no parameter
    update happens here). Rows are stored unit-normalized.
    """
    bank = MemoryBank.allocate(len(dataset), params.w_query.shape[1], momentum)
    for ex in dataset:
        clean = mdl.forward_encoded(params, ex.token_ids, ex.mask).sentence_rep
        res = freelb_generate(params=params, example=ex, cfg=freelb_cfg,
                              rng=derive_rng(seed, "bank-init", ex.index))
        attacked = mdl.forward_encoded(
            params, ex.token_ids, ex.mask, res.delta.values
        ).sentence_rep
        bank.orig[ex.index] = unit(clean)
        bank.adv[ex.index] = unit(attacked)
    bank.initialized = True
    return bank


def bank_update(
    bank: MemoryBank,
    index: int,
    r_orig: np.ndarray,
    r_adv: np.ndarray,
    momentum: float | None = None,
) -> None:
    """Momentum-mix fresh (unit-normalized) representations into row ``index``.

    New row = M * old + (1 - M) * fresh, then rescaled to unit length.
    Callers pass representations that are already unit-normalized; the
    post-mix rescaling keeps the bank rows unit regardless.
    """
    if not bank.initialized:
        raise ValueError("memory bank is not initialized")
    if not 0 <= index < bank.size:
        raise ValueError(f"bank index {index} out of range [0, {bank.size})")
    m = bank.momentum if momentum is None else momentum
    for store, fresh in ((bank.orig, r_orig), (bank.adv, r_adv)):
        mixed = m * store[index] + (1.0 - m) * fresh
        store[index] = mixed / float(np.sqrt(np.dot(mixed, mixed)))


def sample_negatives(
    labels: Sequence[int], anchor_label: int, m: int, rng: np.random.Generator
) -> np.ndarray:
    """m distinct indices with labels different from the anchor's, uniform
    without replacement."""
    candidates = np.flatnonzero(np.asarray(labels) != anchor_label)
    if len(candidates) < m:
        raise ValueError(
            f"only {len(candidates)} negatives available for anchor label "
            f"{anchor_label}, need {m}"
        )
    return rng.choice(candidates, size=m, replace=False)


def score(x1: np.ndarray, x2: np.ndarray, temperature: float) -> float:
    """Discriminating score exp(x1 . x2 / temperature).

    Naive evaluation; overflows for small temperatures with aligned unit
    vectors, which is why the loss itself works in log space.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return float(np.exp(np.dot(x1.ravel(), x2.ravel()) / temperature))


def build_anchored_loss(
    tape: GradTape,
    anchor: int,
    positive: int,
    negatives: np.ndarray,
    temperature: float,
    include_positive_in_denominator: bool = False,
) -> int:
    """-log(score(anchor, positive) / sum_j score(anchor, neg_j)) in log space.

    ``anchor`` and ``positive`` are [1, d] tape nodes (gradients flow);
    the negative rows enter as constants.
    """
    inv_t = 1.0 / temperature
    negs = tape.constant(negatives)
    neg_scores = tape.scale(tape.matmul(anchor, negs, transpose_b=True), inv_t)
    pos_score = tape.scale(tape.dot(anchor, positive), inv_t)
    denominator = tape.lse(neg_scores)
    if include_positive_in_denominator:
        denominator = tape.lse_pair(denominator, pos_score)
    return tape.add(denominator, tape.scale(pos_score, -1.0))


def build_contrastive_loss(
    tape: GradTape,
    r_orig: int,
    r_adv: int,
    neg_orig: np.ndarray,
    neg_adv: np.ndarray,
    temperature: float,
    include_positive_in_denominator: bool = False,
) -> int:
    """Sum of the two anchored terms: the adversarial anchor scored against
    clean-bank negatives plus the clean anchor scored against adversarial-
    bank negatives."""
    anchored_adv = build_anchored_loss(
        tape, r_adv, r_orig, neg_orig, temperature, include_positive_in_denominator
    )
    anchored_orig = build_anchored_loss(
        tape, r_orig, r_adv, neg_adv, temperature, include_positive_in_denominator
    )
    return tape.add(anchored_orig, anchored_adv)


def contrastive_loss(
    r_orig: np.ndarray,
    r_adv: np.ndarray,
    neg_orig: np.ndarray,
    neg_adv: np.ndarray,
    temperature: float,
    include_positive_in_denominator: bool = False,
) -> float:
    """Value-level evaluation of the two-term contrastive loss."""
    tape = GradTape()
    node = build_contrastive_loss(
        tape,
        tape.constant(np.asarray(r_orig).reshape(1, -1)),
        tape.constant(np.asarray(r_adv).reshape(1, -1)),
        neg_orig,
        neg_adv,
        temperature,
        include_positive_in_denominator,
    )
    return float(tape.value(node))

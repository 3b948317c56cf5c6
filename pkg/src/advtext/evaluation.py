"""Robustness analysis suite: clean/attacked accuracy, representation
distances, per-token perturbation norms, and adversarial text
reconstruction.

Distances are measured on raw (un-normalized) sentence representations,
not the unit-length memory-bank copies. Attacks run with a fixed caller-
supplied seed so every report is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import model as mdl
from .adversary import AttackConfig, Delta, kpgd_attack
from .data import CLS_ID, PAD_ID, TokenizedExample, Vocabulary, detokenize
from .seeding import derive_rng


class DistanceReport(NamedTuple):
    mean_cosine: float
    mean_euclidean: float
    skipped: int  # zero-norm representations left out of the averages


@dataclass
class RobustnessReport:
    clean_accuracy: float
    robust_accuracy: float
    mean_cosine: float
    mean_euclidean: float
    attack: AttackConfig
    skipped: int = 0

    CSV_HEADER = "clean_acc,robust_acc,mean_cos,mean_euc"

    def csv_row(self) -> str:
        return ",".join(
            repr(float(v))
            for v in (
                self.clean_accuracy,
                self.robust_accuracy,
                self.mean_cosine,
                self.mean_euclidean,
            )
        )

    def text_block(self) -> str:
        a = self.attack
        lines = [
            f"attack: k_steps={a.k_steps} alpha={a.alpha} epsilon={a.epsilon} gamma={a.gamma}",
            f"clean accuracy:   {self.clean_accuracy:.4f}",
            f"robust accuracy:  {self.robust_accuracy:.4f}",
            f"mean cosine(R, R_adv):    {self.mean_cosine:.4f}",
            f"mean euclidean(R, R_adv): {self.mean_euclidean:.4f}",
        ]
        if self.skipped:
            lines.append(f"skipped zero-norm representations: {self.skipped}")
        return "\n".join(lines)


def _attack_delta(
    params: mdl.ModelParams,
    example: TokenizedExample,
    cfg: AttackConfig,
    seed: int,
) -> Delta:
    rng = derive_rng(seed, "attack", example.index) if cfg.gamma > 0 else None
    return kpgd_attack(example, params, cfg, rng)


def accuracy(params: mdl.ModelParams, dataset: Sequence[TokenizedExample]) -> float:
    """Fraction of examples whose argmax class matches the label."""
    if not dataset:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    hits = 0
    for ex in dataset:
        probs = mdl.predict_probs(params, ex.token_ids, ex.mask)
        hits += int(np.argmax(probs)) == ex.label
    return hits / len(dataset)


def robust_accuracy(
    params: mdl.ModelParams,
    dataset: Sequence[TokenizedExample],
    attack_cfg: AttackConfig,
    seed: int = 0,
) -> float:
    """Accuracy with every example classified at its attacked embedding."""
    if not dataset:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    hits = 0
    for ex in dataset:
        delta = _attack_delta(params, ex, attack_cfg, seed)
        probs = mdl.predict_probs(params, ex.token_ids, ex.mask, delta.values)
        hits += int(np.argmax(probs)) == ex.label
    return hits / len(dataset)


def representation_distance(
    params: mdl.ModelParams,
    dataset: Sequence[TokenizedExample],
    attack_cfg: AttackConfig,
    seed: int = 0,
) -> DistanceReport:
    """Mean cosine similarity and Euclidean distance between each example's
    clean and attacked sentence representation (raw, un-normalized)."""
    if not dataset:
        raise ValueError("cannot evaluate distances on an empty dataset")
    cosines: list[float] = []
    euclids: list[float] = []
    skipped = 0
    for ex in dataset:
        clean = mdl.forward_encoded(params, ex.token_ids, ex.mask).sentence_rep
        delta = _attack_delta(params, ex, attack_cfg, seed)
        attacked = mdl.forward_encoded(
            params, ex.token_ids, ex.mask, delta.values
        ).sentence_rep
        n1, n2 = float(np.linalg.norm(clean)), float(np.linalg.norm(attacked))
        if n1 < 1e-12 or n2 < 1e-12:
            skipped += 1
            continue
        cosines.append(float(np.dot(clean, attacked)) / (n1 * n2))
        euclids.append(float(np.linalg.norm(clean - attacked)))
    if not cosines:
        raise ValueError("every representation had zero norm")
    return DistanceReport(
        mean_cosine=float(np.mean(cosines)),
        mean_euclidean=float(np.mean(euclids)),
        skipped=skipped,
    )


def per_token_perturbation_norms(delta: Delta) -> list[float]:
    """L2 norm of each perturbation row; masked-out rows report 0."""
    return [float(np.linalg.norm(row)) for row in delta.values]


def reconstruct_text(
    params: mdl.ModelParams,
    example: TokenizedExample,
    attack_cfg: AttackConfig,
    vocab: Vocabulary,
    seed: int = 0,
) -> list[str]:
    """Tokens decoded from the reconstructor at the attacked representation.

    One token per masked-in non-CLS position, by logit argmax.
    """
    if params.reconstructor is None:
        raise ValueError("no reconstructor head in these parameters")
    delta = _attack_delta(params, example, attack_cfg, seed)
    encoded = mdl.forward_encoded(params, example.token_ids, example.mask, delta.values)
    logits = mdl.reconstruct_logits(encoded.token_hidden, params)
    tokens = []
    for pos in range(1, len(example.token_ids)):
        if example.mask[pos]:
            tokens.append(vocab.token(int(np.argmax(logits[pos]))))
    return tokens


def token_reconstruction_accuracy(
    params: mdl.ModelParams,
    dataset: Sequence[TokenizedExample],
    attack_cfg: AttackConfig,
    vocab: Vocabulary,
    seed: int = 0,
) -> float:
    """Fraction of masked-in non-CLS positions whose argmax recovers the
    original token."""
    hits = total = 0
    for ex in dataset:
        predicted = reconstruct_text(params, ex, attack_cfg, vocab, seed)
        originals = [
            vocab.token(tid)
            for pos, tid in enumerate(ex.token_ids)
            if pos > 0 and ex.mask[pos]
        ]
        total += len(originals)
        hits += sum(p == o for p, o in zip(predicted, originals))
    if total == 0:
        raise ValueError("dataset has no reconstruction targets")
    return hits / total


def original_tokens(example: TokenizedExample, vocab: Vocabulary) -> list[str]:
    """The masked-in non-CLS tokens of an example, as text."""
    return [
        vocab.token(tid)
        for pos, tid in enumerate(example.token_ids)
        if pos > 0 and example.mask[pos] and tid not in (PAD_ID, CLS_ID)
    ]


def robustness_report(
    params: mdl.ModelParams,
    dataset: Sequence[TokenizedExample],
    attack_cfg: AttackConfig,
    seed: int = 0,
) -> RobustnessReport:
    distances = representation_distance(params, dataset, attack_cfg, seed)
    return RobustnessReport(
        clean_accuracy=accuracy(params, dataset),
        robust_accuracy=robust_accuracy(params, dataset, attack_cfg, seed),
        mean_cosine=distances.mean_cosine,
        mean_euclidean=distances.mean_euclidean,
        attack=attack_cfg,
        skipped=distances.skipped,
    )

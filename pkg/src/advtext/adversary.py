"""Gradient-based embedding perturbations: multi-step training-time
generation with "free" parameter-gradient accumulation, and k-step
projected gradient attacks for evaluation.

Perturbations live on the combined token+positional embedding of one
example. The norm convention is a single Frobenius norm over the whole
[L, d_e] perturbation; epsilon = 0 means the norm is not limited.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from .data import TokenizedExample
from .numerics import GradTape

ZERO_GRAD_EPS = 1e-12


@dataclass(frozen=True)
class FreeLBConfig:
    gamma: float = 0.0  # initial random perturbation magnitude
    alpha: float = 0.1  # ascent step size
    epsilon: float = 0.0  # max Frobenius norm; 0 = unbounded
    n_steps: int = 1

    def __post_init__(self):
        if self.gamma < 0 or self.epsilon < 0:
            raise ValueError("gamma and epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    k_steps: int = 3
    alpha: float = 0.1
    epsilon: float = 0.0
    gamma: float = 0.0  # random-start magnitude; 0 keeps attacks deterministic

    def __post_init__(self):
        if self.k_steps < 0:
            raise ValueError("k_steps must be >= 0")
        if self.gamma < 0 or self.epsilon < 0:
            raise ValueError("gamma and epsilon must be >= 0")


# per-dataset settings reported for the four benchmark corpora
PRESETS: dict[str, FreeLBConfig] = {
    "sst2": FreeLBConfig(gamma=0.6, alpha=0.1, epsilon=0.0, n_steps=2),
    "yahoo": FreeLBConfig(gamma=0.0, alpha=0.01, epsilon=0.0, n_steps=3),
    "yelp": FreeLBConfig(gamma=0.5, alpha=0.05, epsilon=0.0, n_steps=3),
    "agnews": FreeLBConfig(gamma=0.0, alpha=0.01, epsilon=0.0, n_steps=3),
}

# hyperparameter search region (grid values must stay inside these)
SEARCH_BOUNDS = {
    "gamma": (0.0, 0.8),
    "alpha": (0.01, 0.2),
    "epsilon": (0.0, 0.5),
    "n_steps": (2, 4),
}


@dataclass(frozen=True)
class Delta:
    """Per-example additive perturbation; PAD rows are exactly zero."""

    values: np.ndarray  # [L, d_e]
    mask: tuple[int, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.mask):
            raise ValueError(
                f"delta shape {self.values.shape} does not match mask length {len(self.mask)}"
            )
        rows = np.asarray(self.mask) == 0
        if rows.any() and np.any(self.values[rows] != 0.0):
            raise ValueError("delta rows at masked-out positions must be exactly zero")

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values * self.values)))


def _row_mask(mask: Sequence[int]) -> np.ndarray:
    return (np.asarray(mask, dtype=np.float64) > 0)[:, None]


def project(values: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale onto the Frobenius epsilon-ball; feasible input passes through
    untouched (epsilon = 0 disables projection entirely)."""
    if epsilon <= 0:
        return values
    norm = float(np.sqrt(np.sum(values * values)))
    if norm <= epsilon:
        return values
    return values * (epsilon / norm)


def init_perturbation(
    shape: tuple[int, int],
    gamma: float,
    mask: Sequence[int],
    rng: np.random.Generator,
) -> Delta:
    """Uniform noise on masked-in rows, globally rescaled to Frobenius norm gamma."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    mask = tuple(int(m) for m in mask)
    if gamma == 0:
        return Delta(values=np.zeros(shape), mask=mask)
    values = rng.uniform(-1.0, 1.0, size=shape) * _row_mask(mask)
    norm = float(np.sqrt(np.sum(values * values)))
    if norm < ZERO_GRAD_EPS:
        return Delta(values=np.zeros(shape), mask=mask)
    return Delta(values=values * (gamma / norm), mask=mask)


def ascent_step(delta: Delta, grad: np.ndarray, alpha: float, epsilon: float) -> Delta:
    """One normalized gradient-ascent step followed by projection.

    The gradient is zeroed at masked-out rows first; a vanishing gradient
    (norm < 1e-12) skips the step rather than dividing by a tiny norm.
    """
    if grad.shape != delta.values.shape:
        raise ValueError(f"gradient shape {grad.shape} != delta shape {delta.values.shape}")
    g = grad * _row_mask(delta.mask)
    norm = float(np.sqrt(np.sum(g * g)))
    if norm < ZERO_GRAD_EPS:
        return delta
    stepped = delta.values + (alpha / norm) * g
    return Delta(values=project(stepped, epsilon), mask=delta.mask)


@dataclass
class FreeLBResult:
    delta: Delta  # final perturbation, after the last ascent step
    grads: dict[str, np.ndarray]  # parameter gradients averaged over the steps
    mean_loss: float
    step_deltas: list[np.ndarray] = field(default_factory=list)  # delta used per forward
    step_losses: list[float] = field(default_factory=list)


def _adversarial_pass(
    params: mdl.ModelParams,
    example: TokenizedExample,
    delta_values: np.ndarray,
    param_leaves: bool,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Forward at perturbed embeddings; returns (loss, param grads, delta grad)."""
    tape = GradTape()
    refs = mdl.register_params(tape, params)
    dnode = tape.leaf(delta_values)
    x = tape.add(mdl.build_embed(tape, refs, example.token_ids), dnode)
    _, sentence = mdl.build_encode(tape, refs, x, example.mask)
    loss = mdl.build_classification_loss(tape, refs, sentence, example.label)
    leaves = (list(refs.values()) if param_leaves else []) + [dnode]
    grads = tape.backward(loss, leaves)
    param_grads = {name: grads[ref] for name, ref in refs.items()} if param_leaves else {}
    return float(tape.value(loss)), param_grads, grads[dnode]


def freelb_generate(
    example: TokenizedExample,
    params: mdl.ModelParams,
    cfg: FreeLBConfig,
    rng: np.random.Generator,
) -> FreeLBResult:
    """Multi-step perturbation generation with free gradient accumulation.

    Runs n forward-backward iterations; iteration t evaluates the
    classification loss at the current delta, accumulates the parameter
    gradients, and takes one ascent step on delta. Parameter gradients are
    averaged (not summed) over the n steps so n does not rescale the
    effective learning rate.
    """
    shape = (len(example.token_ids), params.embedding.shape[1])
    delta = init_perturbation(shape, cfg.gamma, example.mask, rng)
    sums: dict[str, np.ndarray] = {}
    step_deltas: list[np.ndarray] = []
    step_losses: list[float] = []
    for _ in range(cfg.n_steps):
        step_deltas.append(delta.values)
        loss, param_grads, delta_grad = _adversarial_pass(
            params, example, delta.values, param_leaves=True
        )
        step_losses.append(loss)
        for name, g in param_grads.items():
            if name in sums:
                sums[name] = sums[name] + g
            else:
                sums[name] = g
        delta = ascent_step(delta, delta_grad, cfg.alpha, cfg.epsilon)
    n = float(cfg.n_steps)
    return FreeLBResult(
        delta=delta,
        grads={name: g / n for name, g in sums.items()},
        mean_loss=sum(step_losses) / n,
        step_deltas=step_deltas,
        step_losses=step_losses,
    )


def kpgd_attack(
    example: TokenizedExample,
    params: mdl.ModelParams,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> Delta:
    """k-step projected gradient attack; no parameter-gradient accumulation."""
    shape = (len(example.token_ids), params.embedding.shape[1])
    if cfg.gamma > 0:
        if rng is None:
            raise ValueError("a random start (gamma > 0) requires an rng")
        delta = init_perturbation(shape, cfg.gamma, example.mask, rng)
    else:
        delta = Delta(values=np.zeros(shape), mask=tuple(int(m) for m in example.mask))
    for _ in range(cfg.k_steps):
        _, _, delta_grad = _adversarial_pass(params, example, delta.values, param_leaves=False)
        delta = ascent_step(delta, delta_grad, cfg.alpha, cfg.epsilon)
    return delta

"""Dense float64 tensor ops with reverse-mode differentiation.

Values are C-contiguous ``numpy.float64`` arrays and are treated as
immutable once handed to a tape. A :class:`GradTape` records a fixed set
of ops (matmul, add, elementwise multiply, scale, softmax, layer norm,
GELU, row gather, masked mean, dot, unit-norm, log-sum-exp, cross
entropy); backward walks the recorded graph once, in reverse, and returns
exact gradients for the requested leaves. One tape per training step,
never shared across threads.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def as_f64(values) -> np.ndarray:
    """Coerce to a C-ordered float64 array (rank 0 stays rank 0)."""
    return np.asarray(values, dtype=np.float64, order="C")


class _Node:
    """One recorded op: kind, input node ids, forward value, saved context."""

    __slots__ = ("op", "inputs", "value", "ctx")

    def __init__(self, op: str, inputs: tuple, value: np.ndarray, ctx=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx


class GradTape:
    """Append-only computation record.

    Node ids are ints in creation order, which is automatically a
    topological order: every input id precedes its consumers.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: set[int] = set()

    def __len__(self) -> int:
        return len(self._nodes)

    def value(self, node: int) -> np.ndarray:
        """Forward value stored at a node."""
        return self._nodes[node].value

    def shape(self, node: int) -> tuple:
        return self._nodes[node].value.shape

    def is_leaf(self, node: int) -> bool:
        return node in self._leaves

    def _push(self, op: str, inputs: tuple, value: np.ndarray, ctx=None) -> int:
        self._nodes.append(_Node(op, inputs, value, ctx))
        return len(self._nodes) - 1

    # ------------------------------------------------------------------
    # inputs
    # ------------------------------------------------------------------

    def leaf(self, values) -> int:
        """Register a differentiable input; backward can report its gradient."""
        node = self._push("leaf", (), as_f64(values))
        self._leaves.add(node)
        return node

    def constant(self, values) -> int:
        """Register a non-differentiable input."""
        return self._push("const", (), as_f64(values))

    # ------------------------------------------------------------------
    # ops
    # ------------------------------------------------------------------

    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        """Matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
        av, bv = self.value(a), self.value(b)
        if av.ndim != 2 or bv.ndim != 2:
            raise ValueError(
                f"matmul needs rank-2 operands, got {av.shape} and {bv.shape}"
            )
        b_eff = bv.shape[1] if transpose_b else bv.shape[0]
        if av.shape[1] != b_eff:
            raise ValueError(
                f"matmul inner dimensions disagree: {av.shape} vs {bv.shape}"
                f"{' (transposed)' if transpose_b else ''}"
            )
        out = av @ bv.T if transpose_b else av @ bv
        return self._push("matmul", (a, b), out, transpose_b)

    def add(self, a: int, b: int) -> int:
        """Elementwise sum; also matrix[m,d] + row-vector[d] bias."""
        av, bv = self.value(a), self.value(b)
        if av.shape == bv.shape:
            return self._push("add", (a, b), av + bv, False)
        if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
            return self._push("add", (a, b), av + bv, True)
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")

    def mul(self, a: int, b: int) -> int:
        """Elementwise product of same-shape tensors."""
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ValueError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
        return self._push("mul", (a, b), av * bv)

    def scale(self, a: int, s: float) -> int:
        """Multiply by a plain float constant."""
        return self._push("scale", (a,), self.value(a) * s, float(s))

    def softmax_rows(self, t: int) -> int:
        """Row-wise softmax with per-row max subtraction."""
        tv = self.value(t)
        if tv.ndim != 2:
            raise ValueError(f"softmax_rows needs a rank-2 tensor, got {tv.shape}")
        shifted = tv - tv.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        return self._push("softmax_rows", (t,), p)

    def layer_norm(self, t: int, gain: int, bias: int, eps: float = 1e-12) -> int:
        """Per-row standardization followed by elementwise gain and bias."""
        tv = self.value(t)
        gv, bv = self.value(gain), self.value(bias)
        if tv.ndim != 2 or tv.shape[1] < 2:
            raise ValueError(f"layer_norm needs a rank-2 tensor with >=2 columns, got {tv.shape}")
        if gv.shape != (tv.shape[1],) or bv.shape != (tv.shape[1],):
            raise ValueError(
                f"layer_norm gain/bias must be length {tv.shape[1]}, got {gv.shape}/{bv.shape}"
            )
        mu = tv.mean(axis=1, keepdims=True)
        var = np.mean((tv - mu) ** 2, axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (tv - mu) * inv
        out = xhat * gv + bv
        return self._push("layer_norm", (t, gain, bias), out, (xhat, inv))

    def gelu(self, t: int) -> int:
        """Elementwise tanh-approximation GELU."""
        tv = self.value(t)
        u = GELU_C * (tv + GELU_A * tv**3)
        th = np.tanh(u)
        out = 0.5 * tv * (1.0 + th)
        return self._push("gelu", (t,), out, th)

    def gather_rows(self, src: int, ids: Sequence[int]) -> int:
        """Select rows of a matrix by index; duplicates accumulate gradient."""
        sv = self.value(src)
        if sv.ndim != 2:
            raise ValueError(f"gather_rows needs a rank-2 source, got {sv.shape}")
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 1:
            raise ValueError("gather_rows ids must be a flat index list")
        if idx.size and (idx.min() < 0 or idx.max() >= sv.shape[0]):
            raise ValueError(
                f"gather_rows index out of range for {sv.shape[0]} rows: {ids}"
            )
        return self._push("gather_rows", (src,), sv[idx], idx)

    def masked_mean(self, t: int, mask: Sequence[int]) -> int:
        """Mean over the masked-in rows of a matrix."""
        tv = self.value(t)
        m = np.asarray(mask, dtype=np.float64)
        if tv.ndim != 2 or m.shape != (tv.shape[0],):
            raise ValueError(f"masked_mean mask length must match rows: {tv.shape} vs {m.shape}")
        count = m.sum()
        if count == 0:
            raise ValueError("masked_mean: no rows to average")
        out = (tv * m[:, None]).sum(axis=0) / count
        return self._push("masked_mean", (t,), out, (m, count))

    def dot(self, a: int, b: int) -> int:
        """Scalar product; operands are flattened and must have equal size."""
        av, bv = self.value(a), self.value(b)
        if av.size != bv.size:
            raise ValueError(f"dot size mismatch: {av.shape} vs {bv.shape}")
        out = np.array(float(av.ravel() @ bv.ravel()))
        return self._push("dot", (a, b), out)

    def unit_norm(self, v: int) -> int:
        """Scale to unit Frobenius norm (norm floored at 1e-12)."""
        vv = self.value(v)
        n = max(float(np.sqrt(np.sum(vv * vv))), 1e-12)
        return self._push("unit_norm", (v,), vv / n, n)

    def lse(self, t: int) -> int:
        """Log-sum-exp over all entries, stable under large magnitudes."""
        tv = self.value(t)
        m = float(tv.max())
        out = np.array(m + math.log(float(np.sum(np.exp(tv - m)))))
        return self._push("lse", (t,), out)

    def lse_pair(self, a: int, b: int) -> int:
        """log(exp(a) + exp(b)) for scalar nodes."""
        if self.value(a).size != 1 or self.value(b).size != 1:
            raise ValueError("lse_pair operands must be scalars")
        av, bv = float(self.value(a).ravel()[0]), float(self.value(b).ravel()[0])
        m = max(av, bv)
        out = np.array(m + math.log(math.exp(av - m) + math.exp(bv - m)))
        return self._push("lse_pair", (a, b), out)

    def cross_entropy(self, logits: int, targets: Sequence[int], mask: Sequence[int]) -> int:
        """Mean negative log-softmax of the target class over masked-in rows."""
        lv = self.value(logits)
        if lv.ndim != 2:
            raise ValueError(f"cross_entropy needs rank-2 logits, got {lv.shape}")
        t = np.asarray(targets, dtype=np.intp)
        m = np.asarray(mask, dtype=np.float64)
        if t.shape != (lv.shape[0],) or m.shape != (lv.shape[0],):
            raise ValueError("cross_entropy targets/mask length must match rows")
        if t.min() < 0 or t.max() >= lv.shape[1]:
            raise ValueError(f"cross_entropy target out of range for {lv.shape[1]} classes")
        count = m.sum()
        if count == 0:
            raise ValueError("cross_entropy: no positions to score")
        shifted = lv - lv.max(axis=1, keepdims=True)
        lse_rows = np.log(np.sum(np.exp(shifted), axis=1))
        nll = lse_rows - shifted[np.arange(lv.shape[0]), t]
        out = np.array(float((nll * m).sum() / count))
        probs = np.exp(shifted - lse_rows[:, None])
        return self._push("cross_entropy", (logits,), out, (t, m, count, probs))

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, loss: int, leaves: Iterable[int]) -> dict[int, np.ndarray]:
        """Reverse-mode gradients of a scalar node w.r.t. the given leaves.

        Returns a map from leaf node id to a gradient array of the leaf's
        shape. Each recorded node is visited exactly once.
        """
        if self.value(loss).size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape(loss)}")
        wanted = set(leaves)
        for leaf in wanted:
            if leaf >= len(self._nodes) or not self.is_leaf(leaf):
                raise ValueError(f"node {leaf} is not a leaf on this tape")

        adjoint: list = [None] * len(self._nodes)
        adjoint[loss] = np.ones_like(self.value(loss))
        for nid in range(loss, -1, -1):
            g = adjoint[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            self._accumulate(node, g, adjoint)
            if nid != loss and nid not in wanted:
                adjoint[nid] = None  # free intermediates early

        out: dict[int, np.ndarray] = {}
        for leaf in wanted:
            g = adjoint[leaf]
            out[leaf] = np.zeros_like(self.value(leaf)) if g is None else g
        return out

    def _accumulate(self, node: _Node, g: np.ndarray, adjoint: list) -> None:
        op = node.op
        if op in ("leaf", "const"):
            return
        ins = node.inputs
        if op == "matmul":
            a, b = ins
            av, bv = self.value(a), self.value(b)
            if node.ctx:  # out = a @ b.T
                _acc(adjoint, a, g @ bv)
                _acc(adjoint, b, g.T @ av)
            else:
                _acc(adjoint, a, g @ bv.T)
                _acc(adjoint, b, av.T @ g)
        elif op == "add":
            a, b = ins
            _acc(adjoint, a, g)
            _acc(adjoint, b, g.sum(axis=0) if node.ctx else g)
        elif op == "mul":
            a, b = ins
            _acc(adjoint, a, g * self.value(b))
            _acc(adjoint, b, g * self.value(a))
        elif op == "scale":
            _acc(adjoint, ins[0], g * node.ctx)
        elif op == "softmax_rows":
            p = node.value
            gp = g * p
            _acc(adjoint, ins[0], gp - p * gp.sum(axis=1, keepdims=True))
        elif op == "layer_norm":
            t, gain, bias = ins
            xhat, inv = node.ctx
            gv = self.value(gain)
            _acc(adjoint, gain, (g * xhat).sum(axis=0))
            _acc(adjoint, bias, g.sum(axis=0))
            dxhat = g * gv
            d = xhat.shape[1]
            gt = inv / d * (
                d * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
            _acc(adjoint, t, gt)
        elif op == "gelu":
            tv = self.value(ins[0])
            th = node.ctx
            du = GELU_C * (1.0 + 3.0 * GELU_A * tv**2)
            _acc(adjoint, ins[0], g * (0.5 * (1.0 + th) + 0.5 * tv * (1.0 - th**2) * du))
        elif op == "gather_rows":
            src = ins[0]
            gs = np.zeros_like(self.value(src))
            np.add.at(gs, node.ctx, g)
            _acc(adjoint, src, gs)
        elif op == "masked_mean":
            m, count = node.ctx
            _acc(adjoint, ins[0], np.outer(m / count, g))
        elif op == "dot":
            a, b = ins
            s = float(g)
            _acc(adjoint, a, (s * self.value(b).ravel()).reshape(self.shape(a)))
            _acc(adjoint, b, (s * self.value(a).ravel()).reshape(self.shape(b)))
        elif op == "unit_norm":
            vv = self.value(ins[0])
            n = node.ctx
            _acc(adjoint, ins[0], g / n - vv * (float(np.sum(vv * g)) / n**3))
        elif op == "lse":
            tv = self.value(ins[0])
            _acc(adjoint, ins[0], float(g) * np.exp(tv - float(node.value)))
        elif op == "lse_pair":
            a, b = ins
            out = float(node.value)
            _acc(adjoint, a, float(g) * np.exp(self.value(a) - out))
            _acc(adjoint, b, float(g) * np.exp(self.value(b) - out))
        elif op == "cross_entropy":
            t, m, count, probs = node.ctx
            gl = probs * m[:, None]
            gl[np.arange(gl.shape[0]), t] -= m
            _acc(adjoint, ins[0], gl * (float(g) / count))
        else:  # pragma: no cover - every op kind is handled above
            raise AssertionError(f"no backward rule for op {op!r}")


def _acc(adjoint: list, node: int, g: np.ndarray) -> None:
    if adjoint[node] is None:
        adjoint[node] = g
    else:
        adjoint[node] = adjoint[node] + g


def backward(loss: int, tape: GradTape, leaves: Iterable[int]) -> dict[int, np.ndarray]:
    """Functional form of :meth:`GradTape.backward`."""
    return tape.backward(loss, leaves)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_difference_grad needs h > 0")
    x = as_f64(x)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.ravel()[i] += h
        xm.ravel()[i] -= h
        flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad

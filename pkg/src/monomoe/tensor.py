"""Dense float32 tensors with reverse-mode automatic differentiation.

Covers exactly the operations the model needs: matmul, elementwise
arithmetic, softmax, RMS norm, SwiGLU, masked cross entropy, row
gather/merge and column slice/concat. Every differentiable op can be
verified against a central finite-difference oracle via `grad_check`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

_state = threading.local()

# When True, every op validates that its output is finite and raises
# FloatingPointError otherwise. Cheap at desk scale; latency benchmarks
# may switch it off.
finite_checks = True


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if finite_checks and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """A dense row-major array plus an optional gradient buffer.

    Ops on tensors record parent links and a backward closure; calling
    `backward()` on a scalar result replays the closures in reverse
    topological order, accumulating into each leaf's `.grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._backward_done = False
        if _grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    # -- autodiff ----------------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar.

        Rejects a second call on the same result: the graph is consumed
        and must be rebuilt by re-running the forward pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._backward_done:
            raise RuntimeError("backward() already called on this graph; re-run forward first")
        self._backward_done = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- arithmetic -------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a last-axis bias vector for `b`."""
    bias = b.ndim == 1 and a.ndim > 1
    if not bias and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    if bias and a.shape[-1] != b.shape[0]:
        raise ValueError(f"bias length {b.shape[0]} does not match last axis of {a.shape}")
    out = a.data + b.data

    def backward(g):
        _accum(a, g)
        if b.requires_grad:
            gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias else g
            _accum(b, gb)

    return Tensor._from_op(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor._from_op(out, (a, b), backward, "mul")


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or a constant array of the same shape."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = x.data * c

    def backward(g):
        _accum(x, g * c)

    return Tensor._from_op(out, (x,), backward, "scale")


def shift(x: Tensor, c) -> Tensor:
    """Add a constant scalar or a constant array (broadcast against x)."""
    out = x.data + np.asarray(c, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g)

    return Tensor._from_op(out, (x,), backward, "shift")


def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """2-D matrix product.

    With `row_stable=True` the product is computed by `einsum`, whose
    per-row results do not depend on how many rows are in the batch.
    The expert dispatch relies on this to keep outputs bit-identical
    under arbitrary regroupings of the token rows.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if row_stable:
        out = np.einsum("ij,jk->ik", a.data, b.data, optimize=False)
    else:
        out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        _accum(x, np.ascontiguousarray(g.T))

    return Tensor._from_op(out, (x,), backward, "transpose")


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.data.dtype).reshape(())

    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return Tensor._from_op(out, (x,), backward, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = (x.data.sum(dtype=x.data.dtype) / n).reshape(())

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype))

    return Tensor._from_op(out, (x,), backward, "mean")


# -- nonlinearities and normalization ------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; stable for large |x|
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return Tensor._from_op(out, (x,), backward, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return Tensor._from_op(out, (x,), backward, "softmax")


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gamma, per last-axis slice."""
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ValueError(f"gamma shape {gamma.shape} does not match last axis {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = x.data * r * gamma.data

    def backward(g):
        if x.requires_grad:
            gg = g * gamma.data
            inner = (gg * x.data).sum(axis=-1, keepdims=True)
            _accum(x, r * gg - (r ** 3 / d) * x.data * inner)
        if gamma.requires_grad:
            gy = g * x.data * r
            _accum(gamma, gy.reshape(-1, d).sum(axis=0))

    return Tensor._from_op(out, (x, gamma), backward, "rms_norm")


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor,
               row_stable: bool = False) -> Tensor:
    """Gated FFN: down( silu(x @ w_gate) * (x @ w_up) )."""
    g = silu(matmul(x, w_gate, row_stable=row_stable))
    u = matmul(x, w_up, row_stable=row_stable)
    return matmul(mul(g, u), w_down, row_stable=row_stable)


def cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean negative log-softmax over positions where loss_mask is set.

    Returns a zero scalar when the mask selects nothing. Target ids must
    be valid rows of the vocabulary axis.
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (positions, vocab)")
    s, m = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (s,):
        raise ValueError(f"targets shape {targets.shape} does not match positions {s}")
    if loss_mask is None:
        mask = np.ones(s, dtype=bool)
    else:
        mask = np.asarray(loss_mask, dtype=bool)
        if mask.shape != (s,):
            raise ValueError(f"loss_mask shape {mask.shape} does not match positions {s}")
    if mask.any():
        active = targets[mask]
        if active.min() < 0 or active.max() >= m:
            raise IndexError(f"target id outside vocabulary of size {m}")
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(s), targets]
    nll = lse - picked
    out = ((nll * mask).sum(dtype=logits.data.dtype) / count).reshape(())

    def backward(g):
        if not logits.requires_grad:
            return
        soft = np.exp(z - lse[:, None])
        grad = soft
        grad[np.arange(s), targets] -= 1.0
        grad *= (mask[:, None] * (g / count)).astype(logits.data.dtype)
        _accum(logits, grad)

    return Tensor._from_op(out, (logits,), backward, "cross_entropy")


# -- structural ops --------------------------------------------------------------


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += g

    return Tensor._from_op(out, (x,), backward, "slice_cols")


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, off:off + w])
            off += w

    return Tensor._from_op(out, tuple(parts), backward, "concat_cols")


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    heights = [p.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, h in zip(parts, heights):
            _accum(p, g[off:off + h])
            off += h

    return Tensor._from_op(out, tuple(parts), backward, "concat_rows")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by integer index (duplicates allowed; grads scatter-add)."""
    if x.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return Tensor._from_op(out, (x,), backward, "gather_rows")


def row_merge(n_rows: int, parts) -> Tensor:
    """Assemble an output whose row sets partition [0, n_rows).

    `parts` is a sequence of (row indices, tensor) pairs; the indices
    must jointly cover every row exactly once.
    """
    parts = [(np.asarray(i, dtype=np.intp), t) for i, t in parts]
    total = sum(i.size for i, _ in parts)
    if total != n_rows:
        raise ValueError(f"row_merge parts cover {total} rows, expected {n_rows}")
    cover = np.zeros(n_rows, dtype=bool)
    for i, _ in parts:
        cover[i] = True
    if not cover.all():
        raise ValueError("row_merge parts do not partition the output rows")

    width = parts[0][1].shape[1]
    out = np.empty((n_rows, width), dtype=parts[0][1].data.dtype)
    for i, t in parts:
        out[i] = t.data

    def backward(g):
        for i, t in parts:
            _accum(t, g[i])

    return Tensor._from_op(out, tuple(t for _, t in parts), backward, "row_merge")


# -- finite-difference oracle ------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one autodiff-vs-finite-difference comparison."""

    max_rel_err: float
    per_input: list
    eps: float
    tol: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}, eps {self.eps:.0e})"


def grad_check(f, inputs, eps: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued `f` against central
    finite differences.

    The difference quotients are evaluated in float64 so the oracle is
    limited by its O(eps^2) truncation error rather than float32 rounding;
    the autodiff side runs in the engine's native float32. Errors are
    reported relative to the largest gradient magnitude of each input.
    """
    ins32 = [Tensor(np.asarray(i.data if isinstance(i, Tensor) else i), requires_grad=True)
             for i in inputs]
    out = f(*ins32)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in ins32]

    ins64 = [Tensor(t.data, dtype=np.float64) for t in ins32]
    per_input = []
    with no_grad():
        for k, t in enumerate(ins64):
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = f(*ins64).item()
                flat[j] = orig - eps
                f_minus = f(*ins64).item()
                flat[j] = orig
                nflat[j] = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[k].astype(np.float64)
            span = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
            err = float(np.abs(a - num).max(initial=0.0) / (span + 1e-12)) if span > 0 else 0.0
            per_input.append(err)

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_err=worst, per_input=per_input,
                           eps=eps, tol=tol, passed=worst < tol)

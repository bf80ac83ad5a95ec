"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tensor`` wraps a numpy array; a ``Tape`` eagerly executes primitive ops
and records, in execution order, a closure that maps the output gradient to
input gradients. Execution order is a topological order by construction, so
``backward`` just walks the record list in reverse, summing gradients over
fan-out. Every op validates that its output is finite; NaN/Inf anywhere is an
error state, not a value.

Tensors are immutable once created (treat ``.data`` as read-only). A Tape is
single-owner: build one graph on it, call ``backward`` once, drop it.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import NumericalError, ShapeError
from .special import digamma, log_gamma

_tensor_ids = itertools.count()


class Tensor:
    """Dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tensor_ids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, tid={self.tid})"


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the (possibly broadcast) operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Op recorder for one forward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    # -- plumbing ----------------------------------------------------------

    def _coerce(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x)

    def _emit(self, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        if not np.all(np.isfinite(out_data)):
            raise NumericalError("non-finite value produced in forward pass")
        out = Tensor(out_data)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._records.append((out, inputs, backward))
        return out

    def backward(self, loss: Tensor, leaves: list[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every trainable tensor it
        depends on, keyed by tensor id. Fan-out gradients are summed. If
        ``leaves`` is given, each of them gets an entry (zeros when the loss
        does not depend on it).
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(out.tid, None)
            if g is None:
                continue
            for t, gin in zip(inputs, backward_fn(g)):
                if gin is None or not t.requires_grad:
                    continue
                seen = grads.get(t.tid)
                grads[t.tid] = gin if seen is None else seen + gin
        if leaves is not None:
            for t in leaves:
                grads.setdefault(t.tid, np.zeros_like(t.data))
        return grads

    # -- arithmetic --------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        out = a.data + b.data

        def back(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return self._emit(out, (a, b), back)

    def sub(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        out = a.data - b.data

        def back(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return self._emit(out, (a, b), back)

    def mul(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * b.data

        def back(g):
            return (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )

        return self._emit(out, (a, b), back)

    def div(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data

        def back(g):
            ga = _unbroadcast(g / b.data, a.data.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            return ga, gb

        return self._emit(out, (a, b), back)

    def neg(self, a) -> Tensor:
        a = self._coerce(a)
        return self._emit(-a.data, (a,), lambda g: (-g,))

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """x @ w + b for x:(batch, d_in), w:(d_in, d_out), b:(d_out,)."""
        if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
            raise ShapeError("affine expects x:(n,i), w:(i,o), b:(o,)")
        if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"affine shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
            )
        with np.errstate(over="ignore", invalid="ignore"):
            out = x.data @ w.data + b.data

        def back(g):
            return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

        return self._emit(out, (x, w, b), back)

    # -- elementwise nonlinearities -----------------------------------------

    def relu(self, a) -> Tensor:
        a = self._coerce(a)
        mask = a.data > 0

        def back(g):
            return (g * mask,)

        return self._emit(np.where(mask, a.data, 0.0), (a,), back)

    EXP_CLAMP = 30.0  # keeps exp outputs <= e^30, far above any plausible count

    def exp(self, a) -> Tensor:
        a = self._coerce(a)
        clipped = np.clip(a.data, -self.EXP_CLAMP, self.EXP_CLAMP)
        out = np.exp(clipped)
        inside = np.abs(a.data) <= self.EXP_CLAMP

        def back(g):
            return (g * out * inside,)

        return self._emit(out, (a,), back)

    def log(self, a) -> Tensor:
        a = self._coerce(a)
        if np.any(a.data <= 0.0):
            raise NumericalError("log of non-positive value")
        out = np.log(a.data)

        def back(g):
            return (g / a.data,)

        return self._emit(out, (a,), back)

    def sigmoid(self, a) -> Tensor:
        a = self._coerce(a)
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def back(g):
            return (g * out * (1.0 - out),)

        return self._emit(out, (a,), back)

    def softplus(self, a) -> Tensor:
        a = self._coerce(a)
        out = np.logaddexp(0.0, a.data)

        def back(g):
            s = np.empty_like(a.data)
            pos = a.data >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
            ex = np.exp(a.data[~pos])
            s[~pos] = ex / (1.0 + ex)
            return (g * s,)

        return self._emit(out, (a,), back)

    def lgamma(self, a) -> Tensor:
        a = self._coerce(a)
        if np.any(a.data <= 0.0):
            raise NumericalError("lgamma of non-positive value")
        out = np.asarray(log_gamma(a.data))

        def back(g):
            return (g * digamma(a.data),)

        return self._emit(out, (a,), back)

    def logaddexp(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        out = np.logaddexp(a.data, b.data)

        def back(g):
            # d/da = sigma(a-b), d/db = sigma(b-a)
            diff = a.data - b.data
            sa = np.empty_like(out)
            pos = diff >= 0
            sa[pos] = 1.0 / (1.0 + np.exp(-diff[pos]))
            ex = np.exp(diff[~pos])
            sa[~pos] = ex / (1.0 + ex)
            return (
                _unbroadcast(g * sa, a.data.shape),
                _unbroadcast(g * (1.0 - sa), b.data.shape),
            )

        return self._emit(out, (a, b), back)

    def clip(self, a, lo: float, hi: float) -> Tensor:
        a = self._coerce(a)
        out = np.clip(a.data, lo, hi)
        inside = (a.data >= lo) & (a.data <= hi)

        def back(g):
            return (g * inside,)

        return self._emit(out, (a,), back)

    def select(self, mask, a, b) -> Tensor:
        """Entrywise mask ? a : b with a constant boolean mask."""
        a, b = self._coerce(a), self._coerce(b)
        m = np.asarray(mask, dtype=bool)
        out = np.where(m, a.data, b.data)

        def back(g):
            return (
                _unbroadcast(np.where(m, g, 0.0), a.data.shape),
                _unbroadcast(np.where(m, 0.0, g), b.data.shape),
            )

        return self._emit(out, (a, b), back)

    # -- reductions / reshaping ---------------------------------------------

    def sum(self, a, axis: int | None = None) -> Tensor:
        a = self._coerce(a)
        out = a.data.sum(axis=axis)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

        return self._emit(np.asarray(out), (a,), back)

    def mean(self, a, axis: int | None = None) -> Tensor:
        a = self._coerce(a)
        count = a.data.size if axis is None else a.data.shape[axis]
        out = a.data.mean(axis=axis)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g / count, a.data.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

        return self._emit(np.asarray(out), (a,), back)

    def concat_cols(self, parts: list[Tensor]) -> Tensor:
        parts = [self._coerce(p) for p in parts]
        widths = [p.data.shape[1] for p in parts]
        out = np.concatenate([p.data for p in parts], axis=1)
        edges = np.cumsum([0] + widths)

        def back(g):
            return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

        return self._emit(out, tuple(parts), back)

    # -- network layers -----------------------------------------------------

    def batch_norm(
        self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        mode: str,
        momentum: float = 0.99,
        eps: float = 1e-5,
        update_stats: bool = True,
    ) -> Tensor:
        """Per-column batch normalization.

        Train mode normalizes by minibatch statistics and (optionally) updates
        the running buffers in place; eval mode normalizes by the buffers.
        Differentiable w.r.t. x, gamma and beta in both modes.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown batch_norm mode {mode!r}")
        if x.data.ndim != 2:
            raise ShapeError("batch_norm expects a 2-D input")
        if mode == "train":
            n = x.data.shape[0]
            if n < 2:
                raise ValueError("batch_norm in train mode needs batch size >= 2")
            with np.errstate(over="ignore", invalid="ignore"):
                m = x.data.mean(axis=0)
                v = x.data.var(axis=0)
            if update_stats:
                running_mean *= momentum
                running_mean += (1.0 - momentum) * m
                running_var *= momentum
                running_var += (1.0 - momentum) * v
            inv = 1.0 / np.sqrt(v + eps)
            xhat = (x.data - m) * inv

            def back(g):
                gxhat = g * gamma.data
                gx = (
                    inv
                    / n
                    * (
                        n * gxhat
                        - gxhat.sum(axis=0)
                        - xhat * (gxhat * xhat).sum(axis=0)
                    )
                )
                return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

        else:
            inv = 1.0 / np.sqrt(running_var + eps)
            xhat = (x.data - running_mean) * inv

            def back(g):
                return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        out = gamma.data * xhat + beta.data
        return self._emit(out, (x, gamma, beta), back)

    def dropout(self, x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
        """Inverted dropout: survivors are scaled by 1/(1-rate) at train time
        so eval mode is the identity."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if mode == "eval" or rate == 0.0:
            return x
        keep = rng.random(x.data.shape) >= rate
        scale = 1.0 / (1.0 - rate)
        factor = keep * scale

        def back(g):
            return (g * factor,)

        return self._emit(x.data * factor, (x,), back)

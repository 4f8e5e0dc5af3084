"""Reverse-mode automatic differentiation over dense numpy tensors.

Exactly the differentiable primitives a small residual classifier needs:
conv2d, batch_norm, relu, global_avg_pool, linear, channel_affine,
add, mul, tsum, softmax_cross_entropy. Primitives record onto the
innermost active Tape (a `with Tape() as tape:` block); backward(tape,
loss) replays the tape in reverse and accumulates total derivatives.

Every primitive validates that its output is finite; NaN/Inf raises
NumericError instead of propagating silently.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _ensure_finite(data: np.ndarray, op: str) -> None:
    # min/max both surface NaN (propagated) and +-Inf without allocating a mask
    lo = data.min()
    hi = data.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Dense n-d array with optional gradient storage.

    Tensors are value-like: no primitive mutates its inputs, so a tensor
    that entered a tape stays valid for backward replay.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tid: int = next(Tensor._ids)
        if arr.size:
            _ensure_finite(arr, "tensor construction")

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tid = next(Tensor._ids)
        _ensure_finite(arr, op)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out_tid", "fn", "inputs")

    def __init__(self, out_tid: int, inputs: tuple, fn: Callable):
        self.out_tid = out_tid
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Append-only record of primitive applications, in execution order.

    Reverse iteration over `nodes` is a valid topological order for
    backward because every node's inputs predate it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.finalized = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self.finalized = False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple, fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out.tid, inputs, fn))
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DimensionError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


class BNState:
    """Per-channel batch-norm state: learned affine plus running statistics.

    running_var holds the biased estimate, matching the train-mode
    normalizer, so train and eval paths agree in the large-batch limit.
    """

    def __init__(
        self,
        channels: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        dtype=np.float32,
    ):
        if channels < 1:
            raise DimensionError("batch norm needs at least one channel")
        if not 0.0 < momentum < 1.0:
            raise ContractError(f"momentum must lie in (0,1), got {momentum}")
        if eps <= 0.0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    @classmethod
    def wrap(
        cls,
        gamma: Tensor,
        beta: Tensor,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ) -> "BNState":
        """View over externally owned affine tensors and stat buffers.

        The buffers are aliased, not copied: train-mode forward updates
        the caller's arrays in place.
        """
        state = cls.__new__(cls)
        state.gamma = gamma
        state.beta = beta
        state.running_mean = running_mean
        state.running_var = running_var
        state.momentum = float(momentum)
        state.eps = float(eps)
        return state

    @property
    def channels(self) -> int:
        return self.gamma.size

    def validate(self) -> None:
        if np.any(self.running_var <= 0):
            raise NumericError("running_var must stay strictly positive")
        if self.gamma.size != self.beta.size or self.gamma.size != self.running_mean.size:
            raise DimensionError("batch norm affine/stat lengths disagree")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of [N,Cin,H,W] with [Cout,Cin,kH,kW] filters.

    H' = (H + 2*pad - kH)//stride + 1, same for W'. Lowered to an
    im2col matrix and one BLAS matmul; the backward pass reuses the
    stored column matrix for the filter gradient and scatters the input
    gradient back through col2im.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, filter {cin_w}")
    if kh > h + 2 * pad or kw > wid + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wid + 2 * pad}")
    if stride < 1 or pad < 0:
        raise ContractError("stride must be >= 1 and pad >= 0")
    tensors = (x, w) if b is None else (x, w, b)
    _check_dtypes("conv2d", *tensors)
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {b.shape}")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    y = Tensor._wrap(out, x.requires_grad or w.requires_grad or (b is not None and b.requires_grad), "conv2d")

    def bwd(g: np.ndarray, accum) -> None:
        grows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            accum(w, (grows.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            accum(b, grows.sum(axis=0))
        if x.requires_grad:
            dcols = grows @ wmat
            accum(x, kernels.col2im(dcols, n, cin, h, wid, kh, kw, stride, pad))

    return _record(y, tensors, bwd)


def batch_norm(x: Tensor, state: BNState, train: bool) -> Tensor:
    """Per-channel normalization of [N,C,H,W] with learned affine.

    Train mode normalizes by batch statistics (biased variance over
    N*H*W) and folds them into the running estimates with
    running' = (1 - momentum)*running + momentum*batch. Eval mode
    normalizes by the running estimates. Differentiable w.r.t. x,
    gamma, beta in both modes.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise DimensionError(f"batch_norm channel mismatch: input {c}, state {state.channels}")
    _check_dtypes("batch_norm", x, state.gamma, state.beta)
    gamma, beta = state.gamma, state.beta
    count = n * h * w
    if train and count < 2:
        raise DimensionError("batch_norm train mode needs at least 2 values per channel")

    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean.astype(state.running_mean.dtype)
        state.running_var *= 1.0 - m
        state.running_var += m * var.astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + np.asarray(state.eps, dtype=x.dtype))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    rg = x.requires_grad or gamma.requires_grad or beta.requires_grad
    y = Tensor._wrap(out, rg, "batch_norm")

    def bwd(g: np.ndarray, accum) -> None:
        if gamma.requires_grad:
            accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if train:
                # batch statistics depend on x: subtract the per-channel
                # mean of g and the xhat-projected component
                gsum = g.sum(axis=(0, 2, 3))[None, :, None, None]
                gxsum = (g * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                accum(x, gi * (g - gsum / count - xhat * gxsum / count))
            else:
                accum(x, gi * g)

    return _record(y, (x, gamma, beta), bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    out = np.maximum(x.data, 0)
    y = Tensor._wrap(out, x.requires_grad, "relu")

    def bwd(g: np.ndarray, accum) -> None:
        if x.requires_grad:
            accum(x, g * (x.data > 0))

    return _record(y, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of [N,C,H,W] down to [N,C]."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    y = Tensor._wrap(out, x.requires_grad, "global_avg_pool")

    def bwd(g: np.ndarray, accum) -> None:
        if x.requires_grad:
            gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
            accum(x, np.ascontiguousarray(gx))

    return _record(y, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w.T + b for x:[N,D], w:[K,D], b:[K]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(f"linear expects 2-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear feature mismatch: x has {x.shape[1]}, w has {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias must have shape ({w.shape[0]},), got {b.shape}")
    _check_dtypes("linear", x, w, b)
    out = x.data @ w.data.T + b.data
    y = Tensor._wrap(out, x.requires_grad or w.requires_grad or b.requires_grad, "linear")

    def bwd(g: np.ndarray, accum) -> None:
        if x.requires_grad:
            accum(x, g @ w.data)
        if w.requires_grad:
            accum(w, g.T @ x.data)
        if b.requires_grad:
            accum(b, g.sum(axis=0))

    return _record(y, (x, w, b), bwd)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift of [N,C,H,W]: y[:,c] = gamma[c]*x[:,c] + beta[c]."""
    if x.data.ndim != 4:
        raise DimensionError(f"channel_affine expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"channel_affine parameter mismatch: {c} channels vs gamma {gamma.shape}, beta {beta.shape}"
        )
    _check_dtypes("channel_affine", x, gamma, beta)
    out = gamma.data[None, :, None, None] * x.data + beta.data[None, :, None, None]
    rg = x.requires_grad or gamma.requires_grad or beta.requires_grad
    y = Tensor._wrap(out, rg, "channel_affine")

    def bwd(g: np.ndarray, accum) -> None:
        if gamma.requires_grad:
            accum(gamma, (g * x.data).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            accum(x, g * gamma.data[None, :, None, None])

    return _record(y, (x, gamma, beta), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_dtypes("add", a, b)
    y = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad, "add")

    def bwd(g: np.ndarray, accum) -> None:
        if a.requires_grad:
            accum(a, g)
        if b.requires_grad:
            accum(b, g)

    return _record(y, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_dtypes("mul", a, b)
    y = Tensor._wrap(a.data * b.data, a.requires_grad or b.requires_grad, "mul")

    def bwd(g: np.ndarray, accum) -> None:
        if a.requires_grad:
            accum(a, g * b.data)
        if b.requires_grad:
            accum(b, g * a.data)

    return _record(y, (a, b), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    y = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype), x.requires_grad, "tsum")

    def bwd(g: np.ndarray, accum) -> None:
        if x.requires_grad:
            accum(x, np.full(x.shape, float(g), dtype=x.dtype))

    return _record(y, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized by row-max subtraction; the gradient w.r.t. logits is
    (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if n < 1:
        raise DimensionError("softmax_cross_entropy needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0,{k}), got range [{labels.min()},{labels.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    y = Tensor._wrap(np.asarray(loss, dtype=logits.dtype), logits.requires_grad, "softmax_cross_entropy")

    def bwd(g: np.ndarray, accum) -> None:
        if logits.requires_grad:
            probs = ez / denom
            probs[np.arange(n), labels] -= 1.0
            accum(logits, probs * (float(g) / n))

    return _record(y, (logits,), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain (non-differentiated) row softmax for inference."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# backward and verification
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(tensor) for every tensor reachable from loss.

    Returns {tensor id -> gradient array}; also mirrors the result into
    each reachable tensor's .grad. A tape can be walked once; call
    tape.reset() before reuse.
    """
    if tape.finalized:
        raise ContractError("tape already consumed by backward; call reset() first")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    recorded = {node.out_tid for node in tape.nodes}
    if loss.tid not in recorded:
        raise ContractError("loss was not recorded on this tape")
    tape.finalized = True

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {}

    def accum(t: Tensor, g: np.ndarray) -> None:
        prev = grads.get(t.tid)
        grads[t.tid] = g if prev is None else prev + g
        tensors[t.tid] = t

    for node in reversed(tape.nodes):
        g_out = grads.get(node.out_tid)
        if g_out is None:
            continue  # not on a path to the loss
        node.fn(g_out, accum)

    for tid, t in tensors.items():
        if t.requires_grad:
            t.grad = grads[tid]
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients of f at x and central differences.

    f must be a deterministic closure mapping a float64 tensor to a
    scalar tensor. Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check requires a float64 input tensor")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ContractError("grad_check target must return a scalar")
    y_repeat = f(Tensor(x.data.copy(), dtype=np.float64))
    if y.item() != y_repeat.item():
        raise ContractError("grad_check target is not deterministic across evaluations")
    grads = backward(tape, y)
    analytic = grads.get(probe.tid)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(x.shape), dtype=np.float64)).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(x.shape), dtype=np.float64)).item()
        fd = (hi - lo) / (2 * eps)
        a = analytic.ravel()[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst

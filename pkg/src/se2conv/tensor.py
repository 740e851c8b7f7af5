"""Dense array primitives with explicit forward and backward passes.

Arrays are plain ``numpy.ndarray`` objects laid out row-major with the channel
axis innermost: ``[B, H, W, C]`` for planar feature maps and
``[B, N, H, W, C]`` for maps that carry an orientation axis. Every primitive
here comes with a matching ``*_backward`` function; there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericalError

DEFAULT_DTYPE = np.float32


@dataclass
class Parameter:
    """A trainable array and its accumulated gradient."""

    value: np.ndarray
    name: str = ""
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


def check_finite(*arrays: np.ndarray, where: str = "") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {where or 'array'}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, n: int) -> np.ndarray:
    B, H, W, C = x.shape
    Ho, Wo = H - n + 1, W - n + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (n, n), axis=(1, 2))
    # win: [B, Ho, Wo, C, n, n] -> [B, Ho, Wo, n, n, C]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, n * n * C)
    return cols


def _col2im(dcols: np.ndarray, x_shape, n: int) -> np.ndarray:
    B, H, W, C = x_shape
    Ho, Wo = H - n + 1, W - n + 1
    d = dcols.reshape(B, Ho, Wo, n, n, C)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(n):
        for j in range(n):
            dx[:, i:i + Ho, j:j + Wo, :] += d[:, :, :, i, j, :]
    return dx


def _check_conv_shapes(x: np.ndarray, kernels: np.ndarray) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"input must be [B,H,W,C], got rank {x.ndim}")
    if kernels.ndim != 4:
        raise ConfigurationError(f"kernels must be [n,n,Cin,Cout], got rank {kernels.ndim}")
    n = kernels.shape[0]
    if kernels.shape[1] != n:
        raise ConfigurationError(f"kernel axis 1 has extent {kernels.shape[1]}, expected {n}")
    if kernels.shape[2] != x.shape[3]:
        raise ConfigurationError(
            f"channel axis mismatch: input has {x.shape[3]}, kernels expect {kernels.shape[2]}")
    if n > x.shape[1]:
        raise ConfigurationError(f"height axis {x.shape[1]} smaller than kernel size {n}")
    if n > x.shape[2]:
        raise ConfigurationError(f"width axis {x.shape[2]} smaller than kernel size {n}")


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, return_cols: bool = False):
    """Valid 2D cross-correlation.

    ``out[b, y, x, co] = sum_{i, j, ci} kernels[i, j, ci, co] * x[b, y+i, x+j, ci]``

    With ``return_cols=True`` the im2col buffer is returned as well so the
    backward pass does not have to rebuild it.
    """
    _check_conv_shapes(x, kernels)
    B, H, W, _ = x.shape
    n, _, Cin, Cout = kernels.shape
    Ho, Wo = H - n + 1, W - n + 1
    if n == 1:
        cols = x.reshape(B * H * W, Cin)
    else:
        cols = _im2col(x, n)
    out = (cols @ kernels.reshape(n * n * Cin, Cout)).reshape(B, Ho, Wo, Cout)
    if return_cols:
        return out, cols
    return out


def conv2d_valid_backward(x: np.ndarray, kernels: np.ndarray, dout: np.ndarray,
                          cols: np.ndarray | None = None):
    """Gradients of :func:`conv2d_valid` w.r.t. input and kernels."""
    n, _, Cin, Cout = kernels.shape
    if cols is None:
        cols = x.reshape(-1, Cin) if n == 1 else _im2col(x, n)
    dflat = dout.reshape(-1, Cout)
    dk = (cols.T @ dflat).reshape(kernels.shape)
    dcols = dflat @ kernels.reshape(n * n * Cin, Cout).T
    if n == 1:
        dx = dcols.reshape(x.shape)
    else:
        dx = _col2im(dcols, x.shape, n)
    return dx, dk


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d(x: np.ndarray, k: int):
    """Non-overlapping ``k x k`` max pooling over the two axes before channels.

    Leading axes pass through. Extents not divisible by ``k`` are trimmed
    from the end. Returns ``(out, argmax)`` where ``argmax`` holds the
    in-window flat index of the first maximum, used by the backward pass.
    """
    if k < 1:
        raise ConfigurationError(f"pool size must be >= 1, got {k}")
    if k == 1:
        return x.copy(), None
    *lead, H, W, C = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise ConfigurationError(f"pool size {k} larger than spatial extent {H}x{W}")
    xt = x[..., :Ho * k, :Wo * k, :]
    win = xt.reshape(*lead, Ho, k, Wo, k, C)
    nl = len(lead)
    win = np.moveaxis(win, nl + 2, nl + 1).reshape(*lead, Ho, Wo, k * k, C)
    idx = np.argmax(win, axis=-2)
    out = np.take_along_axis(win, idx[..., None, :], axis=-2)[..., 0, :]
    return out, idx


def maxpool2d_backward(dout: np.ndarray, argmax, in_shape, k: int) -> np.ndarray:
    if k == 1:
        return dout.copy()
    *lead, H, W, C = in_shape
    Ho, Wo = H // k, W // k
    nl = len(lead)
    dwin = np.zeros((*lead, Ho, Wo, k * k, C), dtype=dout.dtype)
    np.put_along_axis(dwin, argmax[..., None, :], dout[..., None, :], axis=-2)
    dwin = dwin.reshape(*lead, Ho, Wo, k, k, C)
    dwin = np.moveaxis(dwin, nl + 2, nl + 1).reshape(*lead, Ho * k, Wo * k, C)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[..., :Ho * k, :Wo * k, :] = dwin
    return dx


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dout):
    return dout * (x > 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y, dout):
    """Backward given the sigmoid *output* ``y``."""
    return dout * y * (1 - y)


def pointwise(x, fn: str):
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown pointwise function {fn!r}")


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y, dout, axis=-1):
    """Backward given the softmax *output* ``y``."""
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(forward: Callable[..., np.ndarray],
               backward: Callable[[np.ndarray], Sequence[np.ndarray]],
               inputs: Sequence[np.ndarray], eps: float = 1e-5,
               seed: int = 0) -> float:
    """Compare analytic gradients with central differences.

    ``forward(*inputs)`` returns an array ``y``; ``backward(dy)`` returns one
    gradient per input and must refer to the most recent forward call. The
    scalar probed is ``sum(w * y)`` for a fixed random ``w``. Inputs are
    perturbed in place and restored. Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over all entries.
    """
    inputs = list(inputs)
    for a in inputs:
        if a.dtype != np.float64:
            raise ConfigurationError("grad_check requires float64 inputs")
    y = forward(*inputs)
    check_finite(y, where="forward")
    w = np.random.default_rng(seed).standard_normal(y.shape)
    grads = backward(w)
    if isinstance(grads, np.ndarray):
        grads = [grads]
    worst = 0.0
    for a, g in zip(inputs, grads):
        check_finite(g, where="backward")
        flat = a.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for t in range(flat.size):
            old = flat[t]
            flat[t] = old + eps
            yp = np.sum(w * forward(*inputs))
            flat[t] = old - eps
            ym = np.sum(w * forward(*inputs))
            flat[t] = old
            if not (np.isfinite(yp) and np.isfinite(ym)):
                raise NumericalError("non-finite value during finite differences")
            num = (yp - ym) / (2 * eps)
            worst = max(worst, abs(gflat[t] - num) / max(1.0, abs(num)))
    # leave caches consistent with the unperturbed inputs
    forward(*inputs)
    return float(worst)

"""SE(2,N) network layers with explicit backward passes.

Planar maps are ``[B, H, W, C]``; SE(2)-images are ``[B, N, H, W, C]``.
Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into its :class:`~se2conv.tensor.Parameter`
objects on ``backward``.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError
from .rotation import KernelBase
from .tensor import (Parameter, conv2d_valid, conv2d_valid_backward, maxpool2d,
                     maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward,
                     softmax, softmax_backward)


class Layer:
    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def num_params(self) -> int:
        return sum(p.value.size for p in self.parameters())


# --------------------------------------------------------------------------
# functional forms
# --------------------------------------------------------------------------

def _lifting_kernel(bank: np.ndarray) -> np.ndarray:
    N, n, _, cin, cout = bank.shape
    return bank.transpose(1, 2, 3, 0, 4).reshape(n, n, cin, N * cout)


def _group_kernel(bank: np.ndarray) -> np.ndarray:
    # bank [Nout, n, n, Nin, Cin, Cout] -> [n, n, Nin*Cin, Nout*Cout]
    N, n, _, Nin, cin, cout = bank.shape
    return bank.transpose(1, 2, 3, 4, 0, 5).reshape(n, n, Nin * cin, N * cout)


def lifting_forward(f: np.ndarray, kb: KernelBase) -> np.ndarray:
    """Correlate a planar map with the N rotated copies of a lifting kernel."""
    if kb.kind != "lifting":
        raise ConfigurationError("lifting_forward needs a lifting kernel")
    if f.shape[-1] != kb.cin:
        raise ConfigurationError(f"channel axis mismatch: input {f.shape[-1]}, kernel {kb.cin}")
    y = conv2d_valid(f, _lifting_kernel(kb.derive()).astype(f.dtype, copy=False))
    B, Ho, Wo, _ = y.shape
    return y.reshape(B, Ho, Wo, kb.N, kb.cout).transpose(0, 3, 1, 2, 4)


def group_conv_forward(F: np.ndarray, kb: KernelBase) -> np.ndarray:
    """Group correlation: sum over input orientations of planar correlations."""
    if kb.kind != "group":
        raise ConfigurationError("group_conv_forward needs a group kernel")
    B, N, H, W, C = F.shape
    if N != kb.N:
        raise ConfigurationError(f"orientation axis mismatch: input N={N}, kernel N={kb.N}")
    if C != kb.cin:
        raise ConfigurationError(f"channel axis mismatch: input {C}, kernel {kb.cin}")
    x = F.transpose(0, 2, 3, 1, 4).reshape(B, H, W, N * C)
    y = conv2d_valid(x, _group_kernel(kb.derive()).astype(F.dtype, copy=False))
    _, Ho, Wo, _ = y.shape
    return y.reshape(B, Ho, Wo, N, kb.cout).transpose(0, 3, 1, 2, 4)


def projection(F: np.ndarray, mode: str = "max") -> np.ndarray:
    """Reduce the orientation axis (axis 1) of an SE(2)-image."""
    if mode == "max":
        return F.max(axis=1)
    if mode == "mean":
        # summing in sorted order makes the result bit-identical under any
        # permutation of the orientation axis
        return np.sort(F, axis=1).mean(axis=1)
    raise ConfigurationError(f"projection mode must be 'max' or 'mean', got {mode!r}")


def projection_backward(F: np.ndarray, dout: np.ndarray, mode: str) -> np.ndarray:
    N = F.shape[1]
    if mode == "mean":
        return np.repeat(dout[:, None] / N, N, axis=1)
    idx = np.argmax(F, axis=1)
    dF = np.zeros_like(F)
    np.put_along_axis(dF, idx[:, None], dout[:, None], axis=1)
    return dF


def upsample2x(F: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of the two axes before channels."""
    return np.repeat(np.repeat(F, 2, axis=-3), 2, axis=-2)


def center_crop(F: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = F.shape[-3], F.shape[-2]
    if H < h or W < w:
        raise ConfigurationError(f"cannot crop {H}x{W} to larger {h}x{w}")
    if (H - h) % 2 or (W - w) % 2:
        raise ConfigurationError(
            f"center crop {H}x{W} -> {h}x{w} is not symmetric (parity mismatch)")
    t, l = (H - h) // 2, (W - w) // 2
    return F[..., t:t + h, l:l + w, :]


def upsample_concat(F: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """Upsample ``F`` 2x, center-crop ``skip`` to match and stack channels."""
    if F.ndim == 5 and F.shape[1] != skip.shape[1]:
        raise ConfigurationError("skip and input disagree on the orientation axis")
    up = upsample2x(F)
    crop = center_crop(skip, up.shape[-3], up.shape[-2])
    return np.concatenate([up, crop], axis=-1)


# --------------------------------------------------------------------------
# layer objects
# --------------------------------------------------------------------------

class LiftingLayer(Layer):
    """Planar ``[B,H,W,Cin]`` -> SE(2)-image ``[B,N,H-n+1,W-n+1,Cout]``."""

    def __init__(self, cin, cout, N, kernel_size=5, radius=None, rng=None, dtype=np.float32,
                 name="lifting"):
        self.kernel = KernelBase("lifting", kernel_size, N, cin, cout, radius, rng, dtype,
                                 name=f"{name}.base")
        self._cache = None

    def forward(self, x, training=False):
        kb = self.kernel
        if x.ndim != 4:
            raise ConfigurationError(f"lifting layer expects [B,H,W,C], got rank {x.ndim}")
        if x.shape[-1] != kb.cin:
            raise ConfigurationError(f"channel axis mismatch: input {x.shape[-1]}, kernel {kb.cin}")
        K = _lifting_kernel(kb.derive()).astype(x.dtype, copy=False)
        y, cols = conv2d_valid(x, K, return_cols=True)
        self._cache = (x, K, cols)
        B, Ho, Wo, _ = y.shape
        return y.reshape(B, Ho, Wo, kb.N, kb.cout).transpose(0, 3, 1, 2, 4)

    def backward(self, dout):
        kb = self.kernel
        x, K, cols = self._cache
        B, N, Ho, Wo, C = dout.shape
        dy = dout.transpose(0, 2, 3, 1, 4).reshape(B, Ho, Wo, N * C)
        dx, dK = conv2d_valid_backward(x, K, dy, cols)
        n = kb.n
        dbank = dK.reshape(n, n, kb.cin, N, C).transpose(3, 0, 1, 2, 4)
        kb.backprop(dbank)
        return dx

    def parameters(self):
        return [self.kernel.param]


class GroupConvLayer(Layer):
    """SE(2)-image -> SE(2)-image with roto-shifted group kernels."""

    def __init__(self, cin, cout, N, kernel_size=5, radius=None, rng=None, dtype=np.float32,
                 name="group"):
        self.kernel = KernelBase("group", kernel_size, N, cin, cout, radius, rng, dtype,
                                 name=f"{name}.base")
        self._cache = None

    def forward(self, F, training=False):
        kb = self.kernel
        if F.ndim != 5:
            raise ConfigurationError(f"group layer expects [B,N,H,W,C], got rank {F.ndim}")
        B, N, H, W, C = F.shape
        if N != kb.N:
            raise ConfigurationError(f"orientation axis mismatch: input N={N}, kernel N={kb.N}")
        if C != kb.cin:
            raise ConfigurationError(f"channel axis mismatch: input {C}, kernel {kb.cin}")
        x = F.transpose(0, 2, 3, 1, 4).reshape(B, H, W, N * C)
        K = _group_kernel(kb.derive()).astype(F.dtype, copy=False)
        y, cols = conv2d_valid(x, K, return_cols=True)
        self._cache = (F.shape, x, K, cols)
        _, Ho, Wo, _ = y.shape
        return y.reshape(B, Ho, Wo, N, kb.cout).transpose(0, 3, 1, 2, 4)

    def backward(self, dout):
        kb = self.kernel
        in_shape, x, K, cols = self._cache
        B, N, Ho, Wo, C = dout.shape
        dy = dout.transpose(0, 2, 3, 1, 4).reshape(B, Ho, Wo, N * C)
        dx, dK = conv2d_valid_backward(x, K, dy, cols)
        n = kb.n
        dbank = dK.reshape(n, n, N, kb.cin, N, C).transpose(4, 0, 1, 2, 3, 5)
        kb.backprop(dbank)
        _, _, H, W, Cin = in_shape
        return dx.reshape(B, H, W, N, Cin).transpose(0, 3, 1, 2, 4)

    def parameters(self):
        return [self.kernel.param]


class Projection(Layer):
    def __init__(self, mode="max"):
        if mode not in ("max", "mean"):
            raise ConfigurationError(f"projection mode must be 'max' or 'mean', got {mode!r}")
        self.mode = mode
        self._F = None

    def forward(self, F, training=False):
        self._F = F
        return projection(F, self.mode)

    def backward(self, dout):
        return projection_backward(self._F, dout, self.mode)


class SE2BatchNorm(Layer):
    """Batch norm whose statistics span every axis except the channel axis.

    For SE(2)-images this pools batch, orientation, height and width, so a
    cyclic shift of the orientation axis leaves the statistics unchanged.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name="bn"):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma", decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta", decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training=False):
        C = self.channels
        if x.shape[-1] != C:
            raise ConfigurationError(f"channel axis mismatch: input {x.shape[-1]}, batch norm {C}")
        x2 = x.reshape(-1, C)
        m = x2.shape[0]
        if training:
            if x.shape[0] < 2:
                raise ConfigurationError("batch norm in training mode needs a batch of at least 2")
            ones = np.ones(m, dtype=x.dtype)
            mean = (ones @ x2) / m
            xc = x2 - mean
            var = (ones @ (xc * xc)) / m
            unbiased = var * m / max(m - 1, 1)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * unbiased).astype(self.running_var.dtype)
        else:
            xc = x2 - self.running_mean
            var = self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv
        self._cache = (xhat, inv, training)
        return (self.gamma.value * xhat + self.beta.value).reshape(x.shape)

    def backward(self, dout):
        xhat, inv, training = self._cache
        d2 = dout.reshape(-1, self.channels)
        ones = np.ones(d2.shape[0], dtype=d2.dtype)
        self.gamma.grad += ones @ (d2 * xhat)
        self.beta.grad += ones @ d2
        dxhat = d2 * self.gamma.value
        if not training:
            return (dxhat * inv).reshape(dout.shape)
        m = d2.shape[0]
        dx = (inv / m) * (m * dxhat - ones @ dxhat - xhat * (ones @ (dxhat * xhat)))
        return dx.reshape(dout.shape)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def se2_batchnorm(F, state: SE2BatchNorm, training: bool = False):
    return state.forward(F, training)


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return relu(x)

    def backward(self, dout):
        return relu_backward(self._x, dout)


class SE2MaxPool(Layer):
    """Spatial max pooling applied independently to every orientation slice."""

    def __init__(self, k):
        if k < 1:
            raise ConfigurationError(f"pool size must be >= 1, got {k}")
        self.k = k
        self._cache = None

    def forward(self, F, training=False):
        out, idx = maxpool2d(F, self.k)
        self._cache = (F.shape, idx)
        return out

    def backward(self, dout):
        shape, idx = self._cache
        return maxpool2d_backward(dout, idx, shape, self.k)


def se2_maxpool_spatial(F, k):
    return maxpool2d(F, k)[0]


class UpsampleConcat(Layer):
    """Two-input layer: ``forward((F, skip))`` returns the stacked map."""

    def __init__(self):
        self._cache = None

    def forward(self, inputs, training=False):
        F, skip = inputs
        out = upsample_concat(F, skip)
        self._cache = (F.shape, skip.shape)
        return out

    def backward(self, dout):
        f_shape, s_shape = self._cache
        cf = f_shape[-1]
        dup, dcrop = dout[..., :cf], dout[..., cf:]
        *lead, h2, w2, _ = dup.shape
        dF = dup.reshape(*lead, h2 // 2, 2, w2 // 2, 2, cf).sum(axis=(-4, -2))
        dskip = np.zeros(s_shape, dtype=dout.dtype)
        H, W = s_shape[-3], s_shape[-2]
        t, l = (H - h2) // 2, (W - w2) // 2
        dskip[..., t:t + h2, l:l + w2, :] = dcrop
        return dF, dskip


class FCHead(Layer):
    """Fully connected head applied as a 1x1 convolution plus activation.

    With ``affine=True`` the bias is replaced by a per-class scale and shift
    applied after the 1x1 weights (``2 * cout`` parameters).
    """

    def __init__(self, cin, cout, activation="sigmoid", affine=False, dtype=np.float32,
                 name="head"):
        if activation not in ("sigmoid", "softmax", "none"):
            raise ConfigurationError(f"unknown head activation {activation!r}")
        self.activation, self.affine = activation, affine
        # zero init: the head starts at the uninformative prediction and the
        # first updates do not push the feature layers around
        self.W = Parameter(np.zeros((1, 1, cin, cout), dtype=dtype), name=f"{name}.W")
        if affine:
            self.scale = Parameter(np.ones(cout, dtype=dtype), name=f"{name}.scale", decay=False)
            self.b = Parameter(np.zeros(cout, dtype=dtype), name=f"{name}.shift", decay=False)
        else:
            self.scale = None
            self.b = Parameter(np.zeros(cout, dtype=dtype), name=f"{name}.b", decay=False)
        self._cache = None

    def forward(self, x, training=False):
        z0 = conv2d_valid(x, self.W.value.astype(x.dtype, copy=False))
        z = z0 * self.scale.value + self.b.value if self.affine else z0 + self.b.value
        if self.activation == "sigmoid":
            y = sigmoid(z)
        elif self.activation == "softmax":
            y = softmax(z, axis=-1)
        else:
            y = z
        self._cache = (x, z0, y)
        return y

    def backward(self, dout):
        x, z0, y = self._cache
        if self.activation == "sigmoid":
            dz = sigmoid_backward(y, dout)
        elif self.activation == "softmax":
            dz = softmax_backward(y, dout, axis=-1)
        else:
            dz = dout
        axes = tuple(range(dz.ndim - 1))
        self.b.grad += dz.sum(axis=axes)
        if self.affine:
            self.scale.grad += np.sum(dz * z0, axis=axes)
            dz = dz * self.scale.value
        dx, dW = conv2d_valid_backward(x, self.W.value, dz)
        self.W.grad += dW
        return dx

    def parameters(self):
        ps = [self.W, self.b]
        if self.affine:
            ps.insert(1, self.scale)
        return ps


def fc_head(f, W, b, activation="sigmoid"):
    z = conv2d_valid(f, W) + b
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z, axis=-1)
    return z

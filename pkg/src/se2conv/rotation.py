"""Roto-translation group elements and rotated kernel banks.

Spatial conventions used throughout the package: a pixel ``(row, col)`` of an
``n x n`` grid sits at the offset ``(x, y) = (col - c, row - c)`` from the
center ``c = (n - 1) / 2``. Rotations act on ``(x, y)`` with the usual matrix
``[[cos, -sin], [sin, cos]]``. With rows pointing down the screen, a rotation
by ``pi/2`` is ``np.rot90(a, k=-1)``.

A rotated kernel is ``k_theta(p) = k(R_theta^{-1} p)``, sampled with bilinear
interpolation. The map ``base -> k_theta`` is linear and stored as a sparse
``(n*n, n*n)`` matrix so the backward pass is just its transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError
from .tensor import Parameter

TWO_PI = 2.0 * math.pi
# source coordinates this close to an integer are snapped, which makes the
# operator an exact permutation at multiples of pi/2
_SNAP = 1e-9


def _wrap(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0:
        t += TWO_PI
    if t >= TWO_PI:
        t = 0.0
    return t


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class GroupElement:
    """Element ``(x, theta)`` of SE(2)."""

    x: tuple = (0.0, 0.0)
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", (float(self.x[0]), float(self.x[1])))
        object.__setattr__(self, "theta", _wrap(float(self.theta)))

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return group_product(self, other)

    def inverse(self) -> "GroupElement":
        return group_inverse(self)

    def act(self, point):
        return group_action(self, point)

    def isclose(self, other: "GroupElement", tol: float = 1e-12) -> bool:
        dtheta = abs(self.theta - other.theta)
        dtheta = min(dtheta, TWO_PI - dtheta)
        return (abs(self.x[0] - other.x[0]) <= tol and abs(self.x[1] - other.x[1]) <= tol
                and dtheta <= tol)


IDENTITY = GroupElement()


def group_product(g: GroupElement, h: GroupElement) -> GroupElement:
    """``(x, a) . (x', b) = (R_a x' + x, a + b)``."""
    rx = rotation_matrix(g.theta) @ np.asarray(h.x)
    return GroupElement((rx[0] + g.x[0], rx[1] + g.x[1]), g.theta + h.theta)


def group_inverse(g: GroupElement) -> GroupElement:
    rx = rotation_matrix(-g.theta) @ np.asarray(g.x)
    return GroupElement((-rx[0], -rx[1]), -g.theta)


def group_action(g: GroupElement, point):
    """Act on a position-orientation pair ``((x, y), theta)``."""
    (px, py), ptheta = point
    rx = rotation_matrix(g.theta) @ np.array([px, py], dtype=float)
    return (float(rx[0] + g.x[0]), float(rx[1] + g.x[1])), _wrap(g.theta + ptheta)


# --------------------------------------------------------------------------
# masks and rotation operators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CircularMask:
    n: int
    radius: float

    @property
    def active(self) -> np.ndarray:
        c = (self.n - 1) / 2.0
        r, q = np.mgrid[0:self.n, 0:self.n]
        return (r - c) ** 2 + (q - c) ** 2 <= self.radius ** 2 + 1e-12

    @property
    def count(self) -> int:
        return int(self.active.sum())


def circular_mask(n: int, radius: float | None = None) -> CircularMask:
    return CircularMask(n, n / 2.0 if radius is None else float(radius))


@dataclass(frozen=True)
class RotationOperator:
    """Sparse bilinear map from a base kernel to its rotation by ``theta``.

    ``matrix[t, s]`` is the weight of source pixel ``s`` in target pixel
    ``t`` (flat row-major indices). Rows and columns of masked-out pixels are
    empty.
    """

    n: int
    theta: float
    mask: CircularMask
    matrix: sp.csr_matrix = field(repr=False, compare=False)

    @property
    def entries(self) -> dict:
        """``{(row, col): [((src_row, src_col), weight), ...]}`` per target pixel."""
        out = {}
        m = self.matrix.tocsr()
        for t in range(m.shape[0]):
            lo, hi = m.indptr[t], m.indptr[t + 1]
            if lo == hi:
                continue
            out[divmod(t, self.n)] = [(divmod(int(s), self.n), float(w))
                                      for s, w in zip(m.indices[lo:hi], m.data[lo:hi])]
        return out

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, kernel: np.ndarray) -> np.ndarray:
        """Rotate the two leading spatial axes of ``kernel``."""
        n = self.n
        flat = kernel.reshape(n * n, -1)
        return np.asarray(self.matrix @ flat, dtype=kernel.dtype).reshape(kernel.shape)

    def apply_transpose(self, grad: np.ndarray) -> np.ndarray:
        n = self.n
        flat = grad.reshape(n * n, -1)
        return np.asarray(self.matrix.T @ flat, dtype=grad.dtype).reshape(grad.shape)


def build_rotation_operator(n: int, theta: float, mask: CircularMask | None = None
                            ) -> RotationOperator:
    """Bilinear rotation of an ``n x n`` masked kernel by ``theta`` radians.

    For each active target pixel the source position ``R^{-1} p`` is
    interpolated from its four grid neighbours. Neighbours outside the mask
    are dropped without renormalising the remaining weights.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {n}")
    if mask is None:
        mask = circular_mask(n)
    if mask.n != n:
        raise ConfigurationError(f"mask size {mask.n} does not match kernel size {n}")
    active = mask.active
    c = (n - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    rows, cols, vals = [], [], []
    for r in range(n):
        for q in range(n):
            if not active[r, q]:
                continue
            x, y = q - c, r - c
            # R^{-1} p
            sx = cos * x + sin * y
            sy = -sin * x + cos * y
            if abs(sx - round(sx)) < _SNAP:
                sx = float(round(sx))
            if abs(sy - round(sy)) < _SNAP:
                sy = float(round(sy))
            fq, fr = sx + c, sy + c
            q0, r0 = math.floor(fq), math.floor(fr)
            dq, dr = fq - q0, fr - r0
            for rr, qq, w in ((r0, q0, (1 - dr) * (1 - dq)), (r0, q0 + 1, (1 - dr) * dq),
                              (r0 + 1, q0, dr * (1 - dq)), (r0 + 1, q0 + 1, dr * dq)):
                if w == 0.0:
                    continue
                if 0 <= rr < n and 0 <= qq < n and active[rr, qq]:
                    rows.append(r * n + q)
                    cols.append(rr * n + qq)
                    vals.append(w)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))
    return RotationOperator(n, float(theta), mask, matrix)


@lru_cache(maxsize=None)
def rotation_operators(n: int, N: int, radius: float | None = None) -> tuple:
    """Cached operators for the angles ``2 pi i / N``, ``i = 0..N-1``."""
    mask = circular_mask(n, radius)
    return tuple(build_rotation_operator(n, TWO_PI * i / N, mask) for i in range(N))


# --------------------------------------------------------------------------
# kernel banks
# --------------------------------------------------------------------------

class KernelBase:
    """Trainable base weights of one lifting or group layer.

    ``base`` has shape ``[n, n, Cin, Cout]`` for lifting kernels and
    ``[n, n, N, Cin, Cout]`` for group kernels. Masked positions are zero and
    stay zero: the derived bank never reads them and their gradient is zero.
    """

    def __init__(self, kind: str, n: int, N: int, cin: int, cout: int,
                 radius: float | None = None, rng=None, dtype=np.float32, name: str = ""):
        if kind not in ("lifting", "group"):
            raise ConfigurationError(f"kernel kind must be 'lifting' or 'group', got {kind!r}")
        if N < 1:
            raise ConfigurationError(f"orientation count must be >= 1, got {N}")
        self.kind, self.n, self.N, self.cin, self.cout = kind, n, N, cin, cout
        self.mask = circular_mask(n, radius)
        self.operators = rotation_operators(n, N, self.mask.radius)
        shape = (n, n, cin, cout) if kind == "lifting" else (n, n, N, cin, cout)
        rng = np.random.default_rng(0) if rng is None else rng
        # He-style uniform init with fan-in over active taps and input orientations
        fan_in = self.mask.count * cin * (N if kind == "group" else 1)
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        w *= self._mask_view(len(shape))
        self.param = Parameter(w.astype(dtype), name=name or f"{kind}_base")

    def _mask_view(self, ndim: int) -> np.ndarray:
        return self.mask.active.reshape(self.n, self.n, *([1] * (ndim - 2)))

    @property
    def base(self) -> np.ndarray:
        return self.param.value

    @base.setter
    def base(self, value: np.ndarray):
        self.param.value = value

    @property
    def num_params(self) -> int:
        per_slice = self.mask.count
        return per_slice * self.cin * self.cout * (self.N if self.kind == "group" else 1)

    def derive(self) -> np.ndarray:
        if self.kind == "lifting":
            return derive_bank_lifting(self)
        return derive_bank_group(self)

    def backprop(self, grad_bank: np.ndarray) -> np.ndarray:
        g = backprop_bank_to_base(self, grad_bank)
        self.param.grad += g
        return g


def derive_bank_lifting(kb: KernelBase) -> np.ndarray:
    """``[N, n, n, Cin, Cout]`` stack of rotated copies of the base kernel."""
    if kb.kind != "lifting":
        raise ConfigurationError("derive_bank_lifting needs a lifting kernel")
    return np.stack([op.apply(kb.base) for op in kb.operators])


def derive_bank_group(kb: KernelBase) -> np.ndarray:
    """``[N, n, n, N, Cin, Cout]`` stack of shift-twisted group kernels.

    ``bank[j][..., m, :, :] = rotate_j(base[..., (m - j) % N, :, :])``
    """
    if kb.kind != "group":
        raise ConfigurationError("derive_bank_group needs a group kernel")
    return np.stack([np.roll(op.apply(kb.base), j, axis=2)
                     for j, op in enumerate(kb.operators)])


def backprop_bank_to_base(kb: KernelBase, grad_bank: np.ndarray) -> np.ndarray:
    """Transpose of :func:`derive_bank_lifting` / :func:`derive_bank_group`."""
    expected = (kb.N, *kb.base.shape)
    if grad_bank.shape != expected:
        raise ConfigurationError(f"bank gradient has shape {grad_bank.shape}, expected {expected}")
    out = np.zeros_like(kb.base)
    for j, op in enumerate(kb.operators):
        g = grad_bank[j]
        if kb.kind == "group":
            g = np.roll(g, -j, axis=2)
        out += op.apply_transpose(g)
    return out

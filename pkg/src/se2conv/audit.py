"""Rotational robustness measurements.

The functions here rotate inputs, re-run a model and compare: polar response
curves (prediction versus input angle), equivariance errors of layer prefixes
and re-aligned dense prediction statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError

HALF_PI = math.pi / 2


def _quarter_turns(theta: float) -> int | None:
    k = theta / HALF_PI
    r = round(k)
    if abs(k - r) < 1e-9:
        return int(r) % 4
    return None


def rotate_input(image: np.ndarray, theta: float) -> np.ndarray:
    """Rotate ``[..., H, W, C]`` by ``theta`` about the spatial center.

    Uses the package convention ``out(p) = image(R_theta^{-1} p)`` with
    ``p = (col - c, row - c)``. Multiples of ``pi/2`` are exact index
    permutations; other angles use bilinear sampling with reflection at the
    borders.
    """
    image = np.asarray(image)
    H, W = image.shape[-3], image.shape[-2]
    if H != W:
        raise ConfigurationError(f"rotation needs a square image, got {H}x{W}")
    k = _quarter_turns(theta)
    if k is not None:
        if k == 0:
            return image.copy()
        return np.ascontiguousarray(np.rot90(image, -k, axes=(-3, -2)))
    c = (H - 1) / 2.0
    r, q = np.mgrid[0:H, 0:W].astype(np.float64)
    x, y = q - c, r - c
    cos, sin = math.cos(theta), math.sin(theta)
    src_q = cos * x + sin * y + c
    src_r = -sin * x + cos * y + c
    flat = image.reshape(-1, H, W, image.shape[-1])
    out = np.empty_like(flat)
    for b in range(flat.shape[0]):
        for ch in range(flat.shape[-1]):
            out[b, :, :, ch] = ndimage.map_coordinates(flat[b, :, :, ch], [src_r, src_q],
                                                       order=1, mode="mirror")
    return out.reshape(image.shape)


def shift_twist(F: np.ndarray, theta: float, N: int) -> np.ndarray:
    """Apply a roto-translation to an SE(2)-image ``[..., N, H, W, C]``.

    Every orientation slice is rotated spatially and the orientation axis is
    cyclically shifted by ``theta / (2 pi / N)`` steps.
    """
    j = orientation_index(theta, N)
    rotated = rotate_input(F, theta)
    return np.roll(rotated, j, axis=-4)


def orientation_index(theta: float, N: int) -> int:
    j = theta * N / (2 * math.pi)
    r = round(j)
    if abs(j - r) > 1e-9:
        raise ConfigurationError(f"angle {theta} is not on the SE(2,{N}) orientation grid")
    return int(r) % N


def disk_mask(h: int, w: int, margin: float = 0.0) -> np.ndarray:
    c = (h - 1) / 2.0
    r, q = np.mgrid[0:h, 0:w]
    return (r - c) ** 2 + (q - (w - 1) / 2.0) ** 2 <= (min(h, w) / 2.0 - margin) ** 2


def equivariance_error(model, image: np.ndarray, theta: float, N: int | None = None,
                       layer_prefix: int | None = None, margin: float = 2.0):
    """Compare ``prefix(rotate(f))`` with ``shift_twist(prefix(f))``.

    ``layer_prefix`` counts blocks (``None`` = whole network, where the output
    is planar and only rotated). Off-grid angles need a pool-free prefix; the
    comparison then keeps a central disk ``margin`` pixels inside the map.
    Returns ``(max_abs, mean_abs)``.
    """
    N = model.config.N if N is None else N
    j = orientation_index(theta, N)
    exact = _quarter_turns(theta) is not None
    if not exact:
        blocks = model.blocks if layer_prefix is None else model.blocks[:layer_prefix]
        if any(b.pool is not None for b in blocks):
            raise ConfigurationError("off-grid angles need a prefix without pooling layers")
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    a = model.forward(rotate_input(image, theta), upto=layer_prefix)
    b = model.forward(image, upto=layer_prefix)
    if a.ndim == 5:
        b = np.roll(rotate_input(b, theta), j, axis=1)
    else:
        b = rotate_input(b, theta)
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if not exact:
        keep = disk_mask(diff.shape[-3], diff.shape[-2], margin)
        diff = diff[..., keep, :]
    if diff.size == 0:
        return 0.0, 0.0
    return float(diff.max()), float(diff.mean())


def scalar_prediction(pred: np.ndarray, statistic: str = "auto") -> np.ndarray:
    """One number per sample from a model output ``[B, h, w, K]``.

    ``auto`` picks the single output for ``1x1x1`` heads and the mean
    boundary-class (index 2) probability for dense 3-class maps.
    """
    B = pred.shape[0]
    if statistic == "auto":
        statistic = "value" if pred[0].size == 1 else ("boundary" if pred.shape[-1] == 3
                                                          else "mean")
    if statistic == "value":
        return pred.reshape(B, -1)[:, 0]
    if statistic == "boundary":
        return pred[..., 2].reshape(B, -1).mean(axis=1)
    if statistic == "mean":
        return pred.reshape(B, -1).mean(axis=1)
    raise ConfigurationError(f"unknown statistic {statistic!r}")


def polar_response(model, image: np.ndarray, steps: int = 16, statistic: str = "auto"):
    """Predictions for the input rotated by ``2 pi k / steps``, ``k = 0..steps-1``."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    batch = np.stack([rotate_input(image, 2 * math.pi * k / steps) for k in range(steps)])
    return scalar_prediction(model.forward(batch), statistic).astype(np.float64)


def response_variance(vec) -> float:
    return float(np.var(np.asarray(vec, dtype=np.float64)))


def aligned_prediction_stats(model, image: np.ndarray, steps: int = 4):
    """Per-pixel mean and standard deviation of re-aligned dense predictions.

    The input is rotated by ``2 pi k / steps``, predicted, and the prediction
    rotated back before accumulating.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    angles = [2 * math.pi * k / steps for k in range(steps)]
    preds = model.forward(np.stack([rotate_input(image, t) for t in angles]))
    aligned = np.stack([rotate_input(p, -t) for p, t in zip(preds.astype(np.float64), angles)])
    return aligned.mean(axis=0), aligned.std(axis=0)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class AuditReport:
    steps: int = 16
    polar: dict = field(default_factory=dict)
    equivariance: list = field(default_factory=list)
    variance: dict = field(default_factory=dict)

    def add_polar(self, sample_id, vec):
        vec = [float(v) for v in vec]
        if len(vec) != self.steps:
            raise ConfigurationError(f"expected {self.steps} responses, got {len(vec)}")
        self.polar[sample_id] = vec
        self.variance[sample_id] = response_variance(vec)

    def add_equivariance(self, layer, angle, max_abs, mean_abs):
        self.equivariance.append({"layer": layer, "angle": float(angle),
                                  "max_abs": float(max_abs), "mean_abs": float(mean_abs)})

    @property
    def mean_variance(self) -> float:
        return float(np.mean(list(self.variance.values()))) if self.variance else 0.0

    def write_polar_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "k", "angle_rad", "prediction"])
            for sid, vec in self.polar.items():
                for k, v in enumerate(vec):
                    w.writerow([sid, k, f"{2 * math.pi * k / self.steps:.6g}", f"{v:.6g}"])

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_variance"] = self.mean_variance
        return json.dumps(d, indent=2, sort_keys=True)

"""Optimizer, losses, augmentation, synthetic data and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se2t
from .exceptions import ConfigurationError, DataError, NumericalError
from .layers import center_crop
from .tensor import Parameter

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    patience: int = 5
    seed: int = 0
    augment: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr, momentum and weight_decay must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 2 or self.epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size >= 2, epochs >= 1 and patience >= 1 required")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def sgd_step(params: list[Parameter], state: dict, config: TrainConfig, lr: float | None = None):
    """Momentum SGD with decoupled weight decay.

    ``v <- mu v + g``; ``w <- w - lr v - lr wd w``. Parameters flagged with
    ``decay=False`` (batch norm affine terms, biases) skip the decay term.
    """
    lr = config.lr if lr is None else lr
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {p.name}")
        v = state.get(p.name)
        v = p.grad.copy() if v is None else config.momentum * v + p.grad
        state[p.name] = v
        step = lr * v
        if config.weight_decay and p.decay:
            step = step + lr * config.weight_decay * p.value
        p.value = (p.value - step).astype(p.value.dtype, copy=False)
    return params


# --------------------------------------------------------------------------
# losses: each returns (loss, d loss / d prediction)
# --------------------------------------------------------------------------

_CLIP = 1e-7


def bce(pred, label):
    """Mean binary cross-entropy of probabilities ``pred`` against 0/1 labels."""
    pred = np.asarray(pred)
    y = np.asarray(label).reshape(pred.shape)
    if np.any((y != 0) & (y != 1)):
        raise DataError("binary labels must be 0 or 1")
    p = np.clip(pred, _CLIP, 1 - _CLIP)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    grad = (p - y) / (p * (1 - p)) / pred.size
    grad = np.where((pred > _CLIP) & (pred < 1 - _CLIP), grad, 0.0).astype(pred.dtype)
    return float(loss), grad


def weighted_ce3(pred_map, mask, class_weights):
    """Class-weighted cross-entropy of softmax maps ``[B, h, w, K]``.

    ``mask`` holds integer classes ``[B, h, w]``. The loss is the mean over
    batch and pixels of ``-w[y] log p[y]``.
    """
    pred_map = np.asarray(pred_map)
    mask = np.asarray(mask)
    K = pred_map.shape[-1]
    if mask.shape != pred_map.shape[:-1]:
        raise DataError(f"mask shape {mask.shape} does not match prediction {pred_map.shape[:-1]}")
    if mask.min() < 0 or mask.max() >= K:
        raise DataError(f"mask labels must lie in [0, {K - 1}]")
    w = np.asarray(class_weights, dtype=np.float64)
    onehot = np.eye(K, dtype=pred_map.dtype)[mask]
    p = np.clip(pred_map, _CLIP, 1.0)
    wy = w[mask]
    m = mask.size
    loss = -np.sum(wy * np.log(np.sum(p * onehot, axis=-1))) / m
    grad = -(wy[..., None] * onehot / p) / m
    grad = np.where(pred_map > _CLIP, grad, 0.0).astype(pred_map.dtype)
    return float(loss), grad


def inverse_frequency_weights(masks, K=3) -> np.ndarray:
    counts = np.bincount(np.asarray(masks).ravel(), minlength=K).astype(np.float64)
    counts = np.maximum(counts, 1)
    return counts.sum() / (K * counts)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

BRIGHTNESS = 0.1


def augment(patch, rng, mask=None):
    """Random transposition, 90-degree rotation and per-channel brightness shift.

    ``patch`` is ``[H, W, C]`` on a [0, 1] scale; ``mask`` (``[H, W]``) gets
    the same geometric transform. Returns ``patch`` or ``(patch, mask)``.
    """
    if patch.shape[0] != patch.shape[1]:
        raise ConfigurationError("augmentation needs square patches")
    transpose = rng.random() < 0.5
    k = int(rng.integers(4))
    shift = rng.uniform(-BRIGHTNESS, BRIGHTNESS, size=patch.shape[-1])
    out = patch
    if transpose:
        out = out.transpose(1, 0, 2)
        mask = mask.T if mask is not None else None
    if k:
        out = np.rot90(out, -k, axes=(0, 1))
        mask = np.rot90(mask, -k) if mask is not None else None
    out = np.clip(out + shift, 0.0, 1.0).astype(patch.dtype)
    if mask is None:
        return out
    return out, np.ascontiguousarray(mask)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None
    groups: np.ndarray | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.groups is None:
            self.groups = np.zeros(len(self.images), dtype=np.int64)

    def __len__(self):
        return len(self.images)

    @property
    def task(self) -> str:
        return "seg" if self.masks is not None else "cls"


NOISE_SIGMA = 0.05
_SPLITS = {"train": 0, "val": 1, "test": 2}


def _disk(d, r, b):
    return b / (1.0 + np.exp(-(r - d) / 0.35))


def render_comet(size, center, radius, brightness, angle, tail_length, tail_brightness):
    """Bright disk with a fading one-sided tail pointing along ``angle``."""
    r, q = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = q - center[0], r - center[1]
    d = np.hypot(dx, dy)
    ux, uy = math.cos(angle), math.sin(angle)
    along = dx * ux + dy * uy
    perp = np.abs(-dx * uy + dy * ux)
    fade = np.clip(1 - np.maximum(along - radius, 0) / tail_length, 0, 1)
    width = 0.55 * radius * fade + 0.5
    tail = tail_brightness * fade * np.exp(-perp ** 2 / (2 * width ** 2))
    tail = np.where(along > 0, tail, 0.0)
    return np.maximum(_disk(d, radius, brightness), tail)


def render_disk(size, center, radius, brightness):
    r, q = np.mgrid[0:size, 0:size].astype(np.float64)
    return _disk(np.hypot(q - center[0], r - center[1]), radius, brightness)


def _matched_radius(size, center, brightness, target_sum):
    lo, hi = 0.5, size / 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if render_disk(size, center, mid, brightness).sum() < target_sum:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_object(rng, size, center, comet: bool):
    radius = rng.uniform(2.6, 4.0)
    brightness = rng.uniform(0.6, 0.9)
    angle = rng.uniform(0, 2 * math.pi)
    tail_length = rng.uniform(2.5, 4.5)
    tail_b = brightness * rng.uniform(0.3, 0.5)
    img = render_comet(size, center, radius, brightness, angle, tail_length, tail_b)
    if not comet:
        rb = _matched_radius(size, center, brightness, img.sum())
        img = render_disk(size, center, rb, brightness)
    return img


def synth_sample(seed, split, index, size=32, label=0, noise=True):
    """One binary-task patch ``[size, size, 1]``; label 1 = comet, 0 = disk."""
    rng = np.random.default_rng([seed, _SPLITS[split], index])
    c = (size - 1) / 2.0
    center = (c + rng.uniform(-1, 1), c + rng.uniform(-1, 1))
    img = _draw_object(rng, size, center, comet=bool(label))
    if noise:
        img = img + rng.normal(0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)[..., None]


def synth_seg_sample(seed, split, index, size=60):
    """Patch with 1-3 objects and its background/object/boundary mask."""
    rng = np.random.default_rng([seed, _SPLITS[split], index])
    count = int(rng.integers(1, 4))
    img = np.zeros((size, size))
    c = (size - 1) / 2.0
    for _ in range(count):
        center = (c + rng.uniform(-14, 14), c + rng.uniform(-14, 14))
        img = np.maximum(img, _draw_object(rng, size, center, comet=bool(rng.integers(2))))
    obj = img > 0.3
    # boundary: object pixels with a 4-neighbour outside the object
    pad = np.pad(obj, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    mask = np.where(obj, np.where(obj & ~interior, 2, 1), 0).astype(np.int64)
    img = img + rng.normal(0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)[..., None], mask


def synth_dataset(seed: int, n_per_class: int, size: int = 32, task: str = "cls",
                  split: str = "train") -> Dataset:
    """Deterministic synthetic split.

    ``task="cls"``: ``n_per_class`` comets (label 1) and disks (label 0),
    interleaved, every object at a uniformly random orientation.
    ``task="seg"``: ``2 * n_per_class`` multi-object patches with masks.
    """
    if split not in _SPLITS:
        raise ConfigurationError(f"split must be one of {list(_SPLITS)}")
    n = 2 * n_per_class
    if task == "cls":
        labels = np.arange(n) % 2
        images = np.stack([synth_sample(seed, split, i, size, labels[i]) for i in range(n)])
        return Dataset(images, labels=labels.astype(np.int64), groups=labels.copy(), split=split,
                       meta={"seed": seed, "size": size, "task": task})
    if task == "seg":
        pairs = [synth_seg_sample(seed, split, i, size) for i in range(n)]
        images = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
        return Dataset(images, masks=masks, groups=np.arange(n) % 4, split=split,
                       meta={"seed": seed, "size": size, "task": task})
    raise ConfigurationError(f"task must be 'cls' or 'seg', got {task!r}")


def write_dataset(ds: Dataset, directory) -> Path:
    """Write ``manifest.csv`` plus one SE2T file per patch (and mask)."""
    d = Path(directory)
    (d / "patches").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        rel = f"patches/{i:06d}.se2t"
        se2t.save(d / rel, ds.images[i])
        if ds.masks is not None:
            (d / "masks").mkdir(exist_ok=True)
            mrel = f"masks/{i:06d}.se2t"
            se2t.save(d / mrel, ds.masks[i].astype(np.float32))
            rows.append((rel, mrel, int(ds.groups[i])))
        else:
            rows.append((rel, int(ds.labels[i]), int(ds.groups[i])))
    with open(d / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relpath", "maskpath" if ds.masks is not None else "label", "group"])
        w.writerows(rows)
    return d


def load_dataset(directory, split: str | None = None, classes=(0, 1)) -> Dataset:
    d = Path(directory)
    if split is not None and (d / split / "manifest.csv").exists():
        d = d / split
    man = d / "manifest.csv"
    if not man.exists():
        raise FileNotFoundError(str(man))
    with open(man, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if len(header) != 3 or header[0] != "relpath" or header[1] not in ("label", "maskpath"):
        raise DataError(f"unexpected manifest header {header}")
    images, labels, masks, groups = [], [], [], []
    for rel, second, group in rows:
        p = d / rel
        if not p.exists():
            raise DataError(f"manifest path does not resolve: {p}")
        images.append(se2t.load(p))
        groups.append(int(group))
        if header[1] == "label":
            lab = int(second)
            if lab not in classes:
                raise DataError(f"label {lab} outside class set {classes}")
            labels.append(lab)
        else:
            mp = d / second
            if not mp.exists():
                raise DataError(f"manifest path does not resolve: {mp}")
            masks.append(se2t.load(mp).astype(np.int64))
    return Dataset(np.stack(images), labels=np.array(labels) if labels else None,
                   masks=np.stack(masks) if masks else None, groups=np.array(groups),
                   split=split or d.name)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def _targets_for(model, ds: Dataset, idx, masks=None):
    if ds.task == "cls":
        return ds.labels[idx].astype(np.float32)
    h, w = model.layer_shapes()[-1][:2]
    m = ds.masks[idx] if masks is None else masks
    return center_crop(m[..., None], h, w)[..., 0]


def _loss(model, pred, target, class_weights):
    if pred.shape[-1] == 1:
        loss, grad = bce(pred.reshape(len(pred)), target)
        return loss, grad.reshape(pred.shape)
    return weighted_ce3(pred, target, class_weights)


def _batches(ds: Dataset, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch, 7])
    bs = cfg.batch_size
    if ds.task == "cls":
        # class-balanced batches: half of every batch from each class
        per = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in (0, 1)]
        half = bs // 2
        nb = min(len(p) for p in per) // half
        for b in range(nb):
            idx = np.concatenate([p[b * half:(b + 1) * half] for p in per])
            yield np.sort(idx)
    else:
        order = rng.permutation(len(ds))
        for b in range(len(ds) // bs):
            yield np.sort(order[b * bs:(b + 1) * bs])


def _augment_batch(ds: Dataset, idx, cfg: TrainConfig, epoch: int, pool=None):
    def one(i):
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        if ds.masks is not None:
            return augment(ds.images[i], rng, ds.masks[i])
        return augment(ds.images[i], rng), None

    results = list(pool.map(one, idx)) if pool is not None else [one(i) for i in idx]
    images = np.stack([r[0] for r in results])
    masks = np.stack([r[1] for r in results]) if ds.masks is not None else None
    return images, masks


def evaluate(model, ds: Dataset, batch_size: int = 128, class_weights=None) -> dict:
    """Inference-mode loss and accuracy (pixel accuracy for masks)."""
    losses, correct, total = [], 0, 0
    if ds.task == "seg" and class_weights is None:
        class_weights = np.ones(3)
    for s in range(0, len(ds), batch_size):
        idx = np.arange(s, min(s + batch_size, len(ds)))
        pred = model.forward(ds.images[idx], training=False)
        target = _targets_for(model, ds, idx)
        loss, _ = _loss(model, pred, target, class_weights)
        losses.append(loss * len(idx))
        if ds.task == "cls":
            correct += int(np.sum((pred.reshape(-1) >= 0.5) == (target >= 0.5)))
            total += len(idx)
        else:
            correct += int(np.sum(pred.argmax(-1) == target))
            total += target.size
    return {"loss": float(np.sum(losses) / len(ds)), "accuracy": correct / max(total, 1)}


class TrainingDiverged(NumericalError):
    pass


def train(model, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          history_path=None, checkpoint_path=None) -> list[dict]:
    """Train with balanced mini-batches and keep the best validation state.

    The learning rate is multiplied by ``lr_decay_factor`` after every epoch.
    Training stops early once the validation loss has not improved for
    ``patience`` epochs; the best state is restored before returning.
    """
    from .models import save_checkpoint

    if train_set.task != val_set.task:
        raise ConfigurationError("train and validation sets are for different tasks")
    class_weights = (inverse_frequency_weights(train_set.masks) if train_set.task == "seg"
                     else None)
    state: dict = {}
    history: list[dict] = []
    best, best_loss, bad = model.state(), math.inf, 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(config.epochs):
            lr = config.lr * config.lr_decay_factor ** epoch
            losses = []
            for idx in _batches(train_set, config, epoch):
                if config.augment:
                    x, m = _augment_batch(train_set, idx, config, epoch, pool)
                else:
                    x, m = train_set.images[idx], None
                target = _targets_for(model, train_set, idx, m)
                model.zero_grad()
                pred = model.forward(x, training=True)
                loss, dpred = _loss(model, pred, target, class_weights)
                if not math.isfinite(loss):
                    model.load_state(best)
                    if checkpoint_path:
                        save_checkpoint(model, checkpoint_path)
                    raise TrainingDiverged(f"loss became non-finite in epoch {epoch + 1}")
                model.backward(dpred)
                sgd_step(model.parameters(), state, config, lr)
                losses.append(loss)
            val = evaluate(model, val_set, class_weights=class_weights)
            row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else math.nan,
                   "val_loss": val["loss"], "val_metric": val["accuracy"], "lr": lr}
            history.append(row)
            log.info("epoch %d train %.4f val %.4f acc %.4f", epoch + 1, row["train_loss"],
                     row["val_loss"], row["val_metric"])
            if val["loss"] < best_loss:
                best, best_loss, bad = model.state(), val["loss"], 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    model.load_state(best)
    if history_path:
        write_history(history, history_path)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return history


HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_metric", "lr"]


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.6g}" for k in HISTORY_COLUMNS[1:]])

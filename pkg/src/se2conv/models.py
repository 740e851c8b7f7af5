"""Declarative G-CNN configurations, the model builder and checkpoints.

A configuration is a flat list of :class:`LayerSpec` entries: one lifting
layer, any number of group layers, one projection and one head. Every
lifting/group entry expands into ``conv -> batch norm -> ReLU -> [pool]``.
A group entry with ``skip=x`` first upsamples its input 2x and concatenates a
centered crop of block ``x``'s activation taken *before* that block's pooling
(U-net style).
"""

from __future__ import annotations

import dataclasses
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from . import se2t
from .exceptions import ConfigurationError
from .layers import (FCHead, GroupConvLayer, LiftingLayer, Projection, ReLU, SE2BatchNorm,
                     SE2MaxPool, UpsampleConcat)

TASKS = ("mitosis", "nuclei", "tumor", "synth-cls", "synth-seg", "custom")


@dataclass
class LayerSpec:
    kind: str
    cout: int = 0
    kernel_size: int = 5
    pool: int = 1
    skip: int | None = None
    mode: str = "max"
    activation: str = "sigmoid"


@dataclass
class ModelConfig:
    task: str
    N: int
    layers: list
    input_shape: tuple = (68, 68, 3)
    kernel_size: int = 5
    mask_radius: float = 2.5
    strict_head: bool = False

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(self.input_shape)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


# channel widths of the trainable SE(2,N) layers, Tables 1-3
_WIDTHS = {
    "mitosis": {1: [16, 16, 16, 64, 16], 4: [10, 10, 10, 16, 16],
                8: [8, 8, 8, 8, 16], 16: [6, 6, 6, 4, 16]},
    "nuclei": {1: [16, 16, 16, 16, 64, 16], 4: [10, 10, 10, 10, 16, 16],
               8: [8, 8, 8, 8, 8, 16], 16: [6, 6, 6, 6, 4, 16]},
    "tumor": {1: [32, 32, 32, 64, 16], 4: [19, 19, 19, 16, 16],
              8: [14, 14, 14, 8, 16], 16: [10, 10, 10, 4, 16]},
    # desk-scale binary task on 32x32 grey patches; widths keep the weight
    # counts within a few percent of each other across N
    "synth-cls": {1: [11, 11, 11, 16], 4: [6, 6, 6, 8], 8: [4, 4, 4, 8], 16: [3, 3, 3, 6]},
    "synth-seg": {1: [8, 8, 8, 8, 16, 8], 4: [4, 4, 4, 4, 8, 8],
                  8: [3, 3, 3, 3, 6, 8], 16: [2, 2, 2, 2, 4, 8]},
}

# per-layer weight counts printed in Tables 1-3 (head last)
TABLE_COUNTS = {
    ("mitosis", 1): [1040, 5408, 5408, 21632, 1056, 17],
    ("mitosis", 4): [650, 8420, 8420, 13472, 1056, 17],
    ("mitosis", 8): [520, 10768, 10768, 10768, 1056, 17],
    ("mitosis", 16): [390, 12108, 12108, 8072, 1056, 17],
    ("nuclei", 1): [1040, 5408, 5408, 10784, 43136, 1056, 54],
    ("nuclei", 4): [650, 8420, 8420, 16820, 26912, 1056, 54],
    ("nuclei", 8): [520, 10768, 10768, 21520, 21520, 1056, 54],
    ("nuclei", 16): [390, 12108, 12108, 24204, 16136, 1056, 54],
    ("tumor", 1): [2080, 21568, 21568, 43136, 1056, 17],
    ("tumor", 4): [1235, 30362, 30362, 25568, 1056, 17],
    ("tumor", 8): [910, 32956, 32956, 18832, 1056, 17],
    ("tumor", 16): [650, 33620, 33620, 13448, 1056, 17],
}

TABLE_TOTALS = {
    ("mitosis", 1): 34561, ("mitosis", 4): 32035, ("mitosis", 8): 33897, ("mitosis", 16): 33751,
    ("nuclei", 1): 66886, ("nuclei", 4): 62332, ("nuclei", 8): 66206, ("nuclei", 16): 66056,
    ("tumor", 1): 89425, ("tumor", 4): 88600, ("tumor", 8): 86727, ("tumor", 16): 82411,
}


def preset(task: str, N: int, strict_head: bool = False) -> ModelConfig:
    """Frozen architecture for ``task`` at orientation count ``N``."""
    if task not in _WIDTHS:
        raise ConfigurationError(f"no preset for task {task!r}; choose from {sorted(_WIDTHS)}")
    if N not in _WIDTHS[task]:
        raise ConfigurationError(f"no {task} preset for N={N}; choose from {sorted(_WIDTHS[task])}")
    w = _WIDTHS[task][N]
    if task in ("mitosis", "tumor"):
        last_pool = 3 if task == "tumor" else 2
        layers = [LayerSpec("lifting", w[0], pool=2), LayerSpec("group", w[1], pool=2),
                  LayerSpec("group", w[2], pool=last_pool), LayerSpec("group", w[3]),
                  LayerSpec("group", w[4], kernel_size=1),
                  LayerSpec("projection", mode="max" if task == "mitosis" else "mean"),
                  LayerSpec("head", 1, kernel_size=1, activation="sigmoid")]
        shape = (68, 68, 3) if task == "mitosis" else (88, 88, 3)
    elif task == "synth-cls":
        layers = [LayerSpec("lifting", w[0], pool=2), LayerSpec("group", w[1], pool=2),
                  LayerSpec("group", w[2]), LayerSpec("group", w[3], kernel_size=1),
                  LayerSpec("projection", mode="max"),
                  LayerSpec("head", 1, kernel_size=1, activation="sigmoid")]
        shape = (32, 32, 1)
    else:
        layers = [LayerSpec("lifting", w[0], pool=2), LayerSpec("group", w[1], pool=2),
                  LayerSpec("group", w[2]), LayerSpec("group", w[3], skip=2),
                  LayerSpec("group", w[4], skip=1), LayerSpec("group", w[5], kernel_size=1),
                  LayerSpec("projection", mode="max"),
                  LayerSpec("head", 3, kernel_size=1, activation="softmax")]
        shape = (60, 60, 3) if task == "nuclei" else (60, 60, 1)
    # the affine head variant only exists for the 3-class softmax head
    strict = strict_head and layers[-1].activation == "softmax"
    return ModelConfig(task, N, layers, shape, strict_head=strict)


def validate_config(config: ModelConfig) -> None:
    """Enforce lifting -> group* -> projection -> head ordering."""
    kinds = [l.kind for l in config.layers]
    for k in kinds:
        if k not in ("lifting", "group", "projection", "head"):
            raise ConfigurationError(f"unknown layer kind {k!r}")
    if not kinds or kinds[0] != "lifting":
        raise ConfigurationError("the first layer must be a lifting layer")
    if kinds.count("lifting") != 1:
        raise ConfigurationError("exactly one lifting layer is allowed")
    if "projection" not in kinds:
        raise ConfigurationError("a projection layer is required before the head")
    p = kinds.index("projection")
    if kinds.count("projection") != 1 or any(k in ("lifting", "group") for k in kinds[p + 1:]):
        raise ConfigurationError("group layers must come before the single projection layer")
    if kinds[p + 1:] != ["head"]:
        raise ConfigurationError("the projection must be followed by exactly one head")
    for i, l in enumerate(config.layers[:p]):
        if l.cout < 1:
            raise ConfigurationError(f"layer {i + 1} needs a positive channel count")
        if l.kernel_size % 2 == 0:
            raise ConfigurationError(f"layer {i + 1} kernel size must be odd")
        if l.skip is not None and not 1 <= l.skip <= i:
            raise ConfigurationError(f"layer {i + 1} skip source {l.skip} must be an earlier layer")
    if config.N < 1:
        raise ConfigurationError("N must be >= 1")


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class Block:
    """``[upsample+concat] -> conv -> BN -> ReLU -> [maxpool]``."""

    def __init__(self, spec: LayerSpec, cin: int, N: int, radius: float, rng, dtype, name):
        self.spec = spec
        self.up = UpsampleConcat() if spec.skip is not None else None
        cls = LiftingLayer if spec.kind == "lifting" else GroupConvLayer
        self.conv = cls(cin, spec.cout, N, spec.kernel_size, radius, rng, dtype,
                        name=f"{name}.conv")
        self.bn = SE2BatchNorm(spec.cout, dtype=dtype, name=f"{name}.bn")
        self.relu = ReLU()
        self.pool = SE2MaxPool(spec.pool) if spec.pool > 1 else None

    def forward(self, x, skip, training):
        if self.up is not None:
            x = self.up.forward((x, skip), training)
        h = self.relu.forward(self.bn.forward(self.conv.forward(x, training), training))
        out = self.pool.forward(h, training) if self.pool is not None else h
        return out, h

    def backward(self, dout, dpre=None):
        dh = self.pool.backward(dout) if self.pool is not None else dout
        if dpre is not None:
            dh = dh + dpre
        dx = self.conv.backward(self.bn.backward(self.relu.backward(dh)))
        if self.up is not None:
            return self.up.backward(dx)
        return dx, None

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    @property
    def num_params(self):
        return self.conv.kernel.num_params + 2 * self.spec.cout


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        validate_config(config)
        self.config, self.seed, self.dtype = config, seed, dtype
        rng = np.random.default_rng(seed)
        N = config.N
        specs = config.layers
        p = [l.kind for l in specs].index("projection")
        self.blocks: list[Block] = []
        cin = config.input_shape[-1]
        couts = []
        for i, spec in enumerate(specs[:p]):
            c = cin + (couts[spec.skip - 1] if spec.skip is not None else 0)
            r = config.mask_radius if spec.kernel_size == config.kernel_size else spec.kernel_size / 2
            self.blocks.append(Block(spec, c, N, r, rng, dtype, name=f"b{i + 1}"))
            couts.append(spec.cout)
            cin = spec.cout
        self.projection = Projection(specs[p].mode)
        h = specs[p + 1]
        self.head = FCHead(cin, h.cout, h.activation, affine=config.strict_head, dtype=dtype,
                           name="head")
        self._skip_sources = {b.spec.skip for b in self.blocks if b.spec.skip is not None}

    # ---- inference / training passes --------------------------------------

    def forward(self, x, training: bool = False, upto: int | None = None):
        """Run the network on ``x`` of shape ``[B, H, W, C]``.

        ``upto=L`` stops after the first ``L`` blocks and returns that
        SE(2)-image (pooling of block ``L`` included).
        """
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        self.check_input(x.shape[1:3], x.shape[-1])
        x = x.astype(self.dtype, copy=False)
        pre = []
        h = x
        for i, b in enumerate(self.blocks):
            skip = pre[b.spec.skip - 1] if b.spec.skip is not None else None
            h, hp = b.forward(h, skip, training)
            pre.append(hp)
            if upto is not None and i + 1 == upto:
                return h
        f = self.projection.forward(h, training)
        return self.head.forward(f, training)

    __call__ = forward

    def backward(self, dout):
        d = self.projection.backward(self.head.backward(dout))
        dpre: dict[int, np.ndarray] = {}
        for i in range(len(self.blocks) - 1, -1, -1):
            d, dskip = self.blocks[i].backward(d, dpre.pop(i + 1, None))
            if dskip is not None:
                s = self.blocks[i].spec.skip
                dpre[s] = dpre[s] + dskip if s in dpre else dskip
        return d

    def parameters(self):
        ps = []
        for b in self.blocks:
            ps += b.parameters()
        return ps + self.head.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def buffers(self) -> dict:
        out = {}
        for i, b in enumerate(self.blocks):
            for k, v in b.bn.buffers().items():
                out[f"b{i + 1}.bn.{k}"] = v
        return out

    def set_buffer(self, name: str, value):
        i, _, key = name.split(".", 2)
        setattr(self.blocks[int(i[1:]) - 1].bn, key, np.asarray(value, dtype=self.dtype))

    def state(self) -> dict:
        """Copy of all parameters and buffers, keyed by name."""
        d = {p.name: p.value.copy() for p in self.parameters()}
        d.update({k: v.copy() for k, v in self.buffers().items()})
        return d

    def load_state(self, state: dict):
        params = {p.name: p for p in self.parameters()}
        for k, v in state.items():
            if k in params:
                params[k].value = np.asarray(v, dtype=self.dtype).reshape(params[k].shape).copy()
            else:
                self.set_buffer(k, v)

    def astype(self, dtype):
        self.dtype = dtype
        for p in self.parameters():
            p.astype(dtype)
        for k, v in self.buffers().items():
            self.set_buffer(k, v)
        return self

    # ---- shapes -----------------------------------------------------------

    def layer_shapes(self, hw=None):
        return trace_shapes(self.config, hw)

    def check_input(self, hw, channels):
        if channels != self.config.input_shape[-1]:
            raise ConfigurationError(
                f"input has {channels} channels, model expects {self.config.input_shape[-1]}")
        try:
            trace_shapes(self.config, tuple(hw))
        except ConfigurationError as e:
            need = receptive_field(self.config)
            raise ConfigurationError(
                f"input {hw[0]}x{hw[1]} is not usable ({e}); "
                f"required extent is at least {need}x{need}") from None


def trace_shapes(config: ModelConfig, hw=None) -> list:
    """Per-layer output shapes ``(N, H, W, C)`` without running the network.

    Entries follow the config: one per block (after pooling), one for the
    projection ``(H, W, C)`` and one for the head ``(H, W, C)``.
    """
    validate_config(config)
    H, W = hw if hw is not None else config.input_shape[:2]
    N = config.N
    out, pre = [], []
    C = config.input_shape[-1]
    for i, spec in enumerate(config.layers):
        if spec.kind in ("lifting", "group"):
            if spec.skip is not None:
                H, W = 2 * H, 2 * W
                sh, sw, sc = pre[spec.skip - 1]
                if sh < H or sw < W or (sh - H) % 2 or (sw - W) % 2:
                    raise ConfigurationError(
                        f"layer {i + 1}: skip map {sh}x{sw} cannot be center-cropped to {H}x{W}")
                C = C + sc
            n = spec.kernel_size
            H, W = H - n + 1, W - n + 1
            if H < 1 or W < 1:
                raise ConfigurationError(f"layer {i + 1}: spatial extent shrinks below 1")
            C = spec.cout
            pre.append((H, W, C))
            if spec.pool > 1:
                H, W = H // spec.pool, W // spec.pool
                if H < 1 or W < 1:
                    raise ConfigurationError(f"layer {i + 1}: pooling shrinks extent below 1")
            out.append((N, H, W, C))
        elif spec.kind == "projection":
            out.append((H, W, C))
        else:
            C = spec.cout
            out.append((H, W, C))
    return out


def receptive_field(config: ModelConfig) -> int:
    """Smallest square input extent the network accepts."""
    for s in range(1, 1025):
        try:
            trace_shapes(config, (s, s))
            return s
        except ConfigurationError:
            continue
    raise ConfigurationError("no usable input size up to 1024")


def build_model(config: ModelConfig, rng_seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, rng_seed, dtype)


def count_params(model) -> tuple[int, list]:
    """Total trainable weights and a ``[(label, count), ...]`` breakdown."""
    if isinstance(model, ModelConfig):
        model = Model(model)
    rows = []
    for i, b in enumerate(model.blocks):
        label = f"{b.spec.kind}{'+concat' if b.spec.skip else ''} {b.spec.kernel_size}x{b.spec.kernel_size}"
        rows.append((f"{i + 1}:{label}", b.num_params))
    rows.append(("head", model.head.num_params))
    return sum(c for _, c in rows), rows


# --------------------------------------------------------------------------
# checkpoints: zip with manifest.txt + one SE2T file per tensor
# --------------------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    cfg = model.config
    lines = [f"task={cfg.task}", f"N={cfg.N}", f"seed={model.seed}",
             f"input_shape={','.join(map(str, cfg.input_shape))}",
             f"kernel_size={cfg.kernel_size}", f"mask_radius={cfg.mask_radius}",
             f"strict_head={int(cfg.strict_head)}",
             "layers=" + json.dumps([dataclasses.asdict(l) for l in cfg.layers],
                                    separators=(",", ":"), sort_keys=True)]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    state = model.state()
    lines.append("tensors=" + ",".join(state))
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.txt", ("\n".join(lines) + "\n").encode("utf-8"))
        for name, arr in state.items():
            _zip_write(zf, f"tensors/{name}.se2t", se2t.to_bytes(arr))


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        text = zf.read("manifest.txt").decode("utf-8")
    return dict(line.split("=", 1) for line in text.splitlines() if line)


def load_checkpoint(path) -> Model:
    with zipfile.ZipFile(path) as zf:
        text = zf.read("manifest.txt").decode("utf-8")
        man = dict(line.split("=", 1) for line in text.splitlines() if line)
        config = ModelConfig(task=man["task"], N=int(man["N"]),
                             layers=json.loads(man["layers"]),
                             input_shape=tuple(int(v) for v in man["input_shape"].split(",")),
                             kernel_size=int(man["kernel_size"]),
                             mask_radius=float(man["mask_radius"]),
                             strict_head=bool(int(man["strict_head"])))
        model = Model(config, int(man["seed"]))
        state = {name: se2t.from_bytes(zf.read(f"tensors/{name}.se2t"))
                 for name in man["tensors"].split(",")}
    model.load_state(state)
    return model

"""Convolutional encoder with a classifier head and a nuisance (adversary) head.

Encoder pipeline for a batch ``X`` of shape ``(N, C, T)``::

    temporal conv (F1 x K1, same pad) -> BN -> depthwise spatial (C x 1, D per map)
    -> BN -> ReLU -> avgpool(pool1) -> dropout
    -> conv (F2 x K2 over F1*D maps, same pad) -> BN -> ReLU -> avgpool(pool2)
    -> dropout -> flatten

No layer carries a bias; the batch-norm shifts supply the offsets. Both heads
are single bias-free dense layers followed by log-softmax. With the default
spec this gives 6,160 trainable parameters and a 240-wide feature vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorops as ops
from .errors import ConfigError, DimensionError, FormatError
from .tensorops import BatchNormStats, ParamTensor

MODEL_FORMAT_VERSION = 1
DROPOUT_LAYERS = (0, 1)


@dataclass(frozen=True)
class ModelSpec:
    channels: int = 20
    samples: int = 180
    n_classes: int = 2
    n_blocks: int = 3
    temporal_filters: int = 8
    depth_multiplier: int = 2
    temporal_kernel: int = 90
    block2_filters: int = 16
    block2_kernel: int = 15
    pool1: int = 3
    pool2: int = 4
    dropout: float = 0.25

    @property
    def spatial_maps(self):
        return self.temporal_filters * self.depth_multiplier

    @property
    def feature_dim(self):
        return self.block2_filters * (self.samples // self.pool1 // self.pool2)

    def validate(self):
        if self.samples % self.pool1 or (self.samples // self.pool1) % self.pool2:
            raise ConfigError(
                f"pool widths {self.pool1}, {self.pool2} do not tile {self.samples} samples")
        if self.temporal_kernel > self.samples:
            raise ConfigError(f"temporal kernel {self.temporal_kernel} longer than {self.samples} samples")
        if self.block2_kernel > self.samples // self.pool1:
            raise ConfigError(f"block-2 kernel {self.block2_kernel} longer than pooled width")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout}")
        for name in ("channels", "n_classes", "n_blocks", "temporal_filters", "depth_multiplier",
                     "block2_filters", "pool1", "pool2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelState:
    spec: ModelSpec
    seed: int
    params: dict
    bn: dict
    mode: str = "train"
    lam: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def __getitem__(self, name) -> ParamTensor:
        return self.params[name]

    def group(self, prefix):
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "ModelState":
        return ModelState(self.spec, self.seed, {k: p.copy() for k, p in self.params.items()},
                          {k: s.copy() for k, s in self.bn.items()}, self.mode, self.lam, dict(self.meta))

    def astype(self, dtype) -> "ModelState":
        bn = {k: BatchNormStats(s.mean.astype(dtype), s.var.astype(dtype), s.momentum) for k, s in self.bn.items()}
        return ModelState(self.spec, self.seed, {k: p.astype(dtype) for k, p in self.params.items()},
                          bn, self.mode, self.lam, dict(self.meta))

    def eval(self):
        self.mode = "infer"
        return self

    def train(self):
        self.mode = "train"
        return self


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(spec: ModelSpec | None = None, seed=0, dtype=np.float32) -> ModelState:
    """Fresh model: conv/dense weights ~ U(+-1/sqrt(fan_in)), BN gamma=1 and beta=0."""
    spec = (spec or ModelSpec()).validate()
    rng = np.random.default_rng(seed)
    f1, d, k1 = spec.temporal_filters, spec.depth_multiplier, spec.temporal_kernel
    f2, k2, c = spec.block2_filters, spec.block2_kernel, spec.channels
    maps = spec.spatial_maps
    feat = spec.feature_dim

    shapes = [
        ("enc.tconv", (f1, 1, k1), k1),
        ("enc.bn1.gamma", (f1,), None),
        ("enc.bn1.beta", (f1,), None),
        ("enc.dwconv", (maps, c), c),
        ("enc.bn2.gamma", (maps,), None),
        ("enc.bn2.beta", (maps,), None),
        ("enc.conv2", (f2, maps, k2), maps * k2),
        ("enc.bn3.gamma", (f2,), None),
        ("enc.bn3.beta", (f2,), None),
        ("cls.dense", (feat, spec.n_classes), feat),
        ("adv.dense", (feat, spec.n_blocks), feat),
    ]
    params = {}
    for name, shape, fan_in in shapes:
        if fan_in is not None:
            value = _uniform(rng, shape, fan_in, dtype)
        elif name.endswith("gamma"):
            value = np.ones(shape, dtype=dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params[name] = ParamTensor(name, value)
    bn = {
        "enc.bn1": BatchNormStats.fresh(f1, dtype),
        "enc.bn2": BatchNormStats.fresh(maps, dtype),
        "enc.bn3": BatchNormStats.fresh(f2, dtype),
    }
    return ModelState(spec, seed, params, bn)


def param_count(state: ModelState) -> int:
    return sum(p.size for p in state.params.values())


def param_breakdown(state: ModelState) -> dict:
    """Trainable parameter count per layer, batch-norm gamma and beta counted together."""
    out = {}
    for name, p in state.params.items():
        layer = name.rsplit(".", 1)[0] if ".bn" in name else name
        out[layer] = out.get(layer, 0) + p.size
    return out


# ------------------------------------------------------------------ forward/backward


def dropout_rng(seed, layer, step):
    """Counter-based stream: the same (seed, layer, step) always yields the same mask."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, int(layer), int(step))))


@dataclass
class EncoderCtx:
    layers: list
    shapes: dict
    fused: bool


def encoder_forward(state: ModelState, x, train=None, step=0, masks=None, fused=True):
    """Run the encoder; returns ``(features, ctx)`` for :func:`encoder_backward`.

    ``masks`` optionally pins the two dropout masks (used for gradient checks).
    """
    spec = state.spec
    if train is None:
        train = state.mode == "train"
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"encoder expects (N, C, T) input, got shape {x.shape}")
    if x.shape[1] != spec.channels:
        raise DimensionError(f"channel axis (1) has extent {x.shape[1]}, model expects {spec.channels}", axis=1)
    if x.shape[2] != spec.samples:
        raise DimensionError(f"time axis (2) has extent {x.shape[2]}, model expects {spec.samples}", axis=2)
    x = x.astype(state.dtype, copy=False)
    p = state.params
    layers = []
    shapes = {}

    if fused:
        h, ctx = ops.temporal_bn_depthwise_forward(
            x, p["enc.tconv"], p["enc.bn1.gamma"], p["enc.bn1.beta"], state.bn["enc.bn1"],
            p["enc.dwconv"], train)
        layers.append(ctx)
    else:
        h, ctx = ops.conv1d_forward(x[:, None], p["enc.tconv"], need_input_grad=False)
        layers.append(ctx)
        shapes["tconv"] = h.shape
        h, ctx = ops.batchnorm_forward(h, p["enc.bn1.gamma"], p["enc.bn1.beta"], state.bn["enc.bn1"], train)
        layers.append(ctx)
        h, ctx = ops.depthwise_spatial_forward(h, p["enc.dwconv"])
        layers.append(ctx)
    shapes["depthwise"] = h.shape

    def push(result):
        out, c = result
        layers.append(c)
        return out

    h = push(ops.batchnorm_forward(h, p["enc.bn2.gamma"], p["enc.bn2.beta"], state.bn["enc.bn2"], train))
    h = push(ops.relu_forward(h))
    h = push(ops.avgpool_forward(h, spec.pool1))
    shapes["pool1"] = h.shape
    h = push(_dropout(state, h, train, 0, step, masks))
    h = push(ops.conv1d_forward(h, p["enc.conv2"]))
    h = push(ops.batchnorm_forward(h, p["enc.bn3.gamma"], p["enc.bn3.beta"], state.bn["enc.bn3"], train))
    h = push(ops.relu_forward(h))
    h = push(ops.avgpool_forward(h, spec.pool2))
    shapes["pool2"] = h.shape
    h = push(_dropout(state, h, train, 1, step, masks))
    f = push(ops.flatten_forward(h))
    shapes["features"] = f.shape
    return f, EncoderCtx(layers, shapes, fused)


def _dropout(state, h, train, layer, step, masks):
    mask = None if masks is None else masks[layer]
    rng = None if mask is not None else dropout_rng(state.seed, layer, step)
    return ops.dropout_forward(h, state.spec.dropout, train, rng=rng, mask=mask)


_BACKWARD = {
    "conv1d": ops.conv1d_backward,
    "batchnorm": ops.batchnorm_backward,
    "depthwise": ops.depthwise_spatial_backward,
    "relu": ops.relu_backward,
    "avgpool": ops.avgpool_backward,
    "dropout": ops.dropout_backward,
    "flatten": ops.flatten_backward,
    "temporal_bn_depthwise": ops.temporal_bn_depthwise_backward,
}


def encoder_backward(state: ModelState, ctx: EncoderCtx, dfeat):
    """Accumulate encoder parameter gradients for upstream gradient ``dfeat``."""
    g = dfeat
    for layer in reversed(ctx.layers):
        g = _BACKWARD[layer.op](layer, g)
        if g is None:
            break


def encode(state: ModelState, x, step=0):
    return encoder_forward(state, x, step=step)[0]


def classify(state: ModelState, f):
    """Log-probabilities over task classes, shape (N, L)."""
    return ops.log_softmax(f @ state.params["cls.dense"].value)


def adversary(state: ModelState, f):
    """Log-probabilities over nuisance blocks, shape (N, B)."""
    return ops.log_softmax(f @ state.params["adv.dense"].value)


def predict_batches(state: ModelState, x, batch_size=500):
    """Features, classifier and adversary log-probabilities in inference mode."""
    feats = []
    for i in range(0, len(x), batch_size):
        feats.append(encoder_forward(state, x[i:i + batch_size], train=False)[0])
    f = np.concatenate(feats) if feats else np.zeros((0, state.spec.feature_dim), state.dtype)
    return f, classify(state, f), adversary(state, f)


# ------------------------------------------------------------------------ persistence


def _tensor_table(state: ModelState):
    for name, p in state.params.items():
        yield name, "value", p.value
        yield name, "adam_m", p.adam_m
        yield name, "adam_v", p.adam_v
    for name, s in state.bn.items():
        yield name, "running_mean", s.mean
        yield name, "running_var", s.var


def save_model(state: ModelState, path):
    """Write ``model.json`` and ``weights.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name, kind, arr in _tensor_table(state):
        data = np.ascontiguousarray(arr, dtype="<f4")
        table.append(dict(name=name, kind=kind, shape=list(arr.shape), offset=offset, count=int(arr.size)))
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = dict(
        format_version=MODEL_FORMAT_VERSION,
        spec=asdict(state.spec),
        spec_hash=state.spec.digest(),
        seed=state.seed,
        lam=state.lam,
        adam_t={name: p.adam_t for name, p in state.params.items()},
        bn_momentum={name: s.momentum for name, s in state.bn.items()},
        tensors=table,
        total_bytes=offset,
        meta=state.meta,
    )
    (path / "model.json").write_text(json.dumps(header, indent=1, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(chunks))


def load_model(path, mode="infer", expect_spec: ModelSpec | None = None) -> ModelState:
    """Read a model written by :func:`save_model` (float32 arrays)."""
    path = Path(path)
    try:
        header = json.loads((path / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model header in {path}: {exc}") from exc
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {header.get('format_version')!r}")
    spec = ModelSpec(**header["spec"])
    if spec.digest() != header["spec_hash"]:
        raise FormatError("model spec does not match its recorded hash")
    if expect_spec is not None and expect_spec.digest() != header["spec_hash"]:
        raise FormatError("saved model was built for a different spec")
    blob = (path / "weights.bin").read_bytes()
    if len(blob) != header["total_bytes"]:
        raise FormatError(f"weights.bin holds {len(blob)} bytes, header declares {header['total_bytes']}")
    arrays = {}
    for entry in header["tensors"]:
        count = entry["count"]
        if count != int(np.prod(entry["shape"], dtype=np.int64)):
            raise FormatError(f"tensor {entry['name']}/{entry['kind']}: count does not match shape")
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise FormatError(f"tensor {entry['name']}/{entry['kind']} runs past the end of weights.bin")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[(entry["name"], entry["kind"])] = arr.astype(np.float32).reshape(entry["shape"])

    template = build(spec, header["seed"], np.float32)
    try:
        params = {
            name: ParamTensor(name, arrays[(name, "value")], adam_m=arrays[(name, "adam_m")],
                              adam_v=arrays[(name, "adam_v")], adam_t=header["adam_t"][name])
            for name in template.params
        }
        bn = {
            name: BatchNormStats(arrays[(name, "running_mean")], arrays[(name, "running_var")],
                                 header["bn_momentum"][name])
            for name in template.bn
        }
    except KeyError as exc:
        raise FormatError(f"model file is missing tensor {exc}") from exc
    for name, p in params.items():
        if p.shape != template.params[name].shape:
            raise FormatError(f"tensor {name} has shape {p.shape}, spec requires {template.params[name].shape}")
    return ModelState(spec, header["seed"], params, bn, mode, header["lam"], header.get("meta", {}))

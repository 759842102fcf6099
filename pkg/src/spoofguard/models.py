"""Countermeasure architectures and weight serialization.

Two fixed families, both ending in a single sigmoid logit
(score = P(bonafide), labels bonafide=1 / spoof=0):

* ``resnet_la``: residual network over 80-band log-mel input (1, 80, 297).
  Stem conv3x3 -> 4 residual blocks with widths [16, 32, 64, 64]
  (conv-BN-LReLU-dropout-conv-BN, stride-2 1x1 projection skip on width
  change, LReLU after the add) -> global average pool -> dense 64 ->
  dense 1.

* ``lcnn_pa``: light CNN with max-feature-map activations over the
  257-bin log-power input (1, 257, 297). Stem conv5x5(32)+MFM, pool;
  two blocks of [conv1x1(48)+MFM, BN, conv3x3(64)+MFM, pool, BN];
  conv1x1(64)+MFM, BN, conv3x3(64)+MFM, pool; flatten, dense 128 + MFM,
  dropout, dense 1.

``width_scale`` multiplies every width so a desk-scale model can train on
CPU; scaled widths must stay even integers >= 2 (MFM halves channels).
Conv/dense weights draw from Glorot uniform(-L, L), L = sqrt(6 / (fan_in
+ fan_out)); biases and BN betas start at zero, BN gammas at one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, DropoutRng, Tensor
from .errors import (
    BadMagic,
    InvalidSpec,
    IoFailure,
    ShapeMismatch,
    ShapeTableMismatch,
    TruncatedFile,
    VersionUnsupported,
)
from .features import KIND_LOG_MEL, KIND_LOG_POWER, MODE_LA, MODE_PA, FeatureMatrix

ARCH_RESNET_LA = "resnet_la"
ARCH_LCNN_PA = "lcnn_pa"
_ARCH_IDS = {ARCH_RESNET_LA: 1, ARCH_LCNN_PA: 2}
_ARCH_NAMES = {v: k for k, v in _ARCH_IDS.items()}

N_FRAMES = 297
_N_BINS = {ARCH_RESNET_LA: 80, ARCH_LCNN_PA: 257}
_FEATURE_MODE = {ARCH_RESNET_LA: MODE_LA, ARCH_LCNN_PA: MODE_PA}
_FEATURE_KIND = {ARCH_RESNET_LA: KIND_LOG_MEL, ARCH_LCNN_PA: KIND_LOG_POWER}

DROPOUT_P = 0.3


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    width_scale: float = 1.0
    dropout_p: float = DROPOUT_P

    def __post_init__(self):
        if self.arch not in _ARCH_IDS:
            raise InvalidSpec(f"unknown architecture {self.arch!r}")
        layer_table(self)  # validates the scaled widths

    @property
    def n_bins(self) -> int:
        return _N_BINS[self.arch]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1, self.n_bins, N_FRAMES)

    @property
    def feature_mode(self) -> str:
        return _FEATURE_MODE[self.arch]

    @property
    def feature_kind(self) -> str:
        return _FEATURE_KIND[self.arch]


@dataclass
class LayerParam:
    name: str
    shape: tuple[int, ...]
    init: str  # glorot | zero | one
    trainable: bool = True


def _scaled(base: int, scale: float, even: bool = False) -> int:
    v = base * scale
    r = round(v)
    if abs(v - r) > 1e-9:
        raise InvalidSpec(f"width_scale {scale} makes width {base} non-integral")
    if r < 2:
        raise InvalidSpec(f"scaled width {r} < 2 (base {base}, scale {scale})")
    if even and r % 2:
        raise InvalidSpec(f"scaled width {r} must be even for MFM (base {base})")
    return r


def _conv_entries(name: str, f: int, c: int, k: int) -> list[LayerParam]:
    return [
        LayerParam(f"{name}.w", (f, c, k, k), "glorot"),
        LayerParam(f"{name}.b", (f,), "zero"),
    ]


def _bn_entries(name: str, c: int) -> list[LayerParam]:
    return [
        LayerParam(f"{name}.gamma", (c,), "one"),
        LayerParam(f"{name}.beta", (c,), "zero"),
        LayerParam(f"{name}.running_mean", (c,), "zero", trainable=False),
        LayerParam(f"{name}.running_var", (c,), "one", trainable=False),
    ]


def _dense_entries(name: str, d: int, k: int) -> list[LayerParam]:
    return [
        LayerParam(f"{name}.w", (d, k), "glorot"),
        LayerParam(f"{name}.b", (k,), "zero"),
    ]


RESNET_BLOCK_WIDTHS = (16, 32, 64, 64)
RESNET_STEM_WIDTH = 16
RESNET_FC_WIDTH = 64

LCNN_STEM_WIDTH = 32
LCNN_BLOCK_A_WIDTH = 48
LCNN_BLOCK_B_WIDTH = 64
LCNN_TAIL_WIDTH = 64
LCNN_FC_WIDTH = 128


def _pool_hw(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


def lcnn_flat_size(spec: ModelSpec) -> int:
    h, w = spec.n_bins, N_FRAMES
    for _ in range(4):  # stem pool + two block pools + tail pool
        h, w = _pool_hw(h, w)
    return _scaled(LCNN_TAIL_WIDTH, spec.width_scale, even=True) // 2 * h * w


def layer_table(spec: ModelSpec) -> list[LayerParam]:
    """Ordered parameter table; definition order is the file order."""
    s = spec.width_scale
    entries: list[LayerParam] = []
    if spec.arch == ARCH_RESNET_LA:
        stem = _scaled(RESNET_STEM_WIDTH, s)
        entries += _conv_entries("stem.conv", stem, 1, 3)
        entries += _bn_entries("stem.bn", stem)
        c_in = stem
        for bi, base in enumerate(RESNET_BLOCK_WIDTHS, start=1):
            wk = _scaled(base, s)
            entries += _conv_entries(f"block{bi}.conv1", wk, c_in, 3)
            entries += _bn_entries(f"block{bi}.bn1", wk)
            entries += _conv_entries(f"block{bi}.conv2", wk, wk, 3)
            entries += _bn_entries(f"block{bi}.bn2", wk)
            if wk != c_in:
                entries += _conv_entries(f"block{bi}.proj", wk, c_in, 1)
            c_in = wk
        fc = _scaled(RESNET_FC_WIDTH, s)
        entries += _dense_entries("head.fc1", c_in, fc)
        entries += _dense_entries("head.fc2", fc, 1)
    else:
        stem = _scaled(LCNN_STEM_WIDTH, s, even=True)
        wa = _scaled(LCNN_BLOCK_A_WIDTH, s, even=True)
        wb = _scaled(LCNN_BLOCK_B_WIDTH, s, even=True)
        wt = _scaled(LCNN_TAIL_WIDTH, s, even=True)
        wd = _scaled(LCNN_FC_WIDTH, s, even=True)
        entries += _conv_entries("stem.conv", stem, 1, 5)
        c_in = stem // 2
        for bi in (1, 2):
            entries += _conv_entries(f"block{bi}.conv_a", wa, c_in, 1)
            entries += _bn_entries(f"block{bi}.bn_a", wa // 2)
            entries += _conv_entries(f"block{bi}.conv_b", wb, wa // 2, 3)
            entries += _bn_entries(f"block{bi}.bn_b", wb // 2)
            c_in = wb // 2
        entries += _conv_entries("tail.conv_a", wt, c_in, 1)
        entries += _bn_entries("tail.bn", wt // 2)
        entries += _conv_entries("tail.conv_b", wt, wt // 2, 3)
        entries += _dense_entries("head.fc1", lcnn_flat_size(spec), wd)
        entries += _dense_entries("head.fc2", wd // 2, 1)
    return entries


def trainable_names(spec: ModelSpec) -> list[str]:
    return [e.name for e in layer_table(spec) if e.trainable]


def param_count(spec: ModelSpec) -> int:
    """Trainable parameter count (running statistics excluded)."""
    return sum(int(np.prod(e.shape)) for e in layer_table(spec) if e.trainable)


@dataclass
class ModelWeights:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    calibrated_threshold: Optional[float] = None

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.spec,
            {k: v.copy() for k, v in self.tensors.items()},
            self.calibrated_threshold,
        )


def _glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:  # conv (F, C, kh, kw)
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:  # dense (D, K)
        fan_in, fan_out = shape[0], shape[1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelWeights:
    """Initialize weights in table order from a single seeded generator."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for entry in layer_table(spec):
        if entry.init == "glorot":
            limit = _glorot_limit(entry.shape)
            arr = rng.uniform(-limit, limit, size=entry.shape)
        elif entry.init == "zero":
            arr = np.zeros(entry.shape)
        else:
            arr = np.ones(entry.shape)
        tensors[entry.name] = arr.astype(dtype)
    return ModelWeights(spec, tensors)


# --- forward ----------------------------------------------------------------

def _wrap_params(model: ModelWeights, params: Optional[dict[str, Tensor]]):
    if params is not None:
        return lambda name: params[name]
    cache: dict[str, Tensor] = {}

    def get(name: str) -> Tensor:
        if name not in cache:
            cache[name] = Tensor(model.tensors[name])
        return cache[name]

    return get


def _bn_state(model: ModelWeights, name: str) -> BatchNormState:
    return BatchNormState(
        model.tensors[f"{name}.running_mean"], model.tensors[f"{name}.running_var"]
    )


def _bn(model, P, name: str, t: Tensor, mode: str) -> Tensor:
    return ag.batchnorm2d(
        t, P(f"{name}.gamma"), P(f"{name}.beta"), _bn_state(model, name), mode
    )


def _forward_resnet(model, P, x: Tensor, mode: str, drop: Optional[DropoutRng]) -> Tensor:
    spec = model.spec
    t = ag.conv2d(x, P("stem.conv.w"), P("stem.conv.b"), stride=1, pad=1)
    t = ag.leaky_relu(_bn(model, P, "stem.bn", t, mode))
    c_in = _scaled(RESNET_STEM_WIDTH, spec.width_scale)
    for bi, base in enumerate(RESNET_BLOCK_WIDTHS, start=1):
        wk = _scaled(base, spec.width_scale)
        stride = 2 if wk != c_in else 1
        h = ag.conv2d(t, P(f"block{bi}.conv1.w"), P(f"block{bi}.conv1.b"), stride=stride, pad=1)
        h = ag.leaky_relu(_bn(model, P, f"block{bi}.bn1", h, mode))
        h = ag.dropout(h, spec.dropout_p, mode, drop)
        h = ag.conv2d(h, P(f"block{bi}.conv2.w"), P(f"block{bi}.conv2.b"), stride=1, pad=1)
        h = _bn(model, P, f"block{bi}.bn2", h, mode)
        skip = t
        if stride == 2:
            skip = ag.conv2d(t, P(f"block{bi}.proj.w"), P(f"block{bi}.proj.b"), stride=2, pad=0)
        t = ag.leaky_relu(ag.add(h, skip))
        c_in = wk
    t = ag.global_avg_pool2d(t)
    t = ag.leaky_relu(ag.dense(t, P("head.fc1.w"), P("head.fc1.b")))
    t = ag.dropout(t, spec.dropout_p, mode, drop)
    t = ag.dense(t, P("head.fc2.w"), P("head.fc2.b"))
    return ag.reshape(t, (t.shape[0],))


def _forward_lcnn(model, P, x: Tensor, mode: str, drop: Optional[DropoutRng]) -> Tensor:
    spec = model.spec
    t = ag.conv2d(x, P("stem.conv.w"), P("stem.conv.b"), stride=1, pad=2)
    t = ag.max_pool2d(ag.mfm(t))
    for bi in (1, 2):
        t = ag.mfm(ag.conv2d(t, P(f"block{bi}.conv_a.w"), P(f"block{bi}.conv_a.b")))
        t = _bn(model, P, f"block{bi}.bn_a", t, mode)
        t = ag.mfm(ag.conv2d(t, P(f"block{bi}.conv_b.w"), P(f"block{bi}.conv_b.b"), pad=1))
        t = ag.max_pool2d(t)
        t = _bn(model, P, f"block{bi}.bn_b", t, mode)
    t = ag.mfm(ag.conv2d(t, P("tail.conv_a.w"), P("tail.conv_a.b")))
    t = _bn(model, P, "tail.bn", t, mode)
    t = ag.mfm(ag.conv2d(t, P("tail.conv_b.w"), P("tail.conv_b.b"), pad=1))
    t = ag.max_pool2d(t)
    t = ag.flatten(t)
    t = ag.mfm(ag.dense(t, P("head.fc1.w"), P("head.fc1.b")))
    t = ag.dropout(t, spec.dropout_p, mode, drop)
    t = ag.dense(t, P("head.fc2.w"), P("head.fc2.b"))
    return ag.reshape(t, (t.shape[0],))


def forward_logits(
    model: ModelWeights,
    x: np.ndarray,
    mode: str = "infer",
    drop: Optional[DropoutRng] = None,
    params: Optional[dict[str, Tensor]] = None,
) -> Tensor:
    """Run a batch through the architecture; returns the logit vector [N].

    ``params`` lets a trainer pass persistent, grad-enabled Tensors that
    alias the model's arrays; inference wraps the arrays read-only.
    """
    expected = model.spec.input_shape
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} != {expected}")
    P = _wrap_params(model, params)
    xt = Tensor(x)
    if model.spec.arch == ARCH_RESNET_LA:
        return _forward_resnet(model, P, xt, mode, drop)
    return _forward_lcnn(model, P, xt, mode, drop)


SCORE_CLAMP = 1e-7


def features_to_input(feat: FeatureMatrix, spec: ModelSpec, dtype=np.float32) -> np.ndarray:
    """Feature matrix (frames x bins) -> model input (1, bins, frames)."""
    if feat.values.shape != (N_FRAMES, spec.n_bins):
        raise ShapeMismatch(
            f"feature shape {feat.values.shape} != ({N_FRAMES}, {spec.n_bins})"
        )
    return np.ascontiguousarray(feat.values.T, dtype=dtype)[None, None]


def forward_score(model: ModelWeights, feat: FeatureMatrix) -> float:
    """Inference-mode detector score in (0, 1); higher means more bonafide."""
    x = features_to_input(feat, model.spec, dtype=next(iter(model.tensors.values())).dtype)
    logit = float(forward_logits(model, x, mode="infer").data[0])
    p = 1.0 / (1.0 + np.exp(-logit)) if logit >= 0 else np.exp(logit) / (1.0 + np.exp(logit))
    return float(np.clip(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP))


# --- serialization ("SGW1") ---------------------------------------------------

_SGW_MAGIC = b"SGW1"
_SGW_VERSION = 1


def save_weights(model: ModelWeights) -> bytes:
    """Serialize to the SGW1 little-endian format (f32 payloads)."""
    spec = model.spec
    out = bytearray()
    out += _SGW_MAGIC
    out += struct.pack("<I", _SGW_VERSION)
    out += struct.pack("<B", _ARCH_IDS[spec.arch])
    out += struct.pack("<d", spec.width_scale)
    has_thr = model.calibrated_threshold is not None
    out += struct.pack("<Bd", int(has_thr), model.calibrated_threshold if has_thr else 0.0)
    out += struct.pack("<III", *spec.input_shape)
    table = layer_table(spec)
    out += struct.pack("<I", len(table))
    for entry in table:
        arr = np.ascontiguousarray(model.tensors[entry.name], dtype="<f4")
        name_b = entry.name.encode("utf-8")
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(data: bytes) -> ModelWeights:
    r = _Reader(data)
    if r.take(4) != _SGW_MAGIC:
        raise BadMagic("not an SGW1 weight file")
    (version,) = r.unpack("<I")
    if version != _SGW_VERSION:
        raise VersionUnsupported(f"format version {version}, this build reads {_SGW_VERSION}")
    (arch_id,) = r.unpack("<B")
    if arch_id not in _ARCH_NAMES:
        raise ShapeTableMismatch(f"unknown architecture id {arch_id}")
    (width_scale,) = r.unpack("<d")
    has_thr, thr = r.unpack("<Bd")
    dims = r.unpack("<III")
    spec = ModelSpec(_ARCH_NAMES[arch_id], width_scale)
    if dims != spec.input_shape:
        raise ShapeTableMismatch(f"input dims {dims} != {spec.input_shape}")
    (count,) = r.unpack("<I")
    table = layer_table(spec)
    if count != len(table):
        raise ShapeTableMismatch(f"{count} tensors stored, table has {len(table)}")
    tensors: dict[str, np.ndarray] = {}
    for entry in table:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name != entry.name:
            raise ShapeTableMismatch(f"tensor {name!r} where {entry.name!r} expected")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        if shape != entry.shape:
            raise ShapeTableMismatch(f"{name}: stored shape {shape} != {entry.shape}")
        n_items = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * n_items)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise ShapeTableMismatch(f"{len(data) - r.pos} trailing bytes after payload")
    return ModelWeights(spec, tensors, float(thr) if has_thr else None)


def save_weights_file(model: ModelWeights, path: str | Path) -> None:
    try:
        Path(path).write_bytes(save_weights(model))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_weights_file(path: str | Path) -> ModelWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return load_weights(data)

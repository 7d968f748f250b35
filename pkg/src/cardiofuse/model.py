"""Network assembly, cost counting and weight (de)serialization.

The default CNN (per-modality length 128) is::

    affine (4 params) -> conv k3/s2 1->16 + BN + hardswish      256 -> 128
    bottleneck 16/16/16  k3 relu       (no expand conv, residual)
    bottleneck 16/72/24  k3 relu
    bottleneck 24/88/24  k3 relu       (residual)
    bottleneck 24/96/40  k5 hardswish
    global average pool -> linear 40->2 -> softmax

Bottlenecks are MobileNetV2-style (1x1 expand, depthwise, 1x1 linear
project) with stride 1 and no squeeze-and-excite. Convolutions followed by
batch norm carry no bias. This gives 15,942 trainable parameters.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import BadMagic, ConfigHashMismatch, InvalidConfig, ShapeMismatch, TruncatedStream
from .preprocess import FusedWindow


@dataclass(frozen=True)
class BottleneckSpec:
    in_ch: int
    exp_ch: int
    out_ch: int
    kernel: int = 3
    nonlinearity: str = "relu"

    @property
    def residual(self) -> bool:
        return self.in_ch == self.out_ch


DEFAULT_BLOCKS = (
    BottleneckSpec(16, 16, 16, 3, "relu"),
    BottleneckSpec(16, 72, 24, 3, "relu"),
    BottleneckSpec(24, 88, 24, 3, "relu"),
    BottleneckSpec(24, 96, 40, 5, "hardswish"),
)

# per-modality length -> (kernel, stride, padding) of the stem so its output is 128 wide
VARIANT_STEMS = {
    64: (3, 1, 1),
    128: (3, 2, 1),
    1024: (31, 16, 15),
    6000: (187, 94, 93),
}

MLP_HIDDEN = (37, 35, 55, 54)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "cnn"
    per_modality_len: int = 128
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_padding: int = 1
    stem_channels: int = 16
    stem_nonlinearity: str = "hardswish"
    target_width: int | None = 128
    blocks: tuple[BottleneckSpec, ...] = DEFAULT_BLOCKS
    n_classes: int = 2
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN
    mlp_batchnorm: bool = True

    @classmethod
    def variant(cls, per_modality_len: int) -> ModelConfig:
        try:
            k, s, p = VARIANT_STEMS[per_modality_len]
        except KeyError:
            raise InvalidConfig(f"no stem defined for per-modality length {per_modality_len}") from None
        return cls(per_modality_len=per_modality_len, stem_kernel=k, stem_stride=s, stem_padding=p)

    @classmethod
    def mlp(cls, per_modality_len: int = 128) -> ModelConfig:
        return cls(kind="mlp", per_modality_len=per_modality_len)

    @property
    def input_width(self) -> int:
        return 2 * self.per_modality_len

    def stem_width(self) -> int:
        return nn.conv_out_width(self.input_width, self.stem_kernel, self.stem_stride, self.stem_padding)

    def validate(self):
        if self.kind not in ("cnn", "mlp"):
            raise InvalidConfig(f"unknown model kind {self.kind!r}")
        if self.per_modality_len < 1 or self.n_classes < 2:
            raise InvalidConfig("per_modality_len and n_classes must be positive (n_classes >= 2)")
        if self.kind == "mlp":
            return
        if self.stem_width() < 1:
            raise InvalidConfig("stem produces an empty output")
        if self.target_width is not None and self.stem_width() < self.target_width:
            raise InvalidConfig(f"stem output width {self.stem_width()} < {self.target_width}")
        ch = self.stem_channels
        for i, b in enumerate(self.blocks, 1):
            if b.in_ch != ch:
                raise InvalidConfig(f"block {i} expects {b.in_ch} channels, gets {ch}")
            if b.kernel % 2 == 0:
                raise InvalidConfig(f"block {i} kernel must be odd")
            if b.nonlinearity not in nn.ACTIVATIONS:
                raise InvalidConfig(f"block {i} nonlinearity {b.nonlinearity!r}")
            ch = b.out_ch

    def to_text(self) -> str:
        blocks = ";".join(f"{b.in_ch}/{b.exp_ch}/{b.out_ch}/{b.kernel}/{b.nonlinearity}" for b in self.blocks)
        items = {
            "kind": self.kind,
            "per_modality_len": self.per_modality_len,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "stem_padding": self.stem_padding,
            "stem_channels": self.stem_channels,
            "stem_nonlinearity": self.stem_nonlinearity,
            "target_width": "none" if self.target_width is None else self.target_width,
            "blocks": blocks,
            "n_classes": self.n_classes,
            "mlp_hidden": ",".join(map(str, self.mlp_hidden)),
            "mlp_batchnorm": int(self.mlp_batchnorm),
        }
        return "".join(f"{k}={v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kv = parse_key_values(text)
        try:
            blocks = tuple(
                BottleneckSpec(int(a), int(b), int(c), int(k), nl)
                for a, b, c, k, nl in (s.split("/") for s in kv["blocks"].split(";") if s)
            )
            tw = kv.get("target_width", "128")
            return cls(
                kind=kv.get("kind", "cnn"),
                per_modality_len=int(kv["per_modality_len"]),
                stem_kernel=int(kv["stem_kernel"]),
                stem_stride=int(kv["stem_stride"]),
                stem_padding=int(kv["stem_padding"]),
                stem_channels=int(kv.get("stem_channels", 16)),
                stem_nonlinearity=kv.get("stem_nonlinearity", "hardswish"),
                target_width=None if tw == "none" else int(tw),
                blocks=blocks,
                n_classes=int(kv.get("n_classes", 2)),
                mlp_hidden=tuple(int(v) for v in kv.get("mlp_hidden", "").split(",") if v),
                mlp_batchnorm=bool(int(kv.get("mlp_batchnorm", 1))),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidConfig(f"bad model config: {exc}") from exc

    def hash(self) -> int:
        return int.from_bytes(hashlib.sha256(self.to_text().encode()).digest()[:8], "little")


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ValueError(f"expected key=value, got {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Crop(nn.Layer):
    """Keep the first ``width`` positions."""

    def __init__(self, width):
        super().__init__()
        self.width = width

    def forward(self, x, training=False):
        self._cache = x.shape
        return x[..., : self.width]

    def backward(self, dout):
        shape = self._cached()
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[..., : self.width] = dout
        return dx


def _conv_bn(in_ch, out_ch, kernel, stride=1, padding=0, groups=1, nl=None):
    layers = [("conv", nn.Conv1d(in_ch, out_ch, kernel, stride, padding, groups, bias=False)),
              ("bn", nn.BatchNorm1d(out_ch))]
    if nl:
        layers.append(("act", nn.Activation(nl)))
    return nn.Sequential(layers)


def bottleneck(spec: BottleneckSpec) -> nn.Layer:
    parts = []
    if spec.exp_ch != spec.in_ch:
        parts.append(("expand", _conv_bn(spec.in_ch, spec.exp_ch, 1, nl=spec.nonlinearity)))
    parts.append(("dw", _conv_bn(spec.exp_ch, spec.exp_ch, spec.kernel, padding=(spec.kernel - 1) // 2,
                                 groups=spec.exp_ch, nl=spec.nonlinearity)))
    parts.append(("project", _conv_bn(spec.exp_ch, spec.out_ch, 1)))
    body = nn.Sequential(parts)
    return nn.Residual(body) if spec.residual else body


class Model:
    """A layer stack plus its config. Inputs are (N, width) or (N, 1, width)."""

    def __init__(self, net: nn.Sequential, config: ModelConfig):
        self.net = net
        self.config = config
        self.training = False

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    @property
    def dtype(self):
        for _, layer, key in self.parameters():
            return layer.params[key].dtype
        return np.dtype(np.float32)

    def _prepare(self, x):
        if isinstance(x, FusedWindow):
            x = x.values
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        if x.ndim == 2:
            x = x[:, None, :]
        if x.shape[-1] != self.config.input_width:
            raise ShapeMismatch(f"input width {x.shape[-1]}, model expects {self.config.input_width}")
        return x

    def forward(self, x, training=None):
        """Logits, shape (N, n_classes)."""
        return self.net.forward(self._prepare(x), self.training if training is None else training)

    __call__ = forward

    def predict_proba(self, x, batch_size=1024):
        x = self._prepare(x)
        out = [nn.softmax(self.net.forward(x[i : i + batch_size], False)) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))

    def backward(self, dlogits):
        return self.net.backward(dlogits)

    def named_layers(self):
        return nn.named_layers(self.net)

    def parameters(self):
        """(qualified name, layer, key) for every trainable array."""
        for name, layer in self.named_layers():
            for key in layer.params:
                yield f"{name}.{key}", layer, key

    def buffers(self):
        for name, layer in self.named_layers():
            for key in layer.buffers:
                yield f"{name}.{key}", layer, key

    def state(self) -> dict[str, np.ndarray]:
        st = {n: layer.params[k] for n, layer, k in self.parameters()}
        st.update({n: layer.buffers[k] for n, layer, k in self.buffers()})
        return st

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def astype(self, dtype):
        self.net.astype(dtype)
        return self

    def copy(self) -> Model:
        return copy.deepcopy(self)

    @property
    def affine(self) -> nn.AffineModality:
        return self.net["affine"]


def build_cnn(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> Model:
    cfg.validate()
    if cfg.kind != "cnn":
        raise InvalidConfig("build_cnn needs kind='cnn'")
    layers = [
        ("affine", nn.AffineModality()),
        ("stem", _conv_bn(1, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding,
                          nl=cfg.stem_nonlinearity)),
    ]
    if cfg.target_width is not None and cfg.stem_width() > cfg.target_width:
        layers.append(("crop", Crop(cfg.target_width)))
    for i, spec in enumerate(cfg.blocks, 1):
        layers.append((f"block{i}", bottleneck(spec)))
    last = cfg.blocks[-1].out_ch if cfg.blocks else cfg.stem_channels
    layers += [("pool", nn.GlobalAvgPool()), ("classifier", nn.Linear(last, cfg.n_classes))]
    model = Model(nn.Sequential(layers), cfg)
    _init(model, seed)
    return model


def build_mlp(seed: int = 0, cfg: ModelConfig | None = None) -> Model:
    """Affine, then linear/BN/ReLU stages (37, 35, 55, 54 wide), then linear to the classes."""
    cfg = cfg or ModelConfig.mlp()
    cfg.validate()
    layers = [("affine", nn.AffineModality()), ("flatten", nn.Flatten())]
    width = cfg.input_width
    for i, h in enumerate(cfg.mlp_hidden, 1):
        layers.append((f"fc{i}", nn.Linear(width, h)))
        if cfg.mlp_batchnorm:
            layers.append((f"bn{i}", nn.BatchNorm1d(h)))
        layers.append((f"act{i}", nn.Activation("relu")))
        width = h
    layers.append(("classifier", nn.Linear(width, cfg.n_classes)))
    model = Model(nn.Sequential(layers), cfg)
    _init(model, seed)
    return model


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return build_mlp(seed, cfg) if cfg.kind == "mlp" else build_cnn(cfg, seed)


def _init(model: Model, seed: int):
    rng = np.random.default_rng(seed)
    for _, layer in model.named_layers():
        layer.reset_parameters(rng)


def forward(model: Model, window) -> np.ndarray:
    """Class probabilities for one window: index 0 Normal, 1 Abnormal."""
    return model.predict_proba(window)[0]


def count_params(model: Model | None) -> int:
    if model is None:
        return 0
    return int(sum(layer.params[k].size for _, layer, k in model.parameters()))


@dataclass
class FlopCount:
    """``conv_linear`` (2 FLOPs per multiply-accumulate) is the headline number."""

    macs: int = 0
    elementwise: int = 0
    per_layer: dict[str, int] = field(default_factory=dict)

    @property
    def conv_linear(self) -> int:
        return 2 * self.macs

    @property
    def total(self) -> int:
        return self.conv_linear + self.elementwise


def _trace(layer: nn.Layer, shape, name, fc: FlopCount):
    """Propagate a (C, W) or (F,) shape through ``layer`` and accumulate costs."""
    if isinstance(layer, nn.Sequential):
        for n, child in layer.layers:
            shape = _trace(child, shape, f"{name}.{n}" if name else n, fc)
        return shape
    if isinstance(layer, nn.Residual):
        out = _trace(layer.body, shape, f"{name}.body", fc)
        fc.elementwise += int(np.prod(out))
        return out
    if isinstance(layer, nn.Conv1d):
        w = nn.conv_out_width(shape[1], layer.kernel, layer.stride, layer.padding)
        macs = layer.out_ch * (layer.in_ch // layer.groups) * layer.kernel * w
        fc.macs += macs
        fc.per_layer[name] = macs
        if "bias" in layer.params:
            fc.elementwise += layer.out_ch * w
        return (layer.out_ch, w)
    if isinstance(layer, nn.Linear):
        macs = layer.in_features * layer.out_features
        fc.macs += macs
        fc.per_layer[name] = macs
        if "bias" in layer.params:
            fc.elementwise += layer.out_features
        return (layer.out_features,)
    if isinstance(layer, (nn.BatchNorm1d, nn.AffineModality)):
        fc.elementwise += 2 * int(np.prod(shape))
        return shape
    if isinstance(layer, nn.Activation):
        fc.elementwise += int(np.prod(shape))
        return shape
    if isinstance(layer, nn.GlobalAvgPool):
        fc.elementwise += int(np.prod(shape))
        return (shape[0],)
    if isinstance(layer, nn.Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Crop):
        return (shape[0], min(shape[1], layer.width))
    # unknown layers (e.g. fake-quant observers) are shape-preserving and free
    for n, child in layer.children():
        shape = _trace(child, shape, f"{name}.{n}", fc)
    return shape


def count_flops(model: Model | None, cfg: ModelConfig | None = None) -> FlopCount:
    fc = FlopCount()
    if model is None:
        return fc
    cfg = cfg or model.config
    _trace(model.net, (1, cfg.input_width), "", fc)
    return fc


# ------------------------------------------------------------ weight files
#
# b"TNET", u16 version, u64 config hash, u32 record count, then per record:
#   u16 name length + utf-8 name, u8 dtype, u32 rank, rank x u32 dims,
#   raw little-endian payload, u8 has_quant [, f32 scale, i32 zero_point]

WEIGHTS_MAGIC = b"TNET"
WEIGHTS_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}


@dataclass
class WeightRecord:
    name: str
    array: np.ndarray
    scale: float | None = None
    zero_point: int | None = None


def write_records(sink, config_hash: int, records: list[WeightRecord]):
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HQI", WEIGHTS_VERSION, config_hash, len(records)))
    for r in records:
        arr = np.asarray(r.array)
        code = DTYPE_CODES.get(arr.dtype.str)
        if code is None:
            raise TypeError(f"{r.name}: unsupported dtype {arr.dtype}")
        name = r.name.encode()
        buf.write(struct.pack("<H", len(name)) + name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
        if r.scale is None:
            buf.write(b"\x00")
        else:
            buf.write(struct.pack("<Bfi", 1, r.scale, int(r.zero_point or 0)))
    data = buf.getvalue()
    if sink is None:
        return data
    sink.write(data)
    return data


def read_records(source, expected_hash: int | None = None) -> list[WeightRecord]:
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise BadMagic("not a weight file")
    try:
        version, chash, count = struct.unpack_from("<HQI", data, 4)
        if expected_hash is not None and chash != expected_hash:
            raise ConfigHashMismatch(f"weights were saved for config hash {chash:#x}, expected {expected_hash:#x}")
        pos = 18
        records = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = bytes(data[pos + 2 : pos + 2 + n]).decode()
            pos += 2 + n
            code, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(data):
                raise TruncatedStream(f"record {name} payload cut short")
            arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += size
            (has_q,) = struct.unpack_from("<B", data, pos)
            pos += 1
            scale = zp = None
            if has_q:
                scale, zp = struct.unpack_from("<fi", data, pos)
                pos += 8
            records.append(WeightRecord(name, arr, scale, zp))
    except (struct.error, KeyError) as exc:
        raise TruncatedStream(f"weight stream ended early: {exc}") from exc
    return records


def save_weights(model: Model, sink=None) -> bytes:
    """Write all parameters and batch-norm statistics; returns the bytes written."""
    records = [WeightRecord(n, a) for n, a in model.state().items()]
    return write_records(sink, model.config.hash(), records)


def load_weights(source, cfg: ModelConfig) -> Model:
    records = read_records(source, cfg.hash())
    model = build_model(cfg)
    targets = {n: (layer, k, layer.params) for n, layer, k in model.parameters()}
    targets.update({n: (layer, k, layer.buffers) for n, layer, k in model.buffers()})
    seen = set()
    for r in records:
        if r.name not in targets:
            raise InvalidConfig(f"weight file has unknown entry {r.name}")
        _, key, store = targets[r.name]
        if store[key].shape != r.array.shape:
            raise ShapeMismatch(f"{r.name}: {r.array.shape} vs {store[key].shape}")
        store[key] = r.array
        seen.add(r.name)
    missing = set(targets) - seen
    if missing:
        raise TruncatedStream(f"weight file lacks {sorted(missing)[:3]}...")
    return model

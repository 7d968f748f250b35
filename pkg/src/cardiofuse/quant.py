"""8-bit quantization: fake-quant training and integer-only inference.

Scheme: per-tensor, symmetric int8 weights (zero point 0), affine int8
activations, int32 biases at ``input_scale * weight_scale``. Rounding is
half-away-from-zero everywhere. Batch norm is folded into the preceding
convolution before anything is quantized, so the network that is fine-tuned
with fake quantization is exactly the one that runs in integers.

Workflow::

    qat = prepare_qat(float_model)          # fold BN, insert fake-quant
    calibrate_activations(qat, windows)     # seed activation ranges
    train_model(windows, cfg, qat)          # fine-tune (observers keep tracking)
    qm = quantize_model(qat)                # int8 weights, int32 biases
    int8_forward(qm, windows)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import NoData, NotCalibrated, TruncatedStream
from .model import (
    Crop,
    Model,
    ModelConfig,
    WeightRecord,
    build_model,
    read_records,
    write_records,
)

QMIN, QMAX = -128, 127
INT32_MAX = 2**31 - 1
EMA_MOMENTUM = 0.99
DEGENERATE_EPS = 1e-6


def round_half_away(x):
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _f32(v: float) -> float:
    # scales are stored as f32 in weight files; keep them representable
    return float(np.float32(v))


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = "affine_activation"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.scheme == "symmetric_weight" and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point 0")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside int8")

    @property
    def real_min(self):
        return (QMIN - self.zero_point) * self.scale

    @property
    def real_max(self):
        return (QMAX - self.zero_point) * self.scale


def quantize_tensor(x, q: QuantParams) -> np.ndarray:
    v = round_half_away(np.asarray(x, dtype=np.float64) / q.scale) + q.zero_point
    return np.clip(v, QMIN, QMAX).astype(np.int8)


def dequantize(v, q: QuantParams) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) - q.zero_point) * q.scale


def symmetric_params(w) -> QuantParams:
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return QuantParams(_f32(m / 127) if m > 0 else 1.0, 0, "symmetric_weight")


def affine_params(lo: float, hi: float) -> QuantParams:
    """Map [lo, hi] (extended to contain 0, so zero padding is exact) onto int8."""
    if hi - lo < DEGENERATE_EPS:
        c = 0.5 * (lo + hi)
        lo, hi = c - DEGENERATE_EPS, c + DEGENERATE_EPS
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = _f32((hi - lo) / (QMAX - QMIN))
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp, "affine_activation")


def _codes(x, scale, zp):
    """Unclamped integer codes of ``x`` as floats, computed in x's own dtype."""
    t = x / x.dtype.type(scale)
    return np.sign(t) * np.floor(np.abs(t) + 0.5) + zp


def _fake(x, scale, zp):
    """quantize -> dequantize in x's dtype; also returns the in-range mask."""
    r = _codes(x, scale, zp)
    mask = (r >= QMIN) & (r <= QMAX)
    return (np.clip(r, QMIN, QMAX) - zp) * x.dtype.type(scale), mask


# --------------------------------------------------------------- fixed point

def fixed_point(m: float) -> tuple[int, int]:
    """Encode a positive real multiplier as ``m0 * 2**-shift`` with m0 in [2^30, 2^31)."""
    if not m > 0:
        return 0, 0
    frac, exp = math.frexp(m)
    m0 = int(round(frac * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    return m0, 31 - exp


def rounding_shift(v, shift: int):
    """round_half_away(v / 2**shift) for int64 arrays."""
    v = np.asarray(v, dtype=np.int64)
    if shift <= 0:
        return v << -shift
    if shift >= 63:
        return np.zeros_like(v)
    a = (np.abs(v) + (np.int64(1) << (shift - 1))) >> shift
    return np.sign(v) * a


def requantize(acc, multiplier: float):
    m0, shift = fixed_point(multiplier)
    return rounding_shift(np.asarray(acc, dtype=np.int64) * m0, shift)


# -------------------------------------------------------------- fake quant

class FakeQuant(nn.Layer):
    """Activation quantize->dequantize with an EMA min/max observer.

    The observer updates on training forwards (and during calibration);
    backward is the straight-through estimator masked to the clamp range.
    """

    def __init__(self, momentum=EMA_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.enabled = True
        self.observing = True
        self.calibrating = False
        self.min_val = None
        self.max_val = None

    def observe(self, x):
        lo, hi = float(np.min(x)), float(np.max(x))
        if self.min_val is None:
            self.min_val, self.max_val = lo, hi
        else:
            m = self.momentum
            self.min_val = m * self.min_val + (1 - m) * lo
            self.max_val = m * self.max_val + (1 - m) * hi

    @property
    def calibrated(self):
        return self.min_val is not None

    def qparams(self) -> QuantParams:
        if not self.calibrated:
            raise NotCalibrated("activation observer has not seen any data")
        return affine_params(self.min_val, self.max_val)

    def forward(self, x, training=False):
        if self.observing and (training or self.calibrating):
            self.observe(x)
        if not self.enabled:
            self._cache = None
            return x
        q = self.qparams()
        out, mask = _fake(x, q.scale, q.zero_point)
        self._cache = mask
        return out

    def backward(self, dout):
        mask = self._cache
        return dout if mask is None else dout * mask


class WeightFakeQuant:
    """Symmetric per-tensor weight fake-quant; bias goes to int32 at in_scale * w_scale."""

    def __init__(self, input_fq: FakeQuant | None):
        self.input_fq = input_fq
        self.enabled = True
        self.calibrating = False

    def __call__(self, w, b):
        if not self.enabled:
            return w, b
        q = symmetric_params(w)
        wq, _ = _fake(w, q.scale, 0)
        if b is not None and self.input_fq is not None and self.input_fq.calibrated:
            bs = self.input_fq.qparams().scale * q.scale
            r = np.clip(round_half_away(b.astype(np.float64) / bs), -INT32_MAX, INT32_MAX)
            b = (r * bs).astype(b.dtype)
        return wq, b


def _fold(conv, bn: nn.BatchNorm1d):
    inv = 1.0 / np.sqrt(bn.buffers["running_var"].astype(np.float64) + bn.eps)
    g = bn.params["gamma"].astype(np.float64) * inv
    w = conv.params["weight"].astype(np.float64)
    b = conv.params["bias"].astype(np.float64) if "bias" in conv.params else np.zeros(w.shape[0])
    dtype = conv.params["weight"].dtype
    if isinstance(conv, nn.Conv1d):
        new = nn.Conv1d(conv.in_ch, conv.out_ch, conv.kernel, conv.stride, conv.padding, conv.groups, bias=True)
        new.params["weight"] = (w * g[:, None, None]).astype(dtype)
    else:
        new = nn.Linear(conv.in_features, conv.out_features, bias=True)
        new.params["weight"] = (w * g[:, None]).astype(dtype)
    new.params["bias"] = ((b - bn.buffers["running_mean"]) * g + bn.params["beta"]).astype(dtype)
    return new


def _fold_seq(seq: nn.Layer) -> nn.Layer:
    if isinstance(seq, nn.Residual):
        return nn.Residual(_fold_seq(seq.body))
    if not isinstance(seq, nn.Sequential):
        return seq
    out, items, i = [], seq.layers, 0
    while i < len(items):
        name, layer = items[i]
        nxt = items[i + 1][1] if i + 1 < len(items) else None
        if isinstance(layer, (nn.Conv1d, nn.Linear)) and isinstance(nxt, nn.BatchNorm1d):
            out.append((name, _fold(layer, nxt)))
            i += 2
            continue
        out.append((name, _fold_seq(layer)))
        i += 1
    return nn.Sequential(out)


def fold_batchnorm(model: Model) -> Model:
    """Equivalent (inference-mode) model with every conv/linear+BN pair merged."""
    folded = Model(_fold_seq(model.copy().net), model.config)
    return folded


def _insert_fq(seq: nn.Sequential, current):
    out, items, i = [], seq.layers, 0
    while i < len(items):
        name, layer = items[i]
        nxt = items[i + 1][1] if i + 1 < len(items) else None
        if isinstance(layer, nn.BatchNorm1d):
            raise ValueError("fold batch norm before inserting fake quantization")
        if isinstance(layer, (nn.Conv1d, nn.Linear)):
            layer.weight_fq = WeightFakeQuant(current)
            out.append((name, layer))
            if isinstance(nxt, nn.Activation) and nxt.kind in ("relu", "relu6"):
                out.append(items[i + 1])
                i += 1
            current = FakeQuant()
            out.append((f"{name}_q", current))
        elif isinstance(layer, nn.Sequential):
            sub, current = _insert_fq(layer, current)
            out.append((name, sub))
        elif isinstance(layer, nn.Residual):
            body, _ = _insert_fq(layer.body, current)
            current = FakeQuant()
            out += [(name, nn.Residual(body)), (f"{name}_q", current)]
        elif isinstance(layer, (nn.Flatten, Crop)):
            out.append((name, layer))
        else:
            # affine, standalone activations, pooling
            current = FakeQuant()
            out += [(name, layer), (f"{name}_q", current)]
        i += 1
    return nn.Sequential(out), current


def prepare_qat(model: Model) -> Model:
    folded = fold_batchnorm(model)
    net, _ = _insert_fq(folded.net, None)
    qat = Model(net, model.config)
    qat.qat = True
    return qat


def fake_quant_layers(model: Model):
    """Every activation FakeQuant and every WeightFakeQuant in the model."""
    for _, layer in model.named_layers():
        if isinstance(layer, FakeQuant):
            yield layer
        if getattr(layer, "weight_fq", None) is not None:
            yield layer.weight_fq


def set_quantization(model: Model, enabled: bool):
    for fq in fake_quant_layers(model):
        fq.enabled = enabled


def freeze_observers(model: Model, frozen: bool = True):
    for fq in fake_quant_layers(model):
        if isinstance(fq, FakeQuant):
            fq.observing = not frozen


def _as_batch(windows):
    if isinstance(windows, np.ndarray):
        return windows
    return np.stack([getattr(w, "values", w) for w in windows]) if len(windows) else np.zeros((0, 0))


def calibrate_activations(model: Model, windows, batch_size=64) -> dict[str, QuantParams]:
    """Run ``windows`` through the QAT model with quantization off, seeding every observer."""
    x = _as_batch(windows)
    if len(x) == 0:
        raise NoData("calibration needs at least one window")
    x = model._prepare(x)
    fqs = list(fake_quant_layers(model))
    saved = [fq.enabled for fq in fqs]
    for fq in fqs:
        fq.enabled = False
        fq.calibrating = True
    try:
        for i in range(0, len(x), batch_size):
            model.net.forward(x[i : i + batch_size], False)
    finally:
        for fq, en in zip(fqs, saved):
            fq.enabled = en
            fq.calibrating = False
    return {name: layer.qparams() for name, layer in model.named_layers() if isinstance(layer, FakeQuant)}


def fake_quant_forward(model: Model, window) -> np.ndarray:
    """Probabilities from the fake-quantized network for one window (or a batch)."""
    p = model.predict_proba(window)
    return p[0] if np.ndim(getattr(window, "values", window)) == 1 else p


# ------------------------------------------------------------ int8 network

@dataclass
class QInput:
    scale: np.ndarray
    shift: np.ndarray
    out_q: QuantParams

    def run(self, x):
        a = nn.affine_modality(x, self.scale.astype(x.dtype), self.shift.astype(x.dtype))
        return np.clip(_codes(a, self.out_q.scale, self.out_q.zero_point), QMIN, QMAX).astype(np.int32)


@dataclass
class QConv:
    """Integer conv/linear: int8 x int8 -> int32 accumulate -> requantize."""

    weight: np.ndarray          # int8
    bias: np.ndarray            # int32
    w_q: QuantParams
    in_q: QuantParams
    out_q: QuantParams
    stride: int = 1
    padding: int = 0
    groups: int = 1
    clamp: str | None = None     # fused relu / relu6
    is_linear: bool = False

    @property
    def bias_scale(self):
        return self.in_q.scale * self.w_q.scale

    def accumulate(self, x):
        xi = x.astype(np.int64) - self.in_q.zero_point
        w = self.weight.astype(np.int64)
        if self.is_linear:
            acc = xi @ w.T + self.bias
        else:
            # zero padding of (x - zero_point) is padding with the real value 0
            acc = nn.conv1d(xi, w, None, self.stride, self.padding, self.groups) + self.bias[None, :, None]
        return acc

    def run(self, x):
        acc = self.accumulate(x)
        q = requantize(acc, self.bias_scale / self.out_q.scale) + self.out_q.zero_point
        lo, hi = QMIN, QMAX
        if self.clamp in ("relu", "relu6"):
            lo = max(lo, self.out_q.zero_point)
        if self.clamp == "relu6":
            hi = min(hi, int(round_half_away(6.0 / self.out_q.scale)) + self.out_q.zero_point)
        return np.clip(q, lo, hi).astype(np.int32)


@dataclass
class QLut:
    kind: str
    in_q: QuantParams
    out_q: QuantParams
    dtype: np.dtype = np.dtype(np.float32)

    def table(self):
        codes = np.arange(QMIN, QMAX + 1)
        s_in = self.dtype.type(self.in_q.scale)
        x = (codes - self.in_q.zero_point).astype(self.dtype) * s_in
        y = nn.activation(x, self.kind)
        return np.clip(_codes(y, self.out_q.scale, self.out_q.zero_point), QMIN, QMAX).astype(np.int32)

    def run(self, x):
        return self.table()[x - QMIN]


@dataclass
class QAdd:
    body: list
    in_q: QuantParams
    body_q: QuantParams
    out_q: QuantParams

    def run(self, x):
        y = run_ops(self.body, x)
        ma, mb = self.in_q.scale / self.out_q.scale, self.body_q.scale / self.out_q.scale
        _, shift = fixed_point(max(ma, mb))
        ia, ib = int(round(ma * 2.0**shift)), int(round(mb * 2.0**shift))
        s = (x.astype(np.int64) - self.in_q.zero_point) * ia + (y.astype(np.int64) - self.body_q.zero_point) * ib
        q = rounding_shift(s, shift) + self.out_q.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int32)


@dataclass
class QPool:
    in_q: QuantParams
    out_q: QuantParams

    def run(self, x):
        acc = (x.astype(np.int64) - self.in_q.zero_point).sum(axis=2)
        q = requantize(acc, self.in_q.scale / (x.shape[2] * self.out_q.scale)) + self.out_q.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int32)


@dataclass
class QReshape:
    kind: str
    width: int = 0

    def run(self, x):
        return x.reshape(x.shape[0], -1) if self.kind == "flatten" else x[..., : self.width]


def run_ops(ops, x):
    for op in ops:
        x = op.run(x)
    return x


@dataclass
class QuantModel:
    config: ModelConfig
    ops: list = field(default_factory=list)

    @property
    def input_q(self) -> QuantParams:
        return self.ops[0].out_q

    @property
    def output_q(self) -> QuantParams:
        return self.ops[-1].out_q

    def named_ops(self, ops=None, prefix=""):
        for i, op in enumerate(self.ops if ops is None else ops):
            name = f"{prefix}{i}"
            yield name, op
            if isinstance(op, QAdd):
                yield from self.named_ops(op.body, f"{name}.")

    def logits_int8(self, x):
        x = np.asarray(getattr(x, "values", x), dtype=np.float32)
        if x.ndim == 1:
            x = x[None]
        if x.ndim == 2:
            x = x[:, None, :]
        return run_ops(self.ops, x)


def _conv_op(layer, in_q: QuantParams, out_q: QuantParams, clamp):
    w = layer.params["weight"]
    wq = symmetric_params(w)
    b = layer.params.get("bias")
    bias = np.zeros(w.shape[0], dtype=np.int32)
    if b is not None:
        bias = np.clip(round_half_away(b.astype(np.float64) / (in_q.scale * wq.scale)), -INT32_MAX, INT32_MAX)
    codes = np.clip(_codes(w, wq.scale, 0), QMIN, QMAX).astype(np.int8)
    if isinstance(layer, nn.Linear):
        return QConv(codes, bias.astype(np.int32), wq, in_q, out_q, clamp=clamp, is_linear=True)
    return QConv(codes, bias.astype(np.int32), wq, in_q, out_q,
                 layer.stride, layer.padding, layer.groups, clamp)


def _convert(seq: nn.Sequential, current: QuantParams | None, dtype):
    ops, items, i = [], seq.layers, 0

    def take_fq(j):
        if j >= len(items) or not isinstance(items[j][1], FakeQuant):
            raise ValueError("model was not prepared with prepare_qat")
        return items[j][1].qparams()

    while i < len(items):
        _, layer = items[i]
        if isinstance(layer, nn.AffineModality):
            current = take_fq(i + 1)
            ops.append(QInput(layer.params["scale"].copy(), layer.params["shift"].copy(), current))
            i += 2
        elif isinstance(layer, (nn.Conv1d, nn.Linear)):
            nxt = items[i + 1][1] if i + 1 < len(items) else None
            clamp = None
            if isinstance(nxt, nn.Activation):
                clamp = nxt.kind
                i += 1
            out_q = take_fq(i + 1)
            ops.append(_conv_op(layer, current, out_q, clamp))
            current = out_q
            i += 2
        elif isinstance(layer, nn.Activation):
            out_q = take_fq(i + 1)
            ops.append(QLut(layer.kind, current, out_q, np.dtype(dtype)))
            current = out_q
            i += 2
        elif isinstance(layer, nn.Sequential):
            sub, current = _convert(layer, current, dtype)
            ops += sub
            i += 1
        elif isinstance(layer, nn.Residual):
            body, body_q = _convert(layer.body, current, dtype)
            out_q = take_fq(i + 1)
            ops.append(QAdd(body, current, body_q, out_q))
            current = out_q
            i += 2
        elif isinstance(layer, nn.GlobalAvgPool):
            out_q = take_fq(i + 1)
            ops.append(QPool(current, out_q))
            current = out_q
            i += 2
        elif isinstance(layer, nn.Flatten):
            ops.append(QReshape("flatten"))
            i += 1
        elif isinstance(layer, Crop):
            ops.append(QReshape("crop", layer.width))
            i += 1
        else:
            raise ValueError(f"cannot convert layer {type(layer).__name__}")
    return ops, current


def quantize_model(qat_model: Model) -> QuantModel:
    for fq in fake_quant_layers(qat_model):
        if isinstance(fq, FakeQuant) and not fq.calibrated:
            raise NotCalibrated("run calibrate_activations (or QAT training) first")
    ops, _ = _convert(qat_model.net, None, qat_model.dtype)
    return QuantModel(qat_model.config, ops)


def int8_logits(qm: QuantModel, windows) -> np.ndarray:
    """Dequantized output logits."""
    return dequantize(qm.logits_int8(windows), qm.output_q)


def int8_forward(qm: QuantModel, windows) -> np.ndarray:
    """Class probabilities; a single window gives a (n_classes,) vector."""
    single = np.ndim(getattr(windows, "values", windows)) == 1
    p = nn.softmax(int8_logits(qm, windows))
    return p[0] if single else p


def fixed_point_error(m: float) -> float:
    m0, shift = fixed_point(m)
    return abs(m0 * 2.0**-shift - m) / m


def accumulator_audit(qm_or_cfg) -> dict[str, int]:
    """Worst-case |int32 accumulator| per conv/linear: terms * 255 * 128 (+ |bias| when known)."""
    if isinstance(qm_or_cfg, QuantModel):
        out = {}
        for name, op in qm_or_cfg.named_ops():
            if isinstance(op, QConv):
                terms = op.weight.shape[1] * (op.weight.shape[2] if op.weight.ndim == 3 else 1)
                out[name] = terms * 255 * 128 + int(np.max(np.abs(op.bias.astype(np.int64)), initial=0))
        return out
    cfg = qm_or_cfg
    model = build_model(cfg)
    out = {}
    for name, layer in model.named_layers():
        if isinstance(layer, nn.Conv1d):
            out[name] = layer.in_ch // layer.groups * layer.kernel * 255 * 128
        elif isinstance(layer, nn.Linear):
            out[name] = layer.in_features * 255 * 128
    return out


# --------------------------------------------------------- serialization

def _records(qm: QuantModel):
    recs = []
    for name, op in qm.named_ops():
        if isinstance(op, QInput):
            recs += [WeightRecord(f"{name}.scale", op.scale.astype(np.float32)),
                     WeightRecord(f"{name}.shift", op.shift.astype(np.float32)),
                     WeightRecord(f"{name}.out", np.zeros(0, np.float32), op.out_q.scale, op.out_q.zero_point)]
        elif isinstance(op, QConv):
            recs += [WeightRecord(f"{name}.weight", op.weight, op.w_q.scale, 0),
                     WeightRecord(f"{name}.bias", op.bias.astype(np.int32), _f32(op.bias_scale), 0),
                     WeightRecord(f"{name}.out", np.zeros(0, np.float32), op.out_q.scale, op.out_q.zero_point)]
        elif isinstance(op, (QLut, QAdd, QPool)):
            recs.append(WeightRecord(f"{name}.out", np.zeros(0, np.float32), op.out_q.scale, op.out_q.zero_point))
    return recs


def save_quant_weights(qm: QuantModel, sink=None) -> bytes:
    return write_records(sink, qm.config.hash(), _records(qm))


def load_quant_weights(source, cfg: ModelConfig) -> QuantModel:
    records = {r.name: r for r in read_records(source, cfg.hash())}
    # rebuild the op graph for this config, then fill in stored values
    skeleton = prepare_qat(build_model(cfg))
    for fq in fake_quant_layers(skeleton):
        if isinstance(fq, FakeQuant):
            fq.min_val, fq.max_val = -1.0, 1.0
    qm = quantize_model(skeleton)

    def qp(name, scheme="affine_activation"):
        r = records[name]
        return QuantParams(float(r.scale), int(r.zero_point), scheme)

    # in_q of each op is the previous op's out_q; resolve in order
    def fill(ops, prefix, current):
        for i, op in enumerate(ops):
            name = f"{prefix}{i}"
            if isinstance(op, QInput):
                op.scale, op.shift = records[f"{name}.scale"].array, records[f"{name}.shift"].array
                op.out_q = qp(f"{name}.out")
            elif isinstance(op, QConv):
                op.weight = records[f"{name}.weight"].array
                op.w_q = qp(f"{name}.weight", "symmetric_weight")
                op.bias = records[f"{name}.bias"].array
                op.in_q, op.out_q = current, qp(f"{name}.out")
            elif isinstance(op, QLut):
                op.in_q, op.out_q = current, qp(f"{name}.out")
            elif isinstance(op, QAdd):
                op.in_q = current
                op.body_q = fill(op.body, f"{name}.", current)
                op.out_q = qp(f"{name}.out")
            elif isinstance(op, QPool):
                op.in_q, op.out_q = current, qp(f"{name}.out")
            if not isinstance(op, QReshape):
                current = op.out_q
        return current

    try:
        fill(qm.ops, "", None)
    except KeyError as exc:
        raise TruncatedStream(f"quantized weight file lacks {exc}") from exc
    return qm

"""Recording -> fused network input windows.

Fixed order: interpolate gaps, downsample, z-normalize each modality over the
whole recording, cut overlapping windows, concatenate ECG then PCG.

Downsampling is plain linear interpolation without an anti-aliasing filter
(2000 Hz -> 42.67 Hz is a ~47x decimation, so content above ~21 Hz aliases).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    AllMissing,
    BadCache,
    LengthMismatch,
    RecordingTooShort,
    UpsamplingRequested,
)
from .signal_io import Label, PairedRecord, Signal

VARIANT_LENGTHS = (64, 128, 1024, 6000)


@dataclass(frozen=True)
class PreprocessConfig:
    per_modality_len: int = 128
    window_s: float = 3.0
    overlap_s: float = 2.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.overlap_s < self.window_s:
            raise ValueError("need 0 <= overlap_s < window_s")
        if self.per_modality_len < 1:
            raise ValueError("per_modality_len must be positive")

    @property
    def stride_s(self) -> float:
        return self.window_s - self.overlap_s

    @property
    def target_rate(self) -> float:
        return self.per_modality_len / self.window_s

    def _stride_samples(self) -> Fraction:
        # exact: e.g. 128 * 1/3 = 128/3 for the default config
        return Fraction(self.per_modality_len) * Fraction(self.stride_s) / Fraction(self.window_s)


@dataclass
class FusedWindow:
    values: np.ndarray
    record_id: str
    window_index: int
    label: Label

    @property
    def ecg(self) -> np.ndarray:
        return self.values[: len(self.values) // 2]

    @property
    def pcg(self) -> np.ndarray:
        return self.values[len(self.values) // 2 :]


def interpolate_missing(s: Signal) -> Signal:
    x = s.samples
    missing = np.isnan(x)
    if not missing.any():
        return Signal(x.copy(), s.rate, s.modality)
    if missing.all():
        raise AllMissing("signal has no valid samples")
    idx = np.arange(len(x))
    # np.interp holds the edge value outside the valid range
    filled = x.copy()
    filled[missing] = np.interp(idx[missing], idx[~missing], x[~missing])
    return Signal(filled, s.rate, s.modality)


def resample(s: Signal, target_len_per_window: int, window_s: float) -> Signal:
    target_rate = target_len_per_window / window_s
    if target_rate > s.rate * (1 + 1e-12):
        raise UpsamplingRequested(f"{s.rate} Hz -> {target_rate} Hz")
    if math.isclose(target_rate, s.rate, rel_tol=1e-12):
        return Signal(s.samples.copy(), s.rate, s.modality)
    n_out = int(round(len(s.samples) * target_rate / s.rate))
    # sample k sits at time k / target_rate regardless of the signal length,
    # so resampling a prefix gives a prefix of the resampled signal
    pos = np.arange(n_out) * (s.rate / target_rate)
    out = np.interp(pos, np.arange(len(s.samples)), s.samples)
    return Signal(out, target_rate, s.modality)


def normalize(s: Signal, epsilon: float = 1e-8) -> Signal:
    x = s.samples
    std = x.std()
    if std < epsilon:
        return Signal(np.zeros_like(x), s.rate, s.modality)
    return Signal((x - x.mean()) / std, s.rate, s.modality)


def window_starts(n_samples: int, cfg: PreprocessConfig) -> list[int]:
    """Start index of every full window in a signal of ``n_samples`` at the target rate."""
    L = cfg.per_modality_len
    if n_samples < L:
        return []
    stride = cfg._stride_samples()
    count = math.floor(Fraction(n_samples - L) / stride) + 1
    # fractional strides (128/3 samples) round to the nearest sample
    return [math.floor(i * stride + Fraction(1, 2)) for i in range(count)]


def fuse(ecg_win, pcg_win, record_id: str = "", window_index: int = 0, label=Label.NORMAL) -> FusedWindow:
    ecg_win = np.asarray(ecg_win, dtype=np.float32)
    pcg_win = np.asarray(pcg_win, dtype=np.float32)
    if ecg_win.shape != pcg_win.shape:
        raise LengthMismatch(f"ECG window {ecg_win.shape} vs PCG window {pcg_win.shape}")
    return FusedWindow(np.concatenate([ecg_win, pcg_win]), record_id, window_index, Label(label))


def extract_windows(ecg: Signal, pcg: Signal, cfg: PreprocessConfig, record_id: str = "",
                    label=Label.NORMAL) -> list[FusedWindow]:
    n = min(len(ecg), len(pcg))
    if n < cfg.per_modality_len:
        raise RecordingTooShort(
            f"{record_id or 'recording'}: {n / ecg.rate:.2f} s is shorter than one {cfg.window_s} s window"
        )
    L = cfg.per_modality_len
    return [
        fuse(ecg.samples[s : s + L], pcg.samples[s : s + L], record_id, i, label)
        for i, s in enumerate(window_starts(n, cfg))
    ]


def condition(s: Signal, cfg: PreprocessConfig) -> Signal:
    """Interpolate, resample and normalize a single modality."""
    s = interpolate_missing(s)
    s = resample(s, cfg.per_modality_len, cfg.window_s)
    return normalize(s, cfg.epsilon)


def preprocess_record(record: PairedRecord, cfg: PreprocessConfig = PreprocessConfig()) -> list[FusedWindow]:
    ecg = condition(record.ecg, cfg)
    pcg = condition(record.pcg, cfg)
    return extract_windows(ecg, pcg, cfg, record.record_id, record.label)


def preprocess_corpus(records, cfg: PreprocessConfig = PreprocessConfig()) -> list[FusedWindow]:
    windows = []
    for rec in records:
        windows.extend(preprocess_record(rec, cfg))
    return windows


def stack(windows: list[FusedWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(N, width) float32 inputs and (N,) int64 labels."""
    x = np.stack([w.values for w in windows]).astype(np.float32)
    y = np.array([int(w.label) for w in windows], dtype=np.int64)
    return x, y


# window cache: b"FWIN", u16 version, u32 count, then per window
# u16-prefixed utf-8 record id, u32 window index, u8 label, u32 width, width x f32
CACHE_MAGIC = b"FWIN"
CACHE_VERSION = 1


def write_window_cache(windows: list[FusedWindow]) -> bytes:
    out = [CACHE_MAGIC, struct.pack("<HI", CACHE_VERSION, len(windows))]
    for w in windows:
        rid = w.record_id.encode()
        vals = np.asarray(w.values, dtype="<f4")
        out.append(struct.pack("<H", len(rid)) + rid)
        out.append(struct.pack("<IBI", w.window_index, int(w.label), len(vals)))
        out.append(vals.tobytes())
    return b"".join(out)


def read_window_cache(data: bytes) -> list[FusedWindow]:
    if data[:4] != CACHE_MAGIC:
        raise BadCache("not a window cache (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != CACHE_VERSION:
            raise BadCache(f"unsupported cache version {version}")
        pos = 10
        windows = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            rid = data[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            idx, label, width = struct.unpack_from("<IBI", data, pos)
            pos += 9
            vals = np.frombuffer(data, dtype="<f4", count=width, offset=pos).copy()
            pos += 4 * width
            windows.append(FusedWindow(vals, rid, idx, Label(label)))
    except (struct.error, ValueError) as exc:
        raise BadCache(f"truncated or corrupt cache: {exc}") from exc
    return windows

"""Sliding majority vote, streaming simulation and the energy cost model."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import BadProfile, RecordingTooShort
from .preprocess import PreprocessConfig, interpolate_missing, normalize, resample, window_starts
from .signal_io import Label, PairedRecord, Signal

DEFAULT_N = 7


# ------------------------------------------------------------------ voting

def _majority(decisions) -> Label:
    n_abn = sum(1 for d in decisions if int(d) == Label.ABNORMAL)
    # ties go to Abnormal: a missed anomaly costs more than a false alarm
    return Label.ABNORMAL if 2 * n_abn >= len(decisions) else Label.NORMAL


@dataclass
class VoteState:
    N: int = DEFAULT_N
    ring: deque = field(default_factory=deque)
    verdict: Label | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        self.ring = deque(self.ring, maxlen=self.N)


def push_decision(state: VoteState, decision) -> Label:
    state.ring.append(Label(int(decision)))
    state.verdict = _majority(state.ring)
    return state.verdict


def recording_decision(probabilities) -> Label:
    """Majority over per-window argmax decisions; ties go to Abnormal."""
    p = np.atleast_2d(np.asarray(probabilities))
    if p.shape[0] == 0:
        raise ValueError("need at least one window")
    return _majority(p.argmax(axis=1).tolist())


def window_probabilities(model, x) -> np.ndarray:
    """Class probabilities from a float ``Model`` or an int8 ``QuantModel``."""
    from .quant import QuantModel, int8_forward

    if isinstance(model, QuantModel):
        return np.atleast_2d(int8_forward(model, x))
    return model.predict_proba(x)


# --------------------------------------------------------------- streaming

@dataclass
class StreamPolicy:
    """When to transmit and how the buffered windows are sized."""

    transmit_on_abnormal: bool = True
    bytes_per_sample: int = 1  # int8 samples on the device


@dataclass
class StreamEvent:
    timestamp_s: float
    kind: str  # infer | verdict_change | transmit
    payload: dict
    windows: list = field(default_factory=list, repr=False)

    def to_line(self) -> str:
        summary = " ".join(f"{k}={v}" for k, v in self.payload.items())
        return f"{self.timestamp_s:.3f}\t{self.kind}\t{summary}"


def _prefix_condition(s: Signal, n_target: int, cfg: PreprocessConfig) -> np.ndarray:
    """Condition only the raw samples needed for the first ``n_target`` output samples."""
    target_rate = cfg.target_rate
    ratio = s.rate / target_rate
    # raw samples up to the end time of output sample n_target, never beyond
    n_raw = min(len(s.samples), math.ceil(n_target * ratio))
    raw = Signal(s.samples[:n_raw], s.rate, s.modality)
    r = resample(interpolate_missing(raw), cfg.per_modality_len, cfg.window_s)
    r = Signal(r.samples[:n_target], r.rate, r.modality)
    return normalize(r, cfg.epsilon).samples


def simulate_stream(record: PairedRecord, model, N: int = DEFAULT_N, policy: StreamPolicy | None = None,
                    cfg: PreprocessConfig = PreprocessConfig()) -> list[StreamEvent]:
    """Replay a recording as a live stream with one inference per window stride.

    Each inference sees only the signal up to its window end. Normalization
    statistics come from that prefix, so the stream never looks ahead.
    """
    policy = policy or StreamPolicy()
    L = cfg.per_modality_len
    rate = cfg.target_rate
    n_avail = min(int(round(len(record.ecg) * rate / record.ecg.rate)),
                  int(round(len(record.pcg) * rate / record.pcg.rate)))
    starts = window_starts(n_avail, cfg)
    if not starts:
        raise RecordingTooShort(f"{record.record_id}: shorter than one window")
    state = VoteState(N)
    buffer: deque = deque(maxlen=N)
    events: list[StreamEvent] = []
    for i, s in enumerate(starts):
        end = s + L
        t = end / rate
        ecg = _prefix_condition(record.ecg, end, cfg)[s:end]
        pcg = _prefix_condition(record.pcg, end, cfg)[s:end]
        window = np.concatenate([ecg, pcg]).astype(np.float32)
        buffer.append(window)
        p = window_probabilities(model, window[None])[0]
        decision = Label(int(p.argmax()))
        events.append(StreamEvent(t, "infer", {"window": i, "decision": decision.name,
                                               "p_abnormal": round(float(p[1]), 6)}))
        before = state.verdict
        after = push_decision(state, decision)
        if after != before:
            events.append(StreamEvent(t, "verdict_change", {
                "from": "none" if before is None else before.name, "to": after.name}))
            if policy.transmit_on_abnormal and after == Label.ABNORMAL:
                n_bytes = len(buffer) * 2 * L * policy.bytes_per_sample
                events.append(StreamEvent(t, "transmit", {"windows": len(buffer), "bytes": n_bytes},
                                          windows=list(buffer)))
    return events


def format_event_log(events) -> str:
    return "".join(e.to_line() + "\n" for e in events)


# -------------------------------------------------------------- energy model

@dataclass(frozen=True)
class CostProfile:
    infer_energy_mJ: float = 0.092
    infer_period_s: float = 1.0
    radio_power_mW: float = 0.198
    radio_package_bytes: int = 213
    radio_rate_pkgs_per_s: float = 5.0
    anomaly_duty: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise BadProfile(f"{f.name} must be a nonnegative number, got {v!r}")
        if self.infer_period_s == 0 or self.radio_power_mW == 0:
            raise BadProfile("infer_period_s and radio_power_mW must be positive")
        if self.anomaly_duty > 1:
            raise BadProfile("anomaly_duty is a fraction in [0, 1]")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


# Per-inference energies: NPU, CPU as tabulated, CPU as quoted in the power comparison.
# The two CPU figures disagree by 0.01 at the source; both are kept.
PROFILES = {
    "npu": CostProfile(infer_energy_mJ=0.092),
    "cpu": CostProfile(infer_energy_mJ=0.639),
    "cpu-text": CostProfile(infer_energy_mJ=0.629),
}


def parse_profile(text: str) -> CostProfile:
    kw = {}
    names = {f.name: f.type for f in fields(CostProfile)}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or key not in names:
            raise BadProfile(f"line {n}: expected one of {sorted(names)} as key=value")
        try:
            kw[key] = int(val) if names[key] == "int" else float(val)
        except ValueError:
            raise BadProfile(f"line {n}: {key} is not a number: {val!r}") from None
    return CostProfile(**kw)


def load_profile(path) -> CostProfile:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_profile(fh.read())
    except OSError as exc:
        raise BadProfile(f"cannot read profile {path}: {exc}") from exc


@dataclass(frozen=True)
class EnergyReport:
    ml_power_mW: float
    radio_power_mW: float
    savings_fraction: float
    breakeven_anomaly_duty: float
    radio_bytes_per_s: float
    system_power_mW: float

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6g}\n" for k, v in asdict(self).items())


def compare_energy(p: CostProfile) -> EnergyReport:
    """Always-on local inference versus continuous streaming over the radio.

    The breakeven duty is the anomaly fraction at which inference plus
    anomaly-triggered transmission costs as much as streaming everything; a
    negative value means local inference never pays off.
    """
    ml = p.infer_energy_mJ / p.infer_period_s
    radio = p.radio_power_mW
    savings = (radio - ml) / radio
    return EnergyReport(
        ml_power_mW=ml,
        radio_power_mW=radio,
        savings_fraction=savings,
        breakeven_anomaly_duty=(radio - ml) / radio,
        radio_bytes_per_s=p.radio_package_bytes * p.radio_rate_pkgs_per_s,
        system_power_mW=ml + p.anomaly_duty * radio,
    )


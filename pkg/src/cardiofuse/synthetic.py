"""Synthetic paired ECG/PCG recordings with a controllable abnormality.

Normal recordings are a train of P-QRS-T complexes with matching S1/S2 heart
sound bursts. Abnormal recordings add one localized bump per beat in late
diastole. The bump is wide (sigma ~30 ms) so it survives the drop to ~43 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import FusedWindow
from .signal_io import Label, Modality, PairedRecord, Signal, interleave_wfdb, write_wav_pcm


@dataclass(frozen=True)
class SyntheticConfig:
    rate: float = 2000.0
    min_duration_s: float = 9.0
    max_duration_s: float = 20.0
    heart_rate_bpm: tuple[float, float] = (55.0, 95.0)
    spike_amplitude: float = 1.2  # relative to the R peak
    spike_sigma_s: float = 0.03
    noise: float = 0.05
    pcg_noise_only: bool = False
    missing_fraction: float = 0.0


def _bump(t, centre, sigma):
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2)


def _beat_times(duration, rng, bpm_range):
    rr = 60.0 / rng.uniform(*bpm_range)
    t, beats = rng.uniform(0, rr), []
    while t < duration:
        beats.append((t, rr))
        t += rr * rng.normal(1.0, 0.03)
    return beats


def synth_record(record_id: str, label: Label, rng: np.random.Generator,
                 cfg: SyntheticConfig = SyntheticConfig()) -> PairedRecord:
    duration = rng.uniform(cfg.min_duration_s, cfg.max_duration_s)
    n = int(duration * cfg.rate)
    t = np.arange(n) / cfg.rate
    ecg = np.zeros(n)
    pcg = np.zeros(n)
    for beat, rr in _beat_times(duration, rng, cfg.heart_rate_bpm):
        ecg += 0.15 * _bump(t, beat - 0.16, 0.025)          # P
        ecg -= 0.1 * _bump(t, beat - 0.02, 0.008)           # Q
        ecg += 1.0 * _bump(t, beat, 0.012)                  # R
        ecg -= 0.2 * _bump(t, beat + 0.03, 0.01)            # S
        ecg += 0.3 * _bump(t, beat + 0.25, 0.05)            # T
        s1, s2 = beat + 0.05, beat + 0.35
        pcg += (_bump(t, s1, 0.02) * np.sin(2 * np.pi * 40 * (t - s1))
                + 0.7 * _bump(t, s2, 0.015) * np.sin(2 * np.pi * 55 * (t - s2)))
        if label == Label.ABNORMAL:
            centre = beat + 0.7 * rr
            ecg += cfg.spike_amplitude * _bump(t, centre, cfg.spike_sigma_s)
            pcg += 0.8 * _bump(t, centre, cfg.spike_sigma_s)
    ecg += cfg.noise * rng.standard_normal(n)
    if cfg.pcg_noise_only:
        pcg = rng.standard_normal(n)
    else:
        pcg += cfg.noise * rng.standard_normal(n)
    if cfg.missing_fraction > 0:
        ecg[rng.random(n) < cfg.missing_fraction] = np.nan
    return PairedRecord(record_id, Signal(ecg, cfg.rate, Modality.ECG),
                        Signal(0.5 * pcg / np.abs(pcg).max(), cfg.rate, Modality.PCG), label)


def synth_corpus(n_records: int = 20, abnormal_fraction: float = 0.5, seed: int = 0,
                 cfg: SyntheticConfig = SyntheticConfig()) -> list[PairedRecord]:
    """``n_records`` recordings named s0001..; labels alternate to hit ``abnormal_fraction``."""
    rng = np.random.default_rng(seed)
    n_abn = int(round(n_records * abnormal_fraction))
    labels = [Label.ABNORMAL] * n_abn + [Label.NORMAL] * (n_records - n_abn)
    rng.shuffle(labels)
    return [synth_record(f"s{i + 1:04d}", lab, rng, cfg) for i, lab in enumerate(labels)]


def synth_windows(n: int, seed: int = 0, per_modality_len: int = 128, spike_width: float = 3.0,
                  noise: float = 0.3) -> list[FusedWindow]:
    """Directly generated fused windows: class 1 is class 0 plus a localized spike in the ECG half."""
    rng = np.random.default_rng(seed)
    L = per_modality_len
    idx = np.arange(L)
    out = []
    for i in range(n):
        label = Label(i % 2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        freq = rng.uniform(2, 5, size=2)
        ecg = np.sin(2 * np.pi * freq[0] * idx / L + phase[0]) + noise * rng.standard_normal(L)
        pcg = np.sin(2 * np.pi * freq[1] * idx / L + phase[1]) + noise * rng.standard_normal(L)
        if label == Label.ABNORMAL:
            ecg += 3.0 * _bump(idx, rng.uniform(0.2 * L, 0.8 * L), spike_width)
        values = np.concatenate([ecg, pcg]).astype(np.float32)
        out.append(FusedWindow(values, f"w{i:05d}", 0, label))
    return out


ECG_GAIN = 1000.0
PCG_GAIN = 1000.0


def write_corpus(records: list[PairedRecord], directory) -> Path:
    """Lay ``records`` out like a PhysioNet training set.

    Each record gets a two-channel format-16 ``.dat`` (PCG, ECG), a ``.wav``
    copy of the PCG and a header; labels go to ``REFERENCE.csv``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ref = []
    for rec in records:
        if rec.ecg.rate != rec.pcg.rate:
            raise ValueError("write_corpus needs both modalities at one rate")
        n = min(len(rec.ecg), len(rec.pcg))
        pcg_raw = np.clip(np.round(rec.pcg.samples[:n] * 32768), -32767, 32767).astype(np.int16)
        ecg = rec.ecg.samples[:n]
        ecg_raw = np.where(np.isnan(ecg), -32768,
                           np.clip(np.round(np.nan_to_num(ecg) * ECG_GAIN), -32767, 32767)).astype(np.int16)
        rid = rec.record_id
        (directory / f"{rid}.dat").write_bytes(interleave_wfdb([pcg_raw, ecg_raw]))
        (directory / f"{rid}.wav").write_bytes(write_wav_pcm(pcg_raw, int(rec.pcg.rate)))
        rate = f"{rec.ecg.rate:g}"
        (directory / f"{rid}.hea").write_text(
            f"{rid} 2 {rate} {n}\n"
            f"{rid}.dat 16+0 {PCG_GAIN:g}/mV 16 0 0 0 0 PCG\n"
            f"{rid}.dat 16+0 {ECG_GAIN:g}/mV 16 0 0 0 0 ECG\n"
        )
        ref.append(f"{rid},{'1' if rec.label == Label.ABNORMAL else '-1'}\n")
    (directory / "REFERENCE.csv").write_text("".join(ref))
    return directory

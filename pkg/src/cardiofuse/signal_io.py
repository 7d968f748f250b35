"""Readers for the PhysioNet 2016 ``training-a`` layout.

A record ``<id>`` is a WFDB header ``<id>.hea``, a 16-bit interleaved signal
file ``<id>.dat`` (ECG, sometimes PCG) and usually a PCM WAV ``<id>.wav``
holding the PCG. Labels live in ``REFERENCE.csv`` as ``<id>,<-1|1>``.

Only WFDB storage format 16 is supported.
"""

from __future__ import annotations

import enum
import io
import logging
import re
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadLabelValue,
    ChannelOutOfRange,
    DuplicateRecord,
    LengthMismatch,
    MalformedHeader,
    MissingLabel,
    MissingModality,
    NotRiff,
    UnsupportedEncoding,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

WFDB_MISSING = -32768
DEFAULT_GAIN = 200.0


class Modality(enum.Enum):
    ECG = "ECG"
    PCG = "PCG"


class Label(enum.IntEnum):
    """Class index convention used everywhere: 0 = Normal, 1 = Abnormal."""

    NORMAL = 0
    ABNORMAL = 1


@dataclass(frozen=True)
class RecordHeader:
    record_id: str
    n_channels: int
    sampling_rate: float
    n_samples: int
    channel_descriptions: list[str]
    gain_per_channel: list[float]
    baseline_per_channel: list[int]
    storage_format: str = "Int16LE"
    file_names: list[str] = field(default_factory=list)
    byte_offsets: list[int] = field(default_factory=list)

    def channel_modality(self, channel: int) -> Modality | None:
        return _modality_from_description(self.channel_descriptions[channel])

    def subset(self, channels: list[int]) -> RecordHeader:
        """Header restricted to ``channels`` (e.g. those stored in one file)."""
        pick = lambda xs: [xs[c] for c in channels] if xs else []
        return RecordHeader(
            record_id=self.record_id,
            n_channels=len(channels),
            sampling_rate=self.sampling_rate,
            n_samples=self.n_samples,
            channel_descriptions=pick(self.channel_descriptions),
            gain_per_channel=pick(self.gain_per_channel),
            baseline_per_channel=pick(self.baseline_per_channel),
            storage_format=self.storage_format,
            file_names=pick(self.file_names),
            byte_offsets=pick(self.byte_offsets),
        )


@dataclass
class Signal:
    """One modality's samples in physical units. NaN marks a missing sample."""

    samples: np.ndarray
    rate: float
    modality: Modality | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not self.rate > 0:
            raise ValueError(f"sampling rate must be positive, got {self.rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class PairedRecord:
    record_id: str
    ecg: Signal
    pcg: Signal
    label: Label

    @property
    def duration(self) -> float:
        return min(self.ecg.duration, self.pcg.duration)


def _modality_from_description(desc: str) -> Modality | None:
    d = desc.upper()
    if "ECG" in d:
        return Modality.ECG
    if "PCG" in d:
        return Modality.PCG
    return None


_GAIN_RE = re.compile(r"^([-+\d.eE]+)(?:\((-?\d+)\))?(?:/(\S*))?$")
_FMT_RE = re.compile(r"^(\d+)(?:x\d+)?(?::\d+)?(?:\+(\d+))?$")


def parse_wfdb_header(text: str) -> RecordHeader:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MalformedHeader("empty header")

    first = lines[0].split()
    if len(first) < 4:
        raise MalformedHeader(
            f"record line needs 'record_id n_channels sampling_rate n_samples', got {lines[0]!r}"
        )
    record_id = first[0].split("/")[0]
    try:
        n_channels = int(first[1])
        sampling_rate = float(first[2].split("/")[0])
        n_samples = int(first[3])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric field in record line {lines[0]!r}") from exc
    if n_channels < 1 or not sampling_rate > 0 or n_samples < 1:
        raise MalformedHeader(f"non-positive field in record line {lines[0]!r}")

    chan_lines = lines[1:]
    if len(chan_lines) < n_channels:
        raise MalformedHeader(f"expected {n_channels} channel lines, found {len(chan_lines)}")

    files, offsets, gains, baselines, descs = [], [], [], [], []
    for ln in chan_lines[:n_channels]:
        parts = ln.split()
        if len(parts) < 2:
            raise MalformedHeader(f"channel line too short: {ln!r}")
        m = _FMT_RE.match(parts[1])
        if m is None:
            raise MalformedHeader(f"bad storage format field {parts[1]!r}")
        if m.group(1) != "16":
            raise UnsupportedFormat(f"storage format {m.group(1)} (only 16 is supported)")
        files.append(parts[0])
        offsets.append(int(m.group(2) or 0))

        gain, baseline = DEFAULT_GAIN, None
        if len(parts) > 2:
            g = _GAIN_RE.match(parts[2])
            if g is None:
                raise MalformedHeader(f"bad gain field {parts[2]!r}")
            gain = float(g.group(1)) or DEFAULT_GAIN
            if g.group(2) is not None:
                baseline = int(g.group(2))
        if baseline is None:
            # WFDB: baseline defaults to the ADC zero (5th field)
            try:
                baseline = int(parts[4]) if len(parts) > 4 else 0
            except ValueError as exc:
                raise MalformedHeader(f"bad adc zero in {ln!r}") from exc
        gains.append(gain)
        baselines.append(baseline)
        descs.append(" ".join(parts[8:]) if len(parts) > 8 else "")

    return RecordHeader(
        record_id=record_id,
        n_channels=n_channels,
        sampling_rate=sampling_rate,
        n_samples=n_samples,
        channel_descriptions=descs,
        gain_per_channel=gains,
        baseline_per_channel=baselines,
        file_names=files,
        byte_offsets=offsets,
    )


def _frames(header: RecordHeader, data: bytes) -> np.ndarray:
    expected = header.n_samples * header.n_channels * 2
    if len(data) != expected:
        raise LengthMismatch(
            f"{header.record_id}: signal payload has {len(data)} bytes, header implies {expected}"
        )
    return np.frombuffer(data, dtype="<i2").reshape(header.n_samples, header.n_channels)


def read_wfdb_raw(header: RecordHeader, data: bytes, channel: int) -> np.ndarray:
    """Digital (ADC) samples of one channel, no scaling."""
    if not 0 <= channel < header.n_channels:
        raise ChannelOutOfRange(f"channel {channel} not in [0, {header.n_channels})")
    return _frames(header, data)[:, channel].copy()


def read_wfdb_signal(header: RecordHeader, data: bytes, channel: int) -> Signal:
    raw = read_wfdb_raw(header, data, channel)
    phys = (raw.astype(np.float64) - header.baseline_per_channel[channel]) / header.gain_per_channel[channel]
    phys[raw == WFDB_MISSING] = np.nan
    return Signal(phys, header.sampling_rate, header.channel_modality(channel))


def interleave_wfdb(channels: list[np.ndarray]) -> bytes:
    """Inverse of de-interleaving: int16 channels -> format-16 payload."""
    return np.stack([np.asarray(c, dtype="<i2") for c in channels], axis=1).tobytes()


def read_wav_pcm(data: bytes) -> Signal:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotRiff("not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise UnsupportedEncoding("truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise NotRiff("missing fmt or data chunk")
    tag, n_ch, rate, _, _, bits = fmt
    if tag != 1:
        raise UnsupportedEncoding(f"format tag {tag:#06x} is not PCM")
    if bits != 16:
        raise UnsupportedEncoding(f"{bits}-bit samples (only 16-bit)")
    if n_ch != 1:
        raise UnsupportedEncoding(f"{n_ch} channels (only mono)")
    if len(payload) % 2:
        payload = payload[:-1]
    pcm = np.frombuffer(payload, dtype="<i2")
    return Signal(pcm.astype(np.float64) / 32768.0, float(rate), Modality.PCG)


def write_wav_pcm(pcm: np.ndarray, rate: int) -> bytes:
    """Serialize int16 mono samples as a canonical PCM WAV file."""
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(rate))
        w.writeframes(np.asarray(pcm, dtype="<i2").tobytes())
    return buf.getvalue()


def load_label_index(csv_text: str) -> dict[str, Label]:
    index: dict[str, Label] = {}
    for lineno, ln in enumerate(csv_text.splitlines(), 1):
        ln = ln.strip()
        if not ln:
            continue
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != 2:
            raise BadLabelValue(f"line {lineno}: expected 'record_id,label', got {ln!r}")
        rid, value = parts
        if value == "-1":
            label = Label.NORMAL
        elif value == "1":
            label = Label.ABNORMAL
        else:
            raise BadLabelValue(f"line {lineno}: label must be -1 or 1, got {value!r}")
        if rid in index:
            raise DuplicateRecord(f"line {lineno}: record {rid} listed twice")
        index[rid] = label
    return index


def _read_dat_channels(directory: Path, header: RecordHeader) -> dict[int, Signal]:
    """All channels stored in WFDB signal files (anything except .wav)."""
    by_file: dict[str, list[int]] = {}
    for ch, name in enumerate(header.file_names):
        if not name.lower().endswith(".wav"):
            by_file.setdefault(name, []).append(ch)
    out = {}
    for name, chans in by_file.items():
        path = directory / name
        if not path.exists():
            continue
        sub = header.subset(chans)
        raw = path.read_bytes()[sub.byte_offsets[0] if sub.byte_offsets else 0 :]
        for i, ch in enumerate(chans):
            out[ch] = read_wfdb_signal(sub, raw, i)
    return out


def load_record(directory, record_id: str, index: dict[str, Label]) -> PairedRecord:
    directory = Path(directory)
    if record_id not in index:
        raise MissingLabel(f"{record_id}: no entry in label index")
    header = parse_wfdb_header((directory / f"{record_id}.hea").read_text())
    dat = _read_dat_channels(directory, header)

    ecg = next((s for s in dat.values() if s.modality is Modality.ECG), None)
    if ecg is None:
        raise MissingModality(f"{record_id}: no ECG channel")

    wav_path = directory / f"{record_id}.wav"
    if wav_path.exists():
        pcg = read_wav_pcm(wav_path.read_bytes())
    else:
        pcg = next((s for s in dat.values() if s.modality is Modality.PCG), None)
        if pcg is None:
            raise MissingModality(f"{record_id}: no PCG source")

    # trim to the common duration, no resampling here
    duration = min(ecg.duration, pcg.duration)
    ecg = Signal(ecg.samples[: int(round(duration * ecg.rate))], ecg.rate, Modality.ECG)
    pcg = Signal(pcg.samples[: int(round(duration * pcg.rate))], pcg.rate, Modality.PCG)
    if not 9.0 <= duration <= 37.0:
        log.warning("%s: duration %.2f s outside the expected 9-37 s range", record_id, duration)
    return PairedRecord(record_id, ecg, pcg, index[record_id])


def load_corpus(directory) -> tuple[list[PairedRecord], list[str]]:
    """Load every record under ``directory``.

    Returns the paired records and the ids excluded for a missing modality,
    so ``len(records) + len(excluded)`` equals the number of header files.
    """
    directory = Path(directory)
    ref = directory / "REFERENCE.csv"
    if not ref.exists():
        raise FileNotFoundError(f"{ref} not found")
    index = load_label_index(ref.read_text())
    records, excluded = [], []
    for hea in sorted(directory.glob("*.hea")):
        try:
            records.append(load_record(directory, hea.stem, index))
        except MissingModality as exc:
            log.info("excluded %s", exc)
            excluded.append(hea.stem)
    return records, excluded

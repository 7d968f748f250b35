import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiofuse.errors import AllMissing, BadCache, LengthMismatch, RecordingTooShort, UpsamplingRequested
from cardiofuse.preprocess import (
    PreprocessConfig,
    condition,
    extract_windows,
    fuse,
    interpolate_missing,
    normalize,
    preprocess_corpus,
    preprocess_record,
    read_window_cache,
    resample,
    window_starts,
    write_window_cache,
)
from cardiofuse.signal_io import Label, Modality, PairedRecord, Signal

NAN = float("nan")


def sig(x, rate=2000.0, modality=Modality.ECG):
    return Signal(np.asarray(x, dtype=float), rate, modality)


def test_interpolate_examples():
    assert interpolate_missing(sig([1, NAN, 3])).samples.tolist() == [1, 2, 3]
    assert interpolate_missing(sig([NAN, 5, 5])).samples.tolist() == [5, 5, 5]
    assert interpolate_missing(sig([4, 5, NAN, NAN])).samples.tolist() == [4, 5, 5, 5]
    x = sig([0.5, 1.5, -2])
    assert np.array_equal(interpolate_missing(x).samples, x.samples)
    with pytest.raises(AllMissing):
        interpolate_missing(sig([NAN, NAN]))


@given(st.lists(st.one_of(st.floats(-1e3, 1e3), st.just(NAN)), min_size=1, max_size=60))
def test_interpolate_keeps_valid_samples(values):
    x = np.array(values)
    valid = ~np.isnan(x)
    if not valid.any():
        return
    out = interpolate_missing(sig(x)).samples
    assert not np.isnan(out).any()
    assert np.array_equal(out[valid], x[valid])


def test_resample_rate_and_length():
    r = resample(sig(np.random.default_rng(0).standard_normal(6000)), 128, 3.0)
    assert len(r) == 128
    assert r.rate == pytest.approx(42.6667, abs=1e-4)
    assert round(r.rate, 2) == 42.67


def test_resample_identity_and_upsampling():
    x = sig(np.arange(10.0), rate=128 / 3)
    assert np.array_equal(resample(x, 128, 3.0).samples, x.samples)
    with pytest.raises(UpsamplingRequested):
        resample(sig(np.arange(10.0), rate=20.0), 128, 3.0)


def test_resample_preserves_affine_ramp():
    r = resample(sig(np.arange(6000.0)), 128, 3.0).samples
    k = np.arange(len(r))
    fit = np.polyval(np.polyfit(k, r, 1), k)
    assert np.max(np.abs(r - fit)) < 1e-9


def test_resample_prefix_consistency():
    # resampling a prefix gives a prefix of the resampled signal
    x = np.random.default_rng(1).standard_normal(8000)
    full = resample(sig(x), 128, 3.0).samples
    part = resample(sig(x[:5000]), 128, 3.0).samples
    assert np.array_equal(full[: len(part) - 1], part[:-1])


def test_normalize_examples():
    assert normalize(sig([0, 2])).samples.tolist() == [-1, 1]
    assert normalize(sig([5, 5, 5])).samples.tolist() == [0, 0, 0]
    z = normalize(sig(np.random.default_rng(0).standard_normal(100))).samples
    np.testing.assert_allclose(normalize(sig(z)).samples, z, atol=1e-6)


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=200))
def test_normalize_moments(values):
    x = np.array(values)
    out = normalize(sig(x)).samples
    if x.std() < 1e-8:
        assert not out.any()
    elif x.std() > 1e-3:
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1) < 1e-6


@pytest.mark.parametrize("seconds,count", [(3, 1), (9, 7), (37, 35), (10.5, 8)])
def test_window_counts(seconds, count):
    cfg = PreprocessConfig()
    n = int(round(seconds * cfg.target_rate))
    assert len(window_starts(n, cfg)) == count
    assert count == math.floor((seconds - 3) / 1) + 1


def test_window_overlap_tracks_fractional_stride():
    cfg = PreprocessConfig()
    starts = window_starts(1579, cfg)
    steps = np.diff(starts)
    # a stride of 128/3 samples alternates between 42 and 43
    assert set(steps.tolist()) <= {42, 43}
    overlaps = cfg.per_modality_len - steps
    assert abs(overlaps.mean() - 2 * cfg.target_rate) < 1.0
    assert np.all(np.abs(overlaps - 2 * cfg.target_rate) < 1.0)
    assert starts[-1] + 128 <= 1579


def test_extract_windows_shapes_and_labels():
    cfg = PreprocessConfig()
    n = 384  # 9 s at the target rate
    e = sig(np.arange(n), rate=cfg.target_rate)
    p = sig(-np.arange(n), rate=cfg.target_rate, modality=Modality.PCG)
    wins = extract_windows(e, p, cfg, "r", Label.ABNORMAL)
    assert len(wins) == 7
    assert all(len(w.values) == 256 and w.label == Label.ABNORMAL for w in wins)
    assert [w.window_index for w in wins] == list(range(7))
    s = window_starts(n, cfg)
    for w, s0 in zip(wins, s):
        assert w.ecg[0] == s0 and w.pcg[0] == -s0
    with pytest.raises(RecordingTooShort):
        extract_windows(sig(np.zeros(100), cfg.target_rate), sig(np.zeros(100), cfg.target_rate), cfg)


def test_fuse():
    w = fuse(np.ones(128), np.full(128, 2.0))
    assert w.values[0] == 1 and w.values[255] == 2 and len(w.values) == 256
    a, b = np.arange(128.0), np.arange(128.0) + 500
    f = fuse(a, b)
    assert np.array_equal(f.ecg, a) and np.array_equal(f.pcg, b)
    with pytest.raises(LengthMismatch):
        fuse(np.ones(128), np.ones(64))


def _record(seconds, rate=2000.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    return PairedRecord("r", sig(rng.standard_normal(n), rate), sig(rng.standard_normal(n), rate, Modality.PCG),
                        Label.NORMAL)


def test_pipeline_end_to_end_counts():
    assert len(preprocess_record(_record(9))) == 7
    assert len(preprocess_record(_record(37))) == 35


def test_pipeline_deterministic():
    a = preprocess_corpus([_record(12, seed=3)])
    b = preprocess_corpus([_record(12, seed=3)])
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_normalization_uses_whole_recording():
    # per-recording statistics: an individual window is generally not standardized
    rec = _record(20, seed=1)
    rec.ecg.samples[: len(rec.ecg.samples) // 2] += 5
    wins = preprocess_record(rec)
    cond = condition(rec.ecg, PreprocessConfig()).samples
    assert abs(cond.mean()) < 1e-9 and abs(cond.std() - 1) < 1e-9
    assert abs(wins[0].ecg.mean()) > 0.5


def test_window_cache_round_trip(tmp_path):
    wins = preprocess_record(_record(10, seed=2))
    data = write_window_cache(wins)
    back = read_window_cache(data)
    assert len(back) == len(wins)
    for a, b in zip(wins, back):
        assert (a.record_id, a.window_index, a.label) == (b.record_id, b.window_index, b.label)
        assert np.array_equal(a.values, b.values)
    assert write_window_cache(back) == data
    with pytest.raises(BadCache):
        read_window_cache(b"XXXX" + data[4:])
    with pytest.raises(BadCache):
        read_window_cache(data[:-3])


@pytest.mark.parametrize("n", [64, 1024])
def test_variant_lengths(n):
    cfg = PreprocessConfig(per_modality_len=n)
    wins = preprocess_record(_record(9), cfg)
    assert len(wins) == 7 and len(wins[0].values) == 2 * n

import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiofuse import nn
from cardiofuse.errors import SingleClass, TooFewRecordings
from cardiofuse.model import ModelConfig, build_cnn
from cardiofuse.preprocess import preprocess_corpus, stack
from cardiofuse.synthetic import SyntheticConfig, synth_corpus, synth_windows
from cardiofuse.train import (
    AdamW,
    AffineInit,
    FoldPlan,
    MetricsReport,
    RunResult,
    TrainConfig,
    adamw_step,
    compute_metrics,
    cross_validate,
    evaluate_records,
    grid_search_affine_init,
    make_fold_plan,
    record_labels,
    roc_auc,
    roc_auc_trapezoid,
    sampler_weights,
    sub_seed,
    train_model,
    weighted_sampler,
    window_accuracy,
)


def _state():
    return {"t": 0, "m": np.zeros(1), "v": np.zeros(1)}


def test_adamw_examples():
    p = np.array([0.3])
    adamw_step(p, np.zeros(1), _state(), lr=1e-3, weight_decay=0.0)
    assert p[0] == 0.3
    p = np.array([2.0])
    adamw_step(p, np.zeros(1), _state(), lr=1e-3, weight_decay=0.1)
    assert p[0] == pytest.approx(2.0 * (1 - 1e-3 * 0.1), rel=1e-12)
    p = np.array([1.0])
    adamw_step(p, np.ones(1), _state(), lr=1e-3, weight_decay=0.0)
    assert p[0] == pytest.approx(1 - 1e-3, rel=1e-6)


def test_adamw_matches_hand_rolled_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = rng.standard_normal(3)
    ref = p.copy()
    st_ = {"t": 0, "m": np.zeros(3), "v": np.zeros(3)}
    m = v = np.zeros(3)
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 1e-2
    for t, g in enumerate(grads, 1):
        adamw_step(p, g, st_, lr, b1, b2, eps, wd)
        ref = ref - lr * wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adamw_optimizer_skips_missing_grads():
    opt = AdamW(TrainConfig(weight_decay=0.0))
    a, b = np.ones(2), np.ones(2)
    opt.step({"a": a, "b": b}, {"a": np.ones(2)})
    assert np.all(a < 1) and np.all(b == 1)


def test_cross_entropy_examples():
    loss, _ = nn.cross_entropy(np.zeros((3, 2)), np.array([0, 1, 1]))
    assert loss == pytest.approx(np.log(2))
    loss, _ = nn.cross_entropy(np.array([[30.0, -30.0]]), np.array([0]))
    assert loss < 1e-20


def test_sampler_weights_imbalanced_counts():
    labels = [0] * 117 + [1] * 288
    w = sampler_weights(labels)
    assert w[0] / w[-1] == pytest.approx(288 / 117)
    assert w[:117].sum() == pytest.approx(0.5) and w[117:].sum() == pytest.approx(0.5)
    assert np.allclose(sampler_weights([0, 1, 0, 1]), 0.25)


def test_sampler_balances_classes():
    labels = np.array([0] * 117 + [1] * 288)
    draws = list(itertools.islice(weighted_sampler(labels, seed=11), 10_000))
    frac = labels[draws].mean()
    assert abs(frac - 0.5) <= 0.02
    assert draws == list(itertools.islice(weighted_sampler(labels, seed=11), 10_000))


def test_sampler_single_class():
    with pytest.raises(SingleClass):
        next(weighted_sampler([1, 1, 1], seed=0))


def test_sub_seed_is_stable_and_distinct():
    assert sub_seed(0, "a", 1) == sub_seed(0, "a", 1)
    assert len({sub_seed(0, "a"), sub_seed(0, "b"), sub_seed(1, "a")}) == 3


def test_zero_epochs_leaves_model_unchanged(toy_windows):
    m = build_cnn(seed=0)
    before = {k: v.copy() for k, v in m.state().items()}
    res = train_model(toy_windows, TrainConfig(), m, epochs=0)
    assert res.loss_history == []
    assert all(np.array_equal(before[k], v) for k, v in m.state().items())


def test_training_is_deterministic(toy_windows):
    cfg = TrainConfig(epochs=2, seed=4)
    a = train_model(toy_windows, cfg, build_cnn(seed=1)).loss_history
    b = train_model(toy_windows, cfg, build_cnn(seed=1)).loss_history
    assert a == b and len(a) == 2


def test_synthetic_separable_training_reaches_095():
    windows = synth_windows(128, seed=1)
    m = build_cnn(seed=0)
    res = train_model(windows, TrainConfig(epochs=30, seed=0), m)
    x, y = stack(windows)
    assert window_accuracy(m, x, y) >= 0.95
    assert res.loss_history[-1] < res.loss_history[0]


def test_grid_identity_and_ties(toy_windows):
    ident = AffineInit()
    assert grid_search_affine_init(toy_windows, [ident]) is ident
    a, b = AffineInit(2.0, 0, 2.0, 0), AffineInit(2.0, 0, 2.0, 0)
    chosen = grid_search_affine_init(toy_windows, [a, b], budget=1, cfg=TrainConfig(batch_size=32))
    assert chosen is a
    with pytest.raises(ValueError):
        grid_search_affine_init(toy_windows, [])


def test_grid_prefers_signal_modality():
    cfg = SyntheticConfig(min_duration_s=9, max_duration_s=10, pcg_noise_only=True)
    windows = preprocess_corpus(synth_corpus(12, seed=3, cfg=cfg))
    grid = [AffineInit(se, 0, sp, 0) for se, sp in itertools.product((0.5, 2.0), repeat=2)]
    best = grid_search_affine_init(windows, grid, budget=3, seed=0)
    assert best.scale_pcg <= best.scale_ecg


def test_fold_partition_property():
    labels = {f"r{i:02d}": i % 2 for i in range(10)}
    plan = make_fold_plan(labels, k=5, repeats=3, seed=0)
    for a in plan.assignments:
        assert set(a) == set(labels)
        counts = Counter(a.values())
        assert sorted(counts) == list(range(5)) and set(counts.values()) == {2}
        for f in range(5):  # stratified: one recording of each class per fold
            assert sorted(labels[r] for r, g in a.items() if g == f) == [0, 1]


def test_fold_repeats_differ_and_reproduce():
    labels = {f"r{i:02d}": i % 2 for i in range(20)}
    plan = make_fold_plan(labels, k=5, repeats=10, seed=0)
    distinct = {tuple(sorted(a.items())) for a in plan.assignments}
    assert len(distinct) == 10
    assert make_fold_plan(labels, 5, 10, seed=1).assignments != plan.assignments
    assert make_fold_plan(labels, 5, 10, seed=0).assignments == plan.assignments
    assert FoldPlan.from_text(plan.to_text()) == plan


def test_fold_plan_needs_k_per_class():
    with pytest.raises(TooFewRecordings):
        make_fold_plan({"a": 0, "b": 0, "c": 1}, k=2)


def test_metric_examples():
    m = compute_metrics(tp=1, fp=0, tn=1, fn=0)
    assert (m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1) == (1, 1, 1, 1, 1)
    m = compute_metrics(tp=8, fp=3, tn=7, fn=2)
    assert m.sensitivity == 0.8 and m.specificity == 0.7 and m.accuracy == 0.75
    assert m.precision == pytest.approx(8 / 11)
    assert m.f1 == pytest.approx(2 * m.precision * m.sensitivity / (m.precision + m.sensitivity))
    assert compute_metrics(tp=0, fp=0, tn=5, fn=2).precision is None
    assert m.auc is None


def _pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    # one winning pair and one losing pair out of two: (1 + 0) / 2
    assert roc_auc([0.9, 0.4, 0.5], [1, 1, 0]) == 0.5 == _pairwise_auc([0.9, 0.4, 0.5], [1, 1, 0])
    assert roc_auc([0.9, 0.5, 0.5], [1, 1, 0]) == 0.75  # a tie counts half
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 8).map(lambda v: v / 8), st.booleans()), min_size=2, max_size=40))
def test_auc_two_paths_and_brute_force(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    a = roc_auc(scores, labels)
    assert abs(a - roc_auc_trapezoid(scores, labels)) < 1e-9
    assert abs(a - _pairwise_auc(scores, labels)) < 1e-12


def _report():
    from cardiofuse.train import Metrics

    runs = [RunResult(0, 0, Metrics(1.0, 1.0, 1.0, 1.0, 1.0, 1.0), 10, 2),
            RunResult(0, 1, Metrics(0.5, 0.0, 1.0, None, 0.0, 0.5), 10, 2)]
    return MetricsReport(runs)


def test_report_aggregation():
    r = _report()
    assert r.mean("accuracy") == 0.75 and r.std("accuracy") == 0.25
    assert r.mean("precision") == 1.0 and r.std("precision") == 0.0  # absent values are skipped
    lines = r.to_csv().splitlines()
    assert lines[0].startswith("run,repeat,fold,accuracy")
    assert lines[-2].startswith("mean,,,0.750000") and lines[-1].startswith("std,,,0.250000")
    assert ",,0.000000" in lines[2]  # absent precision is an empty cell
    kv = dict(ln.split("=") for ln in r.to_kv().splitlines())
    assert kv["runs"] == "2" and kv["accuracy_mean"] == "0.750000"
    assert "0.7500 +- 0.2500" in r.table_row()


def test_evaluate_records_uses_majority_and_mean_probability(short_corpus_windows):
    m = build_cnn(seed=0)
    m.net["classifier"].params["weight"][:] = 0
    m.net["classifier"].params["bias"][:] = [0.0, 1.0]  # always abnormal
    metrics, decisions = evaluate_records(m, short_corpus_windows)
    assert set(decisions.values()) == {1}
    assert metrics.sensitivity == 1.0 and metrics.specificity == 0.0
    assert metrics.auc == 0.5  # every recording ties


def test_cross_validate_small_run(short_corpus_windows):
    labels = record_labels(short_corpus_windows)
    plan = make_fold_plan(labels, k=3, repeats=1, seed=0)
    cfg = TrainConfig(epochs=1, affine_grid=None, seed=0)
    rep = cross_validate(short_corpus_windows, plan, cfg)
    assert len(rep.runs) == 3
    assert sum(r.n_test_records for r in rep.runs) == len(labels)
    assert rep.quantized is None
    assert rep.to_csv() == cross_validate(short_corpus_windows, plan, cfg).to_csv()


def test_cross_validate_rejects_incomplete_plan(short_corpus_windows):
    with pytest.raises(TooFewRecordings):
        cross_validate(short_corpus_windows, FoldPlan(2, [{"s0001": 0}]), TrainConfig(epochs=0))


def test_train_config_round_trip():
    cfg = TrainConfig(epochs=7, lr=5e-4, affine_grid=None, qat_epochs=3)
    kv = dict(ln.split("=", 1) for ln in cfg.to_text().splitlines() if "=" in ln)
    assert TrainConfig.from_mapping(kv) == cfg
    assert ModelConfig().kind == "cnn"

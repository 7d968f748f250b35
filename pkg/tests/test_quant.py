import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiofuse import nn
from cardiofuse.errors import NoData, NotCalibrated
from cardiofuse.model import BottleneckSpec, ModelConfig, build_cnn, count_params
from cardiofuse.preprocess import stack
from cardiofuse.quant import (
    QMAX,
    QMIN,
    FakeQuant,
    QConv,
    QuantParams,
    accumulator_audit,
    affine_params,
    calibrate_activations,
    dequantize,
    fake_quant_forward,
    fake_quant_layers,
    fixed_point,
    fixed_point_error,
    fold_batchnorm,
    int8_forward,
    int8_logits,
    load_quant_weights,
    prepare_qat,
    quantize_model,
    quantize_tensor,
    requantize,
    round_half_away,
    save_quant_weights,
    set_quantization,
    symmetric_params,
)
from cardiofuse.train import TrainConfig, train_model
from conftest import randomize_bn

TINY = ModelConfig(per_modality_len=16, stem_channels=4, target_width=None,
                   blocks=(BottleneckSpec(4, 4, 4, 3, "relu"), BottleneckSpec(4, 8, 4, 3, "hardswish")))


def _calibrated(cfg=ModelConfig(), seed=0, n=64):
    m = randomize_bn(build_cnn(cfg, seed), seed)
    x = np.random.default_rng(seed).standard_normal((n, cfg.input_width)).astype(np.float32)
    qat = prepare_qat(m)
    calibrate_activations(qat, x)
    return m, qat, x


@pytest.fixture(scope="module")
def trained_qat(toy_windows):
    m = build_cnn(seed=0)
    train_model(toy_windows, TrainConfig(epochs=30), m)
    qat = prepare_qat(m)
    x, y = stack(toy_windows)
    calibrate_activations(qat, x)
    train_model((x, y), TrainConfig(epochs=3, lr=1e-4), qat)
    return m, qat, quantize_model(qat), x, y


# ------------------------------------------------------------ primitives

def test_quantize_examples():
    sym = QuantParams(0.1, 0, "symmetric_weight")
    assert quantize_tensor(0.0, sym) == 0
    assert quantize_tensor([100.0, -100.0], sym).tolist() == [127, -128]
    half = QuantParams(0.25, 0, "symmetric_weight")  # exact binary halves
    assert quantize_tensor([0.125, -0.125, 0.375, -0.375], half).tolist() == [1, -1, 2, -2]
    assert round_half_away([0.5, -0.5, 1.5, -2.5]).tolist() == [1, -1, 2, -3]
    with pytest.raises(ValueError):
        QuantParams(0.1, 3, "symmetric_weight")
    with pytest.raises(ValueError):
        QuantParams(0.0)


@given(st.floats(1e-4, 10), st.integers(QMIN, QMAX), st.lists(st.floats(-1, 1), min_size=1, max_size=50))
def test_round_trip_error_bound(scale, zp, unit):
    q = QuantParams(scale, zp)
    x = q.real_min + (np.array(unit) + 1) / 2 * (q.real_max - q.real_min)  # inside the representable range
    err = np.abs(dequantize(quantize_tensor(x, q), q) - x)
    assert np.all(err <= scale / 2 * (1 + 1e-9))


@given(st.floats(1e-4, 10), st.integers(QMIN, QMAX), st.lists(st.integers(QMIN, QMAX), min_size=1, max_size=50))
def test_idempotent_on_grid(scale, zp, codes):
    q = QuantParams(scale, zp)
    v = np.array(codes, dtype=np.int8)
    once = quantize_tensor(dequantize(v, q), q)
    assert np.array_equal(once, v)
    assert np.array_equal(quantize_tensor(dequantize(once, q), q), once)


def test_symmetric_weight_params():
    w = np.array([-0.5, 0.25, 1.27])
    q = symmetric_params(w)
    assert q.zero_point == 0 and q.scale == pytest.approx(0.01, rel=1e-6)
    assert np.all(np.abs(dequantize(quantize_tensor(w, q), q) - w) <= q.scale / 2)


def test_affine_params_examples():
    q = affine_params(-1.0, 1.0)
    assert q.scale == pytest.approx(2 / 255, rel=1e-6)
    assert abs(dequantize(quantize_tensor(0.0, q), q)) == 0  # zero is exact
    c = affine_params(0.7, 0.7)
    assert np.isfinite(c.scale) and c.scale > 0
    assert c.real_min <= 0.7 <= c.real_max


@given(st.floats(1e-6, 1e3))
def test_fixed_point_error(m):
    m0, shift = fixed_point(m)
    assert 2**30 <= m0 < 2**31
    assert fixed_point_error(m) < 2**-24


def test_requantize_rounding():
    assert requantize(np.array([3, -3, 5]), 0.5).tolist() == [2, -2, 3]
    acc = np.random.default_rng(0).integers(-2**24, 2**24, 1000)
    m = 0.0123
    np.testing.assert_array_equal(requantize(acc, m), round_half_away(acc * m))


# ------------------------------------------------------------ observers

def test_ema_fixed_point():
    fq = FakeQuant()
    batch = np.array([-2.0, 0.5, 3.0])
    for _ in range(200):
        fq.forward(batch, training=True)
    assert fq.min_val == pytest.approx(-2.0) and fq.max_val == pytest.approx(3.0)
    fq.forward(np.array([-10.0, 10.0]), training=True)
    assert fq.max_val == pytest.approx(0.99 * 3.0 + 0.01 * 10.0)


def test_ste_gradient():
    fq = FakeQuant()
    fq.forward(np.array([-1.0, 1.0]), training=True)
    x = np.array([0.3, -0.2, 5.0, -5.0])
    fq.forward(x)
    g = fq.backward(np.array([1.5, -2.0, 3.0, 4.0]))
    assert g.tolist() == [1.5, -2.0, 0.0, 0.0]


def test_uncalibrated_errors():
    qat = prepare_qat(build_cnn(seed=0))
    with pytest.raises(NotCalibrated):
        quantize_model(qat)
    with pytest.raises(NoData):
        calibrate_activations(qat, np.zeros((0, 256)))


# ------------------------------------------------------------ fake-quant model

def test_fold_batchnorm_preserves_function():
    m = randomize_bn(build_cnn(seed=3).astype(np.float64), 3)
    x = np.random.default_rng(0).standard_normal((4, 256))
    folded = fold_batchnorm(m)
    np.testing.assert_allclose(folded.predict_proba(x), m.predict_proba(x), atol=1e-12)
    assert count_params(folded) < count_params(m)


def test_disabled_fake_quant_is_float_forward():
    m, qat, x = _calibrated()
    set_quantization(qat, False)
    folded = fold_batchnorm(m)
    assert np.array_equal(fake_quant_forward(qat, x), folded.predict_proba(x))
    set_quantization(qat, True)
    assert not np.array_equal(fake_quant_forward(qat, x), folded.predict_proba(x))
    assert all(fq.enabled for fq in fake_quant_layers(qat))


def test_qat_weights_within_half_scale(trained_qat):
    _, qat, qm, _, _ = trained_qat
    convs = [layer for _, layer in qat.named_layers() if isinstance(layer, (nn.Conv1d, nn.Linear))]
    qconvs = [op for _, op in qm.named_ops() if isinstance(op, QConv)]
    assert len(convs) == len(qconvs)
    for layer, op in zip(convs, qconvs):
        assert op.weight.dtype == np.int8
        assert op.w_q.zero_point == 0
        err = np.abs(dequantize(op.weight, op.w_q) - layer.params["weight"])
        assert err.max() <= op.w_q.scale / 2 * (1 + 1e-6)


def test_qat_reaches_090_train_accuracy(trained_qat):
    _, qat, _, x, y = trained_qat
    acc = (fake_quant_forward(qat, x).argmax(1) == y).mean()
    assert acc >= 0.90


# ------------------------------------------------------------ int8 path

def test_int8_decisions_match_fake_quant(trained_qat):
    _, qat, qm, x, _ = trained_qat
    a = int8_forward(qm, x).argmax(1)
    b = fake_quant_forward(qat, x).argmax(1)
    assert (a == b).mean() >= 0.99


@pytest.mark.parametrize("seed", range(6))
def test_tiny_model_logits_within_one_step(seed):
    _, qat, x = _calibrated(TINY, seed)
    qm = quantize_model(qat)
    steps = np.abs(int8_logits(qm, x) - qat.net.forward(qat._prepare(x), False)) / qm.output_q.scale
    assert steps.max() <= 1.0


def test_int8_conv_matches_dequantized_float_conv():
    rng = np.random.default_rng(5)
    for _ in range(50):
        cin, cout, k = rng.integers(1, 5), rng.integers(1, 5), int(rng.choice([1, 3, 5]))
        in_q = affine_params(-rng.uniform(0.5, 2), rng.uniform(0.5, 2))
        out_q = affine_params(-rng.uniform(2, 8), rng.uniform(2, 8))
        w = rng.integers(-127, 128, (cout, cin, k)).astype(np.int8)
        w_q = QuantParams(float(rng.uniform(0.001, 0.05)), 0, "symmetric_weight")
        bias = rng.integers(-500, 500, cout).astype(np.int32)
        op = QConv(w, bias, w_q, in_q, out_q, padding=k // 2)
        x = rng.integers(QMIN, QMAX + 1, (2, cin, 9)).astype(np.int32)
        real = nn.conv1d(dequantize(x, in_q), dequantize(w, w_q), bias * in_q.scale * w_q.scale, 1, k // 2)
        expect = np.clip(real / out_q.scale + out_q.zero_point, QMIN, QMAX)
        assert np.abs(op.run(x) - expect).max() <= 1.0


def test_zero_model_gives_half_half():
    _, _, x = _calibrated(TINY)
    _, qat, _ = _calibrated(TINY)
    qm = quantize_model(qat)
    for _, op in qm.named_ops():
        if isinstance(op, QConv):
            op.weight[:] = 0
            op.bias[:] = 0
    np.testing.assert_allclose(int8_forward(qm, np.zeros(32)), [0.5, 0.5])


def test_accumulator_audit_fits_int32(trained_qat):
    static = accumulator_audit(ModelConfig())
    assert max(static.values()) < 2**31
    assert static["block4.project.conv"] == 96 * 255 * 128
    assert max(accumulator_audit(trained_qat[2]).values()) < 2**31


def test_quant_weight_file_round_trip(trained_qat):
    _, _, qm, x, _ = trained_qat
    data = save_quant_weights(qm)
    back = load_quant_weights(data, qm.config)
    assert save_quant_weights(back) == data
    assert np.array_equal(back.logits_int8(x), qm.logits_int8(x))
    sink = io.BytesIO()
    save_quant_weights(qm, sink)
    assert sink.getvalue() == data

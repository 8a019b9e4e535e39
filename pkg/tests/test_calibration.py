import numpy as np
import pytest

from protoatlas.calibration import (Calibrator, apply_calibrator,
                                    expected_calibration_error, fit,
                                    fit_temperature, fit_vector, nll, softmax)


def calibrated_logits(rng, n=4000, c=5, alpha=0.7):
    """Logits whose softmax is the true label distribution."""
    p = rng.dirichlet([alpha] * c, size=n)
    labels = np.array([rng.choice(c, p=row) for row in p])
    return np.log(p), labels


def test_apply_identity_cases():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(20, 4))
    plain = softmax(logits)
    assert np.allclose(apply_calibrator(Calibrator("temperature", temperature=1.0), logits), plain)
    vec = Calibrator("vector", scale=np.ones(4), bias=np.zeros(4))
    assert np.allclose(apply_calibrator(vec, logits), plain)
    assert np.allclose(apply_calibrator(Calibrator("none"), logits).sum(axis=1), 1.0, atol=1e-9)


def test_apply_high_temperature_flattens():
    logits = np.array([[5.0, 1.0, -2.0]])
    probs = apply_calibrator(Calibrator("temperature", temperature=1e6), logits)
    assert probs.max() == pytest.approx(1.0 / 3.0, abs=1e-5)


def test_apply_low_temperature_sharpens():
    logits = np.array([[2.0, 0.0]])
    base = apply_calibrator(Calibrator("temperature", temperature=1.0), logits)
    sharp = apply_calibrator(Calibrator("temperature", temperature=0.5), logits)
    assert sharp.max() > base.max()
    # T = 0.5 doubles the gap: softmax(4, 0)
    assert sharp[0, 0] == pytest.approx(np.exp(4) / (np.exp(4) + 1), rel=1e-9)


def test_apply_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        apply_calibrator(Calibrator("none"), np.array([[np.inf, 0.0]]))


def test_temperature_argmax_invariance():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1000, 6)) * rng.uniform(0.5, 5.0, size=(1000, 1))
    for t in (0.25, 1.0, 3.0, 10.0):
        probs = apply_calibrator(Calibrator("temperature", temperature=t), logits)
        assert np.array_equal(probs.argmax(axis=1), logits.argmax(axis=1))


def test_fit_recovers_unit_temperature():
    rng = np.random.default_rng(2)
    logits, labels = calibrated_logits(rng)
    cal = fit_temperature(logits, labels)
    assert cal.temperature == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("true_t", [0.5, 2.0, 4.0])
def test_fit_recovers_scaled_temperature(true_t):
    rng = np.random.default_rng(3)
    logits, labels = calibrated_logits(rng)
    cal = fit_temperature(logits * true_t, labels)
    assert cal.temperature == pytest.approx(true_t, abs=0.1)


def test_vector_never_worse_than_temperature():
    rng = np.random.default_rng(4)
    for seed in range(5):
        r = np.random.default_rng(seed)
        logits, labels = calibrated_logits(r, n=800, c=4)
        skewed = logits * r.uniform(0.5, 3.0, size=4) + r.normal(size=4)
        temp = fit_temperature(skewed, labels)
        vec = fit_vector(skewed, labels)
        assert nll(vec, skewed, labels) <= nll(temp, skewed, labels) + 1e-6


def test_fit_degenerate_validation_set():
    logits = np.zeros((10, 3))
    labels = np.zeros(10, dtype=int)
    with pytest.raises(ValueError, match="single class"):
        fit("temperature", logits, labels)


def test_abstention_monotone_in_temperature():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(500, 4)) * 4.0
    rates = []
    for t in (0.5, 1.0, 2.0, 4.0, 8.0):
        probs = apply_calibrator(Calibrator("temperature", temperature=t), logits)
        rates.append(float((probs.max(axis=1) < 0.9).mean()))
    assert all(a <= b + 1e-12 for a, b in zip(rates, rates[1:]))


def test_fit_reduces_nll_on_miscalibrated_logits():
    rng = np.random.default_rng(6)
    logits, labels = calibrated_logits(rng, n=1500)
    hot = logits * 3.0  # overconfident
    before = nll(Calibrator("none"), hot, labels)
    cal = fit("temperature", hot, labels)
    assert nll(cal, hot, labels) < before
    assert expected_calibration_error(apply_calibrator(cal, hot), labels) <= \
        expected_calibration_error(apply_calibrator(Calibrator("none"), hot), labels) + 1e-9


def test_calibrator_serialization_roundtrip():
    vec = Calibrator("vector", scale=np.array([0.5, 2.0]), bias=np.array([0.1, -0.1]))
    again = Calibrator.from_dict(vec.to_dict())
    assert again.kind == "vector"
    assert np.allclose(again.scale, vec.scale)
    assert np.allclose(again.bias, vec.bias)
    temp = Calibrator.from_dict(Calibrator("temperature", temperature=1.7).to_dict())
    assert temp.temperature == pytest.approx(1.7)
    with pytest.raises(ValueError):
        Calibrator("temperature", temperature=-1.0)
    with pytest.raises(ValueError):
        Calibrator("vector")

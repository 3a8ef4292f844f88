import numpy as np
import pytest
from hypothesis import given, strategies as st

from clearlab.data import Dataset, LabeledExample, Vocab, split
from clearlab.noise import (NoiseError, NoiseSpec, apply_instance_noise, apply_matrix_noise,
                            build_asymmetric, build_symmetric, calibrate_scale, check_transition,
                            corrupt, flip_probabilities, margin_noise)


def uniform_labels(n=10_000, C=5, seed=0, split_name="train"):
    y = np.random.default_rng(seed).integers(0, C, n)
    exs = [LabeledExample(i, (4,), int(v), int(v)) for i, v in enumerate(y)]
    return Dataset(exs, Vocab(["a"]), C, split_name)


def test_symmetric_matrix():
    T = build_symmetric(5, 0.6)
    np.testing.assert_allclose(np.diag(T), 0.4)
    np.testing.assert_allclose(T[~np.eye(5, dtype=bool)], 0.15)
    np.testing.assert_array_equal(build_symmetric(5, 0.0), np.eye(5))
    with pytest.raises(NoiseError):
        build_symmetric(5, 0.8)


def test_asymmetric_matrix():
    T = build_asymmetric(5, 0.4)
    for i in range(5):
        assert T[i, i] == pytest.approx(0.6) and T[i, (i + 1) % 5] == pytest.approx(0.4)
        assert (T[i] > 0).sum() == 2
    np.testing.assert_array_equal(build_asymmetric(5, 0.0), np.eye(5))
    with pytest.raises(NoiseError):
        build_asymmetric(5, 1.0)


@given(st.integers(2, 12), st.floats(0, 0.999))
def test_row_stochastic(C, frac):
    check_transition(build_symmetric(C, frac * (C - 1) / C))
    check_transition(build_asymmetric(C, frac))


@pytest.mark.parametrize("rate", [0.2, 0.4, 0.6])
def test_symmetric_empirical_rate(rate):
    ds = apply_matrix_noise(uniform_labels(), build_symmetric(5, rate), seed=1)
    assert ds.corrupted.mean() == pytest.approx(rate, abs=0.015)
    assert (ds.true == uniform_labels().true).all()


def test_asymmetric_flips_to_successor_only():
    ds = apply_matrix_noise(uniform_labels(), build_asymmetric(5, 0.4), seed=2)
    flipped = ds.corrupted
    np.testing.assert_array_equal(ds.given[flipped], (ds.true[flipped] + 1) % 5)


def test_identity_and_determinism():
    ds = uniform_labels(500)
    assert not apply_matrix_noise(ds, np.eye(5)).corrupted.any()
    a = apply_matrix_noise(ds, build_symmetric(5, 0.4), seed=9)
    b = apply_matrix_noise(ds, build_symmetric(5, 0.4), seed=9)
    assert a == b


def test_test_split_refused():
    with pytest.raises(NoiseError, match="test"):
        corrupt(uniform_labels(100, split_name="test"), NoiseSpec("symmetric", 0.2))
    parts = split(uniform_labels(100), (0.8, 0.2), names=("train", "test"))
    with pytest.raises(NoiseError):
        apply_matrix_noise(parts[1], build_symmetric(5, 0.2))


def test_margin_formula():
    u, s, tau = margin_noise(np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.2, 0.7, 0.1]]))
    np.testing.assert_allclose(tau, [0.5, 0.0, 0.5 - 0.5 * 0.5 ** 2])
    assert u[2] == 1 and s[2] == 0


def test_calibration_hits_target():
    tau = np.random.default_rng(0).uniform(0, 0.5, 5000)
    for target in (0.1, 0.2, 0.4):
        c = calibrate_scale(tau, target)
        assert np.minimum(c * tau, 1).mean() == pytest.approx(target, abs=0.005)
    with pytest.raises(NoiseError, match="max achievable"):
        calibrate_scale(np.r_[np.zeros(50), np.full(50, 0.3)], 0.6)


@given(st.integers(0, 1000))
def test_flip_probability_non_increasing_in_margin(seed):
    probs = np.random.default_rng(seed).dirichlet(np.ones(5) * 0.7, size=300)
    flip, _, _ = flip_probabilities(probs, probs.argmax(axis=1), 0.1)
    top2 = np.sort(probs, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    order = np.argsort(margin)
    assert (np.diff(flip[order]) <= 1e-12).all()


@pytest.mark.parametrize("rate", [0.1, 0.2, 0.4])
def test_instance_noise_rate_and_destination(rate):
    ds = uniform_labels()
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(5), size=len(ds))
    out = apply_instance_noise(ds, probs, rate, seed=5)
    assert out.corrupted.mean() == pytest.approx(rate, abs=0.015)
    u, s, _ = margin_noise(probs)
    dest = np.where(s == ds.true, u, s)
    np.testing.assert_array_equal(out.given[out.corrupted], dest[out.corrupted])


def test_noise_spec_validation():
    with pytest.raises(NoiseError):
        NoiseSpec("pairflip", 0.2)
    with pytest.raises(NoiseError):
        NoiseSpec("symmetric", 1.2)
    assert NoiseSpec("InstanceDependent").kind == "instance"
    with pytest.raises(NoiseError, match="probe"):
        corrupt(uniform_labels(100), NoiseSpec("instance", 0.2))

import numpy as np
import pytest

from pinvnet import linalg
from pinvnet.data import AttributeStats, SyntheticSpec, attribute_stats, generate
from pinvnet.nlbp import (NlbpConfig, adaptive_lambda, attribute_delta, covariance_adjust, covariance_target,
                          dynamic_target, nlbp_exact, nlbp_gentle, nlbp_naive, resolve_pinv)
from pinvnet.nn import Rng

from conftest import perturb_outputs, small_model


@pytest.fixture
def m():
    return perturb_outputs(small_model(7, dims=(6, 3), input_dim=8, mixer_scale=0.5), Rng(8), 0.4)


def pairs(m, n=200, seed=0):
    r = Rng(seed)
    return r.normal(size=(n, m.input_dim)), r.normal(size=(n, m.output_dim))


@pytest.mark.parametrize("variant", ["learned_r", "natural_closed_form", "constant", "random_r"])
def test_exact_nlbp_reaches_target_in_every_mode(m, variant):
    mm, mode = resolve_pinv(m, variant, Rng(1))
    x, y = pairs(m)
    z = Rng(2).normal(size=m.null_dim) if mode == "constant" else None
    xp = nlbp_exact(mm, x, y, mode, z)
    assert np.abs(mm.forward(xp) - y).max() <= 1e-7
    # fixed point when the target is already met
    assert np.abs(nlbp_exact(mm, x, mm.forward(x), mode, z) - x).max() <= 1e-8


def test_natural_mode_keeps_null_component(m):
    x, y = pairs(m)
    xp = nlbp_exact(m, x, y)
    assert np.abs(m.null(xp) - m.null(x)).max() <= 1e-8
    # random auxiliary nets do move the null component
    mm, mode = resolve_pinv(m, "random_r", Rng(1))
    assert np.abs(m.null(nlbp_exact(mm, x, y, mode)) - m.null(x)).max() > 1e-3


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_gentle_interpolates_range_and_keeps_null(m, lam):
    x, y = pairs(m)
    xp = nlbp_gentle(m, x, y, lam)
    assert np.abs(m.forward(xp) - ((1 - lam) * m.forward(x) + lam * y)).max() <= 1e-7
    assert np.abs(m.null(xp) - m.null(x)).max() <= 1e-8


def test_gentle_endpoints_and_per_sample_scale(m):
    x, y = pairs(m, 20)
    assert np.abs(nlbp_gentle(m, x, y, 0.0) - x).max() <= 1e-9
    assert np.abs(nlbp_gentle(m, x, y, 1.0) - nlbp_exact(m, x, y)).max() <= 1e-9
    lam = np.linspace(0, 1, 20)
    xp = nlbp_gentle(m, x, y, lam)
    assert np.allclose(xp[7], nlbp_gentle(m, x[7], y[7], lam[7]), atol=1e-12)
    with pytest.raises(ValueError):
        nlbp_gentle(m, x, y, 1.5)


def test_linear_model_reduces_to_linear_back_projection(m):
    lin = m.linearized()
    a = lin.induced_matrix()
    x, y = pairs(m, 100, 3)
    assert np.abs(nlbp_exact(lin, x, y) - linalg.linear_back_project(x, y, a)).max() <= 1e-8


def test_naive_update(m):
    slicing = m.linearized(slicing=True)
    for b in slicing.blocks:
        b.r_net.weights[-1][:] = 0.0
        b.r_net.biases[-1][:] = 0.0
    x, y = pairs(m, 50, 4)
    assert np.allclose(nlbp_naive(slicing, x, y, "learned"), nlbp_exact(slicing, x, y, "learned"), atol=1e-12)
    resid = np.abs(m.forward(nlbp_naive(m, x, y)) - y).max()
    assert resid > 1e-2


def test_resolve_pinv():
    m = small_model(0)
    assert resolve_pinv(m, "natural_closed_form") == (m, "natural")
    assert resolve_pinv(m, "learned_r") == (m, "learned")
    with pytest.raises(ValueError):
        resolve_pinv(m, "min_norm_r")
    with pytest.raises(ValueError):
        resolve_pinv(m, "bogus")
    other = small_model(1)
    assert resolve_pinv(m, "min_norm_r", min_norm_model=other) == (other, "learned")


def test_config_validation():
    with pytest.raises(ValueError):
        NlbpConfig(lam=1.2)
    with pytest.raises(ValueError):
        NlbpConfig(alpha=0.0)
    with pytest.raises(ValueError):
        NlbpConfig(pinv_mode="x")
    with pytest.raises(ValueError):
        NlbpConfig(delta_space="x")
    with pytest.raises(ValueError):
        NlbpConfig(update="x")


def test_adaptive_lambda():
    assert adaptive_lambda(0.0) == 0.0
    assert adaptive_lambda(1e6) == pytest.approx(0.8)
    assert adaptive_lambda(1.0, 0.8, 1.0) == pytest.approx(0.8 * np.tanh(1.0))
    grid = adaptive_lambda(np.linspace(0, 5, 100))
    assert np.all(np.diff(grid) >= 0) and np.all(grid <= 0.8)
    with pytest.raises(ValueError):
        adaptive_lambda(1.0, 1.5, 1.0)
    with pytest.raises(ValueError):
        adaptive_lambda(1.0, 0.5, 0.0)


def test_attribute_delta_spaces():
    cur, tgt = np.array([[0.0, 1.0]]), np.array([[0.0, 3.0]])
    assert attribute_delta(cur, tgt, 1, "logit")[0] == pytest.approx(2.0)
    p = 1 / (1 + np.exp(-np.array([1.0, 3.0])))
    assert attribute_delta(cur, tgt, 1, "prob")[0] == pytest.approx(p[1] - p[0])


def test_dynamic_target():
    st = AttributeStats(np.zeros(3), np.ones(3), np.eye(3))
    y = np.array([0.3, -1.0, 4.0])
    t = dynamic_target(y, 1, st)
    assert t[1] == 2.0 and np.count_nonzero(t - y) == 1
    y2 = y.copy()
    y2[1] = 2.0
    assert np.array_equal(dynamic_target(y2, 1, st), y2)
    with pytest.raises(IndexError):
        dynamic_target(y, 3, st)


def test_covariance_adjust():
    diag = AttributeStats(np.zeros(3), np.ones(3), np.diag([1.0, 2.0, 3.0]))
    assert np.array_equal(covariance_adjust(0.5, 1, diag), [0.0, 0.5, 0.0])
    coupled = AttributeStats(np.zeros(2), np.ones(2), np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(covariance_adjust(0.7, 0, coupled), [0.7, 0.7])
    with pytest.raises(ValueError):
        covariance_adjust(1.0, 0, AttributeStats(np.zeros(2), np.zeros(2), np.zeros((2, 2))))
    with pytest.raises(IndexError):
        covariance_adjust(1.0, 5, diag)
    y = np.array([[0.0, 0.0]])
    assert np.allclose(covariance_target(y, 0, coupled), [[2.0, 2.0]])


def test_covariance_adjust_matches_regression_slope():
    ds = generate(SyntheticSpec(), 20_000, 3)
    st = attribute_stats(ds)
    lab = ds.labels.astype(float)
    for j in range(4):
        slope = np.polyfit(lab[:, 0], lab[:, j], 1)[0]
        assert covariance_adjust(1.0, 0, st)[j] == pytest.approx(slope, abs=1e-9)

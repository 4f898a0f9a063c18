import numpy as np
import pytest

from pinvnet import linalg
from pinvnet.nn import Rng
from pinvnet.spnn import (CompletionPoint, CouplingMap, CoordinateTestCase, OracleDisagreement, SpnnModel,
                          SurjectiveBlock, coordinate_consistency_check, preimage_oracle)

from conftest import perturb_outputs, small_model


def test_build_dims_and_parameter_naming(image_model):
    m = image_model
    assert (m.input_dim, m.output_dim, m.null_dim) == (16, 2, 14)
    names = list(m.parameters())
    assert all(n.startswith("stage") for n in names)
    assert set(m.forward_parameters()) | set(m.r_parameters()) == set(names)
    assert not set(m.forward_parameters()) & set(m.r_parameters())
    with pytest.raises(ValueError):
        SpnnModel.build(8, [8], Rng(0))


def test_block_rejects_bad_dims():
    with pytest.raises(ValueError):
        SurjectiveBlock.create(4, 4, Rng(0))


@pytest.mark.parametrize("fixture", ["model", "image_model"])
def test_completion_round_trip(fixture, request, rng):
    m = perturb_outputs(request.getfixturevalue(fixture), rng)
    x = rng.normal(size=(50, m.input_dim))
    p = m.completion(x)
    assert np.abs(m.completion_inverse(p) - x).max() < 1e-10
    z = rng.normal(size=(50, m.null_dim))
    y = rng.normal(size=(50, m.output_dim))
    q = m.completion(m.completion_inverse(CompletionPoint(y, z)))
    assert np.abs(q.range - y).max() < 1e-10 and np.abs(q.null - z).max() < 1e-10


@pytest.mark.parametrize("mode", ["learned", "natural", "constant"])
def test_structural_right_inverse(model, rng, mode):
    m = perturb_outputs(model, rng)
    y = rng.normal(size=(200, m.output_dim), scale=2.0)
    z = rng.normal(size=m.null_dim) if mode == "constant" else None
    assert np.abs(m.forward(m.pinv(y, mode, z)) - y).max() < 1e-10


def test_pinv_argument_checks(model):
    with pytest.raises(ValueError):
        model.pinv(np.zeros(model.output_dim), "constant")
    with pytest.raises(ValueError):
        model.pinv(np.zeros(model.output_dim), "bogus")
    with pytest.raises(ValueError):
        model.forward(np.zeros(model.input_dim + 1))


def test_single_vector_and_batch_agree(model, rng):
    x = rng.normal(size=(3, model.input_dim))
    assert np.allclose(model.forward(x[1]), model.forward(x)[1])
    y = model.forward(x)
    assert np.allclose(model.pinv(y[2]), model.pinv(y)[2])


def test_natural_pinv_maps_origin_image_to_origin(model, rng):
    m = perturb_outputs(model, rng)
    assert np.abs(m.pinv(m.forward(np.zeros(m.input_dim)))).max() < 1e-12


def test_linearized_model_matches_svd_pinv(model, rng):
    lin = perturb_outputs(model, rng).linearized()
    a = lin.induced_matrix()
    y = rng.normal(size=(20, lin.output_dim))
    x = rng.normal(size=(4, lin.input_dim))
    assert np.allclose(lin.forward(x), x @ a.T, atol=1e-12)
    assert np.allclose(lin.pinv(y), y @ linalg.pinv(a).T, atol=1e-12)


def test_slicing_model_is_coordinate_selection(model):
    s = model.linearized(slicing=True)
    x = np.arange(8.0)
    assert np.allclose(s.forward(x), x[:3])


def test_random_r_shares_forward_parameters(model, rng):
    other = model.random_r(Rng(9))
    x = rng.normal(size=(5, model.input_dim))
    assert np.array_equal(other.forward(x), model.forward(x))
    y = model.forward(x)
    assert not np.allclose(other.pinv(y, "learned"), model.pinv(y, "learned"))


def test_copy_is_independent(model):
    c = model.copy()
    next(iter(c.parameters().values()))[...] += 1.0
    assert not np.array_equal(c.forward(np.ones(8)), model.forward(np.ones(8)))


def test_forward_backward_matches_finite_differences(image_model, rng):
    m = perturb_outputs(image_model, rng)
    x = rng.normal(size=(3, m.input_dim))
    up = rng.normal(size=(3, m.output_dim))
    y, _, trace = m.forward_trace(x)
    dx, _ = m.forward_backward(trace, up)
    e = np.zeros_like(x)
    e[1, 5] = 1e-6
    num = (np.sum(m.forward(x + e) * up) - np.sum(m.forward(x - e) * up)) / 2e-6
    assert np.isclose(dx[1, 5], num, rtol=1e-6, atol=1e-9)


def test_preimage_oracle_matches_closed_form():
    m = perturb_outputs(small_model(2, dims=(4,), input_dim=6, mixer_scale=0.5), Rng(3))
    y = m.forward(Rng(4).normal(size=(3, 6)))
    for k in range(3):
        found = preimage_oracle(m, y[k], restarts=8, rng=Rng(k))
        assert np.linalg.norm(found - m.pinv(y[k])) < 1e-6


def test_preimage_oracle_limits():
    with pytest.raises(ValueError):
        preimage_oracle(small_model(0, dims=(2,), input_dim=12), np.zeros(2))
    m = small_model(2, dims=(4,), input_dim=6)
    with pytest.raises(OracleDisagreement):
        preimage_oracle(m, m.forward(np.ones(6)), restarts=4, rng=Rng(0), iters=0)


def test_coupling_map_is_bijective_and_fixes_origin():
    phi = CouplingMap.create(4, Rng(0))
    x = Rng(1).normal(size=(10, 4))
    assert np.allclose(phi.inverse(phi(x)), x, atol=1e-12)
    assert np.allclose(phi(np.zeros(4)), 0.0, atol=1e-14)
    ident = CouplingMap.identity(4)
    assert np.allclose(ident(x), x)


def test_coordinate_consistency():
    for k in range(10):
        r = Rng(k)
        tc = CoordinateTestCase.random(r, 2, 4)
        assert coordinate_consistency_check(tc, r.normal(size=2)) < 1e-9
    # identity coupling: natural pinv is the linear pseudo-inverse
    a = Rng(3).normal(size=(2, 4))
    tc = CoordinateTestCase(CouplingMap.identity(4), a)
    y = np.array([0.5, -1.0])
    assert np.allclose(tc.natural_pinv(y), linalg.pinv(a) @ y)
    with pytest.raises(ValueError):
        CoordinateTestCase(CouplingMap.identity(4), np.ones((2, 4)))

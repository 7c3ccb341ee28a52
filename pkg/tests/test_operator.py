import jax
import numpy as np
import pytest

from idon.networks import Architecture, branch_forward, trunk_eval
from idon.operator import (
    TrunkMatrix,
    assemble_trunk_matrix,
    contract,
    forward_map,
    inverse_map,
    predict_at,
    trunk_jets,
)
from idon.problems import problem_spec

from test_networks import perturbed_params


@pytest.fixture
def model():
    arch = Architecture(dim=6, coord_dim=1, n_blocks=2, trunk_hidden=(12, 12))
    return arch, perturbed_params(arch, 4, scale=0.1)


def test_forward_is_separated_sum(model, rng):
    arch, params = model
    u = rng.standard_normal(6)
    xi = rng.uniform(size=(9, 1))
    b, _ = branch_forward(params["branch"], u, arch)
    t = np.asarray(trunk_eval(params["trunk"], xi))
    expected = [sum(float(b[j]) * t[k, j] for j in range(6)) for k in range(9)]
    ym = assemble_trunk_matrix(params["trunk"], xi)
    assert np.allclose(forward_map(params, arch, u, ym), expected, rtol=1e-13)


def test_forward_map_agrees_with_pointwise_prediction(model, rng):
    arch, params = model
    u = rng.standard_normal((4, 6))
    xi = rng.uniform(size=(9, 1))
    ym = assemble_trunk_matrix(params["trunk"], xi)
    batch = forward_map(params, arch, u, ym)
    for k in range(9):
        single = predict_at(params, arch, u, xi[k : k + 1])[:, 0]
        assert np.allclose(batch[:, k], single, rtol=1e-13, atol=1e-15)


def test_contract_batches(rng):
    y = rng.standard_normal((5, 3))
    b = rng.standard_normal((4, 3))
    assert np.allclose(contract(y, b), b @ y.T)


def test_inverse_recovers_input_from_exact_data(model, rng):
    arch, params = model
    # a strongly perturbed trunk keeps Y well conditioned (cond ~ 1e3)
    params = {"branch": params["branch"], "trunk": perturbed_params(arch, 4, scale=2.0)["trunk"]}
    u = rng.standard_normal((3, 6))
    ym = assemble_trunk_matrix(params["trunk"], np.linspace(0, 1, 30))
    s = forward_map(params, arch, u, ym)
    back = inverse_map(params, arch, s, ym, eps=0.0)
    assert np.allclose(back, u, atol=1e-8)


def test_inverse_then_forward_is_projection(model, rng):
    # forward(inverse(s)) is the ridge projection of s onto the column space of Y
    arch, params = model
    ym = assemble_trunk_matrix(params["trunk"], np.linspace(0, 1, 20))
    s = rng.standard_normal(20)
    eps = 1e-8
    proj = ym.y @ np.linalg.solve(ym.y.T @ ym.y + eps * np.eye(6), ym.y.T @ s)
    again = forward_map(params, arch, inverse_map(params, arch, s, ym, eps), ym)
    assert np.allclose(again, proj, atol=1e-7)


def test_trunk_matrix_validation():
    with pytest.raises(ValueError):
        TrunkMatrix(np.zeros((3, 1)), np.zeros((2, 4)))


def test_assemble_rejects_bad_coords(model):
    _, params = model
    with pytest.raises(ValueError):
        assemble_trunk_matrix(params["trunk"], np.zeros((0, 1)))
    with pytest.raises(ValueError):
        assemble_trunk_matrix(params["trunk"], np.zeros((4, 2)), coord_dim=1)


def test_dimension_mismatch(model):
    arch, params = model
    ym = assemble_trunk_matrix(params["trunk"], np.linspace(0, 1, 5))
    with pytest.raises(ValueError):
        forward_map(params, arch, np.zeros(5), ym)
    with pytest.raises(ValueError):
        inverse_map(params, arch, np.zeros(4), ym, 1e-6)


def test_subset_rows(model):
    _, params = model
    ym = assemble_trunk_matrix(params["trunk"], np.linspace(0, 1, 5))
    sub = ym.subset([0, 3])
    assert np.array_equal(sub.y, ym.y[[0, 3]])


def test_hard_constraint_vanishes_on_boundary(rng):
    p = problem_spec("darcy_features", n_obs=16, n_res=16)
    arch = Architecture(dim=64, coord_dim=2, trunk_hidden=(8,))
    params = perturbed_params(arch, 0, scale=0.1)
    edge = np.array([[0.0, 0.3], [1.0, 0.7], [0.4, 0.0], [0.2, 1.0]])
    s = predict_at(params, arch, rng.uniform(size=64), edge, factor=p.factor)
    assert np.allclose(s, 0.0, atol=1e-15)


def _fd_trunk(trunk, x, direction, factor=None, h=1e-4):
    def f(z):
        t = np.asarray(trunk_eval(trunk, z))
        return t * factor(z)[..., None] if factor is not None else t

    d = np.asarray(direction)
    fp, f0, fm = f(x + h * d), f(x), f(x - h * d)
    return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2


@pytest.mark.parametrize("direction", [(1.0, 0.0), (0.0, 1.0)])
def test_trunk_jets_with_factor_match_fd(rng, direction):
    p = problem_spec("darcy_features", n_obs=16, n_res=16)
    arch = Architecture(dim=4, coord_dim=2, trunk_hidden=(10, 10))
    trunk = perturbed_params(arch, 1, scale=0.2)["trunk"]
    x = rng.uniform(size=(20, 2))
    j = trunk_jets(trunk, x, direction, factor=p.factor)
    d1, d2 = _fd_trunk(trunk, x, direction, factor=p.factor)
    assert np.allclose(j.d1, d1, rtol=1e-6, atol=1e-8)
    assert np.allclose(j.d2, d2, rtol=1e-4, atol=1e-5)

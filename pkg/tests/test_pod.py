import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popinf.pod import (choose_rank, compute_pod, cumulative_energy, lift,
                        project, residual_energy)


def test_rank_one_input(rng):
    u, v = rng.standard_normal(7), rng.standard_normal(5)
    basis = compute_pod(np.outer(u, v), 1)
    np.testing.assert_allclose(np.abs(basis.V[:, 0]),
                               np.abs(u) / np.linalg.norm(u), atol=1e-14)


@pytest.mark.parametrize("method", ["svd", "gram"])
def test_identity_input_orthonormal(method):
    basis = compute_pod(np.eye(6), 4, method=method)
    np.testing.assert_allclose(basis.V.T @ basis.V, np.eye(4), atol=1e-12)


@pytest.mark.parametrize("shape", [(40, 12), (12, 40)])
def test_gram_route_matches_svd(rng, shape):
    X = rng.standard_normal(shape) @ np.diag(2.0**-np.arange(shape[1]))
    a = compute_pod(X, 5, method="svd")
    b = compute_pod(X, 5, method="gram")
    np.testing.assert_allclose(a.V, b.V, atol=1e-8)
    np.testing.assert_allclose(a.singular_values[:5], b.singular_values[:5],
                               rtol=1e-10)


def test_sign_convention(rng):
    basis = compute_pod(rng.standard_normal((20, 8)), 8)
    for col in basis.V.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_rank_out_of_range():
    with pytest.raises(ValueError):
        compute_pod(np.ones((3, 2)), 3)
    with pytest.raises(ValueError):
        compute_pod(np.ones((3, 2)), 0)


def test_residual_energy_examples():
    assert residual_energy([2.0, 1.0], 1) == pytest.approx(0.2)
    assert residual_energy([2.0, 1.0], 2) == 0.0
    with pytest.raises(ValueError):
        residual_energy([], 0)


def test_residual_energy_resolves_tiny_tails():
    assert residual_energy([1.0, 1e-9], 1) == pytest.approx(1e-18, rel=1e-12)


def test_choose_rank_examples():
    assert choose_rank([1.0, 1e-9], 1e-6) == 1
    with pytest.raises(ValueError):
        choose_rank([1.0], 1.0)


def test_choose_rank_zero_spectrum_warns():
    with pytest.warns(RuntimeWarning):
        assert choose_rank([0.0, 0.0, 0.0], 1e-6) == 3


spectra = st.lists(st.floats(0.0, 1e3), min_size=1, max_size=30).map(
    lambda xs: np.sort(np.array(xs))[::-1]).filter(lambda s: s[0] > 0)


@given(spectra)
def test_energy_identity(sigma):
    total = np.sum(sigma**2)
    for r in range(sigma.size + 1):
        lhs = residual_energy(sigma, r) * total + np.sum(sigma[:r]**2)
        assert lhs == pytest.approx(total, rel=1e-10)


@given(spectra)
def test_residual_energy_nonincreasing(sigma):
    values = [residual_energy(sigma, r) for r in range(sigma.size + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0
    np.testing.assert_allclose(1 - cumulative_energy(sigma), values[1:],
                               atol=1e-12)


@given(spectra, st.floats(1e-14, 0.5), st.floats(1e-14, 0.5))
def test_choose_rank_monotone(sigma, e1, e2):
    lo, hi = sorted((e1, e2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert choose_rank(sigma, lo) >= choose_rank(sigma, hi)
        r = choose_rank(sigma, lo)
    assert residual_energy(sigma, r) < lo
    if r > 1:
        assert residual_energy(sigma, r - 1) >= lo


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_project_lift_identities(r, seed):
    rng = np.random.default_rng(seed)
    basis = compute_pod(rng.standard_normal((15, 10)), r)
    np.testing.assert_allclose(basis.V.T @ basis.V, np.eye(r), atol=1e-12)
    x = rng.standard_normal((r, 4))
    np.testing.assert_allclose(project(basis, lift(basis, x)), x, atol=1e-13)
    U = lift(basis, x)
    np.testing.assert_allclose(lift(basis, project(basis, U)), U, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_training_projection_error_equals_tail(r, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 12)) * np.exp(-np.arange(12) / 3)
    basis = compute_pod(X, r)
    err = np.linalg.norm(X - lift(basis, project(basis, X)))
    tail = np.sqrt(np.sum(basis.singular_values[r:]**2))
    assert err == pytest.approx(tail, rel=1e-8)


def test_dimension_mismatch():
    basis = compute_pod(np.eye(4), 2)
    with pytest.raises(ValueError):
        project(basis, np.ones((3, 2)))
    with pytest.raises(ValueError):
        lift(basis, np.ones((3, 2)))


def test_heat_snapshots_projection_bound(heat_training_set):
    X = heat_training_set.concatenated(0)
    sigma = compute_pod(X, 1).singular_values
    r = choose_rank(sigma, 1e-12)
    assert 1 <= r <= min(X.shape)
    basis = compute_pod(X, r)
    err_sq = np.linalg.norm(X - lift(basis, project(basis, X)))**2
    assert err_sq <= np.sum(sigma[r:]**2) * (1 + 1e-6) + 1e-20

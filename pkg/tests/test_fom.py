import numpy as np
import pytest
import scipy.sparse as sp

from popinf.fom import (FhnConfig, HeatConfig, fhn_full_operators,
                        fhn_laplacian, fhn_solve, fhn_structure,
                        heat_full_operators, heat_operators, heat_solve,
                        make_param_grid, screen_sensitive)
from popinf.metrics import relative_l2_error
from popinf.rom import intrusive_rom


# heat -------------------------------------------------------------------------
def single_material_solve(config, k):
    """Reference implicit Euler for u_t = k u_xx, built independently."""
    N = config.N
    h = 1.0 / (N + 1)
    lap = (np.diag(-2 * np.ones(N)) + np.diag(np.ones(N - 1), 1)
           + np.diag(np.ones(N - 1), -1)) / h**2
    t = config.time
    M = np.linalg.inv(np.eye(N) - (t[1] - t[0]) * k * lap)
    U = [config.initial_condition()]
    for _ in range(config.K - 1):
        U.append(M @ U[-1])
    return np.array(U).T


def test_equal_diffusivities_match_single_material():
    config = HeatConfig(N=60, K=40)
    U = heat_solve(config, (0.8, 0.8)).states[0]
    ref = single_material_solve(config, 0.8)
    np.testing.assert_allclose(U, ref, atol=1e-12)


def test_operators_partition_laplacian():
    config = HeatConfig(N=30)
    A1, A2 = heat_operators(config)
    h = 1 / 31
    lap = sp.diags([1, -2, 1], [-1, 0, 1], shape=(30, 30)) / h**2
    assert abs(A1 + A2 - lap).max() < 1e-9
    rows1 = np.nonzero(abs(A1).sum(axis=1))[0]
    assert np.all(config.x[rows1] < config.interface)


@pytest.mark.parametrize("mu", [(0.1, 2.5), (2.0, 0.3), (1.0, 1.0)])
def test_heat_dissipative(mu):
    config = HeatConfig(N=80, K=60)
    U = heat_solve(config, mu).states[0]
    A1, A2 = heat_operators(config)
    # implicit Euler contracts in the norm weighted by 1/diffusivity
    k = np.asarray(((mu[0] * A1 + mu[1] * A2).diagonal()
                    / (A1 + A2).diagonal())).ravel()
    weighted = np.sqrt(np.sum(U**2 / k[:, None], axis=0))
    assert np.all(np.diff(weighted) <= 1e-12 * weighted[:-1])
    norms = np.linalg.norm(U, axis=0)
    assert norms[-1] < norms[0]


def test_exported_operators_regenerate_stepping():
    config = HeatConfig(N=50, K=20)
    mu = (0.6, 1.9)
    U = heat_solve(config, mu).states[0]
    A1, A2 = heat_full_operators(config)["A"]
    dt = config.time[1] - config.time[0]
    # implicit Euler: (U_k - U_{k-1}) / dt = (alpha A1 + beta A2) U_k
    lhs = np.diff(U, axis=1) / dt
    rhs = (mu[0] * A1 + mu[1] * A2) @ U[:, 1:]
    np.testing.assert_allclose(lhs, rhs, atol=1e-8 * np.abs(rhs).max())


def test_paper_scale_snapshot_asymmetric_about_interface():
    config = HeatConfig(N=1000, K=1500)
    k = np.argmin(np.abs(config.time - 0.075))
    x = config.x
    xbar = 2 / 3
    d = np.linspace(0.05, 0.3, 20)

    def mirrored_gap(mu):
        u = heat_solve(config, mu).states[0][:, k]
        return np.max(np.abs(np.interp(xbar - d, x, u)
                             - np.interp(xbar + d, x, u)))

    assert mirrored_gap((0.2, 2.0)) > 0.1
    assert mirrored_gap((2.0, 0.2)) > 0.1


def test_heat_rejects_nonpositive_diffusivity():
    with pytest.raises(ValueError):
        heat_solve(HeatConfig(N=10, K=5), (0.0, 1.0))
    with pytest.raises(ValueError):
        HeatConfig(interface=1.2)


# FitzHugh-Nagumo --------------------------------------------------------------
def test_snapshot_count():
    config = FhnConfig(nx=512)
    assert config.time.size == 400
    assert config.time[1] - config.time[0] == pytest.approx(0.01)


def test_zero_forcing_zero_alpha_stays_zero():
    r = fhn_solve(FhnConfig(nx=32, tf=0.5), (0.0, 0.5, 2.0, 0.02),
                  input_fn=lambda t: 0.0)
    assert r.ok
    assert not np.any(r.states[0]) and not np.any(r.states[1])


def test_zero_forcing_nonzero_alpha_moves():
    r = fhn_solve(FhnConfig(nx=32, tf=0.5), (0.05, 0.5, 2.0, 0.02),
                  input_fn=lambda t: 0.0)
    assert np.all(r.states[1][:, -1] > 0)


def test_ghost_node_flux_second_order():
    # u_x(0) = f, u_x(1) = 0, u_xx = -f - pi^2 cos(pi x)
    errs = []
    f = 0.7
    for nx in (65, 129):
        L, b = fhn_laplacian(nx)
        x = np.linspace(0, 1, nx)
        u = f * (x - x**2 / 2) + np.cos(np.pi * x)
        exact = -f - np.pi**2 * np.cos(np.pi * x)
        errs.append(np.abs(L @ u + b * f - exact).max())
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_limit_cycle_at_small_epsilon():
    r = fhn_solve(FhnConfig(), (0.05, 0.5, 2.0, 0.015))
    assert r.ok
    W = np.vstack(r.states)
    late = np.nonzero(r.time >= 2.0)[0]
    lag = 10
    gaps = [np.linalg.norm(W[:, k + lag] - W[:, k]) / np.linalg.norm(W[:, k])
            for k in late if k + lag < r.time.size]
    assert min(gaps) > 1e-2
    assert np.std(r.states[0][0, late]) > 0.1


@pytest.mark.parametrize("mu", [(0.05, 0.5, 2.0, 0.0275),
                                (0.075, 0.75, 2.0, 0.015)])
def test_grid_refinement_consistency(mu):
    coarse = fhn_solve(FhnConfig(nx=128), mu)
    fine = fhn_solve(FhnConfig(nx=255), mu)
    ref = np.vstack([U[::2] for U in fine.states])
    assert relative_l2_error(ref, np.vstack(coarse.states), coarse.time) < 0.01


def test_intrusive_nonlinear_projection_matches_direct(rng):
    config = FhnConfig(nx=40)
    V1 = np.linalg.qr(rng.standard_normal((40, 4)))[0]
    V2 = np.linalg.qr(rng.standard_normal((40, 3)))[0]
    rom = intrusive_rom(fhn_structure(), fhn_full_operators(config), [V1, V2])
    mu = (0.0, 0.5, 2.0, 0.02)
    ops = rom.assemble_at(mu)[0]
    from popinf.kron import compact_cube, compact_sq
    for _ in range(10):
        u = rng.standard_normal(4)
        x = V1 @ u
        direct = V1.T @ (-x**3 + 1.1 * x**2) / mu[3]
        got = ops.H[(0, 0)] @ compact_sq(u) + ops.G[0] @ compact_cube(u)
        np.testing.assert_allclose(got, direct, atol=1e-10)


def test_intrusive_full_basis_reproduces_fom_rhs(rng):
    config = FhnConfig(nx=24)
    I = np.eye(24)
    rom = intrusive_rom(fhn_structure(), fhn_full_operators(config), [I, I])
    mu = (0.05, 0.5, 2.0, 0.02)
    u1, u2 = rng.standard_normal(24), rng.standard_normal(24)
    t = 0.1
    L, b = fhn_laplacian(24)
    f = -50000 * t**3 * np.exp(-15 * t)
    eps = mu[3]
    du1 = eps * (L @ u1 + b * f) + (-u1**3 + 1.1 * u1**2 - 0.1 * u1 - u2
                                     + mu[0]) / eps
    du2 = mu[1] * u1 - mu[2] * u2 + mu[0]
    got = rom.rhs(mu, t, [u1, u2])
    np.testing.assert_allclose(got[0], du1, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(got[1], du2, rtol=1e-12, atol=1e-12)


# parameter grids --------------------------------------------------------------
def test_singleton_grid():
    assert make_param_grid([[1.0], [2.0]]).tolist() == [[1.0, 2.0]]


def paper_training_ranges():
    return [np.linspace(0.025, 0.075, 6), np.linspace(0.25, 0.75, 6),
            [2.0, 2.5], np.linspace(0.010, 0.040, 7)]


def test_paper_training_grid_size():
    assert len(make_param_grid(paper_training_ranges())) == 504


def test_paper_testing_grid_size():
    full = [np.linspace(0.025, 0.075, 11), np.linspace(0.25, 0.75, 11),
            [2.0, 2.25, 2.5], np.linspace(0.010, 0.040, 31)]
    train = make_param_grid(paper_training_ranges())
    test = make_param_grid(full, exclude=train)
    assert len(test) == 11 * 11 * 3 * 31 - 504 == 10749


def test_grid_order_first_component_slowest():
    pts = make_param_grid([[1, 2], [10, 20, 30]])
    assert pts[:, 0].tolist() == [1, 1, 1, 2, 2, 2]
    assert pts[:3, 1].tolist() == [10, 20, 30]


def test_grid_keep_predicate():
    pts = make_param_grid([[1, 2, 3]], keep=lambda p: p[0] != 2)
    assert pts[:, 0].tolist() == [1, 3]


def test_screen_sensitive_drops_unstable_parameters():
    config = HeatConfig(N=20, K=10)
    fine = HeatConfig(N=20, K=10)

    def perturbed(mu):
        r = heat_solve(fine, mu)
        if mu[0] > 1:
            r.states = [2 * r.states[0]]
        return r

    kept = screen_sensitive([[0.5, 1.0], [1.5, 1.0]],
                            lambda mu: heat_solve(config, mu), perturbed)
    assert kept.tolist() == [[0.5, 1.0]]

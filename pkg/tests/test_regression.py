import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popinf.affine import AffineStructure, TermSpec
from popinf.fom import fhn_structure, heat_structure, synthetic_quadratic_system
from popinf.kron import compact_sq
from popinf.regression import (LogGrid, OperatorMatrix, Regularizer,
                               build_data_matrix, build_regularizer,
                               data_residual, equation_layout,
                               optimize_hyperparams, solve_regularized,
                               training_error)
from popinf.rom import Rom


def random_problem(seed, r=3, s=3, K=8):
    """Quadratic affine regression problem with random projected data."""
    rng = np.random.default_rng(seed)
    structure = AffineStructure(1, 2, [
        TermSpec("constant", 0, (), ("1",)),
        TermSpec("linear", 0, (0,), ("mu[0]", "mu[1]")),
        TermSpec("quadratic", 0, (0, 0), ("mu[0]",)),
    ])
    params = rng.uniform(0.5, 2.0, size=(s, 2))
    states = [[rng.standard_normal((r, K))] for _ in range(s)]
    derivs = [[rng.standard_normal((r, K))] for _ in range(s)]
    bundle = build_data_matrix(structure, params, states, np.arange(K) * 0.1,
                               derivatives=derivs)
    return structure, bundle


# data matrix ------------------------------------------------------------------
def test_heat_single_sample_by_hand(rng):
    alpha, beta = 0.7, 1.3
    U = rng.standard_normal((2, 3))
    with pytest.warns(RuntimeWarning):
        bundle = build_data_matrix(heat_structure(), [[alpha, beta]], [[U]],
                                   np.linspace(0, 1, 3))
    D = bundle.equations[0].D
    assert D.shape == (3, 4)
    for j in range(3):
        for c in range(2):
            assert D[j, c] == alpha * U[c, j]
            assert D[j, 2 + c] == beta * U[c, j]


@pytest.mark.parametrize("ranks", [(1, 1), (2, 3), (4, 2)])
def test_fhn_column_count_and_order(ranks):
    layout = equation_layout(fhn_structure(), 0, ranks)
    r1, r2 = ranks
    assert layout[-1].stop == (2 + 2 * r1 + r2 + math.comb(r1 + 1, 2)
                               + math.comb(r1 + 2, 3))
    order = ["constant", "input", "linear", "quadratic", "cubic"]
    ranks_seen = [order.index(b.kind) for b in layout]
    assert ranks_seen == sorted(ranks_seen)


def test_zero_snapshots_keep_constant_columns():
    structure = fhn_structure()
    params = [[0.05, 0.5, 2.0, 0.02], [0.025, 0.25, 2.5, 0.04]]
    states = [[np.zeros((2, 5)), np.zeros((2, 5))] for _ in params]
    bundle = build_data_matrix(structure, params, states,
                               np.linspace(0.1, 0.5, 5))
    for eq in bundle.equations:
        for b in eq.blocks:
            block = eq.D[:, b.start:b.stop]
            if b.kind in ("constant", "input"):
                assert np.all(block != 0)
            else:
                assert np.all(block == 0)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        build_data_matrix(heat_structure(), [[1.0, 2.0], [2.0, 1.0]],
                          [[rng.standard_normal((2, 4))],
                           [rng.standard_normal((3, 4))]],
                          np.linspace(0, 1, 4))


def test_non_finite_theta_rejected(rng):
    structure = AffineStructure(1, 1, [
        TermSpec("linear", 0, (0,), ("mu[0]^-1",))])
    with pytest.raises((FloatingPointError, ZeroDivisionError)):
        build_data_matrix(structure, [[0.0], [1.0]],
                          [[rng.standard_normal((2, 4))]] * 2,
                          np.linspace(0, 1, 4), check=False)


# regularizer ------------------------------------------------------------------
def test_regularizer_zero():
    _, bundle = random_problem(0)
    diag = Regularizer().diagonal(bundle.equations[0].blocks)
    assert np.all(diag == 0)


def test_regularizer_weights_by_kind():
    structure, bundle = random_problem(0)
    reg = build_regularizer(structure, 1.0, 2.0, 3.0)
    assert reg.lam3 == 0.0
    for b in bundle.equations[0].blocks:
        expected = 2.0 if b.kind == "quadratic" else 1.0
        assert np.all(reg.diagonal([b])[b.start:b.stop] == expected)


def test_heat_single_hyperparameter(rng):
    U = [[rng.standard_normal((3, 6))], [rng.standard_normal((3, 6))]]
    bundle = build_data_matrix(heat_structure(), [[1.0, 0.5], [0.5, 1.0]], U,
                               np.linspace(0, 1, 6))
    reg = build_regularizer(heat_structure(), 0.3, 5.0, 7.0)
    assert reg.as_tuple() == (0.3, 0.0, 0.0)
    ops = solve_regularized(bundle, reg)
    lam = reg.diagonal(bundle.equations[0].blocks)
    penalty = np.sum((lam * ops.matrices[0])**2)
    expected = 0.3**2 * (np.sum(ops.block("A", 0)**2) +
                         np.sum(ops.block("A", 1)**2))
    assert penalty == pytest.approx(expected, rel=1e-12)


def test_fhn_regularizes_only_nonlinear_blocks():
    reg = Regularizer(0.0, 1e-2, 1e-1)
    layout = equation_layout(fhn_structure(), 0, (3, 2))
    diag = reg.diagonal(layout)
    for b in layout:
        expected = {"quadratic": 1e-2, "cubic": 1e-1}.get(b.kind, 0.0)
        assert np.all(diag[b.start:b.stop] == expected)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        Regularizer(-1.0)


# solve ------------------------------------------------------------------------
def test_square_invertible_exact(rng):
    structure = AffineStructure(1, 1, [TermSpec("linear", 0, (0,), ("1",))])
    U = rng.standard_normal((3, 3))
    R = rng.standard_normal((3, 3))
    bundle = build_data_matrix(structure, [[1.0]], [[U]], np.arange(3.0),
                               derivatives=[[R]])
    ops = solve_regularized(bundle, Regularizer())
    D = bundle.equations[0].D
    np.testing.assert_allclose(D @ ops.matrices[0].T, R.T, atol=1e-10)


def test_huge_lambda_drives_operator_to_zero():
    structure, bundle = random_problem(1)
    lam = 1e12
    ops = solve_regularized(bundle, Regularizer(lam, lam, lam))
    bound = np.linalg.norm(bundle.equations[0].DtRt) / lam**2
    assert ops.frobenius_norm() <= bound * (1 + 1e-9)
    assert ops.frobenius_norm() < 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 10.0))
def test_row_decoupling(seed, lam):
    structure, bundle = random_problem(seed)
    reg = Regularizer(lam, lam, lam)
    joint = solve_regularized(bundle, reg).matrices[0]
    eq = bundle.equations[0]
    M = eq.DtD + np.diag(reg.diagonal(eq.blocks)**2)
    for i in range(eq.R.shape[0]):
        row = np.linalg.solve(M, eq.D.T @ eq.R[i])
        np.testing.assert_allclose(joint[i], row, rtol=1e-10, atol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0))
def test_normal_matches_svd(seed, lam):
    structure, bundle = random_problem(seed)
    reg = Regularizer(lam, lam, lam)
    a = solve_regularized(bundle, reg, "normal")
    b = solve_regularized(bundle, reg, "svd")
    assert a.info["solve"][0]["method"] == "normal"
    assert b.info["solve"][0]["method"] == "svd"
    diff = np.linalg.norm(a.matrices[0] - b.matrices[0])
    assert diff <= 1e-8 * np.linalg.norm(b.matrices[0])


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e3))
def test_stationarity(seed, lam):
    structure, bundle = random_problem(seed)
    reg = Regularizer(lam, lam, lam)
    eq = bundle.equations[0]
    O = solve_regularized(bundle, reg).matrices[0]
    M = eq.DtD + np.diag(reg.diagonal(eq.blocks)**2)
    resid = np.linalg.norm(M @ O.T - eq.DtRt)
    assert resid < 1e-8 * np.linalg.norm(eq.DtRt)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(-6, 3), st.floats(0.01, 3))
def test_uniform_lambda_monotone(seed, log_lam, log_factor):
    structure, bundle = random_problem(seed)
    norms = [solve_regularized(bundle, Regularizer(lam, lam)).frobenius_norm()
             for lam in (10**log_lam, 10**(log_lam + log_factor))]
    assert norms[1] <= norms[0] * (1 + 1e-10)


def _penalized_norm(ops, kind):
    return math.sqrt(sum(np.sum(M**2) for b, M in ops.blocks()
                         if (b.kind == "quadratic") == (kind == "lam2")))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(-6, 3), st.floats(0.01, 3),
       st.sampled_from(["lam1", "lam2"]))
def test_single_weight_monotone_on_its_blocks(seed, log_lam, log_factor,
                                              which):
    # raising one group weight shrinks that group; the other may grow
    structure, bundle = random_problem(seed)
    base = {"lam1": 0.1, "lam2": 0.1}
    norms = []
    for lam in (10**log_lam, 10**(log_lam + log_factor)):
        ops = solve_regularized(bundle, Regularizer(**dict(base, **{which: lam})))
        norms.append(_penalized_norm(ops, which))
    assert norms[1] <= norms[0] * (1 + 1e-9) + 1e-14


def test_group_weight_can_grow_total_norm():
    structure, bundle = random_problem(1)
    small = solve_regularized(bundle, Regularizer(10.0, 0.1)).frobenius_norm()
    large = solve_regularized(bundle, Regularizer(100.0, 0.1)).frobenius_norm()
    assert large > small


def test_rank_deficient_falls_back_to_svd(rng):
    U = rng.standard_normal((2, 5))
    with pytest.warns(RuntimeWarning):
        bundle = build_data_matrix(heat_structure(), [[1.0, 2.0], [2.0, 4.0]],
                                   [[U], [U]], np.linspace(0, 1, 5))
    ops = solve_regularized(bundle, Regularizer())
    assert ops.info["solve"][0]["method"] == "svd"
    assert np.all(np.isfinite(ops.matrices[0]))


def test_operator_matrix_save_load(tmp_path):
    structure, bundle = random_problem(3)
    ops = solve_regularized(bundle, Regularizer(0.1, 0.1))
    entries = ops.save(tmp_path)
    assert {e["file"] for e in entries} == {
        "op_c1_p1.pmx", "op_A11_p1.pmx", "op_A11_p2.pmx", "op_H111_p1.pmx"}
    again = OperatorMatrix.load(tmp_path, structure, ops.ranks, entries)
    for a, b in zip(ops.matrices, again.matrices):
        assert np.array_equal(a, b)


def test_exact_recovery_synthetic():
    system = synthetic_quadratic_system(r=3, qA=2, qH=1, s=4, seed=0)
    time = np.linspace(0, 1, 51)
    trajs = system.trajectories(time, dt=1e-3)
    states = [[t.states[0]] for t in trajs]
    derivs = [[system.derivatives(t.states[0], mu)]
              for t, mu in zip(trajs, system.params)]
    bundle = build_data_matrix(system.rom.structure, system.params, states,
                               time, derivatives=derivs)
    ops = solve_regularized(bundle, Regularizer())
    truth = system.rom.operators
    err = np.linalg.norm(ops.matrices[0] - truth.matrices[0])
    assert err / truth.frobenius_norm() < 1e-6
    assert data_residual(bundle, ops) < 1e-16


# training error ---------------------------------------------------------------
def _linear_rom(A):
    structure = AffineStructure(1, 1, [TermSpec("linear", 0, (0,), ("1",))])
    ops = OperatorMatrix.zeros(structure, (A.shape[0],))
    ops.set_block("A11", 0, A)
    return Rom(ops)


def test_training_error_zero_for_generator():
    A = np.array([[-1.0, 0.3], [0.0, -0.5]])
    time = np.linspace(0, 1, 21)
    from scipy.linalg import expm
    U = np.column_stack([expm(A * t) @ [1.0, 1.0] for t in time])
    err = training_error(_linear_rom(A), [[1.0]], [[U]], time, "rk4", 1e-3)
    assert err < 1e-8


def test_training_error_zero_rom():
    rng = np.random.default_rng(0)
    time = np.linspace(0, 1, 11)
    data = []
    for _ in range(2):
        U = rng.standard_normal((2, 11))
        U[:, 0] = 0.0
        data.append([U])
    err = training_error(_linear_rom(np.zeros((2, 2))), [[1.0], [1.0]], data,
                         time)
    assert err == pytest.approx(sum(np.sum(e[0]**2) for e in data) / 2)


def test_training_error_increases_with_perturbation():
    rng = np.random.default_rng(1)
    A = np.array([[-1.0, 0.3], [-0.3, -0.5]])
    time = np.linspace(0, 2, 41)
    from scipy.linalg import expm
    U = np.column_stack([expm(A * t) @ [1.0, -0.5] for t in time])
    for _ in range(5):
        delta = rng.standard_normal((2, 2))
        values = [training_error(_linear_rom(A + eps * delta), [[1.0]], [[U]],
                                 time, "rk4", 1e-3)
                  for eps in (1e-3, 1e-2, 1e-1)]
        assert values[0] < values[1] < values[2]


def test_training_error_penalizes_instability():
    time = np.linspace(0, 1, 11)
    U = np.ones((1, 11))
    err = training_error(_linear_rom(np.array([[200.0]])), [[1.0]], [[U]],
                         time, "rk4", 1e-2)
    assert 1e10 <= err <= 2e10


# hyperparameter search --------------------------------------------------------
@pytest.mark.parametrize("c", [-3.3, 0.0, 2.7])
def test_quadratic_in_log_lambda(c):
    res = optimize_hyperparams(lambda lam: (math.log10(lam[0]) - c)**2,
                               LogGrid(1e-6, 1e6, 7))
    assert abs(math.log10(res.best[0]) - c) < 1e-2
    assert res.value <= res.grid_value


def test_single_point_grid():
    res = optimize_hyperparams(lambda lam: 1.0, LogGrid(0.5, 0.5, 1),
                               refine=False)
    assert res.best.tolist() == [0.5]
    assert len(res.trace) == 1


def test_monotone_objective_hits_boundary():
    res = optimize_hyperparams(lambda lam: float(lam[0]), LogGrid(1e-4, 1e2, 7))
    assert res.best[0] == pytest.approx(1e-4, rel=1e-2)
    assert res.on_boundary


def test_two_axis_search():
    f = lambda lam: (math.log10(lam[0]) + 1)**2 + (math.log10(lam[1]) - 2)**2
    res = optimize_hyperparams(f, [LogGrid(1e-6, 1e6, 7)] * 2)
    np.testing.assert_allclose(np.log10(res.best), [-1, 2], atol=1e-2)


def test_all_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        optimize_hyperparams(lambda lam: math.nan, LogGrid(1e-2, 1, 3))


def test_grid_parse():
    g = LogGrid.parse("1e-12:1e6:7")
    np.testing.assert_allclose(g.points(), 10.0**np.arange(-12, 7, 3))
    assert LogGrid.parse("0.1").points().tolist() == [0.1]
    with pytest.raises(ValueError):
        LogGrid.parse("1:2")


def test_compact_sq_features_in_data(rng):
    structure, bundle = random_problem(5)
    eq = bundle.equations[0]
    quad = [b for b in eq.blocks if b.kind == "quadratic"][0]
    assert quad.stop - quad.start == compact_sq(np.ones(3)).size

import numpy as np
import pytest

from porohyper.cell import (COMPONENT_NAMES, MacroState, SolidCellProblem, biot_modulus, oat_sweep,
                            solve_rve, tangents)
from porohyper.exceptions import ConvergenceError, DegenerateParameterError, TangentError
from porohyper.material import MaterialParams


def uniaxial(h22):
    H = np.zeros((3, 3))
    H[1, 1] = h22
    return H


@pytest.fixture(scope="module")
def origin_tangents(solid8):
    return tangents(solid8.mesh, solid8.pmap, solid8.params, problem=solid8)


@pytest.fixture(scope="module")
def pressure_case(solid8):
    return solid8.solve(MacroState(np.zeros((3, 3)), 0.1), 10)


def test_macro_state_admissibility():
    with pytest.raises(ValueError):
        MacroState(-np.eye(3), 0.0)
    s = MacroState.from_vector(np.arange(10) * 0.01)
    np.testing.assert_array_equal(s.as_vector(), np.arange(10) * 0.01)


def test_zero_input_gives_zero_response(solid8):
    r, _ = solid8.solve(MacroState(), 5)
    assert np.abs(r.avg_grad_u1).max() <= 1e-14
    assert r.psi_max <= 1e-12
    assert np.abs(r.u1_field).max() <= 1e-14


def test_pressure_loading_signs_and_concentration(pressure_case):
    r, _ = pressure_case
    assert np.all(np.diag(r.avg_grad_u1) < 0)
    # energy concentrates at the channel intersections (the factor grows with resolution)
    assert r.psi_max / r.psi_avg > 1.5


def test_periodic_fluctuation(solid8, pressure_case):
    r, _ = pressure_case
    for pairs in solid8.pmap.pairs.values():
        assert np.abs(r.u1_field[pairs[:, 0]] - r.u1_field[pairs[:, 1]]).max() <= 1e-10


def test_converged_residual_is_small(solid8, pressure_case):
    _, x = pressure_case
    H, p = np.zeros((3, 3)), 0.1
    first = np.linalg.norm(solid8.residual(np.zeros(solid8.dofmap.n_free), H, p / 10))
    assert np.linalg.norm(solid8.residual(x, H, p)) <= 1e-8 * first


def test_small_strain_matches_linearised_cell_problem(solid8):
    H = uniaxial(1e-4)
    r, _ = solid8.solve(MacroState(H, 0.0), 1)
    R0, K0 = solid8.residual_and_jacobian(np.zeros(solid8.dofmap.n_free), np.zeros((3, 3)), 0.0)
    R = solid8.residual(np.zeros(solid8.dofmap.n_free), H, 0.0)
    x_lin = -solid8.linear_solver(K0, reuse=False).solve(R)
    lin = solid8.average_gradient(x_lin, H)
    assert np.abs(r.avg_grad_u1 - lin).max() <= 1e-3 * np.abs(lin).max()


def test_gauge_invariance_of_the_average(rve8, solid8):
    state = MacroState(uniaxial(-0.05), 0.05)
    a = solid8.solve(state, 5)[0].avg_grad_u1
    corner = int(np.argmax(np.linalg.norm(rve8[0].nodes, axis=1)))
    other = SolidCellProblem(rve8[0], solid8.params, solid8.pmap, pin_node=corner)
    b = other.solve(state, 5)[0].avg_grad_u1
    assert np.abs(a - b).max() <= 1e-10


def test_path_independence(solid8):
    state = MacroState(uniaxial(-0.1), 0.1)
    a = solid8.solve(state, 10)[0].avg_grad_u1
    b = solid8.solve(state, 20)[0].avg_grad_u1
    assert np.abs(a - b).max() <= 1e-6


def test_solve_rve_wrapper(rve8, solid8):
    state = MacroState(uniaxial(-0.02), 0.0)
    r = solve_rve(rve8[0], solid8.pmap, solid8.params, state, 2, problem=solid8)
    np.testing.assert_allclose(r.avg_grad_u1, solid8.solve(state, 2)[0].avg_grad_u1, atol=1e-12)


def test_bisection_exhaustion_reports_fraction(rve8):
    weak = SolidCellProblem(rve8[0], MaterialParams(0.35), max_iter=1, rel_tol=1e-14, abs_tol=1e-30)
    with pytest.raises(ConvergenceError) as info:
        weak.solve_free(uniaxial(-0.1), 0.0, 1, max_bisections=2)
    assert info.value.fraction == 0.0


def test_tangents_have_cubic_symmetry(origin_tangents):
    M, Q = origin_tangents.M, origin_tangents.Q
    d = [M[i, i, i, i] for i in range(3)]
    assert np.ptp(d) <= 0.01 * abs(np.mean(d))
    c = [M[1, 1, 0, 0], M[0, 0, 1, 1], M[2, 2, 0, 0], M[0, 0, 2, 2], M[1, 1, 2, 2], M[2, 2, 1, 1]]
    assert np.ptp(c) <= 0.01 * abs(np.mean(c))
    q = np.diag(Q)
    assert np.ptp(q) <= 0.01 * abs(q.mean())
    assert np.abs(Q - np.diag(q)).max() <= 1e-6 * abs(q.mean())
    assert np.all(np.isfinite(M))


def test_tangent_signs(origin_tangents):
    M, Q = origin_tangents.M, origin_tangents.Q
    assert M[1, 1, 1, 1] < 0 and M[1, 1, 0, 0] < 0 and np.all(np.diag(Q) < 0)


def test_forward_and_central_differences_agree(solid8, origin_tangents):
    fwd = tangents(solid8.mesh, solid8.pmap, solid8.params, scheme="forward", problem=solid8,
                   components=("22", "p"))
    M, Q = origin_tangents.M, origin_tangents.Q
    scale = np.abs(M).max()
    assert np.abs(fwd.M[..., 1, 1] - M[..., 1, 1]).max() <= 1e-3 * scale
    assert np.abs(fwd.Q - Q).max() <= 1e-3 * np.abs(Q).max()


def test_tangents_are_reproducible(solid8, origin_tangents):
    again = tangents(solid8.mesh, solid8.pmap, solid8.params, problem=solid8, components=("22",))
    assert np.abs(again.M[..., 1, 1] - origin_tangents.M[..., 1, 1]).max() <= 1e-8


def test_tangent_failure_names_component(solid8, monkeypatch):
    real = solid8.chord_solve

    def failing(x0, H, p, lu, **kw):
        if H[0, 1] != 0:
            raise ConvergenceError("forced")
        return real(x0, H, p, lu, **kw)

    monkeypatch.setattr(solid8, "chord_solve", failing)
    with pytest.raises(TangentError) as info:
        tangents(solid8.mesh, solid8.pmap, solid8.params, problem=solid8, components=("11", "12"))
    assert info.value.component == "12"


def test_tangent_delta_must_be_positive(solid8):
    with pytest.raises(ValueError):
        tangents(solid8.mesh, solid8.pmap, solid8.params, delta=0.0, problem=solid8)


def test_biot_modulus():
    assert biot_modulus(-np.eye(3) / 3, 1.0) == pytest.approx(1.0)
    assert biot_modulus(-0.113 * np.eye(3), 0.71) == pytest.approx(1 / (3 * 0.71 * 0.113))
    with pytest.raises(DegenerateParameterError):
        biot_modulus(np.zeros((3, 3)))


def test_zero_length_sweep(solid8):
    rows = oat_sweep(solid8, "22", [0.0])
    assert len(rows) == 1 and rows[0]["ok"]
    assert np.abs(rows[0]["avg"]).max() == 0.0


def test_sweep_rows_match_cold_solves(solid8):
    values = np.linspace(0, 0.1, 3)
    rows = oat_sweep(solid8, "12", values)
    for v, row in zip(values, rows):
        H = np.zeros((3, 3))
        H[0, 1] = v
        cold = solid8.solve(MacroState(H, 0.0), 10)[0].avg_grad_u1
        assert np.abs(row["avg"] - cold).max() <= 1e-8


def test_shear_sweep_produces_nonlinear_diagonal_response(solid8):
    values = np.linspace(0, 0.2, 5)
    rows = oat_sweep(solid8, "12", values)
    diag = np.array([np.diag(r["avg"]) for r in rows])
    assert np.abs(diag[-1]).max() > 1e-4
    # second differences do not vanish: the response is not linear in the shear
    second = diag[2:] - 2 * diag[1:-1] + diag[:-2]
    assert np.abs(second).max() > 1e-3 * np.abs(diag).max()


def test_sweep_records_failures_and_continues(solid8, monkeypatch):
    real = solid8.solve_free

    def flaky(H, p, n, start=None, **kw):
        if np.isclose(H[1, 1], -0.05):
            raise ConvergenceError("forced")
        return real(H, p, n, start, **kw)

    monkeypatch.setattr(solid8, "solve_free", flaky)
    rows = oat_sweep(solid8, "22", [0.0, -0.05, -0.1], conductivity=np.eye(3))
    assert [r["ok"] for r in rows] == [True, False, True]
    assert rows[2]["K_diag"].shape == (3,)


def test_component_names():
    assert COMPONENT_NAMES[4] == "22"

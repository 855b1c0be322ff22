"""Problem assembly: objectives, constraints, condensation, and refresh reuse."""

import numpy as np
import pytest

from qmpc.envs import EvapModel, LinearModel
from qmpc.learner import enforce_pd
from qmpc.lqr import LqrCost, gain_from, LqrTheta, solve_riccati
from qmpc.ocp import (
    build_condensed_q,
    build_condensed_v,
    build_q_problem,
    build_v_problem,
    condense_lti,
    refresh_instance,
)
from qmpc.params import ThetaNonCondensed
from qmpc.solver import solve


def toy_model():
    return LinearModel(np.array([[0.8, 0.1], [0.0, 0.7]]), np.array([[1.0], [0.5]]))


def toy_theta(with_bounds=False):
    th = ThetaNonCondensed.zeros(2, 1)
    th.H_lam = np.array([[0.3, 0.1], [0.1, 0.2]])
    th.h_lam = np.array([0.05, -0.02])
    th.c_lam = 0.7
    th.H_l = np.array([[2.0, 0.2, 0.0], [0.2, 1.5, 0.1], [0.0, 0.1, 1.0]])
    th.h_l = np.array([0.1, -0.3, 0.2])
    th.c_l = 0.4
    th.H_Vf = np.array([[1.2, 0.3], [0.3, 2.1]])
    th.h_Vf = np.array([-0.1, 0.25])
    th.c_Vf = -0.6
    th.c_f = np.array([0.02, -0.05])
    if with_bounds:
        th.x_lo = np.array([-4.0, -np.inf])
        th.x_hi = np.array([4.0, 3.0])
    return th


def test_horizon_one_pinned_matches_direct_arithmetic():
    # with N = 1 and both endpoints pinned there is nothing to optimize,
    # so the solver must return the plain evaluation of the objective
    th = toy_theta()
    m = toy_model()
    s = np.array([0.4, -0.3])
    a = np.array([0.6])
    gamma = 0.9
    inst = build_q_problem(th, m, s, a, 1, gamma)
    sol = solve(inst)
    x1 = m.A @ s + m.B @ a + th.c_f
    v0 = np.concatenate([s, a])
    want = (
        0.5 * s @ th.H_lam @ s + th.h_lam @ s + th.c_lam
        + 0.5 * v0 @ th.H_l @ v0 + th.h_l @ v0 + th.c_l
        + gamma * (0.5 * x1 @ th.H_Vf @ x1 + th.h_Vf @ x1 + th.c_Vf)
    )
    assert abs(sol.objective - want) < 1e-12
    assert np.abs(sol.x[0] - s).max() < 1e-12
    assert np.abs(sol.x[1] - x1).max() < 1e-10
    assert np.abs(sol.u[0] - a).max() < 1e-12


def test_horizon_two_free_tail_matches_normal_equations():
    # N = 2 pinned Q: only u1 is free; eliminate the states and solve the
    # resulting scalar quadratic independently of the production assembly
    th = toy_theta()
    m = toy_model()
    s = np.array([0.4, -0.3])
    a = np.array([0.6])
    gamma = 0.9
    x1 = m.A @ s + m.B @ a + th.c_f

    def q_of_u1(u1):
        v1 = np.concatenate([x1, u1])
        x2 = m.A @ x1 + m.B @ u1 + th.c_f
        v0 = np.concatenate([s, a])
        return (
            0.5 * s @ th.H_lam @ s + th.h_lam @ s + th.c_lam
            + 0.5 * v0 @ th.H_l @ v0 + th.h_l @ v0 + th.c_l
            + gamma * (0.5 * v1 @ th.H_l @ v1 + th.h_l @ v1 + th.c_l)
            + gamma ** 2 * (0.5 * x2 @ th.H_Vf @ x2 + th.h_Vf @ x2 + th.c_Vf)
        )

    # curvature and slope of the scalar quadratic by exact differencing
    f0 = q_of_u1(np.array([0.0]))
    fp = q_of_u1(np.array([1.0]))
    fm = q_of_u1(np.array([-1.0]))
    curv = fp - 2 * f0 + fm
    slope = 0.5 * (fp - fm)
    u_star = -slope / curv
    inst = build_q_problem(th, m, s, a, 2, gamma)
    sol = solve(inst)
    assert abs(sol.u[1][0] - u_star) < 1e-10
    assert abs(sol.objective - q_of_u1(np.array([u_star]))) < 1e-10


def test_riccati_matched_parameters_reproduce_quadratic_value():
    # stage cost blocks matching an LQR instance and terminal block at the
    # Riccati solution make the N-step value equal s'Ps for every horizon
    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    B = np.array([[1.0, 0.0], [0.3, 0.9]])
    cost = LqrCost(T=np.diag([1.0, 2.0]), S=np.zeros((2, 2)), R=np.eye(2), gamma=0.9)
    P = solve_riccati(A, B, cost)
    K = gain_from(LqrTheta(A_hat=A, B_hat=B, P_hat=P), cost)
    th = ThetaNonCondensed.zeros(2, 2)
    th.H_l = 2.0 * np.block([[cost.T, cost.S], [cost.S.T, cost.R]])
    th.H_Vf = 2.0 * P
    m = LinearModel(A, B)
    rng = np.random.default_rng(4)
    for N in (1, 3):
        for _ in range(5):
            s = rng.standard_normal(2)
            sol = solve(build_v_problem(th, m, s, N, cost.gamma))
            assert abs(sol.objective - s @ P @ s) < 1e-8 * (1.0 + abs(s @ P @ s))
            assert np.abs(sol.u0 - (-K @ s)).max() < 1e-6


def test_condensed_and_structured_objectives_agree():
    th = toy_theta()
    m = toy_model()
    gamma = 0.92
    N = 3
    thc = condense_lti(th, m, N, gamma, u_lo=[-2.0], u_hi=[2.0])
    rng = np.random.default_rng(9)
    for _ in range(10):
        s = rng.standard_normal(2)
        a = rng.uniform(-2.0, 2.0, 1)
        q_s = solve(build_q_problem(th, m, s, a, N, gamma, u_lo=[-2.0], u_hi=[2.0])).objective
        q_c = solve(build_condensed_q(thc, s, a)).objective
        assert abs(q_s - q_c) < 1e-8 * (1.0 + abs(q_s))
        v_s = solve(build_v_problem(th, m, s, N, gamma, u_lo=[-2.0], u_hi=[2.0])).objective
        v_c = solve(build_condensed_v(thc, s)).objective
        assert abs(v_s - v_c) < 1e-8 * (1.0 + abs(v_s))


def test_relaxation_is_exact_when_strictly_feasible():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    s = np.array([0.5, 0.2])
    soft = solve(build_v_problem(th, m, s, 3, 0.9, W_s=1.0, w_s=10.0, u_lo=[-1.0], u_hi=[1.0]))
    hard = solve(build_v_problem(th, m, s, 3, 0.9, u_lo=[-1.0], u_hi=[1.0], relax=False))
    assert np.abs(np.concatenate(soft.slack)).max() < 1e-8
    assert abs(soft.objective - hard.objective) < 1e-8


def test_relaxation_absorbs_an_out_of_bounds_start():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    s = np.array([5.0, 0.0])  # above x_hi[0] = 4: the hard problem is infeasible at k=0
    from qmpc.errors import SolverError
    with pytest.raises(SolverError):
        solve(build_v_problem(th, m, s, 2, 0.9, u_lo=[-1.0], u_hi=[1.0], relax=False))
    sol = solve(build_v_problem(th, m, s, 2, 0.9, W_s=1.0, w_s=10.0, u_lo=[-1.0], u_hi=[1.0]))
    assert sol.slack[0].max() > 0.9  # the stage-0 slack covers the violation


def test_constant_blocks_shift_the_value_by_their_discount_weight():
    th = toy_theta()
    m = toy_model()
    s = np.array([0.3, 0.1])
    a = np.array([0.2])
    N, gamma = 3, 0.9
    base = solve(build_q_problem(th, m, s, a, N, gamma)).objective
    for block, weight in (("c_l", sum(gamma ** k for k in range(N))),
                          ("c_Vf", gamma ** N),
                          ("c_lam", 1.0)):
        shifted = th.copy()
        setattr(shifted, block, getattr(th, block) + 2.5)
        obj = solve(build_q_problem(shifted, m, s, a, N, gamma)).objective
        assert abs(obj - (base + 2.5 * weight)) < 1e-9


def test_pinned_action_outside_box_raises():
    th = toy_theta()
    with pytest.raises(ValueError):
        build_q_problem(th, toy_model(), np.zeros(2), np.array([3.0]), 2, 0.9,
                        u_lo=[-1.0], u_hi=[1.0])


def test_builder_input_validation():
    th = toy_theta()
    m = toy_model()
    with pytest.raises(ValueError):
        build_q_problem(th, m, np.zeros(2), np.zeros(1), 0, 0.9)  # empty horizon
    with pytest.raises(ValueError):
        build_q_problem(th, m, np.zeros(2), np.zeros(1), 2, 1.5)  # gamma above one
    with pytest.raises(ValueError):
        build_q_problem(th, m, np.array([np.nan, 0.0]), np.zeros(1), 2, 0.9)
    with pytest.raises(ValueError):
        build_q_problem(th, m, np.zeros(2), np.zeros(1), 2, 0.9, u_lo=[1.0], u_hi=[-1.0])
    bad = toy_theta(with_bounds=True)
    bad.x_lo = np.array([5.0, -np.inf])  # crosses x_hi[0] = 4
    with pytest.raises(ValueError):
        build_q_problem(bad, m, np.zeros(2), np.zeros(1), 2, 0.9)


def test_pinned_problem_drops_first_stage_input_rows():
    th = toy_theta()
    m = toy_model()
    pinned = build_q_problem(th, m, np.zeros(2), np.array([1.0]), 3, 0.9, u_lo=[-1.0], u_hi=[1.0])
    free = build_v_problem(th, m, np.zeros(2), 3, 0.9, u_lo=[-1.0], u_hi=[1.0])
    assert pinned.A_in.shape[0] == free.A_in.shape[0] - 2
    assert 0 not in set(pinned.in_stage)


def test_slack_weight_broadcasting():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    s = np.zeros(2)
    a = np.zeros(1)
    scalar = build_q_problem(th, m, s, a, 2, 0.9, W_s=2.0, w_s=7.0)
    vector = build_q_problem(th, m, s, a, 2, 0.9, W_s=[2.0, 2.0, 2.0], w_s=[7.0, 7.0, 7.0])
    assert np.array_equal(scalar.H_obj, vector.H_obj)
    assert np.array_equal(scalar.g_obj, vector.g_obj)


def test_refresh_matches_fresh_build():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    tpl = build_q_problem(th, m, np.array([0.1, 0.2]), np.array([0.3]), 3, 0.9,
                          W_s=1.0, w_s=5.0, u_lo=[-1.0], u_hi=[1.0])
    mutated = th.copy()
    mutated.h_l = th.h_l + 0.5
    mutated.c_f = th.c_f - 0.1
    mutated.x_lo = np.array([-3.5, -np.inf])
    s2, a2 = np.array([-0.4, 0.6]), np.array([0.8])
    got = refresh_instance(tpl, mutated, s2, a2)
    want = build_q_problem(mutated, m, s2, a2, 3, 0.9, W_s=1.0, w_s=5.0,
                           u_lo=[-1.0], u_hi=[1.0])
    assert got is not None
    assert np.array_equal(got.H_obj, want.H_obj)
    assert np.array_equal(got.g_obj, want.g_obj)
    assert got.c_obj == want.c_obj
    assert np.array_equal(got.b_in, want.b_in)
    assert np.array_equal(got.A_in, want.A_in)
    assert np.array_equal(got.b_eq, want.b_eq)
    assert solve(got).objective == pytest.approx(solve(want).objective, abs=1e-12)


def test_refresh_rejects_structural_changes():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    s, a = np.array([0.1, 0.2]), np.array([0.3])
    tpl = build_q_problem(th, m, s, a, 3, 0.9)
    assert refresh_instance(tpl, th, s, None) is None  # pinnedness flip
    loosened = th.copy()
    loosened.x_lo = np.array([-np.inf, -np.inf])  # drops a constraint row
    assert refresh_instance(tpl, loosened, s, a) is None
    crossed = th.copy()
    crossed.x_lo = np.array([9.0, -np.inf])
    with pytest.raises(ValueError):
        refresh_instance(tpl, crossed, s, a)
    thc = condense_lti(toy_theta(), m, 2, 0.9, u_lo=[-1.0], u_hi=[1.0])
    cond = build_condensed_q(thc, s, a)
    assert refresh_instance(cond, th, s, a) is None


def test_initial_point_and_feasible_step_are_feasible():
    th = toy_theta(with_bounds=True)
    m = toy_model()
    inst = build_q_problem(th, m, np.array([3.9, 2.9]), np.array([0.5]), 3, 0.9,
                           W_s=1.0, w_s=5.0, u_lo=[-1.0], u_hi=[1.0])
    z = inst.initial_point()
    assert np.abs(inst.eq_residual(z)).max() < 1e-12
    assert np.all(inst.A_in @ z <= inst.b_in + 1e-12)
    rng = np.random.default_rng(2)
    z_off = z + 0.05 * rng.standard_normal(z.shape)
    p = inst.feasible_step(z_off)
    assert np.abs(inst.eq_residual(z_off + p)).max() < 1e-10  # linear model: exact repair
    state_rows = inst.A_in @ (z_off + p) - inst.b_in
    assert state_rows.max() < 1e-10


def test_nonlinear_residual_fast_path_matches_per_stage_loop():
    th = ThetaNonCondensed.zeros(2, 2)
    th.H_l = np.eye(4)
    th.c_f = np.array([0.1, -0.2])
    model = EvapModel()
    inst = build_q_problem(th, model, np.array([27.0, 47.0]), np.array([200.0, 250.0]),
                           4, 0.95, u_lo=[100.0, 100.0], u_hi=[400.0, 400.0])
    rng = np.random.default_rng(5)
    z = inst.initial_point() + rng.standard_normal(inst.n_z)
    r_fast = inst.eq_residual(z)
    r_loop = r_fast.copy()
    r_loop[inst.eq_pin_x] = z[inst.idx_x[0]] - inst.s
    r_loop[inst.eq_pin_u] = z[inst.idx_u[0]] - inst.a
    for k in range(inst.N):
        r_loop[inst.eq_dyn[k]] = (model.f(z[inst.idx_x[k]], z[inst.idx_u[k]])
                                  + th.c_f - z[inst.idx_x[k + 1]])
    assert np.array_equal(r_fast, r_loop)
    J = inst.eq_jacobian(z)
    eps = 1e-6
    for j in range(inst.n_z):
        dz = np.zeros(inst.n_z)
        dz[j] = eps
        fd = (inst.eq_residual(z + dz) - inst.eq_residual(z - dz)) / (2 * eps)
        assert np.abs(fd - J[:, j]).max() < 1e-6


def test_condense_rejects_soft_bounds_and_nonlinear_models():
    th = toy_theta(with_bounds=True)
    with pytest.raises(ValueError):
        condense_lti(th, toy_model(), 2, 0.9)
    with pytest.raises(ValueError):
        condense_lti(ThetaNonCondensed.zeros(2, 2), EvapModel(), 2, 0.9)


def test_debug_text_reports_structure():
    th = toy_theta(with_bounds=True)
    inst = build_q_problem(th, toy_model(), np.zeros(2), np.zeros(1), 3, 0.9,
                           u_lo=[-1.0], u_hi=[1.0])
    text = inst.debug_text()
    lines = text.strip().split("\n")
    assert lines[0] == "ocp kind=noncondensed pinned=yes N=3 gamma=0.9"
    assert f"n_in={inst.A_in.shape[0]}" in lines[1]
    assert any(line.startswith("rows:") for line in lines)
    for name in ("H_l", "c_f", "x_lo"):
        assert any(f"  {name} " in line for line in lines)

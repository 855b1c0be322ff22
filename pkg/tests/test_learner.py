"""Learning loop pieces: updates, fitting, exploration, and history records."""

import csv

import numpy as np
import pytest

from qmpc.envs import make_lti_env
from qmpc.errors import SolverError
from qmpc.learner import (
    LearnerConfig,
    MpcQFunction,
    TargetPair,
    batch_fit,
    enforce_pd,
    explore,
    mix,
    standard_update,
    td_error,
    train,
)
from qmpc.params import ThetaNonCondensed, VectorTheta


class LinearFeatureQ:
    """Linear-in-parameters toy backend: Q(s, a) = w . phi(s, a).

    Implements just enough of the backend protocol for batch_fit. The value
    solve is not needed there, so v raises if it is ever called.
    """

    def __init__(self, w):
        self.theta = VectorTheta(w=np.asarray(w, dtype=float))

    @staticmethod
    def features(s, a):
        return np.array([s[0], a[0], s[0] * a[0], 1.0])

    def set_theta(self, theta):
        self.theta = theta.copy()

    def q(self, s, a, want_grad=False, warm_key=None):
        phi = self.features(s, a)
        grad = VectorTheta(w=phi) if want_grad else None
        return float(self.theta.w @ phi), grad, None

    def v(self, s, want_grad=False, warm_key=None):
        raise AssertionError("batch_fit must not need value solves")


def test_td_error_identity():
    assert td_error(2.0, 0.9, 5.0, 4.0) == pytest.approx(2.0 + 0.9 * 4.0 - 5.0)


def test_standard_update_moves_along_scaled_gradient():
    th = VectorTheta(w=np.array([1.0, -2.0]))
    grad = VectorTheta(w=np.array([0.5, 3.0]))
    out = standard_update(th, grad, delta=2.0, alpha=0.1)
    assert np.abs(out.w - (th.w + 0.1 * 2.0 * grad.w)).max() < 1e-15


def test_enforce_pd_lifts_indefinite_blocks():
    th = ThetaNonCondensed.zeros(2, 1)
    th.H_l = np.diag([1.0, -3.0, 0.0])
    th.H_Vf = np.array([[0.5, 2.0], [2.0, 0.5]])  # eigenvalues -1.5 and 2.5
    out = enforce_pd(th, eps=1e-4)
    assert out.pd_min_eig() >= 1e-4 - 1e-12
    assert np.abs(np.linalg.eigvalsh(out.H_l) - [1e-4, 1e-4, 1.0]).max() < 1e-12
    # the arrival block may stay indefinite
    th.H_lam = np.diag([-1.0, -1.0])
    assert np.allclose(enforce_pd(th, 1e-4).H_lam, th.H_lam)


def test_mix_blends_and_preserves_infinities():
    a = ThetaNonCondensed.zeros(2, 1)
    b = ThetaNonCondensed.zeros(2, 1)
    a.h_l = np.array([0.0, 0.0, 0.0])
    b.h_l = np.array([1.0, -2.0, 4.0])
    a.x_lo = np.array([-4.0, -np.inf])
    b.x_lo = np.array([-1.0, -np.inf])
    a.x_hi = np.array([np.inf, 3.0])
    b.x_hi = np.array([2.0, np.inf])
    out = mix(a, b, 0.25)
    assert np.abs(out.h_l - [0.25, -0.5, 1.0]).max() < 1e-15
    assert out.x_lo[0] == pytest.approx(-3.25)
    assert np.isinf(out.x_lo[1]) and out.x_lo[1] < 0
    # any positive weight on an infinite entry dominates the blend
    assert np.isposinf(out.x_hi[0])
    assert np.isposinf(out.x_hi[1])
    full = mix(a, b, 1.0)
    assert full.x_lo[0] == pytest.approx(-1.0)
    assert full.x_hi[0] == pytest.approx(2.0)


def test_explore_is_epsilon_greedy_with_saturation():
    rng = np.random.default_rng(0)
    greedy = np.array([0.5])
    n_explored = 0
    for _ in range(400):
        a, explored = explore(rng, greedy, epsilon=0.3, sigma=10.0,
                              u_lo=np.array([-1.0]), u_hi=np.array([1.0]))
        if explored:
            n_explored += 1
            assert -1.0 <= a[0] <= 1.0
        else:
            assert a[0] == 0.5
    assert 60 <= n_explored <= 180  # around 0.3 * 400


def test_explore_extremes():
    rng = np.random.default_rng(1)
    a, explored = explore(rng, np.array([0.2]), epsilon=0.0, sigma=1.0)
    assert not explored and a[0] == 0.2
    a, explored = explore(rng, np.array([0.2]), epsilon=1.0, sigma=1.0)
    assert explored


def test_batch_fit_on_linear_features_equals_least_squares():
    # with a linear-in-parameters model the Gauss-Newton normal equations are
    # the least-squares normal equations, so one iteration lands exactly on
    # the lstsq solution
    rng = np.random.default_rng(8)
    backend = LinearFeatureQ(np.zeros(4))
    pairs = []
    Phi = []
    y = []
    for _ in range(30):
        s = rng.standard_normal(1)
        a = rng.standard_normal(1)
        target = rng.standard_normal()
        pairs.append(TargetPair(s=s, a=a, target=target))
        Phi.append(backend.features(s, a))
        y.append(target)
    cfg = LearnerConfig(mode="batch", gn_max_iter=5, gn_tol=1e-14)
    theta_star, info = batch_fit(backend, pairs, cfg)
    w_ls = np.linalg.lstsq(np.array(Phi), np.array(y), rcond=None)[0]
    assert np.abs(theta_star.w - w_ls).max() < 1e-9
    assert info["sse_after"] <= info["sse_before"]
    assert info["dropped"] == 0
    # the backend is restored to its entry parameters
    assert np.array_equal(backend.theta.w, np.zeros(4))


def test_batch_fit_respects_the_mask():
    rng = np.random.default_rng(9)
    backend = LinearFeatureQ(np.array([0.5, -0.5, 0.25, 0.0]))
    pairs = [TargetPair(s=rng.standard_normal(1), a=rng.standard_normal(1),
                        target=rng.standard_normal()) for _ in range(20)]
    mask = np.array([False, False, False, True])  # only the constant may move
    cfg = LearnerConfig(mode="batch", mask=mask, gn_max_iter=5)
    theta_star, _ = batch_fit(backend, pairs, cfg)
    assert np.array_equal(theta_star.w[:3], backend.theta.w[:3])
    assert theta_star.w[3] != 0.0


def test_batch_fit_rejects_bad_inputs():
    backend = LinearFeatureQ(np.zeros(4))
    cfg = LearnerConfig(mode="batch")
    with pytest.raises(ValueError):
        batch_fit(backend, [], cfg)
    with pytest.raises(ValueError):
        bad = LearnerConfig(mode="batch", mask=np.array([True, False]))
        batch_fit(backend, [TargetPair(s=np.zeros(1), a=np.zeros(1), target=0.0)], bad)


class FlakyQ(LinearFeatureQ):
    """Fails to solve a fixed subset of the window."""

    def __init__(self, w, bad_every):
        super().__init__(w)
        self.bad_every = bad_every
        self.calls = 0

    def q(self, s, a, want_grad=False, warm_key=None):
        self.calls += 1
        if self.calls % self.bad_every == 0:
            raise SolverError("qp", "synthetic failure")
        return super().q(s, a, want_grad=want_grad, warm_key=warm_key)


def test_batch_fit_fails_when_too_many_pairs_drop():
    rng = np.random.default_rng(10)
    pairs = [TargetPair(s=rng.standard_normal(1), a=rng.standard_normal(1),
                        target=rng.standard_normal()) for _ in range(20)]
    backend = FlakyQ(np.zeros(4), bad_every=3)  # ~33% failures > 10% threshold
    with pytest.raises(SolverError):
        batch_fit(backend, pairs, LearnerConfig(mode="batch", max_fail_frac=0.1))


def small_env():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    return make_lti_env(A, np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), 0.9,
                        noise_sigma=0.05, u_lo=[-8.0, -8.0], u_hi=[8.0, 8.0],
                        init_state=[1.0, -1.0])


def small_qfun(env, N=1):
    th = ThetaNonCondensed.zeros(2, 2)
    th.H_l = np.eye(4)
    th.H_Vf = 1e-6 * np.eye(2)
    return MpcQFunction(th, env.model(), N, env.spec.gamma,
                        u_lo=env.spec.u_lo, u_hi=env.spec.u_hi)


def test_train_batch_mode_reduces_td_error():
    env = small_env()
    qfun = small_qfun(env)
    cfg = LearnerConfig(alpha=0.5, epsilon=1.0, explore_sigma=1.0, mode="batch", n_upd=50)
    hist = train(env, qfun, 300, cfg, np.random.default_rng(0))
    assert len(hist.delta) == 300
    assert hist.final_abs_td(100) < hist.initial_abs_td(100)
    assert hist.fail_updates == 0
    # snapshots: start, one per update, end
    assert hist.snapshots[0][0] == 0
    assert {t for t, _ in hist.snapshots} == {0, 50, 100, 150, 200, 250, 300}


def test_train_standard_mode_runs_and_snapshots():
    env = small_env()
    qfun = small_qfun(env)
    cfg = LearnerConfig(alpha=1e-3, epsilon=0.5, explore_sigma=1.0, mode="standard",
                        n_upd=100)
    hist = train(env, qfun, 200, cfg, np.random.default_rng(1))
    assert len(hist.delta) == 200
    assert {t for t, _ in hist.snapshots} == {0, 100, 200}
    # parameters moved and stayed PD
    assert qfun.theta.pd_min_eig() >= cfg.pd_eps - 1e-12
    assert not np.array_equal(hist.snapshots[0][1], hist.snapshots[-1][1])


def test_train_determinism_under_fixed_seed():
    env = small_env()
    cfg = LearnerConfig(alpha=0.5, epsilon=0.8, explore_sigma=1.0, mode="batch", n_upd=50)
    h1 = train(env, small_qfun(env), 120, cfg, np.random.default_rng(7))
    h2 = train(env, small_qfun(env), 120, cfg, np.random.default_rng(7))
    assert h1.delta == h2.delta
    assert h1.cost == h2.cost
    assert np.array_equal(h1.snapshots[-1][1], h2.snapshots[-1][1])


def test_rolling_abs_td_matches_brute_force():
    from qmpc.learner import History
    hist = History(names=["w"])
    rng = np.random.default_rng(3)
    vals = rng.standard_normal(57)
    for i, d in enumerate(vals):
        hist.record(i, d, 0.0, False, np.zeros(1), np.zeros(1))
    roll = hist.rolling_abs_td(window=10)
    brute = np.array([np.abs(vals[max(0, i - 9): i + 1]).mean() for i in range(57)])
    assert np.abs(roll - brute).max() < 1e-12


def test_history_csv_round_trips(tmp_path):
    env = small_env()
    qfun = small_qfun(env)
    cfg = LearnerConfig(alpha=0.5, epsilon=1.0, explore_sigma=1.0, mode="batch", n_upd=50)
    hist = train(env, qfun, 100, cfg, np.random.default_rng(4))
    td_path = tmp_path / "td.csv"
    th_path = tmp_path / "theta.csv"
    hist.to_td_csv(td_path)
    hist.to_theta_csv(th_path)
    td_lines = td_path.read_text().strip().split("\n")
    assert td_lines[0] == "t,delta,rolling_abs_td,explored,cost"
    assert len(td_lines) == 101
    th_lines = th_path.read_text().strip().split("\n")
    with open(th_path, newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["t"] + qfun.theta.names()
    last = np.array([float(v) for v in th_lines[-1].split(",")[1:]])
    finite = np.isfinite(qfun.theta.flatten())
    assert np.array_equal(last[finite], qfun.theta.flatten()[finite])


def test_learner_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig(mode="nonsense")
    with pytest.raises(ValueError):
        LearnerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LearnerConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        LearnerConfig(n_upd=0)

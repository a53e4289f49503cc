import numpy as np
import pytest

from safempc.cartpole import CartPoleParams, CartPoleState, is_success, step
from safempc.ddp import (
    CostSpec,
    Gains,
    InvalidHorizonError,
    MpcConfig,
    MpcExpert,
    NotPositiveDefiniteError,
    QuadraticCost,
    Trajectory,
    ValueExpansion,
    backward_pass,
    cartpole_dynamics,
    ddp_solve,
    fd_jacobians,
    forward_pass,
    linearize,
    mpc_step,
    q_expansion,
    rollout,
    trajectory_cost,
)

PARAMS = CartPoleParams()


# ---------------------------------------------------------------- oracles


def riccati_recursion(Phi, B, Q, R, Qf, horizon):
    """Discrete finite-horizon LQR for cost sum 0.5(x'Qx + u'Ru) + 0.5 x'Qf x."""
    P = [None] * horizon
    K = [None] * (horizon - 1)
    P[-1] = Qf.copy()
    for t in range(horizon - 2, -1, -1):
        S = R + B.T @ P[t + 1] @ B
        K[t] = np.linalg.solve(S, B.T @ P[t + 1] @ Phi)
        Pt = Q + Phi.T @ P[t + 1] @ (Phi - B @ K[t])
        P[t] = 0.5 * (Pt + Pt.T)
    return P, K


def lqr_openloop(Phi, B, K, x0, horizon):
    xs = np.empty((horizon, len(x0)))
    us = np.empty((horizon - 1, B.shape[1]))
    xs[0] = x0
    for t in range(horizon - 1):
        us[t] = -K[t] @ xs[t]
        xs[t + 1] = Phi @ xs[t] + B @ us[t]
    return xs, us


def random_controllable_system(rng, n=4, m=1):
    while True:
        A = rng.normal(size=(n, n)) / np.sqrt(n)
        B = rng.normal(size=(n, m))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) == n:
            return A, B


def random_lq_cost(rng, n=4, m=1):
    Mq = rng.normal(size=(n, n))
    Q = Mq @ Mq.T / n
    R = np.eye(m) * rng.uniform(0.1, 2.0)
    Mf = rng.normal(size=(n, n))
    Qf = Mf @ Mf.T / n
    return Q, R, Qf


def linear_dynamics(A, B):
    def f(X, U):
        return X @ A.T + U @ B.T

    return f


def analytic_linear_jacobians(A, B):
    def jac(f, X, U):
        T = len(X)
        return (
            np.broadcast_to(A, (T,) + A.shape).copy(),
            np.broadcast_to(B, (T,) + B.shape).copy(),
        )

    return jac


# ------------------------------------------------------------- linearize


def test_linearize_zero_dynamics():
    f = lambda X, U: np.zeros_like(X)
    Phi, B = linearize(f, np.zeros(3), np.zeros(1), 0.05)
    assert np.array_equal(Phi, np.eye(3))
    assert np.array_equal(B, np.zeros((3, 1)))


def test_linearize_linear_system_is_nearly_exact():
    rng = np.random.default_rng(0)
    A, B = random_controllable_system(rng)
    f = linear_dynamics(A, B)
    dt = 0.1
    x, u = rng.normal(size=4), rng.normal(size=1)
    Phi, Bd = linearize(f, x, u, dt)
    assert np.abs(Phi - (np.eye(4) + A * dt)).max() < 1e-8
    assert np.abs(Bd - B * dt).max() < 1e-8


def test_linearize_cartpole_upright_angle_entry():
    # d(thetadot')/d(theta) = dt * g / (l * (4/3 - m_p/(m_c+m_p))), by hand
    f = cartpole_dynamics(PARAMS)
    Phi, _ = linearize(f, np.zeros(4), np.zeros(1), PARAMS.dt)
    expected = (
        PARAMS.dt
        * PARAMS.gravity
        / (PARAMS.pole_half_length * (4.0 / 3.0 - PARAMS.pole_mass / (PARAMS.cart_mass + PARAMS.pole_mass)))
    )
    assert Phi[3][2] == pytest.approx(expected, abs=1e-5)
    assert expected == pytest.approx(0.3155, abs=1e-4)


def test_fd_jacobians_match_per_step_linearize_bitwise():
    f = cartpole_dynamics(PARAMS)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(7, 4))
    U = rng.normal(size=(7, 1))
    A, B = fd_jacobians(f, X, U)
    for t in range(7):
        Phi_t, Bd_t = linearize(f, X[t], U[t], PARAMS.dt)
        assert np.array_equal(np.eye(4) + A[t] * PARAMS.dt, Phi_t)
        assert np.array_equal(B[t] * PARAMS.dt, Bd_t)


# ----------------------------------------------------------- q_expansion


def test_q_expansion_zero_inputs():
    v = ValueExpansion(V=0.0, Vx=np.zeros(2), Vxx=np.zeros((2, 2)))
    q = q_expansion(0.0, np.zeros(2), np.zeros(1), np.zeros((2, 2)), np.zeros((1, 1)),
                    np.zeros((1, 2)), v, np.eye(2), np.zeros((2, 1)), 0.1, lam=0.0)
    assert q.Q0 == 0.0
    assert not q.Qx.any() and not q.Qu.any()
    assert not q.Qxx.any() and not q.Quu.any() and not q.Qux.any()


def test_q_expansion_regularizer_only():
    v = ValueExpansion(V=0.0, Vx=np.zeros(2), Vxx=np.zeros((2, 2)))
    q = q_expansion(0.0, np.zeros(2), np.zeros(1), np.zeros((2, 2)), np.zeros((1, 1)),
                    np.zeros((1, 2)), v, np.eye(2), np.zeros((2, 1)), 0.1, lam=1.0)
    assert np.array_equal(q.Quu, np.eye(1))


def test_q_expansion_scalar_lqr_hand_values():
    # l = 0.5(q x^2 + r u^2), V'_xx = P, Phi = a, B = b (all scalar):
    # Quu = r dt + b^2 P, Qux = a b P
    q_w, r_w, P, a, b, dt = 2.0, 0.5, 3.0, 1.2, 0.7, 0.1
    v = ValueExpansion(V=0.0, Vx=np.zeros(1), Vxx=np.array([[P]]))
    x, u = 0.3, -0.4
    q = q_expansion(
        0.5 * (q_w * x**2 + r_w * u**2),
        np.array([q_w * x]),
        np.array([r_w * u]),
        np.array([[q_w]]),
        np.array([[r_w]]),
        np.zeros((1, 1)),
        v,
        np.array([[a]]),
        np.array([[b]]),
        dt,
    )
    assert q.Quu[0, 0] == pytest.approx(r_w * dt + b**2 * P, abs=1e-14)
    assert q.Qux[0, 0] == pytest.approx(a * b * P, abs=1e-14)
    assert q.Qxx[0, 0] == pytest.approx(q_w * dt + a**2 * P, abs=1e-14)


# --------------------------------------------------------- backward pass


def test_backward_pass_single_step_matches_one_step_lqr():
    rng = np.random.default_rng(2)
    A, B = random_controllable_system(rng)
    Q, R, Qf = random_lq_cost(rng)
    dt = 0.1
    Phi, Bd = np.eye(4) + A * dt, B * dt
    x0 = rng.normal(size=4)
    traj = rollout(x0, np.zeros((1, 1)), linear_dynamics(A, B), dt)
    gains, values = backward_pass(traj, QuadraticCost(Q, R, Qf), linear_dynamics(A, B), dt,
                                  lam=0.0, jacobians=analytic_linear_jacobians(A, B))
    S = R * dt + Bd.T @ Qf @ Bd
    K_expected = -np.linalg.solve(S, Bd.T @ Qf @ Phi)
    assert gains.feedback[0] == pytest.approx(K_expected, abs=1e-12)
    assert len(values) == 2
    assert values[1].Vxx == pytest.approx(Qf, abs=1e-12)


def test_backward_pass_value_hessians_match_riccati():
    rng = np.random.default_rng(3)
    for _ in range(5):
        A, B = random_controllable_system(rng)
        Q, R, Qf = random_lq_cost(rng)
        dt, horizon = 0.1, 12
        f = linear_dynamics(A, B)
        traj = rollout(rng.normal(size=4), rng.normal(size=(horizon - 1, 1)) * 0.1, f, dt)
        _, values = backward_pass(traj, QuadraticCost(Q, R, Qf), f, dt, lam=0.0,
                                  jacobians=analytic_linear_jacobians(A, B))
        P, _ = riccati_recursion(np.eye(4) + A * dt, B * dt, Q * dt, R * dt, Qf, horizon)
        for t in range(horizon):
            assert np.abs(values[t].Vxx - P[t]).max() < 1e-10


def test_backward_pass_singular_quu_raises():
    # zero control cost and zero terminal curvature leave Quu singular at lam=0
    A, B = random_controllable_system(np.random.default_rng(4))
    f = linear_dynamics(A, B)
    traj = rollout(np.ones(4), np.zeros((3, 1)), f, 0.1)
    cost = QuadraticCost(np.eye(4), np.zeros((1, 1)), np.zeros((4, 4)))
    with pytest.raises(NotPositiveDefiniteError):
        backward_pass(traj, cost, f, 0.1, lam=0.0)


def test_cost_spec_rejects_zero_control_weight():
    with pytest.raises(ValueError):
        CostSpec(control_w=0.0)


def test_backward_pass_value_hessians_symmetric_and_psd_on_lq():
    rng = np.random.default_rng(5)
    A, B = random_controllable_system(rng)
    Q, R, Qf = random_lq_cost(rng)
    f = linear_dynamics(A, B)
    traj = rollout(rng.normal(size=4), np.zeros((9, 1)), f, 0.1)
    _, values = backward_pass(traj, QuadraticCost(Q, R, Qf), f, 0.1, lam=0.0)
    for v in values:
        assert np.array_equal(v.Vxx, v.Vxx.T)
        assert np.linalg.eigvalsh(v.Vxx).min() > -1e-10


# ---------------------------------------------------------- forward pass


def test_forward_pass_identity_with_zero_gains_or_zero_alpha():
    f = cartpole_dynamics(PARAMS)
    rng = np.random.default_rng(6)
    traj = rollout(np.array([0, 0, np.pi, 0.0]), rng.normal(size=(20, 1)), f, PARAMS.dt,
                   PARAMS.force_limit)
    zero = Gains(feedback=np.zeros((20, 1, 4)), feedforward=np.zeros((20, 1)))
    same = forward_pass(traj, zero, 0.8, f, PARAMS.dt, PARAMS.force_limit)
    assert np.array_equal(same.states, traj.states)
    assert np.array_equal(same.controls, traj.controls)

    some = Gains(feedback=rng.normal(size=(20, 1, 4)), feedforward=rng.normal(size=(20, 1)))
    frozen = forward_pass(traj, some, 0.0, f, PARAMS.dt, PARAMS.force_limit)
    assert np.array_equal(frozen.states, traj.states)
    assert np.array_equal(frozen.controls, traj.controls)


def test_forward_pass_reaches_riccati_optimal_cost():
    rng = np.random.default_rng(7)
    A, B = random_controllable_system(rng)
    Q, R, Qf = random_lq_cost(rng)
    dt, horizon = 0.1, 12
    f = linear_dynamics(A, B)
    cost = QuadraticCost(Q, R, Qf)
    x0 = rng.normal(size=4)
    traj = rollout(x0, np.zeros((horizon - 1, 1)), f, dt)
    gains, _ = backward_pass(traj, cost, f, dt, lam=0.0,
                             jacobians=analytic_linear_jacobians(A, B))
    improved = forward_pass(traj, gains, 1.0, f, dt)
    P, _ = riccati_recursion(np.eye(4) + A * dt, B * dt, Q * dt, R * dt, Qf, horizon)
    optimal = 0.5 * x0 @ P[0] @ x0
    assert trajectory_cost(improved, cost, dt) == pytest.approx(optimal, abs=1e-8)


# ------------------------------------------------------------- ddp_solve


def test_ddp_solve_trivial_at_upright():
    f = cartpole_dynamics(PARAMS)
    res = ddp_solve(np.zeros(4), np.zeros((49, 1)), 50, PARAMS.dt, 5, 0.8, f,
                    CostSpec().build(), force_limit=PARAMS.force_limit)
    assert np.abs(res.trajectory.controls).max() < 1e-9
    assert res.cost_history[-1] < 1e-12
    assert res.converged


def test_ddp_solve_rejects_bad_horizon():
    f = cartpole_dynamics(PARAMS)
    with pytest.raises(InvalidHorizonError):
        ddp_solve(np.zeros(4), np.zeros((0, 1)), 1, PARAMS.dt, 1, 0.8, f, CostSpec().build())


def test_ddp_solve_one_iteration_matches_lqr_oracle():
    rng = np.random.default_rng(8)
    for _ in range(3):
        A, B = random_controllable_system(rng)
        Q, R, Qf = random_lq_cost(rng)
        dt, horizon = 0.1, 12
        f = linear_dynamics(A, B)
        x0 = rng.normal(size=4)
        res = ddp_solve(x0, np.zeros((horizon - 1, 1)), horizon, dt, 1, 1.0, f,
                        QuadraticCost(Q, R, Qf), lam_init=0.0,
                        jacobians=analytic_linear_jacobians(A, B))
        P, K = riccati_recursion(np.eye(4) + A * dt, B * dt, Q * dt, R * dt, Qf, horizon)
        _, us = lqr_openloop(np.eye(4) + A * dt, B * dt, K, x0, horizon)
        assert np.abs(res.trajectory.controls - us).max() < 1e-6


def test_ddp_solve_cost_history_non_increasing_on_swing_up():
    f = cartpole_dynamics(PARAMS)
    res = ddp_solve(np.array([0, 0, np.pi - 0.05, 0.0]), np.zeros((49, 1)), 50, PARAMS.dt,
                    40, 0.8, f, CostSpec().build(), force_limit=PARAMS.force_limit)
    hist = np.array(res.cost_history)
    assert len(hist) > 2
    assert np.all(np.diff(hist) <= 0)


def test_ddp_forward_clamps_controls():
    f = cartpole_dynamics(PARAMS)
    res = ddp_solve(np.array([0, 0, np.pi - 0.05, 0.0]), np.zeros((49, 1)), 50, PARAMS.dt,
                    40, 0.8, f, CostSpec().build(), force_limit=PARAMS.force_limit)
    assert np.abs(res.trajectory.controls).max() <= PARAMS.force_limit + 1e-12


# ------------------------------------------------------------------ mpc


def test_mpc_step_at_upright_returns_near_zero_control():
    cfg = MpcConfig(params=PARAMS)
    control, warm = mpc_step(np.zeros(4), np.zeros(49), cfg)
    assert abs(control) < 1e-9
    assert len(warm) == 49


def test_mpc_step_shift_contract():
    cfg = MpcConfig(params=PARAMS, iters_per_step=1)
    state = np.array([0.1, 0.0, 0.4, -0.2])
    warm_in = np.linspace(-1, 1, 49)
    res = ddp_solve(state, warm_in.reshape(-1, 1), cfg.horizon, PARAMS.dt, 1, cfg.alpha,
                    cartpole_dynamics(PARAMS), cfg.cost.build(),
                    force_limit=PARAMS.force_limit, lam_init=cfg.lam_init)
    solved = res.trajectory.controls[:, 0]
    control, warm_out = mpc_step(state, warm_in, cfg)
    assert control == float(np.clip(solved[0], -10, 10))
    assert len(warm_out) == 49
    assert np.array_equal(warm_out[:-1], solved[1:])
    assert warm_out[-1] == solved[-1]


def test_mpc_step_rejects_wrong_warm_length():
    with pytest.raises(ValueError):
        mpc_step(np.zeros(4), np.zeros(10), MpcConfig(params=PARAMS))


def test_expert_swings_up_from_hanging():
    expert = MpcExpert(MpcConfig(params=PARAMS))
    state = CartPoleState(0.0, 0.0, np.pi, 0.0)
    for _ in range(500):
        state = step(state, expert.act(state.as_array()), PARAMS)
    assert is_success(state)
    assert abs(state.theta) < 0.05


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(states=np.zeros((5, 4)), controls=np.zeros((5, 1)))
    with pytest.raises(ValueError):
        Trajectory(states=np.full((5, 4), np.nan), controls=np.zeros((4, 1)))

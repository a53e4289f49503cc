"""Finite-horizon iLQG/DDP trajectory optimizer and a receding-horizon
MPC driver built on it.

Dynamics are supplied as a continuous-time derivative function
``f(X, U) -> dX`` that broadcasts over leading axes (X: (..., n),
U: (..., m)); discretization is explicit Euler with step ``dt``. The
backward pass runs on a first-order (iLQG) expansion of the dynamics with
Levenberg-Marquardt regularization of Quu; the forward pass replays the
gains against the nonlinear dynamics with control clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cartpole import CartPoleParams, derivatives_array

__all__ = [
    "NotPositiveDefiniteError",
    "InvalidHorizonError",
    "Trajectory",
    "Gains",
    "ValueExpansion",
    "QExpansion",
    "CostSpec",
    "SwingUpCost",
    "QuadraticCost",
    "cartpole_dynamics",
    "fd_jacobians",
    "linearize",
    "q_expansion",
    "backward_pass",
    "forward_pass",
    "rollout",
    "trajectory_cost",
    "ddp_solve",
    "DdpResult",
    "MpcConfig",
    "mpc_step",
    "MpcExpert",
]

FD_STEP = 1e-5
LAMBDA_MAX = 1e10


class NotPositiveDefiniteError(RuntimeError):
    """Quu (after regularization) failed its Cholesky factorization."""

    def __init__(self, step_index: int):
        super().__init__(f"Quu not positive definite at step {step_index}")
        self.step_index = step_index


class InvalidHorizonError(ValueError):
    pass


@dataclass
class Trajectory:
    """Nominal states (H, n) and controls (H-1, m)."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ValueError("states and controls must be 2-D arrays")
        if len(self.states) != len(self.controls) + 1:
            raise ValueError(
                f"need one more state than control, got {len(self.states)} states "
                f"and {len(self.controls)} controls"
            )
        if not (np.isfinite(self.states).all() and np.isfinite(self.controls).all()):
            raise ValueError("trajectory contains non-finite entries")

    @property
    def horizon(self) -> int:
        return len(self.states)


@dataclass
class Gains:
    """Per-step feedback matrices (H-1, m, n) and feedforward vectors (H-1, m)."""

    feedback: np.ndarray
    feedforward: np.ndarray


@dataclass
class ValueExpansion:
    """Quadratic model of the cost-to-go at one step."""

    V: float
    Vx: np.ndarray
    Vxx: np.ndarray


@dataclass
class QExpansion:
    """First/second derivatives of the one-step action-value expansion."""

    Q0: float
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Quu: np.ndarray
    Qux: np.ndarray


@dataclass(frozen=True)
class CostSpec:
    """Weights of the cart-pole swing-up cost.

    Stage cost: pos_w*x^2 + angle_w*(1-cos theta) + vel_w*xdot^2
    + angvel_w*thetadot^2 + control_w*u^2; the terminal cost is
    terminal_scale times the state terms. 1-cos keeps the angle term
    smooth across the +-pi wrap with 0 upright.
    """

    pos_w: float = 1.0
    angle_w: float = 10.0
    vel_w: float = 0.1
    angvel_w: float = 0.1
    control_w: float = 0.001
    terminal_scale: float = 10.0

    def __post_init__(self):
        weights = (self.pos_w, self.angle_w, self.vel_w, self.angvel_w, self.terminal_scale)
        if any(w < 0 for w in weights):
            raise ValueError("cost weights must be >= 0")
        if self.control_w <= 0:
            raise ValueError("control_w must be > 0 so Quu is invertible")

    def build(self) -> "SwingUpCost":
        return SwingUpCost(self)


class SwingUpCost:
    """Batched stage/terminal cost and analytic derivatives for swing-up."""

    def __init__(self, spec: CostSpec):
        self.spec = spec

    def _state_terms(self, X):
        s = self.spec
        return (
            s.pos_w * X[..., 0] ** 2
            + s.vel_w * X[..., 1] ** 2
            + s.angle_w * (1.0 - np.cos(X[..., 2]))
            + s.angvel_w * X[..., 3] ** 2
        )

    def stage(self, X, U):
        return self._state_terms(X) + self.spec.control_w * U[..., 0] ** 2

    def terminal(self, x):
        return self.spec.terminal_scale * float(self._state_terms(np.asarray(x)))

    def _state_derivs(self, X):
        s = self.spec
        T = X.shape[0]
        gx = np.empty((T, 4))
        gx[:, 0] = 2.0 * s.pos_w * X[:, 0]
        gx[:, 1] = 2.0 * s.vel_w * X[:, 1]
        gx[:, 2] = s.angle_w * np.sin(X[:, 2])
        gx[:, 3] = 2.0 * s.angvel_w * X[:, 3]
        gxx = np.zeros((T, 4, 4))
        gxx[:, 0, 0] = 2.0 * s.pos_w
        gxx[:, 1, 1] = 2.0 * s.vel_w
        gxx[:, 2, 2] = s.angle_w * np.cos(X[:, 2])
        gxx[:, 3, 3] = 2.0 * s.angvel_w
        return gx, gxx

    def stage_derivs(self, X, U):
        T = X.shape[0]
        lx, lxx = self._state_derivs(X)
        lu = 2.0 * self.spec.control_w * U
        luu = np.broadcast_to(
            np.array([[2.0 * self.spec.control_w]]), (T, 1, 1)
        ).copy()
        lux = np.zeros((T, 1, 4))
        return lx, lu, lxx, luu, lux

    def terminal_derivs(self, x):
        gx, gxx = self._state_derivs(np.asarray(x)[None, :])
        k = self.spec.terminal_scale
        return k * gx[0], k * gxx[0]


class QuadraticCost:
    """Generic LQ cost 0.5*(x-goal)'Q(x-goal) + 0.5*u'Ru with terminal 0.5*x'Qf*x."""

    def __init__(self, Q, R, Qf, goal=None):
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)
        self.Qf = np.asarray(Qf, dtype=float)
        n = self.Q.shape[0]
        self.goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=float)

    def stage(self, X, U):
        dx = X - self.goal
        return 0.5 * (np.einsum("ti,ij,tj->t", dx, self.Q, dx) + np.einsum("ti,ij,tj->t", U, self.R, U))

    def terminal(self, x):
        dx = np.asarray(x) - self.goal
        return 0.5 * float(dx @ self.Qf @ dx)

    def stage_derivs(self, X, U):
        T = X.shape[0]
        dx = X - self.goal
        lx = dx @ self.Q.T
        lu = U @ self.R.T
        lxx = np.broadcast_to(self.Q, (T,) + self.Q.shape).copy()
        luu = np.broadcast_to(self.R, (T,) + self.R.shape).copy()
        lux = np.zeros((T, self.R.shape[0], self.Q.shape[0]))
        return lx, lu, lxx, luu, lux

    def terminal_derivs(self, x):
        dx = np.asarray(x) - self.goal
        return self.Qf @ dx, self.Qf.copy()


def cartpole_dynamics(params: CartPoleParams):
    """Continuous cart-pole dynamics in the package's (X, U) calling convention."""

    def f(X, U):
        return derivatives_array(X, np.asarray(U)[..., 0], params)

    return f


def fd_jacobians(f, X, U, step=FD_STEP):
    """Central-difference Jacobians of f along a trajectory.

    X: (T, n), U: (T, m). Returns A (T, n, n) and B (T, n, m) with
    A[t][i, j] = d f_i / d x_j at (X[t], U[t]).
    """
    T, n = X.shape
    m = U.shape[1]
    ex = np.eye(n) * step
    Xp = (X[:, None, :] + ex).reshape(T * n, n)
    Xm = (X[:, None, :] - ex).reshape(T * n, n)
    Ur = np.broadcast_to(U[:, None, :], (T, n, m)).reshape(T * n, m)
    A = (f(Xp, Ur) - f(Xm, Ur)).reshape(T, n, n).transpose(0, 2, 1) / (2.0 * step)
    eu = np.eye(m) * step
    Up = (U[:, None, :] + eu).reshape(T * m, m)
    Um = (U[:, None, :] - eu).reshape(T * m, m)
    Xr = np.broadcast_to(X[:, None, :], (T, m, n)).reshape(T * m, n)
    B = (f(Xr, Up) - f(Xr, Um)).reshape(T, m, n).transpose(0, 2, 1) / (2.0 * step)
    return A, B


def linearize(f, x, u, dt, step=FD_STEP):
    """Discrete-time linearization at one point: Phi = I + df/dx*dt, B = df/du*dt."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    A, B = fd_jacobians(f, x[None, :], u[None, :], step)
    return np.eye(len(x)) + A[0] * dt, B[0] * dt


def q_expansion(l_value, lx, lu, lxx, luu, lux, v_next: ValueExpansion, Phi, B, dt, lam=0.0) -> QExpansion:
    """One-step action-value expansion about the nominal point.

    ``lam`` adds Levenberg-Marquardt regularization to Quu.
    """
    m = B.shape[1]
    VxxB = v_next.Vxx @ B
    Qx = lx * dt + Phi.T @ v_next.Vx
    Qu = lu * dt + B.T @ v_next.Vx
    Qxx = lxx * dt + Phi.T @ v_next.Vxx @ Phi
    Qux = lux * dt + (Phi.T @ VxxB).T
    Quu = luu * dt + B.T @ VxxB + lam * np.eye(m)
    return QExpansion(
        Q0=float(l_value * dt + v_next.V),
        Qx=Qx, Qu=Qu, Qxx=Qxx, Quu=Quu, Qux=Qux,
    )


def backward_pass(traj: Trajectory, cost, f, dt, lam=0.0, jacobians=None):
    """Gain computation and value recursion along the nominal trajectory.

    Returns (Gains, [ValueExpansion] of length H). Raises
    NotPositiveDefiniteError when regularized Quu fails Cholesky; the
    caller is expected to escalate ``lam``.
    """
    X, U = traj.states, traj.controls
    T = len(U)
    n, m = X.shape[1], U.shape[1]

    jac = jacobians if jacobians is not None else fd_jacobians
    A, Bc = jac(f, X[:-1], U)
    Phis = np.eye(n) + A * dt
    Bds = Bc * dt

    l_vals = cost.stage(X[:-1], U)
    lx, lu, lxx, luu, lux = cost.stage_derivs(X[:-1], U)

    phix, phixx = cost.terminal_derivs(X[-1])
    value = ValueExpansion(V=cost.terminal(X[-1]), Vx=phix, Vxx=0.5 * (phixx + phixx.T))
    values = [None] * (T + 1)
    values[T] = value
    feedback = np.empty((T, m, n))
    feedforward = np.empty((T, m))

    for t in range(T - 1, -1, -1):
        q = q_expansion(l_vals[t], lx[t], lu[t], lxx[t], luu[t], lux[t], value, Phis[t], Bds[t], dt, lam)
        try:
            np.linalg.cholesky(q.Quu)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(t) from None
        kff = -np.linalg.solve(q.Quu, q.Qu)
        kfb = -np.linalg.solve(q.Quu, q.Qux)
        feedforward[t] = kff
        feedback[t] = kfb
        Vx = q.Qx + q.Qux.T @ kff
        Vxx = q.Qxx + q.Qux.T @ kfb
        value = ValueExpansion(
            V=q.Q0 + 0.5 * float(q.Qu @ kff),
            Vx=Vx,
            Vxx=0.5 * (Vxx + Vxx.T),
        )
        values[t] = value

    return Gains(feedback=feedback, feedforward=feedforward), values


def _clamp(u, force_limit):
    if force_limit is None:
        return u
    return np.clip(u, -force_limit, force_limit)


def rollout(x0, controls, f, dt, force_limit=None) -> Trajectory:
    """Integrate the nonlinear dynamics under a fixed (clamped) control sequence."""
    controls = np.asarray(controls, dtype=float)
    T = len(controls)
    states = np.empty((T + 1, len(x0)))
    states[0] = x0
    clamped = np.empty_like(controls)
    for t in range(T):
        clamped[t] = _clamp(controls[t], force_limit)
        states[t + 1] = states[t] + dt * f(states[t], clamped[t])
    return Trajectory(states=states, controls=clamped)


def forward_pass(traj: Trajectory, gains: Gains, alpha, f, dt, force_limit=None) -> Trajectory:
    """Replay the gains against the nonlinear dynamics with step size alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    X, U = traj.states, traj.controls
    T = len(U)
    new_states = np.empty_like(X)
    new_controls = np.empty_like(U)
    new_states[0] = X[0]
    for t in range(T):
        dx = new_states[t] - X[t]
        u = U[t] + alpha * (gains.feedforward[t] + gains.feedback[t] @ dx)
        u = _clamp(u, force_limit)
        new_controls[t] = u
        new_states[t + 1] = new_states[t] + dt * f(new_states[t], u)
    return Trajectory(states=new_states, controls=new_controls)


def trajectory_cost(traj: Trajectory, cost, dt) -> float:
    return float(np.sum(cost.stage(traj.states[:-1], traj.controls)) * dt + cost.terminal(traj.states[-1]))


@dataclass
class DdpResult:
    trajectory: Trajectory
    gains: Gains
    cost_history: list[float] = field(default_factory=list)
    converged: bool = False
    lam: float = 0.0


def ddp_solve(
    x0,
    u_init,
    horizon,
    dt,
    max_iters,
    alpha,
    f,
    cost,
    force_limit=None,
    lam_init=1e-6,
    jacobians=None,
    rel_tol=1e-6,
) -> DdpResult:
    """Iterate backward/forward passes from an initial control sequence.

    max_iters counts accepted trajectory updates. Within one update the
    solver escalates lam (x10) whenever Quu loses positive definiteness
    or no backtracked step size (alpha halved down to alpha/32) decreases
    the true cost, re-running the backward pass at the stiffer
    regularization; the whole solve aborts once lam exceeds LAMBDA_MAX.
    Accepted updates halve lam. Stops early when an accepted update
    improves the cost by less than rel_tol*max(1, |J|).
    """
    if horizon < 2:
        raise InvalidHorizonError(f"horizon must be >= 2, got {horizon}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    u_init = np.asarray(u_init, dtype=float)
    if len(u_init) != horizon - 1:
        raise ValueError(f"need {horizon - 1} initial controls, got {len(u_init)}")

    traj = rollout(x0, u_init, f, dt, force_limit)
    J = trajectory_cost(traj, cost, dt)
    history = [J]
    gains = Gains(
        feedback=np.zeros((horizon - 1, u_init.shape[1], len(x0))),
        feedforward=np.zeros((horizon - 1, u_init.shape[1])),
    )
    lam = lam_init
    converged = False
    aborted = False

    for _ in range(max_iters):
        accepted = False
        while not accepted and not aborted:
            try:
                gains, _ = backward_pass(traj, cost, f, dt, lam, jacobians)
            except NotPositiveDefiniteError:
                lam = lam * 10.0 if lam > 0 else 1e-6
                aborted = lam > LAMBDA_MAX
                continue
            for a in (alpha * 0.5**k for k in range(6)):
                candidate = forward_pass(traj, gains, a, f, dt, force_limit)
                J_new = trajectory_cost(candidate, cost, dt)
                if J_new <= J:
                    traj = candidate
                    delta = J - J_new
                    J = J_new
                    history.append(J)
                    lam *= 0.5
                    accepted = True
                    break
            if not accepted:
                lam = lam * 10.0 if lam > 0 else 1e-6
                aborted = lam > LAMBDA_MAX
        if aborted:
            break
        if delta < rel_tol * max(1.0, abs(J)):
            converged = True
            break

    return DdpResult(trajectory=traj, gains=gains, cost_history=history, converged=converged, lam=lam)


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon settings for the swing-up expert."""

    params: CartPoleParams = CartPoleParams()
    cost: CostSpec = CostSpec()
    horizon: int = 50
    iters_per_step: int = 2
    alpha: float = 0.8
    lam_init: float = 1e-6

    def __post_init__(self):
        if self.horizon < 2:
            raise InvalidHorizonError(f"horizon must be >= 2, got {self.horizon}")
        if self.iters_per_step < 1:
            raise ValueError("iters_per_step must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


def _receding_step(state, warm, config: MpcConfig, lam_init: float):
    warm = np.asarray(warm, dtype=float)
    if len(warm) != config.horizon - 1:
        raise ValueError(f"warm start must have length {config.horizon - 1}, got {len(warm)}")
    result = ddp_solve(
        np.asarray(state, dtype=float),
        warm.reshape(-1, 1),
        config.horizon,
        config.params.dt,
        config.iters_per_step,
        config.alpha,
        cartpole_dynamics(config.params),
        config.cost.build(),
        force_limit=config.params.force_limit,
        lam_init=lam_init,
    )
    solved = result.trajectory.controls[:, 0]
    control = float(np.clip(solved[0], -config.params.force_limit, config.params.force_limit))
    shifted = np.concatenate([solved[1:], solved[-1:]])
    return control, shifted, result.lam


def mpc_step(state, warm, config: MpcConfig):
    """One receding-horizon step: short DDP solve, apply-first, shift warm start.

    ``warm`` is the (horizon-1,) control sequence carried between calls;
    the returned sequence is the solved one shifted left by one with the
    last entry duplicated.
    """
    control, shifted, _ = _receding_step(state, warm, config, config.lam_init)
    return control, shifted


class MpcExpert:
    """Stateful wrapper around mpc_step carrying warm start and regularizer.

    The trust-region lam persists between receding-horizon steps (floored
    so it can re-escalate cheaply); resetting restores the cold start.
    Not shareable mid-solve across threads; create one instance per rollout.
    """

    LAM_FLOOR = 1e-8

    def __init__(self, config: MpcConfig):
        self.config = config
        self.reset()

    def reset(self):
        self.warm = np.zeros(self.config.horizon - 1)
        self.lam = self.config.lam_init

    def set_plant(self, params: CartPoleParams):
        """Point the internal model at (possibly disturbed) plant parameters."""
        self.config = MpcConfig(
            params=params,
            cost=self.config.cost,
            horizon=self.config.horizon,
            iters_per_step=self.config.iters_per_step,
            alpha=self.config.alpha,
            lam_init=self.config.lam_init,
        )

    def act(self, state) -> float:
        control, self.warm, lam = _receding_step(state, self.warm, self.config, self.lam)
        self.lam = max(min(lam, LAMBDA_MAX), self.LAM_FLOOR)
        return control

"""Gradient-flow integration for layered diagonal networks.

Trains the layers by the continuous-time dynamic

    du^j/dt = -(prod_{k != j} u^k) * grad L(theta),   theta = prod_j u^j,

with a classical fixed-step RK4 scheme by default and an optional
step-doubling adaptive mode for stiff, large-initialization runs. Along the
trajectory the accumulated dual variable

    xi(t) = -integral_0^t grad L(theta(s)) ds

is built up by trapezoidal quadrature on the full step grid (before any
snapshot decimation), together with theta and the loss value per snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LayerStack, leave_one_out_products

# Abort threshold on |theta|_inf: gradient flow on a quadratic cannot
# diverge, so crossing this signals discretization failure.
DIVERGENCE_LIMIT = 1e12

_MIN_STEP_FRACTION = 1e-14


class DivergenceError(RuntimeError):
    """State left the finite/bounded region; retry with a smaller step."""

    def __init__(self, t: float, message: str | None = None):
        self.time = t
        super().__init__(message or f"integration diverged at t={t:.6g}; reduce the step size")


class StepUnderflowError(RuntimeError):
    """Adaptive controller drove the step below the representable floor."""

    def __init__(self, t: float):
        self.time = t
        super().__init__(f"adaptive step size underflow at t={t:.6g}")


@dataclass(frozen=True)
class StepController:
    """Integrator settings.

    ``mode`` is ``"fixed"`` (RK4 with step ``h``) or ``"adaptive"``
    (step-doubling error control starting from ``h``). ``max_points`` caps
    the number of stored snapshots; the dual-variable quadrature always runs
    on the undecimated grid. ``stop_gap``, when set, ends the run early once
    ``loss - optimal_value`` drops to that level.
    """

    mode: str = "fixed"
    h: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-10
    t_max: float = 10.0
    max_points: int = 5000
    stop_gap: float | None = None

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown integrator mode {self.mode!r}")
        if not (self.h > 0 and self.rtol > 0 and self.atol > 0):
            raise ValueError("step size and tolerances must be positive")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.max_points < 2:
            raise ValueError("max_points must be at least 2")


@dataclass(eq=False)
class Trajectory:
    """Recorded flow: times, layer snapshots, theta, dual variable, loss."""

    times: np.ndarray    # (K,)
    layers: np.ndarray   # (K, L, d)
    thetas: np.ndarray   # (K, d)
    xi: np.ndarray       # (K, d)
    losses: np.ndarray   # (K,)
    loss: object = None  # objective the flow was run on

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def num_layers(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def stack_at(self, k: int) -> LayerStack:
        return LayerStack(self.layers[k])

    @property
    def final_stack(self) -> LayerStack:
        return self.stack_at(len(self) - 1)

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    def write_csv(self, path, include_layers: bool = False) -> None:
        write_trajectory_csv(self, path, include_layers=include_layers)


def layer_rhs(stack: LayerStack, loss) -> np.ndarray:
    """Right-hand side of the layer dynamic, one row per layer."""
    g = loss.gradient(np.prod(stack.layers, axis=0))
    return -leave_one_out_products(stack.layers) * g


def theta_rhs(stack: LayerStack, loss) -> np.ndarray:
    """Velocity of theta: minus the mobility diagonal times the gradient."""
    loo = leave_one_out_products(stack.layers)
    m = np.sum(loo * loo, axis=0)
    return -m * loss.gradient(np.prod(stack.layers, axis=0))


def _eval_point(y: np.ndarray, loss) -> tuple[np.ndarray, float, np.ndarray]:
    """theta, loss value and gradient at a grid point."""
    theta = np.prod(y, axis=0)
    vg = getattr(loss, "value_and_gradient", None)
    if vg is not None:
        val, g = vg(theta)
    else:
        val, g = loss.value(theta), loss.gradient(theta)
    return theta, val, g


def _guard(y: np.ndarray, theta: np.ndarray, t: float) -> None:
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(theta))):
        raise DivergenceError(t, f"non-finite state at t={t:.6g}; reduce the step size")
    if np.max(np.abs(theta)) > DIVERGENCE_LIMIT:
        raise DivergenceError(t)


def _decimate(arrays: list[np.ndarray], max_points: int) -> list[np.ndarray]:
    k = arrays[0].shape[0]
    if k <= max_points:
        return arrays
    stride = math.ceil(k / (max_points - 1))
    idx = list(range(0, k, stride))
    if idx[-1] != k - 1:
        idx.append(k - 1)
    return [a[idx] for a in arrays]


class _Recorder:
    def __init__(self, loss):
        self.loss = loss
        self.times: list[float] = []
        self.snaps: list[np.ndarray] = []
        self.thetas: list[np.ndarray] = []
        self.xis: list[np.ndarray] = []
        self.losses: list[float] = []

    def add(self, t, y, theta, val, xi):
        self.times.append(t)
        self.snaps.append(y.copy())
        self.thetas.append(theta)
        self.xis.append(xi.copy())
        self.losses.append(val)

    def finish(self, max_points: int) -> Trajectory:
        arrays = [
            np.asarray(self.times),
            np.asarray(self.snaps),
            np.asarray(self.thetas),
            np.asarray(self.xis),
            np.asarray(self.losses),
        ]
        times, snaps, thetas, xis, losses = _decimate(arrays, max_points)
        return Trajectory(times, snaps, thetas, xis, losses, loss=self.loss)


def integrate(stack0: LayerStack, loss, ctrl: StepController) -> Trajectory:
    """Run gradient flow on the layers from ``stack0`` until ``ctrl.t_max``.

    Snapshots are recorded at every accepted step (then decimated to at most
    ``ctrl.max_points``); xi is accumulated by the trapezoidal rule on the
    accepted grid. Deterministic given its inputs.

    Raises ``DivergenceError`` when the state leaves the finite region and,
    in adaptive mode, ``StepUnderflowError`` when no acceptable step exists.
    """

    def rhs(y: np.ndarray) -> np.ndarray:
        theta = np.prod(y, axis=0)
        return -leave_one_out_products(y) * loss.gradient(theta)

    def rhs_from_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
        return -leave_one_out_products(y) * g

    return _drive(stack0.layers, loss, ctrl, rhs, rhs_from_grad, _eval_point)


def integrate_redundant(u0: np.ndarray, num_layers: int, loss, ctrl: StepController) -> Trajectory:
    """Run gradient flow for the tied parameterization ``theta = u**L``.

    All ``L`` layers share the single weight vector ``u``, so the dynamic is
    ``du/dt = -L * u**(L-1) * grad L(theta)``. Snapshots replicate ``u``
    across the layer axis. Requires ``u0 > 0`` componentwise; the flow is
    aborted if the state leaves the positive orthant (which can only happen
    through discretization error).
    """
    u0 = np.asarray(u0, dtype=float)
    if num_layers < 3:
        raise ValueError("redundant flow expects at least 3 layers")
    if u0.ndim != 1 or not np.all(u0 > 0):
        raise ValueError("u0 must be a strictly positive vector")
    L = num_layers

    def eval_point(y, loss_):
        tiled = np.broadcast_to(y[0], (L, y.shape[1]))
        theta = np.prod(tiled, axis=0)
        vg = getattr(loss_, "value_and_gradient", None)
        if vg is not None:
            val, g = vg(theta)
        else:
            val, g = loss_.value(theta), loss_.gradient(theta)
        return theta, val, g

    def rhs(y):
        u = y[0]
        g = loss.gradient(u ** L)
        return (-L * u ** (L - 1) * g)[None, :]

    def rhs_from_grad(y, g):
        return (-L * y[0] ** (L - 1) * g)[None, :]

    traj = _drive(u0[None, :], loss, ctrl, rhs, rhs_from_grad, eval_point,
                  positive=True)
    snaps = np.repeat(traj.layers, L, axis=1)
    thetas = np.prod(snaps, axis=1)
    return Trajectory(traj.times, snaps, thetas, traj.xi, traj.losses, loss=loss)


def _rk4_step(y, h, k1, rhs):
    k2 = rhs(y + (0.5 * h) * k1)
    k3 = rhs(y + (0.5 * h) * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _drive(y0, loss, ctrl, rhs, rhs_from_grad, eval_point, positive=False):
    y = np.array(y0, dtype=float)
    t = 0.0
    xi = np.zeros(y.shape[1])
    theta, val, g = eval_point(y, loss)
    rec = _Recorder(loss)
    rec.add(t, y, theta, val, xi)
    t_end = ctrl.t_max
    stop_gap = ctrl.stop_gap
    optimum = getattr(loss, "optimal_value", 0.0)

    if ctrl.mode == "fixed":
        h = ctrl.h
        while t < t_end - 1e-12 * t_end:
            h_k = min(h, t_end - t)
            with np.errstate(over="ignore", invalid="ignore"):
                k1 = rhs_from_grad(y, g)
                y = _rk4_step(y, h_k, k1, rhs)
                t += h_k
                theta, val, g_new = eval_point(y, loss)
            _guard(y, theta, t)
            if positive and np.any(y <= 0):
                raise DivergenceError(t, f"state left the positive orthant at t={t:.6g}; reduce the step size")
            xi = xi - (0.5 * h_k) * (g + g_new)
            g = g_new
            rec.add(t, y, theta, val, xi)
            if stop_gap is not None and val - optimum <= stop_gap:
                break
        return rec.finish(ctrl.max_points)

    # adaptive: step doubling with a 4th-order error estimate
    h = ctrl.h
    while t < t_end - 1e-12 * t_end:
        h = min(h, t_end - t)
        k1 = rhs_from_grad(y, g)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            big = _rk4_step(y, h, k1, rhs)
            mid = _rk4_step(y, 0.5 * h, k1, rhs)
            half = _rk4_step(mid, 0.5 * h, rhs(mid), rhs)
            delta = (half - big) / 15.0
            scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(y), np.abs(half))
            ratio = float(np.max(np.abs(delta) / scale))
        if not np.isfinite(ratio):
            ratio = np.inf
        if ratio <= 1.0:
            y = half
            t_new = t + h
            theta, val, g_new = eval_point(y, loss)
            _guard(y, theta, t_new)
            if positive and np.any(y <= 0):
                raise DivergenceError(t_new, f"state left the positive orthant at t={t_new:.6g}")
            xi = xi - (0.5 * h) * (g + g_new)
            g = g_new
            t = t_new
            rec.add(t, y, theta, val, xi)
            if stop_gap is not None and val - optimum <= stop_gap:
                break
        factor = 5.0 if ratio == 0.0 else 0.9 * ratio ** -0.2
        h *= min(max(factor, 0.2), 5.0)
        if h < _MIN_STEP_FRACTION * max(t, 1.0):
            raise StepUnderflowError(t)
    return rec.finish(ctrl.max_points)


def write_trajectory_csv(traj: Trajectory, path, include_layers: bool = False) -> None:
    """Write ``t,loss,theta_1..theta_d,xi_1..xi_d[,u_j_i...]`` as UTF-8 CSV."""
    d = traj.dim
    cols = ["t", "loss"]
    cols += [f"theta_{i}" for i in range(1, d + 1)]
    cols += [f"xi_{i}" for i in range(1, d + 1)]
    if include_layers:
        cols += [
            f"u_{j}_{i}"
            for j in range(1, traj.num_layers + 1)
            for i in range(1, d + 1)
        ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(traj)):
            row = [traj.times[k], traj.losses[k], *traj.thetas[k], *traj.xi[k]]
            if include_layers:
                row.extend(traj.layers[k].reshape(-1))
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

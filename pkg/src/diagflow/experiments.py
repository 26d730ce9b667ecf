"""Experiment runners: node crossings, convergence rate, implicit bias.

Three reproducible desk-scale experiments plus the numerical tools they
need (the smallest-nonzero-eigenvalue PL constant, the exponential rate
check, a damped Newton solver for the constrained-entropy first-order
system, and an exact support-enumeration minimal-L1 oracle). Every run is
deterministic given its configuration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .conservation import (
    MinLayerIndex,
    SigmaBound,
    locate_min_layers,
    sigma_lower_bound,
    sign_census,
    SignCensus,
)
from .flow import StepController, Trajectory, integrate, integrate_redundant
from .model import InitScheme, LayerStack, QuadraticLoss, init_layers
from .mirror import HyperbolicEntropy, PowerEntropy
from .report import write_rows_csv

GAP_TARGET = 1e-6
FLOW_LIMIT_GAP = 1e-10

# Relative eigenvalue cutoff separating the zero modes of X X^T.
_EIG_CUTOFF = 1e-12

# Enumeration guard for the minimal-L1 oracle.
_MAX_L1_DIM = 16


class NewtonError(RuntimeError):
    """Damped Newton failed to reach the target residual."""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Problem sizes, seed and integrator knobs shared by the runners."""

    n: int = 10
    dim: int = 5
    layers: int = 4
    seed: int = 0
    t_max: float = 10.0
    step: float = 1e-3
    scheme: str = "uniform"
    scale: float = 1.0
    values: np.ndarray | None = None
    output: str | None = None
    diagnostics: str | None = None

    def __post_init__(self):
        if self.n < 1 or self.dim < 1:
            raise ValueError("problem sizes must be at least 1")
        if self.layers < 2:
            raise ValueError("at least 2 layers are required")
        if self.t_max <= 0 or self.step <= 0:
            raise ValueError("t_max and step must be positive")

    def init_scheme(self) -> InitScheme:
        return InitScheme(self.scheme, scale=self.scale, values=self.values)


def make_problem(n: int, dim: int, seed: int, x_scale: float = 1.0,
                 positive: bool = False) -> QuadraticLoss:
    """Random dense least-squares instance; entries uniform and seeded."""
    rng = np.random.default_rng(seed)
    if positive:
        X = (1.0 - rng.random((n, dim))) * x_scale
        y = 1.0 - rng.random(n)
    else:
        X = rng.uniform(-1.0, 1.0, (n, dim)) * x_scale
        y = rng.uniform(-1.0, 1.0, n)
    return QuadraticLoss(X, y)


def pl_constant(loss: QuadraticLoss) -> float:
    """Gradient-dominance constant of the quadratic objective.

    Equals twice the smallest nonzero eigenvalue of ``X X^T``; with it,
    ``2 mu (value - optimal_value) <= |grad|^2`` holds everywhere.
    """
    w = np.linalg.eigvalsh(loss.X @ loss.X.T)
    w_max = w[-1] if w.size else 0.0
    if w_max <= 0.0:
        raise ValueError("design matrix is identically zero")
    nonzero = w[w > _EIG_CUTOFF * w_max]
    return float(2.0 * nonzero[0])


@dataclass(frozen=True, eq=False)
class RateCheck:
    """Pointwise verdict of the exponential suboptimality bound."""

    sigma: float
    mu: float
    gap0: float
    violations: int
    atol: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def rate_check(traj: Trajectory, sigma: float, mu: float,
               atol: float | None = None) -> RateCheck:
    """Count grid times where the gap exceeds ``exp(-2 sigma mu t) * gap0``.

    ``atol`` absorbs the float noise of ``loss - optimal_value`` once the
    gap reaches the rounding floor of the subtraction; it defaults to
    1e-12 times the loss scale and is far below any gap of interest.
    """
    optimum = getattr(traj.loss, "optimal_value", 0.0)
    gaps = traj.losses - optimum
    gap0 = float(gaps[0])
    if atol is None:
        atol = 1e-12 * max(float(traj.losses[0]), optimum, 1.0)
    bound = np.exp(-2.0 * sigma * mu * traj.times) * gap0
    violations = int(np.sum(gaps > bound + atol))
    return RateCheck(sigma=float(sigma), mu=float(mu), gap0=gap0,
                     violations=violations, atol=float(atol))


def time_to_gap(traj: Trajectory, threshold: float) -> float | None:
    """First grid time whose suboptimality gap is at or below ``threshold``."""
    optimum = getattr(traj.loss, "optimal_value", 0.0)
    hit = np.nonzero(traj.losses - optimum <= threshold)[0]
    return float(traj.times[hit[0]]) if hit.size else None


# ---------------------------------------------------------------------------
# convergence experiment


@dataclass(frozen=True, eq=False)
class ConvergenceResult:
    scale: float
    rate: RateCheck
    sigma: SigmaBound
    mu: float
    time_to_target: float | None
    trajectory: Trajectory


def run_convergence(cfg: ExperimentConfig, gap_target: float = GAP_TARGET) -> ConvergenceResult:
    """Integrate one seeded run and check the exponential rate bound.

    Uses the adaptive integrator: large initializations make the early
    dynamic stiff. Writes ``t,loss_gap,log_loss_gap,bound`` when
    ``cfg.output`` is set.
    """
    loss = make_problem(cfg.n, cfg.dim, cfg.seed)
    stack0 = init_layers(cfg.dim, cfg.layers, cfg.init_scheme(), seed=cfg.seed + 1)
    idx = locate_min_layers(stack0)
    sigma = sigma_lower_bound(stack0, idx)
    mu = pl_constant(loss)
    # t_max is a safety horizon; normally the run ends once the gap falls
    # three decades below the reporting target
    ctrl = StepController(mode="adaptive", h=cfg.step, t_max=cfg.t_max,
                          stop_gap=gap_target * 1e-3)
    traj = integrate(stack0, loss, ctrl)
    rc = rate_check(traj, sigma.sigma, mu)
    ttg = time_to_gap(traj, gap_target)
    if cfg.output:
        gaps = traj.losses - loss.optimal_value
        bound = np.exp(-2.0 * sigma.sigma * mu * traj.times) * gaps[0]
        log_gap = np.log(np.maximum(gaps, 1e-300))
        rows = zip(traj.times, gaps, log_gap, bound)
        write_rows_csv(cfg.output, ["t", "loss_gap", "log_loss_gap", "bound"], rows)
    return ConvergenceResult(scale=cfg.scale, rate=rc, sigma=sigma, mu=mu,
                             time_to_target=ttg, trajectory=traj)


def convergence_scale_sweep(cfg: ExperimentConfig,
                            scales=(1.0, 1.4, 1.8),
                            gap_target: float = GAP_TARGET) -> list[ConvergenceResult]:
    """The same seed run at several initialization scales."""
    out = []
    for s in scales:
        sub = replace(cfg, scale=float(s), output=None, diagnostics=None)
        out.append(run_convergence(sub, gap_target=gap_target))
    return out


# ---------------------------------------------------------------------------
# crossings experiment


@dataclass(frozen=True, eq=False)
class CrossingsResult:
    census: SignCensus
    index: MinLayerIndex
    trajectory: Trajectory
    coordinate: int


def run_crossings(cfg: ExperimentConfig, coordinate: int = 0) -> CrossingsResult:
    """Track per-layer node paths and census their sign changes.

    Writes ``t,u_1_i,...,u_L_i`` for the chosen coordinate (1-based in the
    header) when ``cfg.output`` is set.
    """
    loss = make_problem(cfg.n, cfg.dim, cfg.seed)
    stack0 = init_layers(cfg.dim, cfg.layers, cfg.init_scheme(), seed=cfg.seed + 1)
    idx = locate_min_layers(stack0)
    ctrl = StepController(mode="fixed", h=cfg.step, t_max=cfg.t_max)
    traj = integrate(stack0, loss, ctrl)
    census = sign_census(traj, idx)
    if cfg.output:
        header = ["t"] + [f"u_{j}_{coordinate + 1}" for j in range(1, cfg.layers + 1)]
        rows = (
            [traj.times[k], *traj.layers[k, :, coordinate]]
            for k in range(len(traj))
        )
        write_rows_csv(cfg.output, header, rows)
    return CrossingsResult(census=census, index=idx, trajectory=traj,
                           coordinate=coordinate)


# ---------------------------------------------------------------------------
# constrained-entropy first-order system (implicit bias)


@dataclass(frozen=True, eq=False)
class KktSolution:
    """Stationary point of the entropy over the interpolation set."""

    nu: np.ndarray            # dual vector, length n
    theta: np.ndarray         # primal candidate, length d
    residual: float           # |X theta - y|_inf
    kkt_residual: float       # |grad Q(theta) - dual_scale X^T nu|_inf
    iterations: int


def solve_kkt(loss: QuadraticLoss, entropy, tol: float = 1e-10,
              max_iter: int = 50) -> KktSolution:
    """Damped Newton on ``F(nu) = X theta_from_xi(X^T nu) - y``.

    The iteration backtracks (halving with an Armijo decrease on ``|F|^2``)
    and treats domain violations or overflow as infinite merit. On success
    the returned theta satisfies both first-order conditions by
    construction. Raises ``NewtonError`` on stagnation or after
    ``max_iter`` iterations, ``numpy.linalg.LinAlgError`` if the Jacobian
    is singular.
    """
    X, y = loss.X, loss.y
    nu = np.zeros(loss.n)

    def eval_f(nu_):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                theta = entropy.theta_from_xi(X.T @ nu_)
                f = X @ theta - y
        except ValueError:
            return None
        return f if np.all(np.isfinite(f)) else None

    f = eval_f(nu)
    if f is None:
        raise NewtonError("initial point is outside the map's domain", math.inf)
    for it in range(max_iter):
        res = float(np.max(np.abs(f)))
        if res <= tol:
            theta = entropy.theta_from_xi(X.T @ nu)
            kkt_res = float(np.max(np.abs(
                entropy.grad(theta) - entropy.dual_scale * (X.T @ nu)
            )))
            return KktSolution(nu=nu, theta=theta, residual=res,
                               kkt_residual=kkt_res, iterations=it)
        slope = entropy.dtheta_dxi(X.T @ nu)
        with np.errstate(over="ignore", invalid="ignore"):
            J = X @ (slope[:, None] * X.T)
        if not np.all(np.isfinite(J)):
            raise NewtonError("jacobian is not finite", res)
        step = np.linalg.solve(J, -f)
        merit = float(f @ f)
        t = 1.0
        while True:
            f_new = eval_f(nu + t * step)
            if f_new is not None:
                with np.errstate(over="ignore"):
                    merit_new = float(f_new @ f_new)
                if np.isfinite(merit_new) and merit_new <= (1.0 - 1e-4 * t) * merit:
                    break
            t *= 0.5
            if t < 1e-12:
                raise NewtonError("backtracking stalled", res)
        nu = nu + t * step
        f = f_new
    raise NewtonError(f"no convergence within {max_iter} iterations",
                      float(np.max(np.abs(f))))


def min_l1_norm(X: np.ndarray, y: np.ndarray,
                feas_tol: float = 1e-9) -> tuple[float, np.ndarray]:
    """Exact minimal L1 norm over ``{theta : X theta = y}`` at desk scale.

    Enumerates candidate supports of size at most n (the minimum is
    attained on such a vertex), solves each equality-constrained
    subproblem, and keeps the best feasible one. Exact but exponential in
    the dimension; guarded accordingly.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if d > _MAX_L1_DIM:
        raise ValueError(f"support enumeration is desk-scale only (dim <= {_MAX_L1_DIM})")
    y_scale = 1.0 + float(np.max(np.abs(y))) if y.size else 1.0
    best = math.inf
    best_theta: np.ndarray | None = None
    for k in range(0, min(n, d) + 1):
        for support in itertools.combinations(range(d), k):
            s = list(support)
            if k == 0:
                theta_s = np.zeros(0)
                res = float(np.max(np.abs(y))) if y.size else 0.0
            else:
                theta_s, *_ = np.linalg.lstsq(X[:, s], y, rcond=None)
                res = float(np.max(np.abs(X[:, s] @ theta_s - y)))
            if res <= feas_tol * y_scale:
                value = float(np.sum(np.abs(theta_s)))
                if value < best:
                    best = value
                    best_theta = np.zeros(d)
                    best_theta[s] = theta_s
    if best_theta is None:
        raise ValueError("no feasible support found: y is not in the range of X")
    return best, best_theta


# ---------------------------------------------------------------------------
# implicit-bias experiment


@dataclass(frozen=True, eq=False)
class BiasRow:
    alpha: float
    l1_norm: float
    l1_min: float
    linf_mismatch: float
    theta_flow: np.ndarray
    theta_kkt: np.ndarray
    flow_gap: float
    trajectory: Trajectory
    entropy: object


@dataclass(frozen=True, eq=False)
class BiasResult:
    rows: tuple
    loss: QuadraticLoss

    @property
    def max_mismatch(self) -> float:
        return max(r.linf_mismatch for r in self.rows)


def run_bias(cfg: ExperimentConfig, alphas=(1.0, 0.1, 0.01),
             model: str = "two_layer") -> BiasResult:
    """Flow limit versus entropy-constrained stationary point, per scale.

    Needs an underdetermined instance (n < dim) so the interpolation set is
    a continuum. For the two-layer model the initialization is
    ``u = alpha * 1`` against a zero layer (uniform curvature across
    coordinates, so the large-alpha limit is the plain minimum-L2
    interpolator); the tied deep model draws a positive initialization and
    positive data. The flow runs adaptively until the loss gap falls below
    ``FLOW_LIMIT_GAP`` or ``cfg.t_max`` is reached.

    Writes ``alpha,l1_norm,l1_min,linf_mismatch`` when ``cfg.output`` is set.
    """
    if cfg.n >= cfg.dim:
        raise ValueError("bias experiment expects an underdetermined instance (n < dim)")
    if model == "redundant":
        # the tied model lives on the positive orthant, so the target must
        # be the image of a positive coefficient vector to be reachable
        rng_p = np.random.default_rng(cfg.seed)
        X = 1.0 - rng_p.random((cfg.n, cfg.dim))
        loss = QuadraticLoss(X, X @ (0.5 + rng_p.random(cfg.dim)))
    elif model == "two_layer":
        loss = make_problem(cfg.n, cfg.dim, cfg.seed)
    else:
        raise ValueError(f"unknown bias model {model!r}")
    l1_min, _ = min_l1_norm(loss.X, loss.y)
    rng = np.random.default_rng(cfg.seed + 1)
    base_positive = 0.5 + 0.5 * rng.random(cfg.dim)

    rows = []
    for alpha in alphas:
        # only the end state matters here; keep stored trajectories slim
        ctrl = StepController(mode="adaptive", h=cfg.step, t_max=cfg.t_max,
                              stop_gap=FLOW_LIMIT_GAP, max_points=2000)
        if model == "two_layer":
            u0 = np.full(cfg.dim, float(alpha))
            v0 = np.zeros(cfg.dim)
            stack0 = LayerStack(np.stack([v0, u0]))
            entropy = HyperbolicEntropy(u0, v0)
            traj = integrate(stack0, loss, ctrl)
        else:
            u0 = base_positive * float(alpha)
            entropy = PowerEntropy(u0, cfg.layers)
            traj = integrate_redundant(u0, cfg.layers, loss, ctrl)
        theta_flow = traj.final_theta
        sol = solve_kkt(loss, entropy)
        mismatch = float(np.max(np.abs(theta_flow - sol.theta)))
        rows.append(BiasRow(
            alpha=float(alpha),
            l1_norm=float(np.sum(np.abs(theta_flow))),
            l1_min=l1_min,
            linf_mismatch=mismatch,
            theta_flow=theta_flow,
            theta_kkt=sol.theta,
            flow_gap=float(traj.losses[-1] - loss.optimal_value),
            trajectory=traj,
            entropy=entropy,
        ))
    if cfg.output:
        write_rows_csv(
            cfg.output,
            ["alpha", "l1_norm", "l1_min", "linf_mismatch"],
            ([r.alpha, r.l1_norm, r.l1_min, r.linf_mismatch] for r in rows),
        )
    return BiasResult(rows=tuple(rows), loss=loss)

"""Closed-form mirror maps and mirror-structure residuals.

Two parameterizations admit an explicit convex entropy whose gradient
inverts the map from the accumulated dual variable xi to theta:

* the two-layer diagonal network ``theta = u * v`` (hyperbolic-sine map),
* the tied deep network ``theta = u**L`` on the positive orthant
  (power map), for L >= 3.

For deeper untied networks no explicit entropy is computed here; the
first-order mirror identity is certified directly on trajectories via
``mirror_residual_general``, which needs no entropy at all.

Entropy normalizations are fixed by the defining identity
``grad Q(theta) = dual_scale * xi_from_theta(theta)``; the finite-difference
tests pin that identity rather than any particular constant convention.
"""

from __future__ import annotations

import numpy as np

from .conservation import SingularMobilityError
from .flow import Trajectory
from .model import leave_one_out_products

DELTA0_RTOL = 1e-12


class HyperbolicEntropy:
    """Mirror map of the two-layer diagonal network ``theta = u * v``.

    Built from the initialization: ``delta0 = |u0^2 - v0^2|`` (must be
    strictly positive in every coordinate) and the log-ratio shift
    ``log |(u0 + v0) / (u0 - v0)|``. The dual map sends xi to
    ``delta0/2 * sinh(2 xi + shift)``.
    """

    dual_scale = 1.0

    def __init__(self, u0, v0):
        u0 = np.asarray(u0, dtype=float)
        v0 = np.asarray(v0, dtype=float)
        if u0.shape != v0.shape or u0.ndim != 1:
            raise ValueError("u0 and v0 must be equal-length vectors")
        delta0 = np.abs(u0 ** 2 - v0 ** 2)
        floor = DELTA0_RTOL * np.maximum(u0 ** 2, v0 ** 2)
        if np.any(delta0 <= 0) or np.any(delta0 < floor):
            raise ValueError(
                "|u0| and |v0| coincide (or nearly so) in some coordinate; "
                "the map is singular there"
            )
        self.u0 = u0
        self.v0 = v0
        self.delta0 = delta0
        self.shift = np.log(np.abs((u0 + v0) / (u0 - v0)))

    def theta_from_xi(self, xi):
        return 0.5 * self.delta0 * np.sinh(2.0 * np.asarray(xi) + self.shift)

    def xi_from_theta(self, theta):
        return 0.5 * (np.arcsinh(2.0 * np.asarray(theta) / self.delta0) - self.shift)

    def dtheta_dxi(self, xi):
        return self.delta0 * np.cosh(2.0 * np.asarray(xi) + self.shift)

    def grad(self, theta):
        """Gradient of the entropy; coincides with ``xi_from_theta``."""
        return self.xi_from_theta(theta)

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        d0 = self.delta0
        core = (
            2.0 * theta * np.arcsinh(2.0 * theta / d0)
            - np.sqrt(4.0 * theta ** 2 + d0 ** 2)
            + d0
        )
        return float(0.25 * np.sum(core) - 0.5 * (self.shift @ theta))


class PowerEntropy:
    """Mirror map of the tied deep network ``theta = u**L``, L >= 3.

    Defined on the positive orthant from a strictly positive initialization.
    The dual map absorbs the ``L(L-2)`` rescaling, so it sends the raw
    accumulated dual variable xi to
    ``(u0**-(L-2) - L(L-2) xi)**(-L/(L-2))``; the entropy gradient equals
    ``L(L-2)`` times ``xi_from_theta`` (exposed as ``dual_scale``).
    """

    def __init__(self, u0, num_layers: int):
        u0 = np.asarray(u0, dtype=float)
        if u0.ndim != 1 or np.any(u0 <= 0):
            raise ValueError("u0 must be a strictly positive vector")
        if int(num_layers) != num_layers or num_layers < 3:
            raise ValueError("num_layers must be an integer >= 3")
        self.u0 = u0
        self.num_layers = int(num_layers)

    @property
    def dual_scale(self) -> float:
        L = self.num_layers
        return float(L * (L - 2))

    def theta_from_xi(self, xi):
        L = self.num_layers
        base = self.u0 ** (-(L - 2)) - L * (L - 2) * np.asarray(xi)
        if np.any(base <= 0):
            raise ValueError("xi outside the map's domain (theta would leave the positive orthant)")
        return base ** (-L / (L - 2))

    def xi_from_theta(self, theta):
        theta = self._check_positive(theta)
        L = self.num_layers
        return (self.u0 ** (-(L - 2)) - theta ** (-(L - 2) / L)) / (L * (L - 2))

    def dtheta_dxi(self, xi):
        L = self.num_layers
        base = self.u0 ** (-(L - 2)) - L * (L - 2) * np.asarray(xi)
        if np.any(base <= 0):
            raise ValueError("xi outside the map's domain")
        return L ** 2 * base ** (-(2 * L - 2) / (L - 2))

    def grad(self, theta):
        theta = self._check_positive(theta)
        L = self.num_layers
        return self.u0 ** (-(L - 2)) - theta ** (-(L - 2) / L)

    def value(self, theta) -> float:
        theta = self._check_positive(theta)
        L = self.num_layers
        return float(
            self.u0 ** (-(L - 2)) @ theta - 0.5 * L * np.sum(theta ** (2.0 / L))
        )

    @staticmethod
    def _check_positive(theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise ValueError("theta must be strictly positive componentwise")
        return theta


def _check_match(traj: Trajectory, entropy) -> None:
    u0 = traj.layers[0]
    if isinstance(entropy, HyperbolicEntropy):
        if traj.num_layers != 2:
            raise ValueError("hyperbolic entropy applies to 2-layer trajectories")
        pairs = (
            np.allclose(u0[0], entropy.u0) and np.allclose(u0[1], entropy.v0)
        ) or (
            np.allclose(u0[0], entropy.v0) and np.allclose(u0[1], entropy.u0)
        )
        if not pairs:
            raise ValueError("entropy was built from a different initialization")
    elif isinstance(entropy, PowerEntropy):
        if traj.num_layers != entropy.num_layers:
            raise ValueError("layer count differs between trajectory and entropy")
        if np.any(u0 != u0[0]):
            raise ValueError("trajectory does not come from a tied parameterization")
        if not np.allclose(u0[0], entropy.u0):
            raise ValueError("entropy was built from a different initialization")
    else:
        raise TypeError(f"unsupported entropy type {type(entropy).__name__}")


def mirror_residual_closed_form(traj: Trajectory, entropy) -> float:
    """Max over the grid of ``|xi_from_theta(theta(t)) - xi(t)|_inf``.

    Certifies the closed-form mirror identity for a trajectory generated by
    the matching parameterization (2 untied layers for the hyperbolic map,
    tied layers for the power map).
    """
    _check_match(traj, entropy)
    res = entropy.xi_from_theta(traj.thetas) - traj.xi
    return float(np.max(np.abs(res)))


def mirror_residual_general(traj: Trajectory) -> float:
    """Max residual of the first-order mirror identity, any depth.

    Evaluates ``|d theta/dt / m(t) + grad L(theta(t))|_inf`` at interior grid
    points, with the time derivative by second-order (non-uniform) central
    differences and ``m`` the mobility diagonal; certifying the identity
    requires no knowledge of the entropy.
    """
    if traj.loss is None:
        raise ValueError("trajectory carries no loss object")
    if len(traj) < 3:
        raise ValueError("need at least 3 grid points for central differences")
    t = traj.times
    th = traj.thetas
    m = np.sum(leave_one_out_products(traj.layers ** 2, axis=1), axis=1)
    if np.any(m[1:-1] == 0.0):
        raise SingularMobilityError("mobility diagonal vanishes at an interior grid point")
    hp = t[2:] - t[1:-1]
    hm = t[1:-1] - t[:-2]
    num = (
        (hm ** 2)[:, None] * th[2:]
        + ((hp ** 2 - hm ** 2))[:, None] * th[1:-1]
        - (hp ** 2)[:, None] * th[:-2]
    )
    dtheta = num / (hm * hp * (hm + hp))[:, None]
    loss = traj.loss
    if hasattr(loss, "X") and hasattr(loss, "y"):
        grads = 2.0 * (th[1:-1] @ loss.X.T - loss.y) @ loss.X
    else:
        grads = np.array([loss.gradient(th[k]) for k in range(1, len(traj) - 1)])
    res = dtheta / m[1:-1] + grads
    return float(np.max(np.abs(res)))

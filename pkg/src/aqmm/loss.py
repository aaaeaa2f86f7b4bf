"""Quantile check loss and its smooth approximation.

The check loss rho_tau(r) = r * (tau - I(r < 0)) is piecewise linear with a
kink at zero, which rules out derivative-based fitting.  This module replaces
it with a convex C^1 surrogate kappa that agrees with rho outside a window of
half-width controlled by a smoothing parameter omega > 0 and interpolates a
quadratic inside it:

    kappa(r) = r * (tau - 1) - (tau - 1)^2 * omega / 2    if r <= (tau - 1) * omega
             = r^2 / (2 * omega)                          if (tau - 1) * omega <= r <= tau * omega
             = r * tau - tau^2 * omega / 2                if r >= tau * omega

The approximation error is uniformly bounded by (omega / 2) * max(tau^2,
(1 - tau)^2), attained at the two junction points, so kappa -> rho as
omega -> 0.

Because kappa is piecewise quadratic, a residual vector r determines a sign
pattern s in {-1, 0, +1}^N and the summed loss collapses to an exact quadratic

    sum_i kappa(r_i) = (r' A r + b' r + c' 1) / 2

with A diagonal.  The coefficient triple (a, b, c) is the workhorse of the
fitting routines: holding the sign pattern fixed, every quantity downstream
(objective, gradient, Hessian) is that of a weighted least-squares problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Smallest admissible smoothing radius.  The outer fitting loop shrinks omega
# geometrically; this floor keeps 1/omega finite in float64.
OMEGA_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothedLossParams:
    """Validated (tau, omega) pair for the smoothed check loss."""

    tau: float    # quantile level, strictly inside (0, 1)
    omega: float  # smoothing radius; clamped below at OMEGA_FLOOR

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not np.isfinite(self.omega) or self.omega <= 0.0:
            raise ValueError(f"omega must be positive and finite, got {self.omega}")
        if self.omega < OMEGA_FLOOR:
            object.__setattr__(self, "omega", OMEGA_FLOOR)

    @property
    def lower_kink(self) -> float:
        return (self.tau - 1.0) * self.omega

    @property
    def upper_kink(self) -> float:
        return self.tau * self.omega

    def uniform_bound(self) -> float:
        """Tight sup-norm gap between the smoothed and exact check loss."""
        return 0.5 * self.omega * max(self.tau**2, (1.0 - self.tau) ** 2)


@dataclass(frozen=True)
class AbcDecomposition:
    """Coefficients of the exact quadratic form of the summed smoothed loss.

    For the sign pattern s implied by the residuals, the branch-wise terms are

        a_j = (1 - s_j^2) / omega
        b_j = s_j * ((2 * tau - 1) * s_j + 1)
        c_j = ((1 - 2 * tau) * omega * s_j - (1 - 2 * tau + 2 * tau^2) * omega * s_j^2) / 2

    and sum_j kappa(r_j) = (sum_j a_j r_j^2 + sum_j b_j r_j + sum_j c_j) / 2.
    """

    a: np.ndarray  # diagonal curvature, nonzero only on the quadratic branch
    b: np.ndarray  # linear coefficients
    c: np.ndarray  # constants
    sign: np.ndarray  # the sign pattern the coefficients were built from

    def loss_sum(self, r: np.ndarray) -> float:
        """Evaluate (r'Ar + b'r + c'1) / 2 for residuals with this sign pattern."""
        r = np.asarray(r, dtype=float)
        return 0.5 * (self.a @ (r * r) + self.b @ r + self.c.sum())


# ---------------------------------------------------------------------------
# loss functions
# ---------------------------------------------------------------------------

def check_loss(r, tau: float):
    """Exact check loss rho_tau(r) = r * (tau - I(r < 0)), elementwise."""
    r = np.asarray(r, dtype=float)
    return r * (tau - (r < 0.0))


def sign_indicator(r, params: SmoothedLossParams) -> np.ndarray:
    """Branch label per residual: -1 left linear, 0 quadratic, +1 right linear.

    The junction points r = (tau - 1) * omega and r = tau * omega belong to
    the closed outer branches, so ties resolve to -1 and +1.  All three branch
    formulas agree there, the label only selects which one is evaluated.
    """
    r = np.asarray(r, dtype=float)
    s = np.zeros(r.shape, dtype=int)
    s[r <= params.lower_kink] = -1
    s[r >= params.upper_kink] = 1
    return s


def smoothed_loss(r, params: SmoothedLossParams):
    """Smoothed check loss kappa_{omega, tau}(r), elementwise."""
    r = np.asarray(r, dtype=float)
    tau, omega = params.tau, params.omega
    s = sign_indicator(r, params)
    out = r * r / (2.0 * omega)
    lo = s == -1
    hi = s == 1
    out = np.where(lo, r * (tau - 1.0) - 0.5 * (tau - 1.0) ** 2 * omega, out)
    out = np.where(hi, r * tau - 0.5 * tau**2 * omega, out)
    return out


def smoothed_loss_derivative(r, params: SmoothedLossParams):
    """First derivative of the smoothed loss.

    Continuous everywhere: tau - 1 on the left branch, r / omega in the
    middle, tau on the right branch.
    """
    r = np.asarray(r, dtype=float)
    s = sign_indicator(r, params)
    out = r / params.omega
    out = np.where(s == -1, params.tau - 1.0, out)
    out = np.where(s == 1, params.tau, out)
    return out


def abc_decompose(r, params: SmoothedLossParams) -> AbcDecomposition:
    """Coefficient triple (a, b, c) of the summed smoothed loss at residuals r.

    Args:
        r: residual vector.
        params: loss parameters fixing tau and omega.

    Returns:
        AbcDecomposition with arrays of the same length as r satisfying
        sum_j kappa(r_j) = (r'Ar + b'r + c'1) / 2 exactly for any residual
        vector sharing the same sign pattern.
    """
    tau, omega = params.tau, params.omega
    s = sign_indicator(r, params).astype(float)
    s2 = s * s
    a = (1.0 - s2) / omega
    b = s * ((2.0 * tau - 1.0) * s + 1.0)
    c = 0.5 * ((1.0 - 2.0 * tau) * omega * s - (1.0 - 2.0 * tau + 2.0 * tau**2) * omega * s2)
    return AbcDecomposition(a=a, b=b, c=c, sign=s.astype(int))

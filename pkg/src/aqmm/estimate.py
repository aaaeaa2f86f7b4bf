"""Fitting engine for additive quantile mixed models.

The estimation problem is cast as maximizing a Laplace approximation of an
asymmetric-Laplace quasi-likelihood in which the check loss is replaced by its
smooth surrogate (see ``loss``).  Writing r = y - F beta - Z u - B v and
w = (u, v) with scaled covariance Psi, the criterion is built from

    h(w) = r'Ar + b'r + c'1 + w' Psi^{-1} w

whose minimizer w_hat (the conditional mode) is found by a refreshed-
coefficient Newton iteration: with the sign pattern frozen, h is exactly
quadratic, so each pass solves

    (G'AG + Psi^{-1}) w = G'(A (y - F beta) + b / 2),      G = [Z B]

re-derives (A, b) at the new point, and repeats, with step halving whenever a
full step fails to decrease h.  The system matrix has block-arrow structure
(small independent cluster blocks coupled only through the spline block), so
the solve and its log-determinant use per-cluster Cholesky factors plus a
Schur complement on the spline block.

At the mode, the approximate profiled log-likelihood is

    l(theta) = N [log(tau (1 - tau)) - log sigma_hat - 1] - (1/2) log|Psi Hdd|

with sigma_hat = h(w_hat) / (2 N) and Hdd = G'AG + Psi^{-1}.  A derivative-free
outer search (Nelder-Mead by default) maximizes l over theta at fixed
smoothing radius omega, restarting from the incumbent while omega shrinks
geometrically down to its floor, so the surrogate loss approaches the exact
check loss; the fit terminates once the outer value stalls (relative change
below tolerance) at the smallest admissible omega.

Per-cluster resampling counts w_i reweight every cluster-bound term exactly as
if the cluster appeared w_i times as distinct clusters; see ``model``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .loss import OMEGA_FLOOR, SmoothedLossParams, abc_decompose, smoothed_loss
from .model import (
    ClusteredData,
    ClusterWeights,
    DesignSet,
    ModelSpec,
    Precision,
    Theta,
    assemble,
    build_precision,
    cov_to_xi,
    pack_theta,
    unpack_theta,
    xi_to_cov,
)


def _rescale_xi(xi: np.ndarray, factor: float, q: int) -> np.ndarray:
    """Multiply the covariance encoded by ``xi`` by a positive factor."""
    if q == 0 or xi.size == 0:
        return xi.copy()
    return cov_to_xi(xi_to_cov(xi, q) * factor)

SIGMA_FLOOR = 1e-12

# depth of the fixed bandwidth schedule: the smoothing parameter is halved
# this many times before the confirmation pass.  Shallower schedules leave a
# visible smoothing footprint in the estimates (slope coefficients at the
# median in particular); deeper ones only add runtime
_STOP_MIN_SHRINKS = 10


class EstimabilityError(ValueError):
    """Fixed-effect design is rank deficient; carries the offending columns."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(
            "fixed-effect design is rank deficient; drop or merge columns: "
            + ", ".join(self.columns)
        )


class InnerSolverError(RuntimeError):
    """Mode search exhausted its iteration budget; carries the best point."""

    def __init__(self, w_best, h_best, grad_norm):
        self.w_best = w_best
        self.h_best = h_best
        self.grad_norm = grad_norm
        super().__init__(
            f"mode solver did not reach tolerance (grad norm {grad_norm:.3e})"
        )


@dataclass(frozen=True)
class FitControls:
    """Knobs of the fitting loops; defaults follow the reference algorithm."""

    max_outer_iter: int = 200     # outer smoothing-schedule budget
    omega_shrink: float = 0.5     # geometric factor applied to omega
    loglik_rel_tol: float = 1e-5  # outer stop: |delta l| / (1 + |l|)
    inner_max_iter: int = 100     # Newton passes per mode solve
    inner_grad_tol: float = 1e-8  # relative gradient tolerance at the mode
    outer_method: str = "nelder_mead"   # or "bfgs_numeric"
    start_strategy: str = "naive"       # or "warm"
    refine_scale: bool = True     # re-freeze the working scale once if safe
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_outer_iter < 1:
            raise ValueError("max_outer_iter must be positive")
        if not 0.0 < self.omega_shrink < 1.0:
            raise ValueError("omega_shrink must lie in (0, 1)")
        for name in ("loglik_rel_tol", "inner_grad_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.inner_max_iter < 1:
            raise ValueError("inner_max_iter must be positive")
        if self.outer_method not in ("nelder_mead", "bfgs_numeric"):
            raise ValueError(f"unknown outer_method {self.outer_method!r}")
        if self.start_strategy not in ("naive", "warm"):
            raise ValueError(f"unknown start_strategy {self.start_strategy!r}")


@dataclass(frozen=True)
class ScalingRecord:
    """Response scaling applied before fitting (1.0 means none).

    ``sigma_work`` is the scale the outer search held fixed (original
    response units); restarts such as bootstrap replicates reuse it so
    they optimize the same criterion as the fit they perturb.
    """

    scale: float = 1.0
    sigma_work: Optional[float] = None


@dataclass(frozen=True)
class ModeResult:
    """Outcome of one conditional-mode search."""

    w_hat: np.ndarray
    h0: float
    converged: bool
    iterations: int
    grad_norm: float


@dataclass(frozen=True)
class FitResult:
    """Everything produced by one quantile fit.

    All of ``theta_hat``, ``sigma_hat``, the random-effect modes, and the
    fitted values are reported on the original response scale, whatever
    scaling was applied during fitting (the scaling record holds the divisor).
    Fitted values are in input row order.
    """

    tau: float
    theta_hat: Theta
    w_hat: np.ndarray            # modal random effects, layout [u_1..u_M, v]
    u: np.ndarray                # (M, q) per-cluster modes
    v: np.ndarray                # (H,) spline coefficients
    sigma_hat: float
    loglik_trace: np.ndarray     # outer-iteration log-likelihood values
    omega_final: float
    pnr: float
    converged: bool
    iterations: int
    fitted_level0: np.ndarray    # population-level fitted values, input order
    fitted_level1: np.ndarray    # cluster-level fitted values, input order
    scaling: ScalingRecord
    controls: FitControls
    designs: DesignSet = field(repr=False)
    inner: ModeResult = field(repr=False, default=None)
    weights: Optional[ClusterWeights] = field(repr=False, default=None)
    scale_refined: bool = False  # working scale was re-frozen and the refit kept

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# ---------------------------------------------------------------------------
# workspace shared by the evaluation routines
# ---------------------------------------------------------------------------

class _Workspace:
    """Precomputed per-fit arrays: cluster offsets, row weights, layouts."""

    def __init__(self, designs: DesignSet, weights: Optional[ClusterWeights]):
        d = designs.dims
        self.designs = designs
        self.dims = d
        data = designs.data
        if weights is not None and weights.counts.shape[0] != d.M:
            raise ValueError("weights length does not match the number of clusters")
        self.counts = (
            np.ones(d.M) if weights is None else weights.counts.astype(float)
        )
        self.weights = weights
        self.offsets = data.offsets
        self.sizes = data.sizes
        self.row_weight = np.repeat(self.counts, self.sizes)
        self.row_index = np.repeat(np.arange(d.M), self.sizes)
        self.N_w = float(self.row_weight.sum())
        self.M_w = float(self.counts.sum())
        self.active = self.counts > 0
        self.nu = d.M * d.q

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(U, v) views of the stacked random-effect vector."""
        d = self.dims
        U = w[: self.nu].reshape(d.M, d.q) if d.q > 0 else np.zeros((d.M, 0))
        v = w[self.nu :]
        return U, v

    def residuals(self, beta: np.ndarray, w: np.ndarray, y=None) -> np.ndarray:
        ds = self.designs
        U, v = self.split(w)
        r = (ds.data.y if y is None else y) - ds.F @ beta
        if self.dims.q > 0:
            r = r - np.einsum("nq,nq->n", ds.Z, U[self.row_index])
        if self.dims.H > 0:
            r = r - ds.B @ v
        return r

    def random_shift(self, w: np.ndarray) -> np.ndarray:
        """Row-wise contribution Z u + B v of the random effects."""
        ds = self.designs
        U, v = self.split(w)
        out = np.zeros(self.dims.N)
        if self.dims.q > 0:
            out += np.einsum("nq,nq->n", ds.Z, U[self.row_index])
        if self.dims.H > 0:
            out += ds.B @ v
        return out

    def reduce_clusters(self, rows: np.ndarray) -> np.ndarray:
        """Sum row-wise quantities within each cluster block."""
        return np.add.reduceat(rows, self.offsets, axis=0)


# ---------------------------------------------------------------------------
# h and its derivatives
# ---------------------------------------------------------------------------

def h_value(
    theta: Theta,
    w: np.ndarray,
    designs: DesignSet,
    loss: SmoothedLossParams,
    weights: Optional[ClusterWeights] = None,
    _ws: Optional[_Workspace] = None,
    _y: Optional[np.ndarray] = None,
) -> float:
    """Smoothed-loss criterion h = r'Ar + b'r + c'1 + w' Psi^{-1} w."""
    ws = _ws if _ws is not None else _Workspace(designs, weights)
    r = ws.residuals(theta.beta, w, y=_y)
    dec = abc_decompose(r, loss)
    fidelity = float(ws.row_weight @ (dec.a * r * r + dec.b * r + dec.c))
    prec = build_precision(theta, designs.dims, weights=weights)
    return fidelity + _quad_full(prec, w, ws)


def _quad_full(prec: Precision, w: np.ndarray, ws: _Workspace) -> float:
    """w' Psi^{-1} w over the full-M layout with per-cluster counts."""
    d = ws.dims
    total = 0.0
    if d.q > 0:
        U = w[: ws.nu].reshape(d.M, d.q)
        total += float(
            np.sum(ws.counts * np.einsum("ij,jk,ik->i", U, prec.sigma_inv, U))
        )
    if d.H > 0:
        v = w[ws.nu :]
        total += float(v @ (prec.phi_inv * v))
    return total


def _apply_prior(prec: Precision, w: np.ndarray, ws: _Workspace) -> np.ndarray:
    """Count-weighted Psi^{-1} w on the full-M layout."""
    d = ws.dims
    out = np.zeros_like(w)
    if d.q > 0:
        U = w[: ws.nu].reshape(d.M, d.q)
        out[: ws.nu] = (ws.counts[:, None] * (U @ prec.sigma_inv)).ravel()
    if d.H > 0:
        out[ws.nu :] = prec.phi_inv * w[ws.nu :]
    return out


def h_gradient(
    theta: Theta,
    w: np.ndarray,
    designs: DesignSet,
    loss: SmoothedLossParams,
    weights: Optional[ClusterWeights] = None,
    _ws: Optional[_Workspace] = None,
    _y: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of h with respect to w: -G'(2Ar + b) + 2 Psi^{-1} w."""
    ws = _ws if _ws is not None else _Workspace(designs, weights)
    d = ws.dims
    r = ws.residuals(theta.beta, w, y=_y)
    dec = abc_decompose(r, loss)
    score = ws.row_weight * (2.0 * dec.a * r + dec.b)
    prec = build_precision(theta, designs.dims, weights=weights)
    grad = 2.0 * _apply_prior(prec, w, ws)
    if d.q > 0:
        per_cluster = ws.reduce_clusters(designs.Z * score[:, None])
        grad[: ws.nu] -= per_cluster.ravel()
    if d.H > 0:
        grad[ws.nu :] -= designs.B.T @ score
    return grad


def h_hessian(
    theta: Theta,
    w: np.ndarray,
    designs: DesignSet,
    loss: SmoothedLossParams,
    weights: Optional[ClusterWeights] = None,
) -> np.ndarray:
    """Dense Hessian of h: 2 (G' A G + Psi^{-1}), count-weighted.

    Dense construction intended for testing and small problems; the fitting
    path uses the block-arrow factorization instead.
    """
    ws = _Workspace(designs, weights)
    d = ws.dims
    r = ws.residuals(theta.beta, w)
    dec = abc_decompose(r, loss)
    a_w = ws.row_weight * dec.a
    dim = ws.nu + d.H
    H = np.zeros((dim, dim))
    prec = build_precision(theta, designs.dims, weights=weights)
    if d.q > 0:
        Pz = designs.Z * a_w[:, None]
        blocks = ws.reduce_clusters(np.einsum("nk,nl->nkl", designs.Z, Pz))
        for i in range(d.M):
            sl = slice(i * d.q, (i + 1) * d.q)
            H[sl, sl] = blocks[i] + ws.counts[i] * prec.sigma_inv
        if d.H > 0:
            coup = ws.reduce_clusters(np.einsum("nk,nh->nkh", Pz, designs.B))
            for i in range(d.M):
                sl = slice(i * d.q, (i + 1) * d.q)
                H[sl, ws.nu :] = coup[i]
                H[ws.nu :, sl] = coup[i].T
    if d.H > 0:
        H[ws.nu :, ws.nu :] = designs.B.T @ (designs.B * a_w[:, None]) + np.diag(
            prec.phi_inv
        )
    return 2.0 * H


# ---------------------------------------------------------------------------
# block-arrow factorization of G'AG + Psi^{-1}
# ---------------------------------------------------------------------------

class _ArrowFactor:
    """Cholesky pieces of the count-weighted system G'AG + Psi^{-1}.

    Cluster blocks D_i = Z_i'A_iZ_i + Sigma^{-1} are kept unweighted (they are
    the blocks of one physical copy); the spline Schur complement and the
    right-hand sides carry the counts.  ``logdet`` is that of the system in
    which cluster i appears count_i times.
    """

    def __init__(self, ws: _Workspace, a_rows: np.ndarray, prec: Precision):
        d = ws.dims
        self.ws = ws
        self.prec = prec
        ds = ws.designs
        q, H, M = d.q, d.H, d.M
        self.q, self.H, self.M = q, H, M
        counts = ws.counts
        a_w = ws.row_weight * a_rows

        if q > 0:
            Pz = ds.Z * a_rows[:, None]
            D = ws.reduce_clusters(np.einsum("nk,nl->nkl", ds.Z, Pz))
            D += prec.sigma_inv[None, :, :]
            self.D_chol = np.linalg.cholesky(D)  # raises LinAlgError if not PD
            self.logdet_blocks = 2.0 * np.sum(
                np.log(np.diagonal(self.D_chol, axis1=1, axis2=2)), axis=1
            )
            if H > 0:
                self.C = ws.reduce_clusters(np.einsum("nk,nh->nkh", Pz, ds.B))
                Y = np.linalg.solve(D, self.C)  # D_i^{-1} C_i, batched
                self.Y = Y
            else:
                self.C = None
                self.Y = None
        else:
            self.D_chol = None
            self.logdet_blocks = np.zeros(M)

        if H > 0:
            E = ds.B.T @ (ds.B * a_w[:, None]) + np.diag(prec.phi_inv)
            if q > 0:
                E -= np.einsum("ikh,ikg->hg", self.C * counts[:, None, None], self.Y)
            E = 0.5 * (E + E.T)
            self.S_chol = np.linalg.cholesky(E)
            self.logdet_S = 2.0 * float(np.sum(np.log(np.diag(self.S_chol))))
        else:
            self.S_chol = None
            self.logdet_S = 0.0

    @property
    def logdet(self) -> float:
        return float(self.ws.counts @ self.logdet_blocks) + self.logdet_S

    def solve(self, g_u: np.ndarray, g_v: np.ndarray) -> np.ndarray:
        """Solve the count-weighted system for rhs split as (per-copy u, v).

        ``g_u`` holds the per-copy right-hand side Z_i' t_i (without the count
        factor); inactive clusters come back as zeros.
        """
        q, H, M = self.q, self.H, self.M
        active = self.ws.active
        x = np.zeros(M * q + H)
        if q > 0:
            # D_i^{-1} g_u_i for all clusters at once
            base = np.linalg.solve(
                self.D_chol @ np.transpose(self.D_chol, (0, 2, 1)), g_u[:, :, None]
            )[:, :, 0]
        if H > 0:
            rhs_v = g_v.copy()
            if q > 0:
                rhs_v -= np.einsum(
                    "i,ikh,ik->h", self.ws.counts, self.C, base
                )
            x_v = np.linalg.solve(
                self.S_chol @ self.S_chol.T, rhs_v
            )
            x[M * q :] = x_v
        else:
            x_v = np.zeros(0)
        if q > 0:
            corr = base
            if H > 0:
                corr = base - np.einsum("ikh,h->ik", self.Y, x_v)
            corr = np.where(active[:, None], corr, 0.0)
            x[: M * q] = corr.ravel()
        return x


# ---------------------------------------------------------------------------
# conditional-mode solver
# ---------------------------------------------------------------------------

def solve_modes(
    theta: Theta,
    designs: DesignSet,
    loss: SmoothedLossParams,
    weights: Optional[ClusterWeights] = None,
    w0: Optional[np.ndarray] = None,
    controls: Optional[FitControls] = None,
    _ws: Optional[_Workspace] = None,
    _y: Optional[np.ndarray] = None,
    _raise: bool = True,
    _prec: Optional[Precision] = None,
    _retry: bool = True,
) -> ModeResult:
    """Minimize h over the random effects at fixed theta.

    Refreshed-coefficient Newton iteration: each pass freezes the loss sign
    pattern (making h quadratic), solves the block-arrow system exactly, and
    halves the step (at most 30 times) if the full step fails to decrease h.
    A failed search is retried once through a coarser smoothing radius; the
    sign pattern of that relaxed mode usually seeds the tight one correctly.

    Raises
    ------
    InnerSolverError
        If the gradient tolerance is not met within ``inner_max_iter`` passes;
        the error carries the best point found.
    """
    controls = controls or FitControls()
    ws = _ws if _ws is not None else _Workspace(designs, weights)
    d = ws.dims
    dim = ws.nu + d.H
    y = ws.designs.data.y if _y is None else _y
    r_fixed = y - ws.designs.F @ theta.beta
    if dim == 0:
        h0 = float(2.0 * (ws.row_weight @ smoothed_loss(r_fixed, loss)))
        return ModeResult(np.zeros(0), h0, True, 0, 0.0)
    w = np.zeros(dim) if w0 is None else np.array(w0, dtype=float)
    if w.shape[0] != dim:
        raise ValueError(f"w0 has length {w.shape[0]}, expected {dim}")
    prec = _prec if _prec is not None else build_precision(theta, d, weights=ws.weights)

    def fidelity(r, dec):
        return float(ws.row_weight @ (dec.a * r * r + dec.b * r + dec.c))

    r = r_fixed - ws.random_shift(w)
    dec = abc_decompose(r, loss)
    apply_w = _apply_prior(prec, w, ws)
    qw = float(w @ apply_w)
    h_cur = fidelity(r, dec) + qw
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, controls.inner_max_iter + 1):
        factor = _ArrowFactor(ws, dec.a, prec)
        t_rows = dec.a * r_fixed + 0.5 * dec.b
        g_u = (
            ws.reduce_clusters(ws.designs.Z * t_rows[:, None])
            if d.q > 0
            else np.zeros((d.M, 0))
        )
        g_v = (
            ws.designs.B.T @ (ws.row_weight * t_rows) if d.H > 0 else np.zeros(0)
        )
        target = factor.solve(g_u, g_v)
        step = target - w
        shift = ws.random_shift(step)
        # the prior part of h is exactly quadratic in the step size, so the
        # halving trials only re-decompose the loss part
        apply_step = _apply_prior(prec, step, ws)
        qs = float(step @ apply_step)
        cross = float(step @ apply_w)
        # step halving on h increase; residuals are affine in the step size,
        # so each trial costs one loss re-decomposition
        t = 1.0
        accepted = False
        for _ in range(31):
            r_try = r - t * shift
            dec_try = abc_decompose(r_try, loss)
            h_try = fidelity(r_try, dec_try) + qw + 2.0 * t * cross + t * t * qs
            if h_try <= h_cur * (1.0 + 1e-12) + 1e-12:
                accepted = True
                break
            t *= 0.5
        if accepted:
            moved = t * float(np.max(np.abs(step))) if step.size else 0.0
            w = w + t * step
            apply_w = apply_w + t * apply_step
            qw = qw + 2.0 * t * cross + t * t * qs
            r, dec, h_cur = r_try, dec_try, h_try
        else:
            moved = 0.0
        score = ws.row_weight * (2.0 * dec.a * r + dec.b)
        grad = 2.0 * apply_w
        if d.q > 0:
            grad[: ws.nu] -= ws.reduce_clusters(ws.designs.Z * score[:, None]).ravel()
        if d.H > 0:
            grad[ws.nu :] -= ws.designs.B.T @ score
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= controls.inner_grad_tol * (1.0 + abs(h_cur)):
            converged = True
            break
        if moved == 0.0:
            # no admissible descent step; treat as stalled
            break
    if not converged and _retry:
        coarse = SmoothedLossParams(tau=loss.tau, omega=16.0 * loss.omega)
        relaxed = solve_modes(
            theta, designs, coarse, weights=weights, w0=w, controls=controls,
            _ws=ws, _y=_y, _raise=False, _prec=prec, _retry=False,
        )
        again = solve_modes(
            theta, designs, loss, weights=weights, w0=relaxed.w_hat,
            controls=controls, _ws=ws, _y=_y, _raise=False, _prec=prec,
            _retry=False,
        )
        total_it = it + relaxed.iterations + again.iterations
        if again.converged or again.h0 <= h_cur:
            if not again.converged and _raise:
                raise InnerSolverError(again.w_hat, again.h0, again.grad_norm)
            return ModeResult(
                again.w_hat, again.h0, again.converged, total_it, again.grad_norm
            )
        it = total_it
    if not converged and _raise:
        raise InnerSolverError(w, h_cur, grad_norm)
    return ModeResult(w, h_cur, converged, it, grad_norm)


# ---------------------------------------------------------------------------
# Laplace log-likelihood with profiled sigma
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _LaplaceEval:
    loglik: float
    sigma_hat: float
    mode: ModeResult
    logdet_H: float


def _laplace(
    theta: Theta,
    ws: _Workspace,
    loss: SmoothedLossParams,
    controls: FitControls,
    w0: Optional[np.ndarray] = None,
    y: Optional[np.ndarray] = None,
    sigma_fixed: Optional[float] = None,
) -> _LaplaceEval:
    """Laplace evaluation; scale profiled out unless ``sigma_fixed`` is given.

    The fitting loop holds the scale at its starting value while the outer
    search runs and re-derives it only from the accepted fit: re-estimating
    the scale inside the search lets it shrink with every improvement of the
    criterion, which loosens the random-effect prior in lockstep and drags
    tail fits toward the data bulk.
    """
    d = ws.dims
    tau = loss.tau
    prec = build_precision(theta, d, weights=ws.weights)
    mode = solve_modes(
        theta,
        ws.designs,
        loss,
        weights=ws.weights,
        w0=w0,
        controls=controls,
        _ws=ws,
        _y=y,
        _raise=False,
        _prec=prec,
    )
    h0 = mode.h0
    sigma_hat = max(h0 / (2.0 * ws.N_w), SIGMA_FLOOR)
    if ws.nu + d.H > 0:
        r = ws.residuals(theta.beta, mode.w_hat, y=y)
        dec = abc_decompose(r, loss)
        factor = _ArrowFactor(ws, dec.a, prec)
        logdet_H = factor.logdet
    else:
        logdet_H = 0.0
    if sigma_fixed is None:
        ll = (
            ws.N_w * (np.log(tau * (1.0 - tau)) - np.log(sigma_hat) - 1.0)
            - 0.5 * (prec.logdet + logdet_H)
        )
    else:
        ll = (
            ws.N_w * np.log(tau * (1.0 - tau) / sigma_fixed)
            - 0.5 * (prec.logdet + logdet_H + h0 / sigma_fixed)
        )
    return _LaplaceEval(float(ll), sigma_hat, mode, logdet_H)


def laplace_loglik(
    theta: Theta,
    designs: DesignSet,
    loss: SmoothedLossParams,
    weights: Optional[ClusterWeights] = None,
    w0: Optional[np.ndarray] = None,
    controls: Optional[FitControls] = None,
) -> float:
    """Laplace-approximate log-likelihood at theta, sigma profiled out.

    Raises
    ------
    InnerSolverError
        When the mode search does not converge (propagated, since the
        approximation is only meaningful at a stationary point).
    """
    ws = _Workspace(designs, weights)
    out = _laplace(theta, ws, loss, controls or FitControls(), w0=w0)
    if not out.mode.converged:
        raise InnerSolverError(out.mode.w_hat, out.mode.h0, out.mode.grad_norm)
    return out.loglik


# ---------------------------------------------------------------------------
# outer fitting loop
# ---------------------------------------------------------------------------

def _check_estimability(designs: DesignSet):
    from scipy.linalg import qr

    F = designs.F
    if F.shape[1] == 0:
        return
    _, R, piv = qr(F, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(F.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < F.shape[1]:
        bad = [designs.fixed_names[j] for j in sorted(piv[rank:])]
        raise EstimabilityError(bad)


def _weighted_sd(values: np.ndarray, row_weight: np.ndarray) -> float:
    total = row_weight.sum()
    mean = float(row_weight @ values) / total
    var = float(row_weight @ (values - mean) ** 2) / total
    return float(np.sqrt(var))


def _residual_scale(resid: np.ndarray, row_weight: np.ndarray) -> float:
    """Working scale from pilot residuals: ratio of second to first absolute
    moment.  For Gaussian residuals this is sqrt(pi/2)/... ~ 1.25 times the
    standard deviation; the plain mean absolute residual proved too small a
    scale, letting the covariance search trade prior cost against tail fit.
    """
    num = float(row_weight @ resid**2)
    den = float(row_weight @ np.abs(resid))
    if den <= 0.0:
        return SIGMA_FLOOR
    return max(num / den, SIGMA_FLOOR)


def _naive_start(ws: _Workspace, y: np.ndarray) -> tuple[Theta, float, float]:
    """Least-squares beta, identity covariances, data-driven sigma and omega."""
    d = ws.dims
    sw = np.sqrt(ws.row_weight)
    beta, *_ = np.linalg.lstsq(ws.designs.F * sw[:, None], y * sw, rcond=None)
    resid = y - ws.designs.F @ beta
    sigma0 = _residual_scale(resid, ws.row_weight)
    omega0 = 0.5 * _weighted_sd(y, ws.row_weight)
    theta = Theta(
        beta=beta, xi=np.zeros(d.m), log_phi=np.zeros(d.s), sigma=max(sigma0, SIGMA_FLOOR)
    )
    return theta, sigma0, max(omega0, OMEGA_FLOOR)


def _pilot_em(ws: _Workspace, y: np.ndarray):
    """Gaussian mixed-model pilot: penalized LS iterated EM-style.

    Returns (coef, fitted, Sigma, phi) on success, None when the model has
    no random terms or the pilot system is singular.  ``fitted`` includes
    the estimated random effects, so ``y - fitted`` are conditional
    residuals.
    """
    d = ws.dims
    ds = ws.designs
    naive_theta, _, _ = _naive_start(ws, y)
    nw = ws.nu + d.H
    if nw == 0:
        return None
    sw = np.sqrt(ws.row_weight)
    cols = [ds.F * sw[:, None]]
    if d.q > 0:
        G_u = np.zeros((d.N, ws.nu))
        for i in range(d.M):
            sl = slice(ws.offsets[i], ws.offsets[i] + ws.sizes[i])
            G_u[sl, i * d.q : (i + 1) * d.q] = ds.Z[sl]
        cols.append(G_u * sw[:, None])
    if d.H > 0:
        cols.append(ds.B * sw[:, None])
    X = np.hstack(cols)
    Xty = X.T @ (y * sw)
    XtX = X.T @ X
    dim = d.p + nw

    Sigma = np.eye(d.q)
    phi = np.ones(d.s)
    resid = y - ds.F @ naive_theta.beta
    sig2 = max(float(ws.row_weight @ resid**2) / ws.N_w, 1e-8)
    m_active = max(int(np.count_nonzero(ws.active)), 1)
    coef = np.zeros(dim)
    for _ in range(50):
        prec = np.zeros((dim, dim))
        if d.q > 0:
            try:
                s_inv = np.linalg.inv(Sigma + 1e-10 * np.eye(d.q))
            except np.linalg.LinAlgError:
                return None
            for i in range(d.M):
                sl = slice(d.p + i * d.q, d.p + (i + 1) * d.q)
                prec[sl, sl] = s_inv
        pos = d.p + ws.nu
        for k, hk in enumerate(d.H_k):
            idx = slice(pos, pos + hk)
            prec[idx, idx] = np.eye(hk) / max(phi[k], 1e-8)
            pos += hk
        try:
            C = np.linalg.inv(XtX / sig2 + prec)
        except np.linalg.LinAlgError:
            return None
        coef = C @ (Xty / sig2)
        r_w = y * sw - X @ coef
        new_sig2 = (float(r_w @ r_w) + sig2 * min(float(np.sum(XtX * C)) / sig2, dim)) / ws.N_w
        if d.q > 0:
            U = coef[d.p : d.p + ws.nu].reshape(d.M, d.q)
            acc = np.zeros((d.q, d.q))
            for i in range(d.M):
                if not ws.active[i]:
                    continue
                sl = slice(d.p + i * d.q, d.p + (i + 1) * d.q)
                acc += np.outer(U[i], U[i]) + C[sl, sl]
            new_Sigma = acc / m_active
        else:
            new_Sigma = Sigma
        new_phi = phi.copy()
        pos = d.p + ws.nu
        for k, hk in enumerate(d.H_k):
            idx = slice(pos, pos + hk)
            vk = coef[idx]
            new_phi[k] = (float(vk @ vk) + float(np.trace(C[idx, idx]))) / hk
            pos += hk
        shift = abs(new_sig2 - sig2) / (sig2 + 1e-12)
        if d.q > 0:
            shift = max(shift, float(np.max(np.abs(new_Sigma - Sigma))) / (float(np.max(np.abs(Sigma))) + 1e-12))
        sig2, Sigma, phi = max(new_sig2, 1e-10), new_Sigma, new_phi
        if shift < 1e-6:
            break

    beta = coef[: d.p]
    fitted = np.zeros(d.N)
    fitted += ds.F @ beta
    if d.q > 0:
        U = coef[d.p : d.p + ws.nu].reshape(d.M, d.q)
        per_row = np.repeat(U, ws.sizes, axis=0)
        fitted += np.einsum("nq,nq->n", ds.Z, per_row)
    if d.H > 0:
        fitted += ds.B @ coef[d.p + ws.nu :]
    edf = min(float(np.sum(XtX * C)) / sig2, float(dim))
    return coef, fitted, Sigma, phi, edf


def _warm_start(
    ws: _Workspace, y: np.ndarray
) -> tuple[Theta, float, float, Optional[np.ndarray]]:
    """Model-based starting values from the Gaussian pilot fit.

    Yields beta, the covariance parameters, starting random effects, and a
    working scale.  Falls back to the naive start when there are no random
    terms or the pilot system is singular.
    """
    d = ws.dims
    ds = ws.designs
    naive_theta, sigma_n, omega0 = _naive_start(ws, y)
    pilot = _pilot_em(ws, y)
    if pilot is None:
        return naive_theta, sigma_n, omega0, None
    coef, _, Sigma, phi, _ = pilot
    beta = coef[: d.p]
    # working scale from the marginal pilot residuals, same functional as the
    # naive start; the conditional residuals understate the spread the tail
    # fits have to cover and let cluster effects absorb the quantile shift
    sigma0 = _residual_scale(y - ds.F @ beta, ws.row_weight)
    if d.q > 0:
        try:
            xi = cov_to_xi(Sigma / sigma0 + 1e-8 * np.eye(d.q))
        except np.linalg.LinAlgError:
            xi = np.zeros(d.m)
    else:
        xi = np.zeros(0)
    log_phi = np.log(np.maximum(phi / sigma0, 1e-6)) if d.s else np.zeros(0)
    theta = Theta(beta=beta, xi=xi, log_phi=log_phi, sigma=sigma0)
    return theta, sigma0, omega0, coef[d.p :].copy()


def _rescale_theta(theta: Theta, c: float, q: int) -> Theta:
    """Map a parameter bundle from original response units to y/c units.

    beta and sigma scale by 1/c; the scaled covariances So and phi scale by
    1/c as well (cov(u) = sigma * So is quadratic in the response scale while
    sigma is linear), so the Cholesky factor picks up 1/sqrt(c).
    """
    if c == 1.0:
        return theta
    from .model import cholesky_to_xi, xi_to_cholesky

    xi = theta.xi
    if q > 0:
        xi = cholesky_to_xi(xi_to_cholesky(theta.xi, q) / np.sqrt(c))
    sigma = theta.sigma / c if theta.sigma is not None else None
    return Theta(
        beta=theta.beta / c,
        xi=xi,
        log_phi=theta.log_phi - np.log(c),
        sigma=sigma,
    )


def _unscale_theta(theta: Theta, c: float, q: int, sigma: float) -> Theta:
    """Map a fitted bundle from y/c units back to original response units."""
    if c == 1.0:
        return Theta(
            beta=theta.beta, xi=theta.xi, log_phi=theta.log_phi,
            sigma=max(sigma, SIGMA_FLOOR),
        )
    from .model import cholesky_to_xi, xi_to_cholesky

    xi = theta.xi
    if q > 0:
        xi = cholesky_to_xi(xi_to_cholesky(theta.xi, q) * np.sqrt(c))
    return Theta(
        beta=theta.beta * c,
        xi=xi,
        log_phi=theta.log_phi + np.log(c),
        sigma=max(sigma * c, SIGMA_FLOOR),
    )


def _outer_maximize(vec0, objective, method, dim, controls, f_scale=1.0, polish=False):
    """One round of the derivative-free outer search from the incumbent.

    Navigation rounds get a modest budget (the schedule will revisit); a
    polish round, used to confirm an apparent stall before declaring
    convergence, searches much harder and tighter.
    """
    if method == "nelder_mead":
        budget = (400 if polish else 80) * max(dim, 1)
        xtol = (1e-4 if polish else 1e-3) * (1.0 + float(np.max(np.abs(vec0))))
        # explicit starting simplex: the solver's default perturbs a zero
        # coordinate by ~2.5e-4, far below the likelihood tolerance, which
        # freezes any parameter started at zero (variance terms in particular).
        # the polish spread is wider, not narrower: its job is to escape a
        # local shelf of the smoothed surface if one trapped the navigation
        steps = (0.15 if polish else 0.1) * np.maximum(np.abs(vec0), 1.0)
        simplex = np.vstack([vec0, vec0 + np.diag(steps)])
        res = minimize(
            objective,
            vec0,
            method="Nelder-Mead",
            options={
                "maxfev": budget,
                "xatol": xtol,
                "fatol": 0.1 * controls.loglik_rel_tol * f_scale,
                "adaptive": dim > 6,
                "initial_simplex": simplex,
            },
        )
    else:
        res = minimize(
            objective,
            vec0,
            method="BFGS",
            options={"maxiter": (200 if polish else 50) * max(dim, 1), "gtol": 1e-5},
        )
    return res.x, -float(res.fun)


def fit(
    spec: ModelSpec,
    data: ClusteredData,
    taus: Union[None, float, Sequence[float]] = None,
    controls: Optional[FitControls] = None,
    weights: Optional[ClusterWeights] = None,
    scale_response: bool = False,
) -> Union[FitResult, list]:
    """Fit the model at one or more quantile levels.

    Parameters
    ----------
    spec : ModelSpec
        Model terms; ``spec.taus`` supplies the quantile levels when ``taus``
        is omitted.
    data : ClusteredData
        Training data.
    taus : float or sequence of float, optional
        Quantile level(s) to fit.  A scalar returns a single FitResult, a
        sequence returns a list in the same order.
    controls : FitControls, optional
    weights : ClusterWeights, optional
        Per-cluster resampling counts (all ones when omitted).
    scale_response : bool
        Divide the response by its weighted standard deviation before fitting
        and undo the scaling on all reported outputs.

    Notes
    -----
    Outer loop: starting values (least squares or the penalized pilot fit),
    then one derivative-free maximization of the profiled Laplace
    log-likelihood per smoothing radius, with omega multiplied by
    ``omega_shrink`` after every round down to its floor.  The fit converges
    when the round-to-round log-likelihood change falls below
    ``loglik_rel_tol`` in relative terms with omega at the floor; the
    iteration budget ``max_outer_iter`` caps the schedule either way.  A
    final pass re-solves the modes and sigma at the accepted parameters.
    """
    designs = assemble(data, spec)
    _check_estimability(designs)
    scalar = np.isscalar(taus) if taus is not None else len(spec.taus) == 1
    if taus is None:
        tau_list = list(spec.taus)
    else:
        tau_list = [float(taus)] if np.isscalar(taus) else [float(t) for t in taus]
    results = [
        _fit_one(designs, t, controls or FitControls(), weights, scale_response)
        for t in tau_list
    ]
    return results[0] if scalar else results


def fit_assembled(
    designs: DesignSet,
    tau: float,
    controls: Optional[FitControls] = None,
    weights: Optional[ClusterWeights] = None,
    scale_response: bool = False,
    theta0: Optional[Theta] = None,
    omega0: Optional[float] = None,
    sigma0: Optional[float] = None,
) -> FitResult:
    """Fit one quantile level on an already assembled design.

    Used by the resampling drivers to reuse the spline bases and, optionally,
    warm-start the outer search from a full-data solution.  ``sigma0`` pins
    the working scale held fixed during the search (original response units);
    restarts pass the full-data ``scaling.sigma_work`` so replicates solve
    the same objective.
    """
    return _fit_one(
        designs,
        float(tau),
        controls or FitControls(),
        weights,
        scale_response,
        theta0=theta0,
        omega0=omega0,
        sigma0=sigma0,
    )


def _fit_one(
    designs: DesignSet,
    tau: float,
    controls: FitControls,
    weights: Optional[ClusterWeights],
    scale_response: bool,
    theta0: Optional[Theta] = None,
    omega0: Optional[float] = None,
    sigma0: Optional[float] = None,
) -> FitResult:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly inside (0, 1)")
    ws = _Workspace(designs, weights)
    d = ws.dims

    y_scale = 1.0
    if scale_response:
        sd = _weighted_sd(designs.data.y, ws.row_weight)
        y_scale = sd if sd > 0 else 1.0
    y = designs.data.y / y_scale

    w_start = None
    if theta0 is not None:
        start_theta = _rescale_theta(theta0, y_scale, d.q)
        _, sigma_default, omega_default = _naive_start(ws, y)
        omega = omega_default
        sigma_work = (
            start_theta.sigma if start_theta.sigma is not None else sigma_default
        )
    elif controls.start_strategy == "warm":
        start_theta, sigma_work, omega, w_start = _warm_start(ws, y)
    else:
        start_theta, sigma_work, omega = _naive_start(ws, y)
    if theta0 is None and sigma0 is None:
        # tail quantiles get a larger working scale.  The scale prices the
        # random-effect penalty, and at the price the center recipe sets the
        # penalty compresses a tail fit toward the data bulk, drifting the
        # share of negative residuals above nominal in the lower tail and
        # below it in the upper.  The inflation is symmetric in tau and
        # equals one at the median
        sigma_work /= np.sqrt(4.0 * tau * (1.0 - tau))
    if omega0 is not None:
        omega = float(omega0) / y_scale
    if sigma0 is not None:
        sigma_work = float(sigma0) / y_scale
    sigma_work = max(float(sigma_work), SIGMA_FLOOR)
    omega = max(omega, OMEGA_FLOOR)
    # the smoothing schedule is fixed: shrink a set number of times, then
    # confirm with one hard restart at the terminal bandwidth.  A stop rule
    # keyed to the objective cannot work here because the scale-correction
    # term drifts by a constant per shrink while the estimate is stationary,
    # and its replicate-to-replicate jitter would turn the stopping depth
    # (and with it the effective estimator) into a random variable.  A
    # restart that brings its own bandwidth runs a single round at it.
    if omega0 is not None:
        schedule_rounds = 1
    else:
        schedule_rounds = _STOP_MIN_SHRINKS + 1
    schedule_rounds = min(schedule_rounds, controls.max_outer_iter)

    dim = pack_theta(start_theta).shape[0]

    def run_schedule(vec0, w0, sigma_pass, omega_start, rounds):
        """One bandwidth schedule at a fixed working scale."""
        vec_c = vec0
        w_cache = {"w": w0}
        trace_c = []
        conv_c = False
        omega_c = omega_start
        for outer in range(1, rounds + 1):
            loss_c = SmoothedLossParams(tau=tau, omega=omega_c)

            def objective(v):
                if not np.all(np.isfinite(v)):
                    return np.inf
                theta = unpack_theta(v, d)
                try:
                    out = _laplace(
                        theta, ws, loss_c, controls, w0=w_cache["w"], y=y,
                        sigma_fixed=sigma_pass,
                    )
                except np.linalg.LinAlgError:
                    return np.inf
                # a non-stationary mode invalidates the approximation; reject
                if not out.mode.converged or not np.isfinite(out.loglik):
                    return np.inf
                w_cache["w"] = out.mode.w_hat
                return -out.loglik

            ll_start = -objective(vec_c)
            f_scale = 1.0 + (abs(ll_start) if np.isfinite(ll_start) else 0.0)
            vec_c, ll = _outer_maximize(
                vec_c, objective, controls.outer_method, dim, controls,
                f_scale=f_scale,
            )
            final_round = outer == rounds
            if final_round:
                # confirmation pass: a restart with a wide simplex at the
                # terminal bandwidth; convergence is judged on how far it
                # moves the estimate, a signal the drift term cannot fake.
                # One repeat is allowed: a large first move means the restart
                # found a better basin, and what needs confirming is the
                # point it lands on, not the point it left
                for _ in range(6):
                    vec_prev = vec_c
                    vec_c, ll = _outer_maximize(
                        vec_c, objective, controls.outer_method, dim, controls,
                        f_scale=f_scale, polish=True,
                    )
                    move = float(np.max(np.abs(vec_c - vec_prev))) if dim else 0.0
                    move_tol = 3e-3 * (1.0 + float(np.max(np.abs(vec_c))))
                    conv_c = move < move_tol
                    if conv_c:
                        break
            trace_c.append(ll)
            if not final_round:
                omega_c = max(omega_c * controls.omega_shrink, OMEGA_FLOOR)
        return vec_c, w_cache["w"], trace_c, conv_c, omega_c

    def level_fits(theta_f, w):
        U_f, v_f = ws.split(w)
        lvl0 = designs.F @ theta_f.beta
        if d.H > 0:
            lvl0 = lvl0 + designs.B @ v_f
        lvl1 = lvl0.copy()
        if d.q > 0:
            per_row_u = np.repeat(U_f, ws.sizes, axis=0)
            lvl1 = lvl1 + np.einsum("nq,nq->n", designs.Z, per_row_u)
        resid_f = y - lvl1
        mask = ws.row_weight > 0
        pnr_f = float(
            (ws.row_weight[mask] * (resid_f[mask] < 0)).sum()
            / ws.row_weight[mask].sum()
        )
        return U_f, v_f, lvl0, lvl1, pnr_f

    vec, w_fin, trace, converged, omega = run_schedule(
        pack_theta(start_theta), w_start, sigma_work, omega, schedule_rounds
    )
    iterations = schedule_rounds

    # final sigma and mode update at the accepted parameters
    loss = SmoothedLossParams(tau=tau, omega=omega)
    theta_fit = unpack_theta(vec, d)
    final = _laplace(theta_fit, ws, loss, controls, w0=w_fin, y=y)

    # Scale refinement.  The pilot scale prices the random-effect penalty off
    # marginal residuals, which is deliberately conservative; the scale that
    # prices it honestly is the mean check loss of the conditional residuals,
    # here taken from the Gaussian pilot.  Where that target is usable the
    # whole fit is rerun at it, warm-started from the rescaled solution, and
    # the covariance estimate comes out far less dispersed.  Two guards keep
    # this away from its failure mode, a runaway in which a shrunken scale
    # cheapens the penalty, lets the fit tighten onto the heavier side of
    # the loss, and justifies an even smaller scale.  First, the rerun is
    # restricted to near-symmetric quantiles: the runaway feeds on the
    # imbalance of the check loss and has nothing to feed on where the two
    # sides weigh the same, while at tail quantiles the conservative scale
    # is itself what holds the fitted quantile out in the tail.  Second, the
    # rerun is kept only if its proportion of negative residuals stays at
    # least as close to tau as before.
    refined = False
    if (
        controls.refine_scale
        and abs(2.0 * tau - 1.0) <= 0.2
        and omega0 is None
        and sigma0 is None
        and np.isfinite(final.loglik)
        and final.mode.converged
    ):
        pilot = _pilot_em(ws, y)
        if pilot is not None:
            _, pilot_fitted, Sigma_p, phi_p, edf_p = pilot
            r_cond = y - pilot_fitted
            check = np.where(r_cond >= 0, tau * r_cond, (tau - 1.0) * r_cond)
            sigma_t = float(ws.row_weight @ check) / ws.N_w
            # pilot residuals are overfit-tight; inflate by the usual
            # degrees-of-freedom factor, capped for tiny samples
            sigma_t *= ws.N_w / max(ws.N_w - edf_p, ws.N_w / 4.0)
            usable = (
                sigma_t > 10.0 * SIGMA_FLOOR
                and not 0.8 < sigma_t / sigma_work < 1.25
            )
            if usable:
                # the rerun starts at the pilot covariance expressed in the
                # new working units, which is already near its optimum there;
                # beta and the modes carry over from the finished fit
                try:
                    xi_t = (
                        cov_to_xi(Sigma_p / sigma_t + 1e-8 * np.eye(d.q))
                        if d.q > 0
                        else np.zeros(0)
                    )
                except np.linalg.LinAlgError:
                    xi_t = _rescale_xi(theta_fit.xi, sigma_work / sigma_t, d.q)
                log_phi_t = (
                    np.log(np.maximum(phi_p / sigma_t, 1e-6))
                    if d.s
                    else np.zeros(0)
                )
                theta_try = Theta(
                    beta=theta_fit.beta.copy(), xi=xi_t, log_phi=log_phi_t
                )
                # two rounds ending at the same terminal bandwidth as the
                # main schedule, mirroring its last two rounds
                vec_t, w_t, trace_t, conv_t, _ = run_schedule(
                    pack_theta(theta_try),
                    final.mode.w_hat,
                    sigma_t,
                    omega / controls.omega_shrink,
                    2,
                )
                theta_t = unpack_theta(vec_t, d)
                final_t = _laplace(theta_t, ws, loss, controls, w0=w_t, y=y)
                if np.isfinite(final_t.loglik) and final_t.mode.converged:
                    pnr1 = level_fits(theta_fit, final.mode.w_hat)[4]
                    pnr2 = level_fits(theta_t, final_t.mode.w_hat)[4]
                    if abs(pnr2 - tau) <= abs(pnr1 - tau) + 0.02:
                        theta_fit, final = theta_t, final_t
                        sigma_work, converged = sigma_t, conv_t
                        trace = trace + trace_t
                        iterations += 2
                        refined = True

    mode = final.mode
    sigma_hat = final.sigma_hat
    U, v, level0, level1, pnr_val = level_fits(theta_fit, mode.w_hat)

    theta_hat = _unscale_theta(theta_fit, y_scale, d.q, sigma_hat)
    data = designs.data
    return FitResult(
        tau=tau,
        theta_hat=theta_hat,
        w_hat=mode.w_hat * y_scale,
        u=U * y_scale,
        v=v * y_scale,
        sigma_hat=max(sigma_hat * y_scale, SIGMA_FLOOR),
        loglik_trace=np.asarray(trace),
        omega_final=omega * y_scale,
        pnr=pnr_val,
        converged=converged and mode.converged,
        iterations=iterations,
        fitted_level0=data.restore_order(level0 * y_scale),
        fitted_level1=data.restore_order(level1 * y_scale),
        scaling=ScalingRecord(scale=y_scale, sigma_work=sigma_work * y_scale),
        controls=controls,
        designs=designs,
        inner=mode,
        weights=weights,
        scale_refined=refined,
    )


# ---------------------------------------------------------------------------
# prediction and diagnostics
# ---------------------------------------------------------------------------

def predict(
    fit_result: FitResult,
    newdata,
    level: int = 0,
    clusters=None,
    return_flags: bool = False,
):
    """Conditional quantile predictions at new covariate values.

    Parameters
    ----------
    fit_result : FitResult
    newdata : ClusteredData or dict of named covariate arrays
        With a ClusteredData input, predictions come back in its input row
        order and its cluster labels are used for level 1.
    level : {0, 1}
        0: population-level (fixed effects and smooths only).
        1: adds the cluster random effects Z u for each row's cluster.
    clusters : array_like, optional
        Cluster labels per row for level-1 prediction with dict input.
    return_flags : bool
        Also return a boolean array marking rows whose cluster was not seen
        in training (those rows fall back to the level-0 prediction).
    """
    if level not in (0, 1):
        raise ValueError("level must be 0 or 1")
    designs = fit_result.designs
    is_container = isinstance(newdata, ClusteredData)
    cov = newdata.covariates if is_container else {
        k: np.asarray(v, dtype=float).ravel() for k, v in newdata.items()
    }
    F, Z, B = designs.build_rows(cov)
    pred = F @ fit_result.theta_hat.beta
    if designs.dims.H > 0:
        pred = pred + B @ fit_result.v
    unknown = np.zeros(pred.shape[0], dtype=bool)
    if level == 1 and designs.dims.q > 0:
        labels = None
        if clusters is not None:
            labels = np.asarray(clusters).ravel()
        elif is_container:
            labels = newdata.cluster
        if labels is None:
            raise ValueError("level-1 prediction needs cluster labels")
        if labels.shape[0] != pred.shape[0]:
            raise ValueError("cluster labels and rows differ in length")
        train_labels = list(designs.data.labels)
        index = {lab: i for i, lab in enumerate(train_labels)}
        for j, lab in enumerate(labels):
            i = index.get(lab)
            if i is None:
                unknown[j] = True
            else:
                pred[j] += Z[j] @ fit_result.u[i]
    if is_container:
        pred = newdata.restore_order(pred)
        unknown = newdata.restore_order(unknown)
    return (pred, unknown) if return_flags else pred


def pnr(y, q_hat) -> float:
    """Proportion of negative residuals: mean of I{y - q_hat < 0}."""
    y = np.asarray(y, dtype=float).ravel()
    q_hat = np.asarray(q_hat, dtype=float).ravel()
    if y.shape[0] != q_hat.shape[0]:
        raise ValueError("y and predictions differ in length")
    return float(np.mean((y - q_hat) < 0))

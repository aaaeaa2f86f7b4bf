"""Model assembly for additive quantile regression with clustered data.

The fitted predictor for observation j in cluster i is

    F beta  +  Z_i u_i  +  B v

where F holds the parametric fixed effects together with the unpenalized
trend columns of every smooth, Z_i is the within-cluster random-effect design
(intercepts and slopes), and B stacks the penalized, identity-penalty columns
of the smooths.  The random effects w = (u_1, ..., u_M, v) carry a joint
scaled covariance

    Psi = blockdiag(I_M kron Sigma, Phi),    Phi = blockdiag(phi_k I_{H_k})

with Sigma parameterized through the log-Cholesky transform (logs of the
diagonal of the lower Cholesky factor, raw off-diagonal entries), which makes
the optimization space unconstrained.

Cluster resampling enters through nonnegative integer per-cluster counts.  A
count of w_i is handled exactly as if cluster i appeared w_i times as
distinct clusters sharing the same data: loss rows and the cluster's
covariance penalty are multiplied by w_i, zero-count clusters drop out of the
linear algebra entirely, and the effective totals N_w (observations) and M_w
(clusters) replace N and M in the likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import ReparameterizedBasis, SmoothTermSpec, build_basis, reparameterize

INTERCEPT_NAME = "(intercept)"


# ---------------------------------------------------------------------------
# data container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusteredData:
    """Response, covariates, and cluster labels, stored cluster-contiguous.

    Rows are reordered on construction so each cluster occupies one contiguous
    block (clusters keep their order of first appearance, rows keep their
    relative order).  ``order`` records the permutation: sorted row k came
    from input row ``order[k]``; ``restore_order`` maps per-row results back.
    """

    y: np.ndarray
    covariates: dict[str, np.ndarray]
    cluster: np.ndarray
    order: np.ndarray = field(default=None, repr=False)
    labels: np.ndarray = field(default=None, repr=False)
    sizes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        cluster = np.asarray(self.cluster).ravel()
        if y.size == 0:
            raise ValueError("response is empty")
        if cluster.shape[0] != y.shape[0]:
            raise ValueError("cluster labels and response differ in length")
        if not np.all(np.isfinite(y)):
            raise ValueError("response contains non-finite values")
        cov = {}
        for name, col in self.covariates.items():
            col = np.asarray(col, dtype=float).ravel()
            if col.shape[0] != y.shape[0]:
                raise ValueError(f"covariate {name!r} and response differ in length")
            if not np.all(np.isfinite(col)):
                raise ValueError(f"covariate {name!r} contains non-finite values")
            cov[name] = col

        # stable sort by order of first appearance of each cluster label
        _, first_idx, inverse = np.unique(cluster, return_index=True, return_inverse=True)
        appearance_rank = np.argsort(np.argsort(first_idx))
        codes = appearance_rank[inverse]
        order = np.argsort(codes, kind="stable")
        labels = cluster[np.sort(first_idx)]
        sizes = np.bincount(codes, minlength=labels.shape[0])

        object.__setattr__(self, "y", y[order])
        object.__setattr__(self, "covariates", {k: v[order] for k, v in cov.items()})
        object.__setattr__(self, "cluster", cluster[order])
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.labels.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        """Start row of each cluster block in the sorted arrays."""
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

    def restore_order(self, values: np.ndarray) -> np.ndarray:
        """Map per-row values from sorted order back to the input row order."""
        out = np.empty_like(values)
        out[self.order] = values
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    ``random_terms`` uses "1" for a random intercept and covariate names for
    random slopes; an empty tuple drops cluster random effects entirely.
    """

    response: str = "y"
    smooth_terms: tuple = ()
    linear_terms: tuple = ()
    random_terms: tuple = ("1",)
    include_intercept: bool = True
    taus: tuple = (0.5,)

    def __post_init__(self):
        object.__setattr__(self, "smooth_terms", tuple(self.smooth_terms))
        object.__setattr__(self, "linear_terms", tuple(self.linear_terms))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))
        taus = tuple(float(t) for t in np.atleast_1d(np.asarray(self.taus, dtype=float)))
        if any(not 0.0 < t < 1.0 for t in taus):
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        object.__setattr__(self, "taus", taus)
        seen = set()
        for sm in self.smooth_terms:
            if not isinstance(sm, SmoothTermSpec):
                raise TypeError("smooth_terms must contain SmoothTermSpec entries")
            if sm.variable in seen:
                raise ValueError(f"duplicate smooth on {sm.variable!r}")
            seen.add(sm.variable)


@dataclass(frozen=True)
class ClusterWeights:
    """Per-cluster resampling counts; count w_i means w_i distinct copies."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("counts must be a nonempty 1-d array")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.floor(c)):
                raise ValueError("counts must be integers")
            c = c.astype(int)
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        if c.sum() == 0:
            raise ValueError("at least one cluster must have positive count")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def active(self) -> np.ndarray:
        return self.counts > 0


# ---------------------------------------------------------------------------
# assembled design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dimensions:
    N: int            # observations
    M: int            # clusters
    p: int            # fixed-effect columns
    q: int            # random-effect columns per cluster
    s: int            # smooth terms
    H: int            # total penalized spline columns
    H_k: tuple        # penalized columns per smooth
    m: int            # q * (q + 1) // 2, length of the log-Cholesky vector


@dataclass(frozen=True)
class SmoothBlock:
    """One smooth term inside an assembled design."""

    spec: SmoothTermSpec
    basis: ReparameterizedBasis
    null_keep: np.ndarray    # indices of retained null columns (after centering)
    null_center: np.ndarray  # column means removed from the retained columns
    f_slice: slice           # columns of F holding this smooth's trend part
    b_slice: slice           # columns of B holding this smooth's penalized part


@dataclass(frozen=True)
class DesignSet:
    """Design matrices and bookkeeping produced by ``assemble``.

    F, Z, and B are row-aligned with the sorted rows of the training data.
    Z holds each observation's random-effect covariate row; the full
    random-intercept/slope design is block diagonal over clusters with blocks
    Z[start_i : start_i + n_i].
    """

    data: ClusteredData
    spec: ModelSpec
    F: np.ndarray
    Z: np.ndarray
    B: np.ndarray
    dims: Dimensions
    fixed_names: tuple
    random_names: tuple
    smooths: tuple            # of SmoothBlock
    linear_names: tuple
    include_intercept: bool
    warnings: tuple = ()

    def build_rows(self, covariates: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(F, Z, B) rows for new covariate values, aligned with their order."""
        n = next(iter(covariates.values())).shape[0] if covariates else 0
        cov = {k: np.asarray(v, dtype=float).ravel() for k, v in covariates.items()}
        for name in self.linear_names + tuple(s.spec.variable for s in self.smooths):
            if name not in cov:
                raise ValueError(f"missing covariate {name!r}")
            n = cov[name].shape[0]
        F_parts = []
        if self.include_intercept:
            F_parts.append(np.ones((n, 1)))
        for name in self.linear_names:
            F_parts.append(cov[name][:, None])
        B_parts = []
        for sm in self.smooths:
            null, pen = sm.basis.evaluate(cov[sm.spec.variable])
            F_parts.append(null[:, sm.null_keep] - sm.null_center)
            B_parts.append(pen)
        F = np.hstack(F_parts) if F_parts else np.zeros((n, 0))
        B = np.hstack(B_parts) if B_parts else np.zeros((n, 0))
        Z_parts = []
        for name in self.random_names:
            if name == "1":
                Z_parts.append(np.ones((n, 1)))
            else:
                if name not in cov:
                    raise ValueError(f"missing covariate {name!r}")
                Z_parts.append(cov[name][:, None])
        Z = np.hstack(Z_parts) if Z_parts else np.zeros((n, 0))
        return F, Z, B


def assemble(data: ClusteredData, spec: ModelSpec) -> DesignSet:
    """Build all design matrices for one model description.

    Parameters
    ----------
    data : ClusteredData
        Training data (already cluster-sorted by construction).
    spec : ModelSpec
        Terms of the model: smooths contribute their trend columns to F and
        identity-penalty columns to B; linear terms enter F directly;
        random terms form the per-cluster design Z.

    Notes
    -----
    Every smooth's penalty null space contains the constant function, which
    would collide with the global intercept.  The retained trend columns are
    centered and then reduced by a pivoted QR so that only directions carrying
    variation beyond the intercept survive (for cubic-type smooths, exactly
    one linear column per smooth).
    """
    smooth_terms = spec.smooth_terms
    linear_terms = spec.linear_terms
    random_terms = spec.random_terms
    include_intercept = spec.include_intercept
    N = data.n_obs
    M = data.n_clusters

    fixed_names: list = []
    F_parts = []
    if include_intercept:
        F_parts.append(np.ones((N, 1)))
        fixed_names.append(INTERCEPT_NAME)
    for name in linear_terms:
        if name not in data.covariates:
            raise ValueError(f"unknown covariate {name!r}")
        F_parts.append(data.covariates[name][:, None])
        fixed_names.append(name)

    smooths = []
    B_parts = []
    H_k = []
    f_col = sum(part.shape[1] for part in F_parts)
    b_col = 0
    for spec in smooth_terms:
        if spec.variable not in data.covariates:
            raise ValueError(f"unknown covariate {spec.variable!r}")
        rb = reparameterize(build_basis(data.covariates[spec.variable], spec))
        centered = rb.null_cols - rb.null_cols.mean(axis=0)
        keep = _independent_columns(centered)
        null_center = rb.null_cols[:, keep].mean(axis=0)
        kept_cols = rb.null_cols[:, keep] - null_center
        F_parts.append(kept_cols)
        for j in range(kept_cols.shape[1]):
            fixed_names.append(f"s({spec.variable}).trend{j + 1}")
        B_parts.append(rb.pen_cols)
        H_k.append(rb.H_k)
        sm = SmoothBlock(
            spec=spec,
            basis=rb,
            null_keep=keep,
            null_center=null_center,
            f_slice=slice(f_col, f_col + kept_cols.shape[1]),
            b_slice=slice(b_col, b_col + rb.H_k),
        )
        smooths.append(sm)
        f_col += kept_cols.shape[1]
        b_col += rb.H_k

    F = np.hstack(F_parts) if F_parts else np.zeros((N, 0))
    B = np.hstack(B_parts) if B_parts else np.zeros((N, 0))

    Z_parts = []
    random_names = []
    for name in random_terms:
        if name == "1":
            Z_parts.append(np.ones((N, 1)))
        else:
            if name not in data.covariates:
                raise ValueError(f"unknown covariate {name!r}")
            Z_parts.append(data.covariates[name][:, None])
        random_names.append(name)
    Z = np.hstack(Z_parts) if Z_parts else np.zeros((N, 0))

    q = Z.shape[1]
    dims = Dimensions(
        N=N,
        M=M,
        p=F.shape[1],
        q=q,
        s=len(smooths),
        H=B.shape[1],
        H_k=tuple(H_k),
        m=q * (q + 1) // 2,
    )
    warnings = ()
    if q > data.sizes.min():
        warnings = (
            f"random-effect dimension {q} exceeds the smallest cluster size "
            f"{int(data.sizes.min())}; cluster effects may be weakly identified",
        )
    return DesignSet(
        data=data,
        spec=spec,
        F=F,
        Z=Z,
        B=B,
        dims=dims,
        fixed_names=tuple(fixed_names),
        random_names=tuple(random_names),
        smooths=tuple(smooths),
        linear_names=tuple(linear_terms),
        include_intercept=include_intercept,
        warnings=warnings,
    )


def _independent_columns(A: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Indices of a maximal well-conditioned column subset (pivoted QR)."""
    if A.shape[1] == 0:
        return np.empty(0, dtype=int)
    norms = np.linalg.norm(A, axis=0)
    alive = np.where(norms > rtol * max(1.0, norms.max()))[0]
    if alive.size == 0:
        return alive
    from scipy.linalg import qr

    _, R, piv = qr(A[:, alive], mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0])) if diag.size else 0
    keep = np.sort(piv[:rank])
    return alive[keep]


# ---------------------------------------------------------------------------
# covariance parameterization
# ---------------------------------------------------------------------------

def xi_to_cholesky(xi: np.ndarray, q: int) -> np.ndarray:
    """Lower Cholesky factor from the log-Cholesky vector (column-major)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] != q * (q + 1) // 2:
        raise ValueError(f"xi has length {xi.shape[0]}, expected {q * (q + 1) // 2}")
    L = np.zeros((q, q))
    pos = 0
    for j in range(q):
        L[j, j] = np.exp(xi[pos])
        pos += 1
        for i in range(j + 1, q):
            L[i, j] = xi[pos]
            pos += 1
    return L


def cholesky_to_xi(L: np.ndarray) -> np.ndarray:
    q = L.shape[0]
    xi = np.empty(q * (q + 1) // 2)
    pos = 0
    for j in range(q):
        xi[pos] = np.log(L[j, j])
        pos += 1
        for i in range(j + 1, q):
            xi[pos] = L[i, j]
            pos += 1
    return xi


def xi_to_cov(xi: np.ndarray, q: int) -> np.ndarray:
    """Scaled cluster covariance from its log-Cholesky parameters."""
    L = xi_to_cholesky(xi, q)
    return L @ L.T


def cov_to_xi(Sigma: np.ndarray) -> np.ndarray:
    """Log-Cholesky parameters of a symmetric positive definite matrix."""
    return cholesky_to_xi(np.linalg.cholesky(np.asarray(Sigma, dtype=float)))


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Theta:
    """Model parameters: fixed effects plus covariance parameters.

    ``xi`` and ``log_phi`` parameterize the scale-free covariances (the
    residual scale sigma multiplies them to give the covariances proper);
    sigma itself is profiled out during fitting and stored alongside.
    """

    beta: np.ndarray      # (p,) fixed effects
    xi: np.ndarray        # (m,) log-Cholesky of the scaled cluster covariance
    log_phi: np.ndarray   # (s,) log smoothing variances, one per smooth
    sigma: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).ravel())
        object.__setattr__(self, "log_phi", np.asarray(self.log_phi, dtype=float).ravel())
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def cov_cluster(self, q: int) -> np.ndarray:
        return xi_to_cov(self.xi, q)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.log_phi)


def pack(beta, Sigma, phi, sigma=None) -> Theta:
    """Build a Theta from natural parameters.

    Parameters
    ----------
    beta : array_like
        Fixed effects.
    Sigma : array_like
        Scaled cluster covariance, symmetric positive definite ((0, 0)-shaped
        when there are no cluster random effects).
    phi : array_like
        Scaled smoothing variances, one per smooth, all positive.
    sigma : float, optional
        Residual scale; may be omitted while it is profiled.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.size == 0:
        xi = np.zeros(0)
    else:
        if not np.allclose(Sigma, Sigma.T, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        try:
            xi = cov_to_xi(Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Sigma must be positive definite") from exc
    phi = np.asarray(phi, dtype=float).ravel()
    if np.any(phi <= 0):
        raise ValueError("smoothing variances must be positive")
    return Theta(beta=beta, xi=xi, log_phi=np.log(phi), sigma=sigma)


def unpack(theta: Theta) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[float]]:
    """(beta, Sigma, phi, sigma) from a Theta; inverse of ``pack`` to 1e-12."""
    m = theta.xi.shape[0]
    q = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if q * (q + 1) // 2 != m:
        raise ValueError(f"xi length {m} is not a triangular number")
    return theta.beta, xi_to_cov(theta.xi, q), np.exp(theta.log_phi), theta.sigma


def pack_theta(theta: Theta) -> np.ndarray:
    """Flatten (beta, xi, log_phi) for the outer optimizer; sigma is profiled."""
    return np.concatenate([theta.beta, theta.xi, theta.log_phi])


def unpack_theta(vec: np.ndarray, dims: Dimensions, sigma: Optional[float] = None) -> Theta:
    vec = np.asarray(vec, dtype=float).ravel()
    expected = dims.p + dims.m + dims.s
    if vec.shape[0] != expected:
        raise ValueError(f"parameter vector has length {vec.shape[0]}, expected {expected}")
    beta = vec[: dims.p]
    xi = vec[dims.p : dims.p + dims.m]
    log_phi = vec[dims.p + dims.m :]
    return Theta(beta=beta, xi=xi, log_phi=log_phi, sigma=sigma)


# ---------------------------------------------------------------------------
# random-effect precision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Precision:
    """Inverse of the scaled random-effect covariance, in blocks.

    The stacked random-effect vector is [u_1, ..., u_M, v] over all clusters.
    Count w_i multiplies cluster i's penalty, matching w_i distinct copies of
    the cluster at a shared mode; a zero count removes the cluster from every
    count-weighted quantity, so its u block is inert (held at zero by the
    solvers).
    """

    sigma_inv: np.ndarray   # (q, q) inverse scaled cluster covariance
    phi_inv: np.ndarray     # (H,) inverse smoothing variance per column of B
    counts: np.ndarray      # (M,) per-cluster counts, zeros included
    q: int
    H: int
    logdet: float           # weighted log|Psi| = M_w log|Sigma| + sum H_k log phi_k

    def quad_form(self, w: np.ndarray) -> float:
        """w' Psi^{-1} w with per-cluster count weighting."""
        total = 0.0
        q, H = self.q, self.H
        nu = w.shape[0] - H
        if q > 0 and nu > 0:
            U = w[:nu].reshape(-1, q)
            total += float(np.sum(self.counts * np.einsum("ij,jk,ik->i", U, self.sigma_inv, U)))
        if H > 0:
            v = w[w.shape[0] - H :]
            total += float(v @ (self.phi_inv * v))
        return total

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Psi^{-1} w (count-weighted), same layout as the input."""
        out = np.empty_like(w)
        q, H = self.q, self.H
        nu = w.shape[0] - H
        if q > 0 and nu > 0:
            U = w[:nu].reshape(-1, q)
            out[:nu] = (self.counts[:, None] * (U @ self.sigma_inv)).ravel()
        if H > 0:
            out[nu:] = self.phi_inv * w[nu:]
        return out


def build_precision(
    theta: Theta, dims: Dimensions, weights: Optional[ClusterWeights] = None
) -> Precision:
    """Blockwise inverse and log-determinant of the scaled covariance.

    The log-determinant counts cluster blocks with their multiplicities:
    M_w log|Sigma| + sum_k H_k log phi_k, where M_w is the total count.
    """
    q, H = dims.q, dims.H
    if weights is None:
        counts = np.ones(dims.M, dtype=int)
    else:
        if weights.counts.shape[0] != dims.M:
            raise ValueError("weights length does not match the number of clusters")
        counts = weights.counts
    M_w = int(counts.sum())

    logdet = 0.0
    if q > 0:
        L = xi_to_cholesky(theta.xi, q)
        log_det_sigma = 2.0 * float(np.sum(np.log(np.diag(L))))
        Linv = np.linalg.inv(L)
        sigma_inv = Linv.T @ Linv
        logdet += M_w * log_det_sigma
    else:
        sigma_inv = np.zeros((0, 0))
    phi_inv = np.empty(H)
    pos = 0
    for k, hk in enumerate(dims.H_k):
        phi_inv[pos : pos + hk] = np.exp(-theta.log_phi[k])
        logdet += hk * theta.log_phi[k]
        pos += hk
    return Precision(
        sigma_inv=sigma_inv,
        phi_inv=phi_inv,
        counts=np.asarray(counts, dtype=float),
        q=q,
        H=H,
        logdet=logdet,
    )

"""Spline bases with curvature penalties, and their mixed-model form.

Three one-dimensional smoothers are provided, each defined by a design matrix
X (one column per basis function) and a positive semidefinite penalty S that
represents the integrated squared second derivative of the fitted function:

* ``cubic_regression``: natural cubic spline interpolating values at K knots.
  The coefficient vector holds the function values at the knots, the penalty is
  the classical D' B^{-1} D band-matrix construction, and evaluation between
  knots uses the natural-spline interpolation formula with linear tails.
* ``bspline``: cubic B-spline basis on quantile-spaced interior knots.  The
  penalty integrates products of second derivatives exactly with a two-point
  Gauss-Legendre rule per inter-knot interval (the integrand is piecewise
  quadratic).
* ``thin_plate_low_rank``: radial basis |r|^3 / 12 on the distinct data values
  with the polynomial trend [1, x] projected out, truncated to the leading
  eigenvectors of the projected kernel.  The retained rank is dimension - 2.

``reparameterize`` rotates any (X, S) pair into the form used by the fitting
code: an unpenalized block spanning the null space of S (for cubic-type bases,
constant and linear trends) and a penalized block whose penalty is the
identity, so its coefficients can be treated as independent random effects
with a single variance per smooth term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

# Relative eigenvalue threshold separating null and penalized directions.
NULLSPACE_RTOL = 1e-10


@dataclass(frozen=True)
class SmoothTermSpec:
    """Declaration of one smooth term.

    Parameters
    ----------
    variable : str
        Name of the covariate the smooth applies to.
    basis_kind : str
        One of ``cubic_regression``, ``bspline``, ``thin_plate_low_rank``.
    dimension : int
        Number of basis functions (columns of the raw design), at least 3;
        ``bspline`` needs at least 4 for a cubic basis.
    knots : ndarray, optional
        Knot locations (``cubic_regression``), the full padded knot vector or
        interior knots (``bspline``), or kernel centers
        (``thin_plate_low_rank``).  Chosen from the data when omitted.
    center : bool
        Subtract training-sample column means from the penalized block after
        reparameterization.  Default True.
    """

    variable: str
    basis_kind: str = "cubic_regression"
    dimension: int = 10
    knots: Optional[np.ndarray] = None
    center: bool = True

    def __post_init__(self):
        kinds = ("cubic_regression", "bspline", "thin_plate_low_rank")
        if self.basis_kind not in kinds:
            raise ValueError(f"basis_kind must be one of {kinds}, got {self.basis_kind!r}")
        if self.dimension < 3:
            raise ValueError(f"dimension must be at least 3, got {self.dimension}")
        if self.basis_kind == "bspline" and self.dimension < 4:
            raise ValueError("bspline basis is cubic and needs dimension >= 4")
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=float)
            if k.ndim != 1 or np.any(~np.isfinite(k)):
                raise ValueError("knots must be a finite 1-d array")
            if np.any(np.diff(k) <= 0):
                raise ValueError("knots must be strictly increasing")
            object.__setattr__(self, "knots", k)


@dataclass(frozen=True)
class RawBasis:
    """Design matrix, penalty, and evaluation recipe for one smooth term."""

    spec: SmoothTermSpec
    design: np.ndarray   # (N, K) basis evaluated at the training values
    penalty: np.ndarray  # (K, K) PSD curvature penalty
    knots: np.ndarray    # locations the evaluation recipe is anchored to
    # extra arrays the evaluator needs (kind dependent), e.g. the value-to-
    # second-derivative map of the natural spline or thin-plate eigenvectors
    eval_state: dict = field(default_factory=dict, repr=False)

    def evaluate(self, x) -> np.ndarray:
        """Raw basis matrix at new covariate values (rows align with x)."""
        x = np.asarray(x, dtype=float).ravel()
        kind = self.spec.basis_kind
        if kind == "cubic_regression":
            return _ncs_design(x, self.knots, self.eval_state["gamma_map"])
        if kind == "bspline":
            return BSpline.design_matrix(
                np.clip(x, self.knots[0], self.knots[-1]), self.eval_state["t"], 3
            ).toarray()
        # thin plate: [1, x, eta(|x - centers|) @ W]
        radial = _tps_kernel(np.abs(x[:, None] - self.knots[None, :]))
        return np.column_stack([np.ones_like(x), x, radial @ self.eval_state["W"]])


@dataclass(frozen=True)
class ReparameterizedBasis:
    """Mixed-model form of a smooth: unpenalized trend + identity-penalty part.

    ``transform`` maps new-basis coefficients back to raw-basis coefficients,
    column blocks ordered [null | penalized], so
    ``raw_design @ transform == [null_cols | pen_cols + centering]``.
    """

    raw: RawBasis
    transform: np.ndarray         # (K, K) invertible change of basis
    null_cols: np.ndarray         # (N, d0) unpenalized directions at the data
    pen_cols: np.ndarray          # (N, H_k) penalized directions, centered if asked
    pen_center: np.ndarray        # column means removed from pen_cols (zeros if not)
    d0: int                       # nullity of the penalty
    H_k: int                      # number of penalized columns

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(null, penalized) design blocks at new covariate values."""
        full = self.raw.evaluate(x) @ self.transform
        null = full[:, : self.d0]
        pen = full[:, self.d0:] - self.pen_center
        return null, pen


# ---------------------------------------------------------------------------
# natural cubic regression spline
# ---------------------------------------------------------------------------

def _ncs_penalty_parts(knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Band matrices (D, B) with penalty D' B^{-1} D for values at the knots."""
    K = knots.size
    h = np.diff(knots)
    D = np.zeros((K - 2, K))
    B = np.zeros((K - 2, K - 2))
    for j in range(1, K - 1):
        i = j - 1
        D[i, j - 1] = 1.0 / h[j - 1]
        D[i, j] = -1.0 / h[j - 1] - 1.0 / h[j]
        D[i, j + 1] = 1.0 / h[j]
        B[i, i] = (h[j - 1] + h[j]) / 3.0
        if j < K - 2:
            B[i, i + 1] = B[i + 1, i] = h[j] / 6.0
    return D, B


def _ncs_design(x: np.ndarray, knots: np.ndarray, gamma_map: np.ndarray) -> np.ndarray:
    """Natural-spline values at x as linear maps of the knot values.

    gamma_map is the (K-2, K) solve(B, D) matrix sending knot values to the
    second derivatives at the interior knots; the boundary second derivatives
    are zero, which makes the tails linear.
    """
    K = knots.size
    h = np.diff(knots)
    n = x.size
    Wm = np.zeros((n, K))
    Wg = np.zeros((n, K - 2))  # weights on interior second derivatives

    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, K - 2)
    inside = (x >= knots[0]) & (x <= knots[-1])

    xi = x[inside]
    ji = j[inside]
    hj = h[ji]
    t0 = knots[ji]
    t1 = knots[ji + 1]
    wr = (xi - t0) / hj
    wl = (t1 - xi) / hj
    rows = np.where(inside)[0]
    Wm[rows, ji] += wl
    Wm[rows, ji + 1] += wr
    cross = -(xi - t0) * (t1 - xi) / 6.0
    gl = cross * (1.0 + wl)
    gr = cross * (1.0 + wr)
    # gamma index g = knot index - 1; boundary gammas are fixed at zero
    left_int = ji >= 1
    Wg[rows[left_int], ji[left_int] - 1] += gl[left_int]
    right_int = ji + 1 <= K - 2
    Wg[rows[right_int], ji[right_int]] += gr[right_int]

    below = x < knots[0]
    if below.any():
        d = x[below] - knots[0]
        rows = np.where(below)[0]
        Wm[rows, 0] += 1.0 - d / h[0]
        Wm[rows, 1] += d / h[0]
        Wg[rows, 0] += -d * h[0] / 6.0
    above = x > knots[-1]
    if above.any():
        d = x[above] - knots[-1]
        rows = np.where(above)[0]
        Wm[rows, K - 1] += 1.0 + d / h[-1]
        Wm[rows, K - 2] += -d / h[-1]
        Wg[rows, K - 3] += d * h[-1] / 6.0
    return Wm + Wg @ gamma_map


# ---------------------------------------------------------------------------
# thin plate (cubic radial kernel), low rank
# ---------------------------------------------------------------------------

def _tps_kernel(r: np.ndarray) -> np.ndarray:
    return np.abs(r) ** 3 / 12.0


def _quantile_knots(x: np.ndarray, count: int) -> np.ndarray:
    distinct = np.unique(x)
    if distinct.size < count:
        raise ValueError(
            f"could not place {count} distinct knots on {distinct.size} distinct values"
        )
    knots = np.unique(np.quantile(distinct, np.linspace(0.0, 1.0, count)))
    if knots.size != count:
        raise ValueError(
            f"could not place {count} distinct knots on {distinct.size} distinct values"
        )
    return knots


# ---------------------------------------------------------------------------
# public constructors
# ---------------------------------------------------------------------------

def build_basis(x, spec: SmoothTermSpec) -> RawBasis:
    """Construct the raw design matrix and curvature penalty for one smooth.

    Parameters
    ----------
    x : array_like
        Covariate values, length N.
    spec : SmoothTermSpec
        Basis declaration; ``spec.knots`` overrides data-driven placement.

    Returns
    -------
    RawBasis
        Bundle with ``design`` (N, K), ``penalty`` (K, K), and enough state to
        evaluate the same basis at new covariate values.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0 or np.any(~np.isfinite(x)):
        raise ValueError("covariate values must be a nonempty finite array")
    K = spec.dimension
    if np.unique(x).size < K:
        raise ValueError(
            f"dimension {K} exceeds the {np.unique(x).size} distinct covariate values"
        )
    if spec.knots is not None and (spec.knots[0] > x.min() or spec.knots[-1] < x.max()):
        raise ValueError("explicit knots must span the covariate range")

    if spec.basis_kind == "cubic_regression":
        knots = spec.knots if spec.knots is not None else _quantile_knots(x, K)
        if knots.size != K or np.any(np.diff(knots) <= 0):
            raise ValueError(f"cubic_regression needs {K} strictly increasing knots")
        D, B = _ncs_penalty_parts(knots)
        gamma_map = np.linalg.solve(B, D)
        S = D.T @ gamma_map
        S = 0.5 * (S + S.T)
        design = _ncs_design(x, knots, gamma_map)
        return RawBasis(spec, design, S, knots, {"gamma_map": gamma_map})

    if spec.basis_kind == "bspline":
        # explicit knots are the K - 2 breakpoints (boundaries included);
        # the boundary knots are repeated internally for the cubic basis
        n_int = K - 4
        if spec.knots is not None:
            if spec.knots.size != K - 2:
                raise ValueError(f"bspline with dimension {K} needs {K - 2} breakpoints")
            lo, hi = spec.knots[0], spec.knots[-1]
            interior = spec.knots[1:-1]
        else:
            lo, hi = x.min(), x.max()
            interior = _quantile_knots(x, n_int + 2)[1:-1] if n_int > 0 else np.empty(0)
        t = np.concatenate([[lo] * 4, interior, [hi] * 4])
        S = _bspline_penalty(t, K)
        design = BSpline.design_matrix(np.clip(x, t[3], t[-4]), t, 3).toarray()
        return RawBasis(spec, design, S, t[3:-3], {"t": t})

    # thin_plate_low_rank
    centers = spec.knots if spec.knots is not None else np.unique(x)
    if centers.size < K:
        raise ValueError(
            f"thin_plate_low_rank with dimension {K} needs at least {K} distinct centers"
        )
    rank = K - 2
    T = np.column_stack([np.ones(centers.size), centers])
    E = _tps_kernel(centers[:, None] - centers[None, :])
    # project the polynomial trend out of the kernel, then truncate
    Q, _ = np.linalg.qr(T)
    P = np.eye(centers.size) - Q @ Q.T
    M = P @ E @ P
    M = 0.5 * (M + M.T)
    lam, U = np.linalg.eigh(M)
    order = np.argsort(lam)[::-1][:rank]
    lam_k = np.maximum(lam[order], 0.0)
    W = P @ U[:, order]
    S = np.zeros((K, K))
    S[2:, 2:] = np.diag(lam_k)
    radial = _tps_kernel(x[:, None] - centers[None, :])
    design = np.column_stack([np.ones(x.size), x, radial @ W])
    return RawBasis(spec, design, S, centers, {"W": W})


def _bspline_penalty(t: np.ndarray, K: int) -> np.ndarray:
    """Exact integral of second-derivative products for a cubic B-spline basis."""
    spl2 = BSpline(t, np.eye(K), 3).derivative(2)
    breaks = np.unique(t)
    # two-point Gauss-Legendre per interval integrates the piecewise-quadratic
    # products exactly
    g = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    S = np.zeros((K, K))
    for a, b in zip(breaks[:-1], breaks[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        nodes = mid + half * g
        vals = spl2(nodes)  # (2, K)
        S += half * (vals.T @ vals)
    return 0.5 * (S + S.T)


def reparameterize(raw: RawBasis) -> ReparameterizedBasis:
    """Split a penalized basis into unpenalized and identity-penalty blocks.

    An eigendecomposition S = V diag(lam) V' separates directions with
    (numerically) zero curvature penalty from the rest; the penalized block is
    rescaled by lam^{-1/2} so the penalty becomes the identity.

    Returns
    -------
    ReparameterizedBasis
        Satisfies ``raw.design @ transform == [null_cols | pen_cols_uncentered]``
        and ``transform.T @ penalty @ transform == blockdiag(0, I)``.
    """
    lam, V = np.linalg.eigh(raw.penalty)
    lam = np.maximum(lam, 0.0)
    cutoff = NULLSPACE_RTOL * (lam.max() if lam.size else 0.0)
    null_mask = lam <= cutoff
    d0 = int(null_mask.sum())
    H_k = lam.size - d0
    if H_k == 0:
        raise ValueError("penalty has no penalized directions; nothing to smooth")
    order = np.argsort(lam)  # null directions first, then increasing penalty
    V = V[:, order]
    lam = lam[order]
    scale = np.concatenate([np.ones(d0), lam[d0:] ** -0.5])
    transform = V * scale
    full = raw.design @ transform
    null_cols = full[:, :d0]
    pen = full[:, d0:]
    if raw.spec.center:
        pen_center = pen.mean(axis=0)
    else:
        pen_center = np.zeros(H_k)
    return ReparameterizedBasis(
        raw=raw,
        transform=transform,
        null_cols=null_cols,
        pen_cols=pen - pen_center,
        pen_center=pen_center,
        d0=d0,
        H_k=H_k,
    )

"""Tests for spline basis construction and the mixed-model reparameterization.

The load-bearing check is a dual route for the penalty: the quadratic form
m' S m produced by the basis builder must match a numerical integral of the
squared second derivative of the evaluated function.  The integrand is
piecewise quadratic for every kind, so a central second difference is exact
away from the knots and per-interval trapezoid sums converge fast.
"""

import numpy as np
import pytest

from aqmm.basis import (
    RawBasis,
    SmoothTermSpec,
    build_basis,
    reparameterize,
)

KINDS = ["cubic_regression", "bspline", "thin_plate_low_rank"]


def _x(n=80, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 3.0, size=n)


def _numeric_curvature_integral(raw: RawBasis, coef: np.ndarray) -> float:
    """Integral of f''(x)^2 over the knot hull, f given by raw basis coefficients.

    The function is piecewise cubic between knots, so f'' is linear on each
    open piece: two exact central second differences pin the line down and the
    integral of its square has a closed form.
    """
    knots = np.unique(raw.knots)
    f = lambda pts: raw.evaluate(pts) @ coef
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b - a < 1e-12:
            continue
        h = (b - a) * 0.05
        x1, x2 = a + 0.3 * (b - a), a + 0.7 * (b - a)
        d21, d22 = (f(np.array([x1 + h, x2 + h])) - 2.0 * f(np.array([x1, x2]))
                    + f(np.array([x1 - h, x2 - h]))) / h**2
        slope = (d22 - d21) / (x2 - x1)
        da = d21 + slope * (a - x1)
        db = d21 + slope * (b - x1)
        total += (b - a) * (da * da + da * db + db * db) / 3.0
    return total


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        SmoothTermSpec("x", basis_kind="nope")
    with pytest.raises(ValueError):
        SmoothTermSpec("x", dimension=2)
    with pytest.raises(ValueError):
        SmoothTermSpec("x", basis_kind="bspline", dimension=3)
    with pytest.raises(ValueError):
        SmoothTermSpec("x", knots=np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        build_basis(np.array([]), SmoothTermSpec("x"))
    # too few distinct values to place knots
    with pytest.raises(ValueError):
        build_basis(np.array([1.0, 1.0, 2.0]), SmoothTermSpec("x", dimension=5))


# ---------------------------------------------------------------------------
# kind-specific structure
# ---------------------------------------------------------------------------

def test_cubic_regression_interpolates_knot_values():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=7))
    at_knots = raw.evaluate(raw.knots)
    np.testing.assert_allclose(at_knots, np.eye(7), atol=1e-12)


def test_cubic_regression_linear_tails():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=6))
    rng = np.random.default_rng(1)
    coef = rng.normal(size=6)
    lo, hi = raw.knots[0], raw.knots[-1]
    for pts in (lo - np.array([3.0, 2.0, 1.0]), hi + np.array([1.0, 2.0, 3.0])):
        f = raw.evaluate(pts) @ coef
        second_diff = f[0] - 2.0 * f[1] + f[2]
        assert abs(second_diff) < 1e-10


def test_bspline_partition_of_unity():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "bspline", dimension=9))
    np.testing.assert_allclose(raw.design.sum(axis=1), 1.0, atol=1e-12)


def test_bspline_penalty_annihilates_linear():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "bspline", dimension=9))
    t = raw.eval_state["t"]
    ones = np.ones(9)
    greville = np.array([t[i + 1 : i + 4].mean() for i in range(9)])
    scale = np.abs(raw.penalty).max()
    assert np.abs(raw.penalty @ ones).max() < 1e-10 * scale
    assert np.abs(raw.penalty @ greville).max() < 1e-10 * scale


def test_cubic_regression_penalty_annihilates_linear():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=8))
    scale = np.abs(raw.penalty).max()
    assert np.abs(raw.penalty @ np.ones(8)).max() < 1e-10 * scale
    assert np.abs(raw.penalty @ raw.knots).max() < 1e-10 * scale


def test_knot_override_is_respected():
    x = _x()
    knots = np.linspace(-1.0, 3.0, 5)
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=5, knots=knots))
    np.testing.assert_allclose(raw.knots, knots)


# ---------------------------------------------------------------------------
# penalty equals the curvature integral (dual route)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_penalty_matches_numeric_curvature_integral(kind):
    x = _x(n=60, seed=3)
    dim = 6 if kind != "bspline" else 8
    raw = build_basis(x, SmoothTermSpec("x", kind, dimension=dim))
    rng = np.random.default_rng(4)
    for _ in range(3):
        coef = rng.normal(size=dim)
        quad = float(coef @ raw.penalty @ coef)
        integral = _numeric_curvature_integral(raw, coef)
        assert quad == pytest.approx(integral, rel=1e-5, abs=1e-8)


# ---------------------------------------------------------------------------
# reparameterization invariants
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_reparameterization_invariants(kind):
    x = _x(n=70, seed=5)
    dim = 7 if kind != "bspline" else 8
    raw = build_basis(x, SmoothTermSpec("x", kind, dimension=dim))
    rb = reparameterize(raw)

    # trend null space of the curvature penalty has dimension 2 (constant, linear)
    assert rb.d0 == 2
    assert rb.H_k == dim - 2

    # identity penalty in the new coordinates
    new_pen = rb.transform.T @ raw.penalty @ rb.transform
    expected = np.zeros((dim, dim))
    expected[2:, 2:] = np.eye(dim - 2)
    np.testing.assert_allclose(new_pen, expected, atol=1e-8)

    # transform reproduces the stored blocks at the training data
    full = raw.design @ rb.transform
    np.testing.assert_allclose(full[:, :2], rb.null_cols, atol=1e-8)
    np.testing.assert_allclose(full[:, 2:] - rb.pen_center, rb.pen_cols, atol=1e-8)

    # penalized block is centered
    np.testing.assert_allclose(rb.pen_cols.mean(axis=0), 0.0, atol=1e-8)

    # isometry: raw quadratic form equals the plain sum of squares of the
    # penalized coordinates
    rng = np.random.default_rng(6)
    gamma = rng.normal(size=dim)
    m = rb.transform @ gamma
    assert m @ raw.penalty @ m == pytest.approx(gamma[2:] @ gamma[2:], rel=1e-8, abs=1e-10)

    # evaluate() round-trips the training design
    null, pen = rb.evaluate(x)
    np.testing.assert_allclose(null, rb.null_cols, atol=1e-8)
    np.testing.assert_allclose(pen, rb.pen_cols, atol=1e-8)


def test_center_false_keeps_raw_columns():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=6, center=False))
    rb = reparameterize(raw)
    np.testing.assert_allclose(rb.pen_center, 0.0)
    full = raw.design @ rb.transform
    np.testing.assert_allclose(full[:, 2:], rb.pen_cols, atol=1e-12)


def test_null_space_spans_constant_and_linear():
    x = _x()
    raw = build_basis(x, SmoothTermSpec("x", "cubic_regression", dimension=6))
    rb = reparameterize(raw)
    # [1, x] must lie in the span of the null columns
    T = np.column_stack([np.ones_like(x), x])
    proj, *_ = np.linalg.lstsq(rb.null_cols, T, rcond=None)
    np.testing.assert_allclose(rb.null_cols @ proj, T, atol=1e-8)

"""Tests for data handling, design assembly, and the covariance blocks."""

import numpy as np
import pytest

from aqmm.basis import SmoothTermSpec
from aqmm.model import (
    ClusteredData,
    ClusterWeights,
    ModelSpec,
    Theta,
    assemble,
    build_precision,
    cov_to_xi,
    pack,
    pack_theta,
    unpack,
    unpack_theta,
    xi_to_cov,
)


def _toy_data(n_per=8, M=6, seed=0):
    rng = np.random.default_rng(seed)
    N = n_per * M
    cov = {
        "x1": rng.uniform(0, 4 * np.pi, N),
        "x2": rng.uniform(0, 1, N),
        "x3": rng.binomial(1, 0.3, N).astype(float),
        "x4": rng.normal(size=N),
    }
    y = rng.normal(size=N)
    cluster = np.repeat(np.arange(M), n_per)
    return ClusteredData(y=y, covariates=cov, cluster=cluster)


# ---------------------------------------------------------------------------
# clustered data container
# ---------------------------------------------------------------------------

def test_scrambled_rows_are_sorted_and_restorable():
    rng = np.random.default_rng(1)
    N = 40
    y = rng.normal(size=N)
    x = rng.normal(size=N)
    cluster = rng.integers(0, 5, size=N)
    data = ClusteredData(y=y, covariates={"x": x}, cluster=cluster)

    # contiguous blocks, order of first appearance preserved
    changes = int(np.sum(data.cluster[1:] != data.cluster[:-1]))
    assert changes == data.n_clusters - 1
    seen = []
    for lab in data.cluster:
        if lab not in seen:
            seen.append(lab)
    assert list(data.labels) == seen

    # permutation round-trips rows and keeps (y, x, cluster) tuples intact
    np.testing.assert_array_equal(data.restore_order(data.y), y)
    np.testing.assert_array_equal(data.restore_order(data.covariates["x"]), x)
    np.testing.assert_array_equal(data.restore_order(data.cluster), cluster)
    np.testing.assert_array_equal(data.y, y[data.order])

    assert data.sizes.sum() == N
    np.testing.assert_array_equal(data.offsets, np.concatenate([[0], np.cumsum(data.sizes)[:-1]]))


def test_data_validation():
    with pytest.raises(ValueError):
        ClusteredData(y=np.array([]), covariates={}, cluster=np.array([]))
    with pytest.raises(ValueError):
        ClusteredData(y=np.ones(3), covariates={}, cluster=np.ones(2))
    with pytest.raises(ValueError):
        ClusteredData(y=np.array([1.0, np.nan]), covariates={}, cluster=np.ones(2))
    with pytest.raises(ValueError):
        ClusteredData(
            y=np.ones(2), covariates={"x": np.array([1.0, np.inf])}, cluster=np.ones(2)
        )


def test_cluster_weights_validation():
    with pytest.raises(ValueError):
        ClusterWeights(np.array([1, -1]))
    with pytest.raises(ValueError):
        ClusterWeights(np.array([0.5, 1.5]))
    with pytest.raises(ValueError):
        ClusterWeights(np.array([0, 0]))
    w = ClusterWeights(np.array([2.0, 0.0, 1.0]))
    assert w.total == 3
    np.testing.assert_array_equal(w.active, [True, False, True])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def test_assemble_shapes_and_names():
    data = _toy_data()
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[
                SmoothTermSpec("x1", "cubic_regression", dimension=8),
                SmoothTermSpec("x2", "cubic_regression", dimension=8),
            ],
            linear_terms=["x3", "x4"],
            random_terms=["1", "x4"],
        ),
    )
    d = ds.dims
    assert (d.N, d.M) == (48, 6)
    # intercept + 2 linear + one trend column per cubic smooth
    assert d.p == 5
    assert ds.fixed_names[:3] == ("(intercept)", "x3", "x4")
    assert all(name.startswith("s(") for name in ds.fixed_names[3:])
    assert (d.q, d.s) == (2, 2)
    assert d.H_k == (6, 6) and d.H == 12
    assert d.m == 3
    assert ds.F.shape == (48, 5) and ds.Z.shape == (48, 2) and ds.B.shape == (48, 12)
    # F has full column rank after the constant columns are resolved
    assert np.linalg.matrix_rank(ds.F) == 5
    # random-effect design: intercept column plus the x4 column
    np.testing.assert_allclose(ds.Z[:, 0], 1.0)
    np.testing.assert_allclose(ds.Z[:, 1], data.covariates["x4"])


def test_assemble_intercept_only():
    data = _toy_data()
    ds = assemble(data, ModelSpec(random_terms=()))
    d = ds.dims
    assert (d.p, d.q, d.s, d.H, d.m) == (1, 0, 0, 0, 0)
    assert ds.F.shape == (48, 1) and ds.Z.shape == (48, 0) and ds.B.shape == (48, 0)


def test_assemble_unknown_covariate():
    data = _toy_data()
    with pytest.raises(ValueError):
        assemble(data, ModelSpec(linear_terms=["nope"]))
    with pytest.raises(ValueError):
        assemble(data, ModelSpec(smooth_terms=[SmoothTermSpec("nope")]))
    with pytest.raises(ValueError):
        assemble(data, ModelSpec(random_terms=["1", "nope"]))


def test_build_rows_roundtrip():
    data = _toy_data()
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[SmoothTermSpec("x1", "cubic_regression", dimension=7)],
            linear_terms=["x3", "x4"],
            random_terms=["1", "x4"],
        ),
    )
    F, Z, B = ds.build_rows(data.covariates)
    np.testing.assert_allclose(F, ds.F, atol=1e-10)
    np.testing.assert_allclose(Z, ds.Z, atol=1e-10)
    np.testing.assert_allclose(B, ds.B, atol=1e-10)
    with pytest.raises(ValueError):
        ds.build_rows({"x1": np.zeros(3)})


# ---------------------------------------------------------------------------
# parameter vector and covariance transform
# ---------------------------------------------------------------------------

def test_log_cholesky_frozen_example():
    Sigma = np.array([[2.0, 0.8], [0.8, 1.0]])
    xi = cov_to_xi(Sigma)
    np.testing.assert_allclose(xi, [0.34657359, 0.56568542, -0.19283124], atol=1e-7)
    np.testing.assert_allclose(xi_to_cov(xi, 2), Sigma, atol=1e-12)


def test_pack_unpack_roundtrip():
    data = _toy_data()
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[SmoothTermSpec("x1", "cubic_regression", dimension=6)],
            linear_terms=["x3"],
            random_terms=["1", "x4"],
        ),
    )
    rng = np.random.default_rng(2)
    theta = Theta(
        beta=rng.normal(size=ds.dims.p),
        xi=rng.normal(size=ds.dims.m),
        log_phi=rng.normal(size=ds.dims.s),
        sigma=1.3,
    )
    vec = pack_theta(theta)
    back = unpack_theta(vec, ds.dims, sigma=1.3)
    np.testing.assert_allclose(back.beta, theta.beta, atol=1e-12)
    np.testing.assert_allclose(back.xi, theta.xi, atol=1e-12)
    np.testing.assert_allclose(back.log_phi, theta.log_phi, atol=1e-12)
    assert back.sigma == theta.sigma
    with pytest.raises(ValueError):
        unpack_theta(vec[:-1], ds.dims)
    with pytest.raises(ValueError):
        Theta(beta=np.ones(1), xi=np.ones(0), log_phi=np.ones(0), sigma=-1.0)


# ---------------------------------------------------------------------------
# precision blocks against a dense construction
# ---------------------------------------------------------------------------

def _dense_psi(Sigma, phi_cols, M):
    blocks = [Sigma] * M + ([np.diag(phi_cols)] if phi_cols.size else [])
    from scipy.linalg import block_diag

    return block_diag(*blocks) if blocks else np.zeros((0, 0))


def test_precision_matches_dense():
    rng = np.random.default_rng(3)
    data = _toy_data(M=4)
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[SmoothTermSpec("x1", "cubic_regression", dimension=7)],
            linear_terms=["x3"],
            random_terms=["1", "x4"],
        ),
    )
    d = ds.dims
    theta = Theta(
        beta=np.zeros(d.p), xi=np.array([0.2, -0.4, 0.1]), log_phi=np.array([0.7])
    )
    prec = build_precision(theta, d)
    Sigma = xi_to_cov(theta.xi, 2)
    phi_cols = np.repeat(np.exp(theta.log_phi), d.H_k)
    Psi = _dense_psi(Sigma, phi_cols, d.M)

    sign, logdet_dense = np.linalg.slogdet(Psi)
    assert sign > 0
    assert prec.logdet == pytest.approx(logdet_dense, rel=1e-10)

    w = rng.normal(size=d.M * d.q + d.H)
    dense_quad = w @ np.linalg.solve(Psi, w)
    assert prec.quad_form(w) == pytest.approx(dense_quad, rel=1e-10)
    np.testing.assert_allclose(prec.apply(w), np.linalg.solve(Psi, w), atol=1e-10)


def test_weighted_precision_equals_physical_duplication():
    rng = np.random.default_rng(4)
    data = _toy_data(M=3)
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[SmoothTermSpec("x1", "cubic_regression", dimension=6)],
            random_terms=["1", "x4"],
        ),
    )
    d = ds.dims
    theta = Theta(beta=np.zeros(d.p), xi=np.array([0.1, 0.3, -0.2]), log_phi=np.array([-0.5]))
    counts = ClusterWeights(np.array([2, 0, 1]))
    prec = build_precision(theta, d, weights=counts)

    Sigma = xi_to_cov(theta.xi, 2)
    phi_cols = np.repeat(np.exp(theta.log_phi), d.H_k)
    # three physical copies: cluster 1 twice, cluster 3 once
    Psi_dup = _dense_psi(Sigma, phi_cols, 3)
    sign, logdet_dense = np.linalg.slogdet(Psi_dup)
    assert prec.logdet == pytest.approx(logdet_dense, rel=1e-10)

    u1 = rng.normal(size=2)
    u2 = rng.normal(size=2)  # inert: zero count must silence this block
    u3 = rng.normal(size=2)
    v = rng.normal(size=d.H)
    w_full = np.concatenate([u1, u2, u3, v])
    w_dup = np.concatenate([u1, u1, u3, v])
    dup_quad = w_dup @ np.linalg.solve(Psi_dup, w_dup)
    assert prec.quad_form(w_full) == pytest.approx(dup_quad, rel=1e-10)

    applied = prec.apply(w_full)
    np.testing.assert_allclose(applied[2:4], 0.0, atol=0.0)
    assert w_full @ applied == pytest.approx(dup_quad, rel=1e-10)


def test_precision_no_random_effects():
    data = _toy_data()
    ds = assemble(
        data,
        ModelSpec(
            smooth_terms=[SmoothTermSpec("x1", "cubic_regression", dimension=6)],
            random_terms=(),
        ),
    )
    theta = Theta(beta=np.zeros(ds.dims.p), xi=np.zeros(0), log_phi=np.array([0.3]))
    prec = build_precision(theta, ds.dims)
    assert prec.logdet == pytest.approx(ds.dims.H * 0.3)
    v = np.linspace(-1, 1, ds.dims.H)
    assert prec.quad_form(v) == pytest.approx(np.sum(v * v) * np.exp(-0.3), rel=1e-12)


def test_pack_unpack_natural_parameters():
    Sigma = np.array([[2.0, 0.8], [0.8, 1.0]])
    theta = pack(beta=np.array([1.0, -2.0]), Sigma=Sigma, phi=np.array([0.5]), sigma=1.1)
    beta, Sigma_back, phi, sigma = unpack(theta)
    np.testing.assert_allclose(Sigma_back, Sigma, atol=1e-12)
    np.testing.assert_allclose(phi, [0.5], atol=1e-12)
    assert sigma == 1.1
    # identity covariance maps to the zero vector
    np.testing.assert_allclose(pack(np.zeros(1), np.eye(2), np.ones(1)).xi, 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        pack(np.zeros(1), np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(1))
    with pytest.raises(ValueError):
        pack(np.zeros(1), np.eye(2), np.array([0.0]))
    rng = np.random.default_rng(7)
    for _ in range(100):
        A = rng.normal(size=(3, 3))
        S = A @ A.T + 3 * np.eye(3)
        t = pack(np.zeros(1), S, np.ones(2))
        _, back, _, _ = unpack(t)
        assert np.abs(back - S).max() < 1e-10


def test_precision_logdet_frozen_example():
    # q=1 with scaled variance 4, M=3 clusters, one smooth with 2 columns and
    # smoothing variance 0.5
    theta = Theta(beta=np.zeros(1), xi=np.array([0.5 * np.log(4.0)]), log_phi=np.array([np.log(0.5)]))
    from aqmm.model import Dimensions

    dims = Dimensions(N=10, M=3, p=1, q=1, s=1, H=2, H_k=(2,), m=1)
    prec = build_precision(theta, dims)
    assert prec.logdet == pytest.approx(3 * np.log(4.0) + 2 * np.log(0.5), rel=1e-12)

"""Mesh, FEM assembly, precision, projector, and GMRF sampling tests."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from countfield import _lowlevel as ll
from countfield.core import matern_correlation
from countfield.spde import (
    FemMatrices,
    Mesh,
    _to_band,
    assemble_fem,
    auto_mesh,
    build_precision,
    build_projector,
    gmrf_sample,
    load_mesh,
    regular_mesh,
    save_mesh,
)

# Hand-computed matrices for the unit right triangle (0,0), (1,0), (0,1):
# area 1/2, lumped mass area/3 per vertex, stiffness (e_k . e_l) / (4 area).
UNIT_TRI_C = np.array([1 / 6, 1 / 6, 1 / 6])
UNIT_TRI_G1 = np.array([
    [1.0, -0.5, -0.5],
    [-0.5, 0.5, 0.0],
    [-0.5, 0.0, 0.5],
])


def unit_triangle_mesh():
    return Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 1, 2]]))


def test_regular_mesh_counts_and_areas():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    assert mesh.n_vertices == 9
    assert mesh.n_triangles == 8
    np.testing.assert_allclose(mesh.areas(), 0.5 ** 2 / 2.0)


def test_regular_mesh_hull_contains_padded_box():
    mesh = regular_mesh((0.0, 0.0, 1.0, 0.7), 0.3, padding=0.25)
    xmin, ymin = mesh.vertices.min(axis=0)
    xmax, ymax = mesh.vertices.max(axis=0)
    assert xmin <= -0.25 and ymin <= -0.25
    assert xmax >= 1.25 and ymax >= 0.95
    np.testing.assert_allclose(mesh.areas(), 0.3 ** 2 / 2.0)


def test_regular_mesh_rejects_bad_arguments():
    with pytest.raises(ValueError):
        regular_mesh((0, 0, 0, 1), 0.5)
    with pytest.raises(ValueError):
        regular_mesh((0, 0, 1, 1), 0.0)
    with pytest.raises(ValueError):
        regular_mesh((0, 0, 1, 1), 0.5, padding=-0.1)


def test_mesh_orientation_normalised():
    # Clockwise input triangle gets flipped to counterclockwise.
    mesh = Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 2, 1]]))
    assert mesh._signed_areas()[0] > 0


def test_mesh_rejects_degenerate_triangle():
    with pytest.raises(ValueError, match="degenerate"):
        Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
             triangles=np.array([[0, 1, 2]]))


def test_mesh_rejects_bad_indices():
    with pytest.raises(ValueError, match="out of range"):
        Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
             triangles=np.array([[0, 1, 5]]))


def test_mesh_io_roundtrip(tmp_path):
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.37, padding=0.1)
    path = tmp_path / "mesh.txt"
    save_mesh(mesh, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_mesh_io_comments_and_blanks(tmp_path):
    path = tmp_path / "mesh.txt"
    path.write_text("# a comment\n\n3 1\n0 0\n1 0  # inline\n0 1\n0 1 2\n")
    mesh = load_mesh(path)
    assert mesh.n_vertices == 3 and mesh.n_triangles == 1


def test_mesh_io_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3 1\n0 0\n1 zz\n0 1\n0 1 2\n")
    with pytest.raises(ValueError, match=r"bad\.txt:3"):
        load_mesh(path)
    path.write_text("3 1\n0 0\n1 0\n0 1\n0 1 9\n")
    with pytest.raises(ValueError, match=r"bad\.txt:5.*out of range"):
        load_mesh(path)
    path.write_text("3 2\n0 0\n1 0\n0 1\n0 1 2\n")
    with pytest.raises(ValueError, match="expected 3 vertex and 2 triangle"):
        load_mesh(path)


def test_fem_unit_triangle_frozen_values():
    fem = assemble_fem(unit_triangle_mesh())
    np.testing.assert_allclose(fem.c, UNIT_TRI_C, atol=1e-14)
    np.testing.assert_allclose(fem.g1.toarray(), UNIT_TRI_G1, atol=1e-14)
    g2_expect = UNIT_TRI_G1 @ np.diag(1.0 / UNIT_TRI_C) @ UNIT_TRI_G1
    np.testing.assert_allclose(fem.g2.toarray(), g2_expect, atol=1e-12)


def test_fem_mass_sums_to_area_and_stiffness_rows_vanish():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    fem = assemble_fem(mesh)
    assert fem.c.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.asarray(fem.g1.sum(axis=1)).ravel(), 0.0, atol=1e-10)
    np.testing.assert_allclose((fem.g1 - fem.g1.T).toarray(), 0.0, atol=1e-12)
    # g2 inherits zero row sums from g1.
    np.testing.assert_allclose(np.asarray(fem.g2.sum(axis=1)).ravel(), 0.0, atol=1e-10)


def test_precision_matches_dense_formula():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    fem = assemble_fem(mesh)
    kappa = 0.7
    prec = build_precision(fem, kappa)
    dense = (np.diag(fem.c) / kappa ** 2 + 2 * fem.g1.toarray()
             + kappa ** 2 * fem.g2.toarray()) / (4 * math.pi)
    np.testing.assert_allclose(prec.q.toarray(), dense, atol=1e-12)


def test_precision_pattern_is_fem_union():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.25)
    fem = assemble_fem(mesh)
    prec = build_precision(fem, 0.4)
    union = ((sp.diags(fem.c) != 0) + (fem.g1 != 0) + (fem.g2 != 0))
    got = prec.q != 0
    assert (got != union).nnz == 0


def test_precision_positive_definite_across_kappa():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 1.0 / 3.0)
    fem = assemble_fem(mesh)
    for kappa in (1e-3, 0.05, 0.5, 5.0, 500.0):
        prec = build_precision(fem, kappa)
        assert np.all(np.isfinite(prec.factor))
        dense = prec.q.toarray() + prec.jitter * np.eye(fem.n_nodes)
        sign, logdet = np.linalg.slogdet(dense)
        assert sign > 0
        if kappa <= 5.0:
            assert prec.log_det == pytest.approx(logdet, abs=1e-8)
        else:
            # extreme ranges are badly conditioned; factorization methods
            # legitimately differ in the last few digits
            assert prec.log_det == pytest.approx(logdet, rel=1e-5)


def test_precision_rejects_bad_kappa():
    fem = assemble_fem(unit_triangle_mesh())
    with pytest.raises(ValueError):
        build_precision(fem, 0.0)
    with pytest.raises(ValueError):
        build_precision(fem, -1.0)


def test_sparse_solve_matches_dense():
    mesh = regular_mesh((0.0, 0.0, 2.0, 1.0), 0.5)
    fem = assemble_fem(mesh)
    prec = build_precision(fem, 0.8)
    rng = np.random.default_rng(0)
    b = rng.normal(size=fem.n_nodes)
    got = prec.solve(b)
    expect = np.linalg.solve(prec.q.toarray(), b)
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_permutation_invariance():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.25)
    fem = assemble_fem(mesh)
    coo = fem.g2.tocoo()
    natural_bw = int(np.abs(coo.row - coo.col).max())
    fem_nat = FemMatrices(c=fem.c, g1=fem.g1, g2=fem.g2,
                          perm=np.arange(fem.n_nodes), bandwidth=natural_bw)
    p1 = build_precision(fem, 0.6)
    p2 = build_precision(fem_nat, 0.6)
    assert p1.log_det == pytest.approx(p2.log_det, abs=1e-8)
    rng = np.random.default_rng(1)
    b = rng.normal(size=fem.n_nodes)
    np.testing.assert_allclose(p1.solve(b), p2.solve(b), atol=1e-9)


def test_band_cholesky_against_scipy():
    rng = np.random.default_rng(2)
    n, bw = 30, 4
    a = rng.normal(size=(n, n))
    mat = a @ a.T + n * np.eye(n)
    mask = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= bw
    mat = np.where(mask, mat, 0.0)
    assert np.all(np.linalg.eigvalsh(mat) > 0)
    ab = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        ab[d, :n - d] = np.diag(mat, -d)
    L = ll.band_cholesky(ab)
    ref = scipy.linalg.cholesky_banded(ab, lower=True)
    np.testing.assert_allclose(L, ref, atol=1e-10)
    # solves against dense reference
    x = rng.normal(size=n)
    Ldense = np.linalg.cholesky(mat)
    np.testing.assert_allclose(ll.band_solve_lower(L, x),
                               scipy.linalg.solve_triangular(Ldense, x, lower=True),
                               atol=1e-10)
    np.testing.assert_allclose(ll.band_solve_upper(L, x),
                               scipy.linalg.solve_triangular(Ldense.T, x, lower=False),
                               atol=1e-10)


def test_band_cholesky_rejects_indefinite():
    ab = np.array([[1.0, -1.0], [2.0, 0.0]])  # [[1, 2], [2, -1]] is indefinite
    with pytest.raises(ValueError):
        ll.band_cholesky(ab)


def test_to_band_roundtrip():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    fem = assemble_fem(mesh)
    qp = fem.g2[fem.perm][:, fem.perm] + sp.eye(fem.n_nodes)
    band = _to_band(qp.tocsr(), fem.bandwidth)
    dense = qp.toarray()
    for d in range(fem.bandwidth + 1):
        np.testing.assert_allclose(band[d, :fem.n_nodes - d], np.diag(dense, -d),
                                   atol=1e-14)


def test_projector_vertex_and_centroid():
    mesh = unit_triangle_mesh()
    proj = build_projector(mesh, np.array([[0.0, 0.0], [1 / 3, 1 / 3]]))
    a = proj.a.toarray()
    np.testing.assert_allclose(a[0], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(a[1], [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_projector_rows_and_linear_reproduction():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.2)
    rng = np.random.default_rng(3)
    sites = rng.uniform(0.05, 0.95, size=(40, 2))
    proj = build_projector(mesh, sites)
    rowsums = np.asarray(proj.a.sum(axis=1)).ravel()
    np.testing.assert_allclose(rowsums, 1.0, atol=1e-10)
    nnz_per_row = np.diff(proj.a.indptr)
    assert np.all(nnz_per_row <= 3)
    # Barycentric interpolation reproduces any linear function exactly.
    coef = np.array([0.3, -1.2])
    f_nodes = mesh.vertices @ coef + 0.7
    f_sites = sites @ coef + 0.7
    np.testing.assert_allclose(proj.a @ f_nodes, f_sites, atol=1e-10)


def test_projector_reports_outside_sites():
    mesh = unit_triangle_mesh()
    with pytest.raises(ValueError, match=r"\[1\]"):
        build_projector(mesh, np.array([[0.1, 0.1], [2.0, 2.0]]))


def test_gmrf_sample_deterministic_and_zero_variance():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    prec = build_precision(assemble_fem(mesh), 0.7)
    a = gmrf_sample(prec, 0.3, np.random.default_rng(11))
    b = gmrf_sample(prec, 0.3, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)
    zero = gmrf_sample(prec, 0.0, np.random.default_rng(11))
    np.testing.assert_array_equal(zero, np.zeros(prec.n_nodes))
    with pytest.raises(ValueError):
        gmrf_sample(prec, -1.0, np.random.default_rng(11))


def test_gmrf_sample_covariance_small():
    # Quick covariance sanity check; the heavyweight version lives in the
    # acceptance suite.
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.5)
    prec = build_precision(assemble_fem(mesh), 0.7)
    sigma2 = 0.4
    draws = gmrf_sample(prec, sigma2, np.random.default_rng(5), size=20000)
    emp = draws.T @ draws / draws.shape[0]
    target = sigma2 * np.linalg.inv(prec.q.toarray())
    dd = np.diag(target)
    se = np.sqrt((np.outer(dd, dd) + target ** 2) / draws.shape[0])
    assert np.all(np.abs(emp - target) < 4.0 * se)


def test_solves_are_thread_safe():
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 0.25)
    prec = build_precision(assemble_fem(mesh), 0.5)
    rng = np.random.default_rng(7)
    bs = [rng.normal(size=prec.n_nodes) for _ in range(32)]
    expected = [prec.solve(b) for b in bs]
    with ThreadPoolExecutor(max_workers=8) as pool:
        got = list(pool.map(prec.solve, bs))
    for g, e in zip(got, expected):
        np.testing.assert_array_equal(g, e)


def test_interior_marginal_variance_near_one():
    # The precision scaling targets unit marginal variance; needs generous
    # padding because the Neumann boundary inflates variance within a couple
    # of range units of the mesh edge.
    kappa = 1.0
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), kappa / 6.0, padding=4.0 * kappa)
    prec = build_precision(assemble_fem(mesh), kappa)
    inner = np.nonzero(np.all((mesh.vertices >= 0.19) & (mesh.vertices <= 0.81),
                              axis=1))[0]
    for k in inner:
        e = np.zeros(prec.n_nodes)
        e[k] = 1.0
        assert abs(prec.solve(e)[k] - 1.0) < 0.05


def test_spde_correlation_tracks_matern_coarse():
    # Coarse version of the agreement check (full grid in the acceptance suite).
    kappa = 1.0
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), kappa / 5.0, padding=2.0 * kappa)
    prec = build_precision(assemble_fem(mesh), kappa)
    cov = np.linalg.inv(prec.q.toarray())
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    inner = np.nonzero(np.all((mesh.vertices >= 0.19) & (mesh.vertices <= 0.81),
                              axis=1))[0]
    rng = np.random.default_rng(9)
    pick = rng.choice(inner, size=min(12, inner.size), replace=False)
    errs = []
    for a in pick:
        for b in pick:
            d = np.linalg.norm(mesh.vertices[a] - mesh.vertices[b])
            errs.append(abs(corr[a, b] - matern_correlation(d, kappa, 1.0)))
    assert max(errs) < 0.05


def test_auto_mesh_hits_target_and_covers_sites():
    rng = np.random.default_rng(13)
    sites = rng.uniform(0, 1, size=(100, 2))
    mesh = auto_mesh(sites, target_nodes=120)
    assert 80 <= mesh.n_vertices <= 180
    proj = build_projector(mesh, sites)  # raises if any site is outside
    assert proj.n_points == 100

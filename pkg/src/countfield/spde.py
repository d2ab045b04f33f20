"""Sparse spatial machinery: triangulations, FEM matrices, GMRF precisions.

The stationary Matern field with smoothness 1 is approximated by a Gauss
Markov random field on a triangulation.  With C the lumped mass matrix, G1
the stiffness matrix and G2 = G1 C^-1 G1, the precision of the node weights
is Q_kappa = (kappa^2 / 4pi) (kappa^-4 C + 2 kappa^-2 G1 + G2), scaled so the
implied marginal variance is 1 away from the boundary.  Site values are read
off through a barycentric projector A with at most three nonzeros per row.

Factorizations use banded Cholesky after a one-time reverse Cuthill-McKee
reordering; planar meshes keep the bandwidth small, so band storage is an
honest sparse method here.  The factor arrays are immutable after
construction, which makes solves and sampling safe to call from multiple
threads concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _lowlevel as ll

_DEGENERATE_REL_AREA = 1e-12
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


@dataclass
class Mesh:
    """A conforming triangulation of a planar domain.

    Triangles are stored as vertex index triples and normalised to
    counterclockwise orientation on construction.
    """

    vertices: np.ndarray   # (N, 2)
    triangles: np.ndarray  # (M, 3) int

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError(f"vertices must have shape (N, 2), got {self.vertices.shape}")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("vertex coordinates must be finite")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must have shape (M, 3), got {self.triangles.shape}")
        n = self.vertices.shape[0]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle vertex index out of range")
        signed = self._signed_areas()
        flip = signed < 0
        if np.any(flip):
            self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]
            signed = np.abs(signed)
        scale = float(np.ptp(self.vertices, axis=0).max()) or 1.0
        bad = np.nonzero(signed <= _DEGENERATE_REL_AREA * scale * scale)[0]
        if bad.size:
            raise ValueError(f"degenerate (zero-area) triangles at indices {bad.tolist()}")

    def _signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]  # (M, 3, 2)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def areas(self) -> np.ndarray:
        return np.abs(self._signed_areas())


def regular_mesh(bounding_box, resolution: float, padding: float = 0.0) -> Mesh:
    """Structured triangulation of a padded rectangle.

    Parameters
    ----------
    bounding_box : (xmin, ymin, xmax, ymax)
        Region the mesh hull must contain.
    resolution : float
        Grid spacing; every triangle has area resolution^2 / 2.
    padding : float
        Extra margin added on all four sides before gridding.

    Returns
    -------
    Mesh
        Right-triangle grid whose hull contains the padded box (the grid is
        extended to the next multiple of the resolution when needed).
    """
    xmin, ymin, xmax, ymax = map(float, bounding_box)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("bounding box must have positive width and height")
    if not (resolution > 0):
        raise ValueError("resolution must be positive")
    if padding < 0:
        raise ValueError("padding must be nonnegative")
    x0, y0 = xmin - padding, ymin - padding
    width = (xmax + padding) - x0
    height = (ymax + padding) - y0
    nx = max(1, int(math.ceil(width / resolution - 1e-9)))
    ny = max(1, int(math.ceil(height / resolution - 1e-9)))
    xs = x0 + resolution * np.arange(nx + 1)
    ys = y0 + resolution * np.arange(ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    tris = []
    for iy in range(ny):
        for ix in range(nx):
            a = vid(ix, iy)
            b = vid(ix + 1, iy)
            c = vid(ix, iy + 1)
            d = vid(ix + 1, iy + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    return Mesh(vertices=vertices, triangles=np.array(tris, dtype=np.int64))


def auto_mesh(sites: np.ndarray, target_nodes: int = 150,
              padding_frac: float = 0.2) -> Mesh:
    """Regular mesh over the site bounding box sized to roughly target_nodes.

    Padding defaults to 20 percent of the box diagonal on every side, which
    keeps boundary effects of the GMRF approximation away from the data.
    """
    sites = np.asarray(sites, dtype=float)
    if target_nodes < 4:
        raise ValueError("target_nodes must be at least 4")
    xmin, ymin = sites.min(axis=0)
    xmax, ymax = sites.max(axis=0)
    diag = math.hypot(xmax - xmin, ymax - ymin) or 1.0
    pad = padding_frac * diag
    width = (xmax - xmin) + 2 * pad
    height = (ymax - ymin) + 2 * pad
    # (width/r + 1)(height/r + 1) ~ target_nodes, solved for square-ish boxes.
    res = math.sqrt(width * height) / max(math.sqrt(target_nodes) - 1.0, 1.0)
    return regular_mesh((xmin, ymin, xmax, ymax), res, padding=pad)


def save_mesh(mesh: Mesh, path) -> None:
    """Write a mesh as text: 'N M' header, N 'x y' lines, M 'i j k' lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path) -> Mesh:
    """Read a mesh written by save_mesh; '#' comments and blank lines allowed."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append((lineno, line))
    if not rows:
        raise ValueError(f"{path}: no content lines")
    lineno, header = rows[0]
    parts = header.split()
    if len(parts) != 2:
        raise ValueError(f"{path}:{lineno}: header must be 'N M', got {header!r}")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"{path}:{lineno}: header must be two integers") from None
    if len(rows) != 1 + n + m:
        raise ValueError(f"{path}: expected {n} vertex and {m} triangle lines, "
                         f"found {len(rows) - 1}")
    vertices = np.empty((n, 2))
    for r, (lineno, line) in enumerate(rows[1:1 + n]):
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: vertex line must be 'x y'")
        try:
            vertices[r] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: nonnumeric vertex coordinate") from None
    triangles = np.empty((m, 3), dtype=np.int64)
    for r, (lineno, line) in enumerate(rows[1 + n:]):
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: triangle line must be 'i j k'")
        try:
            triangles[r] = [int(parts[0]), int(parts[1]), int(parts[2])]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: nonnumeric triangle index") from None
        if triangles[r].min() < 0 or triangles[r].max() >= n:
            raise ValueError(f"{path}:{lineno}: triangle index out of range 0..{n - 1}")
    return Mesh(vertices=vertices, triangles=triangles)


@dataclass
class FemMatrices:
    """Finite-element matrices of a mesh, plus the fill-reducing node order."""

    c: np.ndarray          # (N,) lumped mass diagonal
    g1: sp.csr_matrix      # (N, N) stiffness
    g2: sp.csr_matrix      # (N, N) g1 C^-1 g1
    perm: np.ndarray       # (N,) reverse Cuthill-McKee order
    bandwidth: int = field(default=0)
    _layout: "_PrecisionLayout | None" = field(default=None, repr=False,
                                               compare=False)

    @property
    def n_nodes(self) -> int:
        return self.c.shape[0]


@dataclass
class _PrecisionLayout:
    """Fixed sparsity layout of Q_kappa, precomputed once per mesh.

    Q_kappa differs from one kappa to the next only in its data vector, so
    the union CSR pattern and the band placement of the three components are
    cached here and each build_precision call reduces to array arithmetic.
    The MH update for kappa calls build_precision per proposal, which makes
    this the difference between microseconds and milliseconds.
    """

    indices: np.ndarray    # union CSR column indices, original node order
    indptr: np.ndarray
    data_c: np.ndarray     # diag(c), g1, g2 data aligned to the union pattern
    data_g1: np.ndarray
    data_g2: np.ndarray
    band_c: np.ndarray     # (b+1, N) permuted band of each component
    band_g1: np.ndarray
    band_g2: np.ndarray


def _precision_layout(fem: FemMatrices) -> _PrecisionLayout:
    n = fem.n_nodes
    parts = [sp.diags(fem.c).tocsr(), fem.g1.tocsr(), fem.g2.tocsr()]

    def ones_pattern(m):
        m = m.copy()
        m.data = np.ones_like(m.data)   # sums stay positive, nothing pruned
        return m

    union = (ones_pattern(parts[0]) + ones_pattern(parts[1])
             + ones_pattern(parts[2])).tocsr()
    union.sort_indices()
    rows_u = np.repeat(np.arange(n, dtype=np.int64), np.diff(union.indptr))
    keys_u = rows_u * n + union.indices

    def aligned(m):
        m.sort_indices()
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(m.indptr))
        pos = np.searchsorted(keys_u, rows * n + m.indices)
        out = np.zeros(keys_u.size)
        out[pos] = m.data
        return out

    def banded(m):
        return _to_band(m[fem.perm][:, fem.perm], fem.bandwidth)

    return _PrecisionLayout(
        indices=union.indices.copy(), indptr=union.indptr.copy(),
        data_c=aligned(parts[0]), data_g1=aligned(parts[1]),
        data_g2=aligned(parts[2]),
        band_c=banded(parts[0]), band_g1=banded(parts[1]),
        band_g2=banded(parts[2]))


def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Assemble lumped mass and stiffness matrices for linear elements.

    Each triangle contributes area/3 to the mass diagonal of its vertices and
    (e_k . e_l) / (4 area) to the stiffness entry of vertices k, l, where e_k
    is the edge opposite vertex k.

    Returns
    -------
    FemMatrices
        With g2 = g1 diag(1/c) g1 and the RCM ordering of the g2 pattern.
    """
    N = mesh.n_vertices
    tri = mesh.triangles
    pts = mesh.vertices[tri]                      # (M, 3, 2)
    areas = mesh.areas()
    c = np.zeros(N)
    np.add.at(c, tri.ravel(), np.repeat(areas / 3.0, 3))

    # Edge opposite vertex k: p_{(k+2) % 3} - p_{(k+1) % 3}.
    edges = np.empty_like(pts)
    for k in range(3):
        edges[:, k] = pts[:, (k + 2) % 3] - pts[:, (k + 1) % 3]
    rows, cols, vals = [], [], []
    for k in range(3):
        for l in range(3):
            rows.append(tri[:, k])
            cols.append(tri[:, l])
            vals.append(np.einsum("md,md->m", edges[:, k], edges[:, l]) / (4.0 * areas))
    g1 = sp.csr_matrix((np.concatenate(vals),
                        (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    g1.sum_duplicates()
    g2 = (g1 @ sp.diags(1.0 / c) @ g1).tocsr()
    perm = np.asarray(reverse_cuthill_mckee(g2, symmetric_mode=True), dtype=np.int64)
    pattern = g2[perm][:, perm].tocoo()
    bandwidth = int(np.abs(pattern.row - pattern.col).max()) if pattern.nnz else 0
    return FemMatrices(c=c, g1=g1, g2=g2, perm=perm, bandwidth=bandwidth)


def _to_band(mat: sp.spmatrix, bandwidth: int) -> np.ndarray:
    """Lower band storage ab[d, j] = M[j + d, j] of a symmetric sparse matrix."""
    coo = mat.tocoo()
    n = mat.shape[0]
    ab = np.zeros((bandwidth + 1, n))
    lower = coo.row >= coo.col
    r, c, v = coo.row[lower], coo.col[lower], coo.data[lower]
    if r.size and np.abs(r - c).max() > bandwidth:
        raise ValueError("matrix exceeds the declared bandwidth")
    np.add.at(ab, (r - c, c), v)
    return ab


@dataclass
class SparsePrecision:
    """A GMRF precision matrix with its banded Cholesky factorization.

    The factor lives in RCM-permuted node order; solve/sample handle the
    permutation internally.  All arrays are treated as immutable, so the
    solves may be used concurrently from several threads.
    """

    q: sp.csr_matrix       # (N, N) precision in original node order
    kappa: float
    perm: np.ndarray       # (N,) permutation applied before factorizing
    band: np.ndarray       # (b+1, N) unfactored band of the permuted matrix
    factor: np.ndarray     # (b+1, N) its lower Cholesky factor
    log_det: float
    jitter: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.q.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Q^-1 b for a vector b."""
        bp = b[self.perm]
        y = ll.band_solve_lower(self.factor, bp)
        xp = ll.band_solve_upper(self.factor, y)
        out = np.empty_like(xp)
        out[self.perm] = xp
        return out

    def sample(self, sigma2: float, rng: np.random.Generator,
               size: int | None = None) -> np.ndarray:
        """Draw(s) from N(0, sigma2 * Q^-1)."""
        if sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        m = 1 if size is None else int(size)
        n = self.n_nodes
        if sigma2 == 0.0:
            out = np.zeros((m, n))
        else:
            z = rng.standard_normal((m, n))
            xp = ll.band_solve_upper_many(self.factor, z)
            out = np.empty((m, n))
            out[:, self.perm] = xp
            out *= math.sqrt(sigma2)
        return out[0] if size is None else out


def build_precision(fem: FemMatrices, kappa: float) -> SparsePrecision:
    """GMRF precision Q_kappa for a Matern range kappa (smoothness fixed at 1).

    Q_kappa = (kappa^2 / 4pi) (kappa^-4 C + 2 kappa^-2 G1 + G2); the scaling
    gives unit marginal variance away from the mesh boundary, so the full
    spatial precision at variance sigma2 is Q_kappa / sigma2.
    """
    if not (kappa > 0):
        raise ValueError(f"kappa must be positive, got {kappa}")
    N = fem.n_nodes
    if fem._layout is None:
        fem._layout = _precision_layout(fem)
    lay = fem._layout
    scale = 1.0 / (4.0 * math.pi)
    k2 = kappa ** 2
    data = scale * (lay.data_c / k2 + 2.0 * lay.data_g1 + k2 * lay.data_g2)
    q = sp.csr_matrix((data, lay.indices, lay.indptr), shape=(N, N))
    band = scale * (lay.band_c / k2 + 2.0 * lay.band_g1 + k2 * lay.band_g2)
    jitter = 0.0
    try:
        factor = ll.band_cholesky(band)
    except ValueError:
        factor = None
        jitter = _JITTER_START
        while jitter <= _JITTER_MAX:
            try:
                banded = band.copy()
                banded[0] += jitter
                factor = ll.band_cholesky(banded)
                band = banded
                break
            except ValueError:
                jitter *= 10.0
        if factor is None:
            raise ValueError("precision matrix is not positive definite even "
                             "with jitter 1e-6") from None
    log_det = 2.0 * float(np.log(factor[0]).sum())
    return SparsePrecision(q=q, kappa=float(kappa), perm=fem.perm, band=band,
                           factor=factor, log_det=log_det, jitter=jitter)


@dataclass
class Projector:
    """Barycentric interpolation from mesh nodes to point locations."""

    a: sp.csr_matrix       # (n, N), rows sum to 1, <= 3 nonzeros each
    triangle_ids: np.ndarray  # (n,) containing triangle per point

    @property
    def n_points(self) -> int:
        return self.a.shape[0]


def _barycentric(mesh: Mesh, points: np.ndarray, tol: float = 1e-9):
    """Containing triangle and barycentric coordinates for each point."""
    pts = np.asarray(points, dtype=float)
    tri = mesh.triangles
    p0 = mesh.vertices[tri[:, 0]]
    e1 = mesh.vertices[tri[:, 1]] - p0
    e2 = mesh.vertices[tri[:, 2]] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]    # 2 * area, positive
    tids = np.full(pts.shape[0], -1, dtype=np.int64)
    bary = np.zeros((pts.shape[0], 3))
    for s, pt in enumerate(pts):
        d = pt - p0
        u = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
        v = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
        w = 1.0 - u - v
        inside = (u >= -tol) & (v >= -tol) & (w >= -tol)
        hits = np.nonzero(inside)[0]
        if hits.size:
            t = hits[0]
            tids[s] = t
            bary[s] = (w[t], u[t], v[t])
    return tids, bary


def build_projector(mesh: Mesh, sites: np.ndarray) -> Projector:
    """Barycentric projector A mapping node weights to values at sites.

    Every site must lie inside the mesh hull; offenders are reported by index.
    Rows have at most three nonzeros and sum to one.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    tids, bary = _barycentric(mesh, sites)
    missing = np.nonzero(tids < 0)[0]
    if missing.size:
        raise ValueError(f"sites outside the mesh hull at indices {missing.tolist()}; "
                         "enlarge the mesh padding")
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    n = sites.shape[0]
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[tids].ravel()
    a = sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(n, mesh.n_vertices))
    a.sum_duplicates()
    return Projector(a=a, triangle_ids=tids)


def gmrf_sample(precision: SparsePrecision, sigma2: float,
                rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from N(0, sigma2 * Q^-1) by back-solving the Cholesky factor."""
    return precision.sample(sigma2, rng, size=size)

"""Discretized closed manifolds and their variational forms.

Two mesh kinds cover the workloads:

  * latitude grids: the round m-sphere reduced to [0, pi] under rotational
    symmetry.  Nodes are cell centers theta_k = (k + 1/2) pi / n, the measure
    weight is omega_{m-1} sin^{m-1}(theta), and the poles act as Neumann ends
    (fields extend constantly across them).
  * simplicial complexes: closed triangle surfaces (vertices embedded in R^3)
    or closed tetrahedral 3-complexes whose vertex coordinates live in a
    chart and whose metric is supplied per vertex as a symmetric 3x3 tensor.
    Every facet must be shared by exactly two cells.

The scalar curvature S_g is always an input field; nothing here derives it
from the embedding.

Fields are plain arrays: a single field has shape (n_nodes,), a tuple of ell
components has shape (ell, n_nodes).

Discretization: piecewise-linear nodal elements, lumped L^2 mass, and a
fixed per-cell quadrature (4-point Gauss on latitude intervals, a positive
conical-product rule of degree 5 on simplices) for every nonlinear L^p term.
Energies, gradients, and constraint residuals all use the same rule, so the
discrete functional is exactly differentiable.  Assembly runs over cells in
a fixed order and is bitwise reproducible.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi, roots_legendre

from .constants import sphere_volume
from .errors import DomainError, MeshError, ShapeError

__all__ = [
    "MeshMetric",
    "MeshForms",
    "build_round_sphere",
    "build_capsule_sphere",
    "build_dumbbell_sphere",
    "build_octahedron_sphere",
    "build_flat_torus",
    "load_mesh",
    "save_mesh",
    "save_fields",
    "load_fields",
    "assemble_forms",
    "coercivity_check",
]

_MESH_MAGIC = "YPMESH 1"
_FIELD_MAGIC = b"YPFLD1"


# ---------------------------------------------------------------------------
# mesh containers and builders

@dataclass
class MeshMetric:
    """A discretized closed manifold.

    kind 'latitude': theta holds the node colatitudes, dim is the sphere
    dimension; warp, when present, holds the nodal values of the
    rotationally symmetric warp profile f (metric dt^2 + f(t)^2 times the
    round (m-1)-sphere, volume density f^(m-1), interpolated linearly and
    closing to 0 at both poles) -- without it the grid is the round sphere
    on [0, pi].  kind 'simplicial': vertices (V, 3), cells (F, 3|4) vertex
    indices, cell_coords (F, nv, 3) per-cell vertex coordinates (decoupled
    from `vertices` so periodic charts can unwrap), vertex_metric (V, 3, 3)
    or None for the embedding-induced metric, and dim = cell arity - 1.
    S is the nodal scalar-curvature field in both cases.  ell is the
    component count announced by a mesh file (1 when built in code).
    """
    kind: str
    dim: int
    S: np.ndarray
    theta: np.ndarray = None
    vertices: np.ndarray = None
    cells: np.ndarray = None
    cell_coords: np.ndarray = None
    vertex_metric: np.ndarray = None
    warp: np.ndarray = None
    ell: int = 1

    @property
    def n_nodes(self):
        if self.kind == "latitude":
            return len(self.theta)
        return len(self.vertices)

    @property
    def kappa(self):
        """Conformal coupling (m-2)/(4(m-1)) of the manifold dimension."""
        return (self.dim - 2) / (4.0 * (self.dim - 1))

    def edges(self):
        """Unique graph edges (i, j), i < j."""
        if self.kind == "latitude":
            n = self.n_nodes
            return np.column_stack([np.arange(n - 1), np.arange(1, n)])
        pairs = set()
        for cell in self.cells:
            c = sorted(int(v) for v in cell)
            for a in range(len(c)):
                for b in range(a + 1, len(c)):
                    pairs.add((c[a], c[b]))
        return np.array(sorted(pairs), dtype=int)

    def adjacency(self):
        e = self.edges()
        n = self.n_nodes
        data = np.ones(len(e))
        g = sp.coo_matrix((data, (e[:, 0], e[:, 1])), shape=(n, n))
        return (g + g.T).tocsr()

    def edge_lengths(self):
        """Graph edges with metric lengths: (edges (E, 2), lengths (E,)).

        Latitude chains use colatitude differences; simplicial meshes
        measure each edge in the mean endpoint metric using the per-cell
        (unwrapped) coordinates, so periodic charts get the short length.
        """
        if self.kind == "latitude":
            e = self.edges()
            return e, np.abs(np.diff(self.theta))
        seen = {}
        for f, cell in enumerate(self.cells):
            nv = len(cell)
            for a in range(nv):
                for b in range(a + 1, nv):
                    i, j = int(cell[a]), int(cell[b])
                    key = (min(i, j), max(i, j))
                    vec = self.cell_coords[f, a] - self.cell_coords[f, b]
                    if self.vertex_metric is None:
                        length = float(np.linalg.norm(vec))
                    else:
                        gbar = 0.5 * (self.vertex_metric[i]
                                      + self.vertex_metric[j])
                        length = float(math.sqrt(vec @ gbar @ vec))
                    prev = seen.get(key)
                    if prev is None or length < prev:
                        seen[key] = length
        keys = sorted(seen)
        return (np.array(keys, dtype=int),
                np.array([seen[k] for k in keys]))

    def geodesic_adjacency(self):
        """Symmetric sparse matrix of edge lengths (graph-geodesic weights)."""
        e, lengths = self.edge_lengths()
        n = self.n_nodes
        g = sp.coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(n, n))
        return (g + g.T).tocsr()

    def euler_characteristic(self):
        if self.kind == "latitude":
            return None
        v = self.n_nodes
        e = len(self.edges())
        f = len(self.cells)
        if self.cells.shape[1] == 3:
            return v - e + f
        faces = set()
        for cell in self.cells:
            c = sorted(int(x) for x in cell)
            for skip in range(4):
                faces.add(tuple(x for k, x in enumerate(c) if k != skip))
        return v - e + len(faces) - f


def build_round_sphere(m, n_nodes, s_value=None):
    """Latitude grid of the round unit m-sphere.

    The curvature field defaults to the round value m(m-1).
    """
    if m < 3:
        raise DomainError(f"need sphere dimension m >= 3, got {m}")
    if n_nodes < 16:
        raise DomainError(f"need at least 16 nodes, got {n_nodes}")
    h = math.pi / n_nodes
    theta = (np.arange(n_nodes) + 0.5) * h
    s = m * (m - 1.0) if s_value is None else float(s_value)
    return MeshMetric(kind="latitude", dim=m, theta=theta,
                      S=np.full(n_nodes, s))


def build_capsule_sphere(m, n_nodes, neck=4.0, well_depth=0.0,
                         well_radius=0.5):
    """Latitude grid of a capsule: two round unit hemispherical caps of
    the m-sphere joined by a unit-radius cylindrical neck of the given
    length.

    The warp profile is sin on the caps and 1 on the neck (C^1 at the
    junctions).  The curvature-coefficient field defaults to the exact
    scalar curvature of the warped-product metric on each piece -- m(m-1)
    on the caps, (m-1)(m-2) on the neck (where only the cross-section
    curves).  A positive well_depth subtracts two Gaussian dips of that
    depth and the given radius, centered on the half-neck midpoints.
    Shallow-but-wide dips keep the operator coercive (no localized bound
    state) while making bounded profiles in each half strictly cheaper
    than concentration, so two-component segregation limits stay bounded;
    run coercivity_check on the assembled forms to confirm the first
    property for a given depth.
    """
    if m < 3:
        raise DomainError(f"need sphere dimension m >= 3, got {m}")
    if n_nodes < 16:
        raise DomainError(f"need at least 16 nodes, got {n_nodes}")
    neck = float(neck)
    if neck <= 0.0:
        raise DomainError(f"need a positive neck length, got {neck}")
    total = math.pi + neck
    h = total / n_nodes
    theta = (np.arange(n_nodes) + 0.5) * h
    a, b = 0.5 * math.pi, 0.5 * math.pi + neck
    warp = np.where(theta < a, np.sin(theta),
                    np.where(theta > b, np.sin(total - theta), 1.0))
    S = np.where((theta < a) | (theta > b),
                 float(m * (m - 1)), float((m - 1) * (m - 2)))
    if well_depth:
        depth = float(well_depth)
        radius = float(well_radius)
        if radius <= 0.0:
            raise DomainError(f"need a positive well radius, got {radius}")
        for center in (0.5 * total - 0.25 * neck, 0.5 * total + 0.25 * neck):
            S = S - depth * np.exp(-(((theta - center) / radius) ** 2))
    return MeshMetric(kind="latitude", dim=m, theta=theta,
                      S=S.astype(float), warp=warp)


def build_dumbbell_sphere(m, n_nodes, neck=4.0, waist=0.3, taper=0.8,
                          well_depth=0.0, well_radius=0.9):
    """Latitude grid of a dumbbell: a capsule (two round caps joined by a
    cylindrical neck) whose neck is pinched at its midpoint down to the
    given waist radius by a multiplicative Gaussian taper.

    The curvature-coefficient field is the exact scalar curvature of the
    warped-product metric, computed from the pinched profile and its two
    derivatives.  A positive well_depth subtracts a Gaussian dip of that
    depth and the given radius at each pole.

    The shape is built for two-component strong-repulsion runs.  The pinch
    multiplies every cross-section near the midpoint by waist**2, so a
    profile dying there pays almost nothing and the two halves exchange
    almost no mass; each polar well then holds a bounded one-bump minimizer
    whose value sits strictly below the concentration threshold, which is
    what keeps long coupling continuations bounded and their interface
    quantities stable.  Deep-enough wells destroy positivity of the
    operator: run coercivity_check on the assembled forms.
    """
    if m < 3:
        raise DomainError(f"need sphere dimension m >= 3, got {m}")
    if n_nodes < 16:
        raise DomainError(f"need at least 16 nodes, got {n_nodes}")
    neck = float(neck)
    if neck <= 0.0:
        raise DomainError(f"need a positive neck length, got {neck}")
    waist = float(waist)
    if not 0.0 < waist < 1.0:
        raise DomainError(f"need a waist radius in (0, 1), got {waist}")
    taper = float(taper)
    if taper <= 0.0:
        raise DomainError(f"need a positive taper width, got {taper}")
    total = math.pi + neck
    h = total / n_nodes
    theta = (np.arange(n_nodes) + 0.5) * h
    a, b = 0.5 * math.pi, 0.5 * math.pi + neck

    fc = np.where(theta < a, np.sin(theta),
                  np.where(theta > b, np.sin(total - theta), 1.0))
    fc1 = np.where(theta < a, np.cos(theta),
                   np.where(theta > b, -np.cos(total - theta), 0.0))
    fc2 = np.where(theta < a, -np.sin(theta),
                   np.where(theta > b, -np.sin(total - theta), 0.0))
    c = 0.5 * total
    bump = np.exp(-(((theta - c) / taper) ** 2))
    g = 1.0 - (1.0 - waist) * bump
    g1 = (1.0 - waist) * bump * 2.0 * (theta - c) / taper ** 2
    g2 = (1.0 - waist) * bump * (2.0 / taper ** 2
                                 - (2.0 * (theta - c) / taper ** 2) ** 2)
    warp = fc * g
    warp1 = fc1 * g + fc * g1
    warp2 = fc2 * g + 2.0 * fc1 * g1 + fc * g2
    S = ((m - 1) * (m - 2) * (1.0 - warp1 ** 2) / warp ** 2
         - 2.0 * (m - 1) * warp2 / warp)
    if well_depth:
        depth = float(well_depth)
        radius = float(well_radius)
        if radius <= 0.0:
            raise DomainError(f"need a positive well radius, got {radius}")
        S = S - depth * (np.exp(-((theta / radius) ** 2))
                         + np.exp(-(((total - theta) / radius) ** 2)))
    return MeshMetric(kind="latitude", dim=m, theta=theta,
                      S=S.astype(float), warp=warp)


def _octahedron():
    verts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                      [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    faces = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                      [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]], int)
    return verts, faces


def build_octahedron_sphere(level, s_value=2.0):
    """Closed triangulated 2-sphere: octahedron subdivided `level` times,
    vertices projected to the unit sphere, metric induced by the embedding."""
    verts, faces = _octahedron()
    verts = [tuple(v) for v in verts]
    index = {v: i for i, v in enumerate(verts)}
    faces = [tuple(f) for f in faces]

    def midpoint(a, b):
        p = np.asarray(a) + np.asarray(b)
        p /= np.linalg.norm(p)
        return tuple(p)

    for _ in range(level):
        new_faces = []
        for (i, j, k) in faces:
            vi, vj, vk = verts[i], verts[j], verts[k]
            mids = []
            for a, b in ((vi, vj), (vj, vk), (vk, vi)):
                mp = midpoint(a, b)
                if mp not in index:
                    index[mp] = len(verts)
                    verts.append(mp)
                mids.append(index[mp])
            mij, mjk, mki = mids
            new_faces += [(i, mij, mki), (mij, j, mjk),
                          (mki, mjk, k), (mij, mjk, mki)]
        faces = new_faces

    v = np.array([list(p) for p in verts], float)
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array(faces, int)
    return MeshMetric(kind="simplicial", dim=2, vertices=v, cells=f,
                      cell_coords=v[f], S=np.full(len(v), float(s_value)))


def build_flat_torus(n, s_value=0.0):
    """Closed flat 3-torus: periodic n^3 vertex grid on [0,1)^3, six
    tetrahedra per cube (Kuhn subdivision), identity metric.

    The curvature field is an input; a positive constant makes the natural
    quadratic form coercive even though the metric is flat, which is how the
    solver test-beds use this mesh.
    """
    if n < 2:
        raise DomainError(f"need at least 2 vertices per axis, got {n}")
    h = 1.0 / n
    idx = lambda i, j, k: ((i % n) * n + (j % n)) * n + (k % n)
    verts = np.array([[i * h, j * h, k * h]
                      for i in range(n) for j in range(n) for k in range(n)])
    # Kuhn: six tets around the main diagonal of each cube, listed by the
    # permutation of axis steps
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    cells = []
    coords = []
    steps = np.eye(3)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                base = np.array([i, j, k], float)
                for p in perms:
                    corner = [base.copy()]
                    for ax in p:
                        corner.append(corner[-1] + steps[ax])
                    cells.append([idx(*map(int, c)) for c in corner])
                    coords.append([c * h for c in corner])
    cells = np.array(cells, int)
    coords = np.array(coords, float)
    metric = np.repeat(np.eye(3)[None, :, :], len(verts), axis=0)
    return MeshMetric(kind="simplicial", dim=3, vertices=verts, cells=cells,
                      cell_coords=coords, vertex_metric=metric,
                      S=np.full(len(verts), float(s_value)))


# ---------------------------------------------------------------------------
# file formats

def save_mesh(mesh, path):
    """Plain-text simplicial mesh: header, counts, vertex lines (coordinates,
    optional 6-entry metric upper triangle, curvature), cell lines."""
    if mesh.kind != "simplicial":
        raise MeshError("only simplicial meshes have a file representation")
    with open(path, "w") as fh:
        fh.write(_MESH_MAGIC + "\n")
        fh.write(f"{mesh.n_nodes} {len(mesh.cells)} {mesh.ell}\n")
        for i in range(mesh.n_nodes):
            x, y, z = mesh.vertices[i]
            row = [f"{x:.17g}", f"{y:.17g}", f"{z:.17g}"]
            if mesh.vertex_metric is not None:
                g = mesh.vertex_metric[i]
                row += [f"{g[a, b]:.17g}"
                        for a, b in ((0, 0), (0, 1), (0, 2),
                                     (1, 1), (1, 2), (2, 2))]
            row.append(f"{mesh.S[i]:.17g}")
            fh.write(" ".join(row) + "\n")
        for cell in mesh.cells:
            fh.write(" ".join(str(int(v)) for v in cell) + "\n")


def load_mesh(path):
    """Read a simplicial mesh file and validate it: consistent cell arity,
    SPD metric where present, a curvature column, and closedness (every
    facet shared by exactly two cells)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _MESH_MAGIC:
        raise MeshError(f"not a mesh file (missing '{_MESH_MAGIC}' header)")
    try:
        nv, nf, ell = (int(t) for t in lines[1].split())
    except ValueError:
        raise MeshError("count line must hold three integers: V F ell")
    if ell < 1:
        raise MeshError(f"component count must be >= 1, got {ell}")
    if len(lines) != 2 + nv + nf:
        raise MeshError(f"expected {2 + nv + nf} lines, found {len(lines)}")

    verts = np.empty((nv, 3))
    metric = None
    S = np.empty(nv)
    for i in range(nv):
        vals = [float(t) for t in lines[2 + i].split()]
        if len(vals) == 3:
            raise MeshError(f"vertex {i}: curvature field required "
                            "(append S_g after the coordinates)")
        if len(vals) == 4:
            if metric is not None:
                raise MeshError("mixed vertex formats: metric given on some "
                                "vertices only")
            verts[i] = vals[:3]
            S[i] = vals[3]
        elif len(vals) == 10:
            if metric is None:
                if i > 0:
                    raise MeshError("mixed vertex formats: metric given on "
                                    "some vertices only")
                metric = np.empty((nv, 3, 3))
            verts[i] = vals[:3]
            a, b, c, d, e, f = vals[3:9]
            metric[i] = [[a, b, c], [b, d, e], [c, e, f]]
            S[i] = vals[9]
        else:
            raise MeshError(f"vertex {i}: expected 4 or 10 fields, "
                            f"got {len(vals)}")
    if metric is not None:
        eig = np.linalg.eigvalsh(metric)
        if np.any(eig <= 0):
            bad = int(np.argmin(eig.min(axis=1)))
            raise MeshError(f"vertex {bad}: metric is not positive definite")

    arity = None
    cells = []
    for j in range(nf):
        vals = [int(t) for t in lines[2 + nv + j].split()]
        if arity is None:
            arity = len(vals)
            if arity not in (3, 4):
                raise MeshError(f"cell {j}: need 3 or 4 vertices, got {arity}")
        elif len(vals) != arity:
            raise MeshError(f"cell {j}: inconsistent arity")
        if any(v < 0 or v >= nv for v in vals):
            raise MeshError(f"cell {j}: vertex index out of range")
        if len(set(vals)) != arity:
            raise MeshError(f"cell {j}: degenerate (repeated vertex)")
        cells.append(vals)
    cells = np.array(cells, int)

    facet_count = {}
    for cell in cells:
        c = sorted(int(v) for v in cell)
        if arity == 3:
            facets = [(c[0], c[1]), (c[0], c[2]), (c[1], c[2])]
        else:
            facets = [tuple(x for k, x in enumerate(c) if k != skip)
                      for skip in range(4)]
        for fc in facets:
            facet_count[fc] = facet_count.get(fc, 0) + 1
    bad = [fc for fc, cnt in facet_count.items() if cnt != 2]
    if bad:
        raise MeshError(f"mesh not closed: {len(bad)} facets are not shared "
                        f"by exactly 2 cells (first: {bad[0]})")

    mesh = MeshMetric(kind="simplicial", dim=arity - 1, vertices=verts,
                      cells=cells, cell_coords=verts[cells],
                      vertex_metric=metric, S=S, ell=ell)
    _check_cells_nondegenerate(mesh)
    return mesh


def _check_cells_nondegenerate(mesh):
    vol = _cell_measures(mesh)
    if np.any(vol <= 1e-14):
        raise MeshError(f"degenerate cell with vanishing measure "
                        f"(cell {int(np.argmin(vol))})")


def save_fields(u, path):
    """Binary checkpoint: magic, u32 ell, u32 n_nodes, float64 values in
    node-major order, little endian."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    ell, n = u.shape
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(np.array([ell, n], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(u.T, dtype="<f8").tobytes())


def load_fields(path, mesh=None):
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != _FIELD_MAGIC:
            raise ShapeError("not a field checkpoint (bad magic)")
        header = np.frombuffer(fh.read(8), dtype="<u4")
        ell, n = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(8 * ell * n), dtype="<f8")
    if data.size != ell * n:
        raise ShapeError("field checkpoint truncated")
    u = data.reshape(n, ell).T.copy()
    if mesh is not None and n != mesh.n_nodes:
        raise ShapeError(f"checkpoint holds {n} nodes, mesh has "
                         f"{mesh.n_nodes}")
    return u


# ---------------------------------------------------------------------------
# quadrature rules

def _gauss01(n):
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _jacobi01(n, alpha):
    """Nodes/weights for int_0^1 f(x) (1-x)^alpha dx."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


def simplex_rule(d, n=3):
    """Positive conical-product quadrature on the unit d-simplex, exact for
    polynomials of degree <= 2n-1.  Returns barycentric coordinates
    (npts, d+1) and weights summing to the simplex volume 1/d!."""
    if d == 1:
        x, w = _gauss01(n)
        bary = np.column_stack([1.0 - x, x])
        return bary, w
    if d == 2:
        x1, w1 = _jacobi01(n, 1.0)
        x2, w2 = _gauss01(n)
        pts, wts = [], []
        for a, wa in zip(x1, w1):
            for b, wb in zip(x2, w2):
                x, y = a, (1.0 - a) * b
                pts.append([1.0 - x - y, x, y])
                wts.append(wa * wb)
        return np.array(pts), np.array(wts)
    if d == 3:
        x1, w1 = _jacobi01(n, 2.0)
        x2, w2 = _jacobi01(n, 1.0)
        x3, w3 = _gauss01(n)
        pts, wts = [], []
        for a, wa in zip(x1, w1):
            for b, wb in zip(x2, w2):
                for c, wc in zip(x3, w3):
                    x = a
                    y = (1.0 - a) * b
                    z = (1.0 - a) * (1.0 - b) * c
                    pts.append([1.0 - x - y - z, x, y, z])
                    wts.append(wa * wb * wc)
        return np.array(pts), np.array(wts)
    raise DomainError(f"no simplex rule for dimension {d}")


# ---------------------------------------------------------------------------
# assembly

def _cell_metrics(mesh):
    """Per-cell edge-basis Gram matrices G and sqrt(det G)."""
    coords = mesh.cell_coords
    nv = coords.shape[1]
    e = coords[:, 1:, :] - coords[:, :1, :]          # (F, nv-1, 3)
    if mesh.vertex_metric is None:
        G = np.einsum("fia,fja->fij", e, e)
    else:
        gbar = mesh.vertex_metric[mesh.cells].mean(axis=1)   # (F, 3, 3)
        G = np.einsum("fia,fab,fjb->fij", e, gbar, e)
    det = np.linalg.det(G)
    if np.any(det <= 0):
        raise MeshError("cell with non positive metric determinant")
    return G, np.sqrt(det)


def _cell_measures(mesh):
    if mesh.kind == "latitude":
        raise MeshError("latitude grids have no simplicial cells")
    d = mesh.cells.shape[1] - 1
    _, sq = _cell_metrics(mesh)
    return sq / math.factorial(d)


def _assemble_latitude(mesh, n_gauss=4):
    m = mesh.dim
    n = mesh.n_nodes
    theta = mesh.theta
    h = theta[1] - theta[0]
    area = sphere_volume(m - 1)
    gx, gw = roots_legendre(n_gauss)
    warp = mesh.warp

    rows, cols, vals = [], [], []
    qw = []
    qs = 0

    def add_points(t0, t1, i0, i1, f0=None, f1=None):
        """Quadrature points on [t0, t1] interpolating nodes i0 (weight
        1-s) and i1 (weight s); i0 == i1 encodes a constant pole cap.
        f0, f1 are the warp-profile endpoint values (interpolated
        linearly); without them the density is the round sin(t)."""
        nonlocal qs
        mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
        for x, w in zip(gx, gw):
            t = mid + half * x
            s = (t - t0) / (t1 - t0)
            if f0 is None:
                f = math.sin(t)
            else:
                f = (1.0 - s) * f0 + s * f1
            qw.append(area * f ** (m - 1) * half * w)
            if i0 == i1:
                rows.append(qs)
                cols.append(i0)
                vals.append(1.0)
            else:
                rows.extend([qs, qs])
                cols.extend([i0, i1])
                vals.extend([1.0 - s, s])
            qs += 1

    if warp is None:
        add_points(0.0, theta[0], 0, 0)
        for k in range(n - 1):
            add_points(theta[k], theta[k + 1], k, k + 1)
        add_points(theta[-1], theta[-1] + 0.5 * h, n - 1, n - 1)
    else:
        add_points(0.0, theta[0], 0, 0, 0.0, warp[0])
        for k in range(n - 1):
            add_points(theta[k], theta[k + 1], k, k + 1,
                       warp[k], warp[k + 1])
        add_points(theta[-1], theta[-1] + 0.5 * h, n - 1, n - 1,
                   warp[-1], 0.0)

    P = sp.csr_matrix((vals, (rows, cols)), shape=(qs, n))
    qw = np.asarray(qw)

    # stiffness: piecewise-constant derivative, cell coefficient equal to
    # the accumulated measure of the interval
    a = np.array([qw[n_gauss * (k + 1): n_gauss * (k + 2)].sum()
                  for k in range(n - 1)])
    main = np.zeros(n)
    main[:-1] += a / h ** 2
    main[1:] += a / h ** 2
    off = -a / h ** 2
    K = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    return P, qw, K


def _assemble_simplicial(mesh):
    d = mesh.cells.shape[1] - 1
    bary, rw = simplex_rule(d)
    G, sqdet = _cell_metrics(mesh)
    F = len(mesh.cells)
    npts = len(rw)

    # interpolation: row q*F... fixed cell order, then rule order
    rows = np.repeat(np.arange(F * npts), d + 1)
    cols = mesh.cells[:, None, :].repeat(npts, axis=1).reshape(-1)
    vals = np.tile(bary, (F, 1)).reshape(-1)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(F * npts, mesh.n_nodes))
    qw = (sqdet[:, None] * rw[None, :]).reshape(-1)

    # stiffness: gradients in the edge basis are nodal differences
    Ginv = np.linalg.inv(G)
    measures = sqdet / math.factorial(d)
    # D maps nodal values on a cell (nv,) to edge-basis gradient (d,)
    D = np.zeros((d, d + 1))
    D[:, 0] = -1.0
    D[:, 1:] = np.eye(d)
    local = np.einsum("f,fij,ia,jb->fab", measures, Ginv, D, D)
    rows = np.repeat(mesh.cells, d + 1, axis=1).reshape(-1)
    cols = np.tile(mesh.cells, (1, d + 1)).reshape(-1)
    K = sp.csr_matrix((local.reshape(-1), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes))
    K = 0.5 * (K + K.T)
    return P, qw, K.tocsr()


class MeshForms:
    """Assembled forms of a mesh: stiffness, curvature mass, lumped L^2
    mass, and the shared per-cell quadrature (interpolation matrix P and
    weights qw) behind every L^p integral.

    norm_g_sq is the natural squared norm int |grad u|^2 + kappa S_g u^2;
    solve_inner applies its inverse (the Riesz map used as preconditioner).
    """

    def __init__(self, mesh, P, qw, K):
        self.mesh = mesh
        self.quad_interp = P
        self.quad_weights = qw
        self.stiffness = K
        w = P.T @ qw
        self.node_weights = w
        self.l2_mass = sp.diags(w, format="csr")
        kap = mesh.kappa
        self.curvature_mass = sp.diags(kap * mesh.S * w, format="csr")
        self.inner_matrix = (self.stiffness + self.curvature_mass).tocsc()
        self._factor = None

    def measure(self):
        return float(self.quad_weights.sum())

    # -- the natural inner product ------------------------------------
    def inner_g(self, u, v):
        return float(u @ (self.inner_matrix @ v))

    def norm_g_sq(self, u):
        return self.inner_g(u, u)

    def solve_inner(self, b, rtol=1e-8, method=None):
        """x with (K + C) x = b.

        Narrow-banded latitude systems and small simplicial ones go through
        a cached direct factorization (exact, reproducible); large
        simplicial systems use Jacobi-preconditioned conjugate gradients at
        relative residual rtol.  `method` forces 'direct' or 'cg'.
        """
        A = self.inner_matrix
        if method is None:
            direct = self.mesh.kind == "latitude" or A.shape[0] <= 20000
        else:
            direct = method == "direct"
        if direct:
            if self._factor is None:
                self._factor = spla.splu(A)
            return self._factor.solve(b)
        dinv = 1.0 / A.diagonal()
        M = spla.LinearOperator(A.shape, matvec=lambda x: dinv * x)
        x, info = spla.cg(A, b, M=M, rtol=rtol, maxiter=10 * A.shape[0])
        if info != 0:
            raise MeshError(f"inner-product solve failed (cg info={info})")
        return x

    # -- L^p machinery --------------------------------------------------
    def integrate_power(self, u, p):
        """int |u|^p dmu."""
        q = self.quad_interp @ u
        return float(self.quad_weights @ np.abs(q) ** p)

    def grad_power(self, u, p):
        """Nodal gradient of int |u|^p (zero where u vanishes)."""
        q = self.quad_interp @ u
        g = p * np.abs(q) ** (p - 1.0) * np.sign(q)
        return self.quad_interp.T @ (self.quad_weights * g)

    def integrate_pair(self, uj, ui, a, b):
        """int |uj|^a |ui|^b dmu."""
        qj = np.abs(self.quad_interp @ uj) ** a
        qi = np.abs(self.quad_interp @ ui) ** b
        return float(self.quad_weights @ (qj * qi))

    def grad_pair(self, uj, ui, a, b):
        """Nodal gradient of int |uj|^a |ui|^b with respect to ui."""
        qj = np.abs(self.quad_interp @ uj) ** a
        qi = self.quad_interp @ ui
        g = qj * b * np.abs(qi) ** (b - 1.0) * np.sign(qi)
        return self.quad_interp.T @ (self.quad_weights * g)

    def norm_lp(self, u, p):
        return self.integrate_power(u, p) ** (1.0 / p)


def assemble_forms(mesh):
    if mesh.kind == "latitude":
        P, qw, K = _assemble_latitude(mesh)
    elif mesh.kind == "simplicial":
        P, qw, K = _assemble_simplicial(mesh)
    else:
        raise MeshError(f"unknown mesh kind {mesh.kind!r}")
    return MeshForms(mesh, P, qw, K)


def coercivity_check(forms, tol=1e-12):
    """Smallest eigenvalue of (stiffness + curvature mass) against the
    lumped L^2 mass and whether the natural form is coercive."""
    A = forms.inner_matrix
    w = forms.node_weights
    n = A.shape[0]
    scale = 1.0 / np.sqrt(w)
    B = sp.diags(scale) @ A @ sp.diags(scale)
    if n <= 2500:
        lam = np.linalg.eigvalsh(B.toarray())[0]
    else:
        # shift far enough below the spectrum for a safe factorization
        bound = float(np.abs(B).sum(axis=1).max())
        lam = spla.eigsh(B, k=1, sigma=-bound, which="LM",
                         return_eigenvectors=False)[0]
    lam = float(lam)
    return lam, lam > tol * max(1.0, abs(lam))

"""Strong-repulsion continuation and the diagnostics of the segregated
limit.

Driving the shared coupling value of a symmetric competitive system to
minus infinity along a geometric schedule produces component fields whose
overlap integrals vanish and whose supports tile the manifold.  This module
runs that continuation with warm starts, measures segregation (coupling-
weighted overlap integrals, threshold-support overlap), extracts the node
partition the limit induces (supports, interface, per-support energies via
the constraint identity c_i = ||u_i||_g^2 / m), probes the interface
(one-sided gradient mismatch, vanishing-gradient proxies for the singular
part), forms the sign-changing difference of a two-component limit together
with its interior equation residual, tracks discrete Holder seminorms along
the run, and evaluates the closed-form smallness threshold used in
dimension 10.

Graph structure (adjacency, metric edge lengths, graph-geodesic distances)
always comes from the mesh; measures of node sets use the lumped quadrature
weights so that support measures, interface measure, and overlap measures
sum exactly to the total volume.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import DegeneratePartitionError, DomainError, ShapeError
from .nehari import CouplingSpec, NonProjectableError, minimize

__all__ = [
    "LambdaSchedule", "ContinuationRecord", "PartitionResult",
    "InterfaceReport", "NodalReport", "SupportSolve",
    "continue_lambda", "segregation_integral", "extract_partition",
    "interface_diagnostics", "nodal_solution", "holder_estimate",
    "equation_residual", "support_energy", "threshold_check_m10",
]

M10_THRESHOLD_FRACTION = 5.0 / 567.0


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class LambdaSchedule:
    """Geometric coupling schedule lambda_k = lambda0 * ratio**k,
    k = 0 .. steps-1: strictly decreasing from a negative start."""
    lambda0: float = -1.0
    ratio: float = 4.0
    steps: int = 10

    def __post_init__(self):
        if not self.lambda0 < 0.0:
            raise DomainError("schedule must start at a negative coupling")
        if not self.ratio > 1.0:
            raise DomainError("schedule ratio must exceed 1")
        if self.steps < 1:
            raise DomainError("schedule needs at least one step")

    @property
    def values(self):
        return self.lambda0 * self.ratio ** np.arange(self.steps)


# ---------------------------------------------------------------------------
# segregation measures


def _fields_matrix(u, forms):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or u.shape[1] != forms.mesh.n_nodes:
        raise ShapeError(
            f"fields of shape {u.shape} do not match the mesh "
            f"({forms.mesh.n_nodes} nodes)")
    return u


def segregation_integral(u, lam, forms):
    """Matrix of coupling-weighted overlap integrals
    lam_ij * int |u_i|^beta |u_j|^beta with beta = 2*/2: zero diagonal,
    nonpositive entries, exactly zero for disjoint supports."""
    u = _fields_matrix(u, forms)
    ell = u.shape[0]
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        lam = float(lam) * (1.0 - np.eye(ell))
    if lam.shape != (ell, ell):
        raise ShapeError("coupling matrix shape does not match components")
    m = forms.mesh.dim
    beta = float(m) / (m - 2.0)
    out = np.zeros((ell, ell))
    for i in range(ell):
        for j in range(i + 1, ell):
            if lam[i, j] != 0.0:
                val = lam[i, j] * forms.integrate_pair(u[j], u[i], beta, beta)
                out[i, j] = out[j, i] = val
    return out


def overlap_measure(u, tau, forms):
    """Measure (lumped weights) of the largest pairwise overlap of the
    threshold supports {u_i > tau}."""
    u = _fields_matrix(u, forms)
    ell = u.shape[0]
    if ell == 1:
        return 0.0
    above = u > tau
    w = forms.node_weights
    worst = 0.0
    for i in range(ell):
        for j in range(i + 1, ell):
            worst = max(worst, float(w[above[i] & above[j]].sum()))
    return worst


def holder_estimate(u, alpha, forms, n_sources=64):
    """Discrete C^{0,alpha} seminorm: max over sampled node pairs of
    |u_i(x) - u_i(y)| / d(x, y)^alpha with d the graph-geodesic distance.

    Sources are spread evenly over the node indices (deterministic); the
    maximum runs over all components, every source, and every reachable
    target node.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("Holder exponent must lie in (0, 1)")
    u = _fields_matrix(u, forms)
    n = u.shape[1]
    k = min(n_sources, n)
    sources = np.unique(np.linspace(0, n - 1, k).astype(int))
    graph = forms.mesh.geodesic_adjacency()
    dist = csgraph.dijkstra(graph, directed=False, indices=sources)
    valid = np.isfinite(dist) & (dist > 0.0)
    denom = np.where(valid, dist, 1.0) ** alpha
    best = 0.0
    for comp in u:
        ratios = np.abs(comp[sources][:, None] - comp[None, :]) / denom
        best = max(best, float(ratios[valid].max(initial=0.0)))
    return best


def threshold_check_m10(u1_min, weyl_sq):
    """Whether a strictly positive component minimum lies below the
    dimension-10 smallness threshold (5/567) * |Weyl|^2."""
    if weyl_sq < 0.0:
        raise DomainError("squared Weyl magnitude must be nonnegative")
    return bool(0.0 < u1_min < M10_THRESHOLD_FRACTION * weyl_sq)


# ---------------------------------------------------------------------------
# continuation


@dataclass
class ContinuationRecord:
    """One converged (or failed) solve along the coupling schedule with its
    segregation diagnostics."""
    lam: float
    u: np.ndarray
    energy: float
    norms_sq: np.ndarray
    grad_norm: float
    nehari_residual: float
    iterations: int
    converged: bool
    segregation: np.ndarray
    max_offdiag: float
    overlap: float
    holder: float


def pair_swap_reflection(u):
    """Average a two-component state with its image under the simultaneous
    component swap and node-order reversal.

    On a latitude grid, reversing the node order is the equatorial
    reflection isometry, so this is the averaging projection onto the
    subspace of states invariant under (reflect, swap) -- the symmetry of
    a balanced two-component partition.  Feed it to the minimizer's
    symmetrize hook to compute equivariant minimizers.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != 2:
        raise ShapeError("pair_swap_reflection needs a (2, n) state")
    return 0.5 * (u + u[::-1, ::-1])


def _solve_with_substeps(u, lam_prev, lam, ell, m, forms, tol, max_iter,
                         tol_abs, symmetrize, max_depth=6):
    """Minimize at coupling lam, warm-started from u (a minimizer at
    lam_prev).  If the warm start falls outside the projectable region of
    the target coupling, the jump is subdivided (geometrically when both
    endpoints are negative, linearly from zero) and re-tried at doubling
    resolution."""
    spec = CouplingSpec.symmetric(m, ell, float(lam))
    try:
        return minimize(u, spec, forms, tol=tol, max_iter=max_iter,
                        record_trace=False, tol_abs=tol_abs,
                        symmetrize=symmetrize)
    except NonProjectableError:
        pass
    for depth in range(1, max_depth + 1):
        pieces = 2 ** depth
        if lam_prev < 0.0:
            ratios = (lam / lam_prev) ** (np.arange(1, pieces + 1) / pieces)
            path = lam_prev * ratios
        else:
            path = lam * np.arange(1, pieces + 1) / pieces
        u_try = u
        res = None
        try:
            for lam_s in path:
                spec_s = CouplingSpec.symmetric(m, ell, float(lam_s))
                res = minimize(u_try, spec_s, forms, tol=tol,
                               max_iter=max_iter, record_trace=False,
                               tol_abs=tol_abs, symmetrize=symmetrize)
                if not res.converged:
                    return res
                u_try = res.u
        except NonProjectableError:
            continue
        return res
    raise NonProjectableError(
        f"no projectable path into coupling {lam} from the previous state")


def continue_lambda(u0, schedule, forms, tol=None, max_iter=2000,
                    holder_alpha=0.9, tau_factor=1e-3, symmetrize=None):
    """Warm-started minimization along a coupling schedule.

    Solves the symmetric system at each schedule value, starting every
    solve from the previous minimizer, and records energy, the
    coupling-weighted segregation matrix, the worst pairwise
    threshold-support overlap (tau = tau_factor * max |u|), and the
    discrete Holder seminorm at holder_alpha.  The first solve fixes the
    absolute gradient threshold that every later (warm-started) solve
    reuses.  A symmetrize hook is forwarded to every solve so the whole
    chain can be kept equivariant.  A coupling step whose warm start is
    not projectable is subdivided adaptively; a failed solve ends the
    sequence: its record is kept (converged=False) and no further steps
    run.
    """
    u = _fields_matrix(u0, forms)
    ell = u.shape[0]
    m = forms.mesh.dim
    records = []
    tol_abs = None
    lam_prev = 0.0
    off = ~np.eye(ell, dtype=bool)
    for lam in schedule.values:
        lam = float(lam)
        try:
            res = _solve_with_substeps(u, lam_prev, lam, ell, m, forms,
                                       tol, max_iter, tol_abs, symmetrize)
        except NonProjectableError:
            seg = segregation_integral(u, lam, forms)
            tau = tau_factor * float(np.abs(u).max())
            nan = float("nan")
            records.append(ContinuationRecord(
                lam=lam, u=u, energy=nan,
                norms_sq=np.full(ell, nan), grad_norm=nan,
                nehari_residual=nan, iterations=0, converged=False,
                segregation=seg,
                max_offdiag=float(np.abs(seg[off]).max()) if ell > 1 else 0.0,
                overlap=overlap_measure(u, tau, forms),
                holder=holder_estimate(u, holder_alpha, forms)))
            break
        seg = segregation_integral(res.u, lam, forms)
        max_off = float(np.abs(seg[off]).max()) if ell > 1 else 0.0
        tau = tau_factor * float(np.abs(res.u).max())
        records.append(ContinuationRecord(
            lam=lam, u=res.u, energy=res.energy,
            norms_sq=res.norms_sq, grad_norm=res.grad_norm,
            nehari_residual=res.nehari_residual, iterations=res.iterations,
            converged=res.converged, segregation=seg, max_offdiag=max_off,
            overlap=overlap_measure(res.u, tau, forms),
            holder=holder_estimate(res.u, holder_alpha, forms)))
        if not res.converged:
            break
        u = res.u
        lam_prev = lam
        if tol_abs is None:
            tol_abs = res.grad_tol
    return records


# ---------------------------------------------------------------------------
# partition extraction


@dataclass
class PartitionResult:
    """Node partition induced by thresholding a segregated tuple.

    labels[x] is the support index owning node x, or -1 on the interface.
    supports/interface are node-index arrays; measures use the lumped
    quadrature weights and sum exactly to the total volume.  energies are
    the constraint-identity values ||u_i restricted||_g^2 / m and total is
    their sum (the partition-energy estimate).  overlap[i, j] is the
    measure of {u_i > tau} intersected with {u_j > tau}.
    """
    tau: float
    labels: np.ndarray
    supports: list
    interface: np.ndarray
    energies: np.ndarray
    total: float
    connected: np.ndarray
    measures: np.ndarray
    interface_measure: float
    overlap: np.ndarray


def extract_partition(u, tau, forms):
    """Threshold supports {u_i > tau}, nodes above several thresholds going
    to the largest component, the rest forming the interface; per-support
    connectivity on the mesh graph and energies via the constraint
    identity."""
    u = _fields_matrix(u, forms)
    ell, n = u.shape
    above = u > tau
    owner = np.argmax(np.where(above, u, -np.inf), axis=0)
    labels = np.where(above.any(axis=0), owner, -1)

    adj = forms.mesh.adjacency()
    w = forms.node_weights
    m = forms.mesh.dim
    supports, energies, connected, measures = [], [], [], []
    for i in range(ell):
        nodes = np.flatnonzero(labels == i)
        if nodes.size == 0:
            raise DegeneratePartitionError(
                f"component {i} has no nodes above the threshold")
        supports.append(nodes)
        restricted = np.where(labels == i, u[i], 0.0)
        energies.append(forms.norm_g_sq(restricted) / m)
        sub = adj[np.ix_(nodes, nodes)]
        n_comp, _ = csgraph.connected_components(sub, directed=False)
        connected.append(n_comp == 1)
        measures.append(float(w[nodes].sum()))

    interface = np.flatnonzero(labels == -1)
    overlap = np.zeros((ell, ell))
    for i in range(ell):
        for j in range(i + 1, ell):
            val = float(w[above[i] & above[j]].sum())
            overlap[i, j] = overlap[j, i] = val

    energies = np.array(energies)
    return PartitionResult(
        tau=float(tau), labels=labels, supports=supports,
        interface=interface, energies=energies,
        total=float(energies.sum()), connected=np.array(connected),
        measures=np.array(measures),
        interface_measure=float(w[interface].sum()), overlap=overlap)


# ---------------------------------------------------------------------------
# interface diagnostics


@dataclass
class InterfaceReport:
    """Per-node one-sided gradient comparison along the interface.

    rows: (node, side i, side j, |grad u_i|, |grad u_j|, mismatch ratio,
    singular flag).  epsilon is the vanishing-gradient threshold (ten times
    the median gradient magnitude of fields inside foreign supports, their
    numerical noise floor); nodes where both one-sided gradients fall below
    it are flagged as singular-set proxies.
    """
    rows: list
    median_mismatch: float
    epsilon: float
    singular_nodes: np.ndarray


def _one_sided_gradient(comp, node, indptr, indices, lengths, labels, side):
    best = 0.0
    for k in range(indptr[node], indptr[node + 1]):
        y = indices[k]
        if labels[y] == side:
            best = max(best, abs(comp[y] - comp[node]) / lengths[k])
    return best


def interface_diagnostics(u, partition, forms):
    """One-sided gradient magnitudes and their mismatch at every node that
    touches exactly two supports (interface nodes when the interface is
    nonempty, support-boundary nodes otherwise)."""
    u = _fields_matrix(u, forms)
    ell = u.shape[0]
    labels = partition.labels
    graph = forms.mesh.geodesic_adjacency()
    indptr, indices, lengths = graph.indptr, graph.indices, graph.data

    if ell < 2:
        return InterfaceReport(rows=[], median_mismatch=0.0, epsilon=0.0,
                               singular_nodes=np.array([], dtype=int))

    # noise floor: gradients of a component across edges interior to the
    # supports of the *other* components, where the field should vanish
    foreign = []
    e, el = forms.mesh.edge_lengths()
    for i in range(ell):
        for j in range(ell):
            if j == i:
                continue
            inside = (labels[e[:, 0]] == j) & (labels[e[:, 1]] == j)
            if inside.any():
                diffs = np.abs(u[i, e[inside, 0]] - u[i, e[inside, 1]])
                foreign.append(diffs / el[inside])
    eps = 10.0 * float(np.median(np.concatenate(foreign))) if foreign else 0.0

    candidates = []
    for x in range(len(labels)):
        neigh_labels = {labels[y]
                        for y in indices[indptr[x]:indptr[x + 1]]}
        neigh_labels.add(labels[x])
        neigh_labels.discard(-1)
        if len(neigh_labels) == 2 and (labels[x] == -1
                                       or labels[x] in neigh_labels):
            candidates.append((x, tuple(sorted(neigh_labels))))

    rows = []
    for x, (i, j) in candidates:
        gi = _one_sided_gradient(u[i], x, indptr, indices, lengths, labels, i)
        gj = _one_sided_gradient(u[j], x, indptr, indices, lengths, labels, j)
        top = max(gi, gj)
        mismatch = abs(gi - gj) / top if top > 0.0 else 0.0
        singular = gi <= eps and gj <= eps
        rows.append((x, i, j, gi, gj, mismatch, singular))

    mismatches = [r[5] for r in rows]
    singular_nodes = np.array([r[0] for r in rows if r[6]], dtype=int)
    return InterfaceReport(
        rows=rows,
        median_mismatch=float(np.median(mismatches)) if rows else 0.0,
        epsilon=eps, singular_nodes=singular_nodes)


# ---------------------------------------------------------------------------
# nodal difference and equation residuals


def equation_residual(v, forms, nodes=None):
    """Strong-form defect of the single critical equation L_g v = |v|^{2*-2}v
    at the nodes: returns (L^2_g norm over `nodes`, max abs over `nodes`).
    """
    v = np.asarray(v, dtype=float)
    m = forms.mesh.dim
    two_star = 2.0 * m / (m - 2.0)
    w = forms.node_weights
    covec = forms.inner_matrix @ v - forms.grad_power(v, two_star) / two_star
    rho = covec / w
    if nodes is None:
        nodes = np.arange(len(v))
    sub = rho[nodes]
    l2 = math.sqrt(float(w[nodes] @ sub ** 2))
    return l2, float(np.abs(sub).max(initial=0.0))


@dataclass
class NodalReport:
    """Sign-changing difference w = u_1 - u_2 of a segregated pair: nodal
    domain counts (connected sign components on the mesh graph), the
    interior node mask (graph distance >= 2 from the interface), and the
    equation residual of w over that interior."""
    w: np.ndarray
    n_positive: int
    n_negative: int
    n_domains: int
    interior: np.ndarray
    residual_l2: float
    residual_max: float
    energy: float


def _sign_components(mask, adj):
    nodes = np.flatnonzero(mask)
    if nodes.size == 0:
        return 0
    sub = adj[np.ix_(nodes, nodes)]
    n_comp, _ = csgraph.connected_components(sub, directed=False)
    return n_comp


def nodal_solution(u, forms, partition=None, tau_factor=1e-3):
    """Difference field of a two-component segregated state with its nodal
    domain count and interior equation residual.

    The interior excludes the interface and its graph neighbors (distance
    < 2); with an empty interface the excluded band consists of the
    support-boundary nodes.  More than two sign domains triggers a warning
    (the segregated limit has exactly two).
    """
    u = _fields_matrix(u, forms)
    if u.shape[0] != 2:
        raise ShapeError("nodal difference needs exactly two components")
    if partition is None:
        tau = tau_factor * float(np.abs(u).max())
        partition = extract_partition(u, tau, forms)
    labels = partition.labels
    w = u[0] - u[1]
    m = forms.mesh.dim

    adj = forms.mesh.adjacency()
    n_pos = _sign_components(w > 0.0, adj)
    n_neg = _sign_components(w < 0.0, adj)
    n_domains = n_pos + n_neg
    if n_domains > 2:
        warnings.warn(f"difference field has {n_domains} nodal domains "
                      "(the segregated limit has 2)", RuntimeWarning,
                      stacklevel=2)

    boundary = labels == -1
    if not boundary.any():
        neighbor_label_differs = np.zeros(len(labels), dtype=bool)
        e, _ = forms.mesh.edge_lengths()
        differ = labels[e[:, 0]] != labels[e[:, 1]]
        neighbor_label_differs[e[differ, 0]] = True
        neighbor_label_differs[e[differ, 1]] = True
        boundary = neighbor_label_differs
    near = adj @ boundary.astype(float) > 0.0
    interior = ~(boundary | near)

    l2, mx = equation_residual(w, forms, np.flatnonzero(interior))
    energy = sum(forms.norm_g_sq(u[i]) for i in range(2)) / m
    return NodalReport(w=w, n_positive=n_pos, n_negative=n_neg,
                       n_domains=n_domains, interior=interior,
                       residual_l2=l2, residual_max=mx, energy=energy)


# ---------------------------------------------------------------------------
# per-support re-solve (partition consistency)


@dataclass
class SupportSolve:
    """Outcome of re-solving the single critical equation on one support
    with zero boundary values: the field, its constraint-identity energy,
    and the fixed-point iteration diagnostics."""
    field: np.ndarray
    energy: float
    iterations: int
    converged: bool


def support_energy(u_i, nodes, forms, max_iter=400, tol=1e-11):
    """Least-energy re-solve of L_g v = v^{2*-2} v on a node set (zero
    outside): preconditioned fixed-point iteration v <- A^{-1} f(v) on the
    reduced system followed by the constraint rescaling, started from the
    restriction of u_i."""
    v = np.zeros(forms.mesh.n_nodes)
    v[nodes] = np.abs(np.asarray(u_i, dtype=float)[nodes])
    if not np.any(v > 0.0):
        raise DegeneratePartitionError("support carries no field mass")
    m = forms.mesh.dim
    two_star = 2.0 * m / (m - 2.0)
    A_sub = forms.inner_matrix.tocsr()[np.ix_(nodes, nodes)].tocsc()
    factor = spla.splu(A_sub)

    def rescale(vec):
        a = forms.norm_g_sq(vec)
        b = forms.integrate_power(vec, two_star)
        s = (a / b) ** (1.0 / (two_star - 2.0))
        return s * vec

    v = rescale(v)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = forms.grad_power(v, two_star) / two_star
        v_new = np.zeros_like(v)
        v_new[nodes] = factor.solve(rhs[nodes])
        v_new = rescale(np.abs(v_new))
        change = float(np.max(np.abs(v_new - v)))
        scale = float(np.max(np.abs(v_new)))
        v = v_new
        if change <= tol * max(scale, 1e-300):
            converged = True
            break
    return SupportSolve(field=v, energy=forms.norm_g_sq(v) / m,
                        iterations=it, converged=converged)

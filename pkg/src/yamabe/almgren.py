"""Frequency functions, local Pohozaev identities, coefficient estimates,
and exponential-decay verification for variable-coefficient operators
div(A(x) grad u) on Euclidean ball charts.

The frequency N(r) = E(r)/H(r) compares scaled Dirichlet-plus-reaction
energy with scaled boundary mass around a center; for segregated profiles
pulled into a local chart it is quasi-monotone, i.e. e^{Cr}(N+1) is
nondecreasing for some finite C.  This module computes traces of E, H, N
over geometric radii in the recentered frame (balls in the recentered
variable are ellipsoids of the original coefficient), fits the smallest
monotonicity constant by bisection, checks the companion doubling
inequality |(log H)' - 2N/r| <= C, evaluates a local Pohozaev identity
whose residual vanishes at continuum rate on exact solutions, quantifies
how far a coefficient field strays from the identity (the estimates that
drive all of the above), and verifies the exponential decay of solutions
of div(A grad u) = C u^gamma on balls against closed-form comparison
functions.

Fields evaluate on (N, m) arrays of points; coefficient matrices evaluate
one point at a time.
"""

from dataclasses import dataclass, field as _field
import math

import numpy as np
import scipy.interpolate as interp
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConvergenceError, DomainError, InsufficientDataError,
                     ResolutionError, ShapeError)

__all__ = [
    "CoefficientField", "CoefficientReport", "AlmgrenTrace",
    "MonotonicityReport", "DoublingReport", "GridField", "DecayReport",
    "mu", "coefficient_bounds", "recenter", "almgren_trace",
    "monotonicity_check", "doubling_check", "pohozaev_residual",
    "latitude_chart", "decay_verify", "comparison_supersolution",
]


# ---------------------------------------------------------------------------
# coefficient fields


@dataclass(frozen=True)
class CoefficientField:
    """Variable symmetric-positive-definite coefficient A on a ball chart.

    A maps a single point (array of length dim) to an (dim, dim) symmetric
    positive-definite matrix; a is a positive scalar weight on the
    reaction; theta <= Theta are ellipticity bounds valid on the chart;
    da_bound bounds the directional derivatives sup_x max_k ||d_k A(x)||_2.
    """
    dim: int
    A: object
    a: float = 1.0
    theta: float = 1.0
    Theta: float = 1.0
    da_bound: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError(f"need dimension >= 1, got {self.dim}")
        if not self.a > 0.0:
            raise DomainError(f"need a positive weight, got {self.a}")
        if not 0.0 < self.theta <= self.Theta:
            raise DomainError(
                f"need ellipticity bounds 0 < theta <= Theta, got "
                f"({self.theta}, {self.Theta})")
        if self.da_bound < 0.0:
            raise DomainError("need a nonnegative derivative bound")

    @classmethod
    def identity(cls, m):
        eye = np.eye(m)
        return cls(dim=m, A=lambda x: eye, theta=1.0, Theta=1.0,
                   da_bound=0.0)

    def matrix(self, x):
        """Evaluate A at one point, enforcing shape and symmetry."""
        M = np.asarray(self.A(np.asarray(x, dtype=float)), dtype=float)
        if M.shape != (self.dim, self.dim):
            raise ShapeError(
                f"coefficient matrix of shape {M.shape} for dimension "
                f"{self.dim}")
        scale = float(np.abs(M).max())
        if float(np.abs(M - M.T).max()) > 1e-9 * max(scale, 1.0):
            raise DomainError("coefficient matrix is not symmetric")
        return 0.5 * (M + M.T)


def mu(field, x):
    """Radial quadratic form <A(x) x/|x|, x/|x|>."""
    x = np.asarray(x, dtype=float)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise DomainError("the radial quadratic form is undefined at 0")
    d = x / norm
    return float(d @ field.matrix(x) @ d)


def _partials_A(field, x, h=None):
    """Central-difference partial derivatives d_k A(x), shape (m, m, m)."""
    m = field.dim
    if h is None:
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
    out = np.empty((m, m, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        out[k] = (field.matrix(x + e) - field.matrix(x - e)) / (2.0 * h)
    return out


def _grad_mu(field, x):
    """Gradient of mu: directional-derivative term plus curvature of the
    direction map, both exact up to the finite differences inside dA."""
    x = np.asarray(x, dtype=float)
    norm = float(np.linalg.norm(x))
    d = x / norm
    M = field.matrix(x)
    dA = _partials_A(field, x)
    val = float(d @ M @ d)
    grad = np.array([d @ dA[k] @ d for k in range(field.dim)])
    grad += 2.0 * (M @ d - val * d) / norm
    return grad


def _div_A(field, x):
    """Row divergence (div A)_i = sum_k d_k A_{ki}."""
    dA = _partials_A(field, x)
    return np.array([dA[k, k, :] for k in range(field.dim)]).sum(axis=0)


@dataclass(frozen=True)
class CoefficientReport:
    """Measured deviations of a centered coefficient field from the
    identity, against linear-in-derivative-bound envelopes.

    items maps a quantity name to (measured sup, envelope); ok states
    whether every measured sup sits inside its envelope.
    """
    items: dict
    ok: bool


def coefficient_bounds(field, sample_radii, n_dirs=16):
    """Sup over sampled points of the identity-deviation quantities of a
    centered field (A(0) = Id): relative stretch ||A - Id||/|x|, radial
    form deviation |mu - 1|/|x|, gradient |grad mu|, the defect of
    div(A grad |x|) from (m-1)/|x|, and the defect of div(A x / mu) from
    the dimension, each compared with an explicit multiple of the
    derivative bound.  Zero radii are skipped."""
    m = field.dim
    A0 = field.matrix(np.zeros(m))
    if float(np.abs(A0 - np.eye(m)).max()) > 1e-10:
        raise DomainError(
            "coefficient_bounds needs a centered field with A(0) = Id; "
            "recenter first")
    rng = np.random.default_rng(0)
    dirs = rng.standard_normal((n_dirs, m))
    dirs = np.vstack([np.eye(m), dirs / np.linalg.norm(dirs, axis=1,
                                                       keepdims=True)])
    sup = {"stretch": 0.0, "mu_dev": 0.0, "grad_mu": 0.0,
           "radial_div": 0.0, "z_div": 0.0}
    for r in np.atleast_1d(np.asarray(sample_radii, dtype=float)):
        if r == 0.0:
            continue
        for d in dirs:
            x = r * d
            norm = float(np.linalg.norm(x))
            M = field.matrix(x)
            val = mu(field, x)
            divA = _div_A(field, x)
            xhat = x / norm
            sup["stretch"] = max(sup["stretch"],
                                 float(np.linalg.norm(M - np.eye(m), 2))
                                 / norm)
            sup["mu_dev"] = max(sup["mu_dev"], abs(val - 1.0) / norm)
            sup["grad_mu"] = max(
                sup["grad_mu"], float(np.linalg.norm(_grad_mu(field, x))))
            # div(A grad|x|) = (tr A - mu)/|x| + <div A, x/|x|>
            rad = (float(np.trace(M)) - val) / norm + float(divA @ xhat)
            sup["radial_div"] = max(sup["radial_div"],
                                    abs(rad - (m - 1) / norm))
            # div(Ax/mu) = (tr A + <div A, x>)/mu - <Ax, grad mu>/mu^2
            zdiv = ((float(np.trace(M)) + float(divA @ x)) / val
                    - float((M @ x) @ _grad_mu(field, x)) / val ** 2)
            sup["z_div"] = max(sup["z_div"], abs(zdiv - m) / norm)
    da = field.da_bound
    root_m = math.sqrt(m)
    bounds = {
        "stretch": root_m * da,
        "mu_dev": root_m * da,
        "grad_mu": 5.0 * root_m * da,
        "radial_div": 3.0 * m * root_m * da,
        "z_div": 6.0 * m * root_m * (1.0 + field.Theta) * da
                 * (1.0 + da),
    }
    slack = 1e-8
    items = {k: (sup[k], bounds[k]) for k in sup}
    ok = all(meas <= bound + slack for meas, bound in items.values())
    return CoefficientReport(items=items, ok=ok)


def _sqrt_spd(M, what="coefficient matrix"):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() <= 0.0:
        raise DomainError(f"{what} is not positive definite")
    root = V @ np.diag(np.sqrt(w)) @ V.T
    inv_root = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    return root, inv_root


def recenter(field, x0):
    """Normalize a coefficient field at a center: compose with the affine
    map x0 + A(x0)^{1/2} y and conjugate by A(x0)^{-1/2}, so the new field
    is the identity matrix at the origin (to round-off).  Ellipticity and
    derivative bounds are transported conservatively."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (field.dim,):
        raise ShapeError(
            f"center of shape {x0.shape} for dimension {field.dim}")
    root, inv_root = _sqrt_spd(field.matrix(x0),
                               "coefficient matrix at the center")
    base = field.A

    def transformed(y):
        return inv_root @ np.asarray(
            base(x0 + root @ np.asarray(y, dtype=float)), dtype=float) \
            @ inv_root

    return CoefficientField(
        dim=field.dim, A=transformed, a=field.a,
        theta=field.theta / field.Theta, Theta=field.Theta / field.theta,
        da_bound=field.da_bound * math.sqrt(field.Theta) / field.theta)


# ---------------------------------------------------------------------------
# sampled fields


class GridField:
    """Multilinear interpolant of values on a uniform Cartesian grid over
    [-extent, extent]^m, with gradients interpolated from central
    differences of the samples.  Callable on (N, m) point arrays."""

    def __init__(self, values, extent):
        values = np.asarray(values, dtype=float)
        m = values.ndim
        extent = float(extent)
        axes = [np.linspace(-extent, extent, n) for n in values.shape]
        self.extent = extent
        self.dim = m
        self._interp = interp.RegularGridInterpolator(
            axes, values, method="linear", bounds_error=True)
        steps = [ax[1] - ax[0] for ax in axes]
        grads = np.gradient(values, *steps)
        if m == 1:
            grads = [grads]
        self._grad_interp = [
            interp.RegularGridInterpolator(axes, g, method="linear",
                                           bounds_error=True)
            for g in grads]

    @classmethod
    def sample(cls, fn, m, extent, n):
        """Sample a vectorized function of (N, m) points on an n^m grid."""
        axes = [np.linspace(-extent, extent, n)] * m
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        values = np.asarray(fn(pts.reshape(-1, m)),
                            dtype=float).reshape(pts.shape[:-1])
        return cls(values, extent)

    def __call__(self, pts):
        return self._interp(np.asarray(pts, dtype=float))

    def grad(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack([g(pts) for g in self._grad_interp], axis=-1)


class _FnField:
    """Uniform (eval, grad) wrapper: uses a field's own grad when it has
    one, central finite differences otherwise."""

    def __init__(self, fn, dim, fd_step=1e-6):
        self.fn = fn
        self.dim = dim
        self.fd_step = fd_step

    def __call__(self, pts):
        return np.asarray(self.fn(pts), dtype=float)

    def grad(self, pts):
        inner = getattr(self.fn, "grad", None)
        if inner is not None:
            return np.asarray(inner(pts), dtype=float)
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = self.fd_step
            out[:, k] = (self(pts + e) - self(pts - e)) / (2 * self.fd_step)
        return out


def _as_fields(u, dim):
    if callable(u) or isinstance(u, GridField):
        u = (u,)
    return [_FnField(fn, dim) for fn in u]


# ---------------------------------------------------------------------------
# frequency traces


@dataclass
class AlmgrenTrace:
    """Frequency trace around a center: scaled energies E, boundary masses
    H, and their quotient N = E/H over increasing radii, in the recentered
    frame.  C is the fitted monotonicity constant once a check has run;
    truncated records that trailing radii were dropped because H was not
    numerically positive there."""
    center: np.ndarray
    radii: np.ndarray
    E: np.ndarray
    H: np.ndarray
    N: np.ndarray
    C: float = None
    truncated: bool = False


def _angular_rule(m, n_ang):
    """Directions and weights integrating over the unit sphere S^{m-1}."""
    if m == 2:
        phi = 2.0 * math.pi * np.arange(n_ang) / n_ang
        dirs = np.column_stack([np.cos(phi), np.sin(phi)])
        wts = np.full(n_ang, 2.0 * math.pi / n_ang)
        return dirs, wts
    if m == 3:
        n_th = max(8, n_ang // 8)
        n_ph = max(16, n_ang // 2)
        nodes, gl_w = np.polynomial.legendre.leggauss(n_th)
        phi = 2.0 * math.pi * np.arange(n_ph) / n_ph
        sin_th = np.sqrt(1.0 - nodes ** 2)
        dirs = np.empty((n_th * n_ph, 3))
        wts = np.empty(n_th * n_ph)
        idx = 0
        for c, w in zip(nodes, gl_w):
            s = math.sqrt(1.0 - c * c)
            for p in phi:
                dirs[idx] = (s * math.cos(p), s * math.sin(p), c)
                wts[idx] = w * 2.0 * math.pi / n_ph
                idx += 1
        del sin_th
        return dirs, wts
    raise DomainError(f"angular quadrature supports dimensions 2 and 3, "
                      f"got {m}")


def _eval_matrices(field, pts):
    return np.stack([field.matrix(p) for p in pts])


def almgren_trace(u, field, f, x0, radii, n_ang=192, quad_order=8):
    """Frequency trace of component fields around a center.

    The frame is recentered at x0 (so balls here are coefficient-adapted
    ellipsoids of the original chart), and over each radius r the trace
    records E(r) = r^{2-m} int_{B_r} (<A grad u, grad u> - <f(x,u), u>),
    H(r) = r^{1-m} oint_{dB_r} mu |u|^2, and N = E/H.  f is a reaction
    evaluator f(points, values) -> per-component values, or None for the
    pure divergence-form case.  Radii where H fails to stay numerically
    positive truncate the trace (flagged); quadrature is Gauss-Legendre in
    radius per annulus times a spherical rule with n_ang directions.
    """
    m = field.dim
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or len(radii) == 0:
        raise ShapeError("radii must be a nonempty 1-D array")
    if not np.all(radii > 0.0) or not np.all(np.diff(radii) > 0.0):
        raise DomainError("radii must be positive and strictly increasing")
    x0 = np.zeros(m) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (m,):
        raise ShapeError(f"center of shape {x0.shape} for dimension {m}")

    root, _ = _sqrt_spd(field.matrix(x0), "coefficient matrix at the center")
    tilted = recenter(field, x0)
    fields = _as_fields(u, m)

    def to_chart(y_pts):
        return x0[None, :] + y_pts @ root.T

    def eval_all(y_pts):
        """Component values, gradients (chain rule through the affine
        recentering), and coefficient matrices at recentered points."""
        x_pts = to_chart(y_pts)
        vals = np.stack([fld(x_pts) for fld in fields])
        grads = np.stack([fld.grad(x_pts) @ root for fld in fields])
        mats = _eval_matrices(tilted, y_pts)
        return x_pts, vals, grads, mats

    dirs, ang_w = _angular_rule(m, n_ang)
    n_dir = len(dirs)
    gl_nodes, gl_wts = np.polynomial.legendre.leggauss(quad_order)

    def shell_energy(r_lo, r_hi):
        """int over the annulus (r_lo, r_hi) of the energy density."""
        mid = 0.5 * (r_lo + r_hi)
        half = 0.5 * (r_hi - r_lo)
        total = 0.0
        for s_node, s_w in zip(gl_nodes, gl_wts):
            s = mid + half * s_node
            y_pts = s * dirs
            x_pts, vals, grads, mats = eval_all(y_pts)
            dir_energy = np.zeros(n_dir)
            for comp in range(len(fields)):
                Agrad = np.einsum("nij,nj->ni", mats, grads[comp])
                dir_energy += np.einsum("ni,ni->n", Agrad, grads[comp])
            if f is not None:
                reac = np.asarray(f(x_pts, vals), dtype=float)
                dir_energy -= np.einsum("cn,cn->n", reac, vals)
            total += half * s_w * s ** (m - 1) * float(ang_w @ dir_energy)
        return total

    E = np.empty(len(radii))
    H = np.empty(len(radii))
    volume = 0.0
    prev_r = 0.0
    kept = len(radii)
    truncated = False
    for k, r in enumerate(radii):
        volume += shell_energy(prev_r, r)
        prev_r = r
        E[k] = r ** (2 - m) * volume
        y_pts = r * dirs
        _, vals, _, mats = eval_all(y_pts)
        mu_vals = np.einsum("ni,nij,nj->n", dirs, mats, dirs)
        H[k] = float(ang_w @ (mu_vals * (vals ** 2).sum(axis=0)))
        if H[k] <= 0.0 or not np.isfinite(H[k]):
            kept = k
            truncated = True
            break
    radii, E, H = radii[:kept], E[:kept], H[:kept]
    return AlmgrenTrace(center=x0, radii=radii, E=E, H=H,
                        N=np.where(H > 0.0, E / np.maximum(H, 1e-300),
                                   np.nan),
                        truncated=truncated)


# ---------------------------------------------------------------------------
# monotonicity and doubling


@dataclass(frozen=True)
class MonotonicityReport:
    """Smallest constant making e^{Cr}(N+1) nondecreasing across the trace
    (bisection), the violating radius intervals if the cap fails, and
    whether the fit succeeded."""
    C_fit: float
    violations: list
    ok: bool


def _monotone_violations(radii, log_vals, C, slack):
    lhs = log_vals[:-1] + C * radii[:-1]
    rhs = log_vals[1:] + C * radii[1:] - math.log1p(-slack)
    return [k for k in range(len(radii) - 1) if lhs[k] > rhs[k]]


def monotonicity_check(trace, cap=1e3, slack=1e-6):
    """Fit the smallest C >= 0 making e^{Cr}(N(r)+1) nondecreasing within
    a multiplicative slack, by bisection; traces shorter than 10 radii are
    rejected.  On success the constant is also recorded on the trace."""
    radii = trace.radii
    if len(radii) < 10:
        raise InsufficientDataError(
            f"monotonicity fit needs at least 10 radii, got {len(radii)}")
    vals = trace.N + 1.0
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0.0):
        return MonotonicityReport(C_fit=float("nan"), violations=[
            (float(radii[k]), float(radii[k + 1]))
            for k in range(len(radii) - 1)], ok=False)
    log_vals = np.log(vals)
    if not _monotone_violations(radii, log_vals, 0.0, slack):
        trace.C = 0.0
        return MonotonicityReport(C_fit=0.0, violations=[], ok=True)
    bad_at_cap = _monotone_violations(radii, log_vals, cap, slack)
    if bad_at_cap:
        return MonotonicityReport(
            C_fit=float(cap),
            violations=[(float(radii[k]), float(radii[k + 1]))
                        for k in bad_at_cap], ok=False)
    lo, hi = 0.0, float(cap)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _monotone_violations(radii, log_vals, mid, slack):
            lo = mid
        else:
            hi = mid
    trace.C = hi
    return MonotonicityReport(C_fit=hi, violations=[], ok=True)


@dataclass(frozen=True)
class DoublingReport:
    """Worst finite-difference deviation |(log H)' - 2N/r| over the trace
    against a given constant."""
    max_deviation: float
    bound: float
    ok: bool


def doubling_check(trace, bound):
    """Check the doubling inequality |(log H)'(r) - 2N(r)/r| <= bound at
    interior radii of the trace.  The derivative is a central difference
    in log r (symmetric on geometric radius grids, where differencing in
    r itself would pick up a first-order asymmetry error) divided by r."""
    radii, H, N = trace.radii, trace.H, trace.N
    if len(radii) < 3:
        raise InsufficientDataError(
            "doubling check needs at least 3 radii")
    logH = np.log(H)
    logr = np.log(radii)
    deriv = (logH[2:] - logH[:-2]) / (logr[2:] - logr[:-2]) / radii[1:-1]
    dev = np.abs(deriv - 2.0 * N[1:-1] / radii[1:-1])
    worst = float(dev.max())
    return DoublingReport(max_deviation=worst, bound=float(bound),
                          ok=worst <= bound)


# ---------------------------------------------------------------------------
# local Pohozaev identity


def pohozaev_residual(u, field, f, r, n_ang=256, quad_order=24):
    """Absolute defect of the local Pohozaev identity on the ball B_r.

    With Z = A(x)x/mu(x) (whose normal component on dB_r is exactly r)
    and P_i = A grad u_i, exact solutions of -div(A grad u_i) = f_i(x, u)
    satisfy

        r oint <A grad u, grad u>
          = 2 oint <A grad u, nu><Z, grad u>
            + int [ div Z <A grad u, grad u> + (Z . dA)[grad u, grad u]
                    - 2 (DZ)[A grad u, grad u] ]
            + 2 int <f(x,u), <Z, grad u>>,

    summed over components; the returned value is |left - right|, which
    vanishes at continuum rate under grid refinement for discrete
    solutions and is O(1) otherwise."""
    m = field.dim
    r = float(r)
    if r <= 0.0:
        raise DomainError(f"need a positive radius, got {r}")
    fields = _as_fields(u, m)
    dirs, ang_w = _angular_rule(m, n_ang)

    def Z_at(pts):
        out = np.empty_like(pts)
        for idx, p in enumerate(pts):
            M = field.matrix(p)
            out[idx] = M @ p / mu(field, p)
        return out

    def dZ_at(pts):
        """DZ[i, k] = d_i Z_k by central differences."""
        out = np.empty(pts.shape + (m,))
        for k in range(m):
            e = np.zeros(m)
            e[k] = 1.0
            h = 1e-6 * (1.0 + np.linalg.norm(pts, axis=1))
            out[:, k, :] = (Z_at(pts + h[:, None] * e)
                            - Z_at(pts - h[:, None] * e)) / (2.0 * h[:, None])
        return out

    def density(pts):
        mats = _eval_matrices(field, pts)
        vals = np.stack([fld(pts) for fld in fields])
        grads = np.stack([fld.grad(pts) for fld in fields])
        Z = Z_at(pts)
        dZ = dZ_at(pts)
        divZ = np.einsum("nkk->n", dZ)
        dA = np.stack([_partials_A(field, p) for p in pts])
        body = np.zeros(len(pts))
        for comp in range(len(fields)):
            G = grads[comp]
            P = np.einsum("nij,nj->ni", mats, G)
            Q = np.einsum("ni,ni->n", P, G)
            ZdA = np.einsum("nk,nkij,ni,nj->n", Z, dA, G, G)
            DZterm = np.einsum("nik,ni,nk->n", dZ, P, G)
            body += divZ * Q + ZdA - 2.0 * DZterm
        if f is not None:
            reac = np.asarray(f(pts, vals), dtype=float)
            proj = np.einsum("nk,cnk->cn", Z, grads)
            body += 2.0 * np.einsum("cn,cn->n", reac, proj)
        return body

    # boundary terms
    bd_pts = r * dirs
    mats = _eval_matrices(field, bd_pts)
    vals = np.stack([fld(bd_pts) for fld in fields])
    grads = np.stack([fld.grad(bd_pts) for fld in fields])
    Zb = Z_at(bd_pts)
    left = 0.0
    flux = 0.0
    for comp in range(len(fields)):
        G = grads[comp]
        P = np.einsum("nij,nj->ni", mats, G)
        left += float(ang_w @ np.einsum("ni,ni->n", P, G))
        flux += float(ang_w @ (np.einsum("ni,ni->n", P, dirs)
                               * np.einsum("ni,ni->n", Zb, G)))
    surf = r ** (m - 1)
    left *= r * surf
    flux *= surf
    del vals

    gl_nodes, gl_wts = np.polynomial.legendre.leggauss(quad_order)
    mid, half = 0.5 * r, 0.5 * r
    bulk = 0.0
    for s_node, s_w in zip(gl_nodes, gl_wts):
        s = mid + half * s_node
        shell = density(s * dirs)
        bulk += half * s_w * s ** (m - 1) * float(ang_w @ shell)
    right = 2.0 * flux + bulk
    return abs(left - right)


# ---------------------------------------------------------------------------
# latitude chart pullback


def latitude_chart(mesh, u, theta_center, psi_halfwidth=1.2):
    """Pull nodal profiles on a latitude mesh into the 2-D chart obtained
    by reducing the warped product along its rotational symmetry.

    Chart coordinates are (colatitude, meridian angle); the reduced
    Dirichlet form has coefficient A(t, psi) = diag(w(t)^2 sin psi,
    sin psi) with w the warp profile, and the critical equation becomes
    -div(A grad u_i) = w^2 sin psi (u_i^{2*-1} - kappa S u_i) with the
    mesh's curvature field S.  Returns (field, fields, reaction, center):
    the CoefficientField with ellipticity and derivative bounds measured
    over the chart box theta_center +- psi_halfwidth, cubic-spline chart
    fields (constant in the angle), the reaction evaluator, and the chart
    center on the equatorial circle.
    """
    if mesh.kind != "latitude":
        raise DomainError("chart pullback needs a latitude mesh")
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape[1] != mesh.n_nodes:
        raise ShapeError(
            f"profiles of shape {u.shape} do not match the mesh "
            f"({mesh.n_nodes} nodes)")
    theta = mesh.theta
    warp = mesh.warp if mesh.warp is not None else np.sin(theta)
    w_spl = interp.CubicSpline(theta, warp)
    s_spl = interp.CubicSpline(theta, mesh.S)
    splines = [interp.CubicSpline(theta, comp) for comp in u]
    m = mesh.dim
    two_star = 2.0 * m / (m - 2.0)
    kappa = mesh.kappa

    def A(x):
        t, psi = float(x[0]), float(x[1])
        s = math.sin(psi)
        return np.array([[float(w_spl(t)) ** 2 * s, 0.0], [0.0, s]])

    half = float(psi_halfwidth)
    t_lo = max(theta[0], theta_center - half)
    t_hi = min(theta[-1], theta_center + half)
    t_samples = np.linspace(t_lo, t_hi, 41)
    psi_samples = np.linspace(0.5 * math.pi - half, 0.5 * math.pi + half, 41)
    w_vals = w_spl(t_samples)
    sin_vals = np.sin(psi_samples)
    eigs_lo = np.minimum.outer(w_vals ** 2, np.ones_like(sin_vals)) \
        * sin_vals[None, :]
    eigs_hi = np.maximum.outer(w_vals ** 2, np.ones_like(sin_vals)) \
        * sin_vals[None, :]
    theta_ell = 0.9 * float(eigs_lo.min())
    Theta_ell = 1.1 * float(eigs_hi.max())
    da = 0.0
    for t in t_samples[::4]:
        for psi in psi_samples[::4]:
            probe = CoefficientField(dim=2, A=A, theta=theta_ell,
                                     Theta=Theta_ell, da_bound=0.0)
            dA = _partials_A(probe, np.array([t, psi]))
            da = max(da, max(float(np.linalg.norm(dA[k], 2))
                             for k in range(2)))
    field = CoefficientField(dim=2, A=A, theta=theta_ell, Theta=Theta_ell,
                             da_bound=1.1 * da)

    def make_field(spl):
        def chart_fn(pts):
            return spl(np.asarray(pts, dtype=float)[:, 0])
        return chart_fn

    fields = tuple(make_field(spl) for spl in splines)

    def reaction(pts, vals):
        pts = np.asarray(pts, dtype=float)
        weight = w_spl(pts[:, 0]) ** 2 * np.sin(pts[:, 1])
        s_here = s_spl(pts[:, 0])
        out = np.empty_like(vals)
        for i in range(vals.shape[0]):
            v = vals[i]
            out[i] = weight * (np.abs(v) ** (two_star - 2.0) * v
                               - kappa * s_here * v)
        return out

    center = np.array([float(theta_center), 0.5 * math.pi])
    return field, fields, reaction, center


# ---------------------------------------------------------------------------
# exponential decay verification


@dataclass(frozen=True)
class DecayReport:
    """Decay verification over a sweep of zeroth-order coefficients C.

    Part 1 solves div(A grad u) = C u on the ball of radius 2R with unit
    boundary values and fits sup_{B_R} u <= c1 exp(-c2 R sqrt(C)); part 2
    solves div(A grad u) = C u^gamma - delta and fits the smallest c with
    C (sup_{B_R} u)^gamma <= c/(R + R^2) sup_{B_2R} u + delta across the
    sweep.  fit_rel_dev is the worst relative deviation of the measured
    log-sups from the part-1 linear fit."""
    C_values: np.ndarray
    R: float
    delta: float
    sup_linear: np.ndarray
    c1: float
    c2: float
    fit_rel_dev: float
    sup_gamma: dict
    c_fit: dict
    h: float


def _decay_solve_1d(field, C, R, n, gamma, delta):
    """P1 finite elements for -(a u')' + C u^gamma = delta on [-2R, 2R]
    with u(+-2R) = 1; returns the nodal solution and the grid."""
    x = np.linspace(-2.0 * R, 2.0 * R, n)
    h = x[1] - x[0]
    mids = 0.5 * (x[:-1] + x[1:])
    a_mid = np.array([float(field.matrix(np.array([t]))[0, 0])
                      for t in mids])
    n_int = n - 2
    main_k = (a_mid[:-1] + a_mid[1:]) / h
    lower = -a_mid[1:-1] / h
    mass = np.full(n_int, h)

    def operator(u_int):
        full = np.empty(n)
        full[0] = full[-1] = 1.0
        full[1:-1] = u_int
        flux = a_mid * np.diff(full) / h
        return -(flux[1:] - flux[:-1])

    rhs_bc = np.zeros(n_int)
    rhs_bc[0] = a_mid[0] / h
    rhs_bc[-1] = a_mid[-1] / h

    def solve_linear(c_coeff, source):
        K = sp.diags([lower, main_k + c_coeff * mass, lower],
                     [-1, 0, 1], format="csc")
        return spla.spsolve(K, source * mass + rhs_bc)

    if gamma == 1.0:
        u_int = solve_linear(C, delta)
    else:
        u_int = solve_linear(C, delta)
        for _ in range(60):
            residual = (operator(u_int) + C * mass * u_int ** gamma
                        - delta * mass - rhs_bc)
            jac = sp.diags([lower,
                            main_k + gamma * C * mass
                            * np.abs(u_int) ** (gamma - 1.0),
                            lower], [-1, 0, 1], format="csc")
            step = spla.spsolve(jac, residual)
            u_int = u_int - step
            if float(np.abs(step).max()) <= 1e-13:
                break
        else:
            raise ConvergenceError("decay solve did not converge")
    full = np.empty(n)
    full[0] = full[-1] = 1.0
    full[1:-1] = u_int
    return full, x


def _disk_system(field, R, n):
    """Assemble the C-independent part of the conservative 5-point scheme
    for -div(A grad u) on the disk of radius 2R (diagonal A), with unit
    Dirichlet values on the grid collar outside the disk.  Returns the
    stiffness, the boundary contribution, the inner-ball node mask, and
    the unknown count."""
    axis = np.linspace(-2.0 * R, 2.0 * R, n)
    h = axis[1] - axis[0]
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    inside = X ** 2 + Y ** 2 < (2.0 * R) ** 2
    index = -np.ones((n, n), dtype=int)
    unknowns = np.argwhere(inside)
    index[inside] = np.arange(len(unknowns))

    def a_diag(xp, yp):
        M = field.matrix(np.array([xp, yp]))
        if abs(M[0, 1]) > 1e-12 * max(abs(M[0, 0]), abs(M[1, 1])):
            raise DomainError(
                "the planar decay solver needs a diagonal coefficient")
        return M[0, 0], M[1, 1]

    rows, cols, data = [], [], []
    rhs_bc = np.zeros(len(unknowns))
    for row, (i, j) in enumerate(unknowns):
        diag = 0.0
        for di, dj, comp in ((1, 0, 0), (-1, 0, 0), (0, 1, 1), (0, -1, 1)):
            xm = axis[i] + 0.5 * di * h
            ym = axis[j] + 0.5 * dj * h
            a_here = a_diag(xm, ym)[comp] / h ** 2
            diag += a_here
            ni, nj = i + di, j + dj
            if 0 <= ni < n and 0 <= nj < n and inside[ni, nj]:
                rows.append(row)
                cols.append(index[ni, nj])
                data.append(-a_here)
            else:
                rhs_bc[row] += a_here
        rows.append(row)
        cols.append(row)
        data.append(diag)
    K = sp.csc_matrix((data, (rows, cols)),
                      shape=(len(unknowns), len(unknowns)))
    inner = (X ** 2 + Y ** 2)[inside] <= R ** 2
    return K, rhs_bc, inner


def _disk_solve(system, C, gamma, delta, R):
    """Solve the assembled disk problem with zeroth-order term C u^gamma
    (Newton for gamma > 1) and return sup over the inner ball of radius R
    (the collar value 1 dominates the outer ball)."""
    K, rhs_bc, inner = system
    n_unk = K.shape[0]
    eye = sp.identity(n_unk, format="csc")
    u = spla.spsolve(K + C * eye, np.full(n_unk, delta) + rhs_bc)
    if gamma != 1.0:
        for _ in range(60):
            residual = K @ u + C * u ** gamma - delta - rhs_bc
            jac = K + sp.diags(gamma * C * np.abs(u) ** (gamma - 1.0),
                               format="csc")
            step = spla.spsolve(jac, residual)
            u = u - step
            if float(np.abs(step).max()) <= 1e-13:
                break
        else:
            raise ConvergenceError("decay solve did not converge")
    return float(u[inner].max())


def decay_verify(m, C_values, R, field, gammas=(1.0, 2.0), delta=1e-3,
                 n=None):
    """Verify exponential interior decay for div(A grad u) = C u^gamma.

    For each C in the sweep (all >= 1) the linear problem (gamma = 1,
    delta = 0) is solved on the ball of radius 2R with unit boundary
    values and sup_{B_R} u recorded; regression of log sup against
    R sqrt(C) yields (c1, c2).  Each requested gamma is then solved with
    the delta source and the smallest constant c making
    C (sup_{B_R})^gamma <= c/(R + R^2) + delta over the sweep is fitted
    (unit outer sup by the maximum principle).  Grids too coarse for the
    boundary layer (max C * h^2 > 0.1) raise ResolutionError."""
    C_values = np.atleast_1d(np.asarray(C_values, dtype=float))
    if np.any(C_values < 1.0):
        raise DomainError("the decay sweep needs coefficients C >= 1")
    if len(C_values) < 2:
        raise InsufficientDataError("the decay fit needs at least two "
                                    "sweep values")
    R = float(R)
    if R <= 0.0:
        raise DomainError(f"need a positive radius, got {R}")
    if m == 1:
        n = 4097 if n is None else int(n)
    elif m == 2:
        n = 257 if n is None else int(n)
    else:
        raise DomainError("decay solves support one- and two-dimensional "
                          "balls")
    h = 4.0 * R / (n - 1)
    if float(C_values.max()) * h ** 2 > 0.1:
        raise ResolutionError(
            f"grid spacing {h:.3g} cannot resolve the boundary layer at "
            f"C = {C_values.max():g}")

    disk = _disk_system(field, R, n) if m == 2 else None

    def solve(C, gamma, src):
        if m == 1:
            u, x = _decay_solve_1d(field, C, R, n, gamma, src)
            inner = np.abs(x) <= R
            return float(u[inner].max())
        return _disk_solve(disk, C, gamma, src, R)

    sup_linear = np.array([solve(C, 1.0, 0.0) for C in C_values])
    predictor = R * np.sqrt(C_values)
    slope, intercept = np.polyfit(predictor, np.log(sup_linear), 1)
    c2 = -float(slope)
    c1 = math.exp(float(intercept))
    fitted = intercept + slope * predictor
    fit_rel_dev = float(np.max(np.abs(fitted - np.log(sup_linear))
                               / np.abs(np.log(sup_linear))))

    sup_gamma = {}
    c_fit = {}
    for gamma in gammas:
        gamma = float(gamma)
        if gamma < 1.0:
            raise DomainError(f"need gamma >= 1, got {gamma}")
        sups = np.array([solve(C, gamma, delta) for C in C_values])
        sup_gamma[gamma] = sups
        lhs = C_values * sups ** gamma
        c_fit[gamma] = float(np.max((lhs - delta) * (R + R ** 2)).clip(0.0))
    return DecayReport(C_values=C_values, R=R, delta=float(delta),
                       sup_linear=sup_linear, c1=c1, c2=c2,
                       fit_rel_dev=fit_rel_dev, sup_gamma=sup_gamma,
                       c_fit=c_fit, h=h)


def comparison_supersolution(field, C, n_samples=64, radius=1.0):
    """Worst sampled value of div(A grad z) - C z for the comparison
    function z(x) = sum_i cosh(sqrt(C/L) x_i) with L = max{1, (a0 m +
    Theta)^2}: nonpositive (to quadrature/round-off) whenever the field
    honors its declared bounds, certifying z as a supersolution."""
    m = field.dim
    if C < 1.0:
        raise DomainError(f"the comparison function needs C >= 1, got {C}")
    L = max(1.0, (field.da_bound * m + field.Theta) ** 2)
    k = math.sqrt(C / L)

    def grad_z(x):
        return k * np.sinh(k * x)

    def z(x):
        return float(np.cosh(k * x).sum())

    rng = np.random.default_rng(0)
    pts = rng.standard_normal((n_samples, m))
    pts *= radius * rng.random((n_samples, 1)) ** (1.0 / m) \
        / np.linalg.norm(pts, axis=1, keepdims=True)
    worst = -math.inf
    for x in pts:
        h = 1e-6 * (1.0 + float(np.linalg.norm(x)))
        div = 0.0
        for kk in range(m):
            e = np.zeros(m)
            e[kk] = h
            plus = field.matrix(x + e) @ grad_z(x + e)
            minus = field.matrix(x - e) @ grad_z(x - e)
            div += (plus[kk] - minus[kk]) / (2.0 * h)
        worst = max(worst, div - C * z(x))
    return worst

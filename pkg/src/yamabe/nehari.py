"""Energy, natural-constraint projection, and least-energy minimization for
competitive critical systems on discretized closed manifolds.

The system couples ell components through the functional

    J(u) = 1/2 sum_i ||u_i||_g^2 - 1/2* sum_i int |u_i|^{2*}
           - sum_{i<j} lambda_ij int |u_j|^{alpha_ij} |u_i|^{beta_ij}

with lambda_ij = lambda_ji < 0, alpha_ij = beta_ji, alpha_ij + beta_ij = 2*.
Fully nontrivial critical points lie on the natural constraint set where
every component satisfies d_i J(u)[u_i] = 0.  Scaling u -> (s_1 u_1, ...,
s_ell u_ell) restricted to that set gives the fibering map

    J_u(s) = sum_i a_i s_i^2 / 2 - sum_i b_i s_i^{2*} / 2*
             - sum_{i<j} lambda_ij e_ij s_j^{alpha_ij} s_i^{beta_ij}

whose unique positive maximum point s_u (when it exists) defines the
projection onto the constraint set, with stationarity

    s_i d/ds_i J_u(s) = a_i s_i^2 - b_i s_i^{2*}
                        - sum_j d_ij s_j^{alpha_ij} s_i^{beta_ij} = 0,
    d_ij = lambda_ij beta_ij e_ij <= 0.

Minimizing Psi(u) = J_u(s_u) over the product of unit spheres of ||.||_g
yields least-energy fully nontrivial solutions.  On the constraint set the
energy collapses to J = (1/m) sum_i ||u_i||_g^2 exactly, which doubles as a
global consistency check.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, NonProjectableError, ShapeError

__all__ = [
    "CouplingSpec",
    "EnergyBreakdown",
    "SolveResult",
    "BlowupReport",
    "energy_terms",
    "energy",
    "scaled_energy",
    "nehari_residual",
    "gradient",
    "nehari_project",
    "project_breakdown",
    "minimize",
    "blowup_risk",
]


@dataclass(frozen=True)
class CouplingSpec:
    """Exponents and coupling strengths of an ell-component critical system
    in dimension m.

    lam, alpha, beta are (ell, ell) with unused diagonals.  Off the diagonal
    the entries must satisfy lam_ij = lam_ji <= 0, alpha_ij = beta_ji,
    alpha_ij + beta_ij = 2* = 2m/(m-2), and alpha_ij, beta_ij > 1.
    """
    m: int
    ell: int
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.m < 3:
            raise DomainError(f"need dimension m >= 3, got {self.m}")
        if self.ell < 1:
            raise DomainError(f"need ell >= 1, got {self.ell}")
        for name in ("lam", "alpha", "beta"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.ell, self.ell):
                raise ShapeError(f"{name} must be ({self.ell}, {self.ell}), "
                                 f"got {arr.shape}")
            object.__setattr__(self, name, arr)
        if not np.allclose(self.lam, self.lam.T, atol=0, rtol=1e-13):
            raise DomainError("coupling matrix must be symmetric")
        off = ~np.eye(self.ell, dtype=bool)
        if np.any(self.lam[off] > 0):
            raise DomainError("couplings must be competitive "
                              "(lambda_ij <= 0)")
        if self.ell > 1:
            if not np.allclose(self.alpha[off], self.beta.T[off], rtol=1e-13):
                raise DomainError("exponents must satisfy "
                                  "alpha_ij = beta_ji")
            pair = self.alpha[off] + self.beta[off]
            if not np.allclose(pair, self.two_star, rtol=1e-13):
                raise DomainError("exponent pairs must sum to the critical "
                                  f"exponent {self.two_star}")
            if np.any(self.alpha[off] <= 1) or np.any(self.beta[off] <= 1):
                raise DomainError("exponents must exceed 1")

    @property
    def two_star(self):
        return 2.0 * self.m / (self.m - 2.0)

    @property
    def is_symmetric(self):
        """True in the symmetric case alpha = beta = 2*/2 with one coupling
        value shared by every pair."""
        if self.ell == 1:
            return True
        off = ~np.eye(self.ell, dtype=bool)
        half = self.two_star / 2.0
        return (np.allclose(self.alpha[off], half, rtol=1e-13)
                and np.allclose(self.lam[off], self.lam[off][0], rtol=1e-13))

    @classmethod
    def symmetric(cls, m, ell, lam_value):
        """The symmetric system: every pair couples with strength lam_value
        and exponents alpha = beta = 2*/2."""
        if lam_value > 0:
            raise DomainError("coupling value must be <= 0")
        off = ~np.eye(ell, dtype=bool)
        lam = np.zeros((ell, ell))
        lam[off] = lam_value
        half = float(m) / (m - 2.0)
        expo = np.where(off, half, 0.0)
        return cls(m=m, ell=ell, lam=lam, alpha=expo, beta=expo.copy())

    @classmethod
    def single(cls, m):
        z = np.zeros((1, 1))
        return cls(m=m, ell=1, lam=z, alpha=z.copy(), beta=z.copy())


@dataclass
class EnergyBreakdown:
    """The scalars that determine the energy of every rescaling of a state:
    a_i = ||u_i||_g^2, b_i = int |u_i|^{2*}, e_ij = int |u_j|^{alpha_ij}
    |u_i|^{beta_ij} (symmetric), and d_ij = lambda_ij beta_ij e_ij <= 0."""
    a: np.ndarray
    b: np.ndarray
    e: np.ndarray
    spec: CouplingSpec

    @property
    def d(self):
        return self.spec.lam * self.spec.beta * self.e


def _check_fields(u, spec, forms):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape != (spec.ell, forms.mesh.n_nodes):
        raise ShapeError(f"fields must be ({spec.ell}, {forms.mesh.n_nodes}),"
                         f" got {u.shape}")
    if spec.m != forms.mesh.dim:
        raise DomainError(f"coupling is for dimension {spec.m}, mesh has "
                          f"{forms.mesh.dim}")
    return u


def energy_terms(u, spec, forms):
    """Evaluate the breakdown (a, b, e) of a state."""
    u = _check_fields(u, spec, forms)
    ell = spec.ell
    two_star = spec.two_star
    a = np.array([forms.norm_g_sq(u[i]) for i in range(ell)])
    b = np.array([forms.integrate_power(u[i], two_star) for i in range(ell)])
    e = np.zeros((ell, ell))
    for i in range(ell):
        for j in range(i):
            if spec.lam[i, j] != 0.0:
                e[i, j] = forms.integrate_pair(u[j], u[i],
                                               spec.alpha[i, j],
                                               spec.beta[i, j])
                e[j, i] = e[i, j]
    return EnergyBreakdown(a=a, b=b, e=e, spec=spec)


def scaled_energy(bd, s=None):
    """J_u(s), the energy of the componentwise rescaling s * u; s = 1 gives
    the energy of u itself."""
    spec = bd.spec
    ell = spec.ell
    s = np.ones(ell) if s is None else np.asarray(s, dtype=float)
    val = 0.5 * np.dot(bd.a, s ** 2)
    val -= np.dot(bd.b, s ** spec.two_star) / spec.two_star
    for i in range(ell):
        for j in range(i):
            if bd.e[i, j] != 0.0:
                mono = s[j] ** spec.alpha[i, j] * s[i] ** spec.beta[i, j]
                val -= spec.lam[i, j] * bd.e[i, j] * mono
    return float(val)


def nehari_residual(bd, s=None):
    """Stationarity defect r_i = a_i s_i^2 - b_i s_i^{2*}
    - sum_j d_ij s_j^{alpha_ij} s_i^{beta_ij}; zero on the constraint set."""
    spec = bd.spec
    ell = spec.ell
    s = np.ones(ell) if s is None else np.asarray(s, dtype=float)
    r = bd.a * s ** 2 - bd.b * s ** spec.two_star
    d = bd.d
    for i in range(ell):
        for j in range(ell):
            if j != i and d[i, j] != 0.0:
                r[i] -= d[i, j] * s[j] ** spec.alpha[i, j] \
                    * s[i] ** spec.beta[i, j]
    return r


def energy(u, spec, forms):
    """The functional J(u)."""
    return scaled_energy(energy_terms(u, spec, forms))


def gradient(u, spec, forms):
    """Riesz representatives of the partial derivatives: component i solves
    <g_i, v>_g = d_i J(u)[v].  The coupling term uses the convention
    |t|^{beta-2} t = 0 at t = 0, which keeps it continuous for beta > 1."""
    u = _check_fields(u, spec, forms)
    ell = spec.ell
    two_star = spec.two_star
    out = np.empty_like(u)
    for i in range(ell):
        covec = forms.inner_matrix @ u[i]
        covec -= forms.grad_power(u[i], two_star) / two_star
        for j in range(ell):
            if j != i and spec.lam[i, j] != 0.0:
                covec -= spec.lam[i, j] * forms.grad_pair(
                    u[j], u[i], spec.alpha[i, j], spec.beta[i, j])
        out[i] = forms.solve_inner(covec)
    return out


# ---------------------------------------------------------------------------
# projection onto the natural constraint set

def _newton_scaling(bd, tol, max_iter=80):
    spec = bd.spec
    ell = spec.ell
    a, b, d = bd.a, bd.b, bd.d
    alpha, beta = spec.alpha, spec.beta
    two_star = spec.two_star

    t = np.log(a / b) / (two_star - 2.0)

    def residual(t):
        s2 = np.exp(2.0 * t)
        s2s = np.exp(two_star * t)
        r = a * s2 - b * s2s
        for i in range(ell):
            for j in range(ell):
                if j != i and d[i, j] != 0.0:
                    r[i] -= d[i, j] * math.exp(alpha[i, j] * t[j]
                                               + beta[i, j] * t[i])
        return r

    def res_scales(t):
        # per-component term sizes, so a partially collapsed iterate
        # (s_i -> 0, residual -> 0 in absolute size but O(1) against its
        # own terms) never passes; capped by the leading quadratic scale
        # so every accepted root also meets |r_i| <= tol * max_i(a_i s_i^2)
        sc = np.maximum(a * np.exp(2.0 * t), b * np.exp(two_star * t))
        for i in range(ell):
            for j in range(ell):
                if j != i and d[i, j] != 0.0:
                    sc[i] = max(sc[i], abs(d[i, j]) * math.exp(
                        alpha[i, j] * t[j] + beta[i, j] * t[i]))
        sc = np.minimum(sc, np.max(a * np.exp(2.0 * t)))
        return np.maximum(sc, 1e-300)

    r = residual(t)
    for _ in range(max_iter):
        if np.max(np.abs(t)) > 60.0:
            return None  # scaling diverging: no physical projection
        scales = res_scales(t)
        if np.all(np.abs(r) <= tol * scales):
            return np.exp(t), float(np.max(np.abs(r) / scales))
        jac = np.zeros((ell, ell))
        for i in range(ell):
            jac[i, i] = 2.0 * a[i] * math.exp(2.0 * t[i]) \
                - two_star * b[i] * math.exp(two_star * t[i])
            for j in range(ell):
                if j != i and d[i, j] != 0.0:
                    mono = d[i, j] * math.exp(alpha[i, j] * t[j]
                                              + beta[i, j] * t[i])
                    jac[i, i] -= beta[i, j] * mono
                    jac[i, j] -= alpha[i, j] * mono
        try:
            dt = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            return None
        cap = np.max(np.abs(dt))
        if cap > 2.0:
            dt *= 2.0 / cap
        step = 1.0
        norm0 = np.max(np.abs(r))
        for _ in range(40):
            r_new = residual(t + step * dt)
            if np.max(np.abs(r_new)) < norm0 * (1.0 - 1e-4 * step):
                t = t + step * dt
                r = r_new
                break
            step *= 0.5
        else:
            return None
    scales = res_scales(t)
    if np.all(np.abs(r) <= tol * scales):
        return np.exp(t), float(np.max(np.abs(r) / scales))
    return None


def _sweep_scaling(bd, tol, max_sweeps=200):
    spec = bd.spec
    ell = spec.ell
    a, b, d = bd.a, bd.b, bd.d
    alpha, beta = spec.alpha, spec.beta
    two_star = spec.two_star
    t = np.log(a / b) / (two_star - 2.0)

    def resid_i(i, ti):
        try:
            val = a[i] * math.exp(2.0 * ti) - b[i] * math.exp(two_star * ti)
            for j in range(ell):
                if j != i and d[i, j] != 0.0:
                    val -= d[i, j] * math.exp(alpha[i, j] * t[j]
                                              + beta[i, j] * ti)
            return val
        except OverflowError:
            # the critical power has the largest exponent, so far enough
            # out the residual is dominated by -b e^{2* t}
            return -math.inf

    for _ in range(max_sweeps):
        if np.max(np.abs(t)) > 60.0:
            return None  # scaling diverging sweep to sweep: no projection
        for i in range(ell):
            lo, hi = t[i] - 1.0, t[i] + 1.0
            for _ in range(200):
                if resid_i(i, lo) > 0:
                    break
                lo -= 1.0
            else:
                return None
            for _ in range(200):
                if resid_i(i, hi) < 0:
                    break
                hi += 1.0
            else:
                return None
            t[i] = brentq(lambda x: resid_i(i, x), lo, hi, xtol=1e-15)
        r = np.array([resid_i(i, t[i]) for i in range(ell)])
        scales = np.maximum(a * np.exp(2.0 * t), b * np.exp(two_star * t))
        for i in range(ell):
            for j in range(ell):
                if j != i and d[i, j] != 0.0:
                    scales[i] = max(scales[i], abs(d[i, j]) * math.exp(
                        alpha[i, j] * t[j] + beta[i, j] * t[i]))
        scales = np.minimum(scales, np.max(a * np.exp(2.0 * t)))
        scales = np.maximum(scales, 1e-300)
        if np.all(np.abs(r) <= tol * scales):
            return np.exp(t), float(np.max(np.abs(r) / scales))
    return None


def project_breakdown(bd, tol=1e-12):
    """Scaling s > 0 with vanishing stationarity defect, from the breakdown
    alone.  Damped Newton in log s from the decoupled closed form
    s_i = (a_i / b_i)^{1/(2*-2)}, with a coordinate-sweep fallback."""
    if np.any(bd.b < 1e-12) or np.any(bd.a <= 0.0):
        raise NonProjectableError(
            "a component is degenerate (vanishing critical norm)")
    res = _newton_scaling(bd, tol)
    if res is None:
        res = _sweep_scaling(bd, tol)
    if res is None:
        raise NonProjectableError(
            "no positive stationary scaling found; the state lies outside "
            "the projectable region")
    return res[0]


def nehari_project(u, spec, forms, tol=1e-12):
    """Componentwise scaling s placing s * u on the natural constraint set."""
    return project_breakdown(energy_terms(u, spec, forms), tol=tol)


# ---------------------------------------------------------------------------
# minimization over the product of unit spheres

@dataclass
class SolveResult:
    """Outcome of a constrained minimization: the fields s * w on the
    constraint set, their scalings and norms, the final energy, and the
    iteration trace rows (iteration, energy, gradient norm, stationarity
    residual, per-component squared norms)."""
    u: np.ndarray
    s: np.ndarray
    energy: float
    grad_norm: float
    nehari_residual: float
    norms_sq: np.ndarray
    iterations: int
    converged: bool
    diagnostic: str
    trace: list = field(default_factory=list)
    grad_tol: float = 0.0


def minimize(u0, spec, forms, tol=None, max_iter=2000, record_trace=True,
             tol_abs=None, symmetrize=None):
    """Minimize Psi(u) = J(s_u u) over the product of unit ||.||_g spheres.

    Two phases share one iterate.  The globalization phase runs projected
    gradient descent (gradients preconditioned by the natural inner
    product) with Armijo backtracking on Psi.  Near a minimizer the Armijo
    comparisons sink below the floating-point noise of the energy, so once
    the line search stops making progress the run switches to a damped
    preconditioned fixed-point polish on the stationarity equation
    A u_i = P_i(u) itself, which needs no energy comparisons and drives the
    gradient norm down to the requested tolerance.

    Components are replaced by their absolute values after every step
    (energy never increases under that operation and limits of nonnegative
    minimizers are the physically meaningful states).  Stops when the
    tangential gradient norm falls below tol (default 1e-7 times its
    initial value) and the stationarity residual is below 1e-10 of its
    scale; tol_abs instead fixes the gradient threshold directly, which
    warm-started continuation steps need (their initial gradient is already
    small, so a relative tolerance would be unreachable).  A
    non-projectable iterate inside a line search just shrinks the step; if
    every step fails the run ends with a stall diagnostic.

    symmetrize, when given, is applied to the component matrix after every
    update.  Pass the averaging projection onto the fixed subspace of an
    energy-preserving symmetry to compute equivariant minimizers (genuine
    critical points, by symmetric criticality); this pins the iteration to
    a symmetry-stable branch that roundoff perturbations would otherwise
    push off.
    """
    u0 = _check_fields(u0, spec, forms)
    ell = spec.ell
    w = np.abs(u0)
    if symmetrize is not None:
        w = np.abs(np.asarray(symmetrize(w), dtype=float))
    norms = np.array([math.sqrt(forms.norm_g_sq(w[i])) for i in range(ell)])
    if np.any(norms <= 0.0):
        raise NonProjectableError("initial state has a vanishing component")
    w = w / norms[:, None]

    def project_state(wmat):
        bd = energy_terms(wmat, spec, forms)
        s = project_breakdown(bd)
        return bd, s

    def nonquadratic_covector(v, i):
        covec = forms.grad_power(v[i], spec.two_star) / spec.two_star
        for j in range(ell):
            if j != i and spec.lam[i, j] != 0.0:
                covec += spec.lam[i, j] * forms.grad_pair(
                    v[j], v[i], spec.alpha[i, j], spec.beta[i, j])
        return covec

    def tangential_gradient(w, s):
        v = s[:, None] * w
        h = np.empty_like(w)
        for i in range(ell):
            covec = forms.inner_matrix @ v[i] - nonquadratic_covector(v, i)
            g = forms.solve_inner(s[i] * covec)
            g -= forms.inner_g(g, w[i]) * w[i]
            h[i] = g
        return h

    bd, s = project_state(w)
    psi = scaled_energy(bd, s)

    tau = 1.0
    trace = []
    grad_norm = math.inf
    resid_rel = math.inf
    diagnostic = "max-iterations"
    converged = False
    it = 0

    def bookkeep(it):
        nonlocal grad_norm, resid_rel, tol_abs, converged
        r = nehari_residual(bd, s)
        scale = max(float(np.max(bd.a * s ** 2)), 1e-300)
        resid_rel = float(np.max(np.abs(r))) / scale
        h = tangential_gradient(w, s)
        grad_norm = math.sqrt(sum(forms.norm_g_sq(h[i]) for i in range(ell)))
        if record_trace:
            trace.append((it, psi, grad_norm, resid_rel,
                          tuple(bd.a * s ** 2)))
        if tol_abs is None:
            tol_abs = (1e-7 if tol is None else tol) * max(grad_norm, 1e-300)
        converged = grad_norm <= tol_abs and resid_rel <= 1e-10
        return h

    for it in range(max_iter):
        h = bookkeep(it)
        if converged:
            diagnostic = "converged"
            break
        accepted = False
        tau = min(2.0 * tau, 16.0)
        for _ in range(40):
            w_new = np.abs(w - tau * h)
            if symmetrize is not None:
                w_new = np.abs(np.asarray(symmetrize(w_new), dtype=float))
            try:
                nn = np.array([math.sqrt(forms.norm_g_sq(w_new[i]))
                               for i in range(ell)])
                if np.any(nn <= 1e-300):
                    raise NonProjectableError("collapsed component")
                w_new = w_new / nn[:, None]
                bd_new, s_new = project_state(w_new)
            except NonProjectableError:
                tau *= 0.5
                continue
            psi_new = scaled_energy(bd_new, s_new)
            if psi_new <= psi - 1e-4 * tau * grad_norm ** 2:
                w, bd, s, psi = w_new, bd_new, s_new, psi_new
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            break
    else:
        it = max_iter

    if not converged:
        # fixed-point polish: v <- (1-omega) v + omega A^{-1} P(v), with
        # re-projection; adapt omega on the stationarity defect
        omega = 1.0
        defect_prev = math.inf
        for extra in range(max_iter):
            it += 1
            v = s[:, None] * w
            v_new = np.empty_like(v)
            defect = 0.0
            for i in range(ell):
                picard = forms.solve_inner(nonquadratic_covector(v, i))
                defect += forms.norm_g_sq(v[i] - picard)
                v_new[i] = np.abs((1.0 - omega) * v[i] + omega * picard)
            defect = math.sqrt(defect)
            if defect > defect_prev * (1.0 + 1e-12) and omega > 0.05:
                omega *= 0.5
                continue
            defect_prev = defect
            if symmetrize is not None:
                v_new = np.abs(np.asarray(symmetrize(v_new), dtype=float))
            try:
                nn = np.array([math.sqrt(forms.norm_g_sq(v_new[i]))
                               for i in range(ell)])
                if np.any(nn <= 1e-300):
                    break
                w_try = v_new / nn[:, None]
                bd_try, s_try = project_state(w_try)
            except NonProjectableError:
                break
            w, bd, s = w_try, bd_try, s_try
            psi = scaled_energy(bd, s)
            bookkeep(it)
            if converged:
                diagnostic = "converged"
                break
            if defect <= 1e-15 * max(1.0, float(np.max(s))):
                break
        else:
            it = 2 * max_iter
        if not converged:
            diagnostic = "polish stall"

    v = s[:, None] * w
    return SolveResult(u=v, s=s, energy=psi, grad_norm=grad_norm,
                       nehari_residual=resid_rel, norms_sq=bd.a * s ** 2,
                       iterations=it, converged=converged,
                       diagnostic=diagnostic, trace=trace,
                       grad_tol=tol_abs if tol_abs is not None else 0.0)


# ---------------------------------------------------------------------------
# compactness margins

@dataclass
class BlowupReport:
    """Comparison of an energy level against every bubbling threshold
    c_Z + |Z| sigma_m^{m/2} / m over nonempty component subsets Z (c_Z is
    the least energy of the system with the components of Z removed; the
    full set has c_Z = 0).  margin > 0 for every row is the numerical form
    of the compactness criterion."""
    level: float
    rows: list
    margin: float
    risk: bool
    complete: bool


def blowup_risk(u_star, spec, forms, sub_levels=None):
    """Evaluate bubbling margins for a candidate least-energy state.

    sub_levels maps each tuple of RETAINED component indices to the least
    energy of that subsystem (computed by separate minimizations); the empty
    retained set is implied to have level 0.  Missing subsets leave the
    report incomplete rather than failing.
    """
    from .constants import constants as constants_table

    c_hat = energy(u_star, spec, forms)
    sigma = constants_table(spec.m).sigma_m
    bubble = sigma ** (spec.m / 2.0) / spec.m
    sub_levels = {} if sub_levels is None else {
        tuple(sorted(k)): v for k, v in sub_levels.items()}

    rows = []
    complete = True
    margins = []
    indices = range(spec.ell)
    for size in range(1, spec.ell + 1):
        for z in itertools.combinations(indices, size):
            kept = tuple(i for i in indices if i not in z)
            if not kept:
                c_z = 0.0
            elif kept in sub_levels:
                c_z = float(sub_levels[kept])
            else:
                rows.append((z, None, None, None))
                complete = False
                continue
            threshold = c_z + len(z) * bubble
            margin = threshold - c_hat
            rows.append((z, c_z, threshold, margin))
            margins.append(margin)
    margin = min(margins) if margins else math.inf
    return BlowupReport(level=c_hat, rows=rows, margin=margin,
                        risk=margin <= 0.0, complete=complete)

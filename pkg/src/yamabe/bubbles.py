"""Standard bubbles, truncated test profiles, and their small-delta scaling.

The bubble

    U_delta(x) = [m(m-2)]^{(m-2)/4} ( delta / (delta^2 + |x|^2) )^{(m-2)/2}

is the extremal of the Euclidean Sobolev quotient; its Dirichlet energy and
critical mass both equal sigma_m^{m/2}, independently of delta.  Gluing
arguments use the truncated profile chi(|x|) U_delta with a smooth cutoff chi
equal to 1 on [0, r/2] and 0 beyond r: truncation pays an energy premium of
order delta^{m-2}, which is the channel through which geometry enters the
energy expansion.  Two fits quantify this numerically:

  * moment_scaling fits the small-delta growth of the moments
    I_alpha(delta) = int (chi U_delta)^alpha, whose exponent is a piecewise
    function of gamma = (m-2) alpha / 2:
        gamma < m/2 : I ~ delta^gamma
        gamma = m/2 : I ~ delta^{m/2} |log delta|
        gamma > m/2 : I ~ delta^{m - gamma}
  * expansion_fit fits the deficit of the Sobolev quotient of the truncated
    profile above its optimal value, which scales like delta^{m-2}.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .constants import constants, radial_integral, sphere_volume
from .errors import DomainError, InsufficientDataError

__all__ = [
    "BubbleParams",
    "bubble_eval",
    "bubble_grad",
    "cutoff",
    "cutoff_grad",
    "truncated_eval",
    "moment_integral",
    "MomentFit",
    "moment_scaling",
    "truncated_quotient",
    "ExpansionFit",
    "expansion_fit",
]


@dataclass(frozen=True)
class BubbleParams:
    """Bubble of concentration delta in dimension m, truncated at radius r
    with the cutoff ramp starting at cutoff_inner (defaults to r/2)."""
    m: int
    delta: float
    r: float = 1.0
    cutoff_inner: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.m < 3:
            raise DomainError(f"bubbles need m >= 3, got {self.m}")
        if self.delta <= 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if self.r <= 0:
            raise DomainError(f"truncation radius must be positive, got {self.r}")
        if self.cutoff_inner is None:
            object.__setattr__(self, "cutoff_inner", 0.5 * self.r)
        if not 0 < self.cutoff_inner < self.r:
            raise DomainError("cutoff_inner must lie in (0, r)")


def bubble_eval(m, delta, radius):
    """U_delta at distance |x| = radius from the concentration point."""
    if delta <= 0:
        raise DomainError(f"delta must be positive, got {delta}")
    radius = np.asarray(radius, dtype=float)
    km = (m * (m - 2)) ** ((m - 2) / 4.0)
    return km * (delta / (delta * delta + radius * radius)) ** ((m - 2) / 2.0)


def bubble_grad(m, delta, radius):
    """Radial derivative of U_delta."""
    radius = np.asarray(radius, dtype=float)
    km = (m * (m - 2)) ** ((m - 2) / 4.0)
    return (-(m - 2) * km * delta ** ((m - 2) / 2.0) * radius
            * (delta * delta + radius * radius) ** (-m / 2.0))


def cutoff(p, radius):
    """Smooth ramp: 1 on [0, cutoff_inner], cos^2 taper to 0 at r."""
    radius = np.asarray(radius, dtype=float)
    a, b = p.cutoff_inner, p.r
    t = np.clip((radius - a) / (b - a), 0.0, 1.0)
    return np.cos(0.5 * math.pi * t) ** 2


def cutoff_grad(p, radius):
    radius = np.asarray(radius, dtype=float)
    a, b = p.cutoff_inner, p.r
    t = (radius - a) / (b - a)
    inside = (t > 0.0) & (t < 1.0)
    out = np.zeros_like(radius, dtype=float)
    tt = np.where(inside, t, 0.5)
    val = -0.5 * math.pi / (b - a) * np.sin(math.pi * tt)
    return np.where(inside, val, out)


def truncated_eval(p, radius):
    """Truncated profile chi(|x|) U_delta(|x|)."""
    return cutoff(p, radius) * bubble_eval(p.m, p.delta, radius)


def _truncated_grad(p, radius):
    return (cutoff_grad(p, radius) * bubble_eval(p.m, p.delta, radius)
            + cutoff(p, radius) * bubble_grad(p.m, p.delta, radius))


def _panel_hints(p):
    """Breakpoints resolving the concentration scale for adaptive panels."""
    pts = list(p.delta * np.geomspace(0.3, 100.0, 9))
    pts += [p.cutoff_inner, 0.5 * (p.cutoff_inner + p.r)]
    return [t for t in pts if 0 < t < p.r]


def moment_integral(p, alpha):
    """I_alpha(delta) = int_{R^m} (chi U_delta)^alpha."""
    if alpha < 1:
        raise DomainError(f"alpha must be >= 1, got {alpha}")

    def f(r):
        return float(truncated_eval(p, r)) ** alpha

    return radial_integral(f, p.m, rmax=p.r, points=_panel_hints(p))


def _theory_exponent(m, alpha):
    """Predicted growth exponent of I_alpha and whether a log factor rides
    along, from gamma = (m-2) alpha / 2 against m/2."""
    gamma = 0.5 * (m - 2) * alpha
    if gamma < m / 2:
        return gamma, False
    if gamma == m / 2:
        return gamma, True
    return m - gamma, False


def _reference_rate(m):
    """Exponent (and log flag) of the geometric correction scale R(delta):
    delta^{m-2} below dimension six, delta^4 log(1/delta) at six, delta^4
    above."""
    if m < 6:
        return float(m - 2), False
    if m == 6:
        return 4.0, True
    return 4.0, False


@dataclass
class MomentFit:
    m: int
    alpha: float
    gamma: float
    exponent: float          # fitted growth exponent of I_alpha
    with_log: bool           # True when the |log delta| model fit better
    theory_exponent: float
    theory_log: bool
    coefficient: float
    residual: float
    small_o_of_reference: bool   # I_alpha = o(R(delta))?
    deltas: np.ndarray
    values: np.ndarray


def _fit_power(deltas, values, with_log):
    """Least squares for log I = log c + e log delta (+ log|log delta|)."""
    x = np.log(deltas)
    y = np.log(values)
    if with_log:
        y = y - np.log(np.abs(np.log(deltas)))
    A = np.vstack([np.ones_like(x), x]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ coef
    rss = float(np.sum((y - fit) ** 2))
    return coef[1], math.exp(coef[0]), rss


def moment_scaling(m, alpha, deltas, r=1.0):
    """Fit the small-delta scaling of I_alpha and classify its regime.

    Fits log I against log delta with and without a |log delta| factor and
    keeps whichever explains the data better; the returned verdict
    small_o_of_reference states whether the fitted moment is negligible
    against the geometric correction scale R(delta) for this dimension.
    """
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    if len(deltas) < 3:
        raise InsufficientDataError("need at least 3 deltas for a scaling fit")
    if np.any(deltas <= 0):
        raise DomainError("deltas must be positive")
    if alpha < 1:
        raise DomainError(f"alpha must be >= 1, got {alpha}")

    vals = np.array([moment_integral(BubbleParams(m, d, r), alpha)
                     for d in deltas])
    e_plain, c_plain, r_plain = _fit_power(deltas, vals, with_log=False)
    e_log, c_log, r_log = _fit_power(deltas, vals, with_log=True)
    if r_log < r_plain:
        exponent, coefficient, residual, with_log = e_log, c_log, r_log, True
    else:
        exponent, coefficient, residual, with_log = e_plain, c_plain, r_plain, False

    gamma = 0.5 * (m - 2) * alpha
    t_exp, t_log = _theory_exponent(m, alpha)
    r_exp, r_log_flag = _reference_rate(m)
    if t_exp != r_exp:
        small_o = t_exp > r_exp
    else:
        # equal power: the verdict is decided by the log factors
        small_o = r_log_flag and not t_log
    return MomentFit(m=m, alpha=alpha, gamma=gamma, exponent=float(exponent),
                     with_log=with_log, theory_exponent=t_exp,
                     theory_log=t_log, coefficient=coefficient,
                     residual=residual, small_o_of_reference=small_o,
                     deltas=deltas, values=vals)


def truncated_quotient(p):
    """Sobolev quotient grad-norm^2 / |.|_{2*}^2 of the truncated profile."""
    m = p.m
    two_star = 2.0 * m / (m - 2)

    def grad_sq(r):
        g = float(_truncated_grad(p, r))
        return g * g

    def mass(r):
        return float(truncated_eval(p, r)) ** two_star

    pts = _panel_hints(p)
    energy = radial_integral(grad_sq, m, rmax=p.r, points=pts)
    lp = radial_integral(mass, m, rmax=p.r, points=pts)
    return energy / lp ** (2.0 / two_star)


@dataclass
class ExpansionFit:
    m: int
    exponent: float
    coefficient: float
    deficits: np.ndarray
    deltas: np.ndarray
    limit_value: float      # extrapolated quotient level at delta -> 0
    sigma_m: float


def expansion_fit(m, deltas, r=1.0):
    """Fit the energy-level deficit of the truncated profile.

    The mountain-pass level of a single profile u is
    (1/m) (quotient(u))^{m/2}; for the truncated bubble it exceeds the
    optimal level sigma_m^{m/2}/m by C delta^{m-2} (1 + o(1)), the same
    channel a geometric mass term would occupy on a curved background.
    Returns the fitted exponent and coefficient of the deficit.
    """
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    if len(deltas) < 3:
        raise InsufficientDataError("need at least 3 deltas for a scaling fit")
    if np.max(deltas) > 0.25 * r:
        warnings.warn("largest delta exceeds r/4; the leading-order fit "
                      "extrapolates outside its regime", stacklevel=2)
    tab = constants(m)
    best = tab.sigma_m ** (m / 2.0) / m
    levels = []
    for d in deltas:
        q = truncated_quotient(BubbleParams(m, d, r))
        levels.append(q ** (m / 2.0) / m)
    levels = np.asarray(levels)
    deficits = levels - best
    if np.any(deficits <= 0):
        raise InsufficientDataError(
            "deficit not positive at all deltas; decrease deltas")
    e, c, _ = _fit_power(deltas, deficits, with_log=False)
    return ExpansionFit(m=m, exponent=float(e), coefficient=float(c),
                        deficits=deficits, deltas=deltas,
                        limit_value=float(levels[-1]), sigma_m=tab.sigma_m)

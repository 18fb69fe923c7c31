"""Dimensional constants of the conformally invariant variational problem.

Everything downstream is normalized against a handful of dimension-dependent
quantities:

    omega_m   volume of the round unit m-sphere,
              omega_m = omega_{m-1} * int_0^pi sin^{m-1},  omega_0 = 2
    2*        critical Sobolev exponent 2m/(m-2)
    kappa_m   conformal coupling (m-2)/(4(m-1))
    sigma_m   best constant in the Euclidean Sobolev embedding written on the
              energy scale: sigma_m = m(m-2)/4 * omega_m^{2/m}.  The standard
              bubble U has grad-norm^2 = |U|_{2*}^{2*} = sigma_m^{m/2}.
    a_frak    boundary flux of the bubble's far field,
              (m-2) (m(m-2))^{(m-2)/4} omega_{m-1}
    b_frak    total mass int_{R^m} U^{2*-1}; integrating -Delta U = U^{2*-1}
              over R^m shows b_frak = a_frak, which we use as a cross-check
              on the quadrature rather than assuming it.
    c_bar     coefficient of the |W|^2 delta^4 channel in the energy expansion
              of a truncated bubble glued at a point of a non conformally
              flat manifold, defined for m >= 7.

All values are plain floats except 2* and kappa, which are exact rationals.
"""

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import integrate

from .errors import DomainError, IntegrabilityError

__all__ = [
    "ConstantsTable",
    "sphere_volume",
    "constants",
    "radial_integral",
    "round_sphere_constant",
    "weyl_channel_constant",
]


def _wallis(k):
    """int_0^pi sin^k(t) dt by the two-step recursion W_k = W_{k-2} (k-1)/k."""
    if k == 0:
        return math.pi
    if k == 1:
        return 2.0
    return _wallis(k - 2) * (k - 1) / k


def sphere_volume(m):
    """Volume of the round unit m-sphere via the recurrence in the measure
    factorization omega_m = omega_{m-1} * int_0^pi sin^{m-1}."""
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise DomainError(f"sphere dimension must be an integer >= 1, got {m}")
    omega = 2.0  # 0-sphere: two points
    for k in range(1, m + 1):
        omega *= _wallis(k - 1)
    return omega


def radial_integral(f, m, rmax=math.inf, rel_tol=1e-10, points=None):
    """Integral over R^m (or the ball of radius rmax) of a radial function.

    Computes omega_{m-1} * int_0^rmax f(r) r^{m-1} dr with adaptive
    Gauss-Kronrod panels.  Infinite tails are mapped to a finite interval by
    r = tan(t).  Raises IntegrabilityError when the estimated error exceeds
    rel_tol relative to the value (the usual symptom of a non-integrable
    tail or endpoint).

    points: optional interior breakpoints (radii) that the adaptive rule
    should honor, useful for sharply concentrated integrands.
    """
    if m < 1:
        raise DomainError(f"dimension must be >= 1, got {m}")
    if rmax <= 0:
        raise DomainError(f"rmax must be positive, got {rmax}")
    area = sphere_volume(m - 1)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if math.isinf(rmax):
            def g(t):
                r = math.tan(t)
                c = math.cos(t)
                return f(r) * r ** (m - 1) / (c * c)

            internal = None
            if points is not None:
                internal = [math.atan(p) for p in points if p > 0]
            val, err = integrate.quad(g, 0.0, math.pi / 2, limit=500,
                                      epsabs=1e-13, epsrel=1e-12,
                                      points=internal)
        else:
            def g(r):
                return f(r) * r ** (m - 1)

            internal = None
            if points is not None:
                internal = [p for p in points if 0 < p < rmax]
            val, err = integrate.quad(g, 0.0, rmax, limit=500,
                                      epsabs=1e-13, epsrel=1e-12,
                                      points=internal)

    if not math.isfinite(val) or err > rel_tol * max(abs(val), 1e-300) + 1e-13:
        raise IntegrabilityError(
            f"radial quadrature did not converge: value={val}, error={err}")
    return area * val


@dataclass(frozen=True)
class ConstantsTable:
    """Dimension-dependent constants; see the module docstring."""
    m: int
    two_star: Fraction
    kappa: Fraction
    omega_m: float
    omega_m_minus_1: float
    sigma_m: float
    a_frak: float
    b_frak: float
    c_bar: float | None

    def as_dict(self):
        d = {
            "m": self.m,
            "two_star": float(self.two_star),
            "kappa": float(self.kappa),
            "omega_m": self.omega_m,
            "omega_m_minus_1": self.omega_m_minus_1,
            "sigma_m": self.sigma_m,
            "a_frak": self.a_frak,
            "b_frak": self.b_frak,
        }
        if self.c_bar is not None:
            d["c_bar"] = self.c_bar
        return d


def round_sphere_constant(m):
    """The positive constant solving the single scalar equation on the round
    unit m-sphere: with kappa S_g = m(m-2)/4 the constant c satisfies
    m(m-2)/4 c = c^{2*-1}, so c = (m(m-2)/4)^{(m-2)/4}."""
    if not isinstance(m, (int, np.integer)) or m < 3:
        raise DomainError(f"need integer dimension m >= 3, got {m}")
    return (0.25 * m * (m - 2)) ** ((m - 2) / 4.0)


def weyl_channel_constant(m):
    """Coefficient c_bar of the delta^4 square-Weyl channel, m >= 7:

        c_bar = (1/192) (m+2) [m(m-2)]^{(m-2)/2}
                / (2^{m-1} (m-6) (m-1)) * omega_m / omega_{m-1}
    """
    if m < 7:
        raise DomainError(f"the delta^4 Weyl channel opens at m = 7, got {m}")
    num = (m + 2) * (m * (m - 2)) ** ((m - 2) / 2)
    den = 192.0 * 2.0 ** (m - 1) * (m - 6) * (m - 1)
    return num / den * sphere_volume(m) / sphere_volume(m - 1)


def constants(m):
    """Assemble the constants table for dimension m >= 3.

    b_frak is evaluated by quadrature of the bubble mass int U^{2*-1} so that
    equality with the closed-form flux a_frak remains an end-to-end check of
    the bubble normalization.
    """
    if not isinstance(m, (int, np.integer)) or m < 3:
        raise DomainError(f"need integer dimension m >= 3, got {m}")
    m = int(m)
    two_star = Fraction(2 * m, m - 2)
    kappa = Fraction(m - 2, 4 * (m - 1))
    omega_m = sphere_volume(m)
    omega_prev = sphere_volume(m - 1)
    sigma = 0.25 * m * (m - 2) * omega_m ** (2.0 / m)
    a_frak = (m - 2) * (m * (m - 2)) ** ((m - 2) / 4.0) * omega_prev

    p = float(two_star) - 1.0
    km = (m * (m - 2)) ** ((m - 2) / 4.0)

    def bubble_pow(r):
        return (km * (1.0 + r * r) ** (-(m - 2) / 2.0)) ** p

    b_frak = radial_integral(bubble_pow, m)
    c_bar = weyl_channel_constant(m) if m >= 7 else None
    return ConstantsTable(m=m, two_star=two_star, kappa=kappa,
                          omega_m=omega_m, omega_m_minus_1=omega_prev,
                          sigma_m=sigma, a_frak=a_frak, b_frak=b_frak,
                          c_bar=c_bar)

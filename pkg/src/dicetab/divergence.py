"""f-divergence generators and the convex conjugates the dual solvers need.

Every solver in this package is driven by a convex generator f with f(1) = 0.
Alongside f itself we need f', its inverse, and the conjugate restricted to
the nonnegative orthant,

    f*0(y) = max_{x >= 0} x*y - f(x),

whose derivative is (f*0)'(y) = max(0, (f')^{-1}(y)). The clamp at zero is
what produces sparse corrections for the chi-square family and strictly
positive ones for KL.

All callables are numpy ufunc-style: they accept scalars or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

__all__ = ["FGenerator", "make_generator", "conjugate_pair_check", "GENERATOR_NAMES"]

# Exponent clamp for the KL family. exp(500) is ~1e217: finite, far beyond any
# value a solver can meaningfully use, and it keeps intermediate bisection
# residuals free of inf/nan.
EXP_CLAMP = 500.0

GENERATOR_NAMES = ("chi2", "sql_chi2", "kl", "soft_chi2")


@dataclass(frozen=True)
class FGenerator:
    """A convex generator f (on x >= 0) with all derived quantities.

    f_prime_at_zero_plus is the right limit of f' at 0, i.e. the lower end of
    the range of f'; below it the conjugate clamp max(0, (f')^{-1}) binds.
    """

    name: str
    f: Callable = field(repr=False)
    f_prime: Callable = field(repr=False)
    f_prime_inverse: Callable = field(repr=False)
    f_star0: Callable = field(repr=False)
    f_star0_prime: Callable = field(repr=False)
    f_prime_at_zero_plus: float = -np.inf


def _clamped_exp(y):
    return np.exp(np.clip(y, -EXP_CLAMP, EXP_CLAMP))


def _chi2() -> FGenerator:
    # f(x) = (x-1)^2 / 2, so f(0) = 1/2 and f*0(y) = max(0, y+1)^2/2 - 1/2.
    return FGenerator(
        name="chi2",
        f=lambda x: 0.5 * (np.asarray(x, float) - 1.0) ** 2,
        f_prime=lambda x: np.asarray(x, float) - 1.0,
        f_prime_inverse=lambda y: np.asarray(y, float) + 1.0,
        f_star0=lambda y: 0.5 * np.maximum(0.0, np.asarray(y, float) + 1.0) ** 2 - 0.5,
        f_star0_prime=lambda y: np.maximum(0.0, np.asarray(y, float) + 1.0),
        f_prime_at_zero_plus=-1.0,
    )


def _sql_chi2() -> FGenerator:
    # f(x) = x^2 - x. Same family as chi2 up to scaling/offset but NOT the
    # same conjugate: f*0(y) = max(0, (y+1)/2)^2, f(0) = 0.
    return FGenerator(
        name="sql_chi2",
        f=lambda x: np.asarray(x, float) ** 2 - np.asarray(x, float),
        f_prime=lambda x: 2.0 * np.asarray(x, float) - 1.0,
        f_prime_inverse=lambda y: 0.5 * (np.asarray(y, float) + 1.0),
        f_star0=lambda y: np.maximum(0.0, 0.5 * (np.asarray(y, float) + 1.0)) ** 2,
        f_star0_prime=lambda y: np.maximum(0.0, 0.5 * (np.asarray(y, float) + 1.0)),
        f_prime_at_zero_plus=-1.0,
    )


def _kl() -> FGenerator:
    # f(x) = x log x (0 at x=0 by continuity). (f')^{-1}(y) = exp(y-1) is
    # always positive, so the conjugate clamp never binds: f*0(y) = exp(y-1).
    return FGenerator(
        name="kl",
        f=lambda x: xlogy(np.asarray(x, float), np.asarray(x, float)),
        f_prime=lambda x: np.log(np.asarray(x, float)) + 1.0,
        f_prime_inverse=lambda y: _clamped_exp(np.asarray(y, float) - 1.0),
        f_star0=lambda y: _clamped_exp(np.asarray(y, float) - 1.0),
        f_star0_prime=lambda y: _clamped_exp(np.asarray(y, float) - 1.0),
        f_prime_at_zero_plus=-np.inf,
    )


def _soft_chi2_f(x):
    x = np.asarray(x, float)
    # Quadratic branch owns the boundary x = 1; both branches agree there in
    # value (0) and slope (0), so the choice only matters for tie discipline.
    return np.where(x >= 1.0, 0.5 * (x - 1.0) ** 2, xlogy(x, x) - x + 1.0)


def _soft_chi2() -> FGenerator:
    # chi2 for x >= 1, KL-like for x < 1: keeps the quadratic tail's weak
    # penalty on large ratios while making f' unbounded below (w > 0 always).
    return FGenerator(
        name="soft_chi2",
        f=_soft_chi2_f,
        f_prime=lambda x: np.where(np.asarray(x, float) >= 1.0,
                                   np.asarray(x, float) - 1.0,
                                   np.log(np.asarray(x, float))),
        f_prime_inverse=lambda y: np.where(np.asarray(y, float) >= 0.0,
                                           np.asarray(y, float) + 1.0,
                                           _clamped_exp(np.minimum(np.asarray(y, float), 0.0))),
        f_star0=lambda y: np.where(np.asarray(y, float) >= 0.0,
                                   0.5 * np.asarray(y, float) ** 2 + np.asarray(y, float),
                                   np.expm1(np.clip(np.asarray(y, float), -EXP_CLAMP, 0.0))),
        f_star0_prime=lambda y: np.where(np.asarray(y, float) >= 0.0,
                                         np.asarray(y, float) + 1.0,
                                         _clamped_exp(np.minimum(np.asarray(y, float), 0.0))),
        f_prime_at_zero_plus=-np.inf,
    )


_FACTORIES = {
    "chi2": _chi2,
    "sql_chi2": _sql_chi2,
    "kl": _kl,
    "soft_chi2": _soft_chi2,
}


def make_generator(name: str) -> FGenerator:
    """Build one of the four known generators by name."""
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise ValueError(
            f"unknown generator {name!r}; expected one of {GENERATOR_NAMES}"
        ) from None


def conjugate_pair_check(g: FGenerator, y_grid) -> float:
    """Largest violation of f*0(y) = x*y - f(x*) with x* = max(0, (f')^{-1}(y)).

    Returns the max absolute error over the grid; a correct generator stays at
    rounding-noise level.
    """
    y = np.asarray(y_grid, float)
    x_star = np.maximum(0.0, g.f_prime_inverse(y))
    return float(np.max(np.abs(g.f_star0(y) - (x_star * y - g.f(x_star)))))


def f_star0_curvature(name: str) -> Callable:
    """Second derivative of f*0 (piecewise where the clamp binds).

    Internal helper for the Newton solvers; not part of the generator
    contract because only the four named generators are supported.
    """
    if name == "chi2":
        return lambda y: (np.asarray(y, float) > -1.0).astype(float)
    if name == "sql_chi2":
        return lambda y: 0.5 * (np.asarray(y, float) > -1.0)
    if name == "kl":
        return lambda y: _clamped_exp(np.asarray(y, float) - 1.0)
    if name == "soft_chi2":
        return lambda y: np.where(np.asarray(y, float) >= 0.0, 1.0,
                                  _clamped_exp(np.minimum(np.asarray(y, float), 0.0)))
    raise ValueError(f"unknown generator {name!r}")

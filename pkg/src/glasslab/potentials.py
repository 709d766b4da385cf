"""Smooth potentials ``u`` for the Gardner-type models.

Every family is a set of numba-jitted scalar functions ``f(x, params)`` so the
same objects can be called from the enumeration and MCMC kernels and, through
:meth:`PotentialU.__call__`, on numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np


# --- family: zero ---------------------------------------------------------

@numba.njit(cache=True)
def _zero(x, params):
    return 0.0


# --- family: c * tanh(x) ---------------------------------------------------

@numba.njit(cache=True)
def _tanh_u(x, params):
    return params[0] * math.tanh(x)


@numba.njit(cache=True)
def _tanh_d1(x, params):
    t = math.tanh(x)
    return params[0] * (1.0 - t * t)


@numba.njit(cache=True)
def _tanh_d2(x, params):
    t = math.tanh(x)
    s = 1.0 - t * t
    return params[0] * (-2.0 * s * t)


@numba.njit(cache=True)
def _tanh_d3(x, params):
    t = math.tanh(x)
    s = 1.0 - t * t
    return params[0] * (4.0 * s * t * t - 2.0 * s * s)


@numba.njit(cache=True)
def _tanh_d4(x, params):
    t = math.tanh(x)
    s = 1.0 - t * t
    return params[0] * (-8.0 * s * t * t * t + 16.0 * s * s * t)


# --- family: -c * log cosh(x)  (concave, nonpositive) ----------------------

@numba.njit(cache=True)
def _logcosh_u(x, params):
    a = abs(x)
    # log cosh(x) = |x| + log1p(exp(-2|x|)) - log 2
    return -params[0] * (a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0))


@numba.njit(cache=True)
def _logcosh_d1(x, params):
    return -params[0] * math.tanh(x)


@numba.njit(cache=True)
def _logcosh_d2(x, params):
    t = math.tanh(x)
    return -params[0] * (1.0 - t * t)


@numba.njit(cache=True)
def _logcosh_d3(x, params):
    t = math.tanh(x)
    return 2.0 * params[0] * (1.0 - t * t) * t


@numba.njit(cache=True)
def _logcosh_d4(x, params):
    t = math.tanh(x)
    s = 1.0 - t * t
    return -params[0] * (4.0 * s * t * t - 2.0 * s * s)


@numba.njit(cache=True)
def _map(f, x, params, shrink, order):
    out = np.empty_like(x)
    scale = shrink ** order
    for i in range(x.size):
        out[i] = scale * f(shrink * x[i], params)
    return out


@dataclass(frozen=True)
class PotentialU:
    """A smooth potential with its first four derivatives.

    ``shrink`` implements the rescaled potential ``u(shrink * x)`` used by the
    truncated systems; derivatives carry the chain-rule factor.
    """

    name: str
    funcs: tuple  # (u, d1, d2, d3, d4), numba dispatchers taking (x, params)
    params: np.ndarray = field(repr=False)
    bound_D: float
    concave_flag: bool = False
    linear_growth_flag: bool = False
    shrink: float = 1.0

    def __call__(self, x, order=0):
        arr = np.asarray(x, dtype=np.float64)
        flat = np.ascontiguousarray(arr).reshape(-1)
        out = _map(self.funcs[order], flat, self.params, float(self.shrink), order)
        if arr.ndim == 0:
            return float(out[0])
        return out.reshape(arr.shape)

    def eval(self, x):
        return self(x, 0)

    def d1(self, x):
        return self(x, 1)

    def d2(self, x):
        return self(x, 2)

    def d3(self, x):
        return self(x, 3)

    def d4(self, x):
        return self(x, 4)

    def shrunk(self, factor: float) -> "PotentialU":
        """Return ``x -> u(factor * x)``."""
        return PotentialU(self.name, self.funcs, self.params, self.bound_D,
                          self.concave_flag, self.linear_growth_flag,
                          self.shrink * factor)

    @property
    def is_zero(self) -> bool:
        return self.funcs[0] is _zero

    def check_bounds(self, orders, grid=None, require_nonpositive=False):
        """Check the declared derivative bounds on a grid.

        Returns a list of human-readable violations (empty if all hold). The
        global bounds cannot be certified for an arbitrary function, so the
        check is performed on 10**4 points over [-10, 10] by default.
        """
        if grid is None:
            grid = np.linspace(-10.0, 10.0, 10_000)
        problems = []
        tol = 1e-12 * max(1.0, self.bound_D)
        for d in orders:
            vals = self(grid, d)
            worst = float(np.max(np.abs(vals)))
            if worst > self.bound_D + tol:
                problems.append(f"|u^({d})| reaches {worst:.6g} > D={self.bound_D:.6g}")
        u0 = self(grid, 0)
        if self.concave_flag and np.any(self(grid, 2) > tol):
            problems.append("declared concave but u'' > 0 somewhere on the grid")
        if self.linear_growth_flag and np.any(u0 < -self.bound_D * (1.0 + np.abs(grid)) - tol):
            problems.append("u(x) < -D(1+|x|) somewhere on the grid")
        if require_nonpositive and np.any(u0 > tol):
            problems.append("u > 0 somewhere on the grid")
        return problems

    def to_text(self) -> str:
        if self.is_zero:
            return "zero"
        return f"{self.name}:{float(self.params[0])!r}"


_ZERO_FUNCS = (_zero, _zero, _zero, _zero, _zero)
_TANH_FUNCS = (_tanh_u, _tanh_d1, _tanh_d2, _tanh_d3, _tanh_d4)
_LOGCOSH_FUNCS = (_logcosh_u, _logcosh_d1, _logcosh_d2, _logcosh_d3, _logcosh_d4)


def zero_potential() -> PotentialU:
    return PotentialU("zero", _ZERO_FUNCS, np.zeros(1), 0.0,
                      concave_flag=True, linear_growth_flag=True)


def tanh_potential(c: float) -> PotentialU:
    """``u(x) = c tanh(x)``; all derivatives of order 0..4 are bounded by 4|c|."""
    # max|tanh''''| = 4.0859... is the largest of the five suprema
    return PotentialU("tanh", _TANH_FUNCS, np.array([float(c)]), 4.1 * abs(c),
                      concave_flag=False, linear_growth_flag=True)


def logcosh_potential(c: float) -> PotentialU:
    """``u(x) = -c log cosh(x)`` with c > 0: concave, nonpositive, linear growth."""
    if c < 0:
        raise ValueError("logcosh potential needs c >= 0 to stay concave")
    return PotentialU("logcosh", _LOGCOSH_FUNCS, np.array([float(c)]), 2.0 * c,
                      concave_flag=True, linear_growth_flag=True)


_FAMILIES = {"zero": lambda c: zero_potential(),
             "tanh": tanh_potential,
             "logcosh": logcosh_potential}


def parse_potential(text: str) -> PotentialU:
    """Parse ``zero``, ``tanh:0.5`` or ``logcosh:0.3``."""
    name, _, arg = text.strip().partition(":")
    name = name.strip().lower()
    if name not in _FAMILIES:
        raise ValueError(f"unknown potential family {name!r}")
    if name == "zero":
        return zero_potential()
    if not arg:
        raise ValueError(f"potential {name!r} needs a scale, e.g. {name}:0.5")
    return _FAMILIES[name](float(arg))

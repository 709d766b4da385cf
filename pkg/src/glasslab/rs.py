"""Replica-symmetric fixed points by damped iteration over Gaussian quadrature.

All expectations over standard Gaussians use probabilists' Gauss-Hermite
rules normalised to total weight one; nested expectations E_z E_xi are full
tensor products.  The truncated (N-k)-site variants are obtained by passing
``shrink = sqrt((N-k)/N)``: internally the potential becomes u(shrink * x) and
the load becomes alpha / shrink**2, which is the same system written for the
truncated geometry.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .models import Kind, ModelError
from .potentials import PotentialU, parse_potential

DEFAULT_Q = 61
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
DEFAULT_DAMPING = 0.5


class ValidatedZoneWarning(UserWarning):
    """Parameters outside the regime where the RS description is established."""


class RSConvergenceError(RuntimeError):
    pass


@lru_cache(maxsize=16)
def _rules(Q: int):
    z, wz = hermegauss(Q)
    wz = wz / math.sqrt(2.0 * math.pi)
    x, wx = leggauss(Q)
    for a in (z, wz, x, wx):
        a.setflags(write=False)
    return z, wz, x, wx


@dataclass(frozen=True)
class Quadrature:
    """Hermite rule for E over N(0,1) and Legendre rule on [-1,1] (weights sum to 2)."""

    Q: int = DEFAULT_Q

    def __post_init__(self):
        if self.Q < 2:
            raise ValueError("quadrature order must be at least 2")

    @property
    def hermite_nodes(self) -> np.ndarray:
        return _rules(self.Q)[0]

    @property
    def hermite_weights(self) -> np.ndarray:
        return _rules(self.Q)[1]

    @property
    def legendre_nodes(self) -> np.ndarray:
        return _rules(self.Q)[2]

    @property
    def legendre_weights(self) -> np.ndarray:
        return _rules(self.Q)[3]

    def refined(self) -> "Quadrature":
        return Quadrature(2 * self.Q + 1)

    def gauss_mean(self, f) -> float:
        """E f(z) for z ~ N(0,1)."""
        return float(np.dot(self.hermite_weights, f(self.hermite_nodes)))


@dataclass(frozen=True)
class RSSolution:
    kind: Kind
    params: dict
    residual_inf: float
    iterations: int
    converged: bool
    Q: int = DEFAULT_Q
    tol: float = DEFAULT_TOL
    inputs: dict = field(default_factory=dict)
    start: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def to_json(self) -> str:
        inputs = {k: (v.to_text() if isinstance(v, PotentialU) else v)
                  for k, v in self.inputs.items()}
        return json.dumps({"version": 1, "kind": self.kind.value, "params": self.params,
                           "residual_inf": self.residual_inf, "iterations": self.iterations,
                           "converged": self.converged, "Q": self.Q, "tol": self.tol,
                           "inputs": inputs, "start": self.start})

    @classmethod
    def from_json(cls, text: str) -> "RSSolution":
        d = json.loads(text)
        inputs = dict(d["inputs"])
        if "u" in inputs:
            inputs["u"] = parse_potential(inputs["u"])
        return cls(Kind(d["kind"]), d["params"], d["residual_inf"], d["iterations"],
                   d["converged"], d["Q"], d["tol"], inputs, d.get("start", {}))


def _quad(quad: Optional[Quadrature]) -> Quadrature:
    return quad if quad is not None else Quadrature()


# --- SK ----------------------------------------------------------------------

def _sk_map(q, beta, h, quad):
    z, w = quad.hermite_nodes, quad.hermite_weights
    return float(np.dot(w, np.tanh(beta * math.sqrt(max(q, 0.0)) * z + h) ** 2))


def solve_sk(beta: float, h: float, quad: Optional[Quadrature] = None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, damping: float = DEFAULT_DAMPING,
             q0: float = 0.5) -> RSSolution:
    """Solve q = E tanh^2(beta sqrt(q) z + h)."""
    if beta < 0:
        raise ModelError(f"beta must be nonnegative, got {beta}")
    if tol <= 0:
        raise ModelError("tol must be positive")
    quad = _quad(quad)
    q = float(q0)
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        fq = _sk_map(q, beta, h, quad)
        res = abs(fq - q)
        if res <= tol:
            break
        q = (1.0 - damping) * q + damping * fq
    return RSSolution(Kind.SK_ISING, {"q": q}, res, it, res <= tol, quad.Q, tol,
                      {"beta": beta, "h": h}, {"q": q0})


# --- SK on [-1,1] --------------------------------------------------------------

def _box_moments(a, b, quad):
    """For each a_i: (E x, E x^2) under density prop. to exp(a_i x + b x^2) on [-1,1]."""
    x, wx = quad.legendre_nodes, quad.legendre_weights
    expo = np.outer(a, x) + b * x * x
    expo -= expo.max(axis=1, keepdims=True)
    e = np.exp(expo) * wx
    Z = e.sum(axis=1)
    return (e @ x) / Z, (e @ (x * x)) / Z


def _box_map(q, rho, beta, h, quad):
    z, w = quad.hermite_nodes, quad.hermite_weights
    a = beta * math.sqrt(max(q, 0.0)) * z + h
    m1, m2 = _box_moments(a, 0.5 * beta * beta * (rho - q), quad)
    return float(np.dot(w, m1 * m1)), float(np.dot(w, m2))


def solve_sk_box(beta: float, h: float, quad: Optional[Quadrature] = None,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 damping: float = DEFAULT_DAMPING, q0: float = 0.5,
                 rho0: float = 0.75) -> RSSolution:
    """Joint (q, rho) system for SK spins uniform on [-1,1] with field h."""
    if beta < 0:
        raise ModelError(f"beta must be nonnegative, got {beta}")
    quad = _quad(quad)
    q, rho = float(q0), float(rho0)
    lam = damping
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        fq, frho = _box_map(q, rho, beta, h, quad)
        res = max(abs(fq - q), abs(frho - rho))
        if res <= tol:
            break
        while True:
            nq = (1.0 - lam) * q + lam * fq
            nrho = (1.0 - lam) * rho + lam * frho
            if nrho >= nq or lam < 1e-6:
                break
            lam *= 0.5
        q, rho = nq, nrho
    return RSSolution(Kind.SK_BOX, {"q": q, "rho": rho}, res, it, res <= tol, quad.Q, tol,
                      {"beta": beta, "h": h}, {"q": q0, "rho": rho0})


def box_beta0(h: float) -> tuple[float, float]:
    """Closed forms at beta=0: (q, rho) = ((E x)^2, E x^2) under e^{hx} on [-1,1]."""
    if abs(h) < 1e-4:
        m1 = h / 3.0 - h ** 3 / 45.0
        m2 = 1.0 / 3.0 + 2.0 * h * h / 45.0
    else:
        coth = 1.0 / math.tanh(h)
        m1 = coth - 1.0 / h
        m2 = 1.0 - 2.0 * coth / h + 2.0 / (h * h)
    return m1 * m1, m2


# --- Gardner kinds -----------------------------------------------------------

def _gardner_inner(q, spread, u: PotentialU, quad, want_second=False):
    """Per outer node z: tilted averages of u', u'^2 (and u'') over xi.

    theta = sqrt(q) z + sqrt(spread) xi, tilt exp(u(theta)).
    """
    z, w = quad.hermite_nodes, quad.hermite_weights
    theta = math.sqrt(max(q, 0.0)) * z[:, None] + math.sqrt(max(spread, 0.0)) * z[None, :]
    lu = u(theta)
    lu -= lu.max(axis=1, keepdims=True)
    e = np.exp(lu) * w[None, :]
    den = e.sum(axis=1)
    d1 = u(theta, 1)
    m1 = (e * d1).sum(axis=1) / den
    m2 = (e * d1 * d1).sum(axis=1) / den
    m3 = (e * u(theta, 2)).sum(axis=1) / den if want_second else None
    return m1, m2, m3


def _check_shrink(shrink):
    if not 0.0 < shrink <= 1.0:
        raise ModelError(f"shrink must lie in (0,1], got {shrink}")


def _perc_map(q, r, a_eff, ut, quad):
    z, w = quad.hermite_nodes, quad.hermite_weights
    m1, m2, _ = _gardner_inner(q, 1.0 - q, ut, quad)
    fr = a_eff * float(np.dot(w, m1 * m1))
    tau = a_eff * float(np.dot(w, m2))
    fq = float(np.dot(w, np.tanh(math.sqrt(max(r, 0.0)) * z) ** 2))
    return fq, fr, tau


def solve_perceptron(alpha: float, u: PotentialU, shrink: float = 1.0,
                     quad: Optional[Quadrature] = None, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, damping: float = DEFAULT_DAMPING,
                     q0: float = 0.5, r0: float = 0.0) -> RSSolution:
    """Solve the (q, r) system of the +-1 perceptron; tau is evaluated at the fixed point.

    ``alpha`` is M/N of the parent system.  With shrink < 1 the result is the
    truncated triple (q-, r-, tau-), i.e. load M/(N-k) with u replaced by
    u(shrink * .).
    """
    if not alpha > 0:
        raise ModelError(f"alpha must be positive, got {alpha}")
    _check_shrink(shrink)
    quad = _quad(quad)
    if alpha * u.bound_D ** 2 > 1.0:
        warnings.warn(f"alpha*D^2={alpha * u.bound_D ** 2:.3g} > 1: outside the validated "
                      "small-load zone", ValidatedZoneWarning, stacklevel=2)
    ut = u.shrunk(shrink)
    a_eff = alpha / shrink ** 2
    q, r = float(q0), float(r0)
    res = math.inf
    tau = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        fq, fr, tau = _perc_map(q, r, a_eff, ut, quad)
        if fr < 0:
            raise RSConvergenceError(f"negative r={fr} (quadrature underflow?)")
        res = max(abs(fq - q), abs(fr - r))
        if res <= tol:
            break
        # q depends on r alone, so it is refreshed from the damped r directly
        r = (1.0 - damping) * r + damping * fr
        q = float(np.dot(quad.hermite_weights, np.tanh(math.sqrt(r) * quad.hermite_nodes) ** 2))
    return RSSolution(Kind.PERCEPTRON, {"q": q, "r": r, "tau": tau}, res, it, res <= tol,
                      quad.Q, tol, {"alpha": alpha, "u": u, "shrink": shrink},
                      {"q": q0, "r": r0})


def _st_map(state, a_eff, ut, kappa, h, quad):
    r, tau, sigma, rho, q = state
    w = quad.hermite_weights
    m1, m2, m3 = _gardner_inner(q, rho - q, ut, quad, want_second=True)
    nr = a_eff * float(np.dot(w, m1 * m1))
    ntau = a_eff * float(np.dot(w, m2))
    nsig = a_eff * float(np.dot(w, m3))
    R = 2.0 * kappa + nr - nsig - ntau
    if R <= 0:
        return np.array([nr, ntau, nsig, math.nan, math.nan]), R
    nq = (nr + h * h) / R ** 2
    return np.array([nr, ntau, nsig, 1.0 / R + nq, nq]), R


def st_zero_u(kappa: float, h: float) -> dict:
    """Closed-form solution when u vanishes."""
    R = 2.0 * kappa
    q = h * h / R ** 2
    return {"r": 0.0, "tau": 0.0, "sigma": 0.0, "rho": 1.0 / R + q, "q": q, "R": R, "V2": 1.0 / R}


def solve_st(alpha: float, u: PotentialU, kappa: float, h: float, shrink: float = 1.0,
             quad: Optional[Quadrature] = None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, damping: float = DEFAULT_DAMPING) -> RSSolution:
    """Solve the five-parameter system (r, tau, sigma, rho, q) of the ST model.

    Iteration starts from the u = 0 solution, which already has the right scale
    1/(2 kappa) for rho.
    """
    if not alpha > 0:
        raise ModelError(f"alpha must be positive, got {alpha}")
    if not kappa > 0:
        raise ModelError(f"kappa must be positive, got {kappa}")
    _check_shrink(shrink)
    quad = _quad(quad)
    ut = u.shrunk(shrink)
    a_eff = alpha / shrink ** 2
    z0 = st_zero_u(kappa, h)
    names = ("r", "tau", "sigma", "rho", "q")
    state = np.array([z0[n] for n in names])
    lam = damping
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        new, R = _st_map(state, a_eff, ut, kappa, h, quad)
        if R <= 0:
            raise RSConvergenceError(f"R = 2kappa + r - sigma - tau = {R:.4g} <= 0 at iterate {it}")
        res = float(np.max(np.abs(new - state)))
        if res <= tol:
            break
        while True:
            cand = (1.0 - lam) * state + lam * new
            if cand[3] > cand[4] >= 0 or lam < 1e-6:
                break
            lam *= 0.5
        state = cand
    r, tau, sigma, rho, q = (float(v) for v in state)
    R = 2.0 * kappa + r - sigma - tau
    params = {"r": r, "tau": tau, "sigma": sigma, "rho": rho, "q": q, "R": R, "V2": 1.0 / R}
    return RSSolution(Kind.ST, params, res, it, res <= tol, quad.Q, tol,
                      {"alpha": alpha, "u": u, "kappa": kappa, "h": h, "shrink": shrink},
                      {n: float(z0[n]) for n in names})


# --- certification ---------------------------------------------------------------

def residual(kind, params: dict, inputs: dict, quad: Optional[Quadrature] = None) -> float:
    """Infinity norm of all equation defects, recomputed with the 2Q+1 rule."""
    kind = Kind(kind)
    fine = _quad(quad).refined()
    if kind == Kind.SK_ISING:
        q = params["q"]
        return abs(_sk_map(q, inputs["beta"], inputs["h"], fine) - q)
    if kind == Kind.SK_BOX:
        q, rho = params["q"], params["rho"]
        fq, frho = _box_map(q, rho, inputs["beta"], inputs["h"], fine)
        return max(abs(fq - q), abs(frho - rho))
    shrink = inputs.get("shrink", 1.0)
    ut = inputs["u"].shrunk(shrink)
    a_eff = inputs["alpha"] / shrink ** 2
    if kind == Kind.PERCEPTRON:
        fq, fr, tau = _perc_map(params["q"], params["r"], a_eff, ut, fine)
        return max(abs(fq - params["q"]), abs(fr - params["r"]), abs(tau - params["tau"]))
    names = ("r", "tau", "sigma", "rho", "q")
    state = np.array([params[n] for n in names])
    new, R = _st_map(state, a_eff, ut, inputs["kappa"], inputs["h"], fine)
    if R <= 0:
        return math.inf
    return float(np.max(np.abs(new - state)))


def solve(kind, inputs: dict, quad: Optional[Quadrature] = None, **kw) -> RSSolution:
    """Dispatch on model kind with an ``inputs`` mapping."""
    kind = Kind(kind)
    if kind == Kind.SK_ISING:
        return solve_sk(inputs["beta"], inputs["h"], quad, **kw)
    if kind == Kind.SK_BOX:
        return solve_sk_box(inputs["beta"], inputs["h"], quad, **kw)
    if kind == Kind.PERCEPTRON:
        return solve_perceptron(inputs["alpha"], inputs["u"], inputs.get("shrink", 1.0), quad, **kw)
    return solve_st(inputs["alpha"], inputs["u"], inputs["kappa"], inputs["h"],
                    inputs.get("shrink", 1.0), quad, **kw)


def truncated_solution(spec, n_sites: int, k: int, quad: Optional[Quadrature] = None,
                       **kw) -> RSSolution:
    """RS solution of the (N-k)-site truncated system of ``spec``."""
    shrink = math.sqrt((n_sites - k) / n_sites)
    if spec.kind.is_sk:
        return solve(spec.kind, {"beta": spec.beta * shrink, "h": spec.h}, quad, **kw)
    alpha = spec.n_patterns(n_sites) / n_sites
    inputs = {"alpha": alpha, "u": spec.u, "shrink": shrink, "kappa": spec.kappa, "h": spec.h}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidatedZoneWarning)
        return solve(spec.kind, inputs, quad, **kw)

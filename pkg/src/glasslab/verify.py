"""Verification statistics for local independence.

Predicted product marginals (cavity-field and limiting forms), TV and KS
distances, overlap concentration under the disorder-averaged Gibbs law, the
gap between the Gibbs marginal and the marginal of the decomposed
Hamiltonian, and the random-projection Gaussianity check.

Every predicted site factor has density proportional to
exp(linear_j x + quadratic x^2) against the reference measure of the domain:
uniform on {-1,+1}, uniform on [-1,1], or Lebesgue on the real line.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from . import exact
from .models import Domain, Kind, ModelError, ModelSpec, cavity_decompose, sample_disorder
from .rs import (Quadrature, RSSolution, ValidatedZoneWarning, solve_perceptron, solve_sk,
                 solve_sk_box, solve_st, truncated_solution)
from .sampler import (Aggregate, ChainConfig, MarginalHistogram, default_edges,
                      disorder_average, n_bins, run_chain)
from .seeding import (ROLE_CAVITY1, ROLE_CAVITY2, ROLE_REPLICA1, ROLE_REPLICA2, ROLE_THETA,
                      ROLE_Z, sub_seed)

CSV_COLUMNS = ("model", "N", "k", "p", "form", "n_disorders", "statistic", "value", "se", "seed")
DEFAULT_CHAIN = ChainConfig(n_sweeps=20_000, burn_in=2_000)
_LEG_NODES, _LEG_WEIGHTS = np.polynomial.legendre.leggauss(96)


class Form(str, enum.Enum):
    PARTIAL = "PARTIAL"
    LIMITING = "LIMITING"


class PredKind(str, enum.Enum):
    SK_PARTIAL = "SK_PARTIAL"
    SK_LIMITING = "SK_LIMITING"
    SKBOX_PARTIAL = "SKBOX_PARTIAL"
    SKBOX_LIMITING = "SKBOX_LIMITING"
    PERC_PARTIAL = "PERC_PARTIAL"
    PERC_LIMITING = "PERC_LIMITING"
    ST_PARTIAL = "ST_PARTIAL"
    ST_LIMITING = "ST_LIMITING"


_PREFIX = {Kind.SK_ISING: "SK", Kind.SK_BOX: "SKBOX", Kind.PERCEPTRON: "PERC", Kind.ST: "ST"}


def rs_constants(kind: Kind, sol: RSSolution) -> tuple[float, float]:
    """(Xi, Upsilon): thin-shell and overlap values of the cavity vector w."""
    if Kind(sol.kind) != kind:
        raise ModelError(f"RS solution is for {Kind(sol.kind).value}, model is {kind.value}")
    p = sol.params
    if kind == Kind.SK_ISING:
        return 1.0, p["q"]
    if kind == Kind.SK_BOX:
        return p["rho"], p["q"]
    return p["tau"], p["r"]


# --- predicted product measures ----------------------------------------------------

def _box_integral(lin, quad, lo=-1.0, hi=1.0):
    """(1/2) int_lo^hi exp(lin x + quad x^2) dx, vectorised over ``hi`` or ``lin``."""
    lin, lo, hi = np.broadcast_arrays(np.asarray(lin, float), np.asarray(lo, float),
                                      np.asarray(hi, float))
    half = 0.5 * (hi - lo)[..., None]
    x = 0.5 * (hi + lo)[..., None] + half * _LEG_NODES
    vals = np.exp(lin[..., None] * x + quad * x * x)
    return 0.5 * (half * _LEG_WEIGHTS * vals).sum(axis=-1)


@dataclass(frozen=True)
class PredictedMarginal:
    """Product of k site factors, each with density exp(linear_j x + quadratic x^2) d mu."""

    kind: PredKind
    domain: Domain
    linear: np.ndarray
    quadratic: float
    fields: np.ndarray
    z: Optional[np.ndarray] = None
    constants: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.linear.size

    # +-1 sites
    def site_plus(self, j: int) -> float:
        return 0.5 * (1.0 + math.tanh(self.linear[j]))

    def table(self) -> exact.MarginalTable:
        if self.domain != Domain.PM_ONE:
            raise ModelError("a probability table needs +-1 spins")
        conf = exact.MarginalTable.configurations(self.k)
        plus = np.array([self.site_plus(j) for j in range(self.k)])
        probs = np.prod(np.where(conf > 0, plus, 1.0 - plus), axis=1)
        return exact.MarginalTable(self.k, probs / probs.sum())

    # real sites
    def gaussian(self, j: int) -> tuple[float, float]:
        var = -0.5 / self.quadratic
        return self.linear[j] * var, var

    def site_cdf(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.domain == Domain.REAL:
            m, v = self.gaussian(j)
            return stats.norm.cdf(x, m, math.sqrt(v))
        if self.domain == Domain.BOX:
            xc = np.clip(x, -1.0, 1.0)
            total = _box_integral(self.linear[j], self.quadratic)
            return _box_integral(self.linear[j], self.quadratic, -1.0, xc) / total
        return np.where(x < -1, 0.0, np.where(x < 1, 1.0 - self.site_plus(j), 1.0))

    def site_density(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.domain == Domain.REAL:
            m, v = self.gaussian(j)
            return stats.norm.pdf(x, m, math.sqrt(v))
        if self.domain == Domain.BOX:
            total = 2.0 * _box_integral(self.linear[j], self.quadratic)
            d = np.exp(self.linear[j] * x + self.quadratic * x * x) / total
            return np.where(np.abs(x) <= 1.0, d, 0.0)
        raise ModelError("+-1 sites have no density; use table()")

    def axis_masses(self, j: int, edges) -> np.ndarray:
        """Bin masses along one axis; the outer bins extend to the domain ends."""
        c = self.site_cdf(j, np.asarray(edges)[1:-1])
        return np.diff(np.concatenate([[0.0], c, [1.0]]))

    def bin_masses(self, edges) -> np.ndarray:
        out = np.ones(())
        for j, e in enumerate(edges):
            out = np.multiply.outer(out, self.axis_masses(j, e))
        return out

    def normalization_error(self) -> float:
        """Largest deviation of a site factor's total mass from 1 (independent quadrature)."""
        err = 0.0
        for j in range(self.k):
            if self.domain == Domain.PM_ONE:
                p = self.site_plus(j)
                tot = p + (1.0 - p)
            elif self.domain == Domain.BOX:
                x, w = np.polynomial.legendre.leggauss(200)
                tot = float(w @ self.site_density(j, x))
            else:
                m, v = self.gaussian(j)
                s = math.sqrt(v)
                xs = m + 12.0 * s * _LEG_NODES
                tot = float(12.0 * s * _LEG_WEIGHTS @ self.site_density(j, xs))
            err = max(err, abs(tot - 1.0))
        return err


def predicted_product(decomp, rs_solution: Optional[RSSolution], form, z_draws=None,
                      fields=None) -> PredictedMarginal:
    """Product measure predicted for the first k sites of ``decomp``.

    PARTIAL uses the cavity values P_j = varrho A_j.<w>^- (``fields``; computed
    exactly for +-1 models when omitted).  LIMITING uses P_j = varrho sqrt(Upsilon) z_j.
    ``rs_solution`` must be the RS solution of the truncated system.
    """
    if rs_solution is None:
        raise ModelError("a predicted product needs the truncated system's RS solution")
    form = Form(form)
    spec = decomp.spec
    kind = spec.kind
    xi, ups = rs_constants(kind, rs_solution)
    k = decomp.k
    if form == Form.PARTIAL:
        if fields is None:
            if not kind.is_discrete:
                raise ModelError("cavity fields of continuous spins must be supplied (sampler)")
            fields = exact.cavity_enumerate(decomp).fields
            if kind == Kind.SK_ISING:
                fields = fields - spec.h
        P = np.asarray(fields, dtype=np.float64)
        z = None
    else:
        if z_draws is None:
            raise ModelError("the LIMITING form needs k standard Gaussian draws")
        z = np.asarray(z_draws, dtype=np.float64)
        P = decomp.varrho * math.sqrt(max(ups, 0.0)) * z
    if P.shape != (k,):
        raise ModelError(f"need {k} cavity values, got shape {P.shape}")
    quadratic = 0.5 * decomp.varrho ** 2 * (xi - ups) + decomp.site_quadratic
    if spec.domain == Domain.REAL and not quadratic < 0:
        raise ModelError(f"predicted ST factor is not normalisable (x^2 coefficient {quadratic})")
    consts = {"varrho": decomp.varrho, "Xi": xi, "Upsilon": ups, **rs_solution.params}
    return PredictedMarginal(PredKind(f"{_PREFIX[kind]}_{form.value}"), spec.domain,
                             P + decomp.site_field, float(quadratic), P, z, consts)


# --- distances ---------------------------------------------------------------------

def tv_discrete(a: exact.MarginalTable, b: exact.MarginalTable) -> float:
    if a.k != b.k:
        raise ModelError(f"cannot compare a {a.k}-marginal with a {b.k}-marginal")
    return float(min(1.0, 0.5 * np.abs(a.probs - b.probs).sum()))


def tv_continuous(a: MarginalHistogram, b: PredictedMarginal, common_edges=None) -> float:
    """Histogram TV on shared bins: a lower bound of the true TV."""
    if a.k != b.k:
        raise ModelError(f"cannot compare a {a.k}-histogram with a {b.k}-site prediction")
    if common_edges is not None:
        if len(common_edges) != a.k or not all(
                np.array_equal(np.asarray(e), f) for e, f in zip(common_edges, a.edges)):
            raise ModelError("histogram edges differ from the common edges")
    return float(min(1.0, 0.5 * np.abs(a.masses - b.bin_masses(a.edges)).sum()))


def common_edges(samples: np.ndarray, pred: PredictedMarginal, bins: Optional[int] = None):
    samples = np.atleast_2d(samples)
    if pred.domain == Domain.BOX:
        return default_edges(samples, Domain.BOX, bins)
    nb = bins or n_bins(samples.shape[0])
    out = []
    for j in range(pred.k):
        m, v = pred.gaussian(j)
        s = math.sqrt(v)
        lo = min(samples[:, j].min(), m - 5 * s)
        hi = max(samples[:, j].max(), m + 5 * s)
        out.append(np.linspace(lo, hi, nb + 1))
    return tuple(out)


def ks_distances(samples: np.ndarray, pred: PredictedMarginal) -> np.ndarray:
    """Per-axis Kolmogorov-Smirnov distance between samples and predicted site factors."""
    samples = np.atleast_2d(samples)
    return np.array([stats.kstest(samples[:, j], lambda x, j=j: pred.site_cdf(j, x)).statistic
                     for j in range(pred.k)])


# --- backends ----------------------------------------------------------------------

def resolve_backend(spec: ModelSpec, n_sites: int, backend: str = "auto") -> str:
    if backend == "auto":
        return "exact" if spec.kind.is_discrete and n_sites <= exact.MAX_ENUM_SITES else "mcmc"
    if backend == "exact":
        if not spec.kind.is_discrete:
            raise ModelError(f"exact backend is unavailable for {spec.kind.value}")
        if n_sites > exact.MAX_ENUM_SITES:
            raise ModelError(f"exact backend is limited to N <= {exact.MAX_ENUM_SITES}")
        return backend
    if backend == "mcmc":
        return backend
    raise ModelError(f"unknown backend {backend!r}")


def _replica_rngs(streams, cavity=False):
    roles = (ROLE_CAVITY1, ROLE_CAVITY2) if cavity else (ROLE_REPLICA1, ROLE_REPLICA2)
    return streams.generator(roles[0]), streams.generator(roles[1])


def _exact_overlaps(spec, disorder, summary=None) -> dict:
    if summary is None:
        summary = exact.enumerate(spec, disorder, 0, pairs=True, aux=spec.kind.is_gardner)
    r12, r12sq, r11, r11sq = exact.overlap_moments(summary)
    out = {"R12": r12, "R12_sq": r12sq, "R11": r11, "R11_sq": r11sq,
           "x4": 1.0, "x8": 1.0}
    if spec.kind.is_gardner:
        a12, a12sq, an, ansq = exact.aux_overlap_moments(summary, disorder.n_sites)
        out.update(aux12=a12, aux12_sq=a12sq, auxn=an, auxn_sq=ansq)
    return out


def _chain_overlaps(st) -> dict:
    return {"R12": st.overlap_mean, "R12_sq": st.overlap_sq, "R11": st.norm_mean,
            "R11_sq": st.norm_sq, "aux12": st.aux_overlap_mean, "aux12_sq": st.aux_overlap_sq,
            "auxn": st.aux_norm_mean, "auxn_sq": st.aux_norm_sq,
            "x4": st.moment4, "x8": st.moment8}


def sampled_cavity_fields(decomp, cfg: ChainConfig, rngs) -> np.ndarray:
    """P_j = varrho A_j.<w>^- estimated by a chain on the truncated system."""
    tspec, tdis = decomp.truncated
    st = run_chain(tspec, tdis, cfg, 0, rngs=rngs)
    if decomp.spec.kind.is_sk:
        wbar = st.site_means
    else:
        wbar = math.sqrt(decomp.alpha_minus) * st.aux_means
    return decomp.varrho * decomp.cavity_vectors @ wbar


# --- local independence sweeps ------------------------------------------------------

@dataclass(frozen=True)
class LIEstimator:
    """Per-disorder TV between the Gibbs k-marginal and the predicted product."""

    form: Form
    p: int
    rs_minus: RSSolution
    backend: str = "exact"
    chain: ChainConfig = DEFAULT_CHAIN
    overlaps: bool = True

    def __call__(self, spec, disorder, k, streams):
        sigma = self.rs_minus.params.get("sigma") if spec.kind == Kind.ST else None
        decomp = cavity_decompose(spec, disorder, k, sigma_minus=sigma)
        z = streams.generator(ROLE_Z).standard_normal(k) if self.form == Form.LIMITING else None
        out = {}
        if self.backend == "exact":
            cav = exact.cavity_enumerate(decomp)
            P = cav.fields - spec.h if spec.kind == Kind.SK_ISING else cav.fields
            pred = predicted_product(decomp, self.rs_minus, self.form, z, fields=P)
            tv = tv_discrete(cav.gibbs, pred.table())
            gap = tv_discrete(cav.gibbs, cav.surrogate)
            out.update(gap=gap, gap2p=gap ** (2 * self.p))
            if self.overlaps:
                out.update(_exact_overlaps(spec, disorder))
        else:
            continuous = not spec.kind.is_discrete
            st = run_chain(spec, disorder, self.chain, k, rngs=_replica_rngs(streams),
                           keep_samples=continuous)
            P = None
            if self.form == Form.PARTIAL:
                P = sampled_cavity_fields(decomp, self.chain, _replica_rngs(streams, True))
            pred = predicted_product(decomp, self.rs_minus, self.form, z, fields=P)
            if continuous:
                edges = common_edges(st.samples, pred)
                tv = tv_continuous(MarginalHistogram.from_samples(st.samples, edges), pred)
                out["ks"] = float(ks_distances(st.samples, pred).max())
            else:
                tv = tv_discrete(st.marginal, pred.table())
            out["ess_min"] = st.ess_min
            if self.overlaps:
                out.update(_chain_overlaps(st))
        out.update(tv=tv, tv2p=tv ** (2 * self.p))
        return out


def _var_from(agg: Aggregate, first: str, second: str) -> tuple[float, float]:
    """Variance under the disorder-averaged Gibbs law, E<X^2> - (E<X>)^2, with jackknife s.e."""
    return agg.jackknife(lambda m: m[second] - m[first] ** 2)


@dataclass
class LIReport:
    model: str
    N: int
    k: int
    p: int
    form: str
    n_disorders: int
    tv_moment_2p: float
    tv_moment_se: float
    tv_mean: float
    tv_se: float
    var_R12: Optional[float] = None
    var_R12_se: Optional[float] = None
    var_R11: Optional[float] = None
    var_R11_se: Optional[float] = None
    decomposition_gap: Optional[float] = None
    decomposition_gap_se: Optional[float] = None
    projection_stats: Optional[dict] = None
    backend: str = "exact"
    metric: str = "exact TV"
    ks_mean: Optional[float] = None
    n_failed: int = 0
    seed: int = 0
    aggregate: Optional[Aggregate] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(replace(self, aggregate=None))
        d.pop("aggregate")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def csv_rows(self) -> list[dict]:
        base = {"model": self.model, "N": self.N, "k": self.k, "p": self.p, "form": self.form,
                "n_disorders": self.n_disorders, "seed": self.seed}
        rows = [("tv_moment_2p", self.tv_moment_2p, self.tv_moment_se),
                ("tv_mean", self.tv_mean, self.tv_se)]
        if self.var_R12 is not None:
            rows += [("var_R12", self.var_R12, self.var_R12_se),
                     ("var_R11", self.var_R11, self.var_R11_se)]
        if self.decomposition_gap is not None:
            rows.append(("decomposition_gap", self.decomposition_gap, self.decomposition_gap_se))
        if self.ks_mean is not None:
            rows.append(("ks_mean", self.ks_mean, ""))
        return [{**base, "statistic": s, "value": v, "se": e} for s, v, e in rows]


def li_report(spec: ModelSpec, N: int, k: int, p: int, form, agg: Aggregate, backend: str,
              seed: int) -> LIReport:
    tv2p, tv2p_se = agg.mean("tv2p"), agg.se("tv2p")
    rep = LIReport(spec.kind.value, N, k, p, Form(form).value, agg.n, tv2p, tv2p_se,
                   agg.mean("tv"), agg.se("tv"), backend=backend,
                   metric="exact TV" if spec.kind.is_discrete else "histogram TV (lower bound)",
                   n_failed=agg.n_failed, seed=seed, aggregate=agg)
    if "R12" in agg.values:
        rep.var_R12, rep.var_R12_se = _var_from(agg, "R12", "R12_sq")
        rep.var_R11, rep.var_R11_se = _var_from(agg, "R11", "R11_sq")
    if "gap2p" in agg.values:
        rep.decomposition_gap, rep.decomposition_gap_se = agg.mean("gap2p"), agg.se("gap2p")
    if "ks" in agg.values:
        rep.ks_mean = agg.mean("ks")
    return rep


def li_sweep(spec: ModelSpec, N_list, k: int, p: int, n_disorders: int, form,
             master_seed: int, backend: str = "auto", chain: Optional[ChainConfig] = None,
             workers: Optional[int] = None, quad: Optional[Quadrature] = None,
             overlaps: bool = True, on_record=None, done=None) -> list[LIReport]:
    """Disorder-averaged TV^{2p} between G_N^{(k)} and its predicted product for each N.

    Each N uses its own sub-seed of ``master_seed`` so that grid points are
    independent.  ``on_record(N, index, values, error)`` sees every record;
    ``done`` maps N to already computed records.
    """
    form = Form(form)
    if p < 1:
        raise ModelError("p must be a positive integer")
    reports = []
    for N in N_list:
        be = resolve_backend(spec, N, backend)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ValidatedZoneWarning)
            rs_minus = truncated_solution(spec, N, k, quad)
        est = LIEstimator(form, p, rs_minus, be, chain or DEFAULT_CHAIN, overlaps)
        seed = sub_seed(master_seed, N)
        cb = None if on_record is None else (lambda i, v, e, N=N: on_record(N, i, v, e))
        agg = disorder_average(spec, N, k, n_disorders, est, seed, workers, on_record=cb,
                               done=(done or {}).get(N))
        reports.append(li_report(spec, N, k, p, form, agg, be, master_seed))
    return reports


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    se: float
    ci_low: float
    ci_high: float
    intercept: float


def fit_loglog(N_list, groups: list, fn=None) -> SlopeFit:
    """OLS slope of log(mean statistic) on log N with a grouped jackknife CI.

    ``groups[i]`` holds the per-disorder values at ``N_list[i]``; grid points
    are independent, so the jackknife variance is the sum of the per-group
    delete-one variances.
    """
    x = np.log(np.asarray(N_list, dtype=np.float64))
    means = np.array([np.mean(g) for g in groups])
    if np.any(means <= 0):
        raise ModelError("log-log fit needs positive statistics")

    def slope_of(m):
        return np.polyfit(x, np.log(m), 1)

    slope, intercept = slope_of(means)
    var = 0.0
    for i, g in enumerate(groups):
        g = np.asarray(g, dtype=np.float64)
        n = g.size
        loo = (g.sum() - g) / (n - 1)
        s = []
        for v in loo:
            m = means.copy()
            m[i] = v
            s.append(slope_of(m)[0] if v > 0 else np.nan)
        s = np.asarray(s)
        var += (n - 1) / n * np.nansum((s - np.nanmean(s)) ** 2)
    se = math.sqrt(var)
    return SlopeFit(float(slope), se, float(slope - 1.959963984540054 * se),
                    float(slope + 1.959963984540054 * se), float(intercept))


# --- concentration -----------------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationEstimator:
    backend: str = "exact"
    chain: ChainConfig = DEFAULT_CHAIN

    def __call__(self, spec, disorder, k, streams):
        if self.backend == "exact":
            return _exact_overlaps(spec, disorder)
        st = run_chain(spec, disorder, self.chain, max(1, min(4, disorder.n_sites)),
                       rngs=_replica_rngs(streams))
        return _chain_overlaps(st)


@dataclass
class ConcentrationReport:
    model: str
    N: int
    n_disorders: int
    var_R12: float
    var_R12_se: float
    var_R11: float
    var_R11_se: float
    var_aux_overlap: float
    var_aux_overlap_se: float
    var_aux_norm: float
    var_aux_norm_se: float
    S_N: float
    S_N_se: float
    T_N: float
    T_N_se: float
    mean_R12: float = 0.0
    mean_R12_se: float = 0.0
    backend: str = "exact"
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_rows(self) -> list[dict]:
        base = {"model": self.model, "N": self.N, "k": "", "p": "", "form": "",
                "n_disorders": self.n_disorders, "seed": self.seed}
        names = ("var_R12", "var_R11", "var_aux_overlap", "var_aux_norm", "S_N", "T_N", "mean_R12")
        return [{**base, "statistic": n, "value": getattr(self, n), "se": getattr(self, n + "_se")}
                for n in names]


def concentration_stats(spec: ModelSpec, N: int, n_disorders: int, master_seed: int,
                        backend: str = "auto", chain: Optional[ChainConfig] = None,
                        workers: Optional[int] = None, on_record=None,
                        done=None) -> ConcentrationReport:
    """Var R12 and Var R11 under nu_N = E G_N, auxiliary analogues, and S_N, T_N."""
    be = resolve_backend(spec, N, backend)
    est = ConcentrationEstimator(be, chain or DEFAULT_CHAIN)
    agg = disorder_average(spec, N, 0, n_disorders, est, master_seed, workers,
                           on_record=on_record, done=done)
    v12 = _var_from(agg, "R12", "R12_sq")
    v11 = _var_from(agg, "R11", "R11_sq")
    if spec.kind.is_gardner:
        va = _var_from(agg, "aux12", "aux12_sq")
        vn = _var_from(agg, "auxn", "auxn_sq")
    else:
        va = vn = (0.0, 0.0)
    return ConcentrationReport(spec.kind.value, N, agg.n, *v12, *v11, *va, *vn,
                               agg.mean("x4"), agg.se("x4"), agg.mean("x8"), agg.se("x8"),
                               agg.mean("R12"), agg.se("R12"), be, master_seed)


# --- decomposition gap --------------------------------------------------------------

@dataclass(frozen=True)
class GapEstimator:
    p: int = 1

    def __call__(self, spec, disorder, k, streams):
        cav = exact.cavity_enumerate(cavity_decompose(spec, disorder, k))
        gap = tv_discrete(cav.gibbs, cav.surrogate)
        return {"gap": gap, "gap2p": gap ** (2 * self.p)}


@dataclass
class GapReport:
    model: str
    N: int
    k: int
    p: int
    n_disorders: int
    gap: float
    gap_se: float
    tv_mean: float
    tv_se: float
    seed: int = 0
    aggregate: Optional[Aggregate] = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        d = asdict(replace(self, aggregate=None))
        d.pop("aggregate")
        return json.dumps(d)

    def csv_rows(self) -> list[dict]:
        base = {"model": self.model, "N": self.N, "k": self.k, "p": self.p, "form": "",
                "n_disorders": self.n_disorders, "seed": self.seed}
        return [{**base, "statistic": "decomposition_gap", "value": self.gap, "se": self.gap_se},
                {**base, "statistic": "decomposition_tv_mean", "value": self.tv_mean,
                 "se": self.tv_se}]


def decomposition_gap(spec: ModelSpec, N: int, k: int, p: int, n_disorders: int,
                      master_seed: int, workers: Optional[int] = None, on_record=None,
                      done=None) -> GapReport:
    """E sup_B (G_N^{(k)}[B] - G_{N,0}^{(k)}[B])^{2p}, both marginals exact."""
    if not spec.kind.is_discrete:
        raise ModelError("the decomposition gap needs a +-1 model and the exact backend")
    resolve_backend(spec, N - k, "exact")
    agg = disorder_average(spec, N, k, n_disorders, GapEstimator(p), master_seed, workers,
                           on_record=on_record, done=done)
    return GapReport(spec.kind.value, N, k, p, agg.n, agg.mean("gap2p"), agg.se("gap2p"),
                     agg.mean("gap"), agg.se("gap"), master_seed, agg)


def gap_sweep(spec, N_list, k, p, n_disorders, master_seed, workers=None,
              on_record=None, done=None) -> list[GapReport]:
    out = []
    for N in N_list:
        cb = None if on_record is None else (lambda i, v, e, N=N: on_record(N, i, v, e))
        out.append(decomposition_gap(spec, N, k, p, n_disorders, sub_seed(master_seed, N),
                                     workers, cb, (done or {}).get(N)))
        out[-1].seed = master_seed
    return out


def gap_ratio(small: GapReport, large: GapReport) -> tuple[float, float]:
    """gap(large N)/gap(small N) with a delta-method s.e. (independent grid points)."""
    r = large.gap / small.gap
    se = abs(r) * math.sqrt((large.gap_se / large.gap) ** 2 + (small.gap_se / small.gap) ** 2)
    return r, se


# --- projection test -----------------------------------------------------------------

def projection_constants(spec: ModelSpec, N: int, quad: Optional[Quadrature] = None):
    """(rho, q) for the projected vector: spins for SK kinds, u'(S) for Gardner kinds."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidatedZoneWarning)
        if spec.kind == Kind.SK_ISING:
            return 1.0, solve_sk(spec.beta, spec.h, quad).params["q"]
        if spec.kind == Kind.SK_BOX:
            s = solve_sk_box(spec.beta, spec.h, quad).params
            return s["rho"], s["q"]
        alpha = spec.n_patterns(N) / N
        if spec.kind == Kind.PERCEPTRON:
            s = solve_perceptron(alpha, spec.u, quad=quad).params
        else:
            s = solve_st(alpha, spec.u, spec.kappa, spec.h, quad=quad).params
    # (1/M) sum_m u'(S_m)^2 -> tau/alpha and the overlap -> r/alpha
    return s["tau"] / alpha, s["r"] / alpha


def _gauss_factor(g: str, mean, spread: float, nodes, weights) -> np.ndarray:
    """E_xi g(mean + spread xi) for an array of means, by Hermite quadrature."""
    vals = exact.battery_numpy(g, np.asarray(mean)[..., None] + spread * nodes)
    return (weights * vals).sum(axis=-1) / weights.sum()


@dataclass(frozen=True)
class ProjectionEstimator:
    battery: tuple
    rho: float
    q: float
    backend: str = "exact"
    chain: ChainConfig = DEFAULT_CHAIN
    Q: int = 61

    def __call__(self, spec, disorder, k, streams):
        n = disorder.n_sites
        dim = n if spec.kind.is_sk else disorder.M
        theta = streams.generator(ROLE_THETA).normal(0.0, 1.0 / math.sqrt(dim), (dim, k))
        if self.backend == "exact":
            summ = exact.enumerate(spec, disorder, 0, pairs=True, aux=True, theta=theta,
                                   battery=self.battery)
            mom = _exact_overlaps(spec, disorder, summ)
            vbar = summ.site_means if spec.kind.is_sk else summ.aux_means
            gibbs = summ.battery
        else:
            st = run_chain(spec, disorder, self.chain, 0, rngs=_replica_rngs(streams),
                           theta=theta, battery=self.battery)
            mom = _chain_overlaps(st)
            vbar = st.site_means if spec.kind.is_sk else st.aux_means
            gibbs = st.battery
        out = {}
        if spec.kind.is_sk:
            out.update(c_norm=mom["R11"], c_norm_sq=mom["R11_sq"], c_ov=mom["R12"],
                       c_ov_sq=mom["R12_sq"])
        else:
            f = n / dim  # the auxiliary moments are normalised by N, the projection by M
            out.update(c_norm=f * mom["auxn"], c_norm_sq=f * f * mom["auxn_sq"],
                       c_ov=f * mom["aux12"], c_ov_sq=f * f * mom["aux12_sq"])
        q_nodes = Quadrature(self.Q)
        x, w = q_nodes.hermite_nodes, q_nodes.hermite_weights
        proj = theta.T @ vbar
        s = math.sqrt(self.rho - self.q)
        for g in self.battery:
            pred1 = float(np.prod(_gauss_factor(g, proj, s, x, w)))
            # E_{z,xi} g(sqrt(q) z + sqrt(rho - q) xi), one factor per coordinate
            inner = _gauss_factor(g, math.sqrt(self.q) * x, s, x, w)
            pred2 = float(((w * inner).sum() / w.sum()) ** k)
            d1 = gibbs[g] - pred1
            d2 = gibbs[g] - pred2
            out.update({f"d1_{g}": d1, f"d1sq_{g}": d1 * d1, f"d2_{g}": d2, f"d2sq_{g}": d2 * d2})
        return out


def rate_d(N: int, y: float, c: float) -> float:
    """sqrt(3 N^2 y + 4 N c sqrt(y) + 2 N c^2)."""
    y = max(y, 0.0)
    return math.sqrt(3 * N * N * y + 4 * N * c * math.sqrt(y) + 2 * N * c * c)


@dataclass
class ProjectionStats:
    model: str
    N: int
    k: int
    n_disorders: int
    rho: float
    q: float
    battery: dict
    c1: float
    c1_se: float
    c2: float
    c2_se: float
    d1_rate: float
    d2_rate: float
    bound_shape: float
    backend: str = "exact"
    seed: int = 0
    aggregate: Optional[Aggregate] = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        d = asdict(replace(self, aggregate=None))
        d.pop("aggregate")
        return json.dumps(d)

    def csv_rows(self) -> list[dict]:
        base = {"model": self.model, "N": self.N, "k": self.k, "p": 1, "form": "",
                "n_disorders": self.n_disorders, "seed": self.seed}
        rows = []
        for g, d in self.battery.items():
            rows += [{**base, "form": "PARTIAL", "statistic": f"msd_{g}", "value": d["msd1"],
                      "se": d["msd1_se"]},
                     {**base, "form": "LIMITING", "statistic": f"mean_discrepancy_{g}",
                      "value": d["mean_d2"], "se": d["mean_d2_se"]},
                     {**base, "form": "LIMITING", "statistic": f"msd_{g}", "value": d["msd2"],
                      "se": d["msd2_se"]}]
        rows += [{**base, "statistic": "c1", "value": self.c1, "se": self.c1_se},
                 {**base, "statistic": "c2", "value": self.c2, "se": self.c2_se},
                 {**base, "statistic": "bound_shape", "value": self.bound_shape, "se": ""}]
        return rows


def projection_test(spec: ModelSpec, N: int, k: int, test_battery, n_disorders: int,
                    master_seed: int, backend: str = "auto", chain: Optional[ChainConfig] = None,
                    workers: Optional[int] = None, quad: Optional[Quadrature] = None,
                    on_record=None, done=None) -> ProjectionStats:
    """Discrepancies between <g(Theta^T x)> and its conditional-Gaussian predictions."""
    battery = tuple(test_battery)
    exact.battery_ids(battery)
    rho, q = projection_constants(spec, N, quad)
    if not 0 <= q < rho:
        raise ModelError(f"projection test needs 0 <= q < rho, got q={q}, rho={rho}")
    be = resolve_backend(spec, N, backend)
    est = ProjectionEstimator(battery, rho, q, be, chain or DEFAULT_CHAIN,
                              (quad or Quadrature()).Q)
    agg = disorder_average(spec, N, k, n_disorders, est, master_seed, workers,
                           on_record=on_record, done=done)
    c1, c1_se = agg.jackknife(lambda m: m["c_norm_sq"] - 2 * rho * m["c_norm"] + rho ** 2)
    c2, c2_se = agg.jackknife(lambda m: m["c_ov_sq"] - 2 * q * m["c_ov"] + q ** 2)
    dim = N if spec.kind.is_sk else spec.n_patterns(N)
    d1r = rate_d(dim, c1, rho)
    d2r = rate_d(dim, c2, q)
    tail = d2r if q > 0 else dim * max(c2, 0.0) ** 0.25
    per_g = {}
    for g in battery:
        per_g[g] = {"msd1": agg.mean(f"d1sq_{g}"), "msd1_se": agg.se(f"d1sq_{g}"),
                    "mean_d1": agg.mean(f"d1_{g}"), "mean_d1_se": agg.se(f"d1_{g}"),
                    "mean_d2": agg.mean(f"d2_{g}"), "mean_d2_se": agg.se(f"d2_{g}"),
                    "msd2": agg.mean(f"d2sq_{g}"), "msd2_se": agg.se(f"d2sq_{g}")}
    return ProjectionStats(spec.kind.value, N, k, agg.n, rho, q, per_g, c1, c1_se, c2, c2_se,
                           d1r, d2r, (d1r + tail) / (dim - 1), be, master_seed, agg)


# --- hypothesis checks and diagnostics ----------------------------------------------

def e_integral(domain: Domain, quadratic: float, linear: float, P) -> np.ndarray:
    """int exp(quadratic x^2 + (linear + P) x) mu(dx) for the domain's reference measure."""
    b = linear + np.asarray(P, dtype=np.float64)
    if domain == Domain.PM_ONE:
        return math.exp(quadratic) * np.cosh(b)
    if domain == Domain.BOX:
        return _box_integral(b, quadratic)
    if quadratic >= 0:
        return np.full(b.shape, np.inf)
    return math.sqrt(math.pi / -quadratic) * np.exp(-b * b / (4.0 * quadratic))


def e_ge1_check(spec: ModelSpec, N: int, k: int = 1, seed: int = 0,
                P_grid: Optional[np.ndarray] = None, quad: Optional[Quadrature] = None) -> float:
    """Smallest value over P in [-10, 10] and sites j <= k of the E >= 1 integral.

    The exponent is x^2 varrho^2 (Xi - Upsilon)/2 + f_j(x) + x P with the truncated RS
    solution; for ST the site term f_j uses the disorder's g_j.
    """
    P = np.linspace(-10.0, 10.0, 2001) if P_grid is None else np.asarray(P_grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidatedZoneWarning)
        sol = truncated_solution(spec, N, k, quad)
    sigma = sol.params.get("sigma") if spec.kind == Kind.ST else None
    decomp = cavity_decompose(spec, sample_disorder(spec, N, seed), k, sigma_minus=sigma)
    xi, ups = rs_constants(spec.kind, sol)
    quadratic = 0.5 * decomp.varrho ** 2 * (xi - ups) + decomp.site_quadratic
    return float(min(e_integral(spec.domain, quadratic, decomp.site_field[j], P).min()
                     for j in range(k)))


def abstract_constant(spec: ModelSpec, N: int, k: int = 2, p: int = 1, eps: float = 0.25,
                      quad: Optional[Quadrature] = None) -> float:
    """Diagnostic value of the constant C of the abstract local-independence bound.

    C = E int sum_j |x_j| exp(a (sum_j |x_j|)^2 + sum_j f_j(x_j)) mu^k(dx) with
    a = 4 k p^2 varrho^2 (D^2 + Xi)(1 + 4 eps_bar^2), eps_bar = 1/(2 eps) - 1.
    Returns inf when the integral diverges.
    """
    if not 0 < eps < 0.5:
        raise ModelError("eps must lie in (0, 1/2)")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidatedZoneWarning)
        sol = truncated_solution(spec, N, k, quad)
    xi, _ = rs_constants(spec.kind, sol)
    shrink = math.sqrt((N - k) / N)
    if spec.kind.is_sk:
        varrho, d2 = spec.beta * shrink, 1.0
    else:
        alpha_m = spec.n_patterns(N) / (N - k)
        varrho, d2 = 1.0, alpha_m * (shrink * spec.u.bound_D) ** 2
    eb = 1.0 / (2.0 * eps) - 1.0
    a = 4 * k * p * p * varrho ** 2 * (d2 + xi) * (1.0 + 4.0 * eb * eb)
    if spec.domain == Domain.PM_ONE:
        h = spec.h if spec.kind.is_sk else 0.0
        log_c = math.log(k) + a * k * k + k * math.log(math.cosh(h))
        return math.exp(log_c) if log_c < 709.0 else math.inf
    n_axis = {1: 64, 2: 48, 3: 24, 4: 12}[k]
    t, w = np.polynomial.legendre.leggauss(n_axis)
    if spec.domain == Domain.BOX:
        # mu uniform on [-1,1]; integrate each sign separately so |x| is smooth
        half = np.concatenate([-(t + 1) / 2, (t + 1) / 2])
        wh = np.concatenate([w, w]) / 4.0
        grids = np.meshgrid(*([half] * k), indexing="ij")
        wts = np.prod(np.meshgrid(*([wh] * k), indexing="ij"), axis=0)
        ab = sum(np.abs(g) for g in grids)
        fx = sum(spec.h * g for g in grids)
        with np.errstate(over="ignore"):
            return float((wts * ab * np.exp(a * ab * ab + fx)).sum())
    # ST: Lebesgue reference; E_g exp(h g x) = exp(h^2 x^2 / 2)
    b = spec.kappa - 0.5 * sol.params["sigma"] - 0.5 * spec.h ** 2
    if a * k >= b:
        return math.inf
    L = 12.0 / math.sqrt(b - a * k)
    pos = L * (t + 1) / 2
    wp = w * L / 2
    grids = np.meshgrid(*([pos] * k), indexing="ij")
    wts = np.prod(np.meshgrid(*([wp] * k), indexing="ij"), axis=0)
    ab = sum(grids)
    sq = sum(g * g for g in grids)
    return float(2 ** k * (wts * ab * np.exp(a * ab * ab - b * sq)).sum())


@dataclass(frozen=True)
class CavityFieldEstimator:
    def __call__(self, spec, disorder, k, streams):
        decomp = cavity_decompose(spec, disorder, 1)
        P = exact.cavity_enumerate(decomp).fields[0]
        return {"P": P - spec.h if spec.kind == Kind.SK_ISING else P}


def cavity_field_ks(spec: ModelSpec, N: int, n_disorders: int, master_seed: int,
                    workers: Optional[int] = None,
                    quad: Optional[Quadrature] = None) -> tuple[float, float]:
    """KS distance between the cavity values P_1 over disorders and N(0, varrho^2 Upsilon).

    Returns (statistic, p-value).  +-1 models with the exact backend only.
    """
    if not spec.kind.is_discrete:
        raise ModelError("cavity-field law check needs a +-1 model")
    agg = disorder_average(spec, N, 1, n_disorders, CavityFieldEstimator(), master_seed, workers)
    sol = truncated_solution(spec, N, 1, quad)
    _, ups = rs_constants(spec.kind, sol)
    varrho = spec.beta * math.sqrt((N - 1) / N) if spec.kind.is_sk else 1.0
    res = stats.kstest(agg.values["P"], "norm", args=(0.0, varrho * math.sqrt(ups)))
    return float(res.statistic), float(res.pvalue)


# --- output --------------------------------------------------------------------------

def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({c: r.get(c, "") for c in CSV_COLUMNS})

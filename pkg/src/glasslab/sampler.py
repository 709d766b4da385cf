"""MCMC estimates of Gibbs averages and disorder averages over many realisations.

Two replica chains run on the same disorder with independent random streams.
Updates are single-site and systematic-scan:

* +-1 spins: heat-bath (Glauber);
* spins on [-1,1]: heat-bath with the exact inverse CDF of the conditional
  density, which is exponential on the interval;
* real spins (ST): Gaussian random-walk Metropolis whose step is tuned towards
  acceptance 0.44 during burn-in and frozen afterwards.

Perceptron and ST chains keep the M fields S_m up to date at every accepted
move.  Uniform and normal variates are drawn in numpy, chunk by chunk, from
each replica's own generator and handed to the numba kernels.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .exact import MarginalTable, battery_ids, battery_g1
from .models import Disorder, Domain, Kind, ModelError, ModelSpec, sample_disorder
from .seeding import ROLE_REPLICA1, ROLE_REPLICA2, Streams, generator

TARGET_ACCEPTANCE = 0.44
MAX_TRACE = 1 << 21
_KIND_CODE = {Kind.SK_ISING: 0, Kind.SK_BOX: 1, Kind.PERCEPTRON: 2, Kind.ST: 3}


@dataclass(frozen=True)
class ChainConfig:
    n_sweeps: int
    burn_in: int
    thin: int = 1
    proposal_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_sweeps < 1 or self.burn_in < 1:
            raise ModelError("n_sweeps and burn_in must be positive")
        if self.burn_in >= self.n_sweeps:
            raise ModelError(f"burn_in={self.burn_in} must be smaller than n_sweeps={self.n_sweeps}")
        if self.thin < 1:
            raise ModelError("thin must be >= 1")
        if not self.proposal_std > 0:
            raise ModelError("proposal_std must be positive")

    @property
    def n_kept(self) -> int:
        return -(-(self.n_sweeps - self.burn_in) // self.thin)


def n_bins(n_kept: int) -> int:
    """Per-axis histogram bins: ceil(2 n^(1/3)) clamped to [16, 128]."""
    return int(min(128, max(16, math.ceil(2.0 * n_kept ** (1.0 / 3.0)))))


@dataclass(frozen=True)
class MarginalHistogram:
    """Binned k-dimensional marginal.

    The outermost bins along each axis are treated as open-ended, so the masses
    of any distribution on the real line sum to one.
    """

    k: int
    edges: tuple
    masses: np.ndarray

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=np.float64) for e in self.edges)
        if len(edges) != self.k:
            raise ModelError("need one edge vector per axis")
        for e in edges:
            if e.size < 2 or np.any(np.diff(e) <= 0):
                raise ModelError("histogram edges must be strictly increasing")
        m = np.asarray(self.masses, dtype=np.float64)
        if m.shape != tuple(e.size - 1 for e in edges):
            raise ModelError("mass array shape does not match the edges")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ModelError("histogram masses must be nonnegative and sum to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_samples(cls, samples: np.ndarray, edges) -> "MarginalHistogram":
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        k = samples.shape[1]
        # open-ended outer bins: histogramdd keeps the right edge in the last bin
        clipped = np.column_stack([np.clip(samples[:, j], e[0], e[-1])
                                   for j, e in enumerate(edges)])
        counts, _ = np.histogramdd(clipped, bins=list(edges))
        return cls(k, tuple(edges), counts / counts.sum())

    def to_dict(self) -> dict:
        return {"k": self.k, "edges": [e.tolist() for e in self.edges],
                "masses": self.masses.tolist()}


def default_edges(samples: np.ndarray, domain: Domain, bins: Optional[int] = None,
                  extra_range: Optional[tuple] = None) -> tuple:
    samples = np.atleast_2d(samples)
    nb = bins or n_bins(samples.shape[0])
    out = []
    for j in range(samples.shape[1]):
        if domain == Domain.BOX:
            out.append(np.linspace(-1.0, 1.0, nb + 1))
            continue
        lo, hi = float(samples[:, j].min()), float(samples[:, j].max())
        if extra_range is not None:
            lo, hi = min(lo, extra_range[0]), max(hi, extra_range[1])
        if hi <= lo:
            hi = lo + 1.0
        out.append(np.linspace(lo, hi, nb + 1))
    return tuple(out)


@dataclass(frozen=True)
class SampleStats:
    marginal: object
    site_means: np.ndarray
    overlap_mean: float
    overlap_sq: float
    norm_mean: float
    norm_sq: float
    aux_overlap_mean: float
    aux_norm_mean: float
    ess_min: float
    acceptance_rate: float
    n_kept: int
    aux_overlap_sq: float = 0.0
    aux_norm_sq: float = 0.0
    aux_means: Optional[np.ndarray] = None
    overlap_se: float = 0.0
    proposal_std: float = 0.0
    flags: tuple = ()
    moment4: float = float("nan")
    moment8: float = float("nan")
    battery: dict = field(default_factory=dict)
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> str:
        m = self.marginal.to_dict() if self.marginal is not None else None
        return json.dumps({
            "version": 1, "marginal": m, "site_means": self.site_means.tolist(),
            "overlap_mean": self.overlap_mean, "overlap_sq": self.overlap_sq,
            "overlap_se": self.overlap_se, "norm_mean": self.norm_mean, "norm_sq": self.norm_sq,
            "aux_overlap_mean": self.aux_overlap_mean, "aux_overlap_sq": self.aux_overlap_sq,
            "aux_norm_mean": self.aux_norm_mean, "aux_norm_sq": self.aux_norm_sq,
            "ess_min": self.ess_min, "acceptance_rate": self.acceptance_rate,
            "proposal_std": self.proposal_std, "n_kept": self.n_kept, "flags": list(self.flags),
            "moment4": self.moment4, "moment8": self.moment8, "battery": dict(self.battery)})


# --- numba kernels ----------------------------------------------------------

@numba.njit(cache=True)
def box_inverse_cdf(a, v):
    """Inverse CDF of the density prop. to exp(a x) on [-1,1] at level v."""
    if a == 0.0:
        return 2.0 * v - 1.0
    # log1p/expm1 keep the small-|a| limit 2v - 1 accurate
    if a > 0:
        return 1.0 + math.log1p((1.0 - v) * math.expm1(-2.0 * a)) / a
    b = -a
    return -(1.0 + math.log1p(v * math.expm1(-2.0 * b)) / b)


@numba.njit(cache=True)
def _sweep_sk(J, h, x, f, u):
    N = x.size
    for i in range(N):
        p = 1.0 / (1.0 + math.exp(-2.0 * (f[i] + h)))
        new = 1.0 if u[i] < p else -1.0
        if new != x[i]:
            d = new - x[i]
            for j in range(N):
                f[j] += J[i, j] * d
            x[i] = new
    return N


@numba.njit(cache=True)
def _sweep_box(J, h, x, f, u):
    N = x.size
    for i in range(N):
        new = box_inverse_cdf(f[i] + h, u[i])
        d = new - x[i]
        for j in range(N):
            f[j] += J[i, j] * d
        x[i] = new
    return N


@numba.njit(cache=True)
def _sweep_perc(G, ufun, params, shrink, x, S, u):
    N, M = G.shape
    for i in range(N):
        lp = 0.0
        lm = 0.0
        for m in range(M):
            base = S[m] - x[i] * G[i, m]
            lp += ufun(shrink * (base + G[i, m]), params)
            lm += ufun(shrink * (base - G[i, m]), params)
        p = 1.0 / (1.0 + math.exp(lm - lp))
        new = 1.0 if u[i] < p else -1.0
        if new != x[i]:
            d = new - x[i]
            for m in range(M):
                S[m] += d * G[i, m]
            x[i] = new
    return N


@numba.njit(cache=True)
def _sweep_st(G, gi, kappa, h, ufun, params, shrink, x, S, xi, u, step):
    N, M = G.shape
    acc = 0
    for i in range(N):
        prop = x[i] + step * xi[i]
        dx = prop - x[i]
        delta = -kappa * (prop * prop - x[i] * x[i]) + h * gi[i] * dx
        for m in range(M):
            delta += ufun(shrink * (S[m] + dx * G[i, m]), params) - ufun(shrink * S[m], params)
        if math.log(u[i]) < delta:
            for m in range(M):
                S[m] += dx * G[i, m]
            x[i] = prop
            acc += 1
    return acc


@numba.njit(cache=True)
def _chain_chunk(kind, J, G, gi, h, kappa, ufun, dufun, params, shrink,
                 x1, s1, x2, s2, U1, U2, Z1, Z2, steps, adapt, tune_t, keep, k,
                 rows, xsum, auxsum, acc_count, theta, bids, proj_aux, batsum):
    """Run ``len(keep)`` sweeps of both replicas, writing one row per kept sweep.

    Row layout: R12, R11 (rep 1), R11 (rep 2), aux overlap, aux norm (rep 1),
    aux norm (rep 2), first k coordinates of rep 1, then of rep 2.  With test
    functions ``bids`` the products prod_j g(theta^T v)_j are summed into
    ``batsum`` for both replicas (v = x, or the auxiliary vector if ``proj_aux``).
    """
    N = x1.size
    M = G.shape[1]
    nrow = 0
    u1 = np.empty(M)
    u2 = np.empty(M)
    nbat = bids.size
    kt = theta.shape[1]
    for s in range(keep.size):
        if kind == 0:
            a1 = _sweep_sk(J, h, x1, s1, U1[s])
            a2 = _sweep_sk(J, h, x2, s2, U2[s])
        elif kind == 1:
            a1 = _sweep_box(J, h, x1, s1, U1[s])
            a2 = _sweep_box(J, h, x2, s2, U2[s])
        elif kind == 2:
            a1 = _sweep_perc(G, ufun, params, shrink, x1, s1, U1[s])
            a2 = _sweep_perc(G, ufun, params, shrink, x2, s2, U2[s])
        else:
            a1 = _sweep_st(G, gi, kappa, h, ufun, params, shrink, x1, s1, Z1[s], U1[s], steps[0])
            a2 = _sweep_st(G, gi, kappa, h, ufun, params, shrink, x2, s2, Z2[s], U2[s], steps[1])
            if adapt:
                tune_t[0] += 1.0
                gamma = 1.0 / tune_t[0] ** 0.6
                steps[0] *= math.exp(gamma * (a1 / N - 0.44))
                steps[1] *= math.exp(gamma * (a2 / N - 0.44))
        if not adapt:
            acc_count[0] += a1 + a2
            acc_count[1] += 2 * N
        if keep[s]:
            r12 = 0.0
            r11a = 0.0
            r11b = 0.0
            for i in range(N):
                r12 += x1[i] * x2[i]
                r11a += x1[i] * x1[i]
                r11b += x2[i] * x2[i]
                xsum[i] += x1[i] + x2[i]
            rows[nrow, 0] = r12 / N
            rows[nrow, 1] = r11a / N
            rows[nrow, 2] = r11b / N
            if M > 0 and kind >= 2:
                a12 = 0.0
                na = 0.0
                nb = 0.0
                for m in range(M):
                    u1[m] = shrink * dufun(shrink * s1[m], params)
                    u2[m] = shrink * dufun(shrink * s2[m], params)
                    a12 += u1[m] * u2[m]
                    na += u1[m] * u1[m]
                    nb += u2[m] * u2[m]
                    auxsum[m] += u1[m] + u2[m]
                rows[nrow, 3] = a12 / N
                rows[nrow, 4] = na / N
                rows[nrow, 5] = nb / N
            else:
                rows[nrow, 3] = 0.0
                rows[nrow, 4] = 0.0
                rows[nrow, 5] = 0.0
            for j in range(k):
                rows[nrow, 6 + j] = x1[j]
                rows[nrow, 6 + k + j] = x2[j]
            if nbat > 0:
                for rep in range(2):
                    if proj_aux:
                        v = u1 if rep == 0 else u2
                    else:
                        v = x1 if rep == 0 else x2
                    proj = v @ theta
                    for b in range(nbat):
                        prod = 1.0
                        for j in range(kt):
                            prod *= battery_g1(bids[b], proj[j])
                        batsum[b] += prod
            nrow += 1
    return nrow


# --- diagnostics ---------------------------------------------------------------

def ess(trace: np.ndarray) -> float:
    """Effective sample size by Geyer's initial positive sequence."""
    x = np.asarray(trace, dtype=np.float64)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(np.dot(x, x) / n)
    if var <= 1e-300:
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    fx = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(fx * np.conj(fx), nfft)[:n] / n
    rho = acov / acov[0]
    tau = -1.0
    for m in range(0, n // 2):
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1.0 / n)
    return float(min(n, n / tau))


# --- chains --------------------------------------------------------------------

def _initial_state(spec: ModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.domain == Domain.PM_ONE:
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if spec.domain == Domain.BOX:
        return rng.uniform(-1.0, 1.0, n)
    return rng.standard_normal(n) / math.sqrt(2.0 * spec.kappa)


def run_chain(spec: ModelSpec, disorder: Disorder, cfg: ChainConfig, k: int = 2,
              rngs: Optional[tuple] = None, sample_csv: Optional[str] = None,
              keep_samples: bool = False, theta: Optional[np.ndarray] = None,
              battery=()) -> SampleStats:
    """Run two replica chains on one disorder and summarise the kept sweeps.

    ``theta`` with ``battery`` names adds the averages <prod_j g(theta^T v)_j>,
    with v the spins for SK kinds and the vector (u'(S_m))_m for Gardner kinds.
    """
    n = disorder.n_sites
    if not 0 <= k <= min(4, n):
        raise ModelError(f"need 0 <= k <= min(4, N), got {k}")
    if rngs is None:
        rngs = (generator(cfg.seed, 0, ROLE_REPLICA1), generator(cfg.seed, 0, ROLE_REPLICA2))
    g1, g2 = rngs
    kind = spec.kind
    code = _KIND_CODE[kind]
    empty2 = np.zeros((0, 0))
    empty1 = np.zeros(0)
    u = spec.u
    if kind.is_sk:
        J = np.ascontiguousarray(spec.beta / math.sqrt(n) * disorder.couplings)
        G = np.zeros((n, 0))
        gi = empty1
    else:
        J = empty2
        G = np.ascontiguousarray(disorder.gardner_matrix / math.sqrt(n))
        gi = disorder.field_gaussians if kind == Kind.ST else np.zeros(n)
        gi = np.ascontiguousarray(gi)
    M = G.shape[1]
    x1 = _initial_state(spec, n, g1)
    x2 = _initial_state(spec, n, g2)
    if kind.is_sk:
        s1, s2 = J @ x1, J @ x2
    else:
        s1, s2 = x1 @ G, x2 @ G
    bids = battery_ids(battery)
    if bids.size and theta is None:
        raise ModelError("battery statistics need a projection matrix theta")
    theta_arr = np.zeros((1, 1)) if theta is None else np.ascontiguousarray(theta, dtype=np.float64)
    if bids.size and theta_arr.shape[0] != (n if kind.is_sk else M):
        raise ModelError(f"theta has {theta_arr.shape[0]} rows; expected {n if kind.is_sk else M}")
    batsum = np.zeros(bids.size)
    steps = np.array([cfg.proposal_std, cfg.proposal_std])
    tune_t = np.zeros(1)
    acc_count = np.zeros(2, dtype=np.int64)
    xsum = np.zeros(n)
    auxsum = np.zeros(M)
    width = 6 + 2 * k
    chunk = max(1, min(cfg.n_sweeps, (1 << 18) // max(n, 1)))
    row_blocks = []
    csv_fh = open(sample_csv, "w") if sample_csv else None
    if csv_fh:
        csv_fh.write(",".join(f"x{j + 1}" for j in range(k)) + "\n")
    try:
        start = 0
        while start < cfg.n_sweeps:
            # never let a chunk straddle the end of burn-in
            stop = min(cfg.n_sweeps, start + chunk)
            if start < cfg.burn_in < stop:
                stop = cfg.burn_in
            c = stop - start
            idx = np.arange(start, stop)
            keep = (idx >= cfg.burn_in) & ((idx - cfg.burn_in) % cfg.thin == 0)
            U1 = g1.random((c, n))
            U2 = g2.random((c, n))
            if kind == Kind.ST:
                Z1 = g1.standard_normal((c, n))
                Z2 = g2.standard_normal((c, n))
            else:
                Z1 = Z2 = empty2
            rows = np.empty((int(keep.sum()), width))
            nr = _chain_chunk(code, J, G, gi, float(spec.h), float(spec.kappa), u.funcs[0],
                              u.funcs[1], u.params, float(u.shrink), x1, s1, x2, s2, U1, U2,
                              Z1, Z2, steps, start < cfg.burn_in, tune_t, keep, k, rows, xsum,
                              auxsum, acc_count, theta_arr, bids, not kind.is_sk, batsum)
            rows = rows[:nr]
            if csv_fh and nr:
                np.savetxt(csv_fh, rows[:, 6:6 + k], delimiter=",", fmt="%.17g")
            row_blocks.append(rows)
            start = stop
    finally:
        if csv_fh:
            csv_fh.close()
    rows = np.concatenate(row_blocks) if row_blocks else np.empty((0, width))
    nk = rows.shape[0]
    flags = []
    if spec.domain == Domain.PM_ONE and k > 0:
        cells = np.concatenate([rows[:, 6:6 + k], rows[:, 6 + k:6 + 2 * k]])
        idx = ((cells > 0).astype(np.int64) * (2 ** np.arange(k - 1, -1, -1))).sum(axis=1)
        counts = np.bincount(idx, minlength=2 ** k).astype(np.float64)
        marginal = MarginalTable(k, counts / counts.sum())
        samples = None
    elif k > 0:
        samples = np.concatenate([rows[:, 6:6 + k], rows[:, 6 + k:6 + 2 * k]])
        marginal = MarginalHistogram.from_samples(samples, default_edges(samples, spec.domain))
    else:
        marginal, samples = None, None
    traces = [rows[:MAX_TRACE, 0]] + [rows[:MAX_TRACE, 6 + j] for j in range(k)]
    if spec.domain != Domain.PM_ONE:
        traces.append(rows[:MAX_TRACE, 1])
    scale = nk / max(1, min(nk, MAX_TRACE))
    ess_vals = [ess(t) * scale for t in traces if t.size and np.ptp(t) > 0]
    ess_min = float(min(ess_vals)) if ess_vals else float(nk)
    r12 = rows[:, 0]
    r11 = np.concatenate([rows[:, 1], rows[:, 2]])
    auxn = np.concatenate([rows[:, 4], rows[:, 5]])
    if kind == Kind.ST:
        acc_rate = float(acc_count[0] / max(1, acc_count[1]))
        if not 0.1 <= acc_rate <= 0.9:
            flags.append(f"acceptance rate {acc_rate:.3f} outside [0.1, 0.9] after tuning")
    else:
        acc_rate = 1.0
    coords = rows[:, 6:6 + 2 * k]
    m4 = float((coords ** 4).mean()) if k else float("nan")
    m8 = float((coords ** 8).mean()) if k else float("nan")
    r12_ess = ess(r12[:MAX_TRACE]) * scale if nk > 3 and np.ptp(r12) > 0 else float(nk)
    return SampleStats(
        marginal=marginal, site_means=xsum / (2 * nk),
        overlap_mean=float(r12.mean()), overlap_sq=float((r12 ** 2).mean()),
        norm_mean=float(r11.mean()), norm_sq=float((r11 ** 2).mean()),
        aux_overlap_mean=float(rows[:, 3].mean()), aux_norm_mean=float(auxn.mean()),
        ess_min=ess_min, acceptance_rate=acc_rate, n_kept=nk,
        aux_overlap_sq=float((rows[:, 3] ** 2).mean()), aux_norm_sq=float((auxn ** 2).mean()),
        aux_means=auxsum / (2 * nk) if M else None,
        overlap_se=float(r12.std() / math.sqrt(max(r12_ess, 1.0))),
        proposal_std=float(steps.mean()), flags=tuple(flags),
        moment4=m4, moment8=m8,
        battery={battery[b]: float(batsum[b] / (2 * nk)) for b in range(bids.size)},
        samples=samples if keep_samples else None)


# --- disorder averages -------------------------------------------------------------

class DisorderAverageError(RuntimeError):
    pass


@dataclass
class Aggregate:
    """Per-statistic disorder averages with jackknife standard errors.

    ``values[name]`` holds the per-disorder values ordered by disorder index.
    """

    n: int
    indices: np.ndarray
    values: dict
    failures: list
    derived: dict = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def var(self, name: str) -> float:
        return float(np.var(self.values[name], ddof=1))

    def se(self, name: str) -> float:
        return jackknife(self.values, lambda m: m[name])[1]

    def jackknife(self, fn: Callable[[dict], object]) -> tuple:
        return jackknife(self.values, fn)

    def summary(self) -> dict:
        out = {name: (self.mean(name), self.se(name)) for name in self.values}
        out.update(self.derived)
        return out


def jackknife(values: dict, fn: Callable[[dict], object]) -> tuple:
    """Delete-one jackknife of a function of disorder means.

    ``fn`` receives a mapping name -> mean and may use numpy operations; it is
    evaluated on the full means and, vectorised, on the n leave-one-out means.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
    n = next(iter(arrays.values())).size
    if n < 2:
        raise DisorderAverageError("jackknife needs at least two disorders")
    full = {k: float(np.mean(v)) for k, v in arrays.items()}
    loo = {k: (v.sum() - v) / (n - 1) for k, v in arrays.items()}
    theta = fn(full)
    t_loo = np.asarray(fn(loo), dtype=np.float64)
    t_bar = t_loo.mean(axis=0)
    se = np.sqrt((n - 1) / n * ((t_loo - t_bar) ** 2).sum(axis=0))
    if np.ndim(theta) == 0:
        return float(theta), float(se)
    return np.asarray(theta), se


def _run_one(args):
    spec, n_sites, k, estimator, master_seed, index = args
    streams = Streams(master_seed, index)
    try:
        disorder = sample_disorder(spec, n_sites, streams.disorder_seed)
        out = estimator(spec, disorder, k, streams)
        return index, {name: float(v) for name, v in out.items()}, None
    except Exception as exc:  # recorded, excluded and counted by the caller
        return index, None, f"{type(exc).__name__}: {exc}"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GLASSLAB_WORKERS", "1")))
    except ValueError:
        return 1


def disorder_average(spec: ModelSpec, N: int, k: int, n_disorders: int, estimator,
                     master_seed: int, workers: Optional[int] = None,
                     fail_limit: float = 0.1, on_record: Optional[Callable] = None,
                     done: Optional[dict] = None) -> Aggregate:
    """Apply ``estimator(spec, disorder, k, streams) -> {name: value}`` to many disorders.

    Disorder ``d`` is generated from the streams keyed by (master_seed, d), so
    the result does not depend on the worker count or scheduling.  Records in
    ``done`` (index -> values) are reused instead of recomputed.
    """
    if n_disorders < 2:
        raise ModelError("n_disorders must be at least 2")
    workers = default_workers() if workers is None else max(1, int(workers))
    done = dict(done or {})
    todo = [d for d in range(n_disorders) if d not in done]
    results = {d: (v, None) for d, v in done.items() if d < n_disorders}
    jobs = [(spec, N, k, estimator, master_seed, d) for d in todo]
    if workers == 1 or len(jobs) < 2:
        it = map(_run_one, jobs)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        it = pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * workers)))
    try:
        for index, vals, err in it:
            results[index] = (vals, err)
            if on_record is not None:
                on_record(index, vals, err)
    finally:
        if pool is not None:
            pool.shutdown()
    failures = [(d, err) for d, (v, err) in sorted(results.items()) if err is not None]
    if len(failures) > fail_limit * n_disorders:
        raise DisorderAverageError(f"{len(failures)} of {n_disorders} disorders failed "
                                   f"(limit {fail_limit:.0%}); first: {failures[0][1]}")
    ok = [d for d, (v, err) in sorted(results.items()) if err is None]
    if len(ok) < 2:
        raise DisorderAverageError("fewer than two successful disorders")
    names = list(results[ok[0]][0])
    values = {name: np.array([results[d][0][name] for d in ok]) for name in names}
    return Aggregate(len(ok), np.array(ok), values, failures)


@dataclass(frozen=True)
class ChainEstimator:
    """Estimator that runs :func:`run_chain` on each disorder (replica streams per disorder)."""

    cfg: ChainConfig

    def __call__(self, spec, disorder, k, streams):
        st = run_chain(spec, disorder, self.cfg, k,
                       rngs=(streams.generator(ROLE_REPLICA1), streams.generator(ROLE_REPLICA2)))
        out = {"R12": st.overlap_mean, "R12_sq": st.overlap_sq, "R11": st.norm_mean,
               "R11_sq": st.norm_sq, "aux12": st.aux_overlap_mean, "aux12_sq": st.aux_overlap_sq,
               "auxn": st.aux_norm_mean, "auxn_sq": st.aux_norm_sq, "ess_min": st.ess_min,
               "acceptance": st.acceptance_rate}
        for i, m in enumerate(st.site_means[:k]):
            out[f"mean_x{i + 1}"] = m
        return out

"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.  Criteria 4, 5 and 7 are
long disorder sweeps (tens of minutes on one core); the rest take seconds.
"""

import math
import time
import warnings

import numpy as np
import pytest
from scipy import optimize

from glasslab import exact, rs, verify
from glasslab.models import Kind, ModelSpec, sample_disorder
from glasslab.potentials import logcosh_potential, zero_potential
from glasslab.rs import ValidatedZoneWarning, residual
from glasslab.sampler import ChainConfig, run_chain
from glasslab.verify import Form

SK_LI = ModelSpec(Kind.SK_ISING, beta=0.25, h=0.3)
LI_GRID = (8, 12, 16, 20)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


def _steps_resolved(values, ses, decreasing=True):
    """Each consecutive step moves in the required direction by > 2 combined s.e."""
    out = []
    for a, b, sa, sb in zip(values, values[1:], ses, ses[1:]):
        step = (a - b) if decreasing else (b - a)
        out.append(step > 2 * math.hypot(sa, sb))
    return out


@pytest.fixture(scope="module")
def li_sweep_c4():
    t0 = time.time()
    reps = verify.li_sweep(SK_LI, LI_GRID, 2, 1, 2000, Form.PARTIAL, master_seed=4)
    return reps, time.time() - t0


# --- 1 ---------------------------------------------------------------------------------

def test_c1_gray_code_oracle(verdict):
    from glasslab.potentials import tanh_potential
    specs = (ModelSpec(Kind.SK_ISING, beta=0.7, h=0.3),
             ModelSpec(Kind.PERCEPTRON, alpha=0.6, u=tanh_potential(0.8)))
    t0 = time.time()
    worst = 0.0
    for spec in specs:
        for seed in range(50):
            d = sample_disorder(spec, 10, seed=seed)
            a = exact.enumerate(spec, d, k=2)
            b = exact.naive_enumerate(spec, d, k=2)
            pairs = [(a.log_partition, b.log_partition), (a.site_means, b.site_means),
                     (a.pair_corr, b.pair_corr), (a.marginal.probs, b.marginal.probs)]
            for x, y in pairs:
                x, y = np.atleast_1d(x), np.atleast_1d(y)
                # normwise relative error: near-zero correlations carry ~1e-16 absolute
                # round-off in either enumerator, so entrywise ratios measure only noise
                worst = max(worst, float(np.max(np.abs(x - y)) / np.max(np.abs(y))))
    elapsed = time.time() - t0
    verdict(1, worst <= 1e-12 and elapsed < 10,
            f"max relative error {worst:.2e} over 100 instances, {elapsed:.1f} s")


# --- 2 ---------------------------------------------------------------------------------

def _sk_bisection_oracle(beta, h):
    z, w = np.polynomial.hermite_e.hermegauss(200)
    w = w / w.sum()
    f = lambda q: q - float(np.dot(w, np.tanh(beta * math.sqrt(max(q, 0.0)) * z + h) ** 2))
    return optimize.brentq(f, 1e-300, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def test_c2_rs_certification(verdict):
    t0 = time.time()
    worst_q, worst_res = 0.0, 0.0
    for beta in (0.1, 0.25, 0.4):
        for h in (0.2, 0.5, 1.0):
            sol = rs.solve_sk(beta, h)
            worst_q = max(worst_q, abs(sol["q"] - _sk_bisection_oracle(beta, h)))
            worst_res = max(worst_res, residual(Kind.SK_ISING, sol.params, sol.inputs))
    closed = [abs(rs.solve_sk(0.0, h)["q"] - math.tanh(h) ** 2) for h in (0.2, 0.5, 1.0)]
    perc = rs.solve_perceptron(0.5, zero_potential())
    st = rs.solve_st(0.5, zero_potential(), 1.5, 0.4)
    trivial = ((perc["q"], perc["r"], perc["tau"]) == (0.0, 0.0, 0.0)
               and st["r"] == st["tau"] == st["sigma"] == 0.0 and st["R"] == 3.0
               and abs(st["rho"] - (1 / 3.0 + 0.16 / 9.0)) < 1e-15
               and abs(st["q"] - 0.16 / 9.0) < 1e-15)
    elapsed = time.time() - t0
    ok = worst_q <= 1e-8 and worst_res <= 1e-9 and max(closed) <= 1e-8 and trivial and elapsed < 5
    verdict(2, ok, f"|q - oracle| {worst_q:.1e}, residual {worst_res:.1e}, "
                   f"beta=0 error {max(closed):.1e}, zero-potential forms {trivial}, {elapsed:.1f} s")


# --- 3 ---------------------------------------------------------------------------------

def test_c3_st_invariants(verdict):
    grid = [(0.25, 1.0, 0.0), (0.25, 2.0, 0.5), (0.5, 1.0, 0.3), (0.5, 1.5, 0.8),
            (0.5, 3.0, 0.0), (1.0, 1.0, 0.2), (1.0, 2.0, 0.6), (1.0, 4.0, 1.0),
            (2.0, 1.5, 0.4), (2.0, 3.0, 0.9)]
    bad = []
    with warnings.catch_warnings():
        warnings.simplefilter("error", ValidatedZoneWarning)
        for alpha, kappa, h in grid:
            sol = rs.solve_st(alpha, logcosh_potential(0.5), kappa, h)
            p = sol.params
            if not (sol.converged and p["r"] >= p["sigma"] + p["tau"] - 1e-9 and p["R"] > 0
                    and 0 <= p["q"] <= p["rho"]):
                bad.append((alpha, kappa, h))
    verdict(3, not bad, f"{len(grid) - len(bad)}/{len(grid)} solutions satisfy the invariants")


# --- 4 ---------------------------------------------------------------------------------

def test_c4_local_independence_decay(verdict, li_sweep_c4):
    reps, elapsed = li_sweep_c4
    vals = [r.tv_moment_2p for r in reps]
    ses = [r.tv_moment_se for r in reps]
    steps = _steps_resolved(vals, ses)
    fit = verify.fit_loglog([r.N for r in reps], [r.aggregate.values["tv2p"] for r in reps])
    ok = all(steps) and fit.ci_high < 0
    table = ", ".join(f"N={r.N}: {v:.3e}+-{s:.1e}" for r, v, s in zip(reps, vals, ses))
    verdict(4, ok, f"E TV^2 {table}; slope {fit.slope:.2f} "
                   f"[{fit.ci_low:.2f}, {fit.ci_high:.2f}], {elapsed:.0f} s")


# --- 5 ---------------------------------------------------------------------------------

def test_c5_decomposition_gap_rate(verdict):
    spec = ModelSpec(Kind.SK_ISING, beta=0.3, h=0.4)
    t0 = time.time()
    small, large = verify.gap_sweep(spec, (12, 24), 2, 1, 5000, master_seed=5)
    ratio, se = verify.gap_ratio(small, large)
    verdict(5, 0.35 <= ratio <= 0.65,
            f"gap(24)/gap(12) = {ratio:.3f} +- {se:.3f}, {time.time() - t0:.0f} s")


# --- 6 ---------------------------------------------------------------------------------

def test_c6_overlap_variance(verdict, li_sweep_c4):
    reps, _ = li_sweep_c4
    steps = _steps_resolved([r.var_R12 for r in reps], [r.var_R12_se for r in reps])
    free = ModelSpec(Kind.SK_ISING, beta=0.0, h=0.3)
    free_ok = []
    for r in verify.li_sweep(free, LI_GRID, 2, 1, 2000, Form.PARTIAL, master_seed=6):
        target = (1 - math.tanh(0.3) ** 4) / r.N
        # at beta=0 every disorder gives the same value, so the jackknife s.e. is pure
        # round-off; the band never drops below a few ulps of the target
        band = max(4 * r.var_R12_se, 64 * np.finfo(float).eps * target)
        free_ok.append(bool(abs(r.var_R12 - target) <= band))
    table = ", ".join(f"{r.var_R12:.4f}" for r in reps)
    verdict(6, all(steps) and all(free_ok),
            f"Var R12 ({table}) steps resolved {steps}; beta=0 matches {free_ok}")


# --- 7 ---------------------------------------------------------------------------------

def test_c7_projection_law(verdict):
    t0 = time.time()
    stats = [verify.projection_test(SK_LI, N, 2, ["tanh", "const"], 2000, master_seed=7)
             for N in LI_GRID]
    msd = [s.battery["tanh"]["msd1"] for s in stats]
    ses = [s.battery["tanh"]["msd1_se"] for s in stats]
    steps = _steps_resolved(msd, ses)
    const_zero = all(s.battery["const"]["msd1"] == 0.0 for s in stats)
    table = ", ".join(f"{m:.3e}+-{s:.1e}" for m, s in zip(msd, ses))
    verdict(7, all(steps) and const_zero,
            f"tanh msd ({table}) steps {steps}; constant exactly 0: {const_zero}, "
            f"{time.time() - t0:.0f} s")


# --- 8 ---------------------------------------------------------------------------------

def _batch_se(x, n_batches=50):
    m = np.array([b.mean() for b in np.array_split(x, n_batches)])
    return float(m.std(ddof=1) / math.sqrt(n_batches))


def _band_check(spec, n, n_sweeps, sigmas, seed):
    d = sample_disorder(spec, n, seed=seed)
    k = min(n, 3)
    table = exact.exact_marginal(spec, d, k)
    st = run_chain(spec, d, ChainConfig(n_sweeps + 1000, 1000, thin=10, seed=seed), k=k)
    draws = 2 * st.n_kept
    band = sigmas * np.sqrt(table.probs * (1 - table.probs) / draws)
    return bool(np.all(np.abs(st.marginal.probs - table.probs) <= band)), st.n_kept


def test_c8_sampler_correctness(verdict):
    t0 = time.time()
    spec = ModelSpec(Kind.SK_ISING, beta=0.8, h=0.3)
    ok3, _ = _band_check(spec, 3, 10_000_000, 4, 31)
    ok12, kept = _band_check(ModelSpec(Kind.SK_ISING, beta=0.3, h=0.4), 12, 10_000_000, 3, 32)
    kappa = 1.25
    gspec = ModelSpec(Kind.ST, alpha=0.5, kappa=kappa, h=0.0, u=zero_potential())
    d = sample_disorder(gspec, 6, seed=33)
    st = run_chain(gspec, d, ChainConfig(200_000, 2_000, seed=33), k=1, keep_samples=True)
    x2 = st.samples[: st.samples.shape[0] // 2, 0] ** 2  # first replica
    site_var = float(x2.mean())
    var_ok = abs(site_var - 1 / (2 * kappa)) <= 4 * _batch_se(x2)
    elapsed = time.time() - t0
    verdict(8, ok3 and ok12 and var_ok and elapsed < 300,
            f"N=3 4-sigma {ok3}; N=12 3-sigma at {kept} kept per replica {ok12}; "
            f"ST variance {site_var:.4f} vs {1 / (2 * kappa):.4f} {var_ok}; {elapsed:.0f} s")


# --- 9 ---------------------------------------------------------------------------------

def test_c9_determinism(verdict):
    spec = ModelSpec(Kind.SK_ISING, beta=0.4, h=0.2)
    runs = [verify.li_sweep(spec, (8, 10), 2, 1, 40, Form.PARTIAL, master_seed=9, workers=w)
            for w in (1, 1, 8)]
    dicts = [[r.to_dict() for r in rep] for rep in runs]
    raw = [[r.aggregate.values["tv"].tobytes() for r in rep] for rep in runs]
    ok = dicts[0] == dicts[1] == dicts[2] and raw[0] == raw[1] == raw[2]
    verdict(9, ok, "rerun and 1-vs-8 worker sweeps bit-identical" if ok else "outputs differ")

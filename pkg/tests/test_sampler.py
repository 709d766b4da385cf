import math

import numpy as np
import pytest
from scipy import integrate

from glasslab import exact, rs
from glasslab.models import Kind, ModelError, ModelSpec, neg_hamiltonian, sample_disorder
from glasslab.potentials import logcosh_potential, tanh_potential, zero_potential
from glasslab.sampler import (ChainConfig, ChainEstimator, DisorderAverageError,
                              MarginalHistogram, box_inverse_cdf, disorder_average, ess,
                              jackknife, n_bins, run_chain)
from glasslab.seeding import generator


def batch_se(x, n_batches=50):
    x = np.asarray(x)
    b = x[: x.size // n_batches * n_batches].reshape(n_batches, -1).mean(axis=1)
    return b.std(ddof=1) / math.sqrt(n_batches)


def test_chain_config_validation():
    with pytest.raises(ModelError):
        ChainConfig(100, 100)
    with pytest.raises(ModelError):
        ChainConfig(100, 0)
    with pytest.raises(ModelError):
        ChainConfig(100, 10, thin=0)
    with pytest.raises(ModelError):
        ChainConfig(100, 10, proposal_std=0.0)
    assert ChainConfig(110, 10, thin=3).n_kept == 34


def test_n_bins_clamp():
    assert n_bins(10) == 16
    assert n_bins(100_000) == math.ceil(2 * 100_000 ** (1 / 3))
    assert n_bins(10 ** 9) == 128


def test_histogram_contract():
    edges = (np.linspace(-1, 1, 5),)
    h = MarginalHistogram.from_samples(np.array([[-5.0], [0.1], [0.2], [7.0]]), edges)
    np.testing.assert_allclose(h.masses, [0.25, 0.0, 0.5, 0.25])
    with pytest.raises(ModelError):
        MarginalHistogram(1, (np.array([0.0, 0.0, 1.0]),), np.array([0.5, 0.5]))
    with pytest.raises(ModelError):
        MarginalHistogram(1, edges, np.full(4, 0.3))


def test_box_inverse_cdf():
    for a in (-3.0, -1e-9, -1e-14, 0.0, 1e-7, 0.7, 25.0, 700.0):
        for v in (0.01, 0.3, 0.5, 0.9):
            x = box_inverse_cdf(a, v)
            den = integrate.quad(lambda t: math.exp(a * t), -1, 1)[0]
            cdf = integrate.quad(lambda t: math.exp(a * t), -1, x)[0] / den
            assert cdf == pytest.approx(v, abs=1e-9)


def test_ess_of_iid_and_correlated_traces():
    rng = np.random.default_rng(1)
    iid = rng.standard_normal(20_000)
    assert 0.8 * iid.size < ess(iid) < 1.2 * iid.size
    phi = 0.9
    ar = np.empty(50_000)
    ar[0] = 0.0
    noise = rng.standard_normal(ar.size)
    for t in range(1, ar.size):
        ar[t] = phi * ar[t - 1] + noise[t]
    expected = ar.size * (1 - phi) / (1 + phi)
    assert 0.7 * expected < ess(ar) < 1.3 * expected


def test_free_spins_have_tanh_means():
    spec = ModelSpec(Kind.SK_ISING, beta=0.0, h=0.5)
    d = sample_disorder(spec, 10, seed=1)
    st = run_chain(spec, d, ChainConfig(20_000, 100, seed=3), k=2)
    se = math.sqrt((1 - math.tanh(0.5) ** 2) / (2 * st.n_kept * 10))
    assert abs(st.site_means.mean() - math.tanh(0.5)) < 4 * se
    se1 = math.sqrt((1 - math.tanh(0.5) ** 2) / (2 * st.n_kept))
    assert np.all(np.abs(st.site_means - math.tanh(0.5)) < 4 * se1)
    assert st.acceptance_rate == 1.0 and st.norm_mean == 1.0


def test_gaussian_st_variance():
    spec = ModelSpec(Kind.ST, M=8, kappa=1.0, h=0.0, u=zero_potential())
    d = sample_disorder(spec, 8, seed=2)
    st = run_chain(spec, d, ChainConfig(60_000, 2_000, seed=4), k=2, keep_samples=True)
    half = st.samples.shape[0] // 2
    x2 = st.samples[:half, 0] ** 2
    assert abs(x2.mean() - 0.5) < 4 * batch_se(x2)
    assert 0.1 <= st.acceptance_rate <= 0.9 and st.flags == ()


def test_sk_chain_matches_enumeration():
    spec = ModelSpec(Kind.SK_ISING, beta=0.3, h=0.4)
    d = sample_disorder(spec, 12, seed=5)
    table = exact.exact_marginal(spec, d, 2)
    # thinning by 10 sweeps leaves nearly independent draws at this temperature
    st = run_chain(spec, d, ChainConfig(1_001_000, 1_000, thin=10, seed=6), k=2)
    n = 2 * st.n_kept
    band = 3 * np.sqrt(table.probs * (1 - table.probs) / n)
    assert np.all(np.abs(st.marginal.probs - table.probs) <= band)


def test_perceptron_chain_matches_enumeration():
    spec = ModelSpec(Kind.PERCEPTRON, alpha=0.6, u=tanh_potential(0.8))
    d = sample_disorder(spec, 10, seed=9)
    s = exact.enumerate(spec, d, k=2)
    st = run_chain(spec, d, ChainConfig(100_000, 1_000, seed=2), k=2)
    r12, r12sq, _, _ = exact.overlap_moments(s)
    assert abs(st.overlap_mean - r12) < 5 * st.overlap_se
    a12, _, an, _ = exact.aux_overlap_moments(s, 10)
    assert st.aux_norm_mean == pytest.approx(an, rel=0.02)
    assert st.aux_overlap_mean == pytest.approx(a12, abs=0.02 * an)
    np.testing.assert_allclose(st.aux_means, s.aux_means, atol=0.03)


def test_box_chain_free_spins():
    spec = ModelSpec(Kind.SK_BOX, beta=0.0, h=0.8)
    d = sample_disorder(spec, 6, seed=3)
    st = run_chain(spec, d, ChainConfig(40_000, 100, seed=1), k=1)
    m = 1 / math.tanh(0.8) - 1 / 0.8
    var = 1 - 2 / (0.8 * math.tanh(0.8)) + 2 / 0.64 - m * m
    assert abs(st.site_means.mean() - m) < 4 * math.sqrt(var / (2 * st.n_kept * 6))
    assert st.marginal.masses.sum() == pytest.approx(1.0, abs=1e-9)


def test_st_strong_concavity(rng):
    kappa = 1.3
    spec = ModelSpec(Kind.ST, alpha=0.8, kappa=kappa, h=0.4, u=logcosh_potential(0.7))
    d = sample_disorder(spec, 15, seed=8)
    for _ in range(200):
        x, y = 2 * rng.standard_normal((2, 15))
        lhs = -neg_hamiltonian(spec, d, (x + y) / 2)
        rhs = 0.5 * (-neg_hamiltonian(spec, d, x) - neg_hamiltonian(spec, d, y))
        assert lhs <= rhs - kappa * np.sum(((x - y) / 2) ** 2) + 1e-9


def test_replica_label_swap():
    spec = ModelSpec(Kind.SK_ISING, beta=0.5, h=0.2)
    d = sample_disorder(spec, 14, seed=1)
    cfg = ChainConfig(20_000, 500)
    a = run_chain(spec, d, cfg, rngs=(generator(3, 0, 1), generator(3, 0, 2)))
    b = run_chain(spec, d, cfg, rngs=(generator(3, 0, 2), generator(3, 0, 1)))
    assert a.overlap_mean == pytest.approx(b.overlap_mean, abs=1e-12)
    c = run_chain(spec, d, cfg, rngs=(generator(4, 0, 1), generator(4, 0, 2)))
    assert abs(a.overlap_mean - c.overlap_mean) < 4 * math.hypot(a.overlap_se, c.overlap_se)


def test_sample_csv_and_json(tmp_path):
    spec = ModelSpec(Kind.SK_BOX, beta=0.4, h=0.1)
    d = sample_disorder(spec, 5, seed=1)
    path = tmp_path / "s.csv"
    st = run_chain(spec, d, ChainConfig(60, 10, thin=5), k=2, sample_csv=str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2" and len(lines) == 1 + st.n_kept
    assert '"n_kept": 10' in st.to_json()


# --- disorder averages -----------------------------------------------------------

class ExactR12:
    def __call__(self, spec, disorder, k, streams):
        s = exact.enumerate(spec, disorder, k=0)
        r12, r12sq, _, _ = exact.overlap_moments(s)
        return {"R12": r12, "R12_sq": r12sq}


class Flaky:
    def __init__(self, every):
        self.every = every

    def __call__(self, spec, disorder, k, streams):
        if streams.index % self.every == 0:
            raise RuntimeError("boom")
        return {"x": float(streams.index)}


def test_variance_at_infinite_temperature():
    spec = ModelSpec(Kind.SK_ISING, beta=0.0, h=0.5)
    agg = disorder_average(spec, 16, 0, 100, ChainEstimator(ChainConfig(4_000, 100)), 12)
    var, se = agg.jackknife(lambda m: m["R12_sq"] - m["R12"] ** 2)
    assert abs(var - (1 - math.tanh(0.5) ** 4) / 16) < 4 * se


def test_disorder_average_deterministic_and_worker_invariant():
    spec = ModelSpec(Kind.SK_ISING, beta=0.6, h=0.1)
    a = disorder_average(spec, 9, 0, 20, ExactR12(), 5, workers=1)
    b = disorder_average(spec, 9, 0, 20, ExactR12(), 5, workers=1)
    c = disorder_average(spec, 9, 0, 20, ExactR12(), 5, workers=2)
    for other in (b, c):
        np.testing.assert_array_equal(a.values["R12"], other.values["R12"])
        assert a.summary() == other.summary()


def test_disorder_average_resumes_from_done():
    spec = ModelSpec(Kind.SK_ISING, beta=0.6, h=0.1)
    full = disorder_average(spec, 8, 0, 10, ExactR12(), 2)
    seen = []
    done = {i: {"R12": full.values["R12"][i], "R12_sq": full.values["R12_sq"][i]}
            for i in range(6)}
    again = disorder_average(spec, 8, 0, 10, ExactR12(), 2, done=done,
                             on_record=lambda i, v, e: seen.append(i))
    assert seen == [6, 7, 8, 9]
    np.testing.assert_array_equal(again.values["R12"], full.values["R12"])


def test_failure_policy():
    spec = ModelSpec(Kind.SK_ISING, beta=0.1)
    agg = disorder_average(spec, 4, 0, 20, Flaky(10), 1)
    assert agg.n_failed == 2 and agg.n == 18
    assert 0 not in agg.indices and 10 not in agg.indices
    with pytest.raises(DisorderAverageError):
        disorder_average(spec, 4, 0, 20, Flaky(5), 1)
    with pytest.raises(ModelError):
        disorder_average(spec, 4, 0, 1, Flaky(5), 1)


def test_jackknife_of_mean_is_standard_error():
    x = np.random.default_rng(3).standard_normal(200)
    val, se = jackknife({"x": x}, lambda m: m["x"])
    assert val == pytest.approx(x.mean())
    assert se == pytest.approx(x.std(ddof=1) / math.sqrt(200), rel=1e-10)


def test_overlap_approaches_rs_value():
    spec = ModelSpec(Kind.SK_ISING, beta=0.25, h=0.3)
    q = rs.solve_sk(0.25, 0.3)["q"]
    agg = disorder_average(spec, 24, 0, 400, ChainEstimator(ChainConfig(3_000, 300)), 77)
    assert abs(agg.mean("R12") - q) < 4 * agg.se("R12")


def test_overlap_bias_shrinks():
    # the finite-size bias is about -0.0035/N here, so it is resolved with exact
    # averages over 10^5 disorders at N = 6 and 12
    spec = ModelSpec(Kind.SK_ISING, beta=0.25, h=0.3)
    q = rs.solve_sk(0.25, 0.3)["q"]
    bias, se = [], []
    for N in (6, 12):
        v = np.empty(100_000)
        for i in range(v.size):
            s = exact.enumerate(spec, sample_disorder(spec, N, i), k=0, pairs=False)
            v[i] = s.site_means @ s.site_means / N
        bias.append(v.mean() - q)
        se.append(v.std(ddof=1) / math.sqrt(v.size))
    assert abs(bias[0]) - abs(bias[1]) > 2 * math.hypot(*se)

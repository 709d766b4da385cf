import math

import numpy as np
import pytest

from glasslab import exact
from glasslab.exact import MarginalTable, cavity_enumerate, cavity_fields, overlap_moments
from glasslab.models import (Disorder, Domain, Kind, ModelError, ModelSpec, SpinConfiguration,
                             cavity_decompose, decomposed_energy, neg_hamiltonian,
                             sample_disorder)
from glasslab.potentials import tanh_potential

SK = ModelSpec(Kind.SK_ISING, beta=0.3, h=0.4)
PERC = ModelSpec(Kind.PERCEPTRON, alpha=0.5, u=tanh_potential(0.7))


def all_configs(n):
    idx = np.arange(2 ** n)
    return (((idx[:, None] >> np.arange(n)[None, :]) & 1) * 2 - 1).astype(float)


def test_single_free_spin():
    spec = ModelSpec(Kind.SK_ISING, beta=1.0, h=0.7)
    d = Disorder(1, 0, couplings=np.zeros((1, 1)))
    s = exact.enumerate(spec, d, k=1)
    assert s.log_partition == pytest.approx(math.log(2 * math.cosh(0.7)), abs=1e-14)
    assert s.site_means[0] == pytest.approx(math.tanh(0.7), abs=1e-14)


@pytest.mark.parametrize("spec", [SK, PERC, ModelSpec(Kind.SK_ISING, beta=1.5, h=-0.2)])
def test_gray_code_matches_naive(spec):
    for seed in range(3):
        d = sample_disorder(spec, 10, seed=seed)
        a = exact.enumerate(spec, d, k=3)
        b = exact.naive_enumerate(spec, d, k=3)
        assert a.log_partition == pytest.approx(b.log_partition, rel=1e-12)
        np.testing.assert_allclose(a.site_means, b.site_means, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.pair_corr, b.pair_corr, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.marginal.probs, b.marginal.probs, rtol=1e-12, atol=1e-15)
        if spec.kind == Kind.PERCEPTRON:
            np.testing.assert_allclose(a.aux_means, b.aux_means, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(a.aux_pair, b.aux_pair, rtol=1e-12, atol=1e-14)
            assert a.aux_norm_mean == pytest.approx(b.aux_norm_mean, rel=1e-12)
            assert a.aux_norm_sq == pytest.approx(b.aux_norm_sq, rel=1e-12)


def test_long_walk_stays_accurate():
    # 2^18 flips crosses many resynchronisation blocks
    spec = ModelSpec(Kind.SK_ISING, beta=0.9, h=0.1)
    d = sample_disorder(spec, 18, seed=3)
    a = exact.enumerate(spec, d, k=2)
    X = all_configs(18)
    lw = neg_hamiltonian(spec, d, X)
    w = np.exp(lw - lw.max())
    p = w / w.sum()
    assert a.log_partition == pytest.approx(lw.max() + math.log(w.sum()), rel=1e-12)
    np.testing.assert_allclose(a.site_means, p @ X, rtol=1e-10, atol=1e-13)


def test_beta_zero_is_iid():
    spec = ModelSpec(Kind.SK_ISING, beta=0.0, h=0.6)
    d = sample_disorder(spec, 9, seed=2)
    s = exact.enumerate(spec, d, k=2)
    off = s.pair_corr[~np.eye(9, dtype=bool)]
    np.testing.assert_allclose(off, math.tanh(0.6) ** 2, rtol=1e-13)
    r12, r12sq, r11, r11sq = overlap_moments(s)
    assert r12 == pytest.approx(math.tanh(0.6) ** 2, rel=1e-13)
    assert r12sq - r12 ** 2 == pytest.approx((1 - math.tanh(0.6) ** 4) / 9, rel=1e-12)
    assert r11 == 1.0 and r11sq == 1.0


def test_uniform_marginal_at_infinite_temperature():
    spec = ModelSpec(Kind.SK_ISING, beta=0.0, h=0.0)
    t = exact.exact_marginal(spec, sample_disorder(spec, 6, seed=1), 2)
    np.testing.assert_allclose(t.probs, 0.25, atol=1e-15)


def test_one_site_marginal_matches_mean():
    d = sample_disorder(SK, 10, seed=4)
    s = exact.enumerate(SK, d, k=1)
    m = s.site_means[0]
    np.testing.assert_allclose(s.marginal.probs, [(1 - m) / 2, (1 + m) / 2], atol=1e-14)


def test_marginal_against_exact_weight_draws():
    spec = ModelSpec(Kind.SK_ISING, beta=0.8, h=0.2)
    d = sample_disorder(spec, 8, seed=11)
    table = exact.exact_marginal(spec, d, 2)
    X = all_configs(8)
    lw = neg_hamiltonian(spec, d, X)
    p = np.exp(lw - lw.max())
    p /= p.sum()
    draws = np.random.default_rng(5).choice(256, size=1_000_000, p=p)
    cell = (X[draws, 0] > 0) * 2 + (X[draws, 1] > 0)
    freq = np.bincount(cell, minlength=4) / draws.size
    band = 3 * np.sqrt(table.probs * (1 - table.probs) / draws.size)
    assert np.all(np.abs(freq - table.probs) <= band)


def test_summary_invariants():
    for seed in range(5):
        for spec in (SK, PERC):
            d = sample_disorder(spec, 10, seed=seed)
            s = exact.enumerate(spec, d, k=2)
            assert abs(s.marginal.probs.sum() - 1) <= 1e-12
            assert np.all(np.abs(s.site_means) <= 1)
            np.testing.assert_array_equal(s.pair_corr, s.pair_corr.T)
            np.testing.assert_array_equal(np.diag(s.pair_corr), 1.0)
            assert np.linalg.eigvalsh(s.pair_corr).min() > -1e-12
            r12, r12sq, _, _ = overlap_moments(s)
            assert r12sq >= r12 ** 2


def test_zero_field_means_vanish():
    spec = ModelSpec(Kind.SK_ISING, beta=1.2, h=0.0)
    s = exact.enumerate(spec, sample_disorder(spec, 12, seed=6), k=0)
    np.testing.assert_allclose(s.site_means, 0.0, atol=1e-12)


def test_enumeration_errors():
    with pytest.raises(ModelError):
        exact.enumerate(ModelSpec(Kind.SK_BOX, beta=0.3), sample_disorder(SK, 4, seed=1))
    with pytest.raises(ModelError, match="cap"):
        exact.enumerate(SK, sample_disorder(SK, 27, seed=1))
    with pytest.raises(ModelError):
        exact.enumerate(SK, sample_disorder(SK, 8, seed=1), k=5)
    with pytest.raises(ModelError):
        exact.enumerate(SK, sample_disorder(SK, 12, seed=1), max_sites=10)


def test_summary_json_round_trip():
    s = exact.enumerate(PERC, sample_disorder(PERC, 8, seed=1), k=2)
    back = exact.ExactSummary.from_json(s.to_json())
    assert back.log_partition == s.log_partition
    np.testing.assert_array_equal(back.site_means, s.site_means)
    np.testing.assert_array_equal(back.pair_corr, s.pair_corr)
    np.testing.assert_array_equal(back.marginal.probs, s.marginal.probs)
    assert "pair_corr" not in s.to_json(include_pairs=False)


def test_marginal_table_contract():
    with pytest.raises(ModelError):
        MarginalTable(2, [0.5, 0.5, 0.1, -0.1])
    with pytest.raises(ModelError):
        MarginalTable(1, [0.5, 0.6])
    t = MarginalTable(2, [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(t.marginalize([0]).probs, [0.3, 0.7])
    np.testing.assert_allclose(t.mean(), [0.4, 0.2])


# --- cavity fields ---------------------------------------------------------------

def test_cavity_field_without_couplings():
    for h in (0.0, 0.45):
        spec = ModelSpec(Kind.SK_ISING, beta=0.0, h=h)
        dec = cavity_decompose(spec, sample_disorder(spec, 9, seed=1), 2)
        np.testing.assert_allclose(cavity_fields(dec), h, atol=1e-15)


def test_sk_cavity_fields_compositional():
    n, k = 12, 2
    d = sample_disorder(SK, n, seed=21)
    dec = cavity_decompose(SK, d, k)
    means_minus = exact.enumerate(*dec.truncated, k=0, pairs=False).site_means
    ref = SK.beta * (d.couplings[:k, k:] / math.sqrt(n)) @ means_minus + SK.h
    np.testing.assert_allclose(cavity_fields(dec), ref, rtol=0, atol=1e-12)


def test_perceptron_cavity_fields_compositional():
    n, k = 11, 2
    d = sample_disorder(PERC, n, seed=3)
    dec = cavity_decompose(PERC, d, k)
    Y = all_configs(n - k)
    lw = neg_hamiltonian(*dec.truncated, Y)
    p = np.exp(lw - lw.max())
    p /= p.sum()
    U = PERC.u(Y @ d.gardner_matrix[k:] / math.sqrt(n), 1)
    ref = (d.gardner_matrix[:k] / math.sqrt(n)) @ (p @ U)
    np.testing.assert_allclose(cavity_fields(dec), ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("spec", [SK, PERC])
def test_cavity_walk_marginals(spec):
    n, k = 10, 3
    d = sample_disorder(spec, n, seed=8)
    dec = cavity_decompose(spec, d, k)
    res = cavity_enumerate(dec, want_means=True)
    np.testing.assert_allclose(res.gibbs.probs, exact.exact_marginal(spec, d, k).probs,
                               rtol=1e-12, atol=1e-15)
    X = all_configs(n)
    lw = np.array([decomposed_energy(dec, SpinConfiguration(x, Domain.PM_ONE)) for x in X])
    p = np.exp(lw - lw.max())
    cell = ((X[:, :k] > 0) * (2 ** np.arange(k - 1, -1, -1))).sum(axis=1)
    sur = np.bincount(cell, weights=p, minlength=2 ** k)
    np.testing.assert_allclose(res.surrogate.probs, sur / sur.sum(), rtol=1e-12, atol=1e-15)
    trunc = exact.enumerate(*dec.truncated, k=0, pairs=False)
    assert res.log_partition_minus == pytest.approx(trunc.log_partition, rel=1e-12)
    np.testing.assert_allclose(res.truncated_means, trunc.site_means, atol=1e-12)


def test_k1_surrogate_is_exact():
    d = sample_disorder(SK, 10, seed=2)
    res = cavity_enumerate(cavity_decompose(SK, d, 1))
    np.testing.assert_allclose(res.gibbs.probs, res.surrogate.probs, rtol=0, atol=1e-15)

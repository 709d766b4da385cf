"""Exact Gibbs averages for the +-1 models by Gray-code enumeration.

The walk visits {-1,+1}^N in reflected-binary order, flipping the bit given by
the trailing-zero count of the step counter.  SK keeps the local-field vector
up to date (O(N) per flip), the Perceptron keeps the M fields S_m (O(M) per
flip).  States are buffered in blocks; each block is folded into the running
accumulators with a streaming log-sum-exp (the reference exponent only moves
up) and compensated summation across blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .models import CavityDecomposition, Disorder, Kind, ModelError, ModelSpec, neg_hamiltonian

MAX_ENUM_SITES = 26
MAX_K = 4
_BLOCK = 1024
_RESYNC = 4096

# Test battery for the projection statistics; each g1 is bounded and Lipschitz.
BATTERY = ("const", "tanh", "cos0.5", "cos1", "cos2", "clipquad")


def battery_ids(names) -> np.ndarray:
    try:
        return np.array([BATTERY.index(n) for n in names], dtype=np.int64)
    except ValueError:
        raise ModelError(f"unknown test function in {list(names)}; choose from {BATTERY}") from None


@numba.njit(cache=True)
def battery_g1(bid, v):
    if bid == 0:
        return 1.0
    if bid == 1:
        return math.tanh(v)
    if bid == 2:
        return math.cos(0.5 * v)
    if bid == 3:
        return math.cos(v)
    if bid == 4:
        return math.cos(2.0 * v)
    return min(v * v, 4.0)


def battery_numpy(name: str, v):
    """Vectorised twin of :func:`battery_g1`."""
    v = np.asarray(v, dtype=np.float64)
    return {"const": lambda a: np.ones_like(a), "tanh": np.tanh,
            "cos0.5": lambda a: np.cos(0.5 * a), "cos1": np.cos,
            "cos2": lambda a: np.cos(2.0 * a),
            "clipquad": lambda a: np.minimum(a * a, 4.0)}[name](v)


# --- numba kernels ----------------------------------------------------------

@numba.njit(cache=True)
def _ctz(t):
    b = 0
    while (t >> b) & 1 == 0:
        b += 1
    return b


@numba.njit(cache=True)
def _kadd(acc, comp, i, v):
    y = v - comp[i]
    t = acc[i] + y
    comp[i] = (t - acc[i]) - y
    acc[i] = t


@numba.njit(cache=True)
def _kadd_vec(acc, comp, v):
    a = acc.ravel()
    c = comp.ravel()
    vv = v.ravel()
    for i in range(a.size):
        y = vv[i] - c[i]
        t = a[i] + y
        c[i] = (t - a[i]) - y
        a[i] = t


@numba.njit(cache=True)
def _rescale(factor, a):
    flat = a.ravel()
    for i in range(flat.size):
        flat[i] *= factor


@numba.njit(cache=True)
def _marg_index(x, k):
    idx = 0
    for j in range(k):
        idx = 2 * idx + (1 if x[j] > 0 else 0)
    return idx


@numba.njit(cache=True)
def _flush(n, lw, X, U, k, theta, proj_aux, bat_ids, scal, scal_c,
           means, means_c, pairs, pairs_c, marg, marg_c,
           aux, aux_c, aux_pairs, aux_pairs_c, bat, bat_c):
    """Fold ``n`` buffered states into the accumulators.

    ``scal`` holds [ref, Z, sum n2, sum n2^2] where n2 = sum_m U_m^2.
    """
    m = lw[0]
    for i in range(1, n):
        if lw[i] > m:
            m = lw[i]
    if m > scal[0]:
        f = math.exp(scal[0] - m)
        for i in range(1, scal.size):
            scal[i] *= f
            scal_c[i] *= f
        _rescale(f, means)
        _rescale(f, means_c)
        _rescale(f, marg)
        _rescale(f, marg_c)
        _rescale(f, aux)
        _rescale(f, aux_c)
        _rescale(f, bat)
        _rescale(f, bat_c)
        _rescale(f, pairs)
        _rescale(f, pairs_c)
        _rescale(f, aux_pairs)
        _rescale(f, aux_pairs_c)
        scal[0] = m
    w = np.empty(n)
    for i in range(n):
        w[i] = math.exp(lw[i] - scal[0])
    sw = w.sum()
    _kadd(scal, scal_c, 1, sw)
    Xn = X[:n]
    N = X.shape[1]
    # Within an aligned Gray-code block only the low bits change, so the
    # high-bit part of the moments factorises through sum(w).
    L = min(N, 10)
    sl = np.zeros(L)
    for i in range(n):
        for a in range(L):
            sl[a] += w[i] * Xn[i, a]
    mb = np.empty(N)
    for a in range(L):
        mb[a] = sl[a]
    for a in range(L, N):
        mb[a] = sw * Xn[0, a]
    _kadd_vec(means, means_c, mb)
    if pairs.shape[0] > 0:
        pb = np.empty((N, N))
        xl = np.empty((n, L))
        xw = np.empty((n, L))
        for i in range(n):
            for a in range(L):
                xl[i, a] = Xn[i, a]
                xw[i, a] = w[i] * Xn[i, a]
        ll = np.dot(xw.T, xl)
        for a in range(L):
            for b in range(a + 1):
                pb[a, b] = ll[a, b]
                pb[b, a] = ll[a, b]
        for a in range(L, N):
            for b in range(L):
                v = sl[b] * Xn[0, a]
                pb[a, b] = v
                pb[b, a] = v
            for b in range(L, N):
                pb[a, b] = sw * Xn[0, a] * Xn[0, b]
        _kadd_vec(pairs, pairs_c, pb)
    if k > 0:
        mb = np.zeros(marg.size)
        for i in range(n):
            mb[_marg_index(Xn[i], k)] += w[i]
        _kadd_vec(marg, marg_c, mb)
    if U.shape[1] > 0:
        Un = U[:n]
        _kadd_vec(aux, aux_c, np.dot(w, Un))
        n2 = np.zeros(n)
        for i in range(n):
            s = 0.0
            for j in range(Un.shape[1]):
                s += Un[i, j] * Un[i, j]
            n2[i] = s
        _kadd(scal, scal_c, 2, np.dot(n2, w))
        _kadd(scal, scal_c, 3, np.dot(n2 * n2, w))
        if aux_pairs.shape[0] > 0:
            Uw = Un * w.reshape(n, 1)
            _kadd_vec(aux_pairs, aux_pairs_c, np.dot(Uw.T, Un))
    if bat_ids.size > 0:
        if proj_aux:
            V = np.dot(U[:n], theta)
        else:
            V = np.dot(Xn, theta)
        bb = np.zeros(bat_ids.size)
        for b in range(bat_ids.size):
            s = 0.0
            for i in range(n):
                g = 1.0
                for j in range(V.shape[1]):
                    g *= battery_g1(bat_ids[b], V[i, j])
                s += w[i] * g
            bb[b] = s
        _kadd_vec(bat, bat_c, bb)


@numba.njit(cache=True)
def _sk_walk(J, h, k, want_pairs, theta, bat_ids, scal, scal_c, means, means_c,
             pairs, pairs_c, marg, marg_c, bat, bat_c):
    N = J.shape[0]
    total = 1 << N
    bs = min(total, _BLOCK)
    X = np.empty((bs, N))
    U = np.empty((bs, 0))
    LW = np.empty(bs)
    empty1 = np.zeros(0)
    empty2 = np.zeros((0, 0))
    x = -np.ones(N)
    f = np.dot(J, x)
    lw = 0.5 * np.dot(x, f) + h * x.sum()
    pos = 0
    for t in range(total):
        if t > 0:
            b = _ctz(t)
            xo = x[b]
            lw -= 2.0 * xo * (f[b] + h)
            x[b] = -xo
            d = -2.0 * xo
            for i in range(N):
                f[i] += J[b, i] * d
            if t % 4096 == 0:
                f = np.dot(J, x)
                lw = 0.5 * np.dot(x, f) + h * x.sum()
        for i in range(N):
            X[pos, i] = x[i]
        LW[pos] = lw
        pos += 1
        if pos == bs:
            _flush(pos, LW, X, U, k, theta, False, bat_ids, scal, scal_c, means, means_c,
                   pairs, pairs_c, marg, marg_c, empty1, empty1.copy(), empty2, empty2.copy(),
                   bat, bat_c)
            pos = 0
    if pos > 0:
        _flush(pos, LW, X, U, k, theta, False, bat_ids, scal, scal_c, means, means_c,
               pairs, pairs_c, marg, marg_c, empty1, empty1.copy(), empty2, empty2.copy(),
               bat, bat_c)


@numba.njit(cache=True)
def _perc_walk(G, ufun, dufun, params, shrink, k, want_aux, theta, proj_aux, bat_ids,
               scal, scal_c, means, means_c, pairs, pairs_c, marg, marg_c,
               aux, aux_c, aux_pairs, aux_pairs_c, bat, bat_c):
    N, M = G.shape
    total = 1 << N
    bs = min(total, _BLOCK)
    X = np.empty((bs, N))
    U = np.empty((bs, M if want_aux else 0))
    LW = np.empty(bs)
    x = -np.ones(N)
    S = np.dot(x, G)
    pos = 0
    for t in range(total):
        if t > 0:
            b = _ctz(t)
            x[b] = -x[b]
            d = 2.0 * x[b]
            for m in range(M):
                S[m] += d * G[b, m]
            if t % 4096 == 0:
                S = np.dot(x, G)
        lw = 0.0
        for m in range(M):
            lw += ufun(shrink * S[m], params)
        if want_aux:
            for m in range(M):
                U[pos, m] = shrink * dufun(shrink * S[m], params)
        for i in range(N):
            X[pos, i] = x[i]
        LW[pos] = lw
        pos += 1
        if pos == bs or t == total - 1:
            _flush(pos, LW, X, U, k, theta, proj_aux, bat_ids, scal, scal_c, means, means_c,
                   pairs, pairs_c, marg, marg_c, aux, aux_c, aux_pairs, aux_pairs_c, bat, bat_c)
            pos = 0


@numba.njit(cache=True)
def _sigma_table(k):
    n = 1 << k
    out = np.empty((n, k))
    for s in range(n):
        for j in range(k):
            out[s, j] = 1.0 if (s >> (k - 1 - j)) & 1 else -1.0
    return out


@numba.njit(cache=True)
def _cavity_accumulate(lw, c, full, sig, ref, acc, acc_c, ymeans, ymeans_c, y, want_y):
    """One state of the truncated walk.  ``acc`` = [T, T*c_1..c_k, A0[..], A[..]]."""
    k = c.size
    ns = sig.shape[0]
    top = lw
    for j in range(k):
        top += abs(c[j])
    for s in range(full.size):
        if full[s] > top:
            top = full[s]
    if top > ref[0] + 30.0 or ref[0] == -np.inf:
        fac = math.exp(ref[0] - top) if ref[0] != -np.inf else 0.0
        for i in range(acc.size):
            acc[i] *= fac
            acc_c[i] *= fac
        for i in range(ymeans.size):
            ymeans[i] *= fac
            ymeans_c[i] *= fac
        ref[0] = top
    base = math.exp(lw - ref[0])
    _kadd(acc, acc_c, 0, base)
    for j in range(k):
        _kadd(acc, acc_c, 1 + j, base * c[j])
    for s in range(ns):
        e = 0.0
        for j in range(k):
            e += sig[s, j] * c[j]
        _kadd(acc, acc_c, 1 + k + s, math.exp(lw + e - ref[0]))
    for s in range(full.size):
        _kadd(acc, acc_c, 1 + k + ns + s, math.exp(full[s] - ref[0]))
    if want_y:
        for i in range(y.size):
            _kadd(ymeans, ymeans_c, i, base * y[i])


@numba.njit(cache=True)
def _sk_cavity_walk(J, C, h, want_y, ref, acc, acc_c, ymeans, ymeans_c):
    """Walk the truncated SK system; the cavity factors exp(+-c_j) are updated
    multiplicatively so each state costs a single exponential."""
    n = J.shape[0]
    k = C.shape[0]
    sig = _sigma_table(k)
    ns = sig.shape[0]
    up = np.exp(2.0 * C)
    down = np.exp(-2.0 * C)
    total = 1 << n
    y = -np.ones(n)
    f = np.dot(J, y)
    c = np.dot(C, y)
    ec = np.exp(c)
    eci = np.exp(-c)
    lw = 0.5 * np.dot(y, f) + h * y.sum()
    blk = np.zeros(acc.size)
    yblk = np.zeros(ymeans.size)
    prod = np.empty(ns)
    for t in range(total):
        if t > 0:
            b = _ctz(t)
            yo = y[b]
            lw -= 2.0 * yo * (f[b] + h)
            y[b] = -yo
            d = -2.0 * yo
            for i in range(n):
                f[i] += J[b, i] * d
            if d > 0:
                for j in range(k):
                    c[j] += 2.0 * C[j, b]
                    ec[j] *= up[j, b]
                    eci[j] *= down[j, b]
            else:
                for j in range(k):
                    c[j] -= 2.0 * C[j, b]
                    ec[j] *= down[j, b]
                    eci[j] *= up[j, b]
        if t % 4096 == 0:
            # fold the block into the compensated totals and resynchronise
            for i in range(acc.size):
                _kadd(acc, acc_c, i, blk[i])
                blk[i] = 0.0
            for i in range(ymeans.size):
                _kadd(ymeans, ymeans_c, i, yblk[i])
                yblk[i] = 0.0
            f = np.dot(J, y)
            c = np.dot(C, y)
            ec = np.exp(c)
            eci = np.exp(-c)
            lw = 0.5 * np.dot(y, f) + h * y.sum()
        top = lw
        for j in range(k):
            top += abs(c[j])
        if top > ref[0] + 30.0:
            fac = math.exp(ref[0] - top) if ref[0] != -np.inf else 0.0
            for arr in (acc, acc_c, blk, ymeans, ymeans_c, yblk):
                for i in range(arr.size):
                    arr[i] *= fac
            ref[0] = top
        base = math.exp(lw - ref[0])
        blk[0] += base
        for j in range(k):
            blk[1 + j] += base * c[j]
        # products over sigma in lexicographic order, built by doubling
        prod[0] = base
        width = 1
        for j in range(k):
            for s in range(width - 1, -1, -1):
                v = prod[s]
                prod[2 * s + 1] = v * ec[j]
                prod[2 * s] = v * eci[j]
            width *= 2
        for s in range(ns):
            blk[1 + k + s] += prod[s]
        if want_y:
            for i in range(n):
                yblk[i] += base * y[i]
    for i in range(acc.size):
        _kadd(acc, acc_c, i, blk[i])
    for i in range(ymeans.size):
        _kadd(ymeans, ymeans_c, i, yblk[i])


@numba.njit(cache=True)
def _perc_cavity_walk(Gy, Gk, ufun, dufun, params, want_y, ref, acc, acc_c,
                      ymeans, ymeans_c, aux, aux_c):
    n, M = Gy.shape
    k = Gk.shape[0]
    sig = _sigma_table(k)
    ns = sig.shape[0]
    dsh = np.dot(sig, Gk)  # shift of S_m^0 for each cavity configuration
    total = 1 << n
    y = -np.ones(n)
    S = np.dot(y, Gy)
    c = np.zeros(k)
    full = np.zeros(ns)
    U = np.zeros(M)
    for t in range(total):
        if t > 0:
            b = _ctz(t)
            y[b] = -y[b]
            d = 2.0 * y[b]
            for m in range(M):
                S[m] += d * Gy[b, m]
            if t % 4096 == 0:
                S = np.dot(y, Gy)
        lw = 0.0
        for m in range(M):
            lw += ufun(S[m], params)
            U[m] = dufun(S[m], params)
        for j in range(k):
            s = 0.0
            for m in range(M):
                s += Gk[j, m] * U[m]
            c[j] = s
        for s in range(ns):
            tot = 0.0
            for m in range(M):
                tot += ufun(S[m] + dsh[s, m], params)
            full[s] = tot
        _cavity_accumulate(lw, c, full, sig, ref, acc, acc_c, ymeans, ymeans_c, y, want_y)
        base = math.exp(lw - ref[0])
        for m in range(M):
            _kadd(aux, aux_c, m, base * U[m])


# --- public types -----------------------------------------------------------

@dataclass(frozen=True)
class MarginalTable:
    """Distribution over {-1,+1}^k, lexicographic with -1 before +1."""

    k: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (2 ** self.k,):
            raise ModelError(f"MarginalTable needs 2^k={2 ** self.k} entries, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ModelError("MarginalTable probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, k: int, weights) -> "MarginalTable":
        w = np.asarray(weights, dtype=np.float64)
        p = w / w.sum()
        # one more pass so that the sum is 1 to the last few ulps
        return cls(k, p / p.sum())

    @staticmethod
    def configurations(k: int) -> np.ndarray:
        return np.asarray(_sigma_table(k))

    def marginalize(self, keep) -> "MarginalTable":
        keep = list(keep)
        p = self.probs.reshape((2,) * self.k)
        drop = tuple(j for j in range(self.k) if j not in keep)
        q = p.sum(axis=drop) if drop else p
        return MarginalTable.from_weights(len(keep), q.reshape(-1))

    def mean(self) -> np.ndarray:
        return self.probs @ self.configurations(self.k)

    def to_dict(self) -> dict:
        return {"k": self.k, "probs": self.probs.tolist()}


@dataclass(frozen=True)
class ExactSummary:
    log_partition: float
    site_means: np.ndarray
    pair_corr: Optional[np.ndarray]
    marginal: Optional[MarginalTable]
    aux_means: Optional[np.ndarray] = None
    aux_pair: Optional[np.ndarray] = None
    aux_norm_mean: float = 0.0
    aux_norm_sq: float = 0.0
    battery: dict = field(default_factory=dict)

    @property
    def n_sites(self) -> int:
        return self.site_means.size

    def to_json(self, include_pairs: bool = True) -> str:
        doc = {"version": 1, "logZ": self.log_partition, "means": self.site_means.tolist(),
               "marginal": None if self.marginal is None else self.marginal.to_dict()}
        if include_pairs and self.pair_corr is not None:
            doc["pair_corr"] = self.pair_corr.tolist()
        if self.aux_means is not None:
            doc["aux_means"] = self.aux_means.tolist()
            doc["aux_norm_mean"] = self.aux_norm_mean
            doc["aux_norm_sq"] = self.aux_norm_sq
        if self.battery:
            doc["battery"] = dict(self.battery)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ExactSummary":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ModelError(f"unsupported ExactSummary version {doc.get('version')!r}")
        marg = doc.get("marginal")
        return cls(doc["logZ"], np.array(doc["means"]),
                   None if "pair_corr" not in doc else np.array(doc["pair_corr"]),
                   None if marg is None else MarginalTable(marg["k"], np.array(marg["probs"])),
                   None if "aux_means" not in doc else np.array(doc["aux_means"]),
                   None, doc.get("aux_norm_mean", 0.0), doc.get("aux_norm_sq", 0.0),
                   doc.get("battery", {}))


def _check_enumerable(spec: ModelSpec, n: int, k: int, max_sites: int):
    if not spec.kind.is_discrete:
        raise ModelError(f"exact enumeration supports SK_ISING and PERCEPTRON only, "
                         f"got {spec.kind.value}; use the sampler")
    if n > min(max_sites, MAX_ENUM_SITES):
        raise ModelError(f"N={n} exceeds the enumeration cap {min(max_sites, MAX_ENUM_SITES)}")
    if not 0 <= k <= min(MAX_K, n):
        raise ModelError(f"need 0 <= k <= min(4, N), got k={k}")


def enumerate(spec: ModelSpec, disorder: Disorder, k: int = 2, *, pairs: bool = True,
              aux: bool = True, theta: Optional[np.ndarray] = None, battery=(),
              max_sites: int = MAX_ENUM_SITES) -> ExactSummary:
    """Exact partition function, means, correlations and k-marginal.

    ``theta`` (dim x k') with ``battery`` names requests the averages
    <prod_j g(theta^T v)_j> for each test function, where v is the spin vector
    for SK and the auxiliary vector (u'(S_m))_m for the Perceptron.
    """
    n = disorder.n_sites
    _check_enumerable(spec, n, k, max_sites)
    bids = battery_ids(battery)
    nb = bids.size
    theta_arr = np.zeros((1, 1)) if theta is None else np.ascontiguousarray(theta, dtype=np.float64)
    if nb and theta is None:
        raise ModelError("battery statistics need a projection matrix theta")
    scal = np.array([-np.inf, 0.0, 0.0, 0.0])
    scal_c = np.zeros(4)
    means, means_c = np.zeros(n), np.zeros(n)
    pn = n if pairs else 0
    pr, pr_c = np.zeros((pn, pn)), np.zeros((pn, pn))
    marg, marg_c = np.zeros(2 ** k if k else 0), np.zeros(2 ** k if k else 0)
    bat, bat_c = np.zeros(nb), np.zeros(nb)
    if spec.kind == Kind.SK_ISING:
        J = spec.beta / math.sqrt(n) * disorder.couplings
        _sk_walk(np.ascontiguousarray(J), float(spec.h), k, pairs, theta_arr, bids, scal, scal_c,
                 means, means_c, pr, pr_c, marg, marg_c, bat, bat_c)
        aux_m = aux_p = None
    else:
        M = disorder.M
        G = np.ascontiguousarray(disorder.gardner_matrix / math.sqrt(n))
        want_aux = aux or (nb > 0)
        am, am_c = np.zeros(M if want_aux else 0), np.zeros(M if want_aux else 0)
        ap_n = M if (want_aux and pairs) else 0
        ap, ap_c = np.zeros((ap_n, ap_n)), np.zeros((ap_n, ap_n))
        u = spec.u
        _perc_walk(G, u.funcs[0], u.funcs[1], u.params, float(u.shrink), k, want_aux,
                   theta_arr, True, bids, scal, scal_c, means, means_c, pr, pr_c,
                   marg, marg_c, am, am_c, ap, ap_c, bat, bat_c)
        Z = scal[1]
        aux_m = am / Z if want_aux else None
        aux_p = ap / Z if ap_n else None
    Z = scal[1]
    logz = scal[0] + math.log(Z)
    pair_corr = None
    if pairs:
        pair_corr = pr / Z
        pair_corr = 0.5 * (pair_corr + pair_corr.T)
        np.fill_diagonal(pair_corr, 1.0)
    table = MarginalTable.from_weights(k, marg) if k else None
    bat_vals = {BATTERY[b]: float(v / Z) for b, v in zip(bids, bat)}
    return ExactSummary(logz, means / Z, pair_corr, table, aux_m, aux_p,
                        float(scal[2] / Z) if aux_m is not None else 0.0,
                        float(scal[3] / Z) if aux_m is not None else 0.0, bat_vals)


def exact_marginal(spec: ModelSpec, disorder: Disorder, k: int) -> MarginalTable:
    if k < 1:
        raise ModelError("exact_marginal needs k >= 1")
    return enumerate(spec, disorder, k, pairs=False, aux=False).marginal


def naive_enumerate(spec: ModelSpec, disorder: Disorder, k: int = 2) -> ExactSummary:
    """Brute-force reference: build every configuration and its weight at once."""
    n = disorder.n_sites
    _check_enumerable(spec, n, k, 20)
    idx = np.arange(2 ** n)
    X = (((idx[:, None] >> np.arange(n)[None, :]) & 1) * 2 - 1).astype(np.float64)
    lw = neg_hamiltonian(spec, disorder, X)
    top = lw.max()
    w = np.exp(lw - top)
    Z = w.sum()
    p = w / Z
    means = p @ X
    pairs = X.T @ (p[:, None] * X)
    marg = None
    if k:
        cell = ((X[:, :k] > 0).astype(np.int64) * (2 ** np.arange(k - 1, -1, -1))).sum(axis=1)
        marg = MarginalTable.from_weights(k, np.bincount(cell, weights=p, minlength=2 ** k))
    aux_m = aux_p = None
    n2m = n2s = 0.0
    if spec.kind == Kind.PERCEPTRON:
        S = X @ disorder.gardner_matrix / math.sqrt(n)
        U = spec.u(S, 1)
        aux_m = p @ U
        aux_p = U.T @ (p[:, None] * U)
        n2 = (U * U).sum(axis=1)
        n2m, n2s = float(p @ n2), float(p @ (n2 * n2))
    return ExactSummary(float(top + math.log(Z)), means, pairs, marg, aux_m, aux_p, n2m, n2s)


def overlap_moments(summary: ExactSummary) -> tuple[float, float, float, float]:
    """(<R12>, <R12^2>, <R11>, <R11^2>) for two replicas of the same disorder."""
    if summary.pair_corr is None:
        raise ModelError("overlap moments need pair correlations (enumerate with pairs=True)")
    n = summary.n_sites
    m = summary.site_means
    r12 = float(np.dot(m, m) / n)
    r12_sq = float(np.sum(summary.pair_corr ** 2) / n ** 2)
    return r12, r12_sq, 1.0, 1.0


def aux_overlap_moments(summary: ExactSummary, n_sites: int) -> tuple[float, float, float, float]:
    """Auxiliary-system analogues with 1/N scaling: overlap mean/second moment, norm mean/second moment."""
    if summary.aux_means is None or summary.aux_pair is None:
        raise ModelError("auxiliary moments need aux statistics with pair correlations")
    a = summary.aux_means
    n = float(n_sites)
    return (float(a @ a / n), float(np.sum(summary.aux_pair ** 2) / n ** 2),
            summary.aux_norm_mean / n, summary.aux_norm_sq / n ** 2)


# --- cavity enumeration -----------------------------------------------------

@dataclass(frozen=True)
class CavityResult:
    """Exact quantities from one walk over the truncated system.

    ``fields`` are the cavity-field arguments: beta a_j.<y>^- + h for SK and
    a_j.<U>^- for the Perceptron.  ``gibbs`` is G_N^{(k)}, ``surrogate`` the
    marginal of the decomposed Hamiltonian.
    """

    fields: np.ndarray
    gibbs: MarginalTable
    surrogate: MarginalTable
    log_partition_minus: float
    truncated_means: Optional[np.ndarray]
    aux_means: Optional[np.ndarray] = None


def cavity_enumerate(decomp: CavityDecomposition, want_means: bool = False) -> CavityResult:
    spec, dis, k = decomp.spec, decomp.disorder, decomp.k
    n = dis.n_sites
    nm = n - k
    if not spec.kind.is_discrete:
        raise ModelError(f"cavity enumeration needs a +-1 model, got {spec.kind.value}")
    if nm > MAX_ENUM_SITES:
        raise ModelError(f"truncated system has {nm} sites, above the enumeration cap")
    ns = 2 ** k
    sig = np.asarray(_sigma_table(k))
    ref = np.array([-np.inf])
    ny = nm if want_means else 0
    ymeans, ymeans_c = np.zeros(ny), np.zeros(ny)
    if spec.kind == Kind.SK_ISING:
        scale = spec.beta / math.sqrt(n)
        J = np.ascontiguousarray(scale * dis.couplings[k:, k:])
        C = np.ascontiguousarray(scale * dis.couplings[:k, k:])
        acc, acc_c = np.zeros(1 + k + ns), np.zeros(1 + k + ns)
        _sk_cavity_walk(J, C, float(spec.h), want_means, ref, acc, acc_c, ymeans, ymeans_c)
        T = acc[0]
        a0 = acc[1 + k:1 + k + ns]
        site = spec.h * sig.sum(axis=1)
        intra = np.array([sum(decomp.intra[i, j] * s[i] * s[j]
                              for i in range(k) for j in range(i + 1, k)) for s in sig])
        surrogate = MarginalTable.from_weights(k, a0 * np.exp(site - site.max()))
        e = site + intra
        gibbs = MarginalTable.from_weights(k, a0 * np.exp(e - e.max()))
        fields = acc[1:1 + k] / T + spec.h
        auxm = None
    else:
        M = dis.M
        G = dis.gardner_matrix / math.sqrt(n)
        u = spec.u
        acc, acc_c = np.zeros(1 + k + 2 * ns), np.zeros(1 + k + 2 * ns)
        aux, aux_c = np.zeros(M), np.zeros(M)
        _perc_cavity_walk(np.ascontiguousarray(G[k:]), np.ascontiguousarray(G[:k]),
                          u.funcs[0], u.funcs[1], u.params, want_means, ref, acc, acc_c,
                          ymeans, ymeans_c, aux, aux_c)
        T = acc[0]
        surrogate = MarginalTable.from_weights(k, acc[1 + k:1 + k + ns])
        gibbs = MarginalTable.from_weights(k, acc[1 + k + ns:])
        fields = acc[1:1 + k] / T
        auxm = aux / T
    return CavityResult(fields, gibbs, surrogate, float(ref[0] + math.log(T)),
                        ymeans / T if want_means else None, auxm)


def cavity_fields(decomp: CavityDecomposition) -> np.ndarray:
    """Exact cavity-field arguments of the predicted +-1 factors (length k)."""
    return cavity_enumerate(decomp).fields


__all__ = ["MarginalTable", "ExactSummary", "CavityResult", "enumerate", "exact_marginal",
           "naive_enumerate", "overlap_moments", "aux_overlap_moments", "cavity_enumerate",
           "cavity_fields", "BATTERY", "battery_g1", "battery_numpy"]

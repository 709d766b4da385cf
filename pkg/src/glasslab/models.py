"""Hamiltonians, disorder and cavity decompositions for the four models.

Conventions: ``energy`` returns ``-H(x)``, the log of the unnormalised Gibbs
weight against the model's reference measure (uniform on {-1,+1}, uniform on
[-1,1], or Lebesgue for ST).  For ``SK_BOX`` the external field is folded into
that log-weight as ``h * sum(x)`` so that all SK kinds share one formula.
"""

from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .potentials import PotentialU, parse_potential, zero_potential


class Kind(str, enum.Enum):
    SK_ISING = "SK_ISING"
    SK_BOX = "SK_BOX"
    PERCEPTRON = "PERCEPTRON"
    ST = "ST"

    @property
    def is_sk(self) -> bool:
        return self in (Kind.SK_ISING, Kind.SK_BOX)

    @property
    def is_gardner(self) -> bool:
        return self in (Kind.PERCEPTRON, Kind.ST)

    @property
    def is_discrete(self) -> bool:
        return self in (Kind.SK_ISING, Kind.PERCEPTRON)


class Domain(str, enum.Enum):
    PM_ONE = "PM_ONE"
    BOX = "BOX"
    REAL = "REAL"


DOMAIN_OF = {Kind.SK_ISING: Domain.PM_ONE, Kind.PERCEPTRON: Domain.PM_ONE,
             Kind.SK_BOX: Domain.BOX, Kind.ST: Domain.REAL}

MAX_SITES = 4096


class ModelError(ValueError):
    """Raised for invalid model specifications or mismatched inputs."""


@dataclass(frozen=True)
class ModelSpec:
    kind: Kind
    beta: float = 0.0
    h: float = 0.0
    kappa: float = 1.0
    M: Optional[int] = None
    alpha: Optional[float] = None
    u: PotentialU = field(default_factory=zero_potential)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.is_sk and not self.beta >= 0:
            raise ModelError(f"beta must be nonnegative, got {self.beta}")
        if self.kind == Kind.ST and not self.kappa > 0:
            raise ModelError(f"kappa must be positive, got {self.kappa}")
        if self.kind.is_gardner:
            if self.M is None and self.alpha is None:
                raise ModelError("Gardner models need M or alpha")
            if self.M is not None and self.M < 1:
                raise ModelError(f"M must be >= 1, got {self.M}")
            if self.alpha is not None and not self.alpha > 0:
                raise ModelError(f"alpha must be positive, got {self.alpha}")

    def n_patterns(self, n_sites: int) -> int:
        """Number of Gardner constraints M for an N-site system."""
        if self.M is not None:
            return int(self.M)
        return max(1, int(round(self.alpha * n_sites)))

    @property
    def domain(self) -> Domain:
        return DOMAIN_OF[self.kind]

    def to_text(self) -> str:
        lines = [f"kind = {self.kind.value}"]
        if self.kind.is_sk:
            lines += [f"beta = {self.beta!r}", f"h = {self.h!r}"]
        else:
            if self.M is not None:
                lines.append(f"M = {self.M}")
            if self.alpha is not None:
                lines.append(f"alpha = {self.alpha!r}")
            lines.append(f"u = {self.u.to_text()}")
            if self.kind == Kind.ST:
                lines += [f"kappa = {self.kappa!r}", f"h = {self.h!r}"]
        return "\n".join(lines) + "\n"


def parse_key_values(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Returns ``{key: (value, line_number)}``.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ModelError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ModelError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


MODEL_KEYS = ("kind", "beta", "h", "kappa", "M", "alpha", "u")


def spec_from_mapping(items: dict, source: str = "<config>") -> ModelSpec:
    """Build a ModelSpec from parsed ``{key: (value, line)}`` entries."""
    if "kind" not in items:
        raise ModelError(f"{source}: missing required key 'kind'")
    kwargs = {}
    for key in MODEL_KEYS:
        if key not in items:
            continue
        value, lineno = items[key]
        try:
            if key == "kind":
                kwargs[key] = Kind(value.upper())
            elif key == "M":
                kwargs[key] = int(value)
            elif key == "u":
                kwargs[key] = parse_potential(value)
            else:
                kwargs[key] = float(value)
        except ValueError as exc:
            raise ModelError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        return ModelSpec(**kwargs)
    except ModelError as exc:
        raise ModelError(f"{source}: {exc}") from None


def spec_from_text(text: str, source: str = "<config>") -> ModelSpec:
    items = parse_key_values(text, source)
    unknown = set(items) - set(MODEL_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ModelError(f"{source}:{items[key][1]}: unknown key {key!r}")
    return spec_from_mapping(items, source)


def kappa0(spec: ModelSpec, k: int = 2, p: int = 1, eps: float = 0.1) -> float:
    """Lower bound on kappa required by the ST local-independence result."""
    alpha = spec.alpha if spec.alpha is not None else float("nan")
    D, h = spec.u.bound_D, spec.h
    ebar = 1.0 / (2.0 * eps) - 1.0
    first = 48.0 * k**2 * p**3 * (1.0 + 8.0 * ebar**2) * (alpha * D**2 + h**2)
    second = math.sqrt(150.0 * (1.0 + h**2)) * alpha * D**4
    return max(first, second)


def check_st_spec(spec: ModelSpec, n_sites: int, k: int = 2, p: int = 1, eps: float = 0.1):
    """Warn when kappa sits below the largeness condition (not an error)."""
    alpha = spec.n_patterns(n_sites) / n_sites
    k0 = kappa0(replace(spec, alpha=alpha, M=None), k, p, eps)
    if spec.kappa < k0:
        warnings.warn(f"kappa={spec.kappa} is below kappa0={k0:.4g}; outside the validated zone",
                      stacklevel=2)
    return k0


# --- disorder ---------------------------------------------------------------

@dataclass(frozen=True)
class Disorder:
    n_sites: int
    seed: int
    couplings: Optional[np.ndarray] = None        # N x N symmetric, zero diagonal
    gardner_matrix: Optional[np.ndarray] = None   # N x M
    field_gaussians: Optional[np.ndarray] = None  # N

    def __post_init__(self):
        for name in ("couplings", "gardner_matrix", "field_gaussians"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def M(self) -> int:
        return 0 if self.gardner_matrix is None else self.gardner_matrix.shape[1]


def sample_disorder(spec: ModelSpec, n_sites: int, seed: int) -> Disorder:
    """Draw one frozen realisation of all Gaussian randomness."""
    if not isinstance(n_sites, (int, np.integer)) or n_sites < 1:
        raise ModelError(f"n_sites must be a positive integer, got {n_sites!r}")
    if n_sites < 2:
        raise ModelError("n_sites must be at least 2")
    if n_sites > MAX_SITES:
        raise ModelError(f"n_sites={n_sites} exceeds the supported maximum {MAX_SITES}")
    n_sites = int(n_sites)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    if spec.kind.is_sk:
        g = np.zeros((n_sites, n_sites))
        iu = np.triu_indices(n_sites, 1)
        g[iu] = rng.standard_normal(len(iu[0]))
        g = g + g.T
        return Disorder(n_sites, int(seed), couplings=g)
    M = spec.n_patterns(n_sites)
    if M < 1:
        raise ModelError("Gardner models need M >= 1")
    if spec.kind == Kind.ST and M > 10 * n_sites:
        raise ModelError(f"ST requires M <= 10 N (got M={M}, N={n_sites})")
    gm = rng.standard_normal((n_sites, M))
    gi = rng.standard_normal(n_sites) if spec.kind == Kind.ST else None
    return Disorder(n_sites, int(seed), gardner_matrix=gm, field_gaussians=gi)


_MAGIC = b"GLASSLB1"
_KIND_CODE = {Kind.SK_ISING: 0, Kind.SK_BOX: 1, Kind.PERCEPTRON: 2, Kind.ST: 3}
_HEADER = struct.Struct("<8sIIIQI")  # magic, kind, N, M, seed, reserved -> 32 bytes


def save_disorder(path, spec: ModelSpec, disorder: Disorder) -> None:
    """Write the disorder as a 32-byte header plus little-endian float64 data."""
    header = _HEADER.pack(_MAGIC, _KIND_CODE[spec.kind], disorder.n_sites, disorder.M,
                          disorder.seed & 0xFFFFFFFFFFFFFFFF, 0)
    blocks = [a for a in (disorder.couplings, disorder.gardner_matrix,
                          disorder.field_gaussians) if a is not None]
    with open(path, "wb") as fh:
        fh.write(header)
        for a in blocks:
            fh.write(a.astype("<f8").tobytes())


def load_disorder(path) -> tuple[Kind, Disorder]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ModelError(f"{path}: truncated header")
    magic, code, n, m, seed, _ = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ModelError(f"{path}: bad magic {magic!r}")
    kind = {v: k for k, v in _KIND_CODE.items()}[code]
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if kind.is_sk:
        if data.size != n * n:
            raise ModelError(f"{path}: expected {n*n} values, found {data.size}")
        return kind, Disorder(n, seed, couplings=data.reshape(n, n))
    want = n * m + (n if kind == Kind.ST else 0)
    if data.size != want:
        raise ModelError(f"{path}: expected {want} values, found {data.size}")
    gm = data[: n * m].reshape(n, m)
    gi = data[n * m:] if kind == Kind.ST else None
    return kind, Disorder(n, seed, gardner_matrix=gm, field_gaussians=gi)


# --- configurations and energy ---------------------------------------------

@dataclass(frozen=True)
class SpinConfiguration:
    values: np.ndarray
    domain: Domain

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.domain == Domain.PM_ONE and not np.all(np.abs(vals) == 1.0):
            raise ModelError("PM_ONE configuration with entries outside {-1,+1}")
        if self.domain == Domain.BOX and np.any(np.abs(vals) > 1.0):
            raise ModelError("BOX configuration with entries outside [-1,1]")


def _check_config(spec: ModelSpec, disorder: Disorder, config: SpinConfiguration):
    if config.domain != spec.domain:
        raise ModelError(f"{spec.kind.value} needs a {spec.domain.value} configuration, "
                         f"got {config.domain.value}")
    if config.values.shape[-1] != disorder.n_sites:
        raise ModelError(f"configuration has {config.values.shape[-1]} sites, "
                         f"disorder has {disorder.n_sites}")


def neg_hamiltonian(spec: ModelSpec, disorder: Disorder, x: np.ndarray) -> np.ndarray:
    """Vectorised ``-H`` over the rows of ``x`` (no domain validation)."""
    x = np.asarray(x, dtype=np.float64)
    n = disorder.n_sites
    if spec.kind.is_sk:
        scale = spec.beta / math.sqrt(n)
        quad = 0.5 * scale * np.einsum("...i,ij,...j->...", x, disorder.couplings, x)
        return quad + spec.h * x.sum(axis=-1)
    s = x @ disorder.gardner_matrix / math.sqrt(n)
    out = spec.u(s).sum(axis=-1)
    if spec.kind == Kind.ST:
        out = out - spec.kappa * (x * x).sum(axis=-1) + spec.h * (x @ disorder.field_gaussians)
    return out


def energy(spec: ModelSpec, disorder: Disorder, config: SpinConfiguration) -> float:
    """Return ``-H(config)``."""
    _check_config(spec, disorder, config)
    if config.values.ndim != 1:
        raise ModelError("energy expects a single configuration")
    return float(neg_hamiltonian(spec, disorder, config.values))


# --- cavity decomposition ----------------------------------------------------

MAX_CAVITY_SITES = 4


@dataclass(frozen=True)
class CavityDecomposition:
    """A model split into an (N-k)-site truncated system plus k cavity sites.

    ``cavity_vectors[j]`` is A_j; ``varrho`` the coupling scale; for Gardner
    kinds ``w(y) = sqrt(alpha_minus) * u_tilde'(S^-(y))``.
    """

    k: int
    spec: ModelSpec
    disorder: Disorder
    truncated_spec: ModelSpec
    truncated_disorder: Disorder
    cavity_vectors: np.ndarray
    varrho: float
    shrink: float
    intra: np.ndarray                  # k x k couplings dropped from SK kinds
    site_field: np.ndarray             # linear coefficient of x_j in f_j
    site_quadratic: float = 0.0        # coefficient of x_j**2 in f_j (ST)
    alpha_minus: float = 0.0

    @property
    def truncated(self):
        return self.truncated_spec, self.truncated_disorder

    @property
    def n_sites(self) -> int:
        return self.disorder.n_sites

    def w(self, y: np.ndarray) -> np.ndarray:
        """The vector w(y) paired with each A_j (rows of y broadcast)."""
        y = np.asarray(y, dtype=np.float64)
        if self.spec.kind.is_sk:
            return y
        nm = self.n_sites - self.k
        s_minus = y @ self.truncated_disorder.gardner_matrix / math.sqrt(nm)
        return math.sqrt(self.alpha_minus) * self.truncated_spec.u(s_minus, 1)

    def cavity_coupling(self, y: np.ndarray) -> np.ndarray:
        """``varrho * A_j . w(y)`` for every j (last axis)."""
        return self.varrho * self.w(y) @ self.cavity_vectors.T


def cavity_decompose(spec: ModelSpec, disorder: Disorder, k: int,
                     sigma_minus: Optional[float] = None) -> CavityDecomposition:
    """Split off the first ``k`` sites.

    For ST the site term needs ``sigma_minus`` from the truncated RS solution;
    when omitted it is computed with :func:`glasslab.rs.solve_st`.
    """
    n = disorder.n_sites
    if not 1 <= k < n:
        raise ModelError(f"need 1 <= k < N, got k={k}, N={n}")
    if k > MAX_CAVITY_SITES:
        raise ModelError(f"k={k} exceeds the supported maximum {MAX_CAVITY_SITES}")
    shrink = math.sqrt((n - k) / n)
    if spec.kind.is_sk:
        g = disorder.couplings
        t_spec = replace(spec, beta=spec.beta * shrink)
        t_dis = Disorder(n - k, disorder.seed, couplings=g[k:, k:])
        vectors = g[:k, k:] / math.sqrt(n - k)
        intra = spec.beta / math.sqrt(n) * g[:k, :k]
        return CavityDecomposition(k, spec, disorder, t_spec, t_dis, vectors,
                                   varrho=t_spec.beta, shrink=shrink, intra=intra,
                                   site_field=np.full(k, spec.h))
    gm = disorder.gardner_matrix
    M = gm.shape[1]
    t_spec = replace(spec, u=spec.u.shrunk(shrink), M=M, alpha=None)
    gi = disorder.field_gaussians
    t_dis = Disorder(n - k, disorder.seed, gardner_matrix=gm[k:],
                     field_gaussians=None if gi is None else gi[k:])
    vectors = gm[:k] / math.sqrt(M)
    alpha_minus = M / (n - k)
    if spec.kind == Kind.ST:
        if sigma_minus is None:
            import warnings as _w
            from .rs import ValidatedZoneWarning, solve_st
            with _w.catch_warnings():
                _w.simplefilter("ignore", ValidatedZoneWarning)
                sol = solve_st(M / n, spec.u, spec.kappa, spec.h, shrink=shrink)
            sigma_minus = sol.params["sigma"]
        site_field = spec.h * gi[:k]
        # -kappa x^2 from the regulariser plus the second-order cavity term sigma^-/2 x^2
        quad = -(spec.kappa - 0.5 * sigma_minus)
    else:
        site_field = np.zeros(k)
        quad = 0.0
    return CavityDecomposition(k, spec, disorder, t_spec, t_dis, vectors, varrho=1.0,
                               shrink=shrink, intra=np.zeros((k, k)), site_field=site_field,
                               site_quadratic=quad, alpha_minus=alpha_minus)


def decomposed_energy(decomp: CavityDecomposition, config: SpinConfiguration) -> float:
    """``-H_{N,0}(x) = -H^-(y) + sum_j x_j varrho A_j.w(y) + sum_j f_j(x_j)``."""
    _check_config(decomp.spec, decomp.disorder, config)
    x = config.values
    k = decomp.k
    xk, y = x[:k], x[k:]
    trunc = float(neg_hamiltonian(decomp.truncated_spec, decomp.truncated_disorder, y))
    cav = float(np.dot(xk, decomp.cavity_coupling(y)))
    site = float(np.dot(decomp.site_field, xk) + decomp.site_quadratic * np.dot(xk, xk))
    return trunc + cav + site

"""Command-line driver: ``glasslab <experiment> --config FILE [--seed S] [--workers W] [--out DIR]``.

Config files hold ``key = value`` lines.  Model keys are those of
:func:`glasslab.models.spec_from_text`; experiment keys are listed in
``EXPERIMENT_KEYS``.  Example::

    kind = SK_ISING
    beta = 0.25
    h = 0.3
    N = 8, 12, 16, 20
    k = 2
    n_disorders = 2000
    seed = 7

Artifacts in the output directory: ``manifest.json``, ``records.jsonl`` (one
line per disorder, appended as results arrive, so an interrupted sweep resumes
where it stopped), ``summary.csv`` and one JSON report per grid point.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional

from . import __version__
from .models import MAX_SITES, MODEL_KEYS, ModelError, ModelSpec, parse_key_values, spec_from_mapping
from .rs import Quadrature, RSConvergenceError, ValidatedZoneWarning, solve
from .sampler import ChainConfig, DisorderAverageError, default_workers
from .seeding import sub_seed
from . import verify

EXPERIMENTS = ("rs-solve", "li-sweep", "concentration", "decompose-gap", "projection")
EXPERIMENT_KEYS = ("experiment", "N", "k", "p", "n_disorders", "form", "backend", "n_sweeps",
                   "burn_in", "thin", "proposal_std", "quadrature", "seed", "out", "workers",
                   "battery")
EXIT_CONFIG = 2
EXIT_RUN = 3


@dataclass
class ExperimentConfig:
    experiment: str
    spec: ModelSpec
    N: tuple = ()
    k: int = 2
    p: int = 1
    n_disorders: int = 100
    form: str = "PARTIAL"
    backend: str = "auto"
    chain: ChainConfig = field(default_factory=lambda: verify.DEFAULT_CHAIN)
    quadrature: int = 61
    seed: int = 0
    out: str = "glasslab-out"
    workers: Optional[int] = None
    battery: tuple = ("const", "tanh", "cos0.5", "cos1", "cos2", "clipquad")

    def canonical(self) -> dict:
        """Everything that determines the results (not the output path or worker count)."""
        c = self.chain
        return {"experiment": self.experiment, "model": self.spec.to_text(), "N": list(self.N),
                "k": self.k, "p": self.p, "n_disorders": self.n_disorders, "form": self.form,
                "backend": self.backend, "chain": [c.n_sweeps, c.burn_in, c.thin, c.proposal_std],
                "quadrature": self.quadrature, "seed": self.seed, "battery": list(self.battery)}

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _int_in(name, value, line, source, lo, hi):
    try:
        v = int(value)
    except ValueError:
        raise ModelError(f"{source}:{line}: {name} must be an integer, got {value!r}") from None
    if not lo <= v <= hi:
        raise ModelError(f"{source}:{line}: {name}={v} outside [{lo}, {hi}]")
    return v


def parse_config(text: str, experiment: str, source: str = "<config>",
                 overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and range-check an experiment config; errors name the file and line."""
    items = parse_key_values(text, source)
    for key, value in (overrides or {}).items():
        if value is not None:
            items[key] = (str(value), "cli")
    unknown = set(items) - set(MODEL_KEYS) - set(EXPERIMENT_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ModelError(f"{source}:{items[key][1]}: unknown key {key!r}")
    if experiment not in EXPERIMENTS:
        raise ModelError(f"unknown experiment {experiment!r}")
    if "experiment" in items and items["experiment"][0] != experiment:
        value, line = items["experiment"]
        raise ModelError(f"{source}:{line}: config is for {value!r}, not {experiment!r}")
    spec = spec_from_mapping({k: v for k, v in items.items() if k in MODEL_KEYS}, source)
    cfg = ExperimentConfig(experiment, spec)

    def get(key):
        return items[key] if key in items else (None, None)

    value, line = get("N")
    if value is not None:
        cfg.N = tuple(_int_in("N", v.strip(), line, source, 2, MAX_SITES)
                      for v in value.split(",") if v.strip())
    if experiment != "rs-solve" and not cfg.N:
        raise ModelError(f"{source}: {experiment} needs an N grid (e.g. 'N = 8, 12, 16')")
    if experiment == "rs-solve" and spec.kind.is_gardner and spec.alpha is None and not cfg.N:
        raise ModelError(f"{source}: rs-solve with M given needs N (or give alpha)")
    for key, lo, hi in (("k", 1, 4), ("p", 1, 8), ("n_disorders", 2, 10**7),
                        ("quadrature", 3, 401), ("seed", 0, 2**64 - 1), ("workers", 1, 1024)):
        value, line = get(key)
        if value is not None:
            setattr(cfg, key, _int_in(key, value, line, source, lo, hi))
    value, line = get("form")
    if value is not None:
        if value.upper() not in ("PARTIAL", "LIMITING"):
            raise ModelError(f"{source}:{line}: form must be PARTIAL or LIMITING")
        cfg.form = value.upper()
    value, line = get("backend")
    if value is not None:
        if value not in ("exact", "mcmc", "auto"):
            raise ModelError(f"{source}:{line}: backend must be exact, mcmc or auto")
        cfg.backend = value
    value, line = get("battery")
    if value is not None:
        names = tuple(v.strip() for v in value.split(",") if v.strip())
        try:
            verify.exact.battery_ids(names)
        except ModelError as exc:
            raise ModelError(f"{source}:{line}: {exc}") from None
        cfg.battery = names
    chain = {"n_sweeps": cfg.chain.n_sweeps, "burn_in": cfg.chain.burn_in,
             "thin": cfg.chain.thin, "proposal_std": cfg.chain.proposal_std}
    for key in ("n_sweeps", "burn_in", "thin"):
        value, line = get(key)
        if value is not None:
            chain[key] = _int_in(key, value, line, source, 1, 10**9)
    value, line = get("proposal_std")
    if value is not None:
        try:
            chain["proposal_std"] = float(value)
        except ValueError:
            raise ModelError(f"{source}:{line}: proposal_std must be a number") from None
    try:
        cfg.chain = ChainConfig(seed=cfg.seed, **chain)
    except ModelError as exc:
        raise ModelError(f"{source}: {exc}") from None
    value, line = get("out")
    if value is not None:
        cfg.out = value
    for n in cfg.N:
        if experiment in ("li-sweep", "decompose-gap", "projection") and cfg.k >= n:
            raise ModelError(f"{source}: k={cfg.k} must be smaller than every N (got N={n})")
        try:
            if experiment == "decompose-gap":
                if not spec.kind.is_discrete:
                    raise ModelError("decompose-gap needs SK_ISING or PERCEPTRON")
                verify.resolve_backend(spec, n - cfg.k, "exact")
            elif experiment != "rs-solve":
                verify.resolve_backend(spec, n, cfg.backend)
        except ModelError as exc:
            raise ModelError(f"{source}: {exc}") from None
    return cfg


# --- run ----------------------------------------------------------------------------

class _RecordLog:
    """Append-only per-disorder log; the only writer of records.jsonl."""

    def __init__(self, path: str):
        self.path = path
        self.done: dict = {}
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # a torn final line from an interrupted run
                    if rec.get("values") is not None:
                        self.done.setdefault(rec["N"], {})[rec["index"]] = rec["values"]
        self.fh = open(path, "a", encoding="utf-8")
        self.failures: list = []
        self.count = sum(len(v) for v in self.done.values())

    def __call__(self, N, index, values, error):
        self.fh.write(json.dumps({"N": N, "index": index, "values": values, "error": error}) + "\n")
        self.fh.flush()
        self.count += 1
        if error is not None:
            self.failures.append({"N": N, "index": index, "error": error})

    def close(self):
        self.fh.close()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if isinstance(text, str) else json.dumps(text, indent=2))


def _rs_inputs(cfg: ExperimentConfig) -> dict:
    s = cfg.spec
    if s.kind.is_sk:
        return {"beta": s.beta, "h": s.h}
    alpha = s.alpha if s.alpha is not None else s.n_patterns(cfg.N[0]) / cfg.N[0]
    return {"alpha": alpha, "u": s.u, "kappa": s.kappa, "h": s.h}


def _base_row(cfg, N="", statistic="", value="", se=""):
    return {"model": cfg.spec.kind.value, "N": N, "k": cfg.k, "p": cfg.p, "form": cfg.form,
            "n_disorders": cfg.n_disorders, "statistic": statistic, "value": value, "se": se,
            "seed": cfg.seed}


def run(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    manifest_path = os.path.join(cfg.out, "manifest.json")
    chash = cfg.config_hash()
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            old = json.load(fh)
        if old.get("config_hash") != chash:
            print(f"error: {cfg.out} holds results of a different configuration", file=sys.stderr)
            return EXIT_CONFIG
    manifest = {"config_hash": chash, "config": cfg.canonical(), "tool_version": __version__,
                "started": _now(), "artifacts": [], "status": "running"}
    _write_json(manifest_path, manifest)
    log = _RecordLog(os.path.join(cfg.out, "records.jsonl"))
    workers = cfg.workers if cfg.workers is not None else default_workers()
    rows: list = []
    artifacts = ["records.jsonl", "summary.csv"]
    quad = Quadrature(cfg.quadrature)
    status = 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ValidatedZoneWarning)
            if cfg.experiment == "rs-solve":
                sol = solve(cfg.spec.kind, _rs_inputs(cfg), quad)
                name = f"rs_{cfg.spec.kind.value.lower()}.json"
                _write_json(os.path.join(cfg.out, name), sol.to_json())
                artifacts.append(name)
                rows += [_base_row(cfg, statistic=k, value=v) for k, v in sol.params.items()]
                rows.append(_base_row(cfg, statistic="residual", value=sol.residual_inf))
                if not sol.converged:
                    status = EXIT_RUN
            elif cfg.experiment == "li-sweep":
                reports = verify.li_sweep(cfg.spec, cfg.N, cfg.k, cfg.p, cfg.n_disorders,
                                          cfg.form, cfg.seed, cfg.backend, cfg.chain, workers,
                                          quad, on_record=log, done=log.done)
                for r in reports:
                    name = f"li_N{r.N}.json"
                    _write_json(os.path.join(cfg.out, name), r.to_json())
                    artifacts.append(name)
                    rows += r.csv_rows()
                if len(reports) >= 2 and all(r.tv_moment_2p > 0 for r in reports):
                    fit = verify.fit_loglog([r.N for r in reports],
                                            [r.aggregate.values["tv2p"] for r in reports])
                    rows.append(_base_row(cfg, statistic="loglog_slope", value=fit.slope,
                                          se=fit.se))
            elif cfg.experiment == "concentration":
                for N in cfg.N:
                    cb = (lambda i, v, e, N=N: log(N, i, v, e))
                    r = verify.concentration_stats(cfg.spec, N, cfg.n_disorders,
                                                   sub_seed(cfg.seed, N), cfg.backend,
                                                   cfg.chain, workers, cb, log.done.get(N))
                    r.seed = cfg.seed
                    name = f"concentration_N{N}.json"
                    _write_json(os.path.join(cfg.out, name), r.to_json())
                    artifacts.append(name)
                    rows += r.csv_rows()
            elif cfg.experiment == "decompose-gap":
                reports = verify.gap_sweep(cfg.spec, cfg.N, cfg.k, cfg.p, cfg.n_disorders,
                                           cfg.seed, workers, log, log.done)
                for r in reports:
                    name = f"gap_N{r.N}.json"
                    _write_json(os.path.join(cfg.out, name), r.to_json())
                    artifacts.append(name)
                    rows += r.csv_rows()
                for a, b in zip(reports, reports[1:]):
                    if a.gap > 0 and b.gap > 0:
                        ratio, se = verify.gap_ratio(a, b)
                        rows.append(_base_row(cfg, N=f"{b.N}/{a.N}", statistic="gap_ratio",
                                              value=ratio, se=se))
            else:
                for N in cfg.N:
                    cb = (lambda i, v, e, N=N: log(N, i, v, e))
                    r = verify.projection_test(cfg.spec, N, cfg.k, cfg.battery, cfg.n_disorders,
                                               sub_seed(cfg.seed, N), cfg.backend,
                                               cfg.chain, workers, quad, cb, log.done.get(N))
                    r.seed = cfg.seed
                    name = f"projection_N{N}.json"
                    _write_json(os.path.join(cfg.out, name), r.to_json())
                    artifacts.append(name)
                    rows += r.csv_rows()
    except DisorderAverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_RUN
    except (ModelError, RSConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_RUN
    finally:
        log.close()
    verify.write_summary_csv(os.path.join(cfg.out, "summary.csv"), rows)
    manifest.update(finished=_now(), artifacts=artifacts, n_records=log.count,
                    failures=log.failures, status="ok" if status == 0 else "failed",
                    workers=workers)
    _write_json(manifest_path, manifest)
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glasslab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"glasslab {__version__}")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int,
                        help="worker processes (default: config, then $GLASSLAB_WORKERS, then 1)")
        sp.add_argument("--out", help="output directory (overrides the config)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, args.experiment, args.config,
                           {"seed": args.seed, "workers": args.workers, "out": args.out})
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())

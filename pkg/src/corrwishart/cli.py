"""Command-line entry point: ``corrwishart {simulate,tw-table,oracle,condition}``.

Configurations are JSON files.  Floating-point output is written with 10
significant digits through ``format(x, ".10g")``, which does not depend on
the locale.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import re
import sys
from typing import Any

import numpy as np

from . import __version__
from .ensemble import (
    BETAS,
    EmpiricalSpectrum,
    EnsembleConfig,
    InvalidSpectrum,
    SpectrumSpec,
    build_spectrum,
    substream,
    SPECTRUM_STREAM,
)
from .harness import SCALING_MODES, ExperimentConfig, run_experiment, write_outputs
from .oracle import (
    KINDS,
    GapQuery,
    IllConditioned,
    QuadratureNotConverged,
    gap_exact_beta2,
    gap_exact_beta2_with_error,
    matrix_model_integral,
)
from .scaling import DegenerateEdge, variance_condition
from .tracywidom import DEFAULT_F4_CONVENTION, F4_CONVENTIONS, tracy_widom

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2

DEFAULT_KS_THRESHOLD = {"max": 0.015, "min": 0.02}


class ConfigError(ValueError):
    """Malformed configuration, anchored to a line of the source file."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


class _Source:
    """Parsed JSON document that remembers where its keys appear."""

    def __init__(self, path: str):
        self.path = path
        try:
            with open(path, encoding="utf-8") as fh:
                self.text = fh.read()
        except OSError as exc:
            raise ConfigError(path, 0, f"cannot read config: {exc.strerror}") from exc
        try:
            self.data = json.loads(self.text)
        except json.JSONDecodeError as exc:
            raise ConfigError(path, exc.lineno, f"invalid JSON: {exc.msg} (column {exc.colno})") from exc
        if not isinstance(self.data, dict):
            raise ConfigError(path, 1, "top level must be a JSON object")

    def line_of(self, key: str) -> int:
        m = re.search(r'"' + re.escape(key) + r'"\s*:', self.text)
        return self.text.count("\n", 0, m.start()) + 1 if m else 1

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(self.path, self.line_of(key), message)

    def require(self, d: dict, key: str, kind=None):
        if d.get(key) is None:
            raise ConfigError(self.path, 1, f"missing required field {key!r}")
        return self.typed(d, key, kind)

    def typed(self, d: dict, key: str, kind=None, default=None):
        # an explicit null means "not given", so recorded configs load back
        if d.get(key) is None:
            return default
        v = d[key]
        if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise self.error(key, f"field {key!r} must be an integer, got {v!r}")
        if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise self.error(key, f"field {key!r} must be a number, got {v!r}")
        if kind is str and not isinstance(v, str):
            raise self.error(key, f"field {key!r} must be a string, got {v!r}")
        if kind is dict and not isinstance(v, dict):
            raise self.error(key, f"field {key!r} must be an object")
        if kind is list and not isinstance(v, list):
            raise self.error(key, f"field {key!r} must be a list")
        return v


def _spectrum_spec(src: _Source, d: dict) -> SpectrumSpec:
    kind = src.require(d, "kind", str)
    try:
        return SpectrumSpec(
            kind=kind,
            values=src.typed(d, "values", list),
            mean=float(src.typed(d, "mean", float, 1.0)),
            var_exponent=src.typed(d, "var_exponent", float),
        )
    except (InvalidSpectrum, TypeError, ValueError) as exc:
        raise src.error("spectrum", f"bad spectrum: {exc}") from exc


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(effective: dict) -> str:
    return hashlib.sha256(canonical_json(effective).encode("ascii")).hexdigest()


def load_simulation_config(path: str, seed_override: int | None = None,
                           threads: int | None = None) -> tuple[ExperimentConfig, dict]:
    """Parse a simulation config; returns the experiment and the effective JSON."""
    src = _Source(path)
    d = src.data
    beta = src.require(d, "beta", int)
    if beta not in BETAS:
        raise src.error("beta", f"beta must be one of {BETAS}, got {beta}")
    p = src.require(d, "p", int)
    n = src.require(d, "n", int)
    if not 1 <= p <= n:
        raise src.error("p", f"need 1 <= p <= n, got p={p}, n={n}")
    trials = src.require(d, "trials", int)
    if trials < 100:
        raise src.error("trials", "trials must be at least 100")
    spectrum = _spectrum_spec(src, src.typed(d, "spectrum", dict, {"kind": "identity"}))
    seed = src.typed(d, "seed", int, 0) if seed_override is None else seed_override
    if not 0 <= seed < 2**64:
        raise src.error("seed", "seed must be a 64-bit unsigned integer")
    edges = tuple(src.typed(d, "edges", list, ["max", "min"]))
    if not edges or any(e not in ("max", "min") for e in edges):
        raise src.error("edges", "edges must be a nonempty subset of [\"max\", \"min\"]")
    mode = src.typed(d, "scaling_mode", str, "auto")
    if mode not in SCALING_MODES:
        raise src.error("scaling_mode", f"scaling_mode must be one of {SCALING_MODES}")
    bins = src.typed(d, "histogram_bins", int, 60)
    if bins < 10:
        raise src.error("histogram_bins", "histogram_bins must be at least 10")
    conv = src.typed(d, "f4_convention", str)
    if conv is not None and conv not in F4_CONVENTIONS:
        raise src.error("f4_convention", f"f4_convention must be one of {F4_CONVENTIONS}")
    ks_threshold = src.typed(d, "ks_threshold", None, None)
    if ks_threshold is not None and not (
        isinstance(ks_threshold, (int, float))
        or (isinstance(ks_threshold, dict) and set(ks_threshold) <= {"max", "min"})
    ):
        raise src.error("ks_threshold", "ks_threshold must be a number or {edge: number}")
    out_dir = src.typed(d, "out_dir", str)
    n_threads = threads if threads is not None else src.typed(d, "threads", int, 1)
    if n_threads < 1:
        raise src.error("threads", "threads must be >= 1")
    if spectrum.kind == "explicit" and len(spectrum.values) != p:
        raise src.error("spectrum", "explicit spectrum length differs from p")

    try:
        ens = EnsembleConfig(beta=beta, p=p, n=n, spectrum=spectrum, seed=seed)
        cfg = ExperimentConfig(
            ensemble=ens,
            trials=trials,
            edges=edges,
            scaling_mode=mode,
            histogram_bins=bins,
            threads=n_threads,
            f4_convention=conv,
        )
    except ValueError as exc:
        raise src.error("scaling_mode" if "scaling" in str(exc) else "beta", str(exc)) from exc
    effective = {
        "beta": beta,
        "p": p,
        "n": n,
        "trials": trials,
        "spectrum": spectrum.to_dict(),
        "seed": seed,
        "edges": list(edges),
        "scaling_mode": mode,
        "histogram_bins": bins,
        "f4_convention": conv,
        "ks_threshold": ks_threshold,
        "out_dir": out_dir,
    }
    return cfg, effective


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_simulate(args) -> int:
    try:
        cfg, effective = load_simulation_config(args.config, args.seed, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or effective["out_dir"]
    if not out_dir:
        print(f"error: {args.config}:1: no output directory (set out_dir or pass --out)", file=sys.stderr)
        return EXIT_CONFIG
    effective["out_dir"] = out_dir
    started = _utc_now()
    try:
        result = run_experiment(cfg)
    except DegenerateEdge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = write_outputs(result, out_dir)
    # the hash identifies the experiment, not where it was written
    hashed = {k: v for k, v in effective.items() if k != "out_dir"}
    manifest = {
        "tool": "corrwishart",
        "version": __version__,
        "config_sha256": config_hash(hashed),
        "config_path": args.config,
        "out_dir": out_dir,
        "seed": cfg.ensemble.seed,
        "threads": cfg.threads,
        "started_utc": started,
        "finished_utc": _utc_now(),
        "config": effective,
    }
    with open(f"{out_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    worst = 0
    for edge, info in summary["edges"].items():
        print(f"{edge}: mode={info['mode']} ks={_fmt(info['ks'])}")
    if args.check:
        th = effective["ks_threshold"]
        for edge, info in summary["edges"].items():
            limit = th if isinstance(th, (int, float)) else (th or DEFAULT_KS_THRESHOLD).get(
                edge, DEFAULT_KS_THRESHOLD[edge]
            )
            if info["ks"] > limit:
                print(f"check failed: {edge} KS {_fmt(info['ks'])} > {_fmt(limit)}", file=sys.stderr)
                worst = EXIT_CHECK
    return worst


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("grid must be LO:HI:STEP") from exc
    if not (hi > lo and step > 0):
        raise argparse.ArgumentTypeError("grid needs HI > LO and STEP > 0")
    return lo + step * np.arange(int(round((hi - lo) / step)) + 1)


def _open_out(path: str | None):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_tw_table(args) -> int:
    betas = sorted({int(b) for b in args.betas.split(",")})
    if any(b not in BETAS for b in betas):
        print(f"error: betas must be drawn from {BETAS}", file=sys.stderr)
        return EXIT_CONFIG
    grid = args.grid
    dists = {b: tracy_widom(b, args.f4_convention) for b in betas}
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        header = ["chi"]
        for b in betas:
            header += [f"F{b}", f"f{b}"]
        w.writerow(header)
        cols = {b: (dists[b].cdf(grid), dists[b].pdf(grid)) for b in betas}
        for i, x in enumerate(grid):
            row = [_fmt(round(x, 12))]
            for b in betas:
                row += [_fmt(cols[b][0][i]), _fmt(cols[b][1][i])]
            w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def _thresholds(src: _Source, d: dict) -> list[float]:
    th = src.require(d, "thresholds")
    if isinstance(th, dict):
        try:
            vals = np.linspace(float(th["start"]), float(th["stop"]), int(th["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise src.error("thresholds", "thresholds object needs start, stop, num") from exc
    elif isinstance(th, list) and th and all(isinstance(v, (int, float)) for v in th):
        vals = np.asarray(th, dtype=float)
    else:
        raise src.error("thresholds", "thresholds must be a nonempty list or {start, stop, num}")
    if np.any(vals <= 0):
        raise src.error("thresholds", "thresholds must be positive")
    return [float(v) for v in vals]


def _query_spectrum(src: _Source, d: dict, p: int) -> EmpiricalSpectrum:
    try:
        if "lambdas" in d:
            lam = src.typed(d, "lambdas", list)
            if len(lam) != p:
                raise src.error("lambdas", f"lambdas has {len(lam)} entries, p = {p}")
            return EmpiricalSpectrum.from_values(lam)
        spec = _spectrum_spec(src, src.typed(d, "spectrum", dict, {"kind": "identity"}))
        seed = src.typed(d, "seed", int, 0)
        return build_spectrum(spec, p, substream(seed, SPECTRUM_STREAM))
    except InvalidSpectrum as exc:
        key = "lambdas" if "lambdas" in d else "spectrum"
        raise src.error(key, str(exc)) from exc


def cmd_oracle(args) -> int:
    try:
        src = _Source(args.config)
        d = src.data
        kind = src.require(d, "kind", str)
        if kind not in KINDS:
            raise src.error("kind", f"kind must be one of {KINDS}")
        beta = src.typed(d, "beta", int, 2)
        if beta != 2:
            raise src.error("beta", "the oracle covers beta = 2 only")
        n = src.require(d, "n", int)
        p = src.require(d, "p", int)
        if not 1 <= p <= n:
            raise src.error("p", f"need 1 <= p <= n, got p={p}, n={n}")
        spectrum = _query_spectrum(src, d, p)
        thresholds = _thresholds(src, d)
        route = src.typed(d, "route", str, "exact")
        if route not in ("exact", "matrix_model"):
            raise src.error("route", "route must be 'exact' or 'matrix_model'")
        dps = src.typed(d, "dps", int)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    rows = []
    try:
        for t in thresholds:
            q = GapQuery(kind, t, spectrum, n, beta)
            if route == "matrix_model":
                res = matrix_model_integral(q)
                rows.append((t, res.value, res.error_estimate))
            elif dps is not None:
                rows.append((t, gap_exact_beta2(q, dps=dps), 10.0 ** (-dps + 2)))
            else:
                rows.append((t, *gap_exact_beta2_with_error(q)))
    except (IllConditioned, QuadratureNotConverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    fh = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "probability", "est_error"])
        for t, v, e in rows:
            w.writerow([_fmt(t), _fmt(v), _fmt(e)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_condition(args) -> int:
    try:
        src = _Source(args.config)
        d = src.data
        n = src.require(d, "n", int)
        if "lambdas" in d:
            p = len(src.typed(d, "lambdas", list))
        else:
            p = src.require(d, "p", int)
        if not 1 <= p <= n:
            raise src.error("n", f"need 1 <= p <= n, got p={p}, n={n}")
        spectrum = _query_spectrum(src, d, p)
        report = variance_condition(spectrum, n)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrwishart",
        description="Extreme eigenvalues of correlated Wishart matrices.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    sim.add_argument("--config", required=True, help="JSON experiment config")
    sim.add_argument("--out", help="output directory (overrides out_dir)")
    sim.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    sim.add_argument("--seed", type=int, help="master seed (overrides the config)")
    sim.add_argument("--check", action="store_true",
                     help="exit 2 if a KS statistic exceeds ks_threshold")
    sim.set_defaults(func=cmd_simulate)

    tw = sub.add_parser("tw-table", help="tabulate Tracy-Widom CDFs and densities")
    tw.add_argument("--betas", default="1,2,4", help="comma-separated subset of 1,2,4")
    tw.add_argument("--grid", type=_parse_grid, default=_parse_grid("-10:6:0.01"),
                    help="LO:HI:STEP (default -10:6:0.01)")
    tw.add_argument("--f4-convention", choices=F4_CONVENTIONS, default=DEFAULT_F4_CONVENTION)
    tw.add_argument("--out", help="CSV file (default stdout)")
    tw.set_defaults(func=cmd_tw_table)

    orc = sub.add_parser("oracle", help="exact beta=2 gap probabilities")
    orc.add_argument("--config", required=True, help="JSON query")
    orc.add_argument("--out", help="CSV file (default stdout)")
    orc.set_defaults(func=cmd_oracle)

    cond = sub.add_parser("condition", help="check the spectral variance condition")
    cond.add_argument("--config", required=True, help="JSON with n and lambdas or p + spectrum")
    cond.set_defaults(func=cmd_condition)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

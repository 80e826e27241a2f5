"""Command-line entry point: ``spingap <subcommand> --config run.toml``.

Exit status: 0 on success, 2 for an invalid configuration, 3 when a
numerical self-check fails.  The grammar of the config file is described in
the README.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:      # python < 3.11
    import tomli as tomllib

from . import __version__
from .potential import PHI_FAMILIES, PSI_FAMILIES, PotentialSpec

logger = logging.getLogger("spingap")

KINDS = {
    "tilt": "tilt_sweep",
    "clt": "clt_scaling",
    "kop": "kop_confinement",
    "gap": "gap_exact",
    "recursion": "gap_recursion",
    "paths": "gl_paths",
    "compare": "gl_compare",
    "sample": "sample",
}
STOCHASTIC = {"sample", "gap_recursion"}

EXIT_OK, EXIT_CONFIG, EXIT_SELFCHECK = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message)

    def __str__(self):
        msg = self.args[0]
        return f"line {self.line}: {msg}" if self.line else msg


class SelfCheckFailure(RuntimeError):
    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"self-check failed [{invariant}]: {message}")


# -- config -------------------------------------------------------------------


def _locate(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    header = re.compile(r"^\s*\[([^\[\]]+)\]\s*(#.*)?$")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _grid(value, name: str) -> list:
    """A list of numbers, or ``{start, stop, num}`` for an evenly spaced grid."""
    if isinstance(value, dict):
        try:
            start, stop, num = float(value["start"]), float(value["stop"]), int(value["num"])
        except KeyError as exc:
            raise ConfigError(f"{name} grid needs start, stop and num (missing {exc.args[0]})")
        vals = np.linspace(start, stop, num).tolist() if num > 0 else []
    elif isinstance(value, (list, tuple)):
        vals = list(value)
    elif isinstance(value, (int, float)):
        vals = [value]
    else:
        raise ConfigError(f"{name} grid must be a list or a table")
    if not vals:
        raise ConfigError(f"{name} grid empty")
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{name} grid has a non-numeric entry {v!r}")
    return vals


@dataclass
class ExperimentConfig:
    kind: str
    potential: PotentialSpec
    rho: list = field(default_factory=lambda: [0.0])
    n: list = field(default_factory=list)
    l: list = field(default_factory=list)
    d: list = field(default_factory=lambda: [1])
    resolution: Optional[int] = None
    tolerance: Optional[float] = None
    seed: Optional[int] = None
    options: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    source_hash: str = ""


DEFAULT_PHI_PARAMS = {"quadratic": (0.5,), "quartic": (0.5, 1.0 / 12.0), "smoothed_power": (0.5, 0.1)}
_TOP = {"experiment", "potential", "grid", "numerics", "sampler", "options"}


def parse_config(text: str, kind: str) -> ExperimentConfig:
    """Parse and validate config text for the experiment ``kind``."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else len(text.splitlines())
        raise ConfigError(f"syntax error: {exc}", line)

    def fail(msg, section=None, key=None):
        raise ConfigError(msg, _locate(text, section, key))

    for sec in raw:
        if sec not in _TOP:
            fail(f"unknown section [{sec}]", sec)
    exp = raw.get("experiment", {})
    declared = exp.get("kind")
    if declared is not None and declared != kind:
        fail(f"config is for {declared!r}, subcommand runs {kind!r}", "experiment", "kind")

    pot_raw = dict(raw.get("potential", {}))
    if not pot_raw:
        fail("missing [potential] section")
    phi = pot_raw.pop("phi", None)
    if phi not in PHI_FAMILIES:
        fail(f"unknown phi family {phi!r}; expected one of {', '.join(PHI_FAMILIES)}", "potential", "phi")
    psi = pot_raw.pop("psi", "zero")
    if psi not in PSI_FAMILIES:
        fail(f"unknown psi family {psi!r}; expected one of {', '.join(PSI_FAMILIES)}", "potential", "psi")
    kwargs = {"phi_family": phi, "psi_family": psi,
              "phi_params": tuple(pot_raw.pop("phi_params", DEFAULT_PHI_PARAMS.get(phi, ()))),
              "psi_params": tuple(pot_raw.pop("psi_params", ()))}
    for key in ("delta", "beta_plus", "beta_minus", "psi_sup", "psi_d1_sup", "psi_d2_sup", "growth_c"):
        if key in pot_raw:
            kwargs[key] = float(pot_raw.pop(key))
    if pot_raw:
        k0 = next(iter(pot_raw))
        fail(f"unknown potential key {k0!r}", "potential", k0)
    try:
        pot = PotentialSpec(**kwargs)
    except (ValueError, TypeError) as exc:
        fail(f"invalid potential: {exc}", "potential", "phi")

    grid = raw.get("grid", {})
    cfg = ExperimentConfig(kind, pot, source_hash=hashlib.sha256(text.encode()).hexdigest())
    for name in ("rho", "n", "l", "d"):
        if name in grid:
            try:
                setattr(cfg, name, _grid(grid[name], name))
            except ConfigError as exc:
                fail(exc.args[0], "grid", name)
    for name in ("n", "l", "d"):
        vals = getattr(cfg, name)
        if any(float(v) != int(v) or v < 1 for v in vals):
            fail(f"{name} grid must hold positive integers", "grid", name)
        setattr(cfg, name, sorted(int(v) for v in vals))
    cfg.rho = sorted(float(v) for v in cfg.rho)

    need = {"clt_scaling": "n", "kop_confinement": "n", "gap_exact": "n",
            "gl_paths": "l", "gl_compare": "l", "sample": "n"}
    if kind in need and not getattr(cfg, need[kind]):
        fail(f"{need[kind]} grid empty", "grid")

    num = raw.get("numerics", {})
    if "resolution" in num:
        cfg.resolution = int(num["resolution"])
        if cfg.resolution < 8:
            fail("resolution must be >= 8", "numerics", "resolution")
    if "tolerance" in num:
        cfg.tolerance = float(num["tolerance"])
    cfg.seed = exp.get("seed")
    cfg.options = dict(raw.get("options", {}))
    cfg.sampler = dict(raw.get("sampler", {}))
    return cfg


# -- experiments ----------------------------------------------------------------
# Each returns (rows, extra) with rows a list of flat dicts.


def _tilt(cfg, pool):
    from .single_site import verify_moment_bounds, verify_sigma_bounds
    rows = pool(_tilt_cell, [(cfg.potential, r) for r in cfg.rho])
    extra = {}
    if cfg.options.get("bounds", True):
        sb = verify_sigma_bounds(cfg.potential, cfg.rho)
        mb = verify_moment_bounds(cfg.potential, cfg.rho, int(cfg.options.get("moment_order", 4)))
        extra = {"sigma_k": sb.observed_k, "brackets_ok": sb.brackets_ok,
                 "moment_k": mb.k, "moment_max_ratio": mb.max_ratio, "moment_ok": mb.ok}
    return rows, extra


def _tilt_cell(args):
    from .single_site import solve_chemical_potential
    pot, r = args
    tm = solve_chemical_potential(pot, r, k_max=4)
    return {"rho": r, "lambda": tm.lam, "log_z": tm.log_z, "sigma2": tm.sigma2,
            "m3": tm.m3, "m4": tm.m4, "tail_mass": tm.tail_mass}


def _clt(cfg, pool):
    from .edgeworth import DEFAULT_RESOLUTION, VARIANTS
    variants = cfg.options.get("variants", list(VARIANTS))
    res = cfg.resolution or DEFAULT_RESOLUTION
    out = pool(_clt_cell, [(cfg.potential, r, tuple(cfg.n), res, tuple(variants)) for r in cfg.rho])
    rows = [row for chunk in out for row in chunk]
    return rows, {}


def _clt_cell(args):
    from .edgeworth import verify_edgeworth_scaling
    from .single_site import solve_chemical_potential
    pot, r, n_list, res, variants = args
    tm = solve_chemical_potential(pot, r)
    reps = verify_edgeworth_scaling(tm, n_list, res, variants)
    return [{"rho": r, "variant": v, **row} for v in variants for row in reps[v].to_rows()]


def _kop(cfg, pool):
    from .edgeworth import DEFAULT_RESOLUTION
    res = cfg.resolution or DEFAULT_RESOLUTION
    if min(cfg.n) < 4:
        raise ConfigError("kop needs every n >= 4")
    out = pool(_kop_cell, [(cfg.potential, r, tuple(cfg.n), res) for r in cfg.rho])
    tol = cfg.tolerance if cfg.tolerance is not None else 1e-6
    rows = [row for chunk in out for row in chunk]
    for row in rows:
        if row["eig_residual"] > tol:
            raise SelfCheckFailure("eigen_identity",
                                   f"residual {row['eig_residual']:.3g} > {tol:g} at n={row['n']}, rho={row['rho']}")
    return rows, {}


def _kop_cell(args):
    from .kop import spectral_confinement
    from .single_site import solve_chemical_potential
    pot, r, n_list, res = args
    rep = spectral_confinement(solve_chemical_potential(pot, r), n_list, res)
    return rep.to_rows()


def _gap(cfg, pool):
    if any(n not in (2, 3) for n in cfg.n):
        raise ConfigError("gap (exact) supports n in {2, 3}")
    res = cfg.resolution or 128
    tol = cfg.tolerance if cfg.tolerance is not None else 1e-4
    cells = [(cfg.potential, n, r, res, tol) for n in cfg.n for r in cfg.rho]
    return pool(_gap_cell, cells), {}


def _gap_cell(args):
    from .gap import exact_gap_small_n, nzero_bound
    pot, n, r, res, tol = args
    est = exact_gap_small_n(pot, n, r, res, tol=tol)
    return {**est.to_row(), "nzero_bound": nzero_bound(pot, n)}


def _sampler_config(cfg):
    from .sampler import SamplerConfig
    kw = dict(cfg.sampler)
    kw.pop("samples_path", None)
    kw["seed"] = int(cfg.seed)
    try:
        return SamplerConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"invalid [sampler] section: {exc}")


def _recursion(cfg, pool):
    from .gap import recursion_check
    n_max = int(cfg.options.get("n_max", max(cfg.n) if cfg.n else 3))
    rep = recursion_check(cfg.potential, cfg.rho, n_max, cfg.resolution or 128,
                          _sampler_config(cfg) if n_max > 3 else None)
    rows = [{"N": n, "rho": r, "gamma": g, "method": m, "lower": lo, "upper": hi}
            for n, r, g, m, lo, hi in zip(rep.sizes, rep.argmax_rho, rep.gamma, rep.methods,
                                          rep.lower, rep.upper)]
    return rows, {"C": rep.C, "C_prime": rep.C_prime, "flags": rep.flags}


def _paths(cfg, pool):
    cells = [(d, l) for d in cfg.d for l in cfg.l]
    return pool(_paths_cell, cells), {}


def _paths_cell(args):
    from .gl import Lattice, build_paths, verify_path_props
    d, l = args
    p = verify_path_props(build_paths(Lattice(d, l)), exhaustive_lengths=False)
    return {"d": d, "L": l, "max_length": p.max_length, "max_congestion": p.max_congestion,
            "implied_k": p.implied_k}


def _compare(cfg, pool):
    if cfg.d != [1]:
        raise ConfigError("compare supports d = 1")
    out = pool(_compare_cell, [(cfg.potential, tuple(cfg.l), r, cfg.resolution or 128) for r in cfg.rho])
    return [row for chunk in out for row in chunk], {}


def _compare_cell(args):
    from .gl import comparison_check
    pot, l_list, r, res = args
    return [asdict(row) for row in comparison_check(pot, 1, l_list, r, res)]


def _sample(cfg, pool):
    from .sampler import run_chains, write_samples
    if len(cfg.n) != 1 or len(cfg.rho) != 1:
        raise ConfigError("sample takes a single n and a single rho")
    sc = _sampler_config(cfg)
    run = run_chains(cfg.potential, cfg.n[0], cfg.rho[0], sc)
    err = run.state.sum_error()
    if err > 1e-9:
        raise SelfCheckFailure("sum_conservation", f"|sum eta - n rho| = {err:.3g}")
    summ = run.summary()
    path = cfg.sampler.get("samples_path")
    if path:
        write_samples(path, run.samples.reshape(-1, cfg.n[0]))
    rows = [{"site": i, "mean": m, "variance": v}
            for i, (m, v) in enumerate(zip(summ["site_means"], summ["site_variances"]))]
    extra = {k: summ[k] for k in ("pooled_mean", "pooled_variance", "autocorr_time_site0",
                                  "max_sum_error", "draws", "chains")}
    return rows, extra


RUNNERS: dict = {
    "tilt_sweep": _tilt, "clt_scaling": _clt, "kop_confinement": _kop, "gap_exact": _gap,
    "gap_recursion": _recursion, "gl_paths": _paths, "gl_compare": _compare, "sample": _sample,
}


# -- output ---------------------------------------------------------------------


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _scalar(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def to_json(obj) -> str:
    """JSON with floats written to 17 significant digits (non-finite as null)."""
    obj = _scalar(obj)
    if isinstance(obj, float):
        return fmt_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    return json.dumps(obj)


def to_csv(rows: list) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        out = []
        for c in cols:
            v = _scalar(r.get(c, ""))
            out.append(fmt_float(v) if isinstance(v, float) else v)
        w.writerow(out)
    return buf.getvalue()


def atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def manifest(cfg: ExperimentConfig, wall: float, outputs: list) -> dict:
    import mpmath
    import scipy
    return {"kind": cfg.kind, "config_sha256": cfg.source_hash, "seed": cfg.seed,
            "versions": {"spingap": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__, "mpmath": mpmath.__version__},
            "wall_time_s": wall, "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "outputs": outputs}


# -- entry point ------------------------------------------------------------------


def _make_pool(threads: int) -> Callable:
    def run(fn, cells):
        if threads <= 1 or len(cells) <= 1:
            return [fn(c) for c in cells]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, cells))      # input order, not completion order
    return run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spingap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, kind in KINDS.items():
        s = sub.add_parser(name, help=kind.replace("_", " "))
        s.add_argument("--config", required=True, help="TOML experiment file")
        s.add_argument("--out", required=True, help="output path (manifest goes to <out>.manifest.json)")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
    return p


def run(cfg: ExperimentConfig, out: str, fmt: str, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    rows, extra = RUNNERS[cfg.kind](cfg, _make_pool(max(1, threads)))
    if fmt == "csv":
        text = to_csv(rows)
    else:
        text = to_json({"kind": cfg.kind, "potential": cfg.potential.to_dict(), "rows": rows, **extra}) + "\n"
    atomic_write(out, text)
    outputs = [out]
    if fmt == "csv" and extra:
        side = out + ".summary.json"
        atomic_write(side, to_json(extra) + "\n")
        outputs.append(side)
    man = manifest(cfg, time.perf_counter() - t0, outputs)
    atomic_write(out + ".manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kind = KINDS[args.command]
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, kind)
        if args.seed is not None:
            cfg.seed = args.seed
        if kind in STOCHASTIC and cfg.seed is None and (kind == "sample" or max(cfg.n or [3]) > 3):
            raise ConfigError("seed required for stochastic experiments", _locate(text, "experiment", None))
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        man = run(cfg, args.out, args.format, args.threads)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SelfCheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SELFCHECK
    except Exception as exc:
        from .gap import SelfCheckError
        from .kop import CrossCheckError
        if isinstance(exc, SelfCheckError):
            print(f"error: self-check failed [resolution_doubling]: {exc}", file=sys.stderr)
            return EXIT_SELFCHECK
        if isinstance(exc, CrossCheckError):
            print(f"error: self-check failed [k_cross_check]: {exc}", file=sys.stderr)
            return EXIT_SELFCHECK
        if isinstance(exc, ValueError) and "grid empty" in str(exc):
            print(f"{args.config}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    logger.info("wrote %s in %.2f s", args.out, man["wall_time_s"])
    return EXIT_OK

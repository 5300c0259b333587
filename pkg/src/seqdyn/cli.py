"""Config-driven experiment runner.

One experiment per process: a JSON config (or flags) selects the experiment
kind, the runner dispatches into the library, writes RFC-4180 CSV outputs
plus a JSON sidecar echoing the full configuration, and finishes by writing
a run manifest (atomically) listing every produced file with its content
hash.  Exit status: 0 on success, 2 when a hypothesis report failed its
threshold (the report is still written), 1 on configuration or runtime
errors.

Precedence for shared settings: command-line flag > SEQDYN_* environment
variable > config file value.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cache import MatrixCache, cache_gc, canonical_json, file_checksum
from .maps import (
    MapError,
    TargetSequence,
    beta_map,
    linear_noise,
    map_from_descriptor,
    observable_from_descriptor,
    piecewise_c2,
    system_from_descriptor,
    stationary_system,
)
from .martingale import (
    SequentialFrame,
    StationaryFrame,
    build_decomposition,
    check_reverse_martingale,
    cm_diagnostics,
)
from .stats import (
    clt_test,
    ensemble_birkhoff,
    green_kubo_variance,
    injected_normal_ensemble,
    lil_profile,
    shrinking_target,
    variance_curve,
)
from .transfer import (
    ChainState,
    build_ulam,
    decay_rate,
    default_dictionary,
    invariant_density,
    verify_dfly,
    verify_lb,
    verify_lip,
)

EXPERIMENT_KINDS = (
    "ulam", "verify-dfly", "verify-lb", "verify-lip", "decay", "decompose",
    "cm-diagnostics", "clt", "lil", "variance", "green-kubo", "shrinking-target",
)

# every key a config may carry, with the set of kinds that read it
_KEY_KINDS = {
    "kind": set(EXPERIMENT_KINDS),
    "map": {"ulam", "decay", "green-kubo", "verify-lip"},
    "system": {"decompose", "cm-diagnostics", "clt", "lil", "variance", "shrinking-target"},
    "family": {"verify-dfly", "verify-lb"},
    "observable": {"decompose", "cm-diagnostics", "clt", "lil", "variance", "green-kubo"},
    "targets": {"shrinking-target"},
    "mode": {"decompose", "cm-diagnostics", "clt", "lil", "variance"},
    "N": set(EXPERIMENT_KINDS) - {"cm-diagnostics"},
    "n_max": {"verify-dfly", "verify-lb", "decompose", "cm-diagnostics", "clt", "lil",
              "variance", "shrinking-target"},
    "M": {"clt", "lil", "variance", "shrinking-target"},
    "seed": set(EXPERIMENT_KINDS),
    "trials": {"verify-dfly", "verify-lb"},
    "eps_grid": {"verify-lip"},
    "delta_min": {"verify-lb"},
    "at_n": {"clt"},
    "a_exponent": {"cm-diagnostics"},
    "a_base": {"cm-diagnostics"},
    "samples": {"cm-diagnostics"},
    "tail_tol": {"decompose", "green-kubo", "cm-diagnostics"},
    "init": {"clt", "lil", "variance"},
    "chain_N": {"clt", "lil", "variance", "cm-diagnostics", "decompose"},
    "lil_window": {"lil"},
    "out_dir": set(EXPERIMENT_KINDS),
    "cache_dir": set(EXPERIMENT_KINDS),
    "threads": set(EXPERIMENT_KINDS),
}

_DEFAULTS = {
    "N": 1024,
    "n_max": 4096,
    "M": 1000,
    "seed": 0,
    "trials": 20,
    "mode": "stationary",
    "delta_min": 1e-3,
    "a_exponent": 0.75,
    "a_base": "n",
    "samples": 64,
    "tail_tol": 1e-10,
    "init": "lebesgue",
    "chain_N": 4096,
    "lil_window": True,
    "out_dir": "runs",
    "cache_dir": None,
    "threads": 0,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    values: dict

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key in _DEFAULTS:
            return _DEFAULTS[key]
        raise ConfigError(f"missing required config key '{key}' for kind '{self.kind}'")

    def get(self, key, default=None):
        return self.values.get(key, _DEFAULTS.get(key, default))

    def echo(self) -> dict:
        out = {"kind": self.kind}
        for k in sorted(_KEY_KINDS):
            if k == "kind":
                continue
            if k in self.values:
                out[k] = self.values[k]
            elif self.kind in _KEY_KINDS[k] and k in _DEFAULTS:
                out[k] = _DEFAULTS[k]
        return out


def validate_config(kind: str, values: dict) -> ExperimentConfig:
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind '{kind}'")
    for key in values:
        if key not in _KEY_KINDS:
            raise ConfigError(f"unknown config key '{key}'")
        if kind not in _KEY_KINDS[key]:
            raise ConfigError(f"config key '{key}' is not accepted by kind '{kind}'")
    cfg = ExperimentConfig(kind, dict(values))
    # descriptor validation happens eagerly so bad parameters fail before compute
    if "map" in values:
        map_from_descriptor(values["map"])
    if "system" in values:
        system_from_descriptor(values["system"])
    if "family" in values:
        fam = values["family"]
        if not isinstance(fam, list) or not fam:
            raise ConfigError("config key 'family' must be a nonempty list of map descriptors")
        for d in fam:
            map_from_descriptor(d)
    if "observable" in values and values["observable"].get("kind") != "iid_normal":
        observable_from_descriptor(values["observable"])
    if "targets" in values:
        t = values["targets"]
        TargetSequence(t["gamma"], t.get("scale", 1.0), t.get("anchor", 0.0))
    for key in ("N", "n_max", "M", "trials", "threads"):
        if key in values and (not isinstance(values[key], int) or values[key] < 0):
            raise ConfigError(f"config key '{key}' must be a nonnegative integer")
    return cfg


def _family_fn(template: dict):
    """eps -> IntervalMap for a parametrized family template."""
    kind = template["kind"]
    params = template.get("parameters", {})
    if kind == "linear_noise":
        return lambda e: linear_noise(params["slope"], e)
    if kind == "beta":
        base = params["beta"]
        return lambda e: beta_map(base + e)
    if kind == "piecewise_c2":
        return lambda e: piecewise_c2(params["branches"], e)
    raise ConfigError(f"unknown family template kind '{kind}'")


# ---------------------------------------------------------------------------
# output plumbing


def write_csv(path: Path, rows) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to write an empty CSV")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class RunContext:
    """Collects produced files and cache checksums for the manifest."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = out_dir
        self.files: list[Path] = []
        self.cache_checksums: list[str] = []
        self.reports = []
        self.started = time.time()

    def emit_csv(self, name: str, rows) -> Path:
        path = self.out_dir / name
        write_csv(path, rows)
        self.files.append(path)
        return path

    def emit_json(self, name: str, doc: dict) -> Path:
        path = self.out_dir / name
        _atomic_write(path, (canonical_json(doc) + "\n").encode("utf-8"))
        self.files.append(path)
        return path

    def note_report(self, report) -> None:
        self.reports.append(report)

    def sidecar(self) -> None:
        self.emit_json("config.json", {
            "config": self.cfg.echo(),
            "version": __version__,
            "git": _git_hash(),
        })

    def manifest(self) -> Path:
        doc = {
            "config": self.cfg.echo(),
            "version": __version__,
            "git": _git_hash(),
            "started": self.started,
            "finished": time.time(),
            "input_cache_checksums": sorted(set(self.cache_checksums)),
            "files": [
                {"path": str(p.relative_to(self.out_dir)), "checksum": file_checksum(p)}
                for p in self.files
            ],
        }
        path = self.out_dir / "manifest.json"
        _atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))
        return path


def _report_rows(report):
    row = {"kind": report.kind, "passed": int(report.passed)}
    row.update({k: float(v) for k, v in report.constants.items()})
    row["sample"] = report.sample
    return [row]


def _series_rows(series: dict):
    keys = list(series.keys())
    n = len(next(iter(series.values())))
    for i in range(n):
        yield {"index": i + 1, **{k: float(np.asarray(series[k])[i]) for k in keys}}


# ---------------------------------------------------------------------------
# experiment runners


def _run_ulam(cfg, ctx, cache):
    m = map_from_descriptor(cfg["map"])
    U = build_ulam(m, cfg["N"], cache)
    if cache is not None:
        ctx.cache_checksums.append(U.checksum)
    ctx.emit_csv("ulam.csv", [{
        "N": U.N, "nnz": int(U.matrix.nnz), "row_sum_defect": U.row_sum_defect(),
        "checksum": U.checksum,
    }])


def _run_verify_dfly(cfg, ctx, cache):
    family = [map_from_descriptor(d) for d in cfg["family"]]
    rep = verify_dfly(family, cfg["N"], cfg["n_max"], cfg["trials"], cfg["seed"])
    ctx.note_report(rep)
    ctx.emit_csv("dfly.csv", _report_rows(rep))
    ctx.emit_csv("dfly_envelope.csv", _series_rows(rep.series))


def _run_verify_lb(cfg, ctx, cache):
    family = [map_from_descriptor(d) for d in cfg["family"]]
    rep = verify_lb(family, cfg["N"], cfg["n_max"], cfg["trials"], cfg["seed"],
                    delta_min=cfg["delta_min"])
    ctx.note_report(rep)
    ctx.emit_csv("lb.csv", _report_rows(rep))
    ctx.emit_csv("lb_delta.csv", _series_rows(rep.series))


def _run_verify_lip(cfg, ctx, cache):
    rep = verify_lip(_family_fn(cfg["map"]), cfg["N"], cfg["eps_grid"])
    ctx.note_report(rep)
    ctx.emit_csv("lip.csv", _report_rows(rep))
    ctx.emit_csv("lip_distance.csv", _series_rows(rep.series))


def _run_decay(cfg, ctx, cache):
    m = map_from_descriptor(cfg["map"])
    U = build_ulam(m, cfg["N"], cache)
    h, _ = invariant_density(U)
    rep = decay_rate(U, h)
    ctx.note_report(rep)
    ctx.emit_csv("decay.csv", _report_rows(rep))
    ctx.emit_csv("decay_envelope.csv", _series_rows(rep.series))


def _stationary_frame(system_desc: dict, N: int, cache):
    system = system_from_descriptor(system_desc)
    if not system.frozen:
        raise ConfigError("stationary mode requires a frozen schedule")
    U = build_ulam(system.map_at(1), N, cache)
    h, _ = invariant_density(U)
    return StationaryFrame(U, h)


def _run_decompose(cfg, ctx, cache):
    system = system_from_descriptor(cfg["system"])
    obs = observable_from_descriptor(cfg["observable"])
    mode = cfg["mode"]
    if mode == "stationary":
        frame = _stationary_frame(cfg["system"], cfg["N"], cache)
    else:
        frame = SequentialFrame(ChainState(system, cfg["N"], cache=cache))
    dec = build_decomposition(frame, obs, mode, n_max=cfg["n_max"],
                              tail_tol=cfg["tail_tol"])
    res = check_reverse_martingale(dec, frame)
    dec_path = ctx.out_dir / "decomposition.bin"
    dec.save(dec_path)
    ctx.files.append(dec_path)
    ctx.emit_csv("residuals.csv", [
        {"k": k + 1, "q_psi_l1": float(r)} for k, r in enumerate(res)
    ])


def _run_cm(cfg, ctx, cache):
    system = system_from_descriptor(cfg["system"])
    obs = observable_from_descriptor(cfg["observable"])
    N = cfg["chain_N"]
    if cfg["mode"] == "stationary":
        frame = _stationary_frame(cfg["system"], N, cache)
    else:
        frame = SequentialFrame(ChainState(system, N, cache=cache))
    dec = build_decomposition(frame, obs, cfg["mode"], n_max=cfg["n_max"],
                              tail_tol=cfg["tail_tol"])
    diag = cm_diagnostics(dec, frame, cfg["samples"], cfg["a_exponent"],
                          a_base=cfg["a_base"], seed=cfg["seed"])
    ctx.emit_csv("cm_diagnostics.csv", diag.csv_rows())


def _ensemble_from_cfg(cfg, cache, lil_window=False):
    obs_desc = cfg["observable"]
    if obs_desc.get("kind") == "iid_normal":
        return injected_normal_ensemble(cfg["n_max"], cfg["M"], cfg["seed"],
                                        lil_window=lil_window)
    system = system_from_descriptor(cfg["system"])
    obs = observable_from_descriptor(obs_desc)
    init = cfg["init"]
    if init == "mu":
        frame = _stationary_frame(cfg["system"], cfg["chain_N"], cache)
        init = ("mu", frame.h.values)
    return ensemble_birkhoff(system, obs, cfg["n_max"], cfg["M"], cfg["seed"],
                             mode=cfg["mode"], chain_N=cfg["chain_N"], init=init,
                             lil_window=lil_window, cache=cache)


def _run_clt(cfg, ctx, cache):
    ens = _ensemble_from_cfg(cfg, cache)
    rep = clt_test(ens, cfg.get("at_n", int(ens.checkpoints[-1])))
    ctx.emit_csv("clt.csv", rep.csv_rows())
    if len(ens.checkpoints) >= 5:  # exponent fit precondition
        ctx.emit_csv("variance.csv", variance_curve(ens).csv_rows())


def _run_lil(cfg, ctx, cache):
    ens = _ensemble_from_cfg(cfg, cache, lil_window=cfg["lil_window"])
    rep = lil_profile(ens)
    ctx.emit_csv("lil.csv", rep.csv_rows())


def _run_variance(cfg, ctx, cache):
    ens = _ensemble_from_cfg(cfg, cache)
    vc = variance_curve(ens)
    ctx.emit_csv("variance.csv", vc.csv_rows())


def _run_green_kubo(cfg, ctx, cache):
    m = map_from_descriptor(cfg["map"])
    U = build_ulam(m, cfg["N"], cache)
    h, _ = invariant_density(U)
    obs = observable_from_descriptor(cfg["observable"])
    grid = obs.cell_values(cfg["N"])
    grid = grid - float(np.mean(grid * h.values))
    from .maps import grid_observable

    sigma2 = green_kubo_variance(U, h, grid_observable(grid), tail_tol=cfg["tail_tol"])
    ctx.emit_csv("green_kubo.csv", [{"sigma2": sigma2, "N": cfg["N"]}])


def _run_shrinking(cfg, ctx, cache):
    system = system_from_descriptor(cfg["system"])
    t = cfg["targets"]
    targets = TargetSequence(t["gamma"], t.get("scale", 1.0), t.get("anchor", 0.0))
    res = shrinking_target(system, targets, cfg["n_max"], cfg["M"], cfg["seed"])
    ctx.emit_csv("shrinking_curve.csv", res.csv_rows())
    ctx.emit_csv("shrinking_clt.csv", res.clt.csv_rows())


_RUNNERS = {
    "ulam": _run_ulam,
    "verify-dfly": _run_verify_dfly,
    "verify-lb": _run_verify_lb,
    "verify-lip": _run_verify_lip,
    "decay": _run_decay,
    "decompose": _run_decompose,
    "cm-diagnostics": _run_cm,
    "clt": _run_clt,
    "lil": _run_lil,
    "variance": _run_variance,
    "green-kubo": _run_green_kubo,
    "shrinking-target": _run_shrinking,
}


def run_experiment(config: ExperimentConfig) -> tuple[int, Path | None]:
    """Dispatch one experiment; returns (exit_code, manifest_path)."""
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = MatrixCache(config["cache_dir"]) if config.get("cache_dir") else None
    ctx = RunContext(config, out_dir)
    ctx.sidecar()
    _RUNNERS[config.kind](config, ctx, cache)
    manifest = ctx.manifest()
    code = 2 if any(not r.passed for r in ctx.reports) else 0
    return code, manifest


# ---------------------------------------------------------------------------
# argument handling


def _parse_set(expr: str) -> tuple[str, object]:
    if "=" not in expr:
        raise ConfigError(f"--set expects KEY=VALUE, got '{expr}'")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key, value


def _collect_config(args) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        kind = doc.pop("kind", None)
        if kind is not None and kind != args.kind:
            raise ConfigError(f"config file kind '{kind}' conflicts with subcommand '{args.kind}'")
        values.update(doc)
    env_map = {"SEQDYN_OUT": ("out_dir", str), "SEQDYN_CACHE": ("cache_dir", str),
               "SEQDYN_SEED": ("seed", int), "SEQDYN_THREADS": ("threads", int)}
    for env, (key, cast) in env_map.items():
        if env in os.environ:
            values[key] = cast(os.environ[env])
    for expr in args.set or []:
        key, value = _parse_set(expr)
        values[key] = value
    if args.out is not None:
        values["out_dir"] = args.out
    if args.cache is not None:
        values["cache_dir"] = args.cache
    if args.seed is not None:
        values["seed"] = args.seed
    if args.threads is not None:
        values["threads"] = args.threads
    return validate_config(args.kind, values)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqdyn",
                                description="sequential dynamics experiment runner")
    p.add_argument("--version", action="version", version=f"seqdyn {__version__}")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--set", action="append", metavar="K=V",
                        help="override a config key (JSON-parsed value)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--cache", default=None, help="matrix cache directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (results are independent of this)")
    gc = sub.add_parser("cache-gc")
    gc.add_argument("--cache", required=True)
    gc.add_argument("--max-bytes", type=int, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.kind == "cache-gc":
        evicted = cache_gc(args.cache, args.max_bytes)
        for path in evicted:
            print(path)
        return 0
    try:
        config = _collect_config(args)
    except (ConfigError, MapError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        code, manifest = run_experiment(config)
    except (ConfigError, MapError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"manifest: {manifest}")
    return code


if __name__ == "__main__":
    sys.exit(main())

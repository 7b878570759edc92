"""Command-line entry point: ``phimodule <command> [--config FILE] [--set key=value ...]``.

Config files are line-oriented ``key = value`` text; ``#`` starts a comment and
sections are dotted prefixes (``phi.k``, ``train.lr``).  Every run writes
``config.echo`` and ``manifest.txt`` (``<sha256> <relative-path>`` per artifact)
into the output directory.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys

COMMANDS = ("gen-data", "train", "eval", "verify", "bench", "md", "hyper-search")

# key -> default; the type of the default drives parsing (None means optional float)
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "threads": 1,
    "out_dir": "",
    "report.format": "csv",
    "data.path": "",
    "data.n_molecules": 2000,
    "data.atoms_min": 8,
    "data.atoms_max": 16,
    "data.box": 9.0,
    "data.box_min": None,
    "data.charge_scheme": "neutral-pairs",
    "data.lj_epsilon": 0.02,
    "data.lj_sigma": 2.2,
    "data.split_seed": 0,
    "host.n_features": 64,
    "host.n_interactions": 3,
    "host.n_rbf": 32,
    "host.cutoff": 6.0,
    "host.max_neighbors": 50,
    "phi.enabled": True,
    "phi.k": 9,
    "phi.beta": 1e-4,
    "phi.gamma": 1e-4,
    "phi.kernel_size": 1,
    "phi.hidden_channels": 16,
    "phi.largest": False,
    "phi.eig_tol": 1e-8,
    "train.epochs": 200,
    "train.batch_size": 32,
    "train.lr": 1e-3,
    "train.lr_final_ratio": 1e-2,
    "train.grad_clip": 1e3,
    "train.data_fraction": 1.0,
    "train.ablation": "none",
    "train.alpha_init": "random",
    "train.eval_batch_size": 64,
    "eval.checkpoint": "",
    "eval.split": "test",
    "verify.n_instances": 200,
    "bench.n_list": "1000,10000,100000",
    "bench.k_list": "8",
    "bench.repetitions": 3,
    "bench.max_iter": 20,
    "bench.memory_limit": 0,
    "md.checkpoint": "",
    "md.structure": "",
    "md.steps": 20000,
    "md.dt": 0.5,
    "md.temperature": 300.0,
    "md.force_mode": "autodiff",
    "md.lj_epsilon": 0.0,
    "md.lj_sigma": 2.2,
    "md.restraint_k": 0.0,
    "md.restraint_radius": 6.0,
    "md.trajectory_every": 100,
    "hyper.budget": 10,
    "hyper.epochs": 20,
}


class ConfigError(ValueError):
    pass


# -- config ---------------------------------------------------------------------------

def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if default is None and raw.lower() in ("", "none"):
                return None
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def _unknown(key: str) -> ConfigError:
    return ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise _unknown(key)
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                cfg.update(parse_config_text(fh.read(), path))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise _unknown(key)
        cfg[key] = _coerce(key, value)
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {'none' if cfg[k] is None else cfg[k]}\n" for k in sorted(cfg))


def _section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def _int_list(s: str, key: str) -> list[int]:
    try:
        return [int(x) for x in s.replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


# -- reports and manifest ---------------------------------------------------------------

def emit_report(rows: list[dict], columns, path_base: str, fmt: str = "csv") -> list[str]:
    """Write ``rows`` with a fixed column order as ``.csv``, ``.txt`` or both.

    Floats are written with ``repr`` so the CSV re-parses exactly.  A header
    row is emitted even when there are no rows.
    """
    if fmt not in ("csv", "text", "both"):
        raise ConfigError(f"report.format must be csv, text or both, not {fmt!r}")
    columns = list(columns)
    written = []

    def cell(v):
        return repr(float(v)) if isinstance(v, float) else str(v)

    if fmt in ("csv", "both"):
        path = path_base + ".csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([cell(r.get(c, "")) for c in columns])
        written.append(path)
    if fmt in ("text", "both"):
        path = path_base + ".txt"
        table = [columns] + [[cell(r.get(c, "")) for c in columns] for r in rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
        lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table]
        if "passed" in columns:
            n_pass = sum(bool(int(r["passed"])) for r in rows)
            lines.append(f"{n_pass}/{len(rows)} passed")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(path)
    return written


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str) -> str:
    paths = []
    for root, _, files in os.walk(out_dir):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), out_dir)
            if rel != "manifest.txt":
                paths.append(rel.replace(os.sep, "/"))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        for rel in sorted(paths):
            fh.write(f"{sha256_file(os.path.join(out_dir, rel))} {rel}\n")
    return manifest


# -- builders ---------------------------------------------------------------------------

def _train_config(cfg: dict):
    from .phi import PhiConfig
    from .potential import HostConfig
    from .trainer import TrainConfig

    phi_kw = _section(cfg, "phi")
    enabled = phi_kw.pop("enabled")
    try:
        phi = PhiConfig(**phi_kw) if enabled else None
        host = HostConfig(**_section(cfg, "host"))
        return TrainConfig(phi=phi, host=host, seed=cfg["seed"], **_section(cfg, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _dataset(cfg: dict):
    from .datagen import gen_point_charge_set, split_dataset
    from .molgraph import read_xyz

    if cfg["data.path"]:
        if not os.path.exists(cfg["data.path"]):
            raise ConfigError(f"data.path {cfg['data.path']!r} does not exist")
        systems = read_xyz(cfg["data.path"])
        if any(s.energy is None for s in systems):
            raise ConfigError(f"{cfg['data.path']}: every frame needs an energy")
    else:
        systems = gen_point_charge_set(_synthetic_spec(cfg))
    return split_dataset(systems, cfg["data.split_seed"])


def _synthetic_spec(cfg: dict):
    from .datagen import SyntheticSpec

    kw = _section(cfg, "data")
    for k in ("path", "split_seed"):
        kw.pop(k)
    try:
        return SyntheticSpec(seed=cfg["seed"], **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    from .datagen import gen_point_charge_set, split_dataset
    from .molgraph import write_xyz

    systems = gen_point_charge_set(_synthetic_spec(cfg))
    write_xyz(os.path.join(out, "dataset.xyz"), systems)
    for name, part in zip(("train", "val", "test"), split_dataset(systems, cfg["data.split_seed"])):
        write_xyz(os.path.join(out, f"{name}.xyz"), part)
    print(f"wrote {len(systems)} molecules to {out}")


def cmd_train(cfg, out):
    from .trainer import evaluate, train_run

    tcfg = _train_config(cfg)
    train, val, test = _dataset(cfg)
    res = train_run(tcfg, train, val, out_dir=out)
    ev = evaluate(res.model, test, tcfg.eval_batch_size)
    row = {"best_epoch": res.best_epoch, "best_val_mae": res.best_val_mae, "test_mae": ev["mae"],
           "test_l_pde": ev["l_pde"], "test_net_charge": ev["net_charge"],
           "test_es_mean": ev["es_mean"]}
    emit_report([row], list(row), os.path.join(out, "summary"), cfg["report.format"])
    print(f"best epoch {res.best_epoch}  val MAE {res.best_val_mae:.6g}  test MAE {ev['mae']:.6g}")


def cmd_eval(cfg, out):
    from .trainer import evaluate, load_checkpoint

    path = cfg["eval.checkpoint"]
    if not path or not os.path.exists(path):
        raise ConfigError(f"eval.checkpoint {path!r} does not exist")
    try:
        model = load_checkpoint(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    splits = dict(zip(("train", "val", "test"), _dataset(cfg)))
    if cfg["eval.split"] not in splits:
        raise ConfigError("eval.split must be train, val or test")
    ev = evaluate(model, splits[cfg["eval.split"]], cfg["train.eval_batch_size"])
    cols = ["n", "mae", "l_pde", "net_charge", "es_mean"]
    emit_report([ev], cols, os.path.join(out, "eval"), cfg["report.format"])
    print("  ".join(f"{c} {ev[c]:.6g}" for c in cols))


def cmd_verify(cfg, out):
    from .oracles import run_verification, write_report

    results = run_verification(cfg["seed"], cfg["verify.n_instances"])
    print(write_report(results), end="")
    rows = [{"name": r.name, "deviation": float(r.deviation), "tolerance": float(r.tolerance),
             "passed": int(r.passed)} for r in results]
    emit_report(rows, ["name", "deviation", "tolerance", "passed"], os.path.join(out, "verify"),
                cfg["report.format"])
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(cfg, out):
    from .bench import BENCH_COLUMNS, BenchConfig, scale_sweep

    bcfg = BenchConfig(repetitions=cfg["bench.repetitions"], max_iter=cfg["bench.max_iter"],
                       memory_limit=cfg["bench.memory_limit"] or None, seed=cfg["seed"])
    n_list = _int_list(cfg["bench.n_list"], "bench.n_list")
    k_list = _int_list(cfg["bench.k_list"], "bench.k_list")
    try:
        records = scale_sweep(n_list, k_list, bcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = [{"n": r.n_atoms, "k": r.k, "phase": r.phase, "peak_bytes": r.peak_bytes,
             "wall_s": r.wall_seconds, "status": r.status} for r in records]
    emit_report(rows, BENCH_COLUMNS, os.path.join(out, "bench"), cfg["report.format"])
    for r in rows:
        print(f"n={r['n']:>7d} k={r['k']:>3d} {r['phase']:11s} {r['peak_bytes']:>12d} B "
              f"{r['wall_s']:9.4f} s {r['status']}")


def cmd_md(cfg, out):
    from .md import (combine_force_fns, energy_drift, drift_trend, lj_force_fn,
                     model_force_fn, nve_run, restraint_force_fn, write_drift_csv)
    from .molgraph import read_xyz
    from .trainer import load_checkpoint

    for key in ("md.checkpoint", "md.structure"):
        if not cfg[key] or not os.path.exists(cfg[key]):
            raise ConfigError(f"{key} {cfg[key]!r} does not exist")
    if cfg["md.force_mode"] not in ("autodiff", "fd-oracle"):
        raise ConfigError("md.force_mode must be autodiff or fd-oracle")
    model = load_checkpoint(cfg["md.checkpoint"])
    system = read_xyz(cfg["md.structure"])[0]
    fns = [model_force_fn(model, system, cfg["md.force_mode"], cfg["seed"])]
    if cfg["md.lj_epsilon"]:
        fns.append(lj_force_fn(cfg["md.lj_epsilon"], cfg["md.lj_sigma"]))
    if cfg["md.restraint_k"]:
        fns.append(restraint_force_fn(cfg["md.restraint_k"], cfg["md.restraint_radius"]))
    state = nve_run(system, combine_force_fns(*fns), cfg["md.steps"], cfg["md.dt"],
                    cfg["md.temperature"], cfg["seed"],
                    trajectory_path=os.path.join(out, "trajectory.xyz"),
                    trajectory_every=cfg["md.trajectory_every"])
    write_drift_csv(os.path.join(out, "drift.csv"), state.trace)
    max_rel, slope, absolute = energy_drift(state.trace)
    trend = drift_trend(state.trace)
    row = {"steps": state.steps, "max_drift": max_rel, "slope_per_ps": slope,
           "absolute": int(absolute), "trend_slope": trend["slope"],
           "trend_ci_low": trend["ci"][0], "trend_ci_high": trend["ci"][1],
           "consistent_with_zero": int(trend["consistent_with_zero"])}
    emit_report([row], list(row), os.path.join(out, "md_summary"), cfg["report.format"])
    print(f"{state.steps} steps  max drift {max_rel:.3e}  trend slope {trend['slope']:.3e} "
          f"(95% CI {trend['ci'][0]:.3e} .. {trend['ci'][1]:.3e})")


def cmd_hyper_search(cfg, out):
    from .trainer import hyper_search

    tcfg = _train_config(cfg)
    train, val, _ = _dataset(cfg)
    trials, evp = hyper_search(tcfg, train, val, cfg["hyper.budget"], cfg["seed"],
                               epochs=cfg["hyper.epochs"], out_dir=out)
    for n, v in enumerate(evp, start=1):
        print(f"n={n:3d}  expected best val MAE {-v:.6g}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "bench": cmd_bench, "md": cmd_md,
            "hyper-search": cmd_hyper_search}


def _set_threads(n: int) -> None:
    if n < 1:
        raise ConfigError("threads must be >= 1")
    # read by BLAS/OpenMP runtimes in child processes and at first load
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phimodule", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out-dir", help="output directory (default: $PHI_OUT_DIR or ./phi_out)")
    return p


def dispatch(argv=None) -> int:
    from .eigensolver import NonConvergenceError
    from .tensor import NonFiniteError
    from .trainer import TrainingAborted

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config, args.overrides)
        out = args.out_dir or cfg["out_dir"] or os.environ.get("PHI_OUT_DIR") or "phi_out"
        cfg["out_dir"] = out
        _set_threads(cfg["threads"])
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create out_dir {out}: {exc.strerror}") from None
        with open(os.path.join(out, "config.echo"), "w") as fh:
            fh.write(f"command = {args.command}\n")
            fh.write(format_config({k: v for k, v in cfg.items() if k != "out_dir"}))
        code = HANDLERS[args.command](cfg, out) or 0
        write_manifest(out)
        return code
    except (TrainingAborted, NonConvergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

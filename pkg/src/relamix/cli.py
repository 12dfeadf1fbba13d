"""``relamix`` command line: simulate, train, grid, report.

Exit codes: 0 success, 1 a grid cell failed for a non-numeric reason,
2 usage or config error, 3 I/O or unreadable input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import model as M
from . import reports as R
from . import trainer as T
from ._backend import kernels
from .data import DEFAULT_SPLIT, DataError, TimeSeries, prepare, write_csv
from .delay_sim import apply_zoh, generate_mask, save_mask, staleness_stats

log = logging.getLogger("relamix")

EXIT_OK, EXIT_CELL, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULT_GRID = {
    "delay_ratios": [0.15, 0.25, 0.35],
    "horizons": [1, 5, 7, 10],
    "models": ["relamix", "ablations", "baselines"],
    "seeds": [0],
}
DEFAULT_DATA = {"synth": "gbm_ohlcv", "length": 20_000, "seed": 0}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config and manifest helpers
# ---------------------------------------------------------------------------


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def _load_config(path):
    """A bare config object, or the ``config`` block of a previously written manifest."""
    if path is None:
        return {}
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "tool" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def _check_keys(section, d, allowed):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise UsageError(f"unknown {section} field {extra[0]!r}; allowed: {', '.join(sorted(allowed))}")


def _data_spec(args, cfg):
    if getattr(args, "data", None):
        return {"csv": str(args.data)}
    if getattr(args, "synth", None):
        return {"synth": args.synth, "length": args.length, "seed": cfg.get("seed", 0)}
    return cfg.get("data", dict(DEFAULT_DATA))


def _file_sha256(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return h.hexdigest()


def _write_manifest(out: Path, command, config, inputs):
    manifest = {
        "tool": "relamix",
        "version": __version__,
        "backend": kernels.NAME,
        "command": command,
        "seed": config.get("seed", 0),
        "config": config,
        "inputs": {p: _file_sha256(p) for p in inputs},
        "output_dir": str(out),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_series(spec) -> TimeSeries:
    try:
        return T.load_dataset(spec)
    except OSError as exc:
        raise InputError(f"cannot read {spec.get('csv')}: {exc.strerror or exc}") from exc
    except DataError as exc:
        raise InputError(str(exc)) from exc


def _resolve_model_train(cfg):
    try:
        mcfg = M.ModelConfig.from_dict(cfg.get("model", {}))
        tcfg = T.TrainConfig.from_dict({"seed": cfg.get("seed", 0), **cfg.get("train", {})})
    except M.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except TypeError as exc:
        raise UsageError(f"bad config value: {exc}") from exc
    return mcfg, tcfg


def _split(cfg):
    frac = tuple(float(f) for f in cfg.get("split", DEFAULT_SPLIT))
    if len(frac) != 3 or any(f <= 0 for f in frac) or abs(sum(frac) - 1.0) > 1e-9:
        raise UsageError(f"split must be three positive fractions summing to 1, got {list(frac)}")
    return frac


def _units(cfg):
    u = cfg.get("units", "standardized")
    if u not in ("standardized", "raw"):
        raise UsageError(f"units must be 'standardized' or 'raw', got {u!r}")
    return u


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    if not 0.0 <= args.ratio < 1.0:
        raise UsageError(f"--ratio must be in [0, 1), got {args.ratio}")
    out = Path(args.out)
    config = {
        "data": {"csv": str(args.input)} if args.input else
                {"synth": args.synth, "length": args.length, "seed": args.seed},
        "delay_ratio": args.ratio,
        "seed": args.seed,
        "mode": args.mode,
        "mean_run": args.mean_run,
        "mask_format": args.mask_format,
    }
    _write_manifest(out, "simulate", config, [str(args.input)] if args.input else [])
    series = _load_series(config["data"])
    try:
        mask = generate_mask(len(series), args.ratio, args.seed, mode=args.mode, mean_run=args.mean_run)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corrupted = apply_zoh(series, mask)
    write_csv(corrupted.observed, out / "corrupted.csv")
    save_mask(mask, out / f"mask.{args.mask_format}")
    stats = staleness_stats(corrupted).to_dict()
    stats.update(target_ratio=args.ratio, seed=args.seed, mask_hash=mask.digest())
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"stagnation fraction {stats['fraction']:.4f} (target {args.ratio}), "
          f"max run {stats['max_run']}; wrote {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    _check_keys("config", cfg, {"model", "train", "data", "delay_ratio", "seed", "split", "units"})
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    cfg["data"] = _data_spec(args, cfg)
    cfg.setdefault("delay_ratio", 0.25)
    mcfg, tcfg = _resolve_model_train(cfg)
    frac, units = _split(cfg), _units(cfg)
    # echo every resolved default into the manifest
    cfg.update(model=mcfg.to_dict(), train=tcfg.to_dict(), split=list(frac), units=units)
    out = Path(args.out)
    _write_manifest(out, "train", cfg, [cfg["data"]["csv"]] if "csv" in cfg["data"] else [])

    series = _load_series(cfg["data"])
    try:
        mask = generate_mask(len(series), cfg["delay_ratio"], cfg["seed"])
        prepared = prepare(series, apply_zoh(series, mask), mcfg, frac)
    except (ValueError, DataError) as exc:
        raise UsageError(str(exc)) from exc
    mdl = T.ReLaMixModel(mcfg)
    t0 = time.perf_counter()
    params, hist = T.train(mdl, tcfg, prepared.train, prepared.val)
    M.save_parameters(params, out / "params.bin", mcfg)
    (out / "history.csv").write_text(hist.to_csv())
    rep = T.evaluate(
        mdl, params, prepared.val, delay_ratio=cfg["delay_ratio"], seed=cfg["seed"],
        mask_hash=mask.digest(), config_hash=T.config_digest(cfg), epochs=hist.epochs_run,
        wall_time=time.perf_counter() - t0,
        standardizer=prepared.standardizer if units == "raw" else None,
    )
    (out / "val_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"best epoch {hist.best_epoch}/{hist.epochs_run}  val mse {rep.mse:.6g}  "
          f"params {rep.params}; wrote {out}")
    return EXIT_OK


def cmd_grid(args):
    cfg = _load_config(args.config)
    _check_keys("config", cfg, {"model", "train", "data", "grid", "seed", "split", "units"})
    cfg.setdefault("seed", 0)
    cfg["data"] = _data_spec(args, cfg)
    grid = {**DEFAULT_GRID, **cfg.get("grid", {})}
    _check_keys("grid", grid, DEFAULT_GRID)
    if args.models:
        grid["models"] = args.models
    try:
        grid["models"] = T.expand_models(grid["models"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mcfg, tcfg = _resolve_model_train(cfg)
    frac, units = _split(cfg), _units(cfg)
    cfg.update(model=mcfg.to_dict(), train=tcfg.to_dict(), split=list(frac), units=units, grid=grid)
    out = Path(args.out)
    _write_manifest(out, "grid", cfg, [cfg["data"]["csv"]] if "csv" in cfg["data"] else [])

    cells, hist_dir = out / "cells", out / "histories"
    hist_dir.mkdir(parents=True, exist_ok=True)

    def on_report(rep, hist):
        R.write_cell(rep, cells)
        (hist_dir / R.cell_filename(rep).replace(".json", ".csv")).write_text(hist.to_csv())
        log.info("%s/%s delay=%g k=%d seed=%d mse=%.5g", rep.model, rep.ablation,
                 rep.delay_ratio, rep.k, rep.seed, rep.mse)

    series = _load_series(cfg["data"])
    result = T.run_grid(
        series, grid["delay_ratios"], grid["horizons"], grid["models"], grid["seeds"],
        mcfg, tcfg, frac, on_report=on_report, units=units,
    )
    (out / "reports.json").write_text(R.to_json(result.reports))
    (out / "table.txt").write_text(R.render_table(result.reports))
    sys.stdout.write(R.render_table(result.reports, color=_use_color()))
    if result.failures:
        (out / "failures.json").write_text(
            json.dumps([f.to_dict() for f in result.failures], indent=2, sort_keys=True) + "\n"
        )
        print(f"{len(result.failures)} of {len(result.failures) + len(result.reports)} cells failed:",
              file=sys.stderr)
        for f in result.failures:
            print(f"  {f.model} delay={f.delay_ratio:g} k={f.k} seed={f.seed}: {f.error}", file=sys.stderr)
        return EXIT_NUMERIC if any(f.numeric for f in result.failures) else EXIT_CELL
    return EXIT_OK


def cmd_report(args):
    try:
        reports = R.load_reports(args.input)
    except R.ReportFileError as exc:
        raise InputError(str(exc)) from exc
    if args.format == "json":
        sys.stdout.write(R.to_json(reports))
    elif args.format == "csv":
        sys.stdout.write(R.to_csv(reports))
    else:
        sys.stdout.write(R.render_table(reports, color=_use_color()))
    return EXIT_OK


def _use_color():
    return "NO_COLOR" not in os.environ and sys.stdout.isatty()


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="relamix", description="Delay-robust forecasting under stale inputs.")
    p.add_argument("--version", action="version", version=f"relamix {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="inject stagnation into a series")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="OHLCV CSV")
    src.add_argument("--synth", choices=("gbm_ohlcv", "sine_mixture"))
    s.add_argument("--length", type=int, default=20_000, help="rows for --synth")
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("iid", "markov"), default="iid")
    s.add_argument("--mean-run", type=float, default=None, help="markov mode only")
    s.add_argument("--mask-format", choices=("csv", "bin"), default="csv")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one model on corrupted-to-clean windows")
    t.add_argument("--config", type=Path, help="JSON config or a previous manifest")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path)
    src.add_argument("--synth", choices=("gbm_ohlcv", "sine_mixture"))
    t.add_argument("--length", type=int, default=20_000)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="delay ratio x horizon x model experiment grid")
    g.add_argument("--config", type=Path, help="JSON config or a previous manifest")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path)
    src.add_argument("--synth", choices=("gbm_ohlcv", "sine_mixture"))
    g.add_argument("--length", type=int, default=20_000)
    g.add_argument("--models", nargs="+", default=None)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", help="merge report files from a directory")
    r.add_argument("--in", dest="input", type=Path, required=True)
    r.add_argument("--format", choices=("json", "csv", "table"), default="json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"relamix {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"relamix {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"relamix {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

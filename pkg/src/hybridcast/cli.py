"""Command-line entry point.

Exit codes: 0 success, 1 data or other runtime error, 2 invalid configuration,
3 missing checkpoint, 4 training aborted on non-finite values. Failures print
one JSON object on stderr, e.g. ``{"error": "config", "field": "alpha", ...}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import EMBED_INITS, VARIANTS, RunConfig, load_config, parse_synthetic
from .data import PERTURBATION_KINDS, WindowBatch, apply_norm, calendar, invert_norm, save_dataset
from .errors import ConfigError, DataValidationError, HybridcastError, TrainingAborted
from .evaluation import (
    compare_with_baselines,
    eval_batches,
    markdown_table,
    metric_rows,
    robustness_eval,
    robustness_rows,
    run_ablation,
    write_csv,
    write_json,
)
from .train import load_from_config, model_from_checkpoint, prepare, seed_streams, train_run

OUT_ENV = "HYBRIDCAST_OUT_DIR"
EXIT_CONFIG, EXIT_NO_CHECKPOINT, EXIT_ABORTED = 2, 3, 4
SUBDIRS = ("checkpoints", "logs", "reports", "forecasts")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    # argparse's own usage errors exit 2 as well, but through our one-line format
    def error(self, message):
        raise CliError(EXIT_CONFIG, "config", message, field="argv")


_DEFAULTS = RunConfig()

# (flag, config field, type, help); defaults shown come from RunConfig
_OVERRIDES = [
    ("--data", "data_path", str, "flow file (.csv, .npz or little-endian float32 .bin)"),
    ("--edges", "edges_path", str, "edge list CSV (src,dst[,weight])"),
    ("--meta", "meta_path", str, "metadata JSON (interval_minutes, num_nodes, ...)"),
    ("--t-in", "t_in", int, "input steps T1"),
    ("--t-out", "t_out", int, "horizon T2"),
    ("--dim", "dim", int, "residual embedding width D"),
    ("--hidden", "hidden", int, "C-MLP hidden width D'"),
    ("--alpha", "alpha", float, "DVA loss weight"),
    ("--f-low", "f_low", int, "DVA cutoff bin"),
    ("--variant", "variant", str, f"model variant, one of {', '.join(VARIANTS)}"),
    ("--embed-init", "embed_init", str, f"embedding init, one of {', '.join(EMBED_INITS)}"),
    ("--lr", "lr", float, "Adam learning rate"),
    ("--lr-decay-every", "lr_decay_every", int, "step decay period in epochs (0 = off)"),
    ("--lr-decay-gamma", "lr_decay_gamma", float, "step decay factor"),
    ("--batch-size", "batch_size", int, "batch size"),
    ("--max-epochs", "max_epochs", int, "epoch limit"),
    ("--patience", "patience", int, "early-stopping patience in epochs"),
    ("--grad-clip", "grad_clip", float, "global gradient-norm clip (unset = off)"),
    ("--seed", "seed", int, "root seed for init, shuffling and perturbations"),
    ("--mape-floor", "mape_floor", float, "MAPE ignores targets below this value"),
]


def _add_common(p: argparse.ArgumentParser, run_options: bool = True) -> None:
    p.add_argument("--config", help="JSON or TOML config file; flags override it (default: none)")
    p.add_argument(
        "--out-dir",
        help=f"output root (default: ${OUT_ENV} or '{_DEFAULTS.out_dir}')",
    )
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs (default: off)")
    p.add_argument(
        "--synthetic",
        help="generate data instead of reading files, e.g. 'n=3 days=28 seed=7' (default: none)",
    )
    if not run_options:
        return
    for flag, name, typ, text in _OVERRIDES:
        default = getattr(_DEFAULTS, name)
        p.add_argument(flag, dest=name, type=typ, default=None, help=f"{text} (default: {default})")
    p.add_argument("--fill-nan", action="store_true", default=None, help="forward-fill missing values (default: off)")
    p.add_argument("--float64", action="store_true", default=None, help="64-bit parameters (default: off)")


def _add_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="checkpoint file (default: <out-dir>/checkpoints/best.hypd)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridcast", description="Periodic/residual decoupled traffic forecasting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p, run_options=False)
    p.add_argument("--seed", type=int, default=None, help="generator seed when --synthetic sets none (default: 0)")
    p.add_argument("--format", choices=("csv", "bin"), default="csv", help="flow file format (default: csv)")

    p = sub.add_parser("train", help="fit a model and write checkpoints and a log")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out-dir>/checkpoints/last.hypd (default: off)")

    p = sub.add_parser("predict", help="forecast the next T2 steps after the series (or a chosen window)")
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--start", type=int, default=None, help="forecast from the window whose input begins here (default: series end)")

    p = sub.add_parser("evaluate", help="test-split metrics for a checkpoint and the naive baselines")
    _add_common(p)
    _add_checkpoint(p)

    p = sub.add_parser("ablate", help="train and score each variant of the ablation grid")
    _add_common(p)
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variants (default: all)")

    p = sub.add_parser("perturb", help="robustness report under seeded disturbances")
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--kinds", default=",".join(PERTURBATION_KINDS), help="comma-separated disturbances (default: all)")
    p.add_argument("--injections", type=int, default=5, help="number of injection seeds (default: 5)")

    p = sub.add_parser("export-embeddings", help="write the refined daily/weekly embeddings as CSV")
    _add_common(p, run_options=False)
    _add_checkpoint(p)
    return parser


def resolve_config(args, require_data: bool = False) -> RunConfig:
    """Defaults, then the config file, then flags."""
    raw = _DEFAULTS.to_dict()
    from_file = load_config(args.config) if getattr(args, "config", None) else {}
    raw.update(from_file)
    for _, name, _, _ in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    for name in ("fill_nan", "float64"):
        if getattr(args, name, None):
            raw[name] = True
    if getattr(args, "synthetic", None):
        raw["synthetic"] = parse_synthetic(args.synthetic)
        raw["data_path"] = None
    raw["out_dir"] = args.out_dir or from_file.get("out_dir") or os.environ.get(OUT_ENV) or _DEFAULTS.out_dir
    cfg = RunConfig.from_dict(raw)
    # checkpoints must find their data again from any working directory
    for name in ("data_path", "edges_path", "meta_path"):
        value = getattr(cfg, name)
        if value is not None:
            setattr(cfg, name, str(Path(value).resolve()))
    return cfg.validate(require_data=require_data)


def out_paths(root: str | Path) -> dict[str, Path]:
    root = Path(root)
    return {name: root / name for name in SUBDIRS}


def _guard(paths, overwrite: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise CliError(EXIT_CONFIG, "config", f"output exists: {existing[0]} (pass --overwrite)", field="overwrite")


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else out_paths(cfg.out_dir)["checkpoints"] / "best.hypd"
    if not path.is_file():
        raise CliError(EXIT_NO_CHECKPOINT, "missing_checkpoint", f"checkpoint not found: {path}", path=str(path))
    return path


def _load(args, cfg: RunConfig):
    """Checkpointed model plus the data it was trained on (or the data named by flags)."""
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    model = model_from_checkpoint(ckpt)
    model.eval()
    data_cfg = cfg if (args.synthetic or cfg.data_path) else RunConfig.from_dict(ckpt.config)
    ds = load_from_config(data_cfg)
    spec = model.spec
    if ds.num_nodes != spec.num_nodes or ds.steps_per_day != spec.steps_per_day:
        raise DataValidationError(
            f"dataset has {ds.num_nodes} nodes/{ds.steps_per_day} steps per day, "
            f"checkpoint expects {spec.num_nodes}/{spec.steps_per_day}"
        )
    prepared = prepare(ds, spec.t_in, spec.t_out, stats=ckpt.norm)
    return ckpt, model, prepared


def cmd_gen_data(args) -> dict:
    spec = parse_synthetic(args.synthetic or "")
    if args.seed is not None:
        spec.setdefault("seed", args.seed)
    RunConfig(synthetic=spec).validate()
    root = Path(args.out_dir or os.environ.get(OUT_ENV, _DEFAULTS.out_dir)) / "data"
    names = ("data.csv" if args.format == "csv" else "data.bin", "edges.csv", "meta.json")
    _guard([root / n for n in names], args.overwrite)
    written = save_dataset(load_from_config(RunConfig(synthetic=spec)), root, fmt=args.format)
    return {k: str(v) for k, v in written.items()}


def cmd_train(args) -> dict:
    cfg = resolve_config(args, require_data=not args.resume)
    paths = out_paths(cfg.out_dir)
    best_path, last_path = paths["checkpoints"] / "best.hypd", paths["checkpoints"] / "last.hypd"
    log_path = paths["logs"] / "train.jsonl"
    if args.resume:
        if not last_path.is_file():
            raise CliError(EXIT_NO_CHECKPOINT, "missing_checkpoint", f"checkpoint not found: {last_path}", path=str(last_path))
        from .train import fit

        last = load_checkpoint(last_path)
        best = load_checkpoint(best_path) if best_path.is_file() else last
        cfg = replace(RunConfig.from_dict(last.config), max_epochs=cfg.max_epochs, out_dir=cfg.out_dir)
        ds = load_from_config(cfg)
        prepared = prepare(ds, cfg.t_in, cfg.t_out, stats=last.norm)
        model = model_from_checkpoint(last)
        try:
            result = fit(model, prepared, cfg, resume=last, best=best, log_path=log_path)
        except TrainingAborted as exc:
            _save_aborted(exc, best_path)
            raise
    else:
        _guard([best_path, last_path, log_path], args.overwrite)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            _, _, result = train_run(cfg, log_path=log_path)
        except TrainingAborted as exc:
            _save_aborted(exc, best_path)
            raise
    save_checkpoint(result.best, best_path)
    save_checkpoint(result.last, last_path)
    return {
        "checkpoint": str(best_path),
        "log": str(log_path),
        "epochs": result.last.epoch,
        "best_epoch": result.best.epoch,
        "best_val_mae": result.best.train_state.get("best_val_mae"),
    }


def _save_aborted(exc: TrainingAborted, best_path: Path) -> None:
    if exc.checkpoint is not None:
        save_checkpoint(exc.checkpoint, best_path)


def _forecast_batch(prepared, spec, start: int | None) -> tuple[WindowBatch, np.ndarray, np.ndarray]:
    ds = prepared.dataset
    t_in, t_out = spec.t_in, spec.t_out
    if start is None:
        start = ds.num_steps - t_in
    if not 0 <= start <= ds.num_steps - t_in:
        raise ConfigError(f"start must lie in [0, {ds.num_steps - t_in}], got {start}", "start")
    tod, dow = calendar(start + t_in + t_out, ds.steps_per_day, int(ds.tod[0]), int(ds.dow[0]))
    x = apply_norm(ds.values[start : start + t_in], prepared.stats)
    sl_in, sl_out = slice(start, start + t_in), slice(start + t_in, start + t_in + t_out)
    batch = WindowBatch(
        X=x[None],
        Y=np.zeros((1, t_out, ds.num_nodes)),
        tod_in=tod[sl_in][None],
        dow_in=dow[sl_in][None],
        tod_out=tod[sl_out][None],
        dow_out=dow[sl_out][None],
        starts=np.array([start]),
    )
    return batch, tod[sl_out], dow[sl_out]


def cmd_predict(args) -> dict:
    cfg = resolve_config(args)
    _, model, prepared = _load(args, cfg)
    batch, tod, dow = _forecast_batch(prepared, model.spec, args.start)
    target = out_paths(cfg.out_dir)["forecasts"] / "forecast.csv"
    _guard([target], args.overwrite)
    with torch.no_grad():
        y = invert_norm(model(batch).Y_hat.double().numpy()[0], prepared.stats)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = "step,tod,dow," + ",".join(f"node_{n}" for n in range(y.shape[1]))
    rows = [f"{h},{tod[h]},{dow[h]}," + ",".join(repr(float(v)) for v in y[h]) for h in range(y.shape[0])]
    target.write_text(header + "\n" + "\n".join(rows) + "\n")
    return {"forecast": str(target), "horizon": int(y.shape[0]), "nodes": int(y.shape[1])}


def cmd_evaluate(args) -> dict:
    cfg = resolve_config(args)
    ckpt, model, prepared = _load(args, cfg)
    reports_dir = out_paths(cfg.out_dir)["reports"]
    targets = [reports_dir / n for n in ("metrics.json", "metrics.csv", "metrics.md")]
    _guard(targets, args.overwrite)
    reports = compare_with_baselines(model, prepared, cfg.batch_size, cfg.mape_floor)
    write_json({k: r.as_dict() for k, r in reports.items()}, targets[0])
    write_csv(metric_rows(reports), targets[1])
    targets[2].write_text(markdown_table(reports))
    return {"report": str(targets[0]), "mae": reports["model"].mae, "rmse": reports["model"].rmse}


def cmd_ablate(args) -> dict:
    cfg = resolve_config(args, require_data=True)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}", "variants")
    reports_dir = out_paths(cfg.out_dir)["reports"]
    targets = [reports_dir / f"ablation_{v}.json" for v in variants]
    targets += [reports_dir / "ablation.csv", reports_dir / "ablation.md"]
    _guard(targets, args.overwrite)
    ds = load_from_config(cfg)
    results = {}
    for v in variants:
        res = run_ablation(v, cfg, ds)
        results[v] = res
        write_json(
            {"variant": v, "test": res.test.as_dict(), "val_mae": res.val_mae, "epochs": res.epochs, "best_epoch": res.best_epoch},
            reports_dir / f"ablation_{v}.json",
        )
    reports = {v: r.test for v, r in results.items()}
    rows = metric_rows(reports)
    base = reports.get("full")
    for row in rows:
        row["mae_vs_full_percent"] = (row["mae"] - base.mae) / base.mae * 100.0 if base else None
    write_csv(rows, reports_dir / "ablation.csv")
    (reports_dir / "ablation.md").write_text(markdown_table(reports))
    return {"report": str(reports_dir / "ablation.csv"), "mae": {v: r.mae for v, r in reports.items()}}


def cmd_perturb(args) -> dict:
    cfg = resolve_config(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for k in kinds:
        if k not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation {k!r}; expected one of {PERTURBATION_KINDS}", "kinds")
    if args.injections < 1:
        raise ConfigError("injections must be >= 1", "injections")
    _, model, prepared = _load(args, cfg)
    reports_dir = out_paths(cfg.out_dir)["reports"]
    targets = [reports_dir / "robustness.json", reports_dir / "robustness.csv"]
    _guard(targets, args.overwrite)
    root = np.random.SeedSequence(seed_streams(cfg.seed)["perturb"])
    seeds = [int(c.generate_state(1)[0]) for c in root.spawn(args.injections)]
    batches = eval_batches(prepared, model.spec.t_in, model.spec.t_out, cfg.batch_size)
    report = robustness_eval(model, batches, prepared.stats, kinds, seeds, cfg.mape_floor)
    write_json(report, targets[0])
    write_csv(robustness_rows(report), targets[1])
    return {"report": str(targets[0]), "mean_drop_percent": report.mean_drop_percent()}


def cmd_export_embeddings(args) -> dict:
    out_dir = args.out_dir or os.environ.get(OUT_ENV, _DEFAULTS.out_dir)
    cfg = RunConfig(out_dir=out_dir, synthetic={})
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    model = model_from_checkpoint(ckpt)
    reports_dir = out_paths(out_dir)["reports"]
    with torch.no_grad():
        daily, weekly = model.refined_embeddings()
    written = {}
    spd = model.spec.steps_per_day
    for kind, emb in (("daily", daily), ("weekly", weekly)):
        if emb is None:
            continue
        path = reports_dir / f"embeddings_{kind}.csv"
        _guard([path], args.overwrite)
        arr = emb.double().numpy()
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["slot,tod,dow," + ",".join(f"node_{n}" for n in range(arr.shape[1]))]
        for s, row in enumerate(arr):
            dow = s // spd if kind == "weekly" else ""
            lines.append(f"{s},{s % spd},{dow}," + ",".join(repr(float(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")
        written[kind] = str(path)
    return written


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "perturb": cmd_perturb,
    "export-embeddings": cmd_export_embeddings,
}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": str(message).replace("\n", " ")}
    payload.update(extra)
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), field=exc.field)
    except TrainingAborted as exc:
        return _fail(EXIT_ABORTED, "aborted", str(exc))
    except (DataValidationError, HybridcastError, OSError) as exc:
        return _fail(1, "data" if isinstance(exc, DataValidationError) else "runtime", str(exc))
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

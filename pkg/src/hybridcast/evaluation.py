"""Naive baselines, ablation runs, robustness reports and report writers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import VARIANTS, RunConfig
from .data import NormStats, SeriesSlice, WindowBatch, apply_perturbation, invert_norm, make_windows
from .errors import ConfigError
from .metrics import MetricReport, metrics, predict_batches
from .periodic import init_statistical_prior, slot_index

REPORT_METRICS = ("mae", "rmse", "mape")


def slot_means(train_raw: SeriesSlice) -> np.ndarray:
    """Per-node training mean for every (tod, dow) slot; unseen slots get the node mean."""
    return init_statistical_prior(train_raw.values, train_raw.tod, train_raw.dow, "weekly", train_raw.steps_per_day).P


def _targets(batches: list[WindowBatch], stats: NormStats) -> np.ndarray:
    return invert_norm(np.concatenate([b.Y for b in batches]), stats)


def baseline_historical_average(
    train_raw: SeriesSlice, batches: list[WindowBatch], stats: NormStats, mape_floor: float = 1.0
) -> MetricReport:
    table = slot_means(train_raw)
    spd = train_raw.steps_per_day
    pred = np.concatenate([table[slot_index("weekly", b.tod_out, b.dow_out, spd)] for b in batches])
    return metrics(pred, _targets(batches, stats), mape_floor)


def baseline_last_value(batches: list[WindowBatch], stats: NormStats, mape_floor: float = 1.0) -> MetricReport:
    preds = []
    for b in batches:
        last = invert_norm(b.X[:, -1:, :], stats)
        preds.append(np.repeat(last, b.Y.shape[1], axis=1))
    return metrics(np.concatenate(preds), _targets(batches, stats), mape_floor)


def eval_batches(prepared, t_in: int, t_out: int, batch_size: int = 64) -> list[WindowBatch]:
    return make_windows(prepared.test, t_in, t_out, batch_size)


def compare_with_baselines(model, prepared, batch_size: int = 64, mape_floor: float = 1.0) -> dict[str, MetricReport]:
    """Model, historical average and last value on one shared set of test windows."""
    spec = model.spec
    batches = eval_batches(prepared, spec.t_in, spec.t_out, batch_size)
    res = predict_batches(model, batches, prepared.stats)
    return {
        "model": metrics(res["pred"], res["target"], mape_floor),
        "historical_average": baseline_historical_average(prepared.raw[0], batches, prepared.stats, mape_floor),
        "last_value": baseline_last_value(batches, prepared.stats, mape_floor),
    }


@dataclass
class AblationResult:
    variant: str
    test: MetricReport
    val_mae: float
    epochs: int
    best_epoch: int
    checkpoint: object = field(default=None, repr=False)


def run_ablation(variant: str, cfg: RunConfig, ds=None) -> AblationResult:
    """Train one variant from ``cfg`` and score it on the test split."""
    from .train import train_run

    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}", "variant")
    cfg = replace(cfg, variant=variant)
    prepared, model, result = train_run(cfg, ds)
    batches = eval_batches(prepared, cfg.t_in, cfg.t_out, cfg.batch_size)
    res = predict_batches(model, batches, prepared.stats)
    return AblationResult(
        variant=variant,
        test=metrics(res["pred"], res["target"], cfg.mape_floor),
        val_mae=float(result.best.train_state.get("best_val_mae", math.nan)),
        epochs=len(result.log),
        best_epoch=result.best.epoch,
        checkpoint=result.best,
    )


def drop_percent(clean: MetricReport, perturbed: MetricReport) -> dict[str, float | None]:
    out = {}
    for name in REPORT_METRICS:
        c, p = getattr(clean, name), getattr(perturbed, name)
        out[name] = (p - c) / c * 100.0 if c is not None and p is not None and c > 0 else None
    return out


def batch_seed(seed: int, index: int) -> int:
    """Injection seed for one batch, so every batch gets its own time point."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass
class PerturbationRun:
    seed: int
    perturbed: MetricReport
    drop_percent: dict
    injections: list[dict]


@dataclass
class RobustnessReport:
    clean: MetricReport
    runs: dict[str, list[PerturbationRun]]

    def mean_drop_percent(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for kind, runs in self.runs.items():
            out[kind] = {}
            for name in REPORT_METRICS:
                vals = [r.drop_percent[name] for r in runs]
                out[kind][name] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    def as_dict(self) -> dict:
        return {
            "clean": self.clean.as_dict(),
            "runs": {kind: [asdict(r) for r in runs] for kind, runs in self.runs.items()},
            "mean_drop_percent": self.mean_drop_percent(),
        }


def robustness_eval(
    model,
    batches: list[WindowBatch],
    stats: NormStats,
    kinds=("surge", "interrupt", "shuffle"),
    seeds=(0, 1, 2, 3, 4),
    mape_floor: float = 1.0,
) -> RobustnessReport:
    """Clean versus perturbed metrics; disturbances act on raw flow values."""
    clean_res = predict_batches(model, batches, stats)
    clean = metrics(clean_res["pred"], clean_res["target"], mape_floor)
    runs: dict[str, list[PerturbationRun]] = {}
    for kind in kinds:
        runs[kind] = []
        for seed in seeds:
            pert = [apply_perturbation(b, kind, batch_seed(seed, i), stats) for i, b in enumerate(batches)]
            res = predict_batches(model, pert, stats)
            report = metrics(res["pred"], res["target"], mape_floor)
            runs[kind].append(
                PerturbationRun(int(seed), report, drop_percent(clean, report), [b.perturbation for b in pert])
            )
    return RobustnessReport(clean, runs)


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if hasattr(obj, "as_dict"):
        obj = obj.as_dict()
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _fmt(v, pct=False):
    if v is None:
        return "n/a"
    return f"{v:.2f}%" if pct else f"{v:.4f}"


def metric_rows(reports: dict[str, MetricReport]) -> list[dict]:
    return [{"name": k, "mae": r.mae, "rmse": r.rmse, "mape": r.mape, "count": r.count} for k, r in reports.items()]


def markdown_table(reports: dict[str, MetricReport]) -> str:
    lines = ["| Variant | MAE | RMSE | MAPE |", "|---|---|---|---|"]
    for name, r in reports.items():
        lines.append(f"| {name} | {_fmt(r.mae)} | {_fmt(r.rmse)} | {_fmt(r.mape, pct=True)} |")
    return "\n".join(lines) + "\n"


def robustness_rows(report: RobustnessReport) -> list[dict]:
    rows = []
    for kind, runs in report.runs.items():
        for r in runs:
            row = {"kind": kind, "seed": r.seed}
            for name in REPORT_METRICS:
                row[f"clean_{name}"] = getattr(report.clean, name)
                row[f"perturbed_{name}"] = getattr(r.perturbed, name)
                row[f"drop_percent_{name}"] = r.drop_percent[name]
            rows.append(row)
    return rows

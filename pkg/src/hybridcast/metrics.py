"""Error metrics on denormalized forecasts, and batch prediction helpers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import NormStats, SeriesSlice, WindowBatch, invert_norm, make_windows


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float | None  # percent; None when every target is below the floor
    mae_per_horizon: list[float]
    rmse_per_horizon: list[float]
    mape_per_horizon: list[float | None]
    count: int

    def as_dict(self) -> dict:
        return asdict(self)


def _mape(err, gt, floor):
    mask = np.abs(gt) >= floor
    if not mask.any():
        return None
    return float(np.mean(np.abs(err[mask] / gt[mask])) * 100.0)


def metrics(pred: np.ndarray, gt: np.ndarray, mape_floor: float = 1.0) -> MetricReport:
    """MAE, RMSE and masked MAPE over ``[..., T2, N]`` arrays (horizon on axis -2)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ")
    err = pred - gt
    if err.ndim < 2:
        err2, gt2 = err.reshape(1, -1), gt.reshape(1, -1)
    else:
        err2 = np.moveaxis(err, -2, 0).reshape(err.shape[-2], -1)
        gt2 = np.moveaxis(gt, -2, 0).reshape(gt.shape[-2], -1)
    return MetricReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        mape=_mape(err, gt, mape_floor),
        mae_per_horizon=np.mean(np.abs(err2), axis=1).tolist(),
        rmse_per_horizon=np.sqrt(np.mean(err2**2, axis=1)).tolist(),
        mape_per_horizon=[_mape(e, g, mape_floor) for e, g in zip(err2, gt2)],
        count=int(err.size),
    )


@torch.no_grad()
def predict_batches(model, batches: list[WindowBatch], stats: NormStats):
    """Denormalized predictions, branch outputs and targets stacked over batches."""
    preds, s_out, r_out, targets = [], [], [], []
    for batch in batches:
        out = model(batch)
        preds.append(out.Y_hat.double().numpy())
        s_out.append(out.S_out.double().numpy())
        r_out.append(out.R_out.double().numpy())
        targets.append(batch.Y)
    return {
        "pred": invert_norm(np.concatenate(preds), stats),
        "target": invert_norm(np.concatenate(targets), stats),
        "S_out": np.concatenate(s_out),
        "R_out": np.concatenate(r_out),
    }


def evaluate_model(model, slc: SeriesSlice, stats: NormStats, batch_size=64, mape_floor=1.0) -> MetricReport:
    spec = model.spec
    batches = make_windows(slc, spec.t_in, spec.t_out, batch_size)
    res = predict_batches(model, batches, stats)
    return metrics(res["pred"], res["target"], mape_floor)

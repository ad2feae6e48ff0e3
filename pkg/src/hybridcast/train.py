"""Data preparation, model construction and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, tensors_to_numpy
from .config import RunConfig
from .data import (
    NormStats,
    SeriesSlice,
    TrafficDataset,
    apply_norm,
    fit_norm_stats,
    gen_synthetic,
    load_dataset,
    make_windows,
    num_windows,
    split_chronological,
)
from .errors import TrainingAborted
from .metrics import evaluate_model
from .model import HybridModel, ModelSpec, backward
from .optim import Adam, clip_global_norm

torch.set_num_threads(1)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds per purpose, all derived from one root seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        name: int(child.generate_state(1)[0])
        for name, child in zip(("init", "shuffle", "perturb"), children)
    }


@dataclass
class Prepared:
    dataset: TrafficDataset
    stats: NormStats
    raw: tuple[SeriesSlice, SeriesSlice, SeriesSlice]
    norm: tuple[SeriesSlice, SeriesSlice, SeriesSlice]

    @property
    def train(self) -> SeriesSlice:
        return self.norm[0]

    @property
    def val(self) -> SeriesSlice:
        return self.norm[1]

    @property
    def test(self) -> SeriesSlice:
        return self.norm[2]


def load_from_config(cfg: RunConfig) -> TrafficDataset:
    if cfg.synthetic is not None:
        s = cfg.synthetic
        return gen_synthetic(
            int(s.get("n", 6)),
            int(s.get("days", 28)),
            int(s.get("steps_per_day", 24)),
            int(s.get("seed", cfg.seed)),
            float(s.get("noise_std", 0.3)),
        )
    return load_dataset(cfg.data_path, cfg.edges_path, cfg.meta_path, fill_nan=cfg.fill_nan)


def prepare(ds: TrafficDataset, t_in: int = 12, t_out: int = 12, stats: NormStats | None = None) -> Prepared:
    """Split, then normalize with training statistics (or ``stats`` from a checkpoint)."""
    raw = split_chronological(ds, min_length=t_in + t_out)
    if stats is None:
        stats = fit_norm_stats(raw[0].values)
    norm = tuple(s.with_values(apply_norm(s.values, stats)) for s in raw)
    return Prepared(ds, stats, raw, norm)


def model_spec(cfg: RunConfig, ds: TrafficDataset) -> ModelSpec:
    return ModelSpec(
        num_nodes=ds.num_nodes,
        steps_per_day=ds.steps_per_day,
        t_in=cfg.t_in,
        t_out=cfg.t_out,
        dim=cfg.dim,
        hidden=cfg.hidden,
        alpha=cfg.alpha,
        f_low=cfg.f_low,
        variant=cfg.variant,
        float64=cfg.float64,
    )


def build_model(prepared: Prepared, cfg: RunConfig) -> HybridModel:
    seeds = seed_streams(cfg.seed)
    model = HybridModel(model_spec(cfg, prepared.dataset), prepared.dataset.graph.adjacency_norm, seeds["init"])
    model.init_embeddings(prepared.train, cfg.embed_init, cfg.weekly_prior, seeds["init"])
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> HybridModel:
    spec = ModelSpec(**ckpt.model_spec)
    model = HybridModel(spec, ckpt.params["adj_norm"])
    state = {k: torch.as_tensor(v) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    return model


def snapshot(model, opt, stats, epoch, rng, train_state, cfg) -> Checkpoint:
    return Checkpoint(
        model_spec=model.spec.to_dict(),
        params=tensors_to_numpy(model.state_dict()),
        norm=stats,
        epoch=epoch,
        opt_t=opt.t,
        opt_m=tensors_to_numpy(opt.m),
        opt_v=tensors_to_numpy(opt.v),
        rng_state=rng.bit_generator.state,
        train_state=dict(train_state),
        config=cfg.to_dict() if cfg is not None else {},
    )


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict]


def _epoch_lr(cfg: RunConfig, epoch: int) -> float:
    if cfg.lr_decay_every > 0:
        return cfg.lr * cfg.lr_decay_gamma ** ((epoch - 1) // cfg.lr_decay_every)
    return cfg.lr


def fit(
    model: HybridModel,
    prepared: Prepared,
    cfg: RunConfig,
    resume: Checkpoint | None = None,
    best: Checkpoint | None = None,
    log_path: str | Path | None = None,
) -> FitResult:
    """Adam training with per-epoch validation and early stopping on val MAE.

    Passing ``resume`` (a checkpoint written at the end of an epoch) continues
    the run exactly where it left off; ``best`` restores the best-so-far
    checkpoint of the interrupted run.
    """
    params = model.named_trainable()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed_streams(cfg.seed)["shuffle"])
    state = {"best_val_mae": math.inf, "bad_epochs": 0}
    start_epoch = 0
    if resume is not None:
        model.load_state_dict({k: torch.as_tensor(v) for k, v in resume.params.items()})
        opt.load_state(
            {
                "t": resume.opt_t,
                "m": {k: torch.as_tensor(v) for k, v in resume.opt_m.items()},
                "v": {k: torch.as_tensor(v) for k, v in resume.opt_v.items()},
            }
        )
        rng.bit_generator.state = resume.rng_state
        state.update(resume.train_state)
        start_epoch = resume.epoch

    last = snapshot(model, opt, prepared.stats, start_epoch, rng, state, cfg)
    if best is None:
        best = last
    log: list[dict] = []
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    count = num_windows(len(prepared.train), cfg.t_in, cfg.t_out)
    try:
        for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
            if state["bad_epochs"] >= cfg.patience:
                break
            t0 = time.perf_counter()
            lr = _epoch_lr(cfg, epoch)
            order = rng.permutation(count)
            batches = make_windows(prepared.train, cfg.t_in, cfg.t_out, cfg.batch_size, order)
            sums = np.zeros(2)
            model.train()
            for batch in batches:
                grads, report = backward(model, batch)
                if not math.isfinite(report.l_total):
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}", checkpoint=best)
                if cfg.grad_clip is not None:
                    clip_global_norm(grads, cfg.grad_clip)
                opt.step(grads, lr)
                sums += len(batch) * np.array([report.l_pred, report.l_dva])
            model.eval()
            val = evaluate_model(model, prepared.val, prepared.stats, cfg.batch_size, cfg.mape_floor)
            if not math.isfinite(val.mae):
                raise TrainingAborted(f"validation diverged at epoch {epoch}", checkpoint=best)
            record = {
                "epoch": epoch,
                "l_pred": float(sums[0] / count),
                "l_dva": float(sums[1] / count),
                "val_mae": val.mae,
                "val_rmse": val.rmse,
                "val_mape": val.mape,
                "seconds": time.perf_counter() - t0,
            }
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if val.mae < state["best_val_mae"]:
                state["best_val_mae"] = val.mae
                state["bad_epochs"] = 0
                improved = True
            else:
                state["bad_epochs"] += 1
                improved = False
            last = snapshot(model, opt, prepared.stats, epoch, rng, state, cfg)
            if improved:
                best = last
    except TrainingAborted as exc:
        if exc.checkpoint is None:
            exc.checkpoint = best
        raise
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(best, last, log)


def train_run(cfg: RunConfig, ds: TrafficDataset | None = None, log_path: str | Path | None = None):
    """Prepare data, build and fit a model; returns ``(prepared, model, result)``.

    The returned model holds the best-on-validation parameters.
    """
    cfg.validate()
    ds = load_from_config(cfg) if ds is None else ds
    prepared = prepare(ds, cfg.t_in, cfg.t_out)
    model = build_model(prepared, cfg)
    result = fit(model, prepared, cfg, log_path=log_path)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in result.best.params.items()})
    return prepared, model, result

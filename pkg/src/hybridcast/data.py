"""Traffic data ingestion, graph construction, normalization and windowing.

Everything here works on numpy arrays; conversion to torch happens at the
model boundary.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError, ParseError

MINUTES_PER_DAY = 1440
DAYS_PER_WEEK = 7
STD_FLOOR = 1e-6
PERTURBATION_KINDS = ("surge", "interrupt", "shuffle")
SURGE_FACTOR = 1.5
SHUFFLE_BLOCK = 4


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    adjacency: np.ndarray
    adjacency_norm: np.ndarray

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[tuple[int, int, float]],
        symmetrize: bool = True,
    ) -> "Graph":
        edges = tuple((int(a), int(b), float(w)) for a, b, w in edges)
        adj = np.zeros((num_nodes, num_nodes), dtype=np.float64)
        for i, (a, b, w) in enumerate(edges):
            if not (0 <= a < num_nodes and 0 <= b < num_nodes):
                raise DataValidationError(
                    f"edge {i} ({a}, {b}) references a node outside [0, {num_nodes})"
                )
            if w < 0 or not math.isfinite(w):
                raise DataValidationError(f"edge {i} ({a}, {b}) has invalid weight {w}")
            adj[a, b] = w
        if symmetrize:
            adj = np.maximum(adj, adj.T)
        return cls(num_nodes, edges, adj, normalize_adjacency(adj))


@dataclass(frozen=True)
class TrafficDataset:
    values: np.ndarray  # [T, N]
    tod: np.ndarray  # [T]
    dow: np.ndarray  # [T]
    interval_minutes: int
    graph: Graph

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.interval_minutes

    @property
    def steps_per_week(self) -> int:
        return DAYS_PER_WEEK * self.steps_per_day

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    def full_slice(self) -> "SeriesSlice":
        return SeriesSlice(self.values, self.tod, self.dow, 0, self.steps_per_day)


@dataclass(frozen=True)
class SeriesSlice:
    """A contiguous stretch of the timeline. ``start`` is the global row index."""

    values: np.ndarray
    tod: np.ndarray
    dow: np.ndarray
    start: int
    steps_per_day: int

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "SeriesSlice":
        return replace(self, values=values)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class WindowBatch:
    X: np.ndarray  # [B, T1, N]
    Y: np.ndarray  # [B, T2, N]
    tod_in: np.ndarray
    dow_in: np.ndarray
    tod_out: np.ndarray
    dow_out: np.ndarray
    starts: np.ndarray  # global row index of each window's first input step
    perturbation: dict | None = field(default=None)

    def __len__(self) -> int:
        return self.X.shape[0]


# --------------------------------------------------------------------------
# graph


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric GCN propagation matrix ``D^-1/2 (A + I) D^-1/2``."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DataValidationError(f"adjacency must be square, got {adj.shape}")
    if np.any(adj < 0):
        raise DataValidationError("adjacency must be non-negative")
    a_hat = adj + np.eye(adj.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    # scale first so that symmetric input gives bitwise-symmetric output
    return a_hat * (d_inv_sqrt[:, None] * d_inv_sqrt[None, :])


def ring_graph(num_nodes: int) -> Graph:
    edges = []
    if num_nodes > 1:
        for i in range(num_nodes):
            j = (i + 1) % num_nodes
            if i != j and (j, i, 1.0) not in edges:
                edges.append((i, j, 1.0))
    return Graph.from_edges(num_nodes, edges)


# --------------------------------------------------------------------------
# calendar


def calendar(num_steps: int, steps_per_day: int, start_tod: int = 0, start_dow: int = 0):
    """Time-of-day and day-of-week indices for a contiguous series."""
    absolute = start_tod + np.arange(num_steps, dtype=np.int64)
    tod = absolute % steps_per_day
    dow = (start_dow + absolute // steps_per_day) % DAYS_PER_WEEK
    return tod, dow


def check_contiguous(tod: np.ndarray, dow: np.ndarray, steps_per_day: int) -> None:
    if len(tod) == 0:
        return
    if np.any((tod < 0) | (tod >= steps_per_day)) or np.any((dow < 0) | (dow >= DAYS_PER_WEEK)):
        raise DataValidationError("calendar indices out of range")
    exp_tod, exp_dow = calendar(len(tod), steps_per_day, int(tod[0]), int(dow[0]))
    bad = np.flatnonzero((exp_tod != tod) | (exp_dow != dow))
    if bad.size:
        raise DataValidationError(f"non-contiguous timestamps at row {int(bad[0])}")


def steps_per_day_for(interval_minutes: int) -> int:
    if interval_minutes <= 0 or MINUTES_PER_DAY % interval_minutes:
        raise ConfigError(
            f"interval_minutes={interval_minutes} does not divide a day", "interval_minutes"
        )
    return MINUTES_PER_DAY // interval_minutes


# --------------------------------------------------------------------------
# file I/O


def _read_flow_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cal_cols = [c for c in ("tod", "dow") if c in header]
        node_cols = [i for i, h in enumerate(header) if h not in ("tod", "dow")]
        rows, tods, dows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(row[i]) if row[i].strip() else math.nan for i in node_cols])
                if len(cal_cols) == 2:
                    tods.append(int(row[header.index("tod")]))
                    dows.append(int(row[header.index("dow")]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(node_cols))
    cal = (np.asarray(tods), np.asarray(dows)) if len(cal_cols) == 2 else None
    return values, cal


def _read_edges(path: Path, num_nodes: int):
    edges = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header
            try:
                a, b = int(row[0]), int(row[1])
                w = float(row[2]) if len(row) > 2 and row[2].strip() else 1.0
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
            if not (0 <= a < num_nodes and 0 <= b < num_nodes):
                raise DataValidationError(
                    f"{path}: row {lineno}: edge ({a}, {b}) out of range for N={num_nodes}"
                )
            edges.append((a, b, w))
    return edges


def _forward_fill(values: np.ndarray) -> np.ndarray:
    out = values.copy()
    for t in range(1, out.shape[0]):
        bad = ~np.isfinite(out[t])
        out[t, bad] = out[t - 1, bad]
    if not np.all(np.isfinite(out)):
        raise DataValidationError("leading NaN/Inf cannot be forward-filled")
    return out


def load_dataset(
    data_path: str | Path,
    edges_path: str | Path | None,
    meta: dict | str | Path,
    fill_nan: bool = False,
) -> TrafficDataset:
    """Read a flow matrix, its metadata sidecar and an optional edge list.

    The flow file is CSV (header ``n0..n{N-1}``, optional ``tod``/``dow``
    columns), raw little-endian float32 (``.bin``/``.f32``/``.raw``), or a
    PEMS-style ``.npz`` whose ``data`` array carries flow in channel 0.
    """
    data_path = Path(data_path)
    if not isinstance(meta, dict):
        meta = json.loads(Path(meta).read_text())
    try:
        interval = int(meta["interval_minutes"])
        start_tod = int(meta.get("start_tod", 0))
        start_dow = int(meta.get("start_dow", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"metadata: missing or invalid field {exc}") from None
    steps_per_day = steps_per_day_for(interval)
    if not (0 <= start_tod < steps_per_day and 0 <= start_dow < DAYS_PER_WEEK):
        raise DataValidationError("metadata start_tod/start_dow out of range")

    cal = None
    suffix = data_path.suffix.lower()
    if suffix == ".csv":
        values, cal = _read_flow_csv(data_path)
    elif suffix in (".bin", ".f32", ".raw"):
        if "num_nodes" not in meta:
            raise ParseError("metadata: binary input requires num_nodes")
        n = int(meta["num_nodes"])
        flat = np.fromfile(data_path, dtype="<f4")
        if flat.size % n:
            raise ParseError(f"{data_path}: {flat.size} floats is not a multiple of N={n}")
        values = flat.reshape(-1, n).astype(np.float64)
    elif suffix == ".npz":
        arr = np.load(data_path)["data"]
        values = np.asarray(arr[..., 0] if arr.ndim == 3 else arr, dtype=np.float64)
    else:
        raise ParseError(f"{data_path}: unsupported extension {suffix!r}")

    num_steps, num_nodes = values.shape
    if "num_nodes" in meta and int(meta["num_nodes"]) != num_nodes:
        raise DataValidationError(
            f"metadata num_nodes={meta['num_nodes']} but file has {num_nodes} columns"
        )
    if "num_steps" in meta and int(meta["num_steps"]) != num_steps:
        raise DataValidationError(
            f"metadata num_steps={meta['num_steps']} but file has {num_steps} rows"
        )
    if not np.all(np.isfinite(values)):
        if not fill_nan:
            t, n = np.argwhere(~np.isfinite(values))[0]
            raise DataValidationError(f"non-finite value at row {t}, node {n}")
        values = _forward_fill(values)

    if cal is not None:
        tod, dow = cal
        check_contiguous(tod, dow, steps_per_day)
        if len(tod) and (tod[0] != start_tod or dow[0] != start_dow):
            raise DataValidationError("calendar columns disagree with metadata start")
    else:
        tod, dow = calendar(num_steps, steps_per_day, start_tod, start_dow)

    edges = _read_edges(Path(edges_path), num_nodes) if edges_path else []
    graph = Graph.from_edges(num_nodes, edges)
    return TrafficDataset(values, tod, dow, interval, graph)


def save_dataset(ds: TrafficDataset, out_dir: str | Path, fmt: str = "csv") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        data_path = out_dir / "data.csv"
        header = [f"n{i}" for i in range(ds.num_nodes)]
        with open(data_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in ds.values:
                writer.writerow([repr(float(v)) for v in row])
    elif fmt == "bin":
        data_path = out_dir / "data.bin"
        ds.values.astype("<f4").tofile(data_path)
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}", "format")
    edges_path = out_dir / "edges.csv"
    with open(edges_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "weight"])
        for a, b, w in ds.graph.edges:
            writer.writerow([a, b, w])
    meta_path = out_dir / "meta.json"
    meta = {
        "interval_minutes": ds.interval_minutes,
        "start_tod": int(ds.tod[0]),
        "start_dow": int(ds.dow[0]),
        "num_nodes": ds.num_nodes,
        "num_steps": ds.num_steps,
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return {"data": data_path, "edges": edges_path, "meta": meta_path}


# --------------------------------------------------------------------------
# normalization


def fit_norm_stats(train_values: np.ndarray) -> NormStats:
    train_values = np.asarray(train_values, dtype=np.float64)
    if train_values.size == 0:
        raise DataValidationError("cannot fit normalization on an empty slice")
    mean = train_values.mean(axis=0)
    std = train_values.std(axis=0)
    flat = std < STD_FLOOR
    if np.any(flat):
        warnings.warn(
            f"nodes {np.flatnonzero(flat).tolist()} have zero variance; std clamped to {STD_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(flat, STD_FLOOR, std)
    return NormStats(mean, std)


def apply_norm(values, stats: NormStats):
    return (values - stats.mean) / stats.std


def invert_norm(values, stats: NormStats):
    return values * stats.std + stats.mean


# --------------------------------------------------------------------------
# splitting and windowing


def split_chronological(
    ds: TrafficDataset | SeriesSlice,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    min_length: int = 24,
) -> tuple[SeriesSlice, SeriesSlice, SeriesSlice]:
    slc = ds.full_slice() if isinstance(ds, TrafficDataset) else ds
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}", "ratios")
    total = len(slc)
    n_train = math.floor(total * ratios[0] + 1e-9)
    n_val = math.floor(total * ratios[1] + 1e-9)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, total)]
    out = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if b - a < min_length:
            raise ConfigError(
                f"{name} slice has {b - a} steps, fewer than the {min_length} a window needs",
                "ratios",
            )
        out.append(
            SeriesSlice(slc.values[a:b], slc.tod[a:b], slc.dow[a:b], slc.start + a, slc.steps_per_day)
        )
    return tuple(out)


def num_windows(length: int, t_in: int, t_out: int) -> int:
    return max(0, length - t_in - t_out + 1)


def make_windows(
    slc: SeriesSlice,
    t_in: int = 12,
    t_out: int = 12,
    batch_size: int = 64,
    order: Sequence[int] | None = None,
) -> list[WindowBatch]:
    """Stride-1 windows over ``slc`` grouped into batches.

    ``order`` optionally gives the window indices (0-based) in the order they
    should be batched; the default is chronological.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", "batch_size")
    count = num_windows(len(slc), t_in, t_out)
    if count == 0:
        raise ConfigError(
            f"slice of length {len(slc)} is shorter than t_in + t_out = {t_in + t_out}", "t_in"
        )
    span = t_in + t_out
    idx = np.arange(count)[:, None] + np.arange(span)[None, :]
    order = np.arange(count) if order is None else np.asarray(order, dtype=np.int64)
    batches = []
    for b in range(0, len(order), batch_size):
        sel = idx[order[b : b + batch_size]]
        vals = slc.values[sel]
        tod, dow = slc.tod[sel], slc.dow[sel]
        batches.append(
            WindowBatch(
                X=vals[:, :t_in],
                Y=vals[:, t_in:],
                tod_in=tod[:, :t_in],
                dow_in=dow[:, :t_in],
                tod_out=tod[:, t_in:],
                dow_out=dow[:, t_in:],
                starts=slc.start + sel[:, 0],
            )
        )
    return batches


# --------------------------------------------------------------------------
# synthetic data


def synthetic_profiles(num_nodes: int, steps_per_day: int, seed: int):
    """Planted per-node weekday profile [N, L_D] and weekend offset [N]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    hours = np.arange(steps_per_day) * 24.0 / steps_per_day
    phase = np.sin(2 * np.pi * np.arange(num_nodes) / max(num_nodes, 1))
    base = rng.uniform(3.0, 6.0, num_nodes)
    amp_am = rng.uniform(1.5, 3.0, num_nodes)
    amp_pm = rng.uniform(1.5, 3.0, num_nodes)
    peak_am = 8.0 + 0.8 * phase + rng.uniform(-0.3, 0.3, num_nodes)
    peak_pm = 17.5 - 0.8 * phase + rng.uniform(-0.3, 0.3, num_nodes)
    width = rng.uniform(1.2, 2.2, num_nodes)

    def bump(center):
        d = np.abs(hours[None, :] - center[:, None])
        d = np.minimum(d, 24.0 - d)
        return np.exp(-0.5 * (d / width[:, None]) ** 2)

    night = -1.0 * bump(np.full(num_nodes, 3.0))
    profile = base[:, None] + amp_am[:, None] * bump(peak_am) + amp_pm[:, None] * bump(peak_pm) + night
    weekend_offset = -rng.uniform(1.0, 2.0, num_nodes)
    return profile, weekend_offset


def gen_synthetic(
    num_nodes: int,
    days: int,
    steps_per_day: int = 24,
    seed: int = 0,
    noise_std: float = 0.0,
) -> TrafficDataset:
    """Daily profile + weekend offset + Gaussian noise on a ring graph.

    The series starts on Monday at midnight; days 5 and 6 of each week are
    the weekend.
    """
    if num_nodes < 1:
        raise ConfigError("num_nodes must be >= 1", "num_nodes")
    if days < 14:
        raise ConfigError(f"days={days}: at least 14 days are needed for weekly structure", "days")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0", "noise_std")
    interval = MINUTES_PER_DAY // steps_per_day
    if interval * steps_per_day != MINUTES_PER_DAY:
        raise ConfigError(f"steps_per_day={steps_per_day} does not divide 1440 minutes", "steps_per_day")
    profile, weekend = synthetic_profiles(num_nodes, steps_per_day, seed)
    num_steps = days * steps_per_day
    tod, dow = calendar(num_steps, steps_per_day)
    is_weekend = (dow >= 5).astype(np.float64)
    values = profile[:, tod].T + is_weekend[:, None] * weekend[None, :]
    if noise_std > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
        values = values + noise_rng.normal(0.0, noise_std, values.shape)
    return TrafficDataset(values, tod, dow, interval, ring_graph(num_nodes))


# --------------------------------------------------------------------------
# perturbations


def apply_perturbation(
    batch: WindowBatch,
    kind: str,
    seed: int,
    stats: NormStats | None = None,
) -> WindowBatch:
    """Inject one disturbance into the inputs of ``batch``.

    A single input step (or a block of four steps for ``shuffle``) is drawn
    per batch and applied to every sample and node. When ``stats`` is given
    the inputs are assumed normalized and the disturbance acts on raw flow.
    """
    if kind not in PERTURBATION_KINDS:
        raise DataValidationError(f"unknown perturbation {kind!r}; expected one of {PERTURBATION_KINDS}")
    t_in = batch.X.shape[1]
    rng = np.random.default_rng(seed)
    x = np.array(batch.X, copy=True)
    if kind == "shuffle":
        if t_in < SHUFFLE_BLOCK:
            raise DataValidationError(f"shuffle needs at least {SHUFFLE_BLOCK} input steps, got {t_in}")
        # reordering steps within a node commutes with per-node normalization
        start = int(rng.integers(0, t_in - SHUFFLE_BLOCK + 1))
        perm = rng.permutation(SHUFFLE_BLOCK)
        x[:, start : start + SHUFFLE_BLOCK] = batch.X[:, start + perm]
        report = {"kind": kind, "block_start": start, "permutation": perm.tolist()}
    else:
        step = int(rng.integers(0, t_in))
        raw = x[:, step] if stats is None else invert_norm(x[:, step], stats)
        raw = raw * SURGE_FACTOR if kind == "surge" else np.zeros_like(raw)
        x[:, step] = raw if stats is None else apply_norm(raw, stats)
        report = {"kind": kind, "step": step}
    return replace(batch, X=x, perturbation=report)

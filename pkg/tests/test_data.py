import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcast.data import (
    Graph,
    SeriesSlice,
    TrafficDataset,
    apply_norm,
    apply_perturbation,
    calendar,
    fit_norm_stats,
    gen_synthetic,
    invert_norm,
    load_dataset,
    make_windows,
    normalize_adjacency,
    save_dataset,
    split_chronological,
    synthetic_profiles,
)
from hybridcast.errors import ConfigError, DataValidationError, ParseError


def write_meta(path, **fields):
    meta = {"interval_minutes": 5, "start_tod": 0, "start_dow": 0}
    meta.update(fields)
    path.write_text(json.dumps(meta))
    return path


def jacobi_eigenvalues(a, sweeps=50):
    """Cyclic Jacobi rotations; small symmetric matrices only."""
    a = np.array(a, dtype=float)
    n = len(a)
    for _ in range(sweeps):
        off = np.sum(a**2) - np.sum(np.diag(a) ** 2)
        if off < 1e-24:
            break
        for p in range(n):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta else 1.0
                c = 1 / np.sqrt(t**2 + 1)
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = t * c, -t * c
                a = rot.T @ a @ rot
    return np.diag(a)


# --- adjacency ---------------------------------------------------------------


def test_normalize_adjacency_no_edges_is_identity():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((2, 2))), np.eye(2))


def test_normalize_adjacency_pair():
    out = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out, np.full((2, 2), 0.5), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_normalize_adjacency_spectrum_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 2, (5, 5)) * (rng.uniform(size=(5, 5)) < 0.6)
    a = np.triu(a, 1)
    a = a + a.T
    out = normalize_adjacency(a)
    assert np.array_equal(out, out.T)
    assert np.all(out >= 0) and np.all(np.diag(out) > 0)
    eig = jacobi_eigenvalues(out)
    assert eig.min() >= -1 - 1e-9 and eig.max() <= 1 + 1e-9


def test_graph_rejects_out_of_range_edge():
    with pytest.raises(DataValidationError):
        Graph.from_edges(307, [(0, 999, 1.0)])


# --- loading -------------------------------------------------------------------


def test_load_single_node_day(tmp_path):
    data = tmp_path / "flow.csv"
    data.write_text("n0\n" + "\n".join(str(float(i)) for i in range(288)) + "\n")
    meta = write_meta(tmp_path / "meta.json", num_nodes=1, num_steps=288)
    ds = load_dataset(data, None, meta)
    assert ds.steps_per_day == 288 and ds.steps_per_week == 2016
    np.testing.assert_array_equal(ds.graph.adjacency_norm, [[1.0]])
    np.testing.assert_array_equal(ds.tod, np.arange(288))
    assert np.all(ds.dow == 0)


def test_load_pems04_shaped_binary(tmp_path):
    T, N = 16992, 307
    values = np.random.default_rng(0).uniform(0, 400, (T, N)).astype("<f4")
    values.tofile(tmp_path / "pems04.bin")
    (tmp_path / "edges.csv").write_text("from,to,cost\n0,1,10.5\n1,2,3.0\n305,306,1\n")
    meta = write_meta(tmp_path / "meta.json", num_nodes=N, num_steps=T)
    ds = load_dataset(tmp_path / "pems04.bin", tmp_path / "edges.csv", meta)
    assert ds.values.shape == (T, N)
    assert ds.steps_per_day == 288 and ds.steps_per_week == 2016
    assert ds.graph.adjacency[0, 1] == ds.graph.adjacency[1, 0] == 10.5
    # calendar wraps correctly across the whole series
    assert ds.tod[288] == 0 and ds.dow[288] == 1 and ds.dow[2016] == 0


def test_load_rejects_edge_out_of_range(tmp_path):
    (tmp_path / "d.csv").write_text("n0,n1\n1,2\n3,4\n")
    (tmp_path / "e.csv").write_text("from,to,weight\n0,999,1\n")
    with pytest.raises(DataValidationError, match="out of range"):
        load_dataset(tmp_path / "d.csv", tmp_path / "e.csv", {"interval_minutes": 5})


def test_load_parse_error_names_row(tmp_path):
    (tmp_path / "d.csv").write_text("n0,n1\n1,2\n3,oops\n")
    with pytest.raises(ParseError, match="row 3"):
        load_dataset(tmp_path / "d.csv", None, {"interval_minutes": 5})


def test_load_rejects_noncontiguous_calendar(tmp_path):
    (tmp_path / "d.csv").write_text("tod,dow,n0\n0,0,1\n1,0,2\n3,0,3\n")
    with pytest.raises(DataValidationError, match="non-contiguous"):
        load_dataset(tmp_path / "d.csv", None, {"interval_minutes": 5})


def test_load_nan_rejected_or_filled(tmp_path):
    (tmp_path / "d.csv").write_text("n0\n1\n\n2\nnan\n")
    with pytest.raises(DataValidationError, match="non-finite"):
        load_dataset(tmp_path / "d.csv", None, {"interval_minutes": 5})
    ds = load_dataset(tmp_path / "d.csv", None, {"interval_minutes": 5}, fill_nan=True)
    np.testing.assert_array_equal(ds.values[:, 0], [1, 2, 2])


def test_save_load_roundtrip(tmp_path):
    ds = gen_synthetic(3, 14, 24, seed=1, noise_std=0.5)
    paths = save_dataset(ds, tmp_path)
    back = load_dataset(paths["data"], paths["edges"], paths["meta"])
    np.testing.assert_array_equal(back.values, ds.values)
    np.testing.assert_array_equal(back.graph.adjacency_norm, ds.graph.adjacency_norm)
    assert back.interval_minutes == 60


# --- normalization -------------------------------------------------------------


def test_norm_forced_arithmetic():
    stats = fit_norm_stats(np.array([[2.0], [4.0]]))
    assert stats.mean[0] == 3.0 and stats.std[0] == 1.0
    np.testing.assert_array_equal(apply_norm(np.array([[2.0], [4.0]]), stats), [[-1.0], [1.0]])


def test_norm_roundtrip_and_moments():
    x = np.random.default_rng(0).normal(50, 20, (200, 4))
    stats = fit_norm_stats(x)
    z = apply_norm(x, stats)
    assert np.max(np.abs(invert_norm(z, stats) - x)) < 1e-6
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)


def test_norm_constant_series_clamped():
    with pytest.warns(RuntimeWarning, match="zero variance"):
        stats = fit_norm_stats(np.array([[5.0], [5.0], [5.0]]))
    assert stats.std[0] == 1e-6
    np.testing.assert_array_equal(apply_norm(np.array([[5.0], [5.0], [5.0]]), stats), 0.0)


# --- splitting and windows -----------------------------------------------------


def _dataset(T, N=2):
    tod, dow = calendar(T, 288)
    values = np.arange(T * N, dtype=float).reshape(T, N)
    return TrafficDataset(values, tod, dow, 5, Graph.from_edges(N, []))


@pytest.mark.parametrize("T,expected", [(100, (60, 20, 20)), (16992, (10195, 3398, 3399))])
def test_split_lengths(T, expected):
    parts = split_chronological(_dataset(T), min_length=10)
    assert tuple(len(p) for p in parts) == expected
    assert parts[0].start == 0 and parts[1].start == expected[0]
    assert parts[2].start == expected[0] + expected[1]


def test_split_too_short():
    with pytest.raises(ConfigError):
        split_chronological(_dataset(10), min_length=24)


def test_split_never_leaks():
    ds = _dataset(500)
    train, val, test = split_chronological(ds, min_length=24)
    t_train = train.start + np.arange(len(train))
    t_val = val.start + np.arange(len(val))
    t_test = test.start + np.arange(len(test))
    assert t_train.max() < t_val.min() < t_test.min()
    assert t_val.max() < t_test.min()


@pytest.mark.parametrize("length,count", [(24, 1), (25, 2), (40, 17)])
def test_window_count(length, count):
    slc = _dataset(length).full_slice()
    batches = make_windows(slc, 12, 12, batch_size=5)
    assert sum(len(b) for b in batches) == count
    if count > 1:
        b = batches[0]
        np.testing.assert_array_equal(b.X[1], slc.values[1:13])


def test_window_midnight_wrap():
    tod, dow = calendar(24, 288, start_tod=280)
    ds = _dataset(24)
    slc = SeriesSlice(ds.values, tod, dow, 0, 288)
    (batch,) = make_windows(slc, 12, 12, 64)
    np.testing.assert_array_equal(batch.tod_out[0], np.arange(4, 16))
    assert np.all(batch.dow_out[0] == 1)


@settings(max_examples=30, deadline=None)
@given(start_tod=st.integers(0, 23), start_dow=st.integers(0, 6), length=st.integers(24, 120))
def test_window_calendar_reconstructs(start_tod, start_dow, length):
    tod, dow = calendar(length, 24, start_tod, start_dow)
    slc = SeriesSlice(np.zeros((length, 1)), tod, dow, 0, 24)
    for batch in make_windows(slc, 12, 12, 7):
        for b in range(len(batch)):
            t, d = calendar(24, 24, batch.tod_in[b, 0], batch.dow_in[b, 0])
            np.testing.assert_array_equal(np.concatenate([batch.tod_in[b], batch.tod_out[b]]), t)
            np.testing.assert_array_equal(np.concatenate([batch.dow_in[b], batch.dow_out[b]]), d)
        assert np.all(batch.tod_out[:, 0] == (batch.tod_in[:, -1] + 1) % 24)


# --- synthetic -----------------------------------------------------------------


def test_synthetic_noise_free_is_weekly_periodic():
    ds = gen_synthetic(4, 21, 24, seed=3, noise_std=0.0)
    L_W = ds.steps_per_week
    np.testing.assert_array_equal(ds.values[:-L_W], ds.values[L_W:])


def test_synthetic_matches_planted_structure():
    ds = gen_synthetic(3, 14, 24, seed=5, noise_std=0.0)
    profile, weekend = synthetic_profiles(3, 24, 5)
    expected = profile[:, ds.tod].T + (ds.dow >= 5)[:, None] * weekend
    np.testing.assert_array_equal(ds.values, expected)


def test_synthetic_deterministic_and_sized():
    a = gen_synthetic(3, 14, 24, seed=9, noise_std=0.3)
    b = gen_synthetic(3, 14, 24, seed=9, noise_std=0.3)
    assert a.values.shape == (336, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.graph.num_nodes == 3 and len(a.graph.edges) == 3


def test_synthetic_requires_two_weeks():
    with pytest.raises(ConfigError):
        gen_synthetic(3, 13, 24)


# --- perturbations -------------------------------------------------------------


def _batch():
    ds = gen_synthetic(2, 14, 24, seed=0, noise_std=0.0)
    (batch,) = make_windows(ds.full_slice(), 12, 12, batch_size=3, order=[0, 1, 2])
    return batch


def test_surge_scales_one_step_by_1_5():
    batch = _batch()
    x = batch.X.copy()
    x[:] = 7.0
    x[0, :, :] = np.array([10.0, 20.0])
    batch = replace(batch, X=x)
    out = apply_perturbation(batch, "surge", seed=4)
    step = out.perturbation["step"]
    np.testing.assert_array_equal(out.X[0, step], [15.0, 30.0])
    diff = np.argwhere(out.X != batch.X)
    assert set(diff[:, 1]) == {step}
    np.testing.assert_array_equal(out.Y, batch.Y)


def test_interrupt_zeroes_one_step():
    batch = _batch()
    out = apply_perturbation(batch, "interrupt", seed=11)
    step = out.perturbation["step"]
    assert np.all(out.X[:, step] == 0)
    keep = [t for t in range(12) if t != step]
    np.testing.assert_array_equal(out.X[:, keep], batch.X[:, keep])


def test_interrupt_in_raw_units_with_stats():
    batch = _batch()
    stats = fit_norm_stats(np.array([[1.0, 2.0], [3.0, 6.0]]))
    out = apply_perturbation(batch, "interrupt", seed=11, stats=stats)
    step = out.perturbation["step"]
    np.testing.assert_allclose(invert_norm(out.X[:, step], stats), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_shuffle_confined_to_block(seed):
    batch = _batch()
    out = apply_perturbation(batch, "shuffle", seed=seed)
    start = out.perturbation["block_start"]
    perm = out.perturbation["permutation"]
    outside = [t for t in range(12) if not start <= t < start + 4]
    np.testing.assert_array_equal(out.X[:, outside], batch.X[:, outside])
    np.testing.assert_array_equal(out.X[:, start : start + 4], batch.X[:, start + np.array(perm)])
    if perm == [0, 1, 2, 3]:
        np.testing.assert_array_equal(out.X, batch.X)


def test_shuffle_identity_draw_leaves_batch_unchanged():
    batch = _batch()
    # search for a seed whose block permutation is the identity
    for s in range(2000):
        out = apply_perturbation(batch, "shuffle", seed=s)
        if out.perturbation["permutation"] == [0, 1, 2, 3]:
            np.testing.assert_array_equal(out.X, batch.X)
            break
    else:
        pytest.fail("no identity permutation in 2000 seeds")


def test_perturbation_unknown_kind():
    with pytest.raises(DataValidationError):
        apply_perturbation(_batch(), "flood", seed=0)


def test_perturbation_deterministic():
    batch = _batch()
    a = apply_perturbation(batch, "surge", seed=3)
    b = apply_perturbation(batch, "surge", seed=3)
    assert a.X.tobytes() == b.X.tobytes() and a.perturbation == b.perturbation

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relcast.data import (
    Mask,
    NormStats,
    Snippet,
    SplitSpec,
    TimeSeriesDB,
    denormalize,
    fit_norm_stats,
    forecast_tau,
    impute_missing_count,
    load_dataset,
    make_forecast_mask,
    make_impute_mask,
    make_mask,
    normalize,
    normalize_db,
    save_dataset,
    segment,
    split,
    split_indices,
    window_starts,
)
from relcast.errors import DataError
from relcast.graph import RelationGraph


# -- containers ---------------------------------------------------------------

def test_db_shape_and_lookup(toy_db):
    assert toy_db.shape == (5, 48, 2)
    assert toy_db.end_time == 148
    assert toy_db.index_of("a10") == 4
    with pytest.raises(DataError):
        toy_db.index_of("zz")


def test_db_values_read_only(toy_db):
    with pytest.raises(ValueError):
        toy_db.values[0, 0, 0] = 1.0


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.full((2, 3, 1), np.nan), np.ones((3, 3, 1))])
def test_db_rejects_bad_values(bad):
    with pytest.raises(DataError):
        TimeSeriesDB(bad, ("a", "b"), RelationGraph.ring(3) if bad.shape[0] == 2 else RelationGraph.from_edges(2, []))


def test_db_rejects_duplicate_ids():
    with pytest.raises(DataError):
        TimeSeriesDB(np.ones((2, 3, 1)), ("a", "a"), RelationGraph.from_edges(2, [(0, 1)]))


def test_snippet_uses_absolute_time(toy_db):
    s = toy_db.snippet("a2", 110, 6)
    np.testing.assert_array_equal(s.values, toy_db.values[1, 10:16])
    assert (s.start, s.series_id, s.length, s.v) == (110, "a2", 6, 2)
    with pytest.raises(DataError):
        toy_db.snippet(0, 99, 4)
    with pytest.raises(DataError):
        toy_db.snippet(0, 145, 4)


def test_snippet_promotes_univariate():
    assert Snippet(np.arange(4.0), 0, "x").values.shape == (4, 1)


# -- file io ------------------------------------------------------------------

def test_round_trip_is_exact_and_stable(toy_db, tmp_path):
    save_dataset(toy_db, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    np.testing.assert_array_equal(back.values, toy_db.values)
    assert back.series_ids == toy_db.series_ids
    assert back.graph.edges == toy_db.graph.edges
    assert (back.start_time, back.step_unit, back.period) == (100, "hour", 12)
    save_dataset(back, tmp_path / "b")
    for name in ("series.csv", "graph.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _corrupt(tmp_path, toy_db, fn):
    root = save_dataset(toy_db, tmp_path / "d")
    fn(root)
    with pytest.raises(DataError):
        load_dataset(root)


def test_load_rejects_non_numeric(toy_db, tmp_path):
    def edit(root):
        p = root / "series.csv"
        lines = p.read_text().splitlines()
        parts = lines[5].split(",")
        parts[2] = "abc"
        lines[5] = ",".join(parts)
        p.write_text("\n".join(lines) + "\n")
    _corrupt(tmp_path, toy_db, edit)


def test_load_rejects_non_finite(toy_db, tmp_path):
    def edit(root):
        p = root / "series.csv"
        lines = p.read_text().splitlines()
        parts = lines[3].split(",")
        parts[3] = "inf"
        lines[3] = ",".join(parts)
        p.write_text("\n".join(lines) + "\n")
    _corrupt(tmp_path, toy_db, edit)


def test_load_rejects_dimension_mismatch(toy_db, tmp_path):
    def edit(root):
        meta = json.loads((root / "meta.json").read_text())
        meta["t_prime"] = 50
        (root / "meta.json").write_text(json.dumps(meta))
    _corrupt(tmp_path, toy_db, edit)


def test_load_rejects_missing_row(toy_db, tmp_path):
    def edit(root):
        p = root / "series.csv"
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:-1]) + "\n")
    _corrupt(tmp_path, toy_db, edit)


def test_load_rejects_unknown_graph_id(toy_db, tmp_path):
    def edit(root):
        with (root / "graph.csv").open("a") as fh:
            fh.write("a1,ghost\n")
    _corrupt(tmp_path, toy_db, edit)


def test_load_rejects_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")


# -- normalization ------------------------------------------------------------

def test_norm_stats_population_std(toy_db):
    s = fit_norm_stats(toy_db)
    flat = toy_db.values.reshape(-1, 2)
    np.testing.assert_allclose(s.mean, flat.mean(0))
    np.testing.assert_allclose(s.std, np.sqrt(((flat - flat.mean(0)) ** 2).mean(0)))


def test_norm_stats_training_subset(toy_db):
    s = fit_norm_stats(toy_db, series=[0, 2], steps=range(10))
    sub = toy_db.values[[0, 2]][:, :10].reshape(-1, 2)
    np.testing.assert_allclose(s.mean, sub.mean(0))


def test_zero_variance_rejected():
    db = TimeSeriesDB(np.ones((2, 4, 1)), ("a", "b"), RelationGraph.from_edges(2, [(0, 1)]))
    with pytest.raises(DataError):
        fit_norm_stats(db)


def test_norm_stats_dict_round_trip():
    s = NormStats(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    back = NormStats.from_dict(json.loads(json.dumps(s.to_dict())))
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.std, s.std)


def test_normalized_db_is_standard(toy_db):
    z = normalize_db(toy_db, fit_norm_stats(toy_db)).values.reshape(-1, 2)
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-12)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=30), finite, st.floats(1e-3, 1e3))
def test_normalization_round_trip(xs, mean, std):
    x = Snippet(np.array(xs), 0, "s")
    s = NormStats(np.array([mean]), np.array([std]))
    back = denormalize(normalize(x, s), s).values
    np.testing.assert_allclose(back, x.values, rtol=1e-9, atol=1e-9 * max(1.0, abs(mean)))


def test_normalize_checks_variates():
    with pytest.raises(DataError):
        normalize(Snippet(np.ones((3, 2)), 0, "s"), NormStats(np.zeros(1), np.ones(1)))


# -- segmentation -------------------------------------------------------------

def test_window_starts():
    assert window_starts(10, 4, 4) == [0, 4]
    assert window_starts(10, 4, 3) == [0, 3, 6]
    with pytest.raises(DataError):
        window_starts(10, 11, 1)


def test_segment_order_and_content(toy_db):
    snips = segment(toy_db, 24)
    assert [(s.series_id, s.start) for s in snips[:3]] == [("a1", 100), ("a1", 124), ("a2", 100)]
    assert len(snips) == 10
    np.testing.assert_array_equal(snips[3].values, toy_db.values[1, 24:48])


# -- masks --------------------------------------------------------------------

def test_forecast_tau_oracle():
    # floor(24 * 0.2) = 4 observed steps
    assert forecast_tau(24, 0.8) == 4
    assert forecast_tau(24, 0.5) == 12
    assert forecast_tau(10, 0.7) == 3


def test_forecast_mask_layout():
    m = make_forecast_mask(24, 0.8, v=2)
    assert m.tau == 4 and m.kind == "forecast"
    assert m.bits[:4].all() and not m.bits[4:].any()
    assert m.bits.shape == (24, 2)


@pytest.mark.parametrize("length,rate", [(4, 0.9), (24, 0.999)])
def test_forecast_mask_needs_observation(length, rate):
    with pytest.raises(DataError):
        make_forecast_mask(length, rate)


def test_forecast_mask_needs_horizon():
    with pytest.raises(DataError):
        make_forecast_mask(24, 1e-12)


@pytest.mark.parametrize("rate", [0.0, 1.0, -0.2, 1.5])
def test_mask_rate_bounds(rate):
    with pytest.raises(DataError):
        make_mask("impute", 24, 1, rate, 0)


def test_impute_count_half_up():
    assert impute_missing_count(24, 1, 0.5) == 12
    assert impute_missing_count(5, 1, 0.5) == 3
    assert impute_missing_count(24, 2, 0.2) == 10


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3), st.floats(0.05, 0.95), st.integers(0, 2 ** 31))
def test_impute_mask_exact_count(length, v, rate, seed):
    total = length * v
    k = impute_missing_count(length, v, rate)
    if k == 0 or k == total:
        with pytest.raises(DataError):
            make_impute_mask(length, v, rate, seed)
        return
    m = make_impute_mask(length, v, rate, seed)
    assert m.n_missing == k
    assert set(np.unique(m.bits)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m.bits, make_impute_mask(length, v, rate, seed).bits)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95))
def test_forecast_mask_exact_prefix(length, rate):
    tau = forecast_tau(length, rate)
    if tau == 0 or tau >= length:
        with pytest.raises(DataError):
            make_forecast_mask(length, rate)
        return
    m = make_forecast_mask(length, rate)
    assert m.n_missing == length - tau
    assert m.bits[:tau].all() and not m.bits[tau:].any()


def test_impute_seed_changes_pattern():
    a = make_impute_mask(24, 1, 0.5, 1).bits
    b = make_impute_mask(24, 1, 0.5, 2).bits
    assert not np.array_equal(a, b)


def test_mask_apply_zeroes_missing():
    m = make_forecast_mask(4, 0.5)
    np.testing.assert_array_equal(m.apply(np.arange(1.0, 5.0).reshape(4, 1)).ravel(), [1, 2, 0, 0])


def test_mask_rejects_non_binary():
    with pytest.raises(DataError):
        Mask(np.array([[0.5]]), "impute", rate=0.5)


def test_unknown_task():
    with pytest.raises(DataError):
        make_mask("classify", 24, 1, 0.5)


# -- splits -------------------------------------------------------------------

def test_split_sizes_oracle():
    tr, va, te = split_indices(2000, SplitSpec())
    assert (len(tr), len(va), len(te)) == (1600, 200, 200)
    tr, va, te = split_indices(30, SplitSpec())
    assert (len(tr), len(va), len(te)) == (24, 3, 3)
    tr, va, te = split_indices(7, SplitSpec(fractions=(0.6, 0.2, 0.2)))
    assert (len(tr), len(va), len(te)) == (5, 1, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 500), st.integers(0, 1000))
def test_split_is_partition(count, seed):
    tr, va, te = split_indices(count, SplitSpec(seed=seed))
    allidx = np.concatenate([tr, va, te])
    np.testing.assert_array_equal(np.sort(allidx), np.arange(count))


def test_split_seeded(toy_db):
    a = split(toy_db, SplitSpec(fractions=(0.6, 0.2, 0.2), seed=5))
    b = split(toy_db, SplitSpec(fractions=(0.6, 0.2, 0.2), seed=5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_split_empty_part():
    with pytest.raises(DataError):
        split_indices(5, SplitSpec())


def test_spatial_temporal_split_counts_windows(ring_db):
    tr, va, te = split(ring_db, SplitSpec(mode="spatial_temporal", fractions=(0.5, 0.25, 0.25)), length=24)
    assert len(tr) + len(va) + len(te) == 4


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.0, 0.0), (-0.1, 0.6, 0.5)])
def test_split_spec_validation(fractions):
    with pytest.raises(DataError):
        SplitSpec(fractions=fractions)

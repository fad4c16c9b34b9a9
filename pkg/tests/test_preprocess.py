import warnings
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlrain.errors import (
    BufferTooSmall,
    ConfigInvalid,
    EmptyColumn,
    OverlappingSplits,
    TooSparse,
    WrongStep,
)
from cmlrain.ingest import GaugeRecord, SynthConfig, TimeSeries, synth_dataset
from cmlrain.preprocess import (
    TIME_FEATURES,
    DegenerateSpreadWarning,
    FeatureMatrix,
    PreprocessConfig,
    RobustScaler,
    SplitBound,
    WindowedDataset,
    chrono_split,
    default_bounds,
    downsample_rsl,
    gauge_to_rate,
    impute,
    moving_average,
    prepare,
    proportional_bounds,
    robust_scale,
    time_features,
    validate_bounds,
)

T0 = datetime(2015, 6, 1, tzinfo=timezone.utc)


def series(values, step=10, unit="dBm", start=T0):
    return TimeSeries(start, step, np.asarray(values, dtype=float), unit)


# -- downsample ------------------------------------------------------------------


def test_downsample_mean():
    out = downsample_rsl(series([1, 2, 3, 4, 5, 6]))
    np.testing.assert_array_equal(out.values, [3.5])
    assert out.step_s == 60 and out.start == T0


def test_downsample_constant():
    out = downsample_rsl(series([-42.25] * 12))
    np.testing.assert_array_equal(out.values, [-42.25, -42.25])


def test_downsample_drops_partial_block():
    out = downsample_rsl(series(np.arange(13.0)))
    np.testing.assert_array_equal(out.values, [2.5, 8.5])


def test_downsample_missing_block():
    v = np.arange(12.0)
    v[7] = np.nan
    out = downsample_rsl(series(v))
    assert out.values[0] == 2.5 and np.isnan(out.values[1])


def test_downsample_aligns_to_minute():
    out = downsample_rsl(series(np.arange(14.0), start=T0 + timedelta(seconds=40)))
    assert out.start == T0 + timedelta(minutes=1)
    np.testing.assert_array_equal(out.values, [4.5, 10.5])


def test_downsample_wrong_step():
    with pytest.raises(WrongStep):
        downsample_rsl(series([1.0] * 6, step=60))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-80, -30), min_size=1, max_size=40))
def test_downsample_commutes_with_mean(blocks):
    raw = np.repeat(np.array(blocks), 6) + np.tile(np.linspace(-0.5, 0.5, 6), len(blocks))
    out = downsample_rsl(series(raw))
    assert abs(out.values.mean() - raw.mean()) < 1e-9


# -- gauge to rate ---------------------------------------------------------------


def gauge(values):
    return GaugeRecord("g", series(values, step=60, unit="mm_accum"), 0.1)


def test_rate_from_single_tip():
    r = gauge_to_rate(gauge([0.1]), 1)
    assert r.unit == "mm_per_h"
    np.testing.assert_allclose(r.values, [6.0])


def test_rate_all_zero():
    np.testing.assert_array_equal(gauge_to_rate(gauge([0.0] * 10), 5).values, 0.0)


def test_moving_average_centre():
    out = moving_average(np.array([0.0, 6.0, 0.0]), 3)
    assert out[1] == pytest.approx(2.0)
    # shrinking edges: mean of the two available samples
    assert out[0] == pytest.approx(3.0) and out[2] == pytest.approx(3.0)


def test_moving_average_oracle():
    rng = np.random.default_rng(0)
    v = rng.random(50)
    w = 5
    expect = [v[max(0, i - 2) : i + 3].mean() for i in range(50)]
    np.testing.assert_allclose(moving_average(v, w), expect, rtol=1e-12)


def test_moving_average_rejects_even():
    with pytest.raises(ConfigInvalid):
        moving_average(np.zeros(4), 4)


def test_rate_keeps_missing_isolated():
    r = gauge_to_rate(gauge([0.1, np.nan, 0.1]), 1)
    assert np.isnan(r.values[1])


# -- imputation ------------------------------------------------------------------


def test_impute_linear_midpoint():
    out = impute(series([1.0, np.nan, 3.0], step=60), order=1)
    np.testing.assert_allclose(out.values, [1.0, 2.0, 3.0])


def test_impute_identity_without_gaps():
    s = series([1.0, 5.0, 2.0], step=60)
    assert impute(s).equals(s)


def test_impute_quadratic_four_neighbours():
    out = impute(series([0.0, 1.0, np.nan, 9.0, 16.0], step=60), order=2, n_neighbors=4)
    assert out.values[2] == pytest.approx(4.0, abs=1e-10)


def test_impute_edges_extend():
    out = impute(series([np.nan, np.nan, 2.0, 3.0, 5.0, np.nan], step=60), order=1)
    np.testing.assert_allclose(out.values, [2.0, 2.0, 2.0, 3.0, 5.0, 5.0])


def test_impute_too_sparse():
    with pytest.raises(TooSparse):
        impute(series([np.nan, 1.0, np.nan, np.nan], step=60), order=2)


def test_impute_long_gap_follows_trend():
    x = np.arange(20.0)
    v = 0.5 * x**2 - x
    v[6:12] = np.nan
    out = impute(series(v, step=60), order=2, n_neighbors=4)
    np.testing.assert_allclose(out.values[6:12], 0.5 * x[6:12] ** 2 - x[6:12], atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-60, -30)), min_size=3, max_size=40))
def test_impute_fills_everything_and_keeps_observed(cells):
    v = np.array([np.nan if c is None else c for c in cells])
    if (~np.isnan(v)).sum() < 3:
        return
    out = impute(series(v, step=60)).values
    assert np.isfinite(out).all()
    keep = ~np.isnan(v)
    np.testing.assert_array_equal(out[keep], v[keep])


# -- robust scaling ----------------------------------------------------------------


def test_robust_scale_example():
    scaled, median, iqr = robust_scale([1, 2, 3, 4, 5])
    assert median == 3.0 and iqr == 2.0
    assert scaled[-1] == pytest.approx(1.0)


def test_robust_scale_linear_quartiles():
    # linear interpolation oracle: q at position p*(n-1) between order statistics
    x = np.array([7.0, 1.0, 4.0, 10.0])
    s = np.sort(x)

    def q(p):
        pos = p * (len(s) - 1)
        lo = int(np.floor(pos))
        return s[lo] + (pos - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])

    _, median, iqr = robust_scale(x)
    assert median == pytest.approx(q(0.5))
    assert iqr == pytest.approx(q(0.75) - q(0.25))


def test_robust_scale_constant_column():
    with pytest.warns(DegenerateSpreadWarning):
        scaled, median, iqr = robust_scale([4.0, 4.0, 4.0])
    np.testing.assert_array_equal(scaled, 0.0)
    assert iqr == 0.0


def test_robust_scale_fixed_point():
    x = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])  # median 0, IQR 1
    scaled, _, _ = robust_scale(x)
    np.testing.assert_allclose(scaled, x, atol=1e-15)


def test_robust_scale_empty():
    with pytest.raises(EmptyColumn):
        robust_scale([1.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=50))
def test_scaler_inverse(values):
    x = np.array(values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpreadWarning)
        sc = RobustScaler().fit({"c": x})
    if sc.state["c"].degenerate:
        return
    np.testing.assert_allclose(sc.inverse_transform("c", sc.transform("c", x)), x, atol=1e-12, rtol=0)


def test_scaler_state_roundtrip():
    sc = RobustScaler().fit({"a": np.arange(10.0), "b": np.linspace(0, 1, 7)})
    assert RobustScaler.from_dict(sc.to_dict()).state == sc.state


# -- time features -----------------------------------------------------------------


def test_time_features_midnight_and_six():
    midnight = int(T0.timestamp())
    f = time_features([midnight, midnight + 6 * 3600])
    np.testing.assert_allclose(f[0, :2], [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(f[1, :2], [1.0, 0.0], atol=1e-15)


def test_time_features_minute_of_hour():
    f = time_features([int(T0.timestamp()) + 15 * 60])
    np.testing.assert_allclose(f[0, 2:], [1.0, 0.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2_000_000_000))
def test_time_features_unit_circle(t):
    f = time_features([t])[0]
    assert abs(f[0] ** 2 + f[1] ** 2 - 1) < 1e-12
    assert abs(f[2] ** 2 + f[3] ** 2 - 1) < 1e-12


# -- splitting -----------------------------------------------------------------------


def grid_matrix(n_minutes, start=T0):
    times = int(start.timestamp()) + 60 * np.arange(n_minutes, dtype=np.int64)
    values = np.column_stack([np.arange(n_minutes, dtype=float), time_features(times)])
    return FeatureMatrix(times, values, ["rsl_x"] + list(TIME_FEATURES))


def one_day_bounds(first=date(2015, 6, 1)):
    return [
        SplitBound("train", first, first),
        SplitBound("val", first + timedelta(days=2), first + timedelta(days=2)),
        SplitBound("test", first + timedelta(days=4), first + timedelta(days=4)),
    ]


def test_split_single_window():
    fm = grid_matrix(31)
    ds = chrono_split(fm, np.zeros(31), one_day_bounds())
    assert len(ds) == 1 and ds.split_counts() == {"train": 1, "val": 0, "test": 0}
    assert ds.inputs().shape == (1, 30, 5)
    assert ds.target_times()[0] == fm.times[30]


def test_split_excludes_straddling_and_buffer():
    n = 5 * 1440
    fm = grid_matrix(n)
    ds = chrono_split(fm, np.zeros(n), one_day_bounds())
    counts = ds.split_counts()
    # each one-day split holds 1440 - 30 windows; buffer days hold none
    assert counts == {"train": 1410, "val": 1410, "test": 1410}
    buffer_days = [(1440, 2880), (3 * 1440, 4 * 1440)]
    rows = ds.starts[:, None] + np.arange(31)
    for lo, hi in buffer_days:
        assert not ((rows >= lo) & (rows < hi)).any()


def test_split_default_bounds_skip_buffer_days():
    days = 92
    start = datetime(2015, 6, 1, tzinfo=timezone.utc)
    n = days * 1440
    times = int(start.timestamp()) + 60 * np.arange(n, dtype=np.int64)
    fm = FeatureMatrix(times, np.zeros((n, 1)), ["rsl_x"])
    ds = chrono_split(fm, np.zeros(n), default_bounds())
    rows = ds.starts[:, None] + np.arange(31)
    days_touched = set(np.unique((times[rows.ravel()] - times[0]) // 86400).tolist())
    aug3 = (date(2015, 8, 3) - date(2015, 6, 1)).days
    aug21 = (date(2015, 8, 21) - date(2015, 6, 1)).days
    assert aug3 not in days_touched and aug21 not in days_touched


def test_split_no_leakage():
    n = 5 * 1440
    ds = chrono_split(grid_matrix(n), np.zeros(n), one_day_bounds())
    assert not ds.source_minutes("test") & ds.source_minutes("train")
    assert not ds.source_minutes("val") & ds.source_minutes("train")


def test_split_drops_missing_targets():
    rates = np.zeros(40)
    rates[35] = np.nan
    ds = chrono_split(grid_matrix(40), rates, one_day_bounds())
    assert len(ds) == 9
    assert np.isfinite(ds.targets()).all()


def test_split_overlap_and_buffer_errors():
    b = one_day_bounds()
    with pytest.raises(OverlappingSplits):
        validate_bounds([b[0], SplitBound("val", b[0].start, b[0].end), b[2]])
    with pytest.raises(BufferTooSmall):
        validate_bounds([b[0], SplitBound("val", b[0].end + timedelta(days=1), b[1].end), b[2]])
    with pytest.raises(ConfigInvalid):
        validate_bounds([b[1], b[0], b[2]])


def test_proportional_bounds():
    b = proportional_bounds(date(2015, 6, 1), 12)
    validate_bounds(b)
    assert [(x.end - x.start).days + 1 for x in b] == [7, 2, 1]
    assert b[2].end == date(2015, 6, 12)


# -- full preparation ------------------------------------------------------------------


def prepared(days=8, seed=3):
    ds = synth_dataset(seed, days)
    cfg = PreprocessConfig(bounds=proportional_bounds(date(2015, 6, 1), days))
    return ds, cfg, prepare(ds.links, ds.gauge, cfg)


def test_prepare_shapes_and_invariants():
    _, cfg, prep = prepared()
    ds = prep.dataset
    assert ds.n_features == 10
    assert ds.feature_names[-4:] == list(TIME_FEATURES)
    assert np.isfinite(ds.inputs()).all()
    assert (ds.targets() >= 0).all()
    assert all(v > 0 for v in ds.split_counts().values())
    assert set(prep.feature_matrix.scaler.state) == set(prep.feature_matrix.rsl_columns)


def test_prepare_scaler_fit_on_train_only():
    _, cfg, prep = prepared()
    fm = prep.feature_matrix
    train = cfg.bounds[0]
    rows = (fm.times >= train.start_s) & (fm.times < train.end_s)
    for j, name in enumerate(fm.rsl_columns):
        raw = fm.scaler.inverse_transform(name, fm.values[:, j])
        refit = RobustScaler().fit({name: raw[rows]})
        assert refit.state[name].median == pytest.approx(fm.scaler.state[name].median, abs=1e-9)
        everything = RobustScaler().fit({name: raw})
        assert everything.state[name] != fm.scaler.state[name]


def test_prepare_targets_are_unscaled_rates():
    _, cfg, prep = prepared()
    ds = prep.dataset
    idx = ds.indices("train")[:50]
    np.testing.assert_array_equal(ds.targets(idx), prep.rate.values[ds.starts[idx] + 30])


def test_windowed_dataset_save_load(tmp_path):
    _, _, prep = prepared(days=6)
    ds = prep.dataset
    ds.save(tmp_path)
    back = WindowedDataset.load(tmp_path)
    np.testing.assert_array_equal(back.inputs(), ds.inputs())
    np.testing.assert_array_equal(back.targets(), ds.targets())
    assert back.split_counts() == ds.split_counts()
    assert back.feature_names == ds.feature_names
    assert (tmp_path / "manifest.json").exists()


def test_preprocess_config_roundtrip():
    cfg = PreprocessConfig(smooth_win=3)
    assert PreprocessConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigInvalid):
        PreprocessConfig(smooth_win=4)
    with pytest.raises(ConfigInvalid):
        PreprocessConfig.from_dict({"bogus": 1})


def test_prepare_clean_data_warns_degenerate():
    ds = synth_dataset(2, 6, SynthConfig.clean())
    cfg = PreprocessConfig(bounds=proportional_bounds(date(2015, 6, 1), 6))
    with pytest.warns(DegenerateSpreadWarning):
        prep = prepare(ds.links, ds.gauge, cfg)
    assert np.isfinite(prep.dataset.inputs()).all()

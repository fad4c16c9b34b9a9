from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlrain.errors import ConfigInvalid, DataError, MissingCoefficient, NoDryPeriod, WindowTooLong
from cmlrain.ingest import LinkMeta, SynthConfig, TimeSeries, synth_dataset
from cmlrain.pl_baseline import (
    ITU_COEFFS,
    PLConfig,
    baseline_attenuation,
    invert_power_law,
    link_rain_rate,
    lookup_coefficients,
    pl_estimate,
    rolling_std,
    wet_dry,
)
from cmlrain.preprocess import downsample_rsl

T0 = datetime(2015, 6, 1, tzinfo=timezone.utc)
META = LinkMeta("x", 2.0, 30.0)


def minutes(values):
    return TimeSeries(T0, 60, np.asarray(values, dtype=float), "dBm")


# -- wet/dry -----------------------------------------------------------------------


def test_constant_rsl_all_dry():
    assert not wet_dry(minutes([-40.0] * 50), PLConfig(wet_threshold=0.0)).any()


def test_step_change_oracle():
    v = np.array([-40.0] * 30 + [-45.0] * 30)
    cfg = PLConfig(std_window_min=5, wet_threshold=0.5)
    wet = wet_dry(minutes(v), cfg)
    # centred window of 5 covers rows i-2..i+2: it spans the step for rows 28..31
    expect = np.zeros(60, dtype=bool)
    expect[28:32] = True
    np.testing.assert_array_equal(wet, expect)


def test_rolling_std_oracle():
    rng = np.random.default_rng(0)
    v = rng.normal(size=40)
    w = 7
    expect = [np.std(v[max(0, i - 3) : i + 4]) for i in range(40)]
    np.testing.assert_allclose(rolling_std(v, w), expect, rtol=1e-9, atol=1e-12)


def test_infinite_threshold_all_dry():
    v = np.random.default_rng(1).normal(size=50)
    assert not wet_dry(minutes(v), PLConfig(wet_threshold=np.inf)).any()


def test_wet_dry_errors():
    with pytest.raises(WindowTooLong):
        wet_dry(minutes([1.0] * 10), PLConfig(std_window_min=15, wet_threshold=0.1))
    with pytest.raises(DataError):
        wet_dry(minutes([1.0, np.nan] * 10), PLConfig(wet_threshold=0.1))


def test_calibrated_threshold_flags_rain_and_waa_zeroes_noise():
    rng = np.random.default_rng(2)
    v = -40 + 0.1 * rng.standard_normal(600)
    v[300:330] -= np.linspace(0, 6, 30)
    meta = LinkMeta("y", 1.28, 38.32)
    rate, wet = link_rain_rate(meta, minutes(v), PLConfig())
    assert wet[305:325].all()
    # noise-level wiggles may cross 0.8 x the typical std; the WAA offset removes them
    assert not rate[:250].any()
    assert (rate[310:330] > 0).all()


# -- baseline ------------------------------------------------------------------------


def test_baseline_all_dry_constant():
    att = baseline_attenuation(np.full(20, -41.0), np.zeros(20, bool))
    np.testing.assert_array_equal(att, 0.0)


def test_baseline_carry_forward_dip():
    rsl = np.array([-40.0] * 10 + [-43.0] * 5 + [-40.0] * 5)
    wet = np.zeros(20, bool)
    wet[10:15] = True
    att = baseline_attenuation(rsl, wet)
    np.testing.assert_array_equal(att[10:15], 3.0)
    np.testing.assert_array_equal(att[:10], 0.0)


def test_baseline_clamps_positive_fluctuation():
    rsl = np.array([-40.0] * 10 + [-39.0] * 3)
    wet = np.zeros(13, bool)
    wet[10:] = True
    np.testing.assert_array_equal(baseline_attenuation(rsl, wet)[10:], 0.0)


def test_baseline_rolling_dry_median():
    rsl = np.array([-40.0, -41.0, -42.0, -50.0])
    wet = np.array([False, False, False, True])
    att = baseline_attenuation(rsl, wet, window=3)
    assert att[3] == pytest.approx(9.0)  # median(-40, -41, -42) - (-50)


def test_baseline_needs_dry():
    with pytest.raises(NoDryPeriod):
        baseline_attenuation(np.zeros(5), np.ones(5, bool))


# -- inversion -------------------------------------------------------------------------


def test_invert_zero():
    assert invert_power_law(0.0, META, PLConfig(waa_offset_db=0.0), coeffs=(0.2, 1.0)) == 0.0


def test_invert_linear_example():
    r = invert_power_law(2.0, META, PLConfig(waa_offset_db=0.0), coeffs=(0.2, 1.0))
    assert r == pytest.approx(5.0, rel=1e-14)


@pytest.mark.parametrize("a", [0.05, 0.2, 0.4])
@pytest.mark.parametrize("b", [0.8, 0.95, 1.1, 1.3])
@pytest.mark.parametrize("length", [0.5, 2.0, 5.0])
def test_invert_round_trip(a, b, length):
    meta = LinkMeta("x", length, 30.0)
    rates = np.array([0.1, 1.0, 10.0, 50.0])
    att = a * rates**b * length
    back = invert_power_law(att, meta, PLConfig(waa_offset_db=0.0), coeffs=(a, b))
    np.testing.assert_allclose(back, rates, rtol=1e-10)


def test_invert_waa_and_dry_mask():
    cfg = PLConfig(waa_offset_db=0.5)
    r = invert_power_law(np.array([0.3, 2.5, 2.5]), META, cfg, wet=[True, True, False], coeffs=(0.2, 1.0))
    np.testing.assert_allclose(r, [0.0, 5.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_invert_monotone(a1, a2):
    cfg = PLConfig()
    r1, r2 = invert_power_law(np.array([a1, a2]), META, cfg)
    if a1 > a2:
        assert r1 >= r2


def test_invert_rejects_negative():
    with pytest.raises(DataError):
        invert_power_law(np.array([-1.0]), META, PLConfig())


# -- coefficients and config -------------------------------------------------------------


def test_lookup_nearest():
    assert lookup_coefficients(32.26) == ITU_COEFFS["V"][30.0]
    assert lookup_coefficients(38.32) == ITU_COEFFS["V"][40.0]
    assert lookup_coefficients(38.32, "H") == ITU_COEFFS["H"][40.0]


def test_lookup_loglinear_between_nodes():
    cfg = PLConfig(coeff_lookup="loglinear")
    a, b = lookup_coefficients(32.5, "V", cfg)
    (a0, b0), (a1, b1) = ITU_COEFFS["V"][30.0], ITU_COEFFS["V"][35.0]
    assert a0 < a < a1 and b1 < b < b0
    assert lookup_coefficients(35.0, "V", cfg) == (a1, b1)


def test_lookup_missing():
    with pytest.raises(MissingCoefficient):
        lookup_coefficients(8.0)
    with pytest.raises(MissingCoefficient):
        lookup_coefficients(30.0, "V", PLConfig(coeffs={"H": {30.0: (0.2, 1.0)}}))


def test_waa_rule():
    cfg = PLConfig()
    assert cfg.waa_for(LinkMeta("a", 1.0, 38.0)) == pytest.approx(1.3)
    assert cfg.waa_for(LinkMeta("b", 1.0, 6.0)) == 0.0
    assert PLConfig(waa_offset_db=0.7).waa_for(META) == 0.7


def test_config_roundtrip_and_validation():
    cfg = PLConfig(wet_threshold=0.3, coeffs={"V": {32.0: (0.18, 1.0)}})
    back = PLConfig.from_dict(cfg.to_dict())
    assert back == cfg
    for bad in (dict(std_window_min=1), dict(waa_offset_db=-1.0), dict(coeff_lookup="cubic")):
        with pytest.raises(ConfigInvalid):
            PLConfig(**bad)


# -- site estimate ------------------------------------------------------------------------


def test_single_link_equals_link_rate():
    rng = np.random.default_rng(3)
    v = -40 + 0.05 * rng.standard_normal(300)
    v[100:140] -= 4.0
    rsl = minutes(v)
    cfg = PLConfig()
    rate, _ = link_rain_rate(META, rsl, cfg)
    est = pl_estimate([(META, rsl)], rsl, cfg)
    np.testing.assert_array_equal(est.values, rate)


def test_two_links_mean():
    cfg = PLConfig(wet_threshold=0.01, std_window_min=3, waa_offset_db=0.0, coeffs={"V": {30.0: (0.2, 1.0)}})
    a = LinkMeta("a", 2.0, 30.0)
    b = LinkMeta("b", 1.0, 30.0)
    rsl = minutes(np.r_[np.full(30, -40.0), np.full(30, -40.8)])
    # minute 30 is wet (its window spans the step); A = 0.8 dB gives R = 2 on 2 km and 4 on 1 km
    ra, _ = link_rain_rate(a, rsl, cfg)
    rb, _ = link_rain_rate(b, rsl, cfg)
    assert (ra[30], rb[30]) == (pytest.approx(2.0), pytest.approx(4.0))
    est = pl_estimate([(a, rsl), (b, rsl)], rsl, cfg)
    assert est.values[30] == pytest.approx(3.0)


def test_recovers_synthetic_truth():
    cfg_s = SynthConfig.clean(coeff_a=0.2, coeff_b=1.05)
    ds = synth_dataset(9, 3, cfg_s)
    links = [(l.meta, downsample_rsl(l.rsl)) for l in ds.links]
    cfg = PLConfig(wet_threshold=0.0, waa_offset_db=0.0, coeffs={"V": {f: (0.2, 1.05) for f in (32.0, 33.0, 38.0)}})
    est = pl_estimate(links, ds.truth, cfg)
    assert (ds.truth.values > 0).sum() > 100
    np.testing.assert_allclose(est.values, ds.truth.values, rtol=1e-8, atol=1e-8)


def test_estimate_dry_where_flagged_dry():
    ds = synth_dataset(4, 2)
    meta, rsl = ds.links[0].meta, downsample_rsl(ds.links[0].rsl)
    filled = TimeSeries(rsl.start, 60, np.nan_to_num(rsl.values, nan=float(np.nanmedian(rsl.values))), "dBm")
    rate, wet = link_rain_rate(meta, filled, PLConfig())
    assert (rate[~wet] == 0).all()

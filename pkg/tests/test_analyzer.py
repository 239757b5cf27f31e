import math

import pytest
from hypothesis import given, strategies as st

from coordload import analyzer
from coordload.analyzer import (Bottleneck, break_even_fraction, cache_grid, classify, measure_rates,
                                optimal_cache_fraction, predict_fetch_rate, predict_throughput, sweep)
from coordload.core import RateSpec
from coordload.errors import MeasurementError
from coordload.experiments import simulate_at_fraction
from coordload.pipeline import PipelineConfig


def test_fully_cached_limit():
    T, F = predict_fetch_rate(1000, 1.0, 5000, 100)
    assert T == pytest.approx(1000 / 5000) and F == pytest.approx(5000)


def test_uncached_limit():
    assert predict_fetch_rate(1000, 0.0, 5000, 100)[1] == pytest.approx(100)


def test_half_cached_value_and_simulation():
    T, F = predict_fetch_rate(100, 0.5, 1000, 100)
    assert T == pytest.approx(0.55)
    assert F == pytest.approx(181.818, rel=1e-4)
    # the same trace through the simulated devices (prep and compute out of the way)
    rep = simulate_at_fraction(RateSpec(math.inf, math.inf, 1000, 100), 100, 0.5, batch_size=1)
    assert rep.epoch_seconds == pytest.approx(0.55, rel=1e-9)


@pytest.mark.parametrize("x", [-0.1, 1.01])
def test_domain_errors(x):
    with pytest.raises(ValueError):
        predict_fetch_rate(10, x, 10, 1)


def test_throughput_labels():
    assert predict_throughput(RateSpec(100, 1e6, 1e6, 1e6), 10, 0.5).bottleneck is Bottleneck.GPU_BOUND
    p = predict_throughput(RateSpec(1000, 1000, 1e5, 10), 1000, 0.05)
    assert p.bottleneck is Bottleneck.IO_BOUND and p.throughput == pytest.approx(p.F)
    p = predict_throughput(RateSpec(1000, 200, 1e5, 1e4), 1000, 0.0)
    assert p.bottleneck is Bottleneck.CPU_BOUND and p.throughput == 200


def test_ties_go_to_gpu():
    assert classify(100, 100, 100) is Bottleneck.GPU_BOUND
    assert classify(200, 100, 100) is Bottleneck.GPU_BOUND
    assert classify(100, 100, 101) is Bottleneck.CPU_BOUND


def test_prediction_row():
    row = predict_throughput(RateSpec(10, 10, 100, 10), 10, 0.5).to_row()
    assert row["bottleneck"] == "gpu_bound"
    assert row["F"] == pytest.approx(10 / row["T_f_seconds"])


def test_grid():
    g = cache_grid(0.05)
    assert len(g) == 21 and g[0] == 0.0 and g[-1] == 1.0
    assert cache_grid(0.3) == [0.0, 0.3, 0.6, 0.9, 1.0]


def test_no_cache_needed():
    s = optimal_cache_fraction(RateSpec(100, 300, 1e4, 150), 1000)
    assert s.x == 0.0 and s.eliminates_fetch_stalls


def test_cache_cannot_help():
    s = optimal_cache_fraction(RateSpec(1000, 1000, 500, 100), 1000)
    assert s.x == 1.0 and s.flagged


def test_x_star_matches_closed_form():
    rates = RateSpec(200, 200, 10_000, 100)
    exact = break_even_fraction(rates, 200)
    # 1/200 = x/1e4 + (1-x)/100  ->  x = 0.005 / 0.0099
    assert exact == pytest.approx(0.005 / 0.0099)
    s = optimal_cache_fraction(rates, 10_000, 0.05)
    assert s.x == pytest.approx(math.ceil(exact / 0.05) * 0.05)
    # the grid step before x* really is short of the target
    assert predict_fetch_rate(10_000, s.x - 0.05, 1e4, 100)[1] < 200 <= predict_fetch_rate(10_000, s.x, 1e4, 100)[1]


def test_grid_step_bounds():
    with pytest.raises(ValueError):
        optimal_cache_fraction(RateSpec(1, 1, 1, 1), 10, 0.2)
    with pytest.raises(ValueError):
        optimal_cache_fraction(RateSpec(1, 1, 1, 1), 10, 0.0)


@given(P=st.floats(10, 1e4), G=st.floats(10, 1e4), dP=st.floats(0, 1e3), dG=st.floats(0, 1e3))
def test_x_star_monotone_in_targets(P, G, dP, dG):
    base = optimal_cache_fraction(RateSpec(G, P, 2e4, 20), 1000)
    more = optimal_cache_fraction(RateSpec(G + dG, P + dP, 2e4, 20), 1000)
    assert more.x >= base.x


@given(C=st.floats(2, 1e6), S=st.floats(1, 1e3), D=st.floats(1, 1e6))
def test_F_monotone_in_x(C, S, D):
    if C <= S:
        return
    Fs = [p.F for p in sweep(RateSpec(1, 1, C, S), D, 0.05)]
    assert all(b >= a for a, b in zip(Fs, Fs[1:]))
    # convex increasing: successive differences grow
    diffs = [b - a for a, b in zip(Fs, Fs[1:])]
    assert all(d2 >= d1 * (1 - 1e-9) for d1, d2 in zip(diffs, diffs[1:]))


@given(S=st.floats(1, 1e3), ratio=st.floats(100, 1e5), x=st.floats(0, 0.9))
def test_inverse_one_minus_x_asymptotics(S, ratio, x):
    _, F = predict_fetch_rate(1000, x, S * ratio, S)
    assert F * (1 - x) == pytest.approx(S, rel=0.10)


def test_measure_rates_recovers_config():
    cfg = PipelineConfig(10, RateSpec(500, 250, 10_000, 50))
    est = measure_rates(cfg)
    for got, want in [(est.G, 500), (est.P, 250), (est.C, 10_000), (est.S, 50)]:
        assert got == pytest.approx(want, rel=0.05)
    assert not est.p_is_lower_bound
    # round trip: estimates fed back predict the observed cold run
    pred = predict_throughput(est.as_rates(), 1000, 0.0).throughput
    assert pred == pytest.approx(est.cold_throughput, rel=0.05)


def test_measure_rates_flags_masked_prep():
    est = measure_rates(PipelineConfig(10, RateSpec(300, 900, 10_000, 50)))
    assert est.p_is_lower_bound
    assert est.P == pytest.approx(300, rel=0.02)


def test_inconsistent_phases_raise(monkeypatch):
    real = analyzer.measure_phase

    def fake(cfg, phase, *a, **kw):
        v = real(cfg, phase, *a, **kw)
        return v * 1.5 if phase == "fully_cached" else v

    monkeypatch.setattr(analyzer, "measure_phase", fake)
    with pytest.raises(MeasurementError):
        measure_rates(PipelineConfig(10, RateSpec(300, 900, 10_000, 50)), n_iterations=20)

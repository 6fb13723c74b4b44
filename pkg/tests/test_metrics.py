import math

import pytest
from hypothesis import given, strategies as st

from splitserve.costmodel import BatchShape, batch_latency, default_profile
from splitserve.domain import Request
from splitserve.engine import ClusterConfig, RequestRecord, RunResult, Simulator
from splitserve.global_scheduler import ApsRouter
from splitserve.local_scheduler import ApsPolicy
from splitserve.metrics import (RequestOutcome, Summary, attainment, bucketed_goodput, find_capacity, goodput,
                                lcu_point, meets_slo, nearest_rank, outcome, outcomes, p99_tbt, summarize, throughput)
from splitserve.predictor import Predictor
from splitserve.profile_table import ProfileTable

HW = default_profile()


def rec(i, times, arrival=0.0, slo=100.0):
    return RequestRecord(i, arrival, 10, len(times), len(times), slo, list(times), 0, 0.0, 0, 1, 0, 0.0, False, arrival,
                         arrival)


def out(n_tokens, met, i=0):
    return RequestOutcome(i, 1.0, [1.0] * (n_tokens - 1), 1.0, 1.0, 1.0, met, n_tokens, 0.0)


def test_goodput_definition():
    assert goodput([out(100, True), out(100, True), out(50, False)], 10.0) == 20.0
    assert goodput([out(100, False)], 10.0) == 0.0
    with pytest.raises(ValueError):
        goodput([], 0.0)


def test_goodput_at_99_percent_attainment():
    outs = [out(100, i != 0, i) for i in range(100)]
    assert goodput(outs, 5.0) == pytest.approx(0.99 * throughput(outs, 5.0))
    assert attainment(outs) == 0.99


def test_attainment():
    assert attainment([out(5, True), out(5, True)]) == 1.0
    assert attainment([out(5, True), out(5, False)]) == 0.5
    with pytest.raises(ValueError):
        attainment([])


def test_outcome_fields():
    o = outcome(rec(3, [50.0, 120.0, 260.0], arrival=10.0))
    assert o.ttft == 40.0 and o.tbt_series == [70.0, 140.0] and o.max_tbt == 140.0
    assert not o.met_slo and o.output_tokens == 3
    assert outcome(rec(3, [50.0, 120.0, 260.0], arrival=10.0), slo_tbt=150.0).met_slo
    assert not outcome(rec(3, [50.0, 120.0], arrival=10.0), ttft_slo=20.0).met_slo


@given(st.lists(st.floats(0.1, 500.0), min_size=1, max_size=50), st.floats(0.0, 1000.0))
def test_tbt_consistency(gaps, arrival):
    times, t = [], arrival + 30.0
    for g in [0.0] + gaps:
        t += g
        times.append(t)
    o = outcome(rec(0, times, arrival))
    assert len(o.tbt_series) == o.output_tokens - 1
    assert o.ttft + sum(o.tbt_series) == pytest.approx(o.completion - arrival)
    assert o.met_slo == (o.max_tbt <= 100.0)


def test_nearest_rank():
    xs = list(range(1, 101))
    assert nearest_rank(xs, 99) == 99
    assert nearest_rank(xs, 50) == 50
    assert nearest_rank([5.0], 99) == 5.0
    assert nearest_rank([3, 1, 2], 100) == 3
    assert nearest_rank([], 99) == 0.0


def test_goodput_never_exceeds_throughput_on_a_run():
    sim = Simulator(HW, ClusterConfig(), [ApsPolicy(ProfileTable.seeded(HW), 97.0) for _ in range(2)],
                    ApsRouter(Predictor(HW), 2))
    res = sim.run([Request(i, 80.0 * i, 1200, 150) for i in range(40)])
    s = summarize(res)
    assert s.goodput <= s.throughput
    assert s.n == 40 and 0.0 <= s.attainment <= 1.0
    assert s.p99_tbt == p99_tbt(outcomes(res))
    assert summarize(RunResult([], [], 0.0)).n == 0


def test_meets_slo():
    s = Summary(10, 0.995, 1.0, 1.0, 40.0, 90.0, 100.0, 200.0, 1.0, 500.0)
    assert meets_slo(s, 100.0)
    assert not meets_slo(s, 80.0)
    assert not meets_slo(s, 100.0, 0.999)
    assert meets_slo(s, 100.0, max_median_delay=600.0)
    assert not meets_slo(s, 100.0, max_median_delay=400.0)


@pytest.mark.parametrize("cross", [0.37, 1.0, 2.55, 5.93, 7.99])
def test_capacity_bisection_finds_crossover(cross):
    res = find_capacity(lambda q: q <= cross, 0.2, 8.0, 0.1)
    assert res.qps <= cross < res.qps + 0.1
    interior = len(res.probes) - 2
    assert interior <= math.ceil(math.log2((8.0 - 0.2) / 0.1))


def test_capacity_bracket_edges():
    low = find_capacity(lambda q: False, 0.2, 8.0)
    assert low.below_bracket and low.describe() == "< 0.2"
    high = find_capacity(lambda q: True, 0.2, 8.0)
    assert high.above_bracket and high.describe() == ">= 8"
    with pytest.raises(ValueError):
        find_capacity(lambda q: True, 2.0, 1.0)
    with pytest.raises(ValueError):
        find_capacity(lambda q: True, 1.0, 2.0, resolution=0)


def test_lcu_orderings():
    d_pure, _ = lcu_point(HW, 50.0, 1024, 0)
    d_mixed, _ = lcu_point(HW, 50.0, 1024, 1024)
    assert d_pure > d_mixed
    d, rate = lcu_point(HW, 1e9, 1024, 512)
    assert d == 256 and rate == pytest.approx(768 / batch_latency(BatchShape(512, 256, 1024.0), HW))
    assert lcu_point(HW, 1e9, 1024, 512, n_max=64)[0] == 64
    assert lcu_point(HW, 1.0, 1024, 512) == (0, 0.0)


def test_bucketed_goodput():
    horizon = 42 * 60_000.0
    bucket = 6 * 60_000.0
    recs = [rec(0, [1000.0, 1050.0, 1100.0]), rec(1, [400_000.0, 400_050.0]), rec(2, [10.0, 500.0]),
            rec(3, [2_600_000.0, 2_600_050.0])]
    outs = outcomes(RunResult(recs, [], 0.0))
    rows = bucketed_goodput(recs, outs, bucket, horizon)
    assert len(rows) == 7
    assert [r[0] for r in rows] == [i * bucket for i in range(7)]
    # request 2 misses the SLO; the emission past the horizon lands in the last bucket
    assert [r[1] for r in rows] == [3, 2, 0, 0, 0, 0, 2]
    assert sum(r[1] for r in rows) == sum(o.output_tokens for o in outs if o.met_slo)
    assert rows[0][2] == pytest.approx(3 / 360.0)
    with pytest.raises(ValueError):
        bucketed_goodput(recs, outs, 0.0, horizon)

from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from splitserve.costmodel import default_profile
from splitserve.domain import Request, split_at, split_request
from splitserve.engine import ClusterConfig, Simulator
from splitserve.global_scheduler import (ApsRouter, ColocRouter, DisaggRouter, ForcedRouter, SchedulerConfig,
                                         disagg_phi, make_pairs, search_split)
from splitserve.local_scheduler import ApsPolicy
from splitserve.predictor import Predictor, VirtualState
from splitserve.profile_table import ProfileTable

HW = default_profile()
TABLE = ProfileTable.seeded(HW)


def idle(i):
    return VirtualState(i, 0.0, [], [], [], TABLE, None, 97.0, 256, "aps", 0, True)


def pair_probe(view, sa, sb):
    pred = Predictor(HW)

    def probe(phi):
        a, b = split_request(view, phi)
        t1, t2 = pred.predict_pair(a, b, sa, sb)
        return a.end, t1, t2
    return probe, pred


def aps_sim(n=2, hw=HW, **cfg):
    return Simulator(hw, ClusterConfig(n_instances=n), [ApsPolicy(ProfileTable.seeded(hw), 97.0) for _ in range(n)],
                     ApsRouter(Predictor(hw), n, SchedulerConfig(**cfg), keep_decisions=True))


def test_initial_phi_is_disaggregation():
    assert disagg_phi(Request(0, 0.0, 1024, 1000, 1024).plan_view()) == 0.5


def test_config_validation():
    for kw in (dict(K=0), dict(epsilon_ms=0), dict(update="x"), dict(commit="x"), dict(orientation="x"),
               dict(split_kv_headroom=1.0), dict(margin_tokens=-1)):
        with pytest.raises(ValueError):
            SchedulerConfig(**kw)


def test_idle_pair_balanced_request_matches_exhaustive_grid():
    view = Request(0, 0.0, 1024, 1024).plan_view()
    sa, sb = idle(0), idle(1)
    probe, pred = pair_probe(view, sa, sb)
    _, s, probes = search_split(view, probe, SchedulerConfig())
    assert len(probes) <= 6
    chosen = next(p for p in probes if p.s == s).makespan
    grid = min(max(pred.predict_pair(*split_at(view, g), sa, sb)) for g in range(2049))
    assert grid / chosen >= 0.98


def test_decode_heavy_request_moves_decode_to_alpha():
    view = Request(0, 0.0, 219, 1467).plan_view()
    probe, _ = pair_probe(view, idle(0), idle(1))
    _, s, _ = search_split(view, probe, SchedulerConfig())
    assert 219 < s < view.planned_len


@pytest.mark.parametrize("K", [1, 3, 6, 9])
def test_probe_budget(K):
    calls = []

    def probe(phi):
        calls.append(phi)
        return round(phi * 2048), 1000.0 * phi, 600.0
    search_split(Request(0, 0.0, 1024, 1024).plan_view(), probe, SchedulerConfig(K=K, epsilon_ms=1e-6))
    assert len(calls) <= K


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.1, 10.0), st.integers(16, 4096), st.integers(16, 4096),
       st.sampled_from(["bisect", "interpolate"]), st.booleans())
def test_bracket_keeps_the_balance_point(root, gain, p, d, update, endpoints):
    # T1 - T2 strictly increasing in phi with a root at ``root``
    def probe(phi):
        return round(phi * (p + d)), 1000.0 + gain * 1000 * (phi - root), 1000.0
    view = Request(0, 0.0, p, d).plan_view()
    _, _, probes = search_split(view, probe, SchedulerConfig(update=update, endpoints=endpoints, epsilon_ms=1e-3))
    lo, hi = 0.0, 1.0
    for pr in probes:
        assert lo <= root <= hi
        if pr.t1 > pr.t2:
            hi = min(hi, pr.phi)
        elif pr.t1 < pr.t2:
            lo = max(lo, pr.phi)


def test_cold_start_then_search():
    sim = aps_sim()
    sim.run([Request(0, 0.0, 1024, 1024), Request(1, 1.0, 1024, 1024)])
    d0, d1 = sim.router.decisions
    assert d0.cold and d0.plan.s == 1024
    assert not d1.cold
    # cold start seeds the pair clocks from the predicted timeline of the first request
    sim2 = aps_sim()
    sim2.run([Request(0, 0.0, 1024, 1024)])
    a, b = split_at(Request(0, 0.0, 1024, 1024), 1024)
    t1, t2 = Predictor(HW).predict_pair(a, b, idle(0), idle(1))
    assert sim2.router.clocks[(0, 1)] == (t1, t2)


def test_four_instance_pairs_alternate():
    sim = aps_sim(n=4)
    sim.run([Request(i, 10.0 * i, 300, 40) for i in range(100)])
    pairs = [tuple(sorted((d.plan.alpha_instance, d.plan.beta_instance))) for d in sim.router.decisions]
    assert pairs == [(0, 1), (2, 3)] * 50
    assert make_pairs(2) == [(0, 1)]
    with pytest.raises(ValueError):
        make_pairs(1)


def test_forced_whole_request_registers_no_transfer():
    sim = Simulator(HW, ClusterConfig(), [ApsPolicy(ProfileTable.seeded(HW), 97.0) for _ in range(2)],
                    ForcedRouter(2, phi=1.0))
    res = sim.run([Request(0, 0.0, 500, 50)])
    assert res.transfer_chunks == 0 and sim.instances[1].batches == 0
    assert res.requests[0].beta_cancelled is False


def test_forced_router_modes():
    v = Request(0, 0.0, 100, 100).plan_view()
    r = ForcedRouter(2, phi="alternate", orientation="alternate")
    plans = [r.schedule(v, None) for _ in range(4)]
    assert [(p.s, p.alpha_instance, p.beta_instance) for p in plans] == [(200, 0, 1), (0, 0, 1), (200, 0, 1),
                                                                        (0, 0, 1)]
    assert ForcedRouter(2, phi="disagg").schedule(v, None).s == 100
    assert ForcedRouter(2, s=150).schedule(v, None).s == 150
    with pytest.raises(ValueError):
        ForcedRouter(2)
    with pytest.raises(ValueError):
        ForcedRouter(2, phi=0.5, orientation="predicted")


def test_baseline_routers():
    v = Request(0, 0.0, 100, 100).plan_view()
    c = ColocRouter(3)
    assert [c.schedule(v, None).alpha_instance for _ in range(4)] == [0, 1, 2, 0]
    d = DisaggRouter(4)
    plans = [d.schedule(v, None) for _ in range(3)]
    assert [(p.alpha_instance, p.beta_instance, p.s) for p in plans] == [(0, 2, 100), (1, 3, 100), (0, 2, 100)]
    with pytest.raises(ValueError):
        DisaggRouter(2, n_prefill=2)


def test_kv_pressure_runs_requests_whole():
    small = replace(HW, hbm_capacity_tokens=6000)
    sim = aps_sim(hw=small)
    res = sim.run([Request(i, 5.0 * i, 1500, 400) for i in range(12)])
    assert sim.router.kv_fallbacks > 0
    whole = [r for r in res.requests if r.s in (0, r.prompt_len + r.predicted_decode)]
    assert whole
    assert all(len(r.token_times) == r.decode_len for r in res.requests)

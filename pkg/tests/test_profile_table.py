from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from splitserve.costmodel import BatchShape, batch_latency, default_profile
from splitserve.profile_table import ProfileTable, TableConfig, bucket_hi, bucket_index, bucket_lo

HW = default_profile()
SEEDED = ProfileTable.seeded(HW)


def test_ema_arithmetic():
    t = ProfileTable(TableConfig(ema_alpha=0.5))
    t.record(300, 1000, 4, 40.0)
    t.record(300, 1000, 4, 60.0)
    assert t.lookup(300, 1000, 4) == pytest.approx(50.0)


def test_factor_two_buckets():
    t = ProfileTable()
    assert t.key(500, 0, 0) != t.key(700, 0, 0)
    assert t.key(300, 0, 0) == t.key(500, 0, 0)
    assert [bucket_index(v) for v in (0, 1, 2, 3, 4, 255, 256)] == [0, 1, 2, 2, 3, 8, 9]
    assert (bucket_lo(9), bucket_hi(9)) == (256, 511)


def test_bucket_index_other_factor():
    assert [bucket_index(v, 3) for v in (0, 1, 2, 3, 8, 9, 26, 27)] == [0, 1, 1, 2, 2, 3, 3, 4]


def test_empty_table():
    t = ProfileTable()
    assert t.lookup(100, 100, 4) is None
    assert t.max_prefill_allowed(50.0, 1024, 4) == 512
    assert len(t) == 0


def test_round_trip_fresh_bucket():
    t = ProfileTable()
    t.record(700, 2000, 12, 33.25)
    assert t.lookup(700, 2000, 12) == 33.25


def test_record_rejects_non_positive():
    with pytest.raises(ValueError):
        ProfileTable().record(1, 1, 1, 0.0)


def test_zero_budget_when_decodes_alone_exceed_slo():
    t = ProfileTable()
    t.record(0, 1024, 32, 80.0)
    assert t.max_prefill_allowed(50.0, 1024, 32) == 0


def test_seeded_anchor_budget():
    m = SEEDED.max_prefill_allowed(50.0, 1024, 29)
    assert bucket_index(m) in (bucket_index(512) - 1, bucket_index(512), bucket_index(512) + 1)


def test_neighbor_estimate_matches_exhaustive_scan():
    t = ProfileTable()
    t.record(1000, 3000, 20, 40.0)   # key (10, 12, 5, 0)
    t.record(300, 5000, 40, 30.0)    # key (9, 13, 6, 0)
    est = t.lookup_key((10, 12, 6, 0))
    donors = []
    for k, v, _ in t.items():
        if k[0] in (9, 10) and k[1] in (12, 13) and k[2] in (6, 7) and k[3] in (0, 1):
            donors.append(v * (2 if k[0] == 9 else 1))
    assert est == max(donors)
    assert est >= 30.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4000), st.integers(1, 8000), st.integers(1, 128),
                          st.floats(1.0, 200.0)), min_size=1, max_size=12),
       st.integers(1, 4000), st.integers(1, 8000), st.integers(1, 128))
def test_neighbor_never_below_donor(records, p, c, d):
    t = ProfileTable()
    for rp, rc, rd, v in records:
        t.record(rp, rc, rd, v)
    k = t.key(p, c, d)
    est = t.lookup_key(k)
    own = dict((kk, v) for kk, v, _ in t.items())
    if k in own:
        assert est == own[k]
        return
    for kk, v in own.items():
        if kk[0] in (k[0], k[0] - 1) and kk[1] in (k[1], k[1] + 1) and kk[2] in (k[2], k[2] + 1) \
                and kk[3] in (k[3], k[3] + 1):
            assert est >= v


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 16384), st.integers(0, 255), st.integers(0, 255), st.floats(20.0, 300.0))
def test_budget_antitone_in_dnum(ctx, d1, d2, slo):
    lo, hi = min(d1, d2), max(d1, d2)
    assert SEEDED.max_prefill_allowed(slo, ctx, lo) >= SEEDED.max_prefill_allowed(slo, ctx, hi)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 16384), st.integers(0, 256), st.floats(20.0, 300.0))
def test_budget_safe_under_truth(ctx, dnum, slo):
    m = SEEDED.max_prefill_allowed(slo, ctx, dnum)
    if m == 0:
        return
    lat = batch_latency(BatchShape(m, dnum, float(ctx) if dnum else 0.0), HW)
    b = bucket_index(m)
    slack = batch_latency(BatchShape(bucket_lo(b + 1), dnum, float(ctx) if dnum else 0.0), HW) - \
        batch_latency(BatchShape(bucket_lo(b), dnum, float(ctx) if dnum else 0.0), HW)
    assert lat <= slo + slack + 1e-9


def test_overlay_isolated():
    base = ProfileTable.seeded(HW)
    before = base.lookup(512, 1024, 8)
    ov = base.overlay()
    for _ in range(20):
        ov.record(512, 1024, 8, 500.0)
    assert ov.lookup(512, 1024, 8) > before
    assert base.lookup(512, 1024, 8) == before


def test_csv_round_trip(tmp_path):
    t = ProfileTable()
    t.record(100, 200, 3, 12.5)
    t.record(5000, 0, 0, 77.0, pctx=1000)
    path = tmp_path / "table.csv"
    t.dump_csv(path)
    u = ProfileTable.load_csv(path)
    assert list(u.items()) == list(t.items())


def test_learned_table_tracks_truth():
    from splitserve import experiments as ex
    from splitserve.config import config_from_dict
    from splitserve.workload import generate
    cfg = config_from_dict({"hardware": "default", "workload": {"preset": "symmetric", "rate_qps": 3.0,
                                                                  "num_requests": 40, "duration_s": None}})
    res, sim = ex.run_requests(cfg, generate(cfg.workload), cluster=replace(cfg.cluster, record_batches=True))
    for inst in sim.instances:
        t = inst.policy.table
        seen = Counter()
        last = {}
        for _, _, sh, _, _ in inst.log:
            k = t.key(sh.plen, sh.ctx, sh.dnum, sh.prefill_ctx_sum / sh.plen if sh.plen else 0.0)
            seen[k] += 1
            last[k] = sh
        for k, n in seen.items():
            if n >= 20:
                assert t.lookup_key(k) == pytest.approx(batch_latency(last[k], HW), rel=0.10)

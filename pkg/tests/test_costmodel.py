import numpy as np
import pytest
from hypothesis import given, strategies as st

from splitserve.costmodel import (BatchShape, SingularFitError, batch_latency, calibrate, compute_time, memory_time,
                                  profile_from_dict, transfer_time)
from splitserve.metrics import lcu_point


def test_minimal_batch_is_memory_floor(hw):
    lat = batch_latency(BatchShape(0, 1, 0.0), hw)
    assert lat == pytest.approx(hw.fixed_overhead_ms + hw.weight_bytes / hw.mem_bw_bytes_per_ms)


def test_decode_latency_linear_in_dnum_when_memory_bound(hw):
    xs = np.array([1, 8, 32])
    ys = np.array([batch_latency(BatchShape(0, int(d), 1024.0), hw) for d in xs])
    for d in xs:
        s = BatchShape(0, int(d), 1024.0)
        assert memory_time(s, hw) > compute_time(s, hw)
    slope, icpt = np.polyfit(xs * 1024, ys, 1)
    assert slope == pytest.approx(hw.kv_bytes_per_token / hw.mem_bw_bytes_per_ms, rel=1e-9)
    assert np.allclose(slope * xs * 1024 + icpt, ys)


def test_lcu_anchor_near_29(hw):
    d, _ = lcu_point(hw, 50.0, 1024, 512)
    assert 29 * 0.8 <= d <= 29 * 1.2
    assert batch_latency(BatchShape(512, d, 1024.0), hw) <= 50.0 < batch_latency(BatchShape(512, d + 1, 1024.0), hw)


def test_transfer_time_values(hw):
    assert transfer_time(0, hw) == 0.0
    assert transfer_time(16, hw) == pytest.approx(0.1339, abs=5e-5)
    bw = transfer_time(2000, hw) - hw.link_latency_ms
    assert transfer_time(4000, hw) - hw.link_latency_ms == pytest.approx(2 * bw, rel=1e-12)


@given(st.integers(1, 10 ** 6), st.integers(1, 10 ** 6))
def test_transfer_additivity(a, b):
    from splitserve.costmodel import default_profile
    hw = default_profile()
    assert transfer_time(a, hw) + transfer_time(b, hw) >= transfer_time(a + b, hw) - hw.link_latency_ms - 1e-9


shapes = st.tuples(st.integers(0, 8192), st.integers(0, 256), st.integers(0, 32768), st.integers(0, 10 ** 6))


@given(shapes, st.integers(1, 512), st.sampled_from([0, 1, 2]))
def test_latency_monotone_per_dimension(sh, delta, dim):
    from splitserve.costmodel import default_profile
    hw = default_profile()
    p, d, c, q = sh
    base = BatchShape(p, d, float(c), q)
    bumped = [BatchShape(p + delta, d, float(c), q), BatchShape(p, d + delta, float(c), q),
              BatchShape(p, d, float(c + delta), q)][dim]
    assert batch_latency(bumped, hw) >= batch_latency(base, hw)


def test_decode_batches_become_memory_bound(hw):
    for ctx in (256, 1024, 8192):
        d = next(d for d in range(1, 4096) if memory_time(BatchShape(0, d, float(ctx)), hw)
                 >= compute_time(BatchShape(0, d, float(ctx)), hw))
        assert d >= 1


def _random_targets(hw, n=40, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        s = BatchShape(int(rng.integers(0, 4096)), int(rng.integers(0, 200)), float(rng.integers(1, 8192)),
                       int(rng.integers(0, 100000)))
        if s.empty:
            continue
        out.append((s, batch_latency(s, hw) * (1 + noise * rng.standard_normal())))
    return out


def test_calibration_round_trip(hw):
    prof, rep = calibrate(_random_targets(hw))
    assert rep.rms < 1e-6
    for name in ("c_lin", "c_attn", "mem_bw_bytes_per_ms", "weight_bytes", "fixed_overhead_ms"):
        assert getattr(prof, name) == pytest.approx(getattr(hw, name), rel=1e-6)


def test_calibration_from_noisy_anchors_keeps_lcu(hw):
    # latency-vs-dnum curves for a few (ctx, plen) series, with 2% measurement noise
    targets = []
    for ctx in (256, 1024, 4096):
        for d in (1, 8, 16, 29, 48, 64, 128):
            for plen in (0, 256, 512, 1024, 2048):
                s = BatchShape(plen, d, float(ctx))
                targets.append((s, batch_latency(s, hw)))
    rng = np.random.default_rng(1)
    targets = [(s, t * (1 + 0.02 * rng.standard_normal())) for s, t in targets]
    prof, _ = calibrate(targets)
    d, _ = lcu_point(prof, 50.0, 1024, 512)
    assert 29 * 0.8 <= d <= 29 * 1.2


def test_calibration_needs_four_targets(hw):
    with pytest.raises(ValueError):
        calibrate(_random_targets(hw, 3))


def test_calibration_singular_names_parameters(hw):
    # decode-only, constant context: linear token cost cannot be separated from the rest
    targets = [(BatchShape(0, 4, 512.0), batch_latency(BatchShape(0, 4, 512.0), hw))] * 6
    with pytest.raises(SingularFitError, match="unidentified|non-physical"):
        calibrate(targets)


def test_profile_validation():
    with pytest.raises(ValueError, match="unknown"):
        profile_from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        profile_from_dict(dict(flops_per_ms=0, mem_bw_bytes_per_ms=1, weight_bytes=1, kv_bytes_per_token=1,
                               link_bw_bytes_per_ms=1, link_latency_ms=0, fixed_overhead_ms=0,
                               hbm_capacity_tokens=1, c_lin=1, c_attn=0))

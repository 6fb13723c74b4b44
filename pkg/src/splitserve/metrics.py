"""Latency outcomes, goodput, attainment, capacity search and LCU points."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from splitserve.costmodel import BatchShape, HardwareProfile, batch_latency


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    if not values:
        return 0.0
    xs = sorted(values)
    k = max(1, math.ceil(q / 100.0 * len(xs)))
    return xs[min(k, len(xs)) - 1]


@dataclass
class RequestOutcome:
    id: int
    ttft: float
    tbt_series: list
    max_tbt: float
    p50_tbt: float
    p99_tbt: float
    met_slo: bool
    output_tokens: int
    completion: float


def outcome(rec, slo_tbt: Optional[float] = None, ttft_slo: Optional[float] = None) -> RequestOutcome:
    times = rec.token_times
    slo = rec.slo_tbt if slo_tbt is None else slo_tbt
    gaps = [b - a for a, b in zip(times, times[1:])]
    mx = max(gaps) if gaps else 0.0
    ttft = times[0] - rec.arrival
    met = mx <= slo and (ttft_slo is None or ttft <= ttft_slo)
    return RequestOutcome(rec.id, ttft, gaps, mx, nearest_rank(gaps, 50), nearest_rank(gaps, 99), met, len(times),
                          times[-1])


def outcomes(result, slo_tbt: Optional[float] = None, ttft_slo: Optional[float] = None) -> list[RequestOutcome]:
    return [outcome(r, slo_tbt, ttft_slo) for r in result.requests]


def goodput(outs: Iterable[RequestOutcome], window_s: float) -> float:
    if not window_s > 0:
        raise ValueError("window must be > 0")
    return sum(o.output_tokens for o in outs if o.met_slo) / window_s


def throughput(outs: Iterable[RequestOutcome], window_s: float) -> float:
    if not window_s > 0:
        raise ValueError("window must be > 0")
    return sum(o.output_tokens for o in outs) / window_s


def attainment(outs: Sequence[RequestOutcome]) -> float:
    if not outs:
        raise ValueError("attainment of an empty set is undefined")
    return sum(1 for o in outs if o.met_slo) / len(outs)


def p99_tbt(outs: Iterable[RequestOutcome]) -> float:
    gaps = [g for o in outs for g in o.tbt_series]
    return nearest_rank(gaps, 99)


@dataclass
class Summary:
    n: int
    attainment: float
    goodput: float
    throughput: float
    p50_tbt: float
    p99_tbt: float
    mean_ttft: float
    p99_ttft: float
    window_s: float
    median_sched_delay: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(result, slo_tbt: Optional[float] = None, ttft_slo: Optional[float] = None,
              window_s: Optional[float] = None) -> Summary:
    outs = outcomes(result, slo_tbt, ttft_slo)
    if not outs:
        return Summary(0, float("nan"), 0.0, 0.0, 0.0, 0.0, float("nan"), float("nan"), 0.0)
    first = min(r.arrival for r in result.requests)
    window = window_s or max((result.end_time - first) / 1000.0, 1e-9)
    gaps = [g for o in outs for g in o.tbt_series]
    ttfts = [o.ttft for o in outs]
    delays = [r.sched_delay for r in result.requests]
    return Summary(len(outs), attainment(outs), goodput(outs, window), throughput(outs, window),
                   nearest_rank(gaps, 50), nearest_rank(gaps, 99), sum(ttfts) / len(ttfts),
                   nearest_rank(ttfts, 99), window, nearest_rank(delays, 50))


# capacity -------------------------------------------------------------------


@dataclass
class CapacityResult:
    qps: float
    below_bracket: bool
    above_bracket: bool
    probes: list
    chunk_size: Optional[int] = None

    def describe(self) -> str:
        if self.below_bracket:
            return f"< {self.qps:g}"
        if self.above_bracket:
            return f">= {self.qps:g}"
        return f"{self.qps:g}"


def find_capacity(passes: Callable[[float], bool], lo: float, hi: float, resolution: float = 0.1,
                  check_hi: bool = True) -> CapacityResult:
    """Bisection for the largest QPS at which ``passes(qps)`` holds.

    ``passes`` should already fold in the seeds, attainment target and p99
    bound. ``lo`` is probed first; if it fails, capacity is reported below
    the bracket. Interior bisection probes number at most
    ceil(log2((hi - lo) / resolution)).
    """
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    if resolution <= 0:
        raise ValueError("resolution must be > 0")
    probes = []

    def probe(q):
        ok = bool(passes(q))
        probes.append((q, ok))
        return ok

    if not probe(lo):
        return CapacityResult(lo, True, False, probes)
    if check_hi and probe(hi):
        return CapacityResult(hi, False, True, probes)
    good, bad = lo, hi
    while bad - good > resolution:
        mid = (good + bad) / 2.0
        if probe(mid):
            good = mid
        else:
            bad = mid
    return CapacityResult(good, False, False, probes)


def meets_slo(summary: Summary, slo_tbt: float, target_attainment: float = 0.99,
              max_median_delay: Optional[float] = None) -> bool:
    """Attainment and p99 TBT targets, plus an optional bound on median scheduling delay (overload guard)."""
    ok = summary.attainment >= target_attainment and summary.p99_tbt <= slo_tbt
    if max_median_delay is not None:
        ok = ok and summary.median_sched_delay <= max_median_delay
    return ok


# LCU ------------------------------------------------------------------------


def lcu_point(hw: HardwareProfile, slo: float, ctx: float, plen: int, n_max: int = 256,
              prefill_ctx_sum: int = 0) -> tuple[int, float]:
    """Largest decode count whose batch stays within ``slo``, and tokens per ms there."""

    def lat(d):
        return batch_latency(BatchShape(plen, d, float(ctx), prefill_ctx_sum), hw)

    if plen == 0:
        if lat(1) > slo:
            return 0, 0.0
    elif lat(0) > slo:
        return 0, 0.0
    lo, hi = 0, n_max
    if lat(hi) <= slo:
        best = hi
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if lat(mid) <= slo:
                lo = mid
            else:
                hi = mid
        best = lo
    if plen + best == 0:
        return 0, 0.0
    return best, (plen + best) / lat(best)


# export -----------------------------------------------------------------------


def write_jsonl(result, path, summary: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        for r in result.requests:
            fh.write(json.dumps(r.to_dict()) + "\n")
        if summary is not None:
            fh.write(json.dumps({"summary": summary}) + "\n")


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        with open(path, "w") as fh:
            fh.write("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def bucketed_goodput(records: Sequence, outs: Sequence[RequestOutcome], bucket_ms: float, horizon_ms: float
                     ) -> list[tuple[float, int, float]]:
    """(bucket start ms, good tokens, goodput tok/s) per bucket.

    Tokens of SLO-meeting requests are attributed to the bucket of their
    emission time; emissions past the horizon land in the last bucket.
    """
    if bucket_ms <= 0:
        raise ValueError("bucket must be > 0")
    n = max(1, math.ceil(horizon_ms / bucket_ms - 1e-9))
    counts = [0] * n
    good = {o.id for o in outs if o.met_slo}
    for r in records:
        if r.id not in good:
            continue
        for t in r.token_times:
            counts[min(int(t // bucket_ms), n - 1)] += 1
    return [(i * bucket_ms, c, c / (bucket_ms / 1000.0)) for i, c in enumerate(counts)]

"""Building simulators from config and the experiment drivers behind the CLI."""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

from splitserve.config import ExperimentConfig, SystemConfig
from splitserve.costmodel import HardwareProfile
from splitserve.domain import Request, split_at, split_request
from splitserve.engine import ClusterConfig, RunResult, Simulator, Stopped
from splitserve.global_scheduler import ApsRouter, ColocRouter, DisaggRouter, ForcedRouter, search_split
from splitserve.local_scheduler import ApsPolicy, ChunkedPolicy, DisaggPolicy
from splitserve.metrics import (CapacityResult, Summary, bucketed_goodput, find_capacity, meets_slo, outcomes,
                                summarize)
from splitserve.predictor import Predictor, PredictorConfig
from splitserve.profile_table import ProfileTable
from splitserve.workload import ShapeSpec, WorkloadSpec, generate, load_trace, make_rng


def make_table(hw: HardwareProfile, system: SystemConfig, cluster: ClusterConfig) -> ProfileTable:
    if system.seed_table:
        return ProfileTable.seeded(hw, system.table, max_dnum=cluster.n_max)
    return ProfileTable(system.table)


def build_simulator(hw: HardwareProfile, cluster: ClusterConfig, system: SystemConfig, seed: int = 0,
                    keep_decisions: bool = False) -> Simulator:
    n = cluster.n_instances
    slo = system.batch_target_ms
    local = system.local_policy
    n_prefill = system.n_prefill if system.n_prefill is not None else max(1, n // 2)
    if local == "aps":
        policies = [ApsPolicy(make_table(hw, system, cluster), slo, cluster.n_max, system.learn,
                              system.deadline_aware) for _ in range(n)]
    elif local == "chunked":
        policies = [ChunkedPolicy(system.chunk_size, cluster.n_max) for _ in range(n)]
    else:
        policies = []
        for i in range(n):
            if i < n_prefill:
                table = make_table(hw, system, cluster) if system.prefill_cap is None else None
                policies.append(DisaggPolicy("prefill", system.prefill_cap, table, slo, cluster.n_max, system.learn))
            else:
                policies.append(DisaggPolicy("decode", n_max=cluster.n_max))
    pcfg = PredictorConfig(cluster.transfer_mode, cluster.transfer_chunk)
    if system.policy == "aps":
        router = ApsRouter(Predictor(hw, pcfg), n, system.scheduler, keep_decisions)
    elif system.policy == "coloc":
        router = ColocRouter(n)
    elif system.policy == "disagg":
        router = DisaggRouter(n, n_prefill)
    else:
        pred = Predictor(hw, pcfg) if system.orientation == "predicted" else None
        phi = system.forced_phi
        if isinstance(phi, str) and phi not in ("disagg", "alternate"):
            phi = float(phi)
        router = ForcedRouter(n, phi=phi, s=system.forced_s, orientation=system.orientation, predictor=pred)
    return Simulator(hw, cluster, policies, router, seed)


def run_requests(cfg: ExperimentConfig, requests: list, system: Optional[SystemConfig] = None,
                 cluster: Optional[ClusterConfig] = None, keep_decisions: bool = False) -> tuple[RunResult, Simulator]:
    sim = build_simulator(cfg.hardware, cluster or cfg.cluster, system or cfg.system, cfg.seed, keep_decisions)
    return sim.run(requests), sim


def summary_of(cfg: ExperimentConfig, result: RunResult, ttft_slo: Optional[float] = None) -> Summary:
    return summarize(result, cfg.system.slo_tbt_ms, ttft_slo if ttft_slo is not None else cfg.metrics.ttft_slo_ms)


def run_config(cfg: ExperimentConfig) -> tuple[RunResult, Summary]:
    reqs = generate(cfg.workload)
    result, _ = run_requests(cfg, reqs)
    return result, summary_of(cfg, result)


def policy_system(system: SystemConfig, policy: str) -> SystemConfig:
    """System config for a named policy: aps, coloc, disagg (local policy follows the name)."""
    return replace(system, policy=policy, local=None)


# split sweep ------------------------------------------------------------------


def sweep_points(length: int, step: int, include=()) -> list[int]:
    pts = set(range(0, length + 1, step)) | {length} | {int(x) for x in include if 0 <= int(x) <= length}
    return sorted(pts)


def split_sweep(cfg: ExperimentConfig, prompt_len: int, decode_len: int, points: Optional[list] = None,
                with_aps: bool = True) -> list[dict]:
    """Throughput for each forced split position on a saturating stream of identical requests.

    Alpha always runs on instance 0. The workload's predictor margin is
    zeroed so the planned length equals the actual length.
    """
    wl = replace(cfg.workload, kind="synthetic", shape=None, preset=None, rate_qps=cfg.sweep.rate_qps,
                 duration_s=None, num_requests=cfg.sweep.num_requests,
                 predictor=replace(cfg.workload.predictor, mode="oracle", margin=0))
    wl = replace(wl, shape=ShapeSpec(prompt_len, decode_len))
    reqs = generate(wl)
    L = prompt_len + decode_len
    pts = points if points is not None else sweep_points(L, cfg.sweep.step, list(cfg.sweep.include) + [prompt_len])
    cluster = replace(cfg.cluster, n_instances=2)
    rows = []
    for s in pts:
        system = replace(cfg.system, policy="forced", forced_s=int(s), forced_phi=None, orientation="fixed")
        res, _ = run_requests(cfg, reqs, system, cluster)
        rows.append(_sweep_row("forced", s, L, res, cfg))
    if with_aps:
        system = replace(cfg.system, policy="aps")
        res, _ = run_requests(cfg, reqs, system, cluster)
        rows.append(_sweep_row("aps", None, L, res, cfg))
    return rows


def steady_throughput(res: RunResult, warmup_ms: float) -> float:
    """Output tokens per second emitted between first arrival + warmup and the last arrival."""
    t0 = min(r.arrival for r in res.requests) + warmup_ms
    t1 = max(r.arrival for r in res.requests)
    if not t1 > t0:
        raise ValueError("sweep window is empty: raise num_requests or lower warmup_s")
    n = sum(1 for r in res.requests for t in r.token_times if t0 <= t < t1)
    return n / ((t1 - t0) / 1000.0)


def _sweep_row(kind, s, L, res: RunResult, cfg: ExperimentConfig) -> dict:
    summ = summary_of(cfg, res)
    mean_s = sum(r.s for r in res.requests) / len(res.requests)
    return {
        "kind": kind,
        "s": s if s is not None else round(mean_s, 1),
        "phi": (s / L) if s is not None else round(mean_s / L, 4),
        "tok_per_s": steady_throughput(res, cfg.sweep.warmup_s * 1000.0),
        "p99_tbt": summ.p99_tbt,
        "attainment": summ.attainment,
    }


# capacity -------------------------------------------------------------------


class SloMonitor:
    """Stops a run once it can no longer pass the capacity criterion.

    A request has failed once a token gap exceeded the TBT SLO, or once it
    has waited longer than the TTFT bound (if any) without a first token.
    The run is also lost once more than half the requests have waited
    longer than the median scheduling-delay bound.
    """

    def __init__(self, n_requests: int, slo_tbt: float, ttft_slo: Optional[float], target: float,
                 max_median_delay: Optional[float] = None):
        self.allowed = int((1.0 - target) * n_requests + 1e-9)
        self.n = n_requests
        self.slo = slo_tbt
        self.ttft_slo = ttft_slo
        self.max_delay = max_median_delay
        self.failed: set = set()
        self.late: set = set()
        self._seen: dict = {}

    def __call__(self, sim) -> bool:
        now = sim.now
        if self.max_delay is not None:
            for rid, rs in sim.states.items():
                if rid not in self.late:
                    start = rs.first_run if rs.first_run is not None else now
                    if start - rs.req.arrival > self.max_delay:
                        self.late.add(rid)
            for req in sim.backlog:
                if now - req.arrival > self.max_delay:
                    self.late.add(req.id)
            if 2 * len(self.late) >= self.n:
                return True
        for rid, rs in sim.states.items():
            if rid in self.failed:
                continue
            times = rs.token_times
            arrival = rs.req.arrival
            if self.ttft_slo is not None:
                first = times[0] if times else now
                if first - arrival > self.ttft_slo:
                    self.failed.add(rid)
                    continue
            k = self._seen.get(rid, 0)
            for i in range(max(k, 1), len(times)):
                if times[i] - times[i - 1] > self.slo:
                    self.failed.add(rid)
                    break
            self._seen[rid] = len(times)
        if self.ttft_slo is not None:
            for req in sim.backlog:
                if now - req.arrival > self.ttft_slo:
                    self.failed.add(req.id)
        return len(self.failed) > self.allowed


def capacity_probe(cfg: ExperimentConfig, system: SystemConfig, qps: float, seed: int,
                   workload: Optional[WorkloadSpec] = None, early_stop: bool = True) -> Optional[Summary]:
    """One capacity probe. Returns None when the run was stopped early as a certain failure."""
    wl = replace(workload or cfg.workload, rate_qps=qps, seed=seed, duration_s=cfg.capacity.duration_s,
                 num_requests=None)
    reqs = generate(wl)
    sim = build_simulator(cfg.hardware, cfg.cluster, system, cfg.seed)
    monitor = None
    if early_stop:
        monitor = SloMonitor(len(reqs), cfg.system.slo_tbt_ms, cfg.capacity.ttft_slo_ms,
                             cfg.metrics.target_attainment, cfg.capacity.max_median_sched_delay_ms)
    try:
        res = sim.run(reqs, monitor=monitor)
    except Stopped:
        return None
    return summary_of(cfg, res, cfg.capacity.ttft_slo_ms)


def find_policy_capacity(cfg: ExperimentConfig, policy: str, workload: Optional[WorkloadSpec] = None,
                         lo: Optional[float] = None, hi: Optional[float] = None, log=None) -> CapacityResult:
    system = policy_system(cfg.system, policy)
    cap = cfg.capacity

    lo = lo if lo is not None else cap.lo
    hi = hi if hi is not None else cap.hi
    if policy == "coloc" and cap.coloc_chunks:
        # the colocation baseline gets its best tuned chunk size; later chunk sizes only
        # search above the best capacity so far, so a loser costs one failing probe
        best = None
        for c in cap.coloc_chunks:
            start = lo
            if best is not None and not best.below_bracket:
                if best.above_bracket:
                    break
                start = best.qps + cap.resolution
            res = _capacity_search(cfg, replace(system, chunk_size=int(c)), f"coloc[{c}]", workload, start, hi,
                                   log) if start < hi else None
            if res is None:
                continue
            res.chunk_size = int(c)
            if best is None or _cap_key(res) > _cap_key(best):
                best = res
        return best
    return _capacity_search(cfg, system, policy, workload, lo, hi, log)


def _cap_key(res: CapacityResult) -> float:
    return -1.0 if res.below_bracket else res.qps


def _capacity_search(cfg, system, label, workload, lo, hi, log) -> CapacityResult:
    cap = cfg.capacity

    def passes(q):
        for seed in cap.seeds:
            summ = capacity_probe(cfg, system, q, seed, workload, cap.early_stop)
            ok = summ is not None and meets_slo(summ, cfg.system.slo_tbt_ms, cfg.metrics.target_attainment,
                                                cap.max_median_sched_delay_ms)
            if log is not None:
                detail = "stopped early" if summ is None else (
                    f"attainment={summ.attainment:.4f} p99_tbt={summ.p99_tbt:.1f} "
                    f"median_delay={summ.median_sched_delay:.0f} p99_ttft={summ.p99_ttft:.0f}")
                log(f"{label} qps={q:.3f} seed={seed} {detail} -> {'ok' if ok else 'fail'}")
            if not ok:
                return False
        return True

    return find_capacity(passes, lo, hi, cap.resolution)


# ablation and replay ------------------------------------------------------------


def ablate(cfg: ExperimentConfig, requests: Optional[list] = None) -> list[dict]:
    """APS against two ablations: fixed-chunk local batching, and whole-cache KV transfer."""
    reqs = requests if requests is not None else generate(cfg.workload)
    variants = [
        ("aps", cfg.system, cfg.cluster),
        ("aps_fixed_chunk", replace(cfg.system, local="chunked"), cfg.cluster),
        ("aps_whole_cache", cfg.system, replace(cfg.cluster, transfer_mode="whole")),
    ]
    rows = []
    for name, system, cluster in variants:
        res, _ = run_requests(cfg, reqs, system, cluster)
        summ = summary_of(cfg, res)
        rows.append({"variant": name, "attainment": summ.attainment, "p99_tbt": summ.p99_tbt,
                     "goodput": summ.goodput, "transfer_wait_ms": res.total_transfer_wait,
                     "transfer_tokens": res.transfer_tokens})
    return rows


def replay(cfg: ExperimentConfig, trace_path: str, bucket_min: float, policies=("aps", "disagg", "coloc"),
           horizon_ms: Optional[float] = None) -> list[dict]:
    reqs = load_trace(trace_path, cfg.workload.time_scale, cfg.workload.predictor, cfg.seed, cfg.system.slo_tbt_ms)
    if horizon_ms is None:
        horizon_ms = max((r.arrival for r in reqs), default=0.0)
    bucket_ms = bucket_min * 60_000.0
    rows = []
    for pol in policies:
        res, _ = run_requests(cfg, reqs, policy_system(cfg.system, pol))
        outs = outcomes(res, cfg.system.slo_tbt_ms, cfg.metrics.ttft_slo_ms)
        for start, tokens, gp in bucketed_goodput(res.requests, outs, bucket_ms, max(horizon_ms, bucket_ms)):
            rows.append({"policy": pol, "bucket_start_min": start / 60_000.0, "good_tokens": tokens, "goodput": gp})
    return rows


# predictor accuracy ---------------------------------------------------------------


def predictor_accuracy(cfg: ExperimentConfig, n_snapshots: int = 100, seed: int = 0) -> list[dict]:
    """Predicted against live drain time of each instance, from snapshots with no later arrivals.

    Each sample runs a prefix of the workload; once the last request of the
    prefix is admitted, both instances are snapshotted and replayed by the
    predictor (noise off, oracle lengths). The live run then continues to
    completion and the remaining work time of each instance is compared.
    """
    wl = replace(cfg.workload, predictor=replace(cfg.workload.predictor, mode="oracle", margin=0), seed=seed)
    reqs = generate(wl)
    cluster = replace(cfg.cluster, n_instances=2)
    hw = replace(cfg.hardware, noise_sigma=0.0)
    rows = []
    stride = max(1, len(reqs) // (n_snapshots + 1))
    for i in range(n_snapshots):
        k = min(len(reqs), 1 + (i + 1) * stride)
        sub = reqs[:k]
        sim = build_simulator(hw, cluster, cfg.system, cfg.seed)
        router = sim.router
        pred = Predictor(hw, PredictorConfig(cluster.transfer_mode, cluster.transfer_chunk))
        snap: dict = {}

        def monitor(s, last=sub[-1]):
            if not snap and last.id in s.states:
                s0, s1 = s.snapshot(0), s.snapshot(1)
                r0, r1 = pred.base(s0), pred.base(s1)
                if hasattr(router, "_resolve_waiting"):
                    router.predictor = pred
                    router._resolve_waiting(s0, s1, r0, r1)
                    r0, r1 = pred.base(s0), pred.base(s1)
                snap.update(now=s.now, pred=(r0.clock, r1.clock))
            return False

        res = sim.run(sub, monitor=monitor, monitor_every=1)
        now = snap["now"]
        for j, inst in enumerate(res.instances):
            live = max(inst.clock, now)
            p = max(snap["pred"][j], now)
            if live - now <= 0 and p - now <= 0:
                continue
            rows.append({"sample": i, "instance": j, "requests": k, "now": now, "live_ms": live - now,
                         "pred_ms": p - now, "rel_err": abs(p - live) / max(live - now, 1e-9)})
    return rows


# split search against a grid oracle ---------------------------------------------------


def search_vs_grid(cfg: ExperimentConfig, n_cases: int = 100, seed: int = 0, grid_step: int = 1) -> list[dict]:
    """Searched split against a grid over split points, on loaded instance pairs.

    Loads are snapshots of a live APS run on ``cfg.workload``; each case adds a
    request with random lengths (log-uniform prompt 64..8192, decode 16..2048)
    at the snapshot time. Both sides are scored by predicted pair makespan, and
    throughput is compared as work over remaining makespan.
    """
    rng = make_rng(seed)
    reqs = generate(cfg.workload)
    sim = build_simulator(cfg.hardware, replace(cfg.cluster, n_instances=2), policy_system(cfg.system, "aps"),
                          cfg.seed)
    router = sim.router
    horizon = max(r.arrival for r in reqs)
    marks = sorted(rng.uniform(0.05, 1.0, n_cases) * horizon)
    snaps: list = []

    def monitor(s):
        while len(snaps) < n_cases and s.now >= marks[len(snaps)]:
            s0, s1 = s.snapshot(0), s.snapshot(1)
            r0, r1 = router.predictor.base(s0), router.predictor.base(s1)
            router._resolve_waiting(s0, s1, r0, r1)
            snaps.append((s.now, s0, s1))
        return False

    sim.run(reqs, monitor=monitor, monitor_every=1)
    rows = []
    for i, (now, s0, s1) in enumerate(snaps):
        p = int(round(math.exp(rng.uniform(math.log(64), math.log(8192)))))
        d = int(round(math.exp(rng.uniform(math.log(16), math.log(2048)))))
        view = Request(10 ** 7 + i, now, p, d, d).plan_view()
        pred = Predictor(cfg.hardware, PredictorConfig(cfg.cluster.transfer_mode, cfg.cluster.transfer_chunk))

        def probe(phi):
            a, b = split_request(view, phi)
            t1, t2 = pred.predict_pair(a, b, s0, s1)
            return a.end, t1, t2

        _, s, probes = search_split(view, probe, cfg.system.scheduler)
        chosen = next(pr for pr in probes if pr.s == s).makespan
        L = view.planned_len
        best, best_s = math.inf, None
        for g in sorted(set(range(0, L + 1, grid_step)) | {L}):
            a, b = split_at(view, g)
            m = max(pred.predict_pair(a, b, s0, s1))
            if m < best:
                best, best_s = m, g
        ratio = (best - now) / (chosen - now)
        rows.append({"case": i, "prompt": p, "decode": d, "now": now, "s": s, "grid_s": best_s,
                     "probes": len(probes), "throughput_ratio": ratio})
    return rows

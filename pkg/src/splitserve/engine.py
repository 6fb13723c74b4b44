"""Discrete-event cluster simulator.

Each instance runs one batch at a time. Batch duration comes from the cost
model (optionally with lognormal noise). KV for an alpha micro-request is
shipped to beta's instance in fixed-size chunks as soon as each chunk's
tokens exist; beta joins its instance's queues once tokens 1..s have landed.

One decode pass over a position emits one output token; a pass that only
prefills emits nothing. A request with D output tokens therefore makes D
decode passes.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from splitserve.costmodel import BatchShape, HardwareProfile, batch_latency, noise_factor, transfer_time
from splitserve.domain import ALPHA, BETA, Request, SplitPlan
from splitserve.local_scheduler import Batch, ChunkedPolicy, DisaggPolicy, LocalPolicy, SchedulerQueues, WorkItem
from splitserve.predictor import VirtualState

log = logging.getLogger(__name__)

DELIVERY, TRANSFER_START, BATCH_DONE, ARRIVAL = 0, 1, 2, 3
EVENT_NAMES = {DELIVERY: "chunk_delivered", TRANSFER_START: "transfer_started", BATCH_DONE: "batch_done",
               ARRIVAL: "arrival"}


class InvariantError(RuntimeError):
    pass


class Stopped(Exception):
    """Raised when a run monitor asks the simulation to stop early."""


class DeadlockError(RuntimeError):
    pass


@dataclass
class ClusterConfig:
    n_instances: int = 2
    n_max: int = 256
    transfer_mode: str = "chunked"
    transfer_chunk: int = 256
    flush_on_final: bool = True
    kv_headroom: float = 0.02
    record_batches: bool = False
    handoff_guard_passes: int = 2

    def __post_init__(self):
        if self.handoff_guard_passes < 0:
            raise ValueError("cluster.handoff_guard_passes must be >= 0")
        if self.n_instances < 1:
            raise ValueError("cluster.n_instances must be >= 1")
        if self.n_max < 1:
            raise ValueError("cluster.n_max must be >= 1")
        if self.transfer_mode not in ("chunked", "whole"):
            raise ValueError(f"cluster.transfer_mode must be chunked or whole, got {self.transfer_mode!r}")
        if self.transfer_chunk < 1:
            raise ValueError("cluster.transfer_chunk must be >= 1")


class Event(NamedTuple):
    """Heap entry; tuples order by (time, kind priority, sequence)."""

    time: float
    kind: int
    seq: int
    payload: object


class TransferChannel:
    def __init__(self, src: int, dst: int, chunk_size: int):
        self.src = src
        self.dst = dst
        self.chunk_size = chunk_size
        self.busy_until = 0.0
        self.pending: deque = deque()
        self.chunks = 0
        self.tokens = 0
        self.busy_ms = 0.0

    def push(self, ready_at: float, tokens: int, hw: HardwareProfile) -> tuple[float, float]:
        start = ready_at if ready_at > self.busy_until else self.busy_until
        dur = transfer_time(tokens, hw)
        done = start + dur
        self.busy_until = done
        self.chunks += 1
        self.tokens += tokens
        self.busy_ms += dur
        return start, done


class ReqState:
    """Engine-side bookkeeping for one request; holds the actual decode length."""

    __slots__ = ("req", "plan", "alpha", "beta", "token_times", "alpha_left", "beta_left", "alpha_done",
                 "alpha_last_emit", "beta_live", "beta_cancelled", "pushed", "delivered", "chunks",
                 "deliveries", "beta_start", "done_time", "transfer_wait", "res_a", "res_b", "alpha_kv_freed",
                 "scheduled_at", "release_at", "first_run")

    def __init__(self, req: Request, plan: SplitPlan):
        self.req = req
        self.plan = plan
        self.alpha: Optional[WorkItem] = None
        self.beta: Optional[WorkItem] = None
        self.token_times: list = []
        self.alpha_left = 0
        self.beta_left = 0
        self.alpha_done: Optional[float] = None
        self.alpha_last_emit: Optional[float] = None
        self.beta_live = False
        self.beta_cancelled = False
        self.pushed = 0
        self.delivered = 0
        self.chunks: list = []
        self.deliveries: list = []
        self.beta_start: Optional[float] = None
        self.done_time: Optional[float] = None
        self.transfer_wait = 0.0
        self.res_a = 0
        self.res_b = 0
        self.alpha_kv_freed = False
        self.scheduled_at = 0.0
        self.first_run: Optional[float] = None
        self.release_at: Optional[float] = None


class Instance:
    def __init__(self, iid: int, policy: LocalPolicy, hw: HardwareProfile):
        self.id = iid
        self.policy = policy
        self.queues = SchedulerQueues()
        self.queues.prefill = deque()
        self.kv_used = 0
        self.kv_peak = 0
        self.reserved = 0
        self.busy = False
        self.current: Optional[Batch] = None
        self.batch_end = 0.0
        self.prev: Optional[Batch] = None
        self.clock = 0.0
        self.busy_ms = 0.0
        self.flops = 0.0
        self.batches = 0
        self.prefill_tokens = 0
        self.decode_tokens = 0
        self.waiting: dict = {}
        self.log: list = []

    def virtual_mode(self) -> tuple[str, int]:
        p = self.policy
        if isinstance(p, ChunkedPolicy):
            return "chunked", p.chunk_size
        if isinstance(p, DisaggPolicy):
            if p.role == "prefill":
                return "prefill", p.cap or 0
            return "aps", 0
        return "aps", 0


@dataclass
class RequestRecord:
    id: int
    arrival: float
    prompt_len: int
    decode_len: int
    predicted_decode: int
    slo_tbt: float
    token_times: list
    s: int
    phi: float
    alpha_instance: int
    beta_instance: int
    transfer_tokens: int
    transfer_wait: float
    beta_cancelled: bool
    scheduled_at: float
    first_run: float = float("nan")
    pushed_tokens: int = 0

    @property
    def sched_delay(self) -> float:
        """Time from arrival until the first batch that carried any of its tokens started."""
        return self.first_run - self.arrival

    @property
    def ttft(self) -> float:
        return self.token_times[0] - self.arrival if self.token_times else float("nan")

    @property
    def completion(self) -> float:
        return self.token_times[-1] if self.token_times else float("nan")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "arrival": self.arrival, "prompt_len": self.prompt_len, "decode_len": self.decode_len,
            "predicted_decode": self.predicted_decode, "slo_tbt": self.slo_tbt, "ttft": self.ttft,
            "s": self.s, "phi": self.phi, "alpha_instance": self.alpha_instance,
            "beta_instance": self.beta_instance, "transfer_tokens": self.transfer_tokens,
            "transfer_wait": self.transfer_wait, "beta_cancelled": self.beta_cancelled, "first_run": self.first_run,
            "token_times": self.token_times,
        }


@dataclass
class InstanceStats:
    id: int
    busy_ms: float
    batches: int
    flops: float
    prefill_tokens: int
    decode_tokens: int
    kv_peak: int
    clock: float = 0.0

    def utilization(self, horizon: float) -> float:
        return self.busy_ms / horizon if horizon > 0 else 0.0

    def mfu(self, horizon: float, hw: HardwareProfile) -> float:
        return self.flops / (hw.flops_per_ms * horizon) if horizon > 0 else 0.0


@dataclass
class RunResult:
    requests: list
    instances: list
    end_time: float
    transfer_chunks: int = 0
    transfer_tokens: int = 0
    decision_ms: list = field(default_factory=list)
    predictor_calls: int = 0
    batch_logs: list = field(default_factory=list)
    event_count: int = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.requests:
            h.update(json.dumps(r.to_dict(), sort_keys=True).encode())
        for s in self.instances:
            h.update(repr((s.id, s.busy_ms, s.batches, s.flops, s.kv_peak)).encode())
        h.update(repr((self.end_time, self.transfer_chunks, self.transfer_tokens)).encode())
        return h.hexdigest()

    @property
    def total_transfer_wait(self) -> float:
        return sum(r.transfer_wait for r in self.requests)


class Simulator:
    """Event loop over instances, transfer channels and a router.

    ``router`` must provide ``schedule(view, sim) -> SplitPlan``.
    ``policies`` holds one LocalPolicy per instance.
    """

    def __init__(self, hw: HardwareProfile, cluster: ClusterConfig, policies: list, router, seed: int = 0):
        if len(policies) != cluster.n_instances:
            raise ValueError(f"expected {cluster.n_instances} policies, got {len(policies)}")
        self.hw = hw
        self.cfg = cluster
        self.router = router
        self.instances = [Instance(i, p, hw) for i, p in enumerate(policies)]
        self.channels: dict = {}
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._mid = 0
        self.states: dict = {}
        self.backlog: deque = deque()
        self._drain = False
        self.decision_ms: list = []
        self.events = 0
        self.capacity = int(hw.hbm_capacity_tokens * (1.0 - cluster.kv_headroom))
        self._min_batch = batch_latency(BatchShape(0, 1, 0.0, 0), hw)

    # events -------------------------------------------------------------

    def _push(self, t: float, kind: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, Event(t, kind, self._seq, payload))

    def run(self, requests: list, monitor=None, monitor_every: int = 2000) -> RunResult:
        """Simulate until quiescent.

        ``monitor(sim) -> bool`` is called every ``monitor_every`` events;
        returning True stops the run with ``Stopped``.
        """
        ids = set()
        for r in requests:
            if r.id in ids:
                raise ValueError(f"duplicate request id {r.id}")
            ids.add(r.id)
            if r.planned_len > self.capacity or r.total_len > self.capacity:
                raise ValueError(f"request {r.id} longer than instance KV capacity")
            self._push(r.arrival, ARRIVAL, r)
        last = 0.0
        while self._heap:
            t, kind, _, payload = heapq.heappop(self._heap)
            if t < last:
                raise InvariantError(f"clock went backwards: {t} < {last}")
            last = t
            self.now = t
            self.events += 1
            if kind == BATCH_DONE:
                self._on_batch_done(payload)
            elif kind == DELIVERY:
                self._on_delivery(*payload)
            elif kind == ARRIVAL:
                self._on_arrival(payload)
            elif kind == TRANSFER_START:
                pass
            if self._drain:
                self._drain = False
                self._drain_backlog()
            if monitor is not None and self.events % monitor_every == 0 and monitor(self):
                raise Stopped(f"monitor stopped the run at t={t:.1f} ms")
        self._check_quiescent()
        return self._result(requests)

    def _check_quiescent(self) -> None:
        stuck = [rs for rs in self.states.values() if rs.done_time is None]
        if self.backlog or stuck:
            detail = [f"request {rs.req.id}: s={rs.plan.s} alpha_left={rs.alpha_left} beta_left={rs.beta_left} "
                      f"delivered={rs.delivered}" for rs in stuck[:10]]
            detail += [f"backlog request {r.id}" for r in list(self.backlog)[:10]]
            raise DeadlockError("no runnable event while work remains:\n  " + "\n  ".join(detail))

    # admission ----------------------------------------------------------

    def _on_arrival(self, req: Request) -> None:
        if self.backlog:
            self.backlog.append(req)
            self._drain_backlog()
            return
        if not self._admit(req):
            self.backlog.append(req)

    def _drain_backlog(self) -> None:
        while self.backlog:
            if not self._admit(self.backlog[0]):
                return
            self.backlog.popleft()

    def _admit(self, req: Request) -> bool:
        t0 = time.perf_counter()
        plan = self.router.schedule(req.plan_view(), self)
        self.decision_ms.append((time.perf_counter() - t0) * 1e3)
        return self.commit(req, plan)

    def footprint(self, req, plan: SplitPlan) -> tuple[int, int]:
        lp = req.planned_len
        beta = plan.s < lp
        alpha = plan.s > 0
        res_a = (plan.s if beta else lp) if alpha else 0
        res_b = lp if beta else 0
        return res_a, res_b

    def kv_room(self, instance: int) -> int:
        """Tokens of KV reservation still available on an instance."""
        return self.capacity - self.instances[instance].reserved

    def fits(self, req, plan: SplitPlan) -> bool:
        res_a, res_b = self.footprint(req, plan)
        return res_a <= self.kv_room(plan.alpha_instance) and res_b <= self.kv_room(plan.beta_instance)

    def commit(self, req: Request, plan: SplitPlan) -> bool:
        """Enqueue both halves of a plan, or neither if KV reservations do not fit."""
        res_a, res_b = self.footprint(req, plan)
        A = self.instances[plan.alpha_instance]
        B = self.instances[plan.beta_instance]
        if plan.alpha_instance == plan.beta_instance and res_a and res_b:
            raise ValueError("alpha and beta must go to different instances")
        if A.reserved + res_a > self.capacity or B.reserved + res_b > self.capacity:
            return False
        rs = ReqState(req, plan)
        rs.scheduled_at = self.now
        self.states[req.id] = rs
        P = req.prompt_len
        lp = req.planned_len
        lt = req.total_len
        s = plan.s
        beta_planned = s < lp
        A.reserved += res_a
        B.reserved += res_b
        rs.res_a, rs.res_b = res_a, res_b
        if s > 0:
            self._mid += 1
            if beta_planned:
                true_dec = max(0, min(s, lt) - P)
                plan_dec = max(0, s - P)
            else:
                true_dec = lt - P
                plan_dec = lp - P
            it = WorkItem(self._mid, req.id, ALPHA, min(s, P), 0, plan_dec, self._mid, None, rs)
            rs.alpha = it
            rs.alpha_left = true_dec
            A.queues.add(it)
            self._kick(A)
        if beta_planned:
            self._mid += 1
            true_dec = lt - max(s, P)
            it = WorkItem(self._mid, req.id, BETA, max(0, P - s), s, lp - max(s, P), self._mid, None, rs)
            rs.beta = it
            rs.beta_left = true_dec
            if s == 0:
                rs.beta_live = True
                B.queues.add(it)
                self._kick(B)
            else:
                B.waiting[it.mid] = it
        return True

    # execution ----------------------------------------------------------

    def _kick(self, inst: Instance) -> None:
        if inst.busy:
            return
        prev = inst.prev
        inst.prev = None
        batch = inst.policy.compose(inst.queues, self.now, prev, self.capacity - inst.kv_used)
        if batch is None:
            return
        self._execute(inst, batch)

    def _execute(self, inst: Instance, batch: Batch) -> None:
        hw = self.hw
        lat = batch_latency(batch.shape, hw)
        if hw.noise_sigma > 0:
            lat *= noise_factor(self.rng, hw.noise_sigma)
        batch.composed_at = self.now
        batch.measured_time = lat
        inst.busy = True
        inst.current = batch
        inst.batch_end = self.now + lat
        inst.busy_ms += lat
        inst.batches += 1
        for it, _ in batch.prefill_grants:
            rs = it.payload
            if rs.first_run is None:
                rs.first_run = self.now
        sh = batch.shape
        inst.flops += hw.c_lin * (sh.plen + sh.dnum) + hw.c_attn * (sh.prefill_ctx_sum + sh.plen * sh.plen / 2.0)
        if self.cfg.record_batches:
            inst.log.append((self.now, lat, sh, tuple(batch.decode_ids), tuple(batch.grant_ids)))
        guard = self.cfg.handoff_guard_passes
        flush = self.cfg.transfer_mode == "chunked" and self.cfg.flush_on_final
        if guard or flush:
            for it in batch.decode_entries:
                if it.role != ALPHA:
                    continue
                rs = it.payload
                if rs.beta is None:
                    continue
                after = rs.plan.s - it.ctx - 1  # alpha passes left after this one
                if guard and after < guard and not rs.beta_cancelled:
                    deadline = inst.batch_end + after * self._min_batch + rs.req.slo_tbt
                    self.instances[rs.plan.beta_instance].queues.guards[rs.beta.mid] = deadline
                if flush and after == 0 and rs.pushed < it.ctx:
                    self._push_chunk(rs, rs.pushed, it.ctx, self.now)
        self._push(inst.batch_end, BATCH_DONE, inst)

    def _on_batch_done(self, inst: Instance) -> None:
        batch = inst.current
        inst.busy = False
        inst.current = None
        inst.prev = batch
        inst.clock = self.now
        now = self.now
        q = inst.queues
        touched = []
        for it in batch.decode_entries:
            rs = it.payload
            it.ctx += 1
            it.planned_left -= 1
            it.last_emit = now
            inst.kv_used += 1
            inst.decode_tokens += 1
            rs.token_times.append(now)
            if it.role == ALPHA:
                rs.alpha_left -= 1
                rs.alpha_last_emit = now
                left = rs.alpha_left
                if rs.beta is not None:
                    touched.append(rs)
            else:
                rs.beta_left -= 1
                left = rs.beta_left
            if left == 0:
                del q.decode[it.mid]
                self._finish_item(inst, it)
        for it, g in batch.prefill_grants:
            it.prefill_left -= g
            it.ctx += g
            inst.kv_used += g
            inst.prefill_tokens += g
            rs = it.payload
            if it.role == ALPHA and rs.beta is not None:
                touched.append(rs)
        while q.prefill and q.prefill[0].prefill_left == 0:
            it = q.prefill.popleft()
            rs = it.payload
            left = rs.alpha_left if it.role == ALPHA else rs.beta_left
            if left > 0:
                q.decode[it.mid] = it
            else:
                self._finish_item(inst, it)
        if inst.kv_used > self.hw.hbm_capacity_tokens:
            raise InvariantError(f"instance {inst.id} KV overflow: {inst.kv_used}")
        if inst.kv_used > inst.kv_peak:
            inst.kv_peak = inst.kv_used
        if self.cfg.transfer_mode == "chunked":
            for rs in touched:
                self._advance_chunks(rs, now)
        self._kick(inst)

    def _finish_item(self, inst: Instance, it: WorkItem) -> None:
        rs = it.payload
        now = self.now
        if it.role == ALPHA:
            rs.alpha_done = now
            if rs.beta is None:
                self._complete(rs)
                self._free_alpha(rs)
                return
            if rs.beta_left <= 0:
                # the request ended inside alpha's span: beta never runs
                self._cancel_beta(rs)
                self._complete(rs)
                self._free_alpha(rs)
                return
            if self.cfg.transfer_mode == "whole":
                self._push_chunk(rs, 0, rs.plan.s, now)
        else:
            self._complete(rs)
            B = self.instances[rs.plan.beta_instance]
            B.kv_used -= it.ctx
            B.reserved -= rs.res_b
            self._drain = True

    def _complete(self, rs: ReqState) -> None:
        rs.done_time = self.now
        if len(rs.token_times) != rs.req.decode_len:
            raise InvariantError(f"request {rs.req.id} emitted {len(rs.token_times)} tokens, "
                                 f"expected {rs.req.decode_len}")

    def _free_alpha(self, rs: ReqState) -> None:
        if rs.alpha_kv_freed:
            return
        rs.alpha_kv_freed = True
        A = self.instances[rs.plan.alpha_instance]
        A.kv_used -= rs.alpha.ctx
        A.reserved -= rs.res_a
        self._drain = True

    def _cancel_beta(self, rs: ReqState) -> None:
        rs.beta_cancelled = True
        B = self.instances[rs.plan.beta_instance]
        B.waiting.pop(rs.beta.mid, None)
        B.queues.guards.pop(rs.beta.mid, None)
        B.kv_used -= rs.delivered
        B.reserved -= rs.res_b
        self._drain = True

    # transfer -----------------------------------------------------------

    def _channel(self, src: int, dst: int) -> TransferChannel:
        ch = self.channels.get((src, dst))
        if ch is None:
            ch = TransferChannel(src, dst, self.cfg.transfer_chunk)
            self.channels[(src, dst)] = ch
        return ch

    def _advance_chunks(self, rs: ReqState, now: float) -> None:
        if rs.beta_cancelled:
            return
        s = rs.plan.s
        progress = rs.alpha.ctx
        c = self.cfg.transfer_chunk
        limit = progress if progress < s else s
        while rs.pushed + c <= limit:
            self._push_chunk(rs, rs.pushed, rs.pushed + c, now)
        if progress >= s and rs.pushed < s:
            self._push_chunk(rs, rs.pushed, s, now)

    def _push_chunk(self, rs: ReqState, lo: int, hi: int, ready: float) -> None:
        if lo != rs.pushed or hi <= lo or hi > rs.plan.s:
            raise InvariantError(f"request {rs.req.id}: non-contiguous chunk [{lo},{hi}) after {rs.pushed}")
        if hi > rs.alpha.ctx:
            raise InvariantError(f"request {rs.req.id}: chunk [{lo},{hi}) pushed before its KV exists")
        rs.pushed = hi
        rs.chunks.append((lo, hi, ready))
        ch = self._channel(rs.plan.alpha_instance, rs.plan.beta_instance)
        start, done = ch.push(ready, hi - lo, self.hw)
        if hi == rs.plan.s:
            rs.release_at = done
        self._push(start, TRANSFER_START, (rs, lo, hi))
        self._push(done, DELIVERY, (rs, lo, hi))

    def _on_delivery(self, rs: ReqState, lo: int, hi: int) -> None:
        if rs.beta_cancelled:
            return
        if lo != rs.delivered:
            raise InvariantError(f"request {rs.req.id}: chunk [{lo},{hi}) delivered out of order")
        rs.delivered = hi
        rs.deliveries.append(self.now)
        B = self.instances[rs.plan.beta_instance]
        B.kv_used += hi - lo
        if B.kv_used > B.kv_peak:
            B.kv_peak = B.kv_used
        if hi < rs.plan.s:
            return
        self._free_alpha(rs)
        it = rs.beta
        B.waiting.pop(it.mid, None)
        rs.beta_live = True
        rs.beta_start = self.now
        rs.transfer_wait = max(0.0, self.now - rs.alpha_done)
        it.last_emit = rs.alpha_last_emit
        B.queues.add_handoff(it)
        self._kick(B)

    # views for the global scheduler --------------------------------------

    def snapshot(self, iid: int, slo: float = 100.0) -> VirtualState:
        """Planning-view copy of an instance, advanced past its in-flight batch."""
        inst = self.instances[iid]
        copies = {}

        def cp(it):
            c = WorkItem(it.mid, it.rid, it.role, it.prefill_left, it.ctx, it.planned_left, it.seq, it.last_emit)
            copies[it.mid] = c
            return c

        prefill = [cp(it) for it in inst.queues.prefill]
        decode = [cp(it) for it in inst.queues.decode.values()]
        for c in decode:
            # still running past its predicted end: at least one more pass
            if c.planned_left < 1:
                c.planned_left = 1
        prev = None
        clock = self.now
        if inst.busy:
            b = inst.current
            clock = inst.batch_end
            prev = (b.shape, b.measured_time)
            for it in b.decode_entries:
                c = copies[it.mid]
                c.ctx += 1
                c.planned_left -= 1
            finished_prefill = []
            for it, g in b.prefill_grants:
                c = copies[it.mid]
                c.prefill_left -= g
                c.ctx += g
                if c.prefill_left == 0:
                    finished_prefill.append(c)
            prefill = [c for c in prefill if c.prefill_left > 0]
            decode = [c for c in decode if c.planned_left > 0]
            decode += [c for c in finished_prefill if c.planned_left > 0]
        waiting = []
        pending_alpha = {}
        for it in inst.waiting.values():
            rs = it.payload
            waiting.append((cp(it), rs.release_at))
            if rs.release_at is None:
                pending_alpha[it.mid] = (rs.alpha.mid, self._owed_tail(rs))
        pol = inst.policy
        mode, chunk = inst.virtual_mode()
        table = getattr(pol, "table", None)
        return VirtualState(
            instance=iid, clock=clock, prefill=prefill, decode=decode, waiting=waiting, table=table, prev=prev,
            slo=getattr(pol, "slo", slo), n_max=getattr(pol, "n_max", self.cfg.n_max), mode=mode,
            chunk_size=chunk, learn=getattr(pol, "learn", False) and table is not None,
            pending_alpha=pending_alpha)

    def _owed_tail(self, rs: ReqState) -> int:
        """KV tokens alpha will still owe when its last pass ends."""
        s = rs.plan.s
        if self.cfg.transfer_mode == "whole":
            return s
        if s > rs.req.prompt_len:
            return 1 if self.cfg.flush_on_final else s - (s - 1) // self.cfg.transfer_chunk * self.cfg.transfer_chunk
        return min(s, self.cfg.transfer_chunk)

    def waiting_alpha(self, iid: int) -> list:
        """(beta item mid, alpha mid, alpha instance) for betas on ``iid`` whose alpha is still running."""
        out = []
        for it in self.instances[iid].waiting.values():
            rs = it.payload
            if rs.alpha_done is None:
                out.append((it.mid, rs.alpha.mid, rs.plan.alpha_instance))
        return out

    # results ------------------------------------------------------------

    def _result(self, requests: list) -> RunResult:
        recs = []
        for r in requests:
            rs = self.states[r.id]
            p = rs.plan
            recs.append(RequestRecord(
                r.id, r.arrival, r.prompt_len, r.decode_len, r.predicted_decode, r.slo_tbt, rs.token_times, p.s, p.phi,
                p.alpha_instance, p.beta_instance, rs.delivered, rs.transfer_wait, rs.beta_cancelled, rs.scheduled_at,
                rs.first_run, rs.pushed))
        end = max((rs.done_time for rs in self.states.values()), default=0.0)
        stats = [InstanceStats(i.id, i.busy_ms, i.batches, i.flops, i.prefill_tokens, i.decode_tokens, i.kv_peak,
                               i.clock) for i in self.instances]
        res = RunResult(recs, stats, end)
        res.transfer_chunks = sum(c.chunks for c in self.channels.values())
        res.transfer_tokens = sum(c.tokens for c in self.channels.values())
        res.decision_ms = list(self.decision_ms)
        res.predictor_calls = getattr(getattr(self.router, "predictor", None), "calls", 0)
        res.event_count = self.events
        if self.cfg.record_batches:
            res.batch_logs = [list(i.log) for i in self.instances]
        return res


def audit(result: RunResult) -> list[str]:
    """Check a finished run's records; returns a list of violations (empty when clean).

    Covers token conservation, split reassembly, append-only KV transfer and
    per-instance clock monotonicity (the latter only when batches were recorded).
    """
    bad = []
    pushed = 0
    for r in result.requests:
        tt = r.token_times
        if len(tt) != r.decode_len:
            bad.append(f"request {r.id}: {len(tt)} tokens, expected {r.decode_len}")
        if any(b < a for a, b in zip(tt, tt[1:])):
            bad.append(f"request {r.id}: token times go backwards")
        if tt and tt[0] <= r.arrival:
            bad.append(f"request {r.id}: first token at {tt[0]} not after arrival {r.arrival}")
        planned = r.prompt_len + r.predicted_decode
        split = 0 < r.s < planned
        if not split and r.pushed_tokens:
            bad.append(f"request {r.id}: unsplit request shipped {r.pushed_tokens} KV tokens")
        if r.pushed_tokens > r.s or r.transfer_tokens > r.pushed_tokens:
            bad.append(f"request {r.id}: shipped {r.pushed_tokens} tokens, delivered {r.transfer_tokens}, s={r.s}")
        if split and not r.beta_cancelled and r.transfer_tokens != r.s:
            bad.append(f"request {r.id}: beta started with {r.transfer_tokens} of {r.s} KV tokens")
        pushed += r.pushed_tokens
    if pushed != result.transfer_tokens:
        bad.append(f"channels carried {result.transfer_tokens} tokens, requests pushed {pushed}")
    for i, log in enumerate(result.batch_logs):
        for (t0, lat, *_), (t1, *_) in zip(log, log[1:]):
            if t1 < t0 + lat - 1e-9:
                bad.append(f"instance {i}: batch at {t1} overlaps batch ending {t0 + lat}")
                break
    return bad


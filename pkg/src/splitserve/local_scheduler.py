"""Per-instance batch composition: SLO-aware (APS), fixed-chunk colocation, and PD roles."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Optional, Sequence

from splitserve.costmodel import BatchShape
from splitserve.profile_table import ProfileTable

DEFAULT_N_MAX = 256


class WorkItem:
    """A micro-request as the local scheduler sees it.

    ``ctx`` is the number of tokens whose KV already exists on this instance,
    i.e. the prefix for the next prefill token or the context of the next
    decode pass. ``planned_left`` is the planning view of remaining decode
    passes; the engine keeps the actual count elsewhere.
    """

    __slots__ = ("mid", "rid", "role", "prefill_left", "ctx", "planned_left", "last_emit", "seq", "payload")

    def __init__(self, mid: int, rid: int, role: str, prefill_left: int, ctx: int, planned_left: int,
                 seq: int = 0, last_emit: Optional[float] = None, payload=None):
        self.mid = mid
        self.rid = rid
        self.role = role
        self.prefill_left = prefill_left
        self.ctx = ctx
        self.planned_left = planned_left
        self.seq = seq
        self.last_emit = last_emit
        self.payload = payload

    def __repr__(self):
        return (f"WorkItem(mid={self.mid}, rid={self.rid}, role={self.role}, prefill_left={self.prefill_left}, "
                f"ctx={self.ctx}, planned_left={self.planned_left})")


@dataclass
class SchedulerQueues:
    prefill: list = field(default_factory=list)
    decode: dict = field(default_factory=dict)
    fresh: list = field(default_factory=list)
    guards: dict = field(default_factory=dict)  # beta mid -> deadline for its first token

    def empty(self) -> bool:
        return not self.prefill and not self.decode

    def add(self, item: WorkItem) -> None:
        if item.prefill_left > 0:
            self.prefill.append(item)
        else:
            self.decode[item.mid] = item

    def add_handoff(self, item: WorkItem) -> None:
        """Add an item whose first token gap is already running (its TBT clock started elsewhere)."""
        self.guards.pop(item.mid, None)
        self.add(item)
        if item.prefill_left == 0 and item.last_emit is not None:
            self.fresh.append(item)


@dataclass
class Batch:
    decode_entries: list
    prefill_grants: list
    shape: BatchShape
    composed_at: float = 0.0
    measured_time: Optional[float] = None
    budget: Optional[int] = None

    @property
    def decode_ids(self) -> list:
        return [it.mid for it in self.decode_entries]

    @property
    def grant_ids(self) -> list:
        return [(it.mid, t) for it, t in self.prefill_grants]


def grant_fifo(prefill: Sequence, budget: int, kv_room: float = float("inf")) -> tuple[list, int, int]:
    """Grant prefill tokens in arrival order: min(remaining, M) each, until M is spent.

    Returns (grants, plen, prefill_ctx_sum).
    """
    grants = []
    plen = 0
    pcs = 0
    m = budget
    if m > kv_room:
        m = int(kv_room)
    for it in prefill:
        if m <= 0:
            break
        t = it.prefill_left if it.prefill_left < m else m
        grants.append((it, t))
        plen += t
        pcs += t * it.ctx
        m -= t
    return grants, plen, pcs


def take_decodes(decode: dict, n_max: int) -> tuple[list, int]:
    """Decode entries for the next batch, at most ``n_max``.

    When more are waiting than fit, decoders whose token clock is running go
    first, earliest last emission first (a stalled handoff outranks a decoder
    that just emitted); decoders yet to emit their first token follow in
    queue order.
    """
    if len(decode) <= n_max:
        entries = list(decode.values())
    else:
        clocked = [it for it in decode.values() if it.last_emit is not None]
        if len(clocked) >= n_max:
            entries = heapq.nsmallest(n_max, clocked, key=lambda it: it.last_emit)
        else:
            rest = islice((it for it in decode.values() if it.last_emit is None), n_max - len(clocked))
            entries = clocked + list(rest)
    ctx_sum = 0
    for it in entries:
        ctx_sum += it.ctx
    return entries, ctx_sum


def _max_candidate_prefix(prefill: Sequence, bound: int) -> int:
    pmax = 0
    acc = 0
    for it in prefill:
        if it.ctx > pmax:
            pmax = it.ctx
        acc += it.prefill_left
        if acc >= bound:
            break
    return pmax


def aps_budget(table: ProfileTable, slo: float, prefill: Sequence, ctx_mean: float, dnum: int) -> int:
    """MaxPrefillAllowed, queried with the largest cached prefix among the grantable requests."""
    if slo <= 0:
        return 0
    m0 = table.max_prefill_allowed(slo, ctx_mean, dnum, 0.0)
    if m0 <= 0 or not prefill:
        return m0
    pctx = _max_candidate_prefix(prefill, m0)
    if pctx <= 0:
        return m0
    return table.max_prefill_allowed(slo, ctx_mean, dnum, float(pctx))


def compose_batch_aps(q: SchedulerQueues, slo: float, prev: Optional[Batch], table: ProfileTable,
                      now: float = 0.0, n_max: int = DEFAULT_N_MAX, kv_room: float = float("inf"),
                      learn: bool = True, deadline_aware: bool = True) -> Optional[Batch]:
    if learn and prev is not None and prev.measured_time:
        table.record_shape(prev.shape, prev.measured_time)
    if not q.prefill and not q.decode:
        return None
    entries, ctx_sum = take_decodes(q.decode, n_max)
    dnum = len(entries)
    ctx_mean = ctx_sum / dnum if dnum else 0.0
    budget = slo
    if deadline_aware and q.fresh:
        for it in q.fresh:
            left = it.last_emit + slo - now
            if left < budget:
                budget = left
        q.fresh.clear()
    if deadline_aware and q.guards:
        # an imminent handoff must still fit its first batch after this one
        nxt = table.lookup(0, ctx_mean, dnum + 1) or 0.0
        for deadline in q.guards.values():
            left = deadline - now - nxt
            if left < budget:
                budget = left
    grants: list = []
    plen = pcs = 0
    m = 0
    if q.prefill:
        m = aps_budget(table, budget, q.prefill, ctx_mean, dnum)
        if m <= 0 and dnum == 0:
            m = 1  # liveness: an idle instance always makes progress
        grants, plen, pcs = grant_fifo(q.prefill, m, kv_room - dnum)
    if plen == 0 and dnum == 0:
        return None
    return Batch(entries, grants, BatchShape.from_sums(plen, dnum, ctx_sum, pcs), now, None, m)


def compose_batch_chunked(q: SchedulerQueues, chunk_size: int, now: float = 0.0, n_max: int = DEFAULT_N_MAX,
                          kv_room: float = float("inf")) -> Optional[Batch]:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not q.prefill and not q.decode:
        return None
    q.fresh.clear()
    entries, ctx_sum = take_decodes(q.decode, n_max)
    dnum = len(entries)
    grants, plen, pcs = grant_fifo(q.prefill, chunk_size, kv_room - dnum)
    if plen == 0 and dnum == 0:
        return None
    return Batch(entries, grants, BatchShape.from_sums(plen, dnum, ctx_sum, pcs), now, None, chunk_size)


def compose_batch_disagg(q: SchedulerQueues, role: str, cap: int, now: float = 0.0,
                         n_max: int = DEFAULT_N_MAX, kv_room: float = float("inf")) -> Optional[Batch]:
    if role == "prefill":
        if q.decode:
            raise RuntimeError("prefill-only instance holds decode work")
        if not q.prefill:
            return None
        grants, plen, pcs = grant_fifo(q.prefill, max(cap, 1), kv_room)
        if plen == 0:
            return None
        return Batch([], grants, BatchShape.from_sums(plen, 0, 0, pcs), now, None, cap)
    if role == "decode":
        if q.prefill:
            raise RuntimeError("decode-only instance holds prefill work")
        q.fresh.clear()
        if not q.decode:
            return None
        entries, ctx_sum = take_decodes(q.decode, n_max)
        return Batch(entries, [], BatchShape.from_sums(0, len(entries), ctx_sum, 0), now, None, 0)
    raise ValueError(f"unknown instance role {role!r}")


# policy objects ----------------------------------------------------------


class LocalPolicy:
    """Interface the engine drives: compose the next batch from the instance queues."""

    name = "base"
    uses_table = False

    def compose(self, q: SchedulerQueues, now: float, prev: Optional[Batch], kv_room: float) -> Optional[Batch]:
        raise NotImplementedError


class ApsPolicy(LocalPolicy):
    name = "aps"
    uses_table = True

    def __init__(self, table: ProfileTable, slo: float, n_max: int = DEFAULT_N_MAX, learn: bool = True,
                 deadline_aware: bool = True):
        self.table = table
        self.slo = slo
        self.n_max = n_max
        self.learn = learn
        self.deadline_aware = deadline_aware

    def compose(self, q, now, prev, kv_room=float("inf")):
        return compose_batch_aps(q, self.slo, prev, self.table, now, self.n_max, kv_room, self.learn,
                                 self.deadline_aware)


class ChunkedPolicy(LocalPolicy):
    name = "chunked"

    def __init__(self, chunk_size: int = 2048, n_max: int = DEFAULT_N_MAX):
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.chunk_size = chunk_size
        self.n_max = n_max

    def compose(self, q, now, prev, kv_room=float("inf")):
        return compose_batch_chunked(q, self.chunk_size, now, self.n_max, kv_room)


class DisaggPolicy(LocalPolicy):
    """Fixed-role instance.

    A prefill instance caps each pass at ``cap`` tokens; with ``cap=None`` the
    cap is the SLO-derived budget of an empty batch from the profile table,
    so the prefill pool chunks prompts exactly like an APS instance would.
    """

    name = "disagg"

    def __init__(self, role: str, cap: Optional[int] = None, table: Optional[ProfileTable] = None,
                 slo: float = 100.0, n_max: int = DEFAULT_N_MAX, learn: bool = True):
        if role not in ("prefill", "decode"):
            raise ValueError(f"unknown instance role {role!r}")
        if cap is None and table is None and role == "prefill":
            raise ValueError("prefill role needs a token cap or a profile table")
        self.role = role
        self.cap = cap
        self.table = table
        self.slo = slo
        self.n_max = n_max
        self.learn = learn
        self.uses_table = table is not None

    def compose(self, q, now, prev, kv_room=float("inf")):
        if self.table is not None and self.learn and prev is not None and prev.measured_time:
            self.table.record_shape(prev.shape, prev.measured_time)
        cap = self.cap
        if self.role == "prefill" and cap is None:
            cap = aps_budget(self.table, self.slo, q.prefill, 0.0, 0)
        return compose_batch_disagg(q, self.role, cap or 0, now, self.n_max, kv_room)

"""Virtual-batch execution predictor.

``simulate_virtual`` replays an instance's outstanding work with the same
composition code the live scheduler uses (``aps_budget`` + ``grant_fifo``)
against a copy-on-write view of the instance's profile table. Active decodes
are kept in aggregate form: a heap of finish-pass indices and an integer
context sum, so one pass costs O(1) plus O(log n) per departure. Once no
prefill work remains, decode-only stretches are advanced in closed form,
vectorized over all departures up to the next release (table writes are
skipped there since nothing downstream reads them).
"""

from __future__ import annotations

import hashlib
import heapq
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from splitserve.costmodel import BatchShape, HardwareProfile, batch_latency, transfer_time
from splitserve.domain import MicroRequest
from splitserve.local_scheduler import DEFAULT_N_MAX, WorkItem, aps_budget, grant_fifo
from splitserve.profile_table import ProfileTable


class PredictorError(RuntimeError):
    pass


@dataclass
class VirtualState:
    """Frozen copy of one instance's outstanding work.

    ``prefill`` and ``decode`` hold WorkItem copies in queue order.
    ``waiting`` holds (item, release_ms) for micro-requests still waiting on a
    KV transfer; a release of None means "as soon as the instance is free".
    """

    instance: int
    clock: float
    prefill: list = field(default_factory=list)
    decode: list = field(default_factory=list)
    waiting: list = field(default_factory=list)
    table: Optional[ProfileTable] = None
    prev: Optional[tuple] = None
    slo: float = 100.0
    n_max: int = DEFAULT_N_MAX
    mode: str = "aps"
    chunk_size: int = 2048
    learn: bool = True
    prefill_clk: float = 0.0
    decode_clk: float = 0.0
    pending_alpha: dict = field(default_factory=dict)
    _digest: Optional[str] = None

    def __post_init__(self):
        if self.prefill_clk < 0 or self.decode_clk < 0:
            raise ValueError("clocks must be >= 0")

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(repr((self.instance, round(self.clock, 9), self.mode, self.slo, self.n_max,
                           len(self.prefill), len(self.decode), len(self.waiting))).encode())
            for it in self.prefill:
                h.update(repr((it.mid, it.prefill_left, it.ctx, it.planned_left)).encode())
            for it in self.decode:
                h.update(repr((it.mid, it.ctx, it.planned_left)).encode())
            for it, rel in self.waiting:
                h.update(repr((it.mid, it.prefill_left, it.ctx, it.planned_left, rel)).encode())
            if self.prev is not None:
                h.update(repr(self.prev).encode())
            if self.table is not None:
                h.update(repr((id(self.table._own), sum(v[1] for v in self.table._own.values()))).encode())
            self._digest = h.hexdigest()
        return self._digest

    @property
    def idle(self) -> bool:
        return not self.prefill and not self.decode and not self.waiting


@dataclass
class VirtualResult:
    clock: float
    finish: dict
    last_grant: dict
    passes: int
    batches: list = field(default_factory=list)
    drain: float = 0.0


def _copy(it: WorkItem) -> WorkItem:
    return WorkItem(it.mid, it.rid, it.role, it.prefill_left, it.ctx, it.planned_left, it.seq, it.last_emit)


def _decode_segment_time(n: int, sum_off: int, p: int, k: int, co) -> float:
    """Total latency of k decode-only passes starting at pass index p with n decoders."""
    if k <= 0:
        return 0.0
    a_lin, _, w, b, o = co
    comp = a_lin * n
    b0 = w + b * sum_off
    c = b * n
    # pass q is memory-bound once b0 + c*q >= comp
    if c > 0:
        qc = -(-(comp - b0) // c) if comp > b0 else float("-inf")
        qc = int(min(max(qc, p), p + k)) if qc != float("-inf") else p
    else:
        qc = p if b0 >= comp else p + k
    m = p + k - qc
    total = k * o + (qc - p) * comp
    if m > 0:
        total += m * b0 + c * m * (qc + p + k - 1) / 2.0
    return total


@njit(cache=True)
def _seg_time(n, sum_off, p, k, a_lin, w, b, o):
    if k <= 0:
        return 0.0
    comp = a_lin * n
    b0 = w + b * sum_off
    c = b * n
    qc = p
    if comp > b0:
        qc = min(max(int(-(-(comp - b0) // c)), p), p + k)
    m = p + k - qc
    total = k * o + (qc - p) * comp
    if m > 0:
        total += m * b0 + c * m * (qc + p + k - 1) / 2.0
    return total


@njit(cache=True)
def _stretch_kernel(ends0, offs0, ctx, left, rel, p, t, until, n_max, a_lin, w, b, o):
    """Event loop over departures and decode-only releases (compiled).

    Items 0..nh-1 are active decoders, the next ``no`` are queued overflow,
    the last ``len(rel)`` are releases in order. ``ctx``/``left`` cover the
    queued and released items (indexed from nh).
    """
    nh = len(ends0)
    m = len(rel)
    total = nh + len(ctx)
    no = total - nh - m
    start = np.full(total, -1, np.int64)
    end = np.full(total, -1, np.int64)
    off = np.zeros(total, np.int64)
    fin = np.full(total, np.nan)
    heap = [(np.int64(0), np.int64(0))]
    heap.pop()
    sum_off = 0
    for i in range(nh):
        start[i] = p
        end[i] = ends0[i]
        off[i] = offs0[i]
        sum_off += offs0[i]
        heapq.heappush(heap, (np.int64(ends0[i]), np.int64(i)))
    q = np.empty(total - nh, np.int64)
    qh = 0
    qt = 0
    for i in range(no):
        q[qt] = nh + i
        qt += 1
    ji = 0
    while True:
        while ji < m and rel[ji] <= t:
            idx = nh + no + ji
            ji += 1
            if len(heap) < n_max:
                j = idx - nh
                start[idx] = p
                end[idx] = p + left[j]
                off[idx] = ctx[j] - p
                sum_off += off[idx]
                heapq.heappush(heap, (np.int64(end[idx]), np.int64(idx)))
            else:
                q[qt] = idx
                qt += 1
        if len(heap) == 0 or t >= until:
            break
        n = len(heap)
        k = heap[0][0] - p
        target = until
        if ji < m and rel[ji] < target:
            target = rel[ji]
        if t + _seg_time(n, sum_off, p, k, a_lin, w, b, o) >= target:
            lo, hi = 1, k
            while lo < hi:
                mid = (lo + hi) // 2
                if t + _seg_time(n, sum_off, p, mid, a_lin, w, b, o) >= target:
                    hi = mid
                else:
                    lo = mid + 1
            k = lo
        t += _seg_time(n, sum_off, p, k, a_lin, w, b, o)
        p += k
        while len(heap) > 0 and heap[0][0] <= p:
            e, idx = heapq.heappop(heap)
            sum_off -= off[idx]
            fin[idx] = t
        while qh < qt and len(heap) < n_max:
            idx = q[qh]
            qh += 1
            j = idx - nh
            start[idx] = p
            end[idx] = p + left[j]
            off[idx] = ctx[j] - p
            sum_off += off[idx]
            heapq.heappush(heap, (np.int64(end[idx]), np.int64(idx)))
    return p, t, ji, start, end, off, fin, q[qh:qt]


def _decode_stretch(heap, over, p, t, co, n_max, joins, until):
    """Advance decode-only passes from pass ``p`` at time ``t``.

    ``joins`` are (release, ctx, left, mid) decode items released in order
    during the stretch; each joins at the first pass boundary whose time
    reaches it, queueing behind ``over`` when all slots are taken. The
    stretch ends when the instance runs dry or at the first boundary whose
    time reaches ``until``.

    Returns (p, t, departed [(mid, time)], active [(end, off, mid)],
    overflow left, number of joins consumed).
    """
    a_lin, _, w, b, o = co
    nh = len(heap)
    mids = [e[3] for e in heap] + [x[2] for x in over] + [j[3] for j in joins]
    ctx = np.array([x[0] for x in over] + [j[1] for j in joins], dtype=np.int64)
    left = np.array([x[1] for x in over] + [j[2] for j in joins], dtype=np.int64)
    p_new, t_new, consumed, start, end, off, fin, rest = _stretch_kernel(
        np.array([e[0] for e in heap], dtype=np.int64), np.array([e[2] for e in heap], dtype=np.int64),
        ctx, left, np.array([j[0] for j in joins], dtype=np.float64), p, t,
        np.inf if until is None else until, n_max, a_lin, w, b, o)
    departed, active = [], []
    for i, (s0, e0, o0, f0) in enumerate(zip(start.tolist(), end.tolist(), off.tolist(), fin.tolist())):
        if s0 < 0:
            continue
        if f0 == f0:
            departed.append((mids[i], f0))
        else:
            active.append((e0, o0, mids[i]))
    rest = [(int(ctx[i - nh]), int(left[i - nh]), mids[i]) for i in rest.tolist()]
    return p_new, t_new, departed, active, rest, consumed


def simulate_virtual(state: VirtualState, hw: HardwareProfile, slo: Optional[float] = None,
                     extra: Optional[list] = None, trace: bool = False, max_passes: int = 10_000_000
                     ) -> VirtualResult:
    """Replay the snapshot (plus ``extra`` (item, release_ms) pairs) to completion."""
    slo = state.slo if slo is None else slo
    t = state.clock
    table = state.table.overlay() if (state.table is not None and state.learn) else state.table
    learn = state.learn and table is not None
    mode = state.mode
    n_max = state.n_max
    co = hw.coeffs

    prefill = deque(_copy(it) for it in state.prefill)
    finish: dict = {}
    last_grant: dict = {}
    batches: list = []

    heap: list = []        # (finish_pass, seq, offset, mid)
    sum_off = 0
    over = deque()         # decoders beyond n_max: (ctx, planned_left, mid)
    p = 0
    seq = 0

    def join(ctx, left, mid):
        nonlocal sum_off, seq
        if left <= 0:
            finish[mid] = t
            return
        if len(heap) < n_max:
            off = ctx - p
            heapq.heappush(heap, (p + left, seq, off, mid))
            sum_off += off
            seq += 1
        else:
            over.append((ctx, left, mid))

    for it in state.decode:
        join(it.ctx, it.planned_left, it.mid)
        last_grant[it.mid] = 1

    pending = []
    order = 0
    for it, rel in list(state.waiting) + list(extra or []):
        pending.append((t if rel is None else rel, order, _copy(it)))
        order += 1
    pending.sort(key=lambda x: (x[0], x[1]))
    pending = deque(pending)

    def release_due():
        while pending and pending[0][0] <= t:
            _, _, it = pending.popleft()
            if it.prefill_left > 0:
                prefill.append(it)
            else:
                join(it.ctx, it.planned_left, it.mid)

    def depart():
        nonlocal sum_off
        while heap and heap[0][0] <= p:
            _, _, off, mid = heapq.heappop(heap)
            sum_off -= off
            finish[mid] = t
            last_grant[mid] = 1
        while over and len(heap) < n_max:
            ctx, left, mid = over.popleft()
            join(ctx, left, mid)

    prev = state.prev if learn else None
    passes = 0
    drain = t
    while True:
        release_due()
        n = len(heap)
        if not prefill and n == 0:
            if pending:
                t = max(t, pending[0][0])
                continue
            break
        if passes >= max_passes:
            raise PredictorError("virtual simulation exceeded its pass budget")
        if not prefill and not trace:
            # decode-only stretch, vectorized over departures and decode-only releases
            joins = []
            for rel_t, _, it in pending:
                if it.prefill_left > 0 or it.planned_left <= 0:
                    break
                joins.append((rel_t, it.ctx, it.planned_left, it.mid))
            until = pending[len(joins)][0] if len(joins) < len(pending) else None
            p0 = p
            p, t, departed, active, rest, consumed = _decode_stretch(heap, over, p, t, co, n_max, joins, until)
            for _ in range(consumed):
                pending.popleft()
            passes += p - p0
            prev = None
            for mid, ft in departed:
                finish[mid] = ft
                last_grant[mid] = 1
            heap = []
            sum_off = 0
            for end, off, mid in active:
                heap.append((end, seq, off, mid))
                sum_off += off
                seq += 1
            heapq.heapify(heap)
            over = deque(rest)
            continue
        # one composed pass
        if prev is not None:
            table.record_shape(prev[0], prev[1])
        ctx_sum = sum_off + n * p
        ctx_mean = ctx_sum / n if n else 0.0
        grants = ()
        plen = pcs = 0
        if prefill:
            if table is None and (mode == "aps" or (mode == "prefill" and state.chunk_size <= 0)):
                raise PredictorError(f"virtual mode {mode!r} needs a profile table")
            if mode == "aps":
                m = aps_budget(table, slo, prefill, ctx_mean, n)
                if m <= 0 and n == 0:
                    m = 1
            elif mode == "chunked":
                m = state.chunk_size
            elif mode == "prefill":
                m = max(aps_budget(table, slo, prefill, 0.0, 0), 1) if state.chunk_size <= 0 else state.chunk_size
            else:
                raise PredictorError(f"unknown virtual mode {mode!r}")
            grants, plen, pcs = grant_fifo(prefill, m)
        if plen == 0 and n == 0:
            raise PredictorError("virtual pass made no progress while work remains")
        shape = BatchShape.from_sums(plen, n, ctx_sum, pcs)
        lat = batch_latency(shape, hw)
        if trace:
            batches.append((t, shape, tuple(sorted(mid for *_, mid in heap)), tuple((g.mid, x) for g, x in grants)))
        t += lat
        p += 1
        passes += 1
        prev = (shape, lat) if learn else None
        depart()
        for it, g in grants:
            it.prefill_left -= g
            it.ctx += g
            if it.prefill_left == 0:
                prefill.popleft()
                last_grant[it.mid] = g
                join(it.ctx, it.planned_left, it.mid)
        if grants:
            drain = t
    return VirtualResult(t, finish, last_grant, passes, batches, drain)


# pair prediction ------------------------------------------------------------


@dataclass
class PredictorConfig:
    transfer_mode: str = "chunked"
    chunk_size: int = 256
    cache_size: int = 4096


def tail_transfer_estimate(tokens: int, hw: HardwareProfile, cfg: PredictorConfig) -> float:
    """Time from a micro-request's last pass to delivery of the KV it still owes."""
    if tokens <= 0:
        return 0.0
    if cfg.transfer_mode == "whole":
        return transfer_time(tokens, hw)
    n_chunks = -(-tokens // cfg.chunk_size)
    return n_chunks * hw.link_latency_ms + tokens * hw.kv_bytes_per_token / hw.link_bw_bytes_per_ms


def item_for(mr: MicroRequest, mid: int, planned_total: int, seq: int = 0) -> WorkItem:
    """Fresh WorkItem for a micro-request as it would look when first queued."""
    prefill_left = mr.prefill_tokens
    ctx = mr.start
    planned = mr.decode_tokens
    return WorkItem(mid, mr.parent, mr.role, prefill_left, ctx, planned, seq)


class Predictor:
    """predict_pair with an LRU memo keyed by snapshot digests and micro-request shapes."""

    def __init__(self, hw: HardwareProfile, cfg: Optional[PredictorConfig] = None):
        self.hw = hw
        self.cfg = cfg or PredictorConfig()
        self._cache: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.calls = 0

    def _memo(self, key, fn):
        c = self._cache
        if key in c:
            c.move_to_end(key)
            self.hits += 1
            return c[key]
        self.misses += 1
        v = fn()
        c[key] = v
        if len(c) > self.cfg.cache_size:
            c.popitem(last=False)
        return v

    def base(self, state: VirtualState) -> VirtualResult:
        return self._memo((state.digest(), None), lambda: simulate_virtual(state, self.hw))

    def predict_pair(self, alpha: MicroRequest, beta: MicroRequest, sa: Optional[VirtualState],
                     sb: Optional[VirtualState]) -> tuple[float, float]:
        """Predicted completion (absolute ms) of instance A with alpha added and B with beta added."""
        if sa is None or sb is None:
            raise PredictorError("instance snapshot missing")
        self.calls += 1
        amid, bmid = -1 - 2 * alpha.parent, -2 - 2 * alpha.parent
        if alpha.empty:
            ra = self.base(sa)
            t1 = ra.clock
            alpha_done = sa.clock
            alpha_last = 0
        else:
            key = (sa.digest(), "a", alpha.start, alpha.end, alpha.prompt_len)
            ra = self._memo(key, lambda: simulate_virtual(
                sa, self.hw, extra=[(item_for(alpha, amid, 0), None)]))
            t1 = ra.clock
            alpha_done = ra.finish.get(amid, ra.clock)
            alpha_last = 1 if alpha.decode_tokens > 0 else ra.last_grant.get(amid, alpha.length)
        if beta.empty:
            t2 = self.base(sb).clock
        else:
            if self.cfg.transfer_mode == "whole":
                owed = alpha.length
            else:
                owed = min(alpha.length, alpha_last)
            release = alpha_done + tail_transfer_estimate(owed, self.hw, self.cfg) if not alpha.empty else None
            key = (sb.digest(), "b", beta.start, beta.end, beta.prompt_len, None if release is None else round(release, 9))
            rb = self._memo(key, lambda: simulate_virtual(
                sb, self.hw, extra=[(item_for(beta, bmid, 0), release)]))
            t2 = rb.clock
        return t1, t2

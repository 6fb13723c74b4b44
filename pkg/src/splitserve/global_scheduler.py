"""Request-level split search and routing.

``ApsRouter`` runs the bounded split-ratio search against the predictor.
``ForcedRouter``, ``ColocRouter`` and ``DisaggRouter`` are fixed routings
used for sweeps and baselines. Every router exposes
``schedule(view, sim) -> SplitPlan``; the engine commits the plan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from splitserve.domain import PlanView, SplitPlan, split_point, split_request
from splitserve.predictor import Predictor, PredictorError, VirtualState, tail_transfer_estimate

log = logging.getLogger(__name__)


@dataclass
class SchedulerConfig:
    K: int = 6
    epsilon_ms: float = 5.0
    margin_tokens: int = 20
    update: str = "interpolate"
    commit: str = "best"
    orientation: str = "drain"
    split_kv_headroom: float = 0.1
    endpoints: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("scheduler.K must be >= 1")
        if not self.epsilon_ms > 0:
            raise ValueError("scheduler.epsilon_ms must be > 0")
        if self.margin_tokens < 0:
            raise ValueError("scheduler.margin_tokens must be >= 0")
        if self.update not in ("bisect", "interpolate"):
            raise ValueError(f"scheduler.update must be bisect or interpolate, got {self.update!r}")
        if self.commit not in ("best", "last"):
            raise ValueError(f"scheduler.commit must be best or last, got {self.commit!r}")
        if not 0.0 <= self.split_kv_headroom < 1.0:
            raise ValueError("scheduler.split_kv_headroom must be in [0, 1)")
        if self.orientation not in ("completion", "drain", "alternate"):
            raise ValueError(f"scheduler.orientation must be completion, drain or alternate, got {self.orientation!r}")


def disagg_phi(view) -> float:
    return view.prompt_len / view.planned_len


def make_pairs(n_instances: int) -> list[tuple[int, int]]:
    if n_instances < 2:
        raise ValueError("split routing needs at least 2 instances")
    return [(i, i + 1) for i in range(0, n_instances - 1, 2)]


@dataclass
class Probe:
    phi: float
    s: int
    t1: float
    t2: float

    @property
    def makespan(self) -> float:
        return max(self.t1, self.t2)


@dataclass
class Decision:
    request_id: int
    plan: SplitPlan
    probes: list = field(default_factory=list)
    cold: bool = False
    fallback: bool = False


def search_split(view: PlanView, probe: Callable[[float], tuple[int, float, float]], cfg: SchedulerConfig
                 ) -> tuple[float, int, list]:
    """Bounded search for the phi that balances T1 (alpha side) against T2 (beta side).

    ``probe(phi) -> (s, T1, T2)``. T1 - T2 is non-decreasing in phi, so the
    bracket [lo, hi] always keeps the balance point. With ``update='bisect'``
    the next phi is the midpoint; with ``'interpolate'`` it is the secant
    root of the bracket (Illinois-damped), falling back to the midpoint
    whenever the secant leaves the bracket interior.

    With ``endpoints`` (and K >= 4) the two probes after the first go to
    phi = 0 and phi = 1, the unsplit plans. They give the secant a real
    bracket, and they win outright when the request's own serial path
    dominates: beta waiting on alpha plus the transfer can make every split
    slower than running the request whole.
    """
    phi = disagg_phi(view)
    lo, hi = 0.0, 1.0
    f_lo: Optional[float] = None
    f_hi: Optional[float] = None
    side = 0
    probes: list = []
    seen: dict = {}
    forced = [0.0, 1.0] if (cfg.endpoints and cfg.K >= 4) else []
    for _ in range(cfg.K):
        s = split_point(phi, view.planned_len)
        if s in seen:
            pr = seen[s]
            pr = Probe(phi, s, pr.t1, pr.t2)
        else:
            s, t1, t2 = probe(phi)
            pr = Probe(phi, s, t1, t2)
            seen[s] = pr
        probes.append(pr)
        diff = pr.t1 - pr.t2
        if abs(diff) <= cfg.epsilon_ms:
            break
        # the bracket only ever shrinks; an endpoint outside it changes nothing
        if diff > 0 and phi <= hi:
            hi, f_hi = phi, diff
            if side == 1 and f_lo is not None:
                f_lo /= 2.0
            side = 1
        elif diff < 0 and phi >= lo:
            lo, f_lo = phi, diff
            if side == -1 and f_hi is not None:
                f_hi /= 2.0
            side = -1
        nxt = (lo + hi) / 2.0
        if cfg.update == "interpolate" and f_lo is not None and f_hi is not None and f_hi != f_lo:
            cand = lo - f_lo * (hi - lo) / (f_hi - f_lo)
            if lo < cand < hi:
                nxt = cand
        while forced:
            end = forced.pop(0)
            if split_point(end, view.planned_len) not in seen:
                nxt = end
                break
        phi = nxt
    if cfg.commit == "last":
        chosen = probes[-1]
    else:
        # makespans within epsilon count as ties; among ties prefer the most balanced pair
        best = min(p.makespan for p in probes)
        chosen = min((p for p in probes if p.makespan <= best + cfg.epsilon_ms), key=lambda p: abs(p.t1 - p.t2))
    return chosen.phi, chosen.s, probes


class ApsRouter:
    """Split search over instance pairs chosen round-robin."""

    def __init__(self, predictor: Predictor, n_instances: int, cfg: Optional[SchedulerConfig] = None,
                 keep_decisions: bool = False):
        self.predictor = predictor
        self.cfg = cfg or SchedulerConfig()
        self.pairs = make_pairs(n_instances)
        self.cursor = 0
        self.clocks = {p: (0.0, 0.0) for p in self.pairs}
        self.keep_decisions = keep_decisions
        self.decisions: list = []
        self.fallbacks = 0
        self.kv_fallbacks = 0

    def next_pair(self) -> tuple[int, int]:
        pair = self.pairs[self.cursor % len(self.pairs)]
        self.cursor += 1
        return pair

    def _resolve_waiting(self, sa: VirtualState, sb: VirtualState, ra, rb) -> None:
        """Fill in release times for betas whose alpha still runs on the partner instance."""
        for state, other in ((sa, rb), (sb, ra)):
            fixed = []
            for it, rel in state.waiting:
                if rel is None and it.mid in state.pending_alpha:
                    amid, owed = state.pending_alpha[it.mid]
                    done = other.finish.get(amid)
                    if done is not None:
                        rel = done + tail_transfer_estimate(owed, self.predictor.hw, self.predictor.cfg)
                fixed.append((it, rel))
            state.waiting = fixed
            state._digest = None

    def _whole(self, view: PlanView, sim, pair) -> SplitPlan:
        """Unsplit plan on the pair instance with the most KV room."""
        a = pair[0] if sim.kv_room(pair[0]) >= sim.kv_room(pair[1]) else pair[1]
        b = pair[1] if a == pair[0] else pair[0]
        return SplitPlan(view.id, 1.0, view.planned_len, a, b)

    def schedule(self, view: PlanView, sim) -> SplitPlan:
        pair = self.next_pair()
        rooms = (sim.kv_room(pair[0]), sim.kv_room(pair[1]))
        if max(rooms) < view.planned_len:
            # nothing fits on this pair; the engine will hold the request back
            return self._whole(view, sim, pair)
        # a split holds KV on both instances for a while; under KV pressure run requests whole
        headroom = self.cfg.split_kv_headroom * sim.capacity
        if min(rooms) < headroom:
            self.kv_fallbacks += 1
            return self._whole(view, sim, pair)
        plan = self._search(view, sim, pair)
        if 0 < plan.s < view.planned_len:
            res_a, res_b = sim.footprint(view, plan)
            if (sim.kv_room(plan.alpha_instance) - res_a < headroom
                    or sim.kv_room(plan.beta_instance) - res_b < headroom):
                self.kv_fallbacks += 1
                plan = self._whole(view, sim, pair)
        elif not sim.fits(view, plan):
            self.kv_fallbacks += 1
            plan = self._whole(view, sim, pair)
        return plan

    def _search(self, view: PlanView, sim, pair) -> SplitPlan:
        s0, s1 = sim.snapshot(pair[0]), sim.snapshot(pair[1])
        pred = self.predictor
        try:
            if self.clocks[pair] == (0.0, 0.0):
                return self._cold_start(view, pair, s0, s1)
            r0, r1 = pred.base(s0), pred.base(s1)
            if any(rel is None for _, rel in s0.waiting + s1.waiting):
                self._resolve_waiting(s0, s1, r0, r1)
                r0, r1 = pred.base(s0), pred.base(s1)
            o = self.cfg.orientation
            if o == "completion":
                swap = r1.clock < r0.clock
            elif o == "drain":
                swap = (r1.drain, r1.clock) < (r0.drain, r0.clock)
            else:
                swap = self.cursor % 2 == 0
            if swap:
                a_inst, b_inst, sa, sb = pair[1], pair[0], s1, s0
            else:
                a_inst, b_inst, sa, sb = pair[0], pair[1], s0, s1

            def probe(phi):
                alpha, beta = split_request(view, phi)
                t1, t2 = pred.predict_pair(alpha, beta, sa, sb)
                return alpha.end, t1, t2

            phi, s, probes = search_split(view, probe, self.cfg)
        except PredictorError as exc:
            log.warning("predictor failed for request %s (%s); using the disaggregation split", view.id, exc)
            self.fallbacks += 1
            phi = disagg_phi(view)
            return SplitPlan(view.id, phi, split_point(phi, view.planned_len), pair[0], pair[1])
        chosen = next(p for p in probes if p.s == s)
        a_clk = chosen.t1
        b_clk = chosen.t2
        self.clocks[pair] = (a_clk, b_clk) if a_inst == pair[0] else (b_clk, a_clk)
        plan = SplitPlan(view.id, phi, s, a_inst, b_inst)
        if self.keep_decisions:
            self.decisions.append(Decision(view.id, plan, probes))
        return plan

    def _cold_start(self, view: PlanView, pair, s0: VirtualState, s1: VirtualState) -> SplitPlan:
        phi = disagg_phi(view)
        alpha, beta = split_request(view, phi)
        t1, t2 = self.predictor.predict_pair(alpha, beta, s0, s1)
        self.clocks[pair] = (t1, t2)
        plan = SplitPlan(view.id, phi, alpha.end, pair[0], pair[1])
        if self.keep_decisions:
            self.decisions.append(Decision(view.id, plan, [Probe(phi, alpha.end, t1, t2)], cold=True))
        return plan


class ForcedRouter:
    """Fixed split for every request.

    ``phi`` may be a number, ``"disagg"`` (P / (P + D-hat)) or
    ``"alternate"`` (1, 0, 1, 0, ...). ``s`` forces an absolute split point
    instead. ``orientation`` is ``fixed`` (alpha on the pair's first
    instance), ``alternate`` (whole requests round-robin over all instances),
    or ``predicted`` (alpha on the instance with lower predicted completion).
    """

    def __init__(self, n_instances: int, phi=None, s: Optional[int] = None, orientation: str = "fixed",
                 predictor: Optional[Predictor] = None):
        if (phi is None) == (s is None):
            raise ValueError("give exactly one of phi or s")
        if orientation not in ("fixed", "alternate", "predicted"):
            raise ValueError(f"unknown orientation {orientation!r}")
        if orientation == "predicted" and predictor is None:
            raise ValueError("predicted orientation needs a predictor")
        self.n = n_instances
        self.phi = phi
        self.s = s
        self.orientation = orientation
        self.predictor = predictor
        self.pairs = make_pairs(n_instances)
        self.count = 0

    def schedule(self, view: PlanView, sim) -> SplitPlan:
        k = self.count
        self.count += 1
        L = view.planned_len
        if self.s is not None:
            s = min(self.s, L)
            phi = s / L
        else:
            if self.phi == "disagg":
                phi = disagg_phi(view)
            elif self.phi == "alternate":
                phi = 1.0 if k % 2 == 0 else 0.0
            else:
                phi = float(self.phi)
            s = split_point(phi, L)
        if self.orientation == "alternate":
            whole = k % self.n
            other = (whole + 1) % self.n
            # a whole request runs where its non-empty half lands
            if s == 0:
                return SplitPlan(view.id, phi, s, other, whole)
            return SplitPlan(view.id, phi, s, whole, other)
        pair = self.pairs[k % len(self.pairs)]
        a, b = pair
        if self.orientation == "predicted":
            r0 = self.predictor.base(sim.snapshot(a)).clock
            r1 = self.predictor.base(sim.snapshot(b)).clock
            if r1 < r0:
                a, b = b, a
        return SplitPlan(view.id, phi, s, a, b)


class ColocRouter:
    """Whole requests round-robin across instances."""

    def __init__(self, n_instances: int):
        self.n = n_instances
        self.count = 0

    def schedule(self, view: PlanView, sim) -> SplitPlan:
        i = self.count % self.n
        self.count += 1
        L = view.planned_len
        return SplitPlan(view.id, 1.0, L, i, (i + 1) % self.n if self.n > 1 else i)


class DisaggRouter:
    """Prefill on the first ``n_prefill`` instances, decode on the rest, round-robin in each pool."""

    def __init__(self, n_instances: int, n_prefill: Optional[int] = None):
        if n_instances < 2:
            raise ValueError("disaggregation needs at least 2 instances")
        self.n_prefill = n_prefill if n_prefill is not None else n_instances // 2
        if not 1 <= self.n_prefill < n_instances:
            raise ValueError("n_prefill must leave at least one instance in each pool")
        self.prefill_pool = list(range(self.n_prefill))
        self.decode_pool = list(range(self.n_prefill, n_instances))
        self.count = 0

    def schedule(self, view: PlanView, sim) -> SplitPlan:
        k = self.count
        self.count += 1
        a = self.prefill_pool[k % len(self.prefill_pool)]
        b = self.decode_pool[k % len(self.decode_pool)]
        return SplitPlan(view.id, disagg_phi(view), view.prompt_len, a, b)

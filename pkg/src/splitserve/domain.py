"""Requests, micro-requests and the split rule.

Token positions are 1-based in the public vocabulary (tokens 1..L) and stored
as half-open offsets internally: a span ``(start, end)`` covers tokens
``start+1 .. end``. Positions ``1..P`` are prompt tokens; ``P+1..L`` are
decode positions, one decode pass each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

ALPHA = "alpha"
BETA = "beta"


@dataclass(frozen=True)
class PlanView:
    """What a scheduler is allowed to see about a request.

    The actual decode length is deliberately absent.
    """

    id: int
    arrival: float
    prompt_len: int
    predicted_decode: int
    slo_tbt: float

    @property
    def planned_len(self) -> int:
        return self.prompt_len + self.predicted_decode


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    prompt_len: int
    decode_len: int
    predicted_decode: Optional[int] = None
    slo_tbt: float = 100.0

    def __post_init__(self):
        if self.prompt_len < 1:
            raise ValueError(f"request {self.id}: prompt_len must be >= 1, got {self.prompt_len}")
        if self.decode_len < 1:
            raise ValueError(f"request {self.id}: decode_len must be >= 1, got {self.decode_len}")
        if self.slo_tbt <= 0:
            raise ValueError(f"request {self.id}: slo_tbt must be > 0")
        if self.predicted_decode is None:
            object.__setattr__(self, "predicted_decode", self.decode_len)
        elif self.predicted_decode < 1:
            raise ValueError(f"request {self.id}: predicted_decode must be >= 1")

    @property
    def total_len(self) -> int:
        """Execution length P + D."""
        return self.prompt_len + self.decode_len

    @property
    def planned_len(self) -> int:
        """Planning length P + D-hat."""
        return self.prompt_len + self.predicted_decode

    def plan_view(self) -> PlanView:
        return PlanView(self.id, self.arrival, self.prompt_len, self.predicted_decode, self.slo_tbt)


@dataclass(frozen=True)
class MicroRequest:
    parent: int
    role: str
    start: int
    end: int
    prompt_len: int
    instance: Optional[int] = None

    @property
    def empty(self) -> bool:
        return self.start >= self.end

    @property
    def length(self) -> int:
        return max(0, self.end - self.start)

    @property
    def prefill_tokens(self) -> int:
        return max(0, min(self.end, self.prompt_len) - self.start)

    @property
    def decode_tokens(self) -> int:
        return max(0, self.end - max(self.start, self.prompt_len))

    @property
    def segments(self) -> tuple[int, int]:
        return self.prefill_tokens, self.decode_tokens

    def on(self, instance: int) -> "MicroRequest":
        return MicroRequest(self.parent, self.role, self.start, self.end, self.prompt_len, instance)


@dataclass(frozen=True)
class SplitPlan:
    request_id: int
    phi: float
    s: int
    alpha_instance: int
    beta_instance: int

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi out of range: {self.phi}")
        if self.s < 0:
            raise ValueError(f"split point must be >= 0, got {self.s}")


def split_point(phi: float, length: int) -> int:
    """s = ceil(phi * L), treating products within float noise of an integer as exact."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi out of range: {phi}")
    x = phi * length
    r = round(x)
    s = r if abs(x - r) <= 1e-9 * max(1.0, length) else math.ceil(x)
    return min(max(s, 0), length)


def phi_for_split(s: int, length: int) -> float:
    return s / length if length else 0.0


def split_request(r, phi: float) -> tuple[MicroRequest, MicroRequest]:
    """Split a request (or its plan view) into alpha = tokens 1..s and beta = s+1..L."""
    length = r.planned_len
    s = split_point(phi, length)
    alpha = MicroRequest(r.id, ALPHA, 0, s, r.prompt_len)
    beta = MicroRequest(r.id, BETA, s, length, r.prompt_len)
    return alpha, beta


def split_at(r, s: int) -> tuple[MicroRequest, MicroRequest]:
    length = r.planned_len
    if not 0 <= s <= length:
        raise ValueError(f"split point {s} outside [0, {length}]")
    return MicroRequest(r.id, ALPHA, 0, s, r.prompt_len), MicroRequest(r.id, BETA, s, length, r.prompt_len)

"""Request streams: Poisson synthetic shapes, hybrid mixes, CSV traces, and the length predictor."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from splitserve.domain import Request

PRESETS = {
    "prefill_heavy": (8192, 32),
    "balanced": (2048, 512),
    "reasoning": (219, 1467),
    "symmetric": (1024, 1024),
}
HYBRID_MIX = {"prefill_heavy": 0.5, "balanced": 0.5}

TRACE_HEADER = ["arrival_ms", "prompt_tokens", "output_tokens"]


class TraceError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 explicitly, so streams do not depend on numpy's default bit generator."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class LengthPredictor:
    mode: str = "oracle"
    sigma: float = 0.0
    margin: int = 20

    def __post_init__(self):
        if self.mode not in ("oracle", "noisy"):
            raise ValueError(f"predictor.mode must be oracle or noisy, got {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("predictor.sigma must be >= 0")
        if self.margin < 0:
            raise ValueError("predictor.margin must be >= 0")


def predict_length(decode_len: int, p: LengthPredictor, rng: Optional[np.random.Generator] = None) -> int:
    if p.mode == "oracle":
        return decode_len + p.margin
    noise = rng.normal(0.0, p.sigma) if (p.sigma > 0 and rng is not None) else 0.0
    raw = max(1, int(round(decode_len + noise)))
    return raw + p.margin


@dataclass
class ShapeSpec:
    """Fixed lengths, or lognormal lengths when the sigmas are positive.

    For lognormal shapes, prompt_len and decode_len are the medians.
    """

    prompt_len: int = 1024
    decode_len: int = 1024
    prompt_sigma: float = 0.0
    decode_sigma: float = 0.0
    max_prompt: int = 32768
    max_decode: int = 8192

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        p, d = self.prompt_len, self.decode_len
        if self.prompt_sigma > 0:
            p = int(round(math.exp(rng.normal(math.log(p), self.prompt_sigma))))
        if self.decode_sigma > 0:
            d = int(round(math.exp(rng.normal(math.log(d), self.decode_sigma))))
        return min(max(p, 1), self.max_prompt), min(max(d, 1), self.max_decode)


def preset_shape(name: str) -> ShapeSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)} or hybrid")
    p, d = PRESETS[name]
    return ShapeSpec(p, d)


@dataclass
class WorkloadSpec:
    kind: str = "synthetic"
    rate_qps: float = 1.0
    preset: Optional[str] = "symmetric"
    shape: Optional[ShapeSpec] = None
    duration_s: Optional[float] = 60.0
    num_requests: Optional[int] = None
    seed: int = 0
    mix: dict = field(default_factory=dict)
    trace_path: Optional[str] = None
    time_scale: float = 1.0
    slo_tbt: float = 100.0
    predictor: LengthPredictor = field(default_factory=LengthPredictor)

    def __post_init__(self):
        if self.kind not in ("synthetic", "trace", "hybrid"):
            raise ValueError(f"workload.kind must be synthetic, trace or hybrid, got {self.kind!r}")
        if self.kind != "trace" and not self.rate_qps > 0:
            raise ValueError("workload.rate_qps must be > 0")
        if self.kind == "hybrid":
            mix = self.mix or dict(HYBRID_MIX)
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ValueError(f"workload.mix weights must sum to 1, got {sum(mix.values())}")
            for k in mix:
                preset_shape(k)
            self.mix = mix
        if self.kind == "synthetic" and self.shape is None:
            if self.preset == "hybrid":
                self.kind = "hybrid"
                self.mix = self.mix or dict(HYBRID_MIX)
            else:
                self.shape = preset_shape(self.preset or "symmetric")
        if self.kind == "trace" and not self.trace_path:
            raise ValueError("workload.trace_path is required for trace workloads")
        if self.kind != "trace" and self.duration_s is None and self.num_requests is None:
            raise ValueError("workload needs duration_s or num_requests")
        if self.time_scale <= 0:
            raise ValueError("workload.time_scale must be > 0")


def _arrivals(rng: np.random.Generator, rate_qps: float, duration_s: Optional[float], n: Optional[int]) -> list:
    mean_ms = 1000.0 / rate_qps
    out = []
    t = 0.0
    horizon = duration_s * 1000.0 if duration_s is not None else math.inf
    while True:
        if n is not None and len(out) >= n:
            break
        t += rng.exponential(mean_ms)
        if t > horizon:
            break
        out.append(t)
    return out


def generate(spec: WorkloadSpec) -> list[Request]:
    if spec.kind == "trace":
        return load_trace(spec.trace_path, spec.time_scale, spec.predictor, spec.seed, spec.slo_tbt)
    rng = make_rng(spec.seed)
    pred_rng = make_rng(spec.seed + 7_919_081)
    times = _arrivals(rng, spec.rate_qps, spec.duration_s, spec.num_requests)
    if spec.kind == "hybrid":
        names = sorted(spec.mix)
        weights = np.array([spec.mix[k] for k in names], dtype=float)
        shapes = [preset_shape(k) for k in names]
        picks = rng.choice(len(names), size=len(times), p=weights)
        lens = [shapes[i].sample(rng) for i in picks]
    else:
        lens = [spec.shape.sample(rng) for _ in times]
    reqs = []
    for i, (t, (p, d)) in enumerate(zip(times, lens)):
        dh = predict_length(d, spec.predictor, pred_rng)
        reqs.append(Request(i, float(t), p, d, dh, spec.slo_tbt))
    return reqs


def load_trace(path, time_scale: float = 1.0, predictor: Optional[LengthPredictor] = None, seed: int = 0,
               slo_tbt: float = 100.0) -> list[Request]:
    predictor = predictor or LengthPredictor()
    rng = make_rng(seed + 7_919_081)
    reqs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: empty file") from None
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceError(f"{path}:1: header must be {','.join(TRACE_HEADER)}")
        last = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise TraceError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t = float(row[0])
                p = int(row[1])
                d = int(row[2])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: malformed row {row}") from None
            if not math.isfinite(t) or t < 0:
                raise TraceError(f"{path}:{lineno}: arrival must be a finite non-negative number")
            if p < 1 or d < 1:
                raise TraceError(f"{path}:{lineno}: token counts must be >= 1")
            if t < last:
                raise TraceError(f"{path}:{lineno}: rows are not sorted by arrival_ms")
            last = t
            dh = predict_length(d, predictor, rng)
            reqs.append(Request(len(reqs), t * time_scale, p, d, dh, slo_tbt))
    return reqs


def dump_trace(requests: list[Request], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([repr(r.arrival), r.prompt_len, r.decode_len])


def with_predictions(requests: list[Request], predictor: LengthPredictor, seed: int) -> list[Request]:
    rng = make_rng(seed + 7_919_081)
    return [replace(r, predicted_decode=predict_length(r.decode_len, predictor, rng)) for r in requests]

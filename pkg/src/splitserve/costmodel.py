"""Roofline latency model for one batch, plus KV transfer time and a calibration fit."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from importlib import resources
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy.optimize import lsq_linear


@dataclass(frozen=True)
class HardwareProfile:
    flops_per_ms: float
    mem_bw_bytes_per_ms: float
    weight_bytes: float
    kv_bytes_per_token: float
    link_bw_bytes_per_ms: float
    link_latency_ms: float
    fixed_overhead_ms: float
    hbm_capacity_tokens: int
    c_lin: float
    c_attn: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("flops_per_ms", "mem_bw_bytes_per_ms", "kv_bytes_per_token",
                     "link_bw_bytes_per_ms", "c_lin", "hbm_capacity_tokens"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hardware.{name} must be > 0")
        for name in ("weight_bytes", "link_latency_ms", "fixed_overhead_ms", "c_attn", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"hardware.{name} must be >= 0")

    @cached_property
    def coeffs(self) -> tuple[float, float, float, float, float]:
        """(ms per linear token, ms per attention pair, weight-read ms, ms per KV token, overhead)."""
        return (
            self.c_lin / self.flops_per_ms,
            self.c_attn / self.flops_per_ms,
            self.weight_bytes / self.mem_bw_bytes_per_ms,
            self.kv_bytes_per_token / self.mem_bw_bytes_per_ms,
            self.fixed_overhead_ms,
        )

    def to_dict(self) -> dict:
        return asdict(self)


PROFILE_FIELDS = tuple(f.name for f in fields(HardwareProfile))


def profile_from_dict(data: dict) -> HardwareProfile:
    unknown = set(data) - set(PROFILE_FIELDS)
    if unknown:
        raise ValueError(f"unknown hardware keys: {sorted(unknown)}")
    values = dict(data)
    if "hbm_capacity_tokens" in values:
        values["hbm_capacity_tokens"] = int(values["hbm_capacity_tokens"])
    return HardwareProfile(**{k: (float(v) if k != "hbm_capacity_tokens" else v) for k, v in values.items()})


def default_profile() -> HardwareProfile:
    text = resources.files("splitserve").joinpath("data/default_profile.yaml").read_text()
    return profile_from_dict(yaml.safe_load(text))


@dataclass(frozen=True)
class BatchShape:
    plen: int = 0
    dnum: int = 0
    ctx: float = 0.0
    prefill_ctx_sum: int = 0

    @staticmethod
    def from_sums(plen: int, dnum: int, ctx_sum: int, prefill_ctx_sum: int = 0) -> "BatchShape":
        return BatchShape(plen, dnum, ctx_sum / dnum if dnum else 0.0, prefill_ctx_sum)

    @property
    def empty(self) -> bool:
        return self.plen + self.dnum == 0


def compute_time(shape: BatchShape, hw: HardwareProfile) -> float:
    a_lin, a_attn, _, _, _ = hw.coeffs
    p = shape.plen
    return a_lin * (p + shape.dnum) + a_attn * (shape.prefill_ctx_sum + p * p / 2.0)


def memory_time(shape: BatchShape, hw: HardwareProfile) -> float:
    _, _, w, b, _ = hw.coeffs
    return w + b * (shape.dnum * shape.ctx + shape.plen)


def batch_latency(shape: BatchShape, hw: HardwareProfile) -> float:
    a_lin, a_attn, w, b, o = hw.coeffs
    p = shape.plen
    comp = a_lin * (p + shape.dnum) + a_attn * (shape.prefill_ctx_sum + p * p / 2.0)
    mem = w + b * (shape.dnum * shape.ctx + p)
    return (comp if comp > mem else mem) + o


def transfer_time(tokens: int, hw: HardwareProfile) -> float:
    if tokens <= 0:
        return 0.0
    return hw.link_latency_ms + tokens * hw.kv_bytes_per_token / hw.link_bw_bytes_per_ms


def noise_factor(rng: np.random.Generator, sigma: float) -> float:
    """Mean-one lognormal multiplier."""
    if sigma <= 0:
        return 1.0
    return math.exp(sigma * rng.standard_normal() - 0.5 * sigma * sigma)


# calibration -------------------------------------------------------------

PARAM_NAMES = ("ms_per_linear_token", "ms_per_attention_pair", "weight_read_ms", "ms_per_kv_token",
               "fixed_overhead_ms")


@dataclass
class CalibrationReport:
    residuals: list[float]
    rms: float
    max_abs: float
    regimes: list[str] = field(default_factory=list)


class SingularFitError(ValueError):
    pass


def _features(shape: BatchShape) -> tuple[float, float, float]:
    p = shape.plen
    return float(p + shape.dnum), shape.prefill_ctx_sum + p * p / 2.0, shape.dnum * shape.ctx + p


def _design(feats: np.ndarray, compute_mask: np.ndarray) -> np.ndarray:
    n = len(feats)
    a = np.zeros((n, 5))
    c = compute_mask
    a[c, 0] = feats[c, 0]
    a[c, 1] = feats[c, 1]
    a[~c, 2] = 1.0
    a[~c, 3] = feats[~c, 2]
    a[:, 4] = 1.0
    return a


def _predict(theta: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    comp = theta[0] * feats[:, 0] + theta[1] * feats[:, 1]
    mem = theta[2] + theta[3] * feats[:, 2]
    return np.maximum(comp, mem) + theta[4], comp >= mem


def _check_rank(a: np.ndarray) -> None:
    scale = np.linalg.norm(a, axis=0)
    scale[scale == 0] = 1.0
    u, sv, vt = np.linalg.svd(a / scale, full_matrices=True)
    tol = max(a.shape) * np.finfo(float).eps * (sv[0] if len(sv) else 1.0) * 1e3
    rank = int(np.sum(sv > tol))
    if rank < a.shape[1]:
        null = vt[rank:]
        weight = np.abs(null).max(axis=0)
        names = [PARAM_NAMES[i] for i in np.argsort(-weight) if weight[i] > 1e-6]
        raise SingularFitError(
            f"calibration targets leave {a.shape[1] - rank} direction(s) unidentified; "
            f"involved parameters: {', '.join(names)}")


def calibrate(targets: Sequence[tuple[BatchShape, float]], base: Optional[HardwareProfile] = None,
              max_iter: int = 50) -> tuple[HardwareProfile, CalibrationReport]:
    """Non-negative least-squares fit of the roofline coefficients to (shape, latency) targets.

    The flop rate, KV bytes per token and link parameters are taken from
    ``base``; the fit determines linear and attention flop counts, bandwidth,
    weight bytes and the fixed overhead. Each target is assigned to the
    compute or memory regime by alternating fits.
    """
    if len(targets) < 4:
        raise ValueError(f"calibration needs at least 4 targets, got {len(targets)}")
    base = base or default_profile()
    feats = np.array([_features(s) for s, _ in targets], dtype=float)
    y = np.array([t for _, t in targets], dtype=float)

    starts = [feats[:, 0] > np.median(feats[:, 0]), feats[:, 1] > 0, feats[:, 2] < np.median(feats[:, 2])]
    theta0 = np.array(base.coeffs)
    starts.append(_predict(theta0, feats)[1])
    best = None
    last_error: Optional[SingularFitError] = None
    for mask in starts:
        mask = np.asarray(mask, dtype=bool)
        seen = set()
        for _ in range(max_iter):
            key = mask.tobytes()
            if key in seen:
                break
            seen.add(key)
            a = _design(feats, mask)
            try:
                _check_rank(a)
            except SingularFitError as exc:
                last_error = exc
                break
            theta = lsq_linear(a, y, bounds=(0.0, np.inf)).x
            pred, mask = _predict(theta, feats)
            err = float(np.sqrt(np.mean((pred - y) ** 2)))
            if best is None or err < best[0]:
                best = (err, theta.copy(), mask.copy())
    if best is None:
        raise last_error or SingularFitError("calibration failed")
    _, theta, mask = best
    if np.any(theta[[0, 2, 3]] <= 0):
        raise SingularFitError(f"fit produced non-physical coefficients {theta.tolist()}; "
                               f"targets do not constrain both regimes")
    pred, mask = _predict(theta, feats)
    bw = base.kv_bytes_per_token / theta[3]
    prof = replace(
        base,
        c_lin=float(theta[0] * base.flops_per_ms),
        c_attn=float(theta[1] * base.flops_per_ms),
        mem_bw_bytes_per_ms=float(bw),
        weight_bytes=float(theta[2] * bw),
        fixed_overhead_ms=float(theta[4]),
    )
    res = (pred - y).tolist()
    report = CalibrationReport(res, float(np.sqrt(np.mean(np.square(res)))), float(np.max(np.abs(res))),
                               ["compute" if m else "memory" for m in mask])
    return prof, report

"""Runtime latency table keyed by bucketed batch shape.

Keys are geometric buckets of (plen, ctx, dnum, pctx). ``pctx`` is the mean
cached prefix seen by the batch's prefill tokens (prefill_ctx_sum / plen); it
defaults to zero so three-argument calls behave like a plain
(plen, ctx, dnum) table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional

from splitserve.costmodel import BatchShape, HardwareProfile, batch_latency


def bucket_index(v: float, factor: int = 2) -> int:
    """0 for v < 1, otherwise floor(log_factor(v)) + 1."""
    if v < 1:
        return 0
    iv = int(v)
    if factor == 2:
        return iv.bit_length()
    b = int(math.log(iv, factor))
    while factor ** (b + 1) <= iv:
        b += 1
    while factor ** b > iv:
        b -= 1
    return b + 1


def bucket_lo(b: int, factor: int = 2) -> int:
    return 0 if b <= 0 else factor ** (b - 1)


def bucket_hi(b: int, factor: int = 2) -> int:
    return 0 if b <= 0 else factor ** b - 1


@dataclass
class TableConfig:
    bucket_factor: int = 2
    ema_alpha: float = 0.3
    default_budget: int = 512
    interpolate: bool = True
    max_plen: int = 32768
    use_prefix_dim: bool = True

    def __post_init__(self):
        if self.bucket_factor < 2:
            raise ValueError("bucket_factor must be >= 2")
        if not 0 < self.ema_alpha <= 1:
            raise ValueError("ema_alpha must be in (0, 1]")
        if self.default_budget < 0:
            raise ValueError("default_budget must be >= 0")


@lru_cache(maxsize=16)
def _seed_entries(hw: HardwareProfile, factor: int, max_plen: int, max_ctx: int, max_dnum: int,
                  max_pctx: int, use_prefix: bool) -> dict:
    """Cost-model values at each bucket's pessimistic corner.

    plen takes the bucket's lower edge (the scan reports budgets at lower
    edges); ctx, dnum and pctx take the upper edge.
    """
    out = {}
    nb_p = bucket_index(max_plen, factor)
    nb_c = bucket_index(max_ctx, factor)
    nb_d = bucket_index(max_dnum, factor)
    nb_q = bucket_index(max_pctx, factor) if use_prefix else 0
    for pb in range(nb_p + 1):
        plen = bucket_lo(pb, factor)
        for db in range(nb_d + 1):
            dnum = min(bucket_hi(db, factor), max_dnum)
            for cb in range(nb_c + 1):
                if db == 0 and cb > 0:
                    continue
                if plen == 0 and dnum == 0:
                    continue
                ctx = bucket_hi(cb, factor) if dnum else 0
                for qb in range(nb_q + 1 if plen else 1):
                    pctx = bucket_hi(qb, factor)
                    shape = BatchShape(plen, dnum, float(ctx), plen * pctx)
                    out[(pb, cb, db, qb)] = (batch_latency(shape, hw), 1)
    return out


class ProfileTable:
    def __init__(self, cfg: Optional[TableConfig] = None, base: Optional[dict] = None):
        self.cfg = cfg or TableConfig()
        self._base = base if base is not None else {}
        self._own: dict = {}
        f = self.cfg.bucket_factor
        self._f = f
        self._max_pb = bucket_index(self.cfg.max_plen, f)

    @classmethod
    def seeded(cls, hw: HardwareProfile, cfg: Optional[TableConfig] = None, max_ctx: int = 65536,
               max_dnum: int = 256, max_pctx: int = 32768) -> "ProfileTable":
        cfg = cfg or TableConfig()
        base = _seed_entries(hw, cfg.bucket_factor, cfg.max_plen, max_ctx, max_dnum, max_pctx,
                             cfg.use_prefix_dim)
        return cls(cfg, base)

    # keys -----------------------------------------------------------------

    def key(self, plen: float, ctx: float, dnum: int, pctx: float = 0.0) -> tuple[int, int, int, int]:
        f = self._f
        if f == 2:
            pb = int(plen).bit_length() if plen >= 1 else 0
            cb = int(ctx).bit_length() if (ctx >= 1 and dnum) else 0
            db = int(dnum).bit_length() if dnum >= 1 else 0
            qb = int(pctx).bit_length() if (pctx >= 1 and pb and self.cfg.use_prefix_dim) else 0
            return pb, cb, db, qb
        pb = bucket_index(plen, f)
        return (pb, bucket_index(ctx, f) if dnum else 0, bucket_index(dnum, f),
                bucket_index(pctx, f) if (pb and self.cfg.use_prefix_dim) else 0)

    def _get(self, k) -> Optional[float]:
        v = self._own.get(k)
        if v is None:
            v = self._base.get(k)
            if v is None:
                return None
        return v[0]

    # operations -------------------------------------------------------------

    def record(self, plen: float, ctx: float, dnum: int, time: float, pctx: float = 0.0) -> None:
        if not time > 0:
            raise ValueError(f"recorded time must be > 0, got {time}")
        k = self.key(plen, ctx, dnum, pctx)
        cur = self._own.get(k)
        if cur is None:
            b = self._base.get(k)
            if b is None:
                self._own[k] = [time, 1]
                return
            cur = [b[0], b[1]]
            self._own[k] = cur
        a = self.cfg.ema_alpha
        cur[0] = a * time + (1.0 - a) * cur[0]
        cur[1] += 1

    def record_shape(self, shape: BatchShape, time: float) -> None:
        pctx = shape.prefill_ctx_sum / shape.plen if shape.plen else 0.0
        self.record(shape.plen, shape.ctx, shape.dnum, time, pctx)

    def lookup(self, plen: float, ctx: float, dnum: int, pctx: float = 0.0) -> Optional[float]:
        return self.lookup_key(self.key(plen, ctx, dnum, pctx))

    def lookup_key(self, k: tuple[int, int, int, int]) -> Optional[float]:
        v = self._get(k)
        if v is not None:
            return v
        return self._neighbor_estimate(k)

    def _neighbor_estimate(self, k) -> Optional[float]:
        pb, cb, db, qb = k
        best = None
        for dp in (0, 1):
            p2 = pb - dp
            if p2 < 0:
                continue
            scale = float(self._f ** dp)
            for c2 in (cb, cb + 1):
                for d2 in (db, db + 1):
                    for q2 in (qb, qb + 1):
                        if dp == 0 and c2 == cb and d2 == db and q2 == qb:
                            continue
                        v = self._get((p2, c2, d2, q2))
                        if v is not None and (best is None or v * scale > best):
                            best = v * scale
        return best

    def max_prefill_allowed(self, slo: float, ctx: float, dnum: int, pctx: float = 0.0) -> int:
        """Largest prefill token count whose estimated batch latency stays within ``slo``."""
        if not slo > 0:
            raise ValueError("slo must be > 0")
        _, cb, db, qb = self.key(1, ctx, dnum, pctx)
        informed = False
        if dnum:
            base = self.lookup_key((0, cb, db, 0))
            if base is not None:
                if base > slo:
                    return 0
        f = self._f
        upper = None
        for pb in range(self._max_pb, 0, -1):
            e = self.lookup_key((pb, cb, db, qb))
            if e is None:
                continue
            informed = True
            if e <= slo:
                lo = bucket_lo(pb, f)
                if self.cfg.interpolate and upper is not None and upper[0] == pb + 1:
                    span = bucket_lo(pb + 1, f) - lo
                    frac = (slo - e) / (upper[1] - e)
                    return lo + int(frac * span)
                return lo
            upper = (pb, e)
        return 0 if informed else self.cfg.default_budget

    # introspection / io ---------------------------------------------------

    def items(self) -> Iterator[tuple[tuple[int, int, int, int], float, int]]:
        keys = set(self._base) | set(self._own)
        for k in sorted(keys):
            v = self._own.get(k) or self._base[k]
            yield k, v[0], v[1]

    def __len__(self) -> int:
        return len(set(self._base) | set(self._own))

    def overlay(self) -> "ProfileTable":
        """A copy whose writes never reach this table."""
        t = ProfileTable(self.cfg, self._base)
        t._own = _OverlayDict(self._own)
        return t

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["plen_bucket", "ctx_bucket", "dnum_bucket", "pctx_bucket", "ema_ms", "count"])
            for k, v, n in self.items():
                w.writerow([*k, repr(v), n])

    @classmethod
    def load_csv(cls, path, cfg: Optional[TableConfig] = None) -> "ProfileTable":
        t = cls(cfg)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                k = (int(row["plen_bucket"]), int(row["ctx_bucket"]), int(row["dnum_bucket"]),
                     int(row["pctx_bucket"]))
                t._own[k] = [float(row["ema_ms"]), int(row["count"])]
        return t


class _OverlayDict(dict):
    """Copy-on-write view: reads fall through to the parent, writes stay local."""

    def __init__(self, parent: dict):
        super().__init__()
        self._parent = parent

    def get(self, k, default=None):
        v = dict.get(self, k)
        if v is None:
            v = self._parent.get(k)
            if v is None:
                return default
            v = [v[0], v[1]]
            dict.__setitem__(self, k, v)
        return v

    def __iter__(self):
        return iter(set(dict.keys(self)) | set(self._parent))

    def __len__(self):
        return len(set(dict.keys(self)) | set(self._parent))

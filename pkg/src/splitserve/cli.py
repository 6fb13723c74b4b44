"""Command line entry point: run, sweep-split, capacity, replay, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from splitserve import experiments as ex
from splitserve.config import ConfigError, ExperimentConfig, load_config
from splitserve.engine import DeadlockError, InvariantError
from splitserve.metrics import write_csv, write_jsonl
from splitserve.workload import TraceError

log = logging.getLogger("splitserve")

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _out_dir(cfg: ExperimentConfig, override) -> Path:
    p = Path(override or cfg.output.dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _header(cfg: ExperimentConfig, cmd: str) -> str:
    return f"# splitserve {cmd} seed={cfg.seed} workload_seed={cfg.workload.seed} policy={cfg.system.policy}"


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join(_fmt(r[k]) for k in keys))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cmd_run(cfg: ExperimentConfig, args) -> int:
    result, summ = ex.run_config(cfg)
    out = _out_dir(cfg, args.out)
    write_jsonl(result, out / "requests.jsonl", summ.to_dict())
    row = {"policy": cfg.system.policy, "qps": cfg.workload.rate_qps, **summ.to_dict(), "digest": result.digest()}
    write_csv([row], out / "summary.csv")
    print(_header(cfg, "run"))
    print(json.dumps(row, indent=2))
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    if cfg.cluster.n_instances != 2:
        log.info("sweep-split always uses a 2-instance cluster")
    points = None
    if args.step:
        cfg = replace(cfg, sweep=replace(cfg.sweep, step=args.step))
    rows = ex.split_sweep(cfg, args.prompt, args.decode, points, with_aps=not args.no_aps)
    out = _out_dir(cfg, args.out)
    write_csv(rows, out / f"sweep_P{args.prompt}_D{args.decode}.csv")
    print(_header(cfg, "sweep-split"))
    _print_rows(rows)
    return 0


def _capacity_row(cfg: ExperimentConfig, policy: str) -> dict:
    t0 = time.perf_counter()
    res = ex.find_policy_capacity(cfg, policy, log=log.info)
    return {"policy": policy, "capacity_qps": res.qps, "report": res.describe(), "chunk_size": res.chunk_size,
            "probes": len(res.probes),
            "seconds": round(time.perf_counter() - t0, 1)}


def cmd_capacity(cfg: ExperimentConfig, args) -> int:
    policies = args.policies.split(",") if args.policies else list(cfg.capacity.policies)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_capacity_row, [cfg] * len(policies), policies))
    else:
        rows = [_capacity_row(cfg, p) for p in policies]
    out = _out_dir(cfg, args.out)
    write_csv(rows, out / "capacity.csv")
    print(_header(cfg, "capacity"))
    _print_rows(rows)
    return 0


def cmd_replay(cfg: ExperimentConfig, args) -> int:
    trace = args.trace or cfg.workload.trace_path
    if not trace:
        raise ConfigError("replay needs --trace or workload.trace_path")
    horizon = args.horizon_min * 60_000.0 if args.horizon_min else None
    rows = ex.replay(cfg, trace, args.bucket_min, horizon_ms=horizon)
    out = _out_dir(cfg, args.out)
    write_csv(rows, out / "replay.csv")
    print(_header(cfg, "replay"))
    _print_rows(rows)
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    rows = ex.ablate(cfg)
    out = _out_dir(cfg, args.out)
    write_csv(rows, out / "ablation.csv")
    print(_header(cfg, "ablate"))
    _print_rows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitserve", description="Split-request LLM serving simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. workload.rate_qps=3")
        p.add_argument("--out", help="output directory (default: output.dir)")

    p = sub.add_parser("run", help="one simulation")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-split", help="throughput against forced split position")
    common(p)
    p.add_argument("--prompt", type=int, default=1024)
    p.add_argument("--decode", type=int, default=1024)
    p.add_argument("--step", type=int)
    p.add_argument("--no-aps", action="store_true", help="skip the searched-split reference row")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("capacity", help="max QPS under the SLO for each policy")
    common(p)
    p.add_argument("--policies", help="comma list, default from capacity.policies")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("replay", help="time-bucketed goodput over a trace")
    common(p)
    p.add_argument("--trace")
    p.add_argument("--bucket-min", type=float, default=6.0)
    p.add_argument("--horizon-min", type=float)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ablate", help="SLO-aware batching and chunked transfer ablations")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(cfg, args)
    except (ConfigError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, DeadlockError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

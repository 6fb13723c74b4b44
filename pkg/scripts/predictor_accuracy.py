"""Predicted vs simulated completion of a cluster snapshot once no new requests arrive."""

import argparse
import statistics

from splitserve import experiments as ex
from splitserve.config import load_config
from splitserve.metrics import write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default="configs/symmetric.yaml")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--snapshots", type=int, default=100)
    ap.add_argument("--out", default="out/predictor_accuracy.csv")
    args = ap.parse_args()
    cfg = load_config(args.config, args.overrides)
    rows = ex.predictor_accuracy(cfg, args.snapshots, cfg.seed)
    write_csv(rows, args.out)
    errs = [r["rel_err"] for r in rows]
    print(f"{len(rows)} snapshots; max relative error {max(errs):.2%}; median {statistics.median(errs):.2%}"
          f" -> {args.out}")


if __name__ == "__main__":
    main()

"""Paired comparison of the intervention model against the n=0 baseline.

Trains both models per seed on the confounded split and reports PCK on the
decorrelated split, then a paired bootstrap over seeds.

    python3 scripts/deconfounding.py --seeds 0 1 2 3 4 --out results/deconf.jsonl
"""

import argparse
import json
import time

from causalpose.experiment import paired_bootstrap, run, splits
from causalpose.synthbench import BenchConfig
from causalpose.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--joint-jitter", type=float, default=BenchConfig().joint_jitter)
    ap.add_argument("--out")
    args = ap.parse_args()
    bench = BenchConfig(joint_jitter=args.joint_jitter)
    rows = []
    fh = open(args.out, "w") if args.out else None
    for seed in args.seeds:
        train, test = splits(seed, bench)
        rec = {"seed": seed}
        for label, n in (("cim", args.n), ("baseline", 0)):
            start = time.perf_counter()
            res = run(seed, TrainConfig(n=n, epochs=args.epochs), train, test)
            rec[label] = {"test_pck": res.test_pck, "train_pck": res.train_pck,
                          "seconds": round(time.perf_counter() - start, 1)}
        rec["diff"] = rec["cim"]["test_pck"] - rec["baseline"]["test_pck"]
        rows.append(rec)
        line = json.dumps(rec, sort_keys=True)
        print(line, flush=True)
        if fh:
            fh.write(line + "\n")
    mean, lo, hi = paired_bootstrap([r["diff"] for r in rows])
    summary = {"mean_diff": mean, "ci_low": lo, "ci_high": hi, "wins": sum(r["diff"] > 0 for r in rows),
               "seeds": len(rows)}
    print(json.dumps(summary, sort_keys=True))
    if fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        fh.close()


if __name__ == "__main__":
    main()

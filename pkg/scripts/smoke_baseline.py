"""Loss reduction on a 50-sample set over 200 iterations at default settings.

Sets the bar used by the trainer test (loss at least halves).

    python3 scripts/smoke_baseline.py
"""

import json

import numpy as np

from causalpose.synthbench import BenchConfig, generate_dataset
from causalpose.trainer import TrainConfig, fit


def main():
    ds = generate_dataset(BenchConfig(n_samples=50, seed=11))
    for n in (0, 2):
        _, log = fit(TrainConfig(epochs=100, n=n), ds)
        totals = np.array([r["total"] for r in log.records])
        print(json.dumps({"n": n, "iterations": len(totals), "first": float(totals[:2].mean()),
                          "last": float(totals[-2:].mean()), "ratio": float(totals[-2:].mean() / totals[:2].mean())}))


if __name__ == "__main__":
    main()

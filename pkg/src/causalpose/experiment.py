"""Shared protocol for the desk-scale deconfounding experiment.

Train on a confounded split, evaluate on a decorrelated split drawn from the
same world. Splits are keyed on the run seed so paired runs see the same data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .synthbench import BenchConfig, PoseDataset, evaluate_pck, generate_dataset
from .trainer import TrainConfig, fit

TRAIN_SEED_BASE = 1000
TEST_SEED_BASE = 5000


def splits(seed: int, bench: BenchConfig | None = None, n_train: int = 5000,
           n_test: int = 2000) -> tuple[PoseDataset, PoseDataset]:
    bench = bench or BenchConfig()
    train = generate_dataset(replace(bench, n_samples=n_train, seed=TRAIN_SEED_BASE + seed, mode="confounded"))
    test = generate_dataset(replace(bench, n_samples=n_test, seed=TEST_SEED_BASE + seed, mode="decorrelated"))
    return train, test


@dataclass
class RunResult:
    seed: int
    n: int
    test_pck: float
    train_pck: float
    model: object
    log: object


def run(seed: int, cfg: TrainConfig, train: PoseDataset, test: PoseDataset, radius: float = 0.05) -> RunResult:
    model, log = fit(replace(cfg, seed=seed), train)
    test_pck = evaluate_pck(model, test, radius)["overall"]
    train_pck = evaluate_pck(model, train.subset(np.arange(min(len(train), len(test)))), radius)["overall"]
    return RunResult(seed, cfg.n, test_pck, train_pck, model, log)


def paired_bootstrap(diffs, resamples: int = 10_000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Mean of paired differences with a percentile bootstrap interval."""
    diffs = np.asarray(diffs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    boots = diffs[rng.integers(0, diffs.size, size=(resamples, diffs.size))].mean(axis=1)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(boots, [tail, 100 - tail])
    return float(diffs.mean()), float(lo), float(hi)

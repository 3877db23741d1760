"""Upper bound for replacement: select exactly the occluded keypoints.

The generator marks decoy blocks with a flag, so an oracle mask can be read
off the input. Training and evaluating with that mask bounds what any learned
selection rule can gain over the n=0 baseline on this benchmark.

    python3 scripts/oracle_selection.py --seed 0
"""

import argparse
import json

import numpy as np

import causalpose.model as model_module
from causalpose.experiment import run, splits
from causalpose.numerics import Tensor
from causalpose.synthbench import BenchConfig
from causalpose.trainer import TrainConfig

_flags = {}


def install_oracle(block: int, K: int):
    encode, select = model_module.encode, model_module.select_intervention

    def remember(x, P):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        _flags["decoy"] = data[:, :K * block].reshape(-1, K, block)[:, :, -1] > 0.5
        return encode(x, P)

    def oracle(scores, strategy):
        return model_module.InterventionMask(_flags["decoy"], strategy)

    model_module.encode, model_module.select_intervention = remember, oracle
    return lambda: setattr(model_module, "encode", encode) or setattr(model_module, "select_intervention", select)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--joint-jitter", type=float, default=BenchConfig().joint_jitter)
    args = ap.parse_args()
    bench = BenchConfig(joint_jitter=args.joint_jitter)
    train, test = splits(args.seed, bench)
    base = run(args.seed, TrainConfig(n=0, epochs=args.epochs), train, test)
    restore = install_oracle(bench.block, train.spec.K)
    try:
        oracle = run(args.seed, TrainConfig(n=1, epochs=args.epochs), train, test)
    finally:
        restore()
    print(json.dumps({"seed": args.seed, "joint_jitter": args.joint_jitter, "baseline": base.test_pck,
                      "oracle": oracle.test_pck, "diff": oracle.test_pck - base.test_pck}, sort_keys=True))


if __name__ == "__main__":
    main()

"""Confounder scores split by occlusion, overall and per keypoint type.

    python3 scripts/score_validation.py --seed 0
"""

import argparse
import json

import numpy as np

from causalpose.experiment import splits
from causalpose.synthbench import confounder_score_validation
from causalpose.trainer import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    train, test = splits(args.seed)
    model, _ = fit(TrainConfig(n=args.n, epochs=args.epochs, seed=args.seed), train)
    print(json.dumps(confounder_score_validation(model, test).as_record(), sort_keys=True))
    scores = model.scores(test.features)
    for k, name in enumerate(test.spec.names):
        occ, vis = scores[test.occluded[:, k], k], scores[~test.occluded[:, k], k]
        print(json.dumps({"keypoint": name, "median_occluded": float(np.median(occ)),
                          "median_visible": float(np.median(vis))}, sort_keys=True))
    sel = model.infer(test.features).mask.selected
    precision = float((sel & test.occluded).sum() / max(sel.sum(), 1))
    print(json.dumps({"selection_precision": precision, "occlusion_rate": float(test.occluded.mean())}))


if __name__ == "__main__":
    main()

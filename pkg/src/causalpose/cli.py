"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 config/input error, 3 data/model mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck, synthbench
from .causal import ScmError, load_scm, random_scm, verify_docalc
from .checkpoint import CheckpointError
from .graph import SkeletonError
from .trainer import ConfigError, TrainConfig, fit, load_checkpoint, load_config

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISMATCH = 0, 1, 2, 3
SCM_TOL = 1e-11
ALIASES = {"lambda": "lam"}


class MismatchError(Exception):
    pass


def _emit(record: dict, fh=None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[ALIASES.get(k.strip(), k.strip())] = v.strip()
    return out


def bench_config(values: dict, base: synthbench.BenchConfig | None = None) -> synthbench.BenchConfig:
    base = base or synthbench.BenchConfig()
    known = {f.name for f in fields(synthbench.BenchConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown bench key(s): {sorted(unknown)}")
    typed = {}
    for k, v in values.items():
        kind = type(getattr(base, k))
        try:
            typed[k] = kind(v)
        except ValueError:
            raise ConfigError(f"{k}: cannot parse {v!r} as {kind.__name__}") from None
    try:
        return replace(base, **typed)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _split_overrides(overrides: dict) -> tuple[dict, dict]:
    train_keys = {f.name for f in fields(TrainConfig)}
    train = {k: v for k, v in overrides.items() if k in train_keys}
    bench = {k.removeprefix("bench."): v for k, v in overrides.items() if k not in train_keys}
    return train, bench


def write_resolved(path: Path, cfg: TrainConfig, bench: synthbench.BenchConfig | None, data: str | None) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["train"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(cfg).items()}
    if bench is not None:
        cp["bench"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(bench).items()}
    if data is not None:
        cp["data"] = {"path": data}
    with open(path, "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg, bench_values = load_config(args.config)
    train_over, bench_over = _split_overrides(_parse_overrides(args.override))
    cfg = cfg.with_overrides(train_over)
    if args.data:
        ds = synthbench.load_dataset(args.data)
        bench = None
    else:
        bench = bench_config({**bench_values, **bench_over})
        ds = synthbench.generate_dataset(bench)
    if cfg.strategy == "topn" and cfg.n > ds.spec.K:
        raise ConfigError(f"n={cfg.n} exceeds K={ds.spec.K}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "resolved_config.cfg", cfg, bench, args.data)
    model, log = fit(cfg, ds, out, resume=args.resume)
    last = log.records[-1] if log.records else {}
    _emit({"command": "train", "out": str(out), "iterations": len(log),
           "final_kpt": last.get("kpt"), "final_total": last.get("total")})
    return EXIT_OK


def _check_compatible(model, ds) -> None:
    if tuple(model.spec.names) != tuple(ds.spec.names) or model.spec.K != ds.spec.K:
        raise MismatchError(f"checkpoint skeleton {model.spec.names} != dataset skeleton {ds.spec.names}")
    if model.cfg.d_in != ds.d_in:
        raise MismatchError(f"checkpoint expects D_in={model.cfg.d_in}, dataset has {ds.d_in}")


def _load_eval_inputs(args):
    model, _, _, _ = load_checkpoint(args.checkpoint)
    ds = synthbench.load_dataset(args.data)
    _check_compatible(model, ds)
    return model, ds


def cmd_eval(args) -> int:
    if args.radius <= 0:
        raise ConfigError("radius must be positive")
    model, ds = _load_eval_inputs(args)
    fh = open(args.out, "w") if args.out else None
    try:
        _emit({"metric": "pck", "radius": args.radius, **synthbench.evaluate_pck(model, ds, args.radius)}, fh)
        if args.enrich is not None:
            n, p = int(args.enrich[0]), float(args.enrich[1])
            if n < 1 or not 0 <= p < 1:
                raise ConfigError("--enrich needs n >= 1 and 0 <= p < 1")
            rep = synthbench.enrichment_analysis(model, ds, n, p)
            _emit({"metric": "enrichment", "n": n, "easy_drop": rep.easy_drop, "kept": rep.kept,
                   "excluded": rep.excluded, "mean_delta": rep.mean_delta,
                   "ci_low": rep.ci_low, "ci_high": rep.ci_high, "units": "normalized"}, fh)
        if args.freq:
            _emit({"metric": "intervention_frequency", **synthbench.intervention_frequency(model, ds)}, fh)
        if args.scores:
            _emit({"metric": "confounder_scores", **synthbench.confounder_score_validation(model, ds).as_record()}, fh)
    finally:
        if fh is not None:
            fh.close()
    return EXIT_OK


def cmd_gen(args) -> int:
    _, bench_values = load_config(args.config) if args.config else (None, {})
    # every override here targets the generator, so "seed" means the data seed
    bench_over = {k.removeprefix("bench."): v for k, v in _parse_overrides(args.override).items()}
    bench = bench_config({**bench_values, **bench_over})
    ds = synthbench.generate_dataset(bench)
    digest = synthbench.save_dataset(ds, args.out)
    _emit({"command": "gen", "out": args.out, "n_samples": len(ds), "sha256": digest})
    return EXIT_OK


def cmd_scm_verify(args) -> int:
    if args.random is not None:
        rng = np.random.default_rng(args.seed)
        scms = [random_scm(rng) for _ in range(args.random)]
    elif args.file:
        scms = [load_scm(args.file)]
    else:
        raise ConfigError("give an SCM file or --random N")
    passed = 0
    worst = {"context": 0.0, "exchange": 0.0, "adjust": 0.0}
    for i, scm in enumerate(scms):
        rep = verify_docalc(scm, tol=SCM_TOL)
        ok = max(rep.context_dev, rep.exchange_dev, rep.adjust_dev) < SCM_TOL
        passed += ok
        worst = {"context": max(worst["context"], rep.context_dev), "exchange": max(worst["exchange"], rep.exchange_dev),
                 "adjust": max(worst["adjust"], rep.adjust_dev)}
        if len(scms) == 1 or not ok:
            _emit({"scm": i, "sizes": list(scm.sizes), "context_max": rep.context_dev, "exchange_max": rep.exchange_dev,
                   "adjust_max": rep.adjust_dev, "skipped": rep.skipped_pairs, "pass": bool(ok)})
    _emit({"checked": len(scms), "passed": passed, "max_context": worst["context"], "max_exchange": worst["exchange"],
           "max_adjust": worst["adjust"], "tolerance": SCM_TOL})
    print(f"{passed}/{len(scms)} PASS")
    return EXIT_OK if passed == len(scms) else EXIT_INTERNAL


def cmd_gradcheck(args) -> int:
    ops = args.op or None
    unknown = [o for o in (ops or []) if o not in gradcheck.OPS]
    if unknown:
        raise ConfigError(f"unknown op(s) {unknown}; choose from {list(gradcheck.OPS)}")
    report = gradcheck.run(ops, seed=args.seed)
    for name, err in report.items():
        _emit({"op": name, "max_rel_error": err, "pass": err < gradcheck.TOLERANCE})
    ok = all(e < gradcheck.TOLERANCE for e in report.values())
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_dump_embeddings(args) -> int:
    model, ds = _load_eval_inputs(args)
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(len(ds), size=min(args.samples, len(ds)), replace=False))
    F = model.embed(ds.features[idx])
    names = model.spec.names
    with open(args.out, "w") as fh:
        for k, row in enumerate(model.params["Z"]):
            fh.write(json.dumps({"kind": "Z", "keypoint": k, "name": names[k], "values": row.tolist()}) + "\n")
        for r, i in enumerate(idx):
            for k in range(model.spec.K):
                fh.write(json.dumps({"kind": "F", "sample": int(i), "keypoint": k, "name": names[k],
                                     "context": int(ds.context[i]), "occluded": bool(ds.occluded[i, k]),
                                     "values": F[r, k].tolist()}) + "\n")
    _emit({"command": "dump-embeddings", "out": args.out, "z_rows": model.spec.K, "f_rows": len(idx) * model.spec.K})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causalpose")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; writes checkpoint, log and resolved config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset file; generated from [bench] when omitted")
    t.add_argument("--override", action="append", metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCK and optional analyses on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--radius", type=float, default=0.05)
    e.add_argument("--enrich", nargs=2, metavar=("N", "P"))
    e.add_argument("--freq", action="store_true")
    e.add_argument("--scores", action="store_true", help="confounder-score split by occlusion")
    e.add_argument("--out", help="also write records to this file")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen", help="generate a benchmark dataset file")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--override", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("scm-verify", help="check backdoor adjustment and do-calculus steps")
    s.add_argument("file", nargs="?")
    s.add_argument("--random", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scm_verify)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op", action="append")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-embeddings", help="write Z rows and sampled F rows")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--samples", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MismatchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, ScmError, SkeletonError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

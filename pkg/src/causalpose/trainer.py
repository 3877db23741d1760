"""Joint optimisation of the network parameters and the canonical table Z."""

from __future__ import annotations

import configparser
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numerics as nm
from .graph import SkeletonSpec
from .model import ModelConfig, PoseModel, Strategy, forward, predict, reason, encode
from .objective import DEFAULT_LAMBDA, GroundTruthEncoding, consistency_loss, encode_targets, keypoint_loss, total_loss
from .synthbench import PoseDataset


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_iters: int = 100
    min_lr_ratio: float = 0.05
    grad_clip_norm: float = 35.0
    lam: float = DEFAULT_LAMBDA
    strategy: str = "topn"
    n: int = 2
    tau: float = 0.75
    seed: int = 0
    d_emb: int = 32
    hidden: int = 64
    bins: int = 32
    sigma_bins: float = 1.0
    probe_weight: float = 1.0
    probe_detach: bool = True
    aug_occlusion_rate: float = 0.0
    stage2_epoch: int = 0
    stage2_aug_occlusion_rate: float = 0.0
    checkpoint_every: int = 1

    def __post_init__(self):
        positive = ("epochs", "batch_size", "lr", "bins", "d_emb", "hidden", "grad_clip_norm", "sigma_bins")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "warmup_iters", "lam", "n", "probe_weight",
                     "aug_occlusion_rate", "stage2_epoch", "stage2_aug_occlusion_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError("min_lr_ratio must lie in [0, 1]")
        if self.strategy not in ("topn", "threshold"):
            raise ConfigError(f"strategy must be topn or threshold, got {self.strategy!r}")

    @property
    def strategy_spec(self) -> Strategy:
        return Strategy(self.strategy, self.n, self.tau)

    def model_config(self, d_in: int, K: int) -> ModelConfig:
        return ModelConfig(d_in=d_in, n_keypoints=K, hidden=self.hidden, d_emb=self.d_emb,
                           bins_x=self.bins, bins_y=self.bins)

    def aug_rate(self, epoch: int) -> float:
        if self.stage2_epoch and epoch >= self.stage2_epoch:
            return self.stage2_aug_occlusion_rate
        return self.aug_occlusion_rate

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return parse_config_values({**asdict(self), **overrides})


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    text = str(v).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def parse_config_values(values: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    typed = {}
    for k, v in values.items():
        kind = type(getattr(TrainConfig(), k))
        try:
            typed[k] = _parse_bool(v) if kind is bool else kind(v) if kind is not int else int(str(v))
        except ValueError:
            raise ConfigError(f"{k}: cannot parse {v!r} as {kind.__name__}") from None
    return TrainConfig(**typed)


def load_config(path: str | Path) -> tuple[TrainConfig, dict]:
    """Read ``[train]`` (and optional ``[bench]``) key-value sections."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        ok = cp.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    if not ok:
        raise ConfigError(f"{path}: cannot read config")
    extra = set(cp.sections()) - {"train", "bench"}
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")
    train = parse_config_values(dict(cp["train"])) if "train" in cp else TrainConfig()
    bench = dict(cp["bench"]) if "bench" in cp else {}
    return train, bench


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def learning_rate(cfg: TrainConfig, it: int, total_iters: int) -> float:
    """Linear warm-up over ``warmup_iters`` then cosine decay to ``min_lr_ratio * lr``."""
    if it < cfg.warmup_iters:
        return cfg.lr * (it + 1) / cfg.warmup_iters
    floor = cfg.lr * cfg.min_lr_ratio
    span = max(total_iters - cfg.warmup_iters, 1)
    progress = min((it - cfg.warmup_iters) / span, 1.0)
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float, bool]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm, True
    return grads, norm, False


def optimizer_step(params, grads, state: AdamWState, cfg: TrainConfig, it: int, total_iters: int) -> dict:
    """One AdamW update in place, after global-norm clipping."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nm.NonFiniteError(f"non-finite gradient in parameter {k!r} at iteration {it}")
    grads, norm, clipped = clip_grads(grads, cfg.grad_clip_norm)
    lr = learning_rate(cfg, it, total_iters)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p -= lr * cfg.weight_decay * p
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return {"lr": lr, "grad_norm": norm, "clipped": clipped}


# ---------------------------------------------------------------- steps


@dataclass
class Batch:
    x: np.ndarray
    gt: GroundTruthEncoding


def make_batch(ds: PoseDataset, idx, cfg: TrainConfig, epoch: int = 0) -> Batch:
    rate = cfg.aug_rate(epoch)
    if rate > 0:
        x, _ = ds.with_extra_occlusion(idx, rate, cfg.seed, epoch)
    else:
        x = ds.features[idx]
    gt = encode_targets(ds.coords[idx], ds.visibility[idx], cfg.sigma_bins, cfg.bins)
    return Batch(x, gt)


def _grads(P: dict[str, nm.Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}


def compute_step(params: dict[str, np.ndarray], batch: Batch, spec: SkeletonSpec, cfg: TrainConfig):
    """Losses and gradients for one mini-batch (no parameter update).

    L = L_kpt + lam * L_cf drives every parameter. The scoring head is fitted
    separately: its KL loss sees sg[F], so it only reaches the score.* weights.
    """
    strategy = cfg.strategy_spec
    P = {k: nm.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    need_obs = not strategy.is_null or cfg.lam > 0
    out = forward(P, batch.x, spec, strategy, observational=need_obs, detach_scores=cfg.probe_detach)
    l_kpt = keypoint_loss(batch.gt, out.pred)
    l_cf = consistency_loss(out.pred_obs, out.pred, out.mask) if need_obs else nm.Tensor(0.0)
    loss = total_loss(l_kpt, l_cf, cfg.lam)
    objective = loss
    probe = None
    if out.score_dists is not None and cfg.probe_weight > 0:
        probe = keypoint_loss(batch.gt, out.score_dists)
        objective = loss + nm.scale(probe, cfg.probe_weight)
    nm.backward(objective)
    record = {"kpt": l_kpt.item(), "cf": l_cf.item(), "total": loss.item(),
              "probe": probe.item() if probe is not None else None,
              "counts": out.mask.selected.sum(axis=0).astype(int).tolist()}
    return record, _grads(P), out


def supervised_step(params: dict[str, np.ndarray], batch: Batch, spec: SkeletonSpec):
    """Plain supervised reference: encode -> graph reasoning -> head -> L_kpt."""
    P = {k: nm.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    F = encode(batch.x, P)
    _, Fpp = reason(F, spec, P)
    loss = keypoint_loss(batch.gt, predict(Fpp, P))
    nm.backward(loss)
    return {"kpt": loss.item(), "cf": 0.0, "total": loss.item()}, _grads(P)


def train_step(params, state: AdamWState, batch: Batch, spec: SkeletonSpec, cfg: TrainConfig,
               it: int, total_iters: int) -> dict:
    record, grads, _ = compute_step(params, batch, spec, cfg)
    record.update(optimizer_step(params, grads, state, cfg, it, total_iters))
    return record


# ---------------------------------------------------------------- loop


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["iter"] <= self.records[-1]["iter"]:
            raise ValueError("iteration index must increase")
        self.records.append(rec)

    def write(self, path: str | Path, mode: str = "w") -> None:
        with open(path, mode) as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.records)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 17]).permutation(n)


def checkpoint_meta(cfg: TrainConfig, model: PoseModel, epoch: int, state: AdamWState) -> dict:
    return {
        "train": asdict(cfg),
        "model": asdict(model.cfg),
        "strategy": asdict(model.strategy),
        "skeleton": {"names": list(model.spec.names), "edges": [list(e) for e in model.spec.edges],
                     "hyperedges": [[n, list(m)] for n, m in model.spec.hyperedges]},
        "epoch": epoch,
        "step": state.step,
    }


def save_checkpoint(path, model: PoseModel, state: AdamWState, cfg: TrainConfig, epoch: int) -> str:
    tensors = dict(model.params)
    tensors.update({f"opt.m.{k}": v for k, v in state.m.items()})
    tensors.update({f"opt.v.{k}": v for k, v in state.v.items()})
    return checkpoint.save(path, tensors, checkpoint_meta(cfg, model, epoch, state))


def load_checkpoint(path) -> tuple[PoseModel, AdamWState, TrainConfig, int]:
    from .graph import SkeletonSpec as _Spec
    tensors, meta = checkpoint.load(path)
    cfg = parse_config_values(meta["train"])
    sk = meta["skeleton"]
    spec = _Spec(tuple(sk["names"]), tuple(tuple(e) for e in sk["edges"]),
                 tuple((n, tuple(m)) for n, m in sk["hyperedges"]))
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model = PoseModel(ModelConfig(**meta["model"]), spec, Strategy(**meta["strategy"]), params)
    state = AdamWState({k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")},
                       {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")},
                       step=meta["step"])
    return model, state, cfg, meta["epoch"]


def fit(cfg: TrainConfig, ds: PoseDataset, out_dir: str | Path | None = None,
        resume: str | Path | None = None, stop_after_epoch: int | None = None,
        supervised_only: bool = False, progress=None) -> tuple[PoseModel, TrainLog]:
    """Full training loop with seeded shuffling and per-epoch checkpoints.

    ``supervised_only`` swaps in :func:`supervised_step` (the no-intervention
    reference). ``stop_after_epoch`` ends early, leaving a resumable checkpoint.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    spec = ds.spec
    if cfg.strategy == "topn" and cfg.n > spec.K:
        raise ConfigError(f"n={cfg.n} exceeds the skeleton's K={spec.K}")
    if resume is not None:
        model, state, saved_cfg, done = load_checkpoint(resume)
        if asdict(saved_cfg) != asdict(cfg):
            raise ConfigError("resume config differs from the checkpointed config")
        start = done + 1
    else:
        model = PoseModel(cfg.model_config(ds.d_in, spec.K), spec, cfg.strategy_spec, seed=cfg.seed)
        state = AdamWState.zeros_like(model.params)
        start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    per_epoch = batches_per_epoch(len(ds), cfg.batch_size)
    total = cfg.epochs * per_epoch
    log = TrainLog()
    for epoch in range(start, cfg.epochs):
        order = epoch_order(cfg.seed, epoch, len(ds))
        for b in range(per_epoch):
            it = epoch * per_epoch + b
            batch = make_batch(ds, order[b * cfg.batch_size:(b + 1) * cfg.batch_size], cfg, epoch)
            if supervised_only:
                rec, grads = supervised_step(model.params, batch, spec)
                rec.update(optimizer_step(model.params, grads, state, cfg, it, total))
            else:
                rec = train_step(model.params, state, batch, spec, cfg, it, total)
            rec.update(iter=it, epoch=epoch, t=time.time())
            log.append(rec)
        if progress is not None:
            progress(epoch, log)
        if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            save_checkpoint(out / "checkpoint.bin", model, state, cfg, epoch)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    if out is not None:
        log.write(out / "train_log.jsonl", mode="a" if resume is not None else "w")
    return model, log

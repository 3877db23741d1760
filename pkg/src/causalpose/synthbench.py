"""Planted-confounder pose benchmark and its evaluation metrics.

Generative story for one sample (a discrete stand-in for the context SCM):

* context ``c`` is uniform over ``n_contexts``;
* pose cluster is ``c`` with probability ``rho + (1 - rho) / n`` in the
  confounded mode and uniform in the decorrelated mode;
* coordinates = cluster template + a shared per-sample shift + joint jitter;
* each keypoint contributes a feature block ``[rbf(x), rbf(y), 1, 0] + noise``
  where ``rbf`` is a radial-basis coordinate code over ``rbf_centres`` centres;
  an occluded keypoint's block is replaced by the decoy
  ``decoy_strength * [rbf(tx), rbf(ty), 0, 1]`` where ``(tx, ty)`` is where that keypoint
  sits in the template of cluster ``c`` -- a cue that is right only as often
  as context predicts pose;
* a context signature ``phi(c)`` is appended.

Mechanism tables (templates, signatures) come from ``world_seed`` so that
train and test splits drawn with different ``seed`` share one world.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .graph import SkeletonSpec, toy_skeleton
from .model import decode_coords

MAGIC = b"CPOSEDST"
VERSION = 1

BASE_POSE = np.array([
    [0.50, 0.15], [0.50, 0.30], [0.38, 0.34], [0.62, 0.34],
    [0.30, 0.52], [0.70, 0.52], [0.42, 0.82], [0.58, 0.82],
])
EXTREMITIES = (4, 5, 6, 7)


@dataclass(frozen=True)
class BenchConfig:
    n_contexts: int = 4
    confound_strength: float = 0.8
    occlusion_rate: float = 0.3
    decoy_strength: float = 1.0
    noise_sigma: float = 0.01
    mode: str = "confounded"
    n_samples: int = 5000
    seed: int = 0
    world_seed: int = 0
    ctx_dim: int = 4
    pose_shift: float = 0.04
    joint_jitter: float = 0.005
    limb_spread: float = 0.14
    core_spread: float = 0.03
    rbf_centres: int = 8

    @property
    def block(self) -> int:
        return 2 * self.rbf_centres + 2

    def __post_init__(self):
        for name in ("confound_strength", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mode not in ("confounded", "decorrelated"):
            raise ValueError(f"mode must be confounded or decorrelated, got {self.mode!r}")
        if self.rbf_centres < 1:
            raise ValueError("rbf_centres must be >= 1")
        if self.n_contexts < 1:
            raise ValueError("n_contexts must be >= 1")


def rbf_code(values, centres: int) -> np.ndarray:
    """Gaussian bumps at evenly spaced centres, width one centre spacing."""
    grid = (np.arange(centres) + 0.5) / centres
    v = np.asarray(values, dtype=np.float64)[..., None]
    return np.exp(-0.5 * ((v - grid) * centres) ** 2)


def coord_block(xy, flags, centres: int) -> np.ndarray:
    """``[rbf(x), rbf(y), flags]`` for an array of ``... x 2`` coordinates."""
    xy = np.asarray(xy, dtype=np.float64)
    flags = np.broadcast_to(np.asarray(flags, dtype=np.float64), xy.shape[:-1] + (2,))
    return np.concatenate([rbf_code(xy[..., 0], centres), rbf_code(xy[..., 1], centres), flags], axis=-1)


@dataclass
class World:
    templates: np.ndarray   # n_contexts x K x 2, one pose cluster per context value
    signatures: np.ndarray  # n_contexts x ctx_dim
    centres: int = 8

    def decoy(self, c: int, k: int, strength: float) -> np.ndarray:
        return strength * coord_block(self.templates[c, k], [0.0, 1.0], self.centres)


def make_world(cfg: BenchConfig, K: int = 8) -> World:
    if K != BASE_POSE.shape[0]:
        raise ValueError("the generator's base pose is defined for the 8-keypoint toy skeleton")
    rng = np.random.default_rng([cfg.world_seed, 7919])
    spread = np.array([cfg.limb_spread if k in EXTREMITIES else cfg.core_spread for k in range(K)])
    templates = BASE_POSE[None] + rng.uniform(-1, 1, size=(cfg.n_contexts, K, 2)) * spread[None, :, None]
    signatures = rng.normal(0, 1, size=(cfg.n_contexts, cfg.ctx_dim))
    return World(np.clip(templates, 0.08, 0.92), signatures, cfg.rbf_centres)


@dataclass
class PoseSample:
    features: np.ndarray
    gt_coords: np.ndarray
    visibility: np.ndarray
    occluded: np.ndarray
    context_id: int
    cluster: int


@dataclass
class PoseDataset:
    features: np.ndarray
    coords: np.ndarray
    visibility: np.ndarray
    occluded: np.ndarray
    context: np.ndarray
    cluster: np.ndarray
    config: BenchConfig
    spec: SkeletonSpec = field(default_factory=toy_skeleton)

    def __len__(self):
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> PoseSample:
        return PoseSample(self.features[i], self.coords[i], self.visibility[i], self.occluded[i],
                          int(self.context[i]), int(self.cluster[i]))

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], coords=self.coords[idx],
                       visibility=self.visibility[idx], occluded=self.occluded[idx],
                       context=self.context[idx], cluster=self.cluster[idx])

    def with_extra_occlusion(self, idx, rate: float, seed: int, epoch: int):
        """Features/occlusion flags for rows ``idx`` with extra synthetic occluders.

        Each row draws from its own generator keyed on (seed, epoch, row), so the
        result does not depend on batch composition.
        """
        feats = self.features[idx].copy()
        occ = self.occluded[idx].copy()
        if rate <= 0:
            return feats, occ
        world = make_world(self.config, self.spec.K)
        for r, i in enumerate(np.asarray(idx)):
            rng = np.random.default_rng([seed, epoch, int(i), 31])
            hit = (rng.random(self.spec.K) < rate) & ~occ[r]
            for k in np.flatnonzero(hit):
                w = self.config.block
                feats[r, k * w:(k + 1) * w] = world.decoy(int(self.context[i]), k, self.config.decoy_strength)
            occ[r] |= hit
        return feats, occ


def _draw(cfg: BenchConfig, world: World, index: int, K: int) -> PoseSample:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.n_contexts
    c = int(rng.integers(n))
    if cfg.mode == "confounded":
        probs = np.full(n, (1.0 - cfg.confound_strength) / n)
        probs[c] += cfg.confound_strength
    else:
        probs = np.full(n, 1.0 / n)
    cluster = int(rng.choice(n, p=probs))
    shift = rng.normal(0, cfg.pose_shift, size=2)
    coords = world.templates[cluster] + shift + rng.normal(0, cfg.joint_jitter, size=(K, 2))
    coords = np.clip(coords, 0.0, 1.0)
    occluded = rng.random(K) < cfg.occlusion_rate
    blocks = coord_block(coords, [1.0, 0.0], cfg.rbf_centres)
    blocks += rng.normal(0, cfg.noise_sigma, size=blocks.shape)
    for k in np.flatnonzero(occluded):
        blocks[k] = world.decoy(c, k, cfg.decoy_strength) + rng.normal(0, cfg.noise_sigma, size=cfg.block)
    ctx = world.signatures[c] + rng.normal(0, cfg.noise_sigma, size=cfg.ctx_dim)
    return PoseSample(np.concatenate([blocks.reshape(-1), ctx]), coords,
                      np.ones(K, dtype=bool), occluded, c, cluster)


def generate_dataset(cfg: BenchConfig, spec: SkeletonSpec | None = None) -> PoseDataset:
    spec = spec or toy_skeleton()
    world = make_world(cfg, spec.K)
    samples = [_draw(cfg, world, i, spec.K) for i in range(cfg.n_samples)]
    return PoseDataset(
        np.stack([s.features for s in samples]),
        np.stack([s.gt_coords for s in samples]),
        np.stack([s.visibility for s in samples]),
        np.stack([s.occluded for s in samples]),
        np.array([s.context_id for s in samples], dtype=np.int64),
        np.array([s.cluster for s in samples], dtype=np.int64),
        cfg, spec,
    )


def mutual_information(a, b) -> float:
    """Plug-in estimate (nats) from paired discrete labels."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    counts = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(counts, (ai, bi), 1)
    p = counts / counts.sum()
    pa, pb = p.sum(1, keepdims=True), p.sum(0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


# ---------------------------------------------------------------- persistence


def _record_dtype(K: int, d_in: int) -> np.dtype:
    return np.dtype([("features", "<f8", (d_in,)), ("coords", "<f8", (K, 2)),
                     ("visibility", "u1", (K,)), ("occluded", "u1", (K,)),
                     ("context", "<i4"), ("cluster", "<i4")])


def save_dataset(ds: PoseDataset, path: str | Path) -> str:
    """Write ``path`` (binary) and ``path.manifest.json``; returns the content hash."""
    path = Path(path)
    K, d_in = ds.spec.K, ds.d_in
    rec = np.zeros(len(ds), dtype=_record_dtype(K, d_in))
    rec["features"], rec["coords"] = ds.features, ds.coords
    rec["visibility"], rec["occluded"] = ds.visibility, ds.occluded
    rec["context"], rec["cluster"] = ds.context, ds.cluster
    data = MAGIC + struct.pack("<IIII", VERSION, len(ds), K, d_in) + rec.tobytes()
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    manifest = {"config": asdict(ds.config), "n_samples": len(ds), "K": K, "d_in": d_in,
                "keypoints": list(ds.spec.names), "sha256": digest,
                "skeleton": {"edges": [list(e) for e in ds.spec.edges],
                             "hyperedges": [[n, list(m)] for n, m in ds.spec.hyperedges]}}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_dataset(path: str | Path, spec: SkeletonSpec | None = None) -> PoseDataset:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, n, K, d_in = struct.unpack_from("<IIII", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rec = np.frombuffer(data, dtype=_record_dtype(K, d_in), count=n, offset=24)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    cfg = BenchConfig(**manifest["config"]) if manifest else BenchConfig(n_samples=n)
    if spec is None and manifest and "skeleton" in manifest:
        sk = manifest["skeleton"]
        spec = SkeletonSpec(tuple(manifest["keypoints"]), tuple(tuple(e) for e in sk["edges"]),
                            tuple((name, tuple(m)) for name, m in sk["hyperedges"]))
    spec = spec or toy_skeleton()
    if spec.K != K:
        raise ValueError(f"{path}: dataset has K={K}, skeleton has K={spec.K}")
    return PoseDataset(rec["features"].copy(), rec["coords"].copy(), rec["visibility"].astype(bool),
                       rec["occluded"].astype(bool), rec["context"].astype(np.int64),
                       rec["cluster"].astype(np.int64), cfg, spec)


# ---------------------------------------------------------------- metrics


def _infer(model, features, batch: int = 512):
    masks, coords = [], []
    for s in range(0, features.shape[0], batch):
        out = model.infer(features[s:s + batch])
        masks.append(out.mask.selected)
        coords.append(decode_coords(out.pred.px, out.pred.py))
    return np.concatenate(coords), np.concatenate(masks)


def pck(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, radius: float, spec: SkeletonSpec) -> dict:
    if radius <= 0:
        raise ValueError("radius must be positive")
    hit = np.linalg.norm(pred - gt, axis=-1) <= radius
    vis = np.asarray(visible, dtype=bool)
    out = {"overall": float(hit[vis].mean()) if vis.any() else float("nan")}
    for name, members in spec.hyperedges:
        sel = vis[:, list(members)]
        out[name] = float(hit[:, list(members)][sel].mean()) if sel.any() else float("nan")
    return out


def evaluate_pck(model, ds: PoseDataset, radius: float = 0.05) -> dict:
    pred, _ = _infer(model, ds.features)
    return pck(pred, ds.coords, ds.visibility, radius, ds.spec)


@dataclass
class EnrichmentReport:
    easy_drop: float
    kept: int
    mean_delta: float
    ci_low: float
    ci_high: float
    excluded: int = 0
    deltas: np.ndarray | None = field(default=None, repr=False)


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    """Row sums accumulated left to right, matching plain scalar loops bit for bit."""
    acc = np.zeros(a.shape[0])
    for k in range(a.shape[1]):
        acc = acc + a[:, k]
    return acc


def instance_deltas(errors, scores, visible, n: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-instance top-n enrichment. Returns (deltas, kept_index, n_excluded).

    T_i is the n highest-scoring visible keypoints (ties to lower index).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    errors, scores = np.asarray(errors, float), np.asarray(scores, float)
    visible = np.asarray(visible, bool)
    masked = np.where(visible, scores, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :n]
    top = np.zeros_like(visible)
    np.put_along_axis(top, order, True, axis=1)
    top &= visible
    rest = visible & ~top
    ok = (top.sum(1) > 0) & (rest.sum(1) > 0)
    with np.errstate(invalid="ignore"):
        d = _ordered_sum(np.where(top, errors, 0)) / top.sum(1) - _ordered_sum(np.where(rest, errors, 0)) / rest.sum(1)
    kept = np.flatnonzero(ok)
    return d[kept], kept, int((~ok).sum())


def enrichment_from_arrays(errors, scores, visible, n: int, easy_drop: float,
                           resamples: int = 1000, seed: int = 0) -> EnrichmentReport:
    deltas, kept, excluded = instance_deltas(errors, scores, visible, n)
    errors, visible = np.asarray(errors, float), np.asarray(visible, bool)
    difficulty = np.where(visible, errors, 0).sum(1) / np.maximum(visible.sum(1), 1)
    difficulty = difficulty[kept]
    drop = int(np.floor(easy_drop * len(deltas)))
    keep = np.argsort(difficulty, kind="stable")[drop:]
    deltas = deltas[keep]
    if deltas.size == 0:
        return EnrichmentReport(easy_drop, 0, float("nan"), float("nan"), float("nan"), excluded, deltas)
    rng = np.random.default_rng(seed)
    boots = deltas[rng.integers(0, deltas.size, size=(resamples, deltas.size))].mean(axis=1)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    mean = float(deltas.mean())
    return EnrichmentReport(easy_drop, int(deltas.size), mean, min(float(lo), mean), max(float(hi), mean),
                            excluded, deltas)


def enrichment_analysis(model, ds: PoseDataset, n: int, easy_drop: float,
                        resamples: int = 1000, seed: int = 0) -> EnrichmentReport:
    pred, _ = _infer(model, ds.features)
    errors = np.linalg.norm(pred - ds.coords, axis=-1)
    return enrichment_from_arrays(errors, model.scores(ds.features), ds.visibility, n, easy_drop, resamples, seed)


@dataclass
class ScoreValidation:
    occluded: dict | None
    visible: dict
    p_value: float | None

    def as_record(self) -> dict:
        return {"occluded": self.occluded, "visible": self.visible, "p_value": self.p_value}


def _summary(x: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {"n": int(x.size), "q1": float(q1), "median": float(med), "q3": float(q3)}


def confounder_score_validation(model, ds: PoseDataset) -> ScoreValidation:
    """Score distribution split by occlusion; one-sided rank-sum p-value (occluded > visible)."""
    s = model.scores(ds.features)
    vis_mask = ds.visibility & ~ds.occluded
    occ = s[ds.occluded]
    vis = s[vis_mask]
    if occ.size == 0:
        return ScoreValidation(None, _summary(vis), None)
    p = float(stats.mannwhitneyu(occ, vis, alternative="greater").pvalue)
    return ScoreValidation(_summary(occ), _summary(vis), p)


def intervention_frequency(model, ds: PoseDataset) -> dict:
    """Fraction of keypoint slots selected for replacement, per hyperedge group."""
    _, masks = _infer(model, ds.features)
    out = {name: float(masks[:, list(members)].mean()) for name, members in ds.spec.hyperedges}
    out["overall"] = float(masks.mean())
    return out

"""Keypoint model with uncertainty-gated embedding replacement.

Pipeline for a batch of observation vectors ``x`` (B x D_in):

    encode -> F (B x K x d)
    score head on sg[F] -> per-keypoint x/y distributions -> confounder scores
    select (top-n or threshold) -> mask M
    F' = (1 - M) * F + M * Z
    intra-part edge conv over the skeleton -> H
    inter-part group attention -> F''
    prediction head -> final x/y distributions

The observational path runs the same graph layers and head on F instead of F'.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numerics as nm
from .graph import SkeletonSpec, checked, complete_graph_table, membership, neighbor_table
from .numerics import Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    n_keypoints: int = 8
    hidden: int = 64
    d_emb: int = 32
    bins_x: int = 32
    bins_y: int = 32
    z_init_std: float = 0.01


@dataclass(frozen=True)
class Strategy:
    """``top-n`` selects exactly n keypoints per instance; ``threshold`` every s_c > tau."""

    kind: str = "topn"
    n: int = 0
    tau: float = 0.75

    def __post_init__(self):
        if self.kind not in ("topn", "threshold"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "topn" and self.n < 0:
            raise ValueError("n must be >= 0")

    @property
    def is_null(self) -> bool:
        return self.kind == "topn" and self.n == 0

    def describe(self) -> str:
        return f"top-n(n={self.n})" if self.kind == "topn" else f"threshold(tau={self.tau})"


@dataclass
class CoordDistributions:
    px: Tensor
    py: Tensor

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.px.data, self.py.data


@dataclass
class InterventionMask:
    selected: np.ndarray
    strategy: Strategy

    @property
    def stable(self) -> np.ndarray:
        return ~self.selected


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    K, d, h = cfg.n_keypoints, cfg.d_emb, cfg.hidden
    return {
        "enc.W0": (cfg.d_in, h),
        "enc.W": (h, K * d),
        "enc.b": (K, d),
        "score.Wx": (K, d, cfg.bins_x), "score.bx": (K, cfg.bins_x),
        "score.Wy": (K, d, cfg.bins_y), "score.by": (K, cfg.bins_y),
        "edge.W": (2 * d, d), "edge.b": (d,),
        "group.W": (2 * d, d), "group.b": (d,),
        "attn.W1": (d, d), "attn.b1": (d,),
        "attn.W2": (d, d), "attn.b2": (d,),
        "head.Wx": (K, d, cfg.bins_x), "head.bx": (K, cfg.bins_x),
        "head.Wy": (K, d, cfg.bins_y), "head.by": (K, cfg.bins_y),
        "Z": (K, d),
    }


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name == "Z":
            out[name] = rng.normal(0.0, cfg.z_init_std, size=shape)
        elif len(shape) == 1 or name in ("enc.b", "score.bx", "score.by", "head.bx", "head.by"):
            out[name] = np.zeros(shape)
        else:
            gain = 2.0 if name == "enc.W0" else 1.0
            out[name] = rng.normal(0.0, np.sqrt(gain / shape[-2]), size=shape)
    return out


# ---------------------------------------------------------------- stages


def encode(x, P: Params) -> Tensor:
    """hidden = relu(x W0); f_k = hidden W_k + b_k."""
    x = nm.as_tensor(x)
    K, d = P["enc.b"].shape
    if x.ndim != 2 or x.shape[1] != P["enc.W0"].shape[0]:
        raise nm.ShapeError("encode", (x.shape, P["enc.W0"].shape), "expected B x D_in input")
    hidden = nm.relu(x @ P["enc.W0"])
    return nm.reshape(hidden @ P["enc.W"], (x.shape[0], K, d)) + P["enc.b"]


def simcc_head(F: Tensor, P: Params, prefix: str) -> CoordDistributions:
    """Per-keypoint linear maps to x and y bin logits, softmax per axis."""
    B, K, d = F.shape
    rows = nm.reshape(F, (B, K, 1, d))

    def axis_dist(W, b):
        logits = nm.reshape(rows @ W, (B, K, W.shape[-1])) + b
        return nm.softmax(logits, axis=-1)

    return CoordDistributions(axis_dist(P[f"{prefix}.Wx"], P[f"{prefix}.bx"]),
                              axis_dist(P[f"{prefix}.Wy"], P[f"{prefix}.by"]))


def confounder_scores(px, py) -> np.ndarray:
    """s_c = 1 - (max P_x + max P_y) / 2 per (instance, keypoint)."""
    px = px.data if isinstance(px, Tensor) else np.asarray(px)
    py = py.data if isinstance(py, Tensor) else np.asarray(py)
    return 1.0 - 0.5 * (px.max(axis=-1) + py.max(axis=-1))


def select_intervention(scores: np.ndarray, strategy: Strategy) -> InterventionMask:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    B, K = scores.shape
    if strategy.kind == "threshold":
        return InterventionMask(scores > strategy.tau, strategy)
    if strategy.n > K:
        raise ValueError(f"top-n with n={strategy.n} exceeds K={K}")
    selected = np.zeros((B, K), dtype=bool)
    if strategy.n:
        # stable sort on -score keeps lower keypoint index first among ties
        order = np.argsort(-scores, axis=1, kind="stable")[:, : strategy.n]
        np.put_along_axis(selected, order, True, axis=1)
    return InterventionMask(selected, strategy)


def counterfactual_replace(F: Tensor, mask: InterventionMask, Z: Tensor) -> Tensor:
    m = mask.selected.astype(np.float64)[..., None]
    return nm.mul(1.0 - m, F) + nm.mul(m, Z)


def edge_conv(X: Tensor, table: np.ndarray, W: Tensor, b: Tensor) -> Tensor:
    """out_i = max_j relu([x_i ; x_j - x_i] W + b) + x_i over the rows of ``table``."""
    if table.shape[1] == 0:
        return X
    n, width = table.shape
    nb = nm.take(X, table, axis=1)
    ctr = nm.take(X, np.repeat(np.arange(n)[:, None], width, axis=1), axis=1)
    msg = nm.relu(nm.concat([ctr, nb - ctr], axis=-1) @ W + b)
    return nm.max_along(msg, axis=2) + X


def intra_part_edgeconv(Fp: Tensor, spec: SkeletonSpec, P: Params) -> Tensor:
    return edge_conv(Fp, neighbor_table(spec), P["edge.W"], P["edge.b"])


def group_gates(H: Tensor, spec: SkeletonSpec, P: Params) -> Tensor:
    """Per-keypoint channel gates: mean over containing groups of sigmoid(psi(g'))."""
    member = membership(spec)
    if np.any(member.sum(axis=0) == 0):
        raise ValueError("every keypoint must belong to at least one hyperedge")
    pool = member / member.sum(axis=1, keepdims=True)
    g = nm.matmul(pool, H)
    g = edge_conv(g, complete_graph_table(len(spec.hyperedges)), P["group.W"], P["group.b"])
    a = nm.sigmoid(nm.relu(g @ P["attn.W1"] + P["attn.b1"]) @ P["attn.W2"] + P["attn.b2"])
    spread = member.T / member.sum(axis=0)[:, None]
    return nm.matmul(spread, a)


def inter_part_attention(H: Tensor, spec: SkeletonSpec, P: Params) -> Tensor:
    return H * group_gates(H, spec, P)


def predict(Fpp: Tensor, P: Params) -> CoordDistributions:
    return simcc_head(Fpp, P, "head")


def decode_coords(px, py) -> np.ndarray:
    """Argmax bin centres in [0, 1]; ties go to the lower bin."""
    px = px.data if isinstance(px, Tensor) else np.asarray(px)
    py = py.data if isinstance(py, Tensor) else np.asarray(py)
    cx = (np.argmax(px, axis=-1) + 0.5) / px.shape[-1]
    cy = (np.argmax(py, axis=-1) + 0.5) / py.shape[-1]
    return np.stack([cx, cy], axis=-1)


# ---------------------------------------------------------------- full pass


@dataclass
class ForwardPass:
    F: Tensor
    mask: InterventionMask
    F_prime: Tensor
    H: Tensor
    F_refined: Tensor
    pred: CoordDistributions
    score_dists: CoordDistributions | None = None
    scores: np.ndarray | None = None
    pred_obs: CoordDistributions | None = None
    extras: dict = field(default_factory=dict)


def reason(Fp: Tensor, spec: SkeletonSpec, P: Params) -> tuple[Tensor, Tensor]:
    H = intra_part_edgeconv(Fp, spec, P)
    return H, inter_part_attention(H, spec, P)


def forward(P: Params, x, spec: SkeletonSpec, strategy: Strategy,
            observational: bool = False,
            hook: Callable[[str, Tensor], Tensor] | None = None,
            detach_scores: bool = True) -> ForwardPass:
    """Counterfactual path, plus the stop-gradient observational target if asked.

    ``hook(name, tensor)`` may replace intermediate tensors; names are
    ``"F"``, ``"obs.H"`` and ``"obs.F_refined"``. Used by tests.
    """
    tap = hook or (lambda name, t: t)
    F = tap("F", encode(x, P))
    B, K, _ = F.shape
    score_dists = scores = None
    if strategy.is_null:
        mask = InterventionMask(np.zeros((B, K), dtype=bool), strategy)
    else:
        score_dists = simcc_head(nm.stop_gradient(F) if detach_scores else F, P, "score")
        scores = confounder_scores(score_dists.px, score_dists.py)
        mask = select_intervention(scores, strategy)
    Fp = counterfactual_replace(F, mask, P["Z"])
    H, Fpp = reason(Fp, spec, P)
    out = ForwardPass(F, mask, Fp, H, Fpp, predict(Fpp, P), score_dists, scores)
    if observational:
        H_obs = tap("obs.H", intra_part_edgeconv(F, spec, P))
        F_obs = tap("obs.F_refined", inter_part_attention(H_obs, spec, P))
        p = predict(F_obs, P)
        out.pred_obs = CoordDistributions(nm.stop_gradient(p.px), nm.stop_gradient(p.py))
    return out


class PoseModel:
    """Parameter arrays plus the static skeleton and strategy used at inference."""

    def __init__(self, cfg: ModelConfig, spec: SkeletonSpec, strategy: Strategy,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        checked(spec)
        if spec.K != cfg.n_keypoints:
            raise ValueError(f"skeleton has K={spec.K}, config expects {cfg.n_keypoints}")
        self.cfg, self.spec, self.strategy = cfg, spec, strategy
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise nm.ShapeError(f"param {k}", (self.params[k].shape, shape))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def infer(self, x) -> ForwardPass:
        """Counterfactual path only; the observational branch is never built."""
        return forward(self.tensors(), np.asarray(x, dtype=np.float64), self.spec, self.strategy)

    def embed(self, x) -> np.ndarray:
        return encode(np.asarray(x, dtype=np.float64), self.tensors()).data

    def scores(self, x) -> np.ndarray:
        P = self.tensors()
        d = simcc_head(encode(np.asarray(x, dtype=np.float64), P), P, "score")
        return confounder_scores(d.px, d.py)

"""Skeleton graph (physical edges) and predefined keypoint groups (hyperedges)."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    hyperedges: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        # normalize: undirected pairs as (lo, hi), deduplicated and sorted
        pairs = sorted({(min(a, b), max(a, b)) for a, b in self.edges})
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in pairs))
        object.__setattr__(self, "hyperedges",
                           tuple((str(n), tuple(sorted({int(i) for i in m}))) for n, m in self.hyperedges))

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.hyperedges)

    def group_of(self, k: int) -> list[int]:
        """Indices of the hyperedges containing keypoint k."""
        return [e for e, (_, members) in enumerate(self.hyperedges) if k in members]


def neighbors(spec: SkeletonSpec, k: int) -> list[int]:
    if not 0 <= k < spec.K:
        raise SkeletonError(f"keypoint {k} out of range 0..{spec.K - 1}")
    out = {b for a, b in spec.edges if a == k} | {a for a, b in spec.edges if b == k}
    return sorted(out)


def validate(spec: SkeletonSpec) -> list[str]:
    """All invariant violations; empty when the skeleton is usable."""
    problems = []
    K = spec.K
    if len(set(spec.names)) != K:
        problems.append("duplicate keypoint names")
    for a, b in spec.edges:
        if not (0 <= a < K and 0 <= b < K):
            problems.append(f"edge ({a}, {b}) out of range")
        elif a == b:
            problems.append(f"self-loop at {a}")
    for name, members in spec.hyperedges:
        if not members:
            problems.append(f"empty hyperedge {name}")
        for i in members:
            if not 0 <= i < K:
                problems.append(f"hyperedge {name} index {i} out of range")
    if len(set(spec.group_names)) != len(spec.hyperedges):
        problems.append("duplicate hyperedge names")
    covered = {i for _, m in spec.hyperedges for i in m}
    for k in range(K):
        if k not in covered:
            problems.append(f"uncovered keypoint {k} ({spec.names[k]})")
    if K and not any(p.endswith("out of range") for p in problems):
        seen, stack = {0}, [0]
        while stack:
            k = stack.pop()
            for j in neighbors(spec, k):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != K:
            problems.append(f"skeleton disconnected: {K - len(seen)} keypoint(s) unreachable from 0")
    return problems


def checked(spec: SkeletonSpec) -> SkeletonSpec:
    problems = validate(spec)
    if problems:
        raise SkeletonError("; ".join(problems))
    return spec


def permute(spec: SkeletonSpec, perm) -> SkeletonSpec:
    """Relabel so that old keypoint k becomes new keypoint perm[k]."""
    perm = list(perm)
    names = [None] * spec.K
    for old, new in enumerate(perm):
        names[new] = spec.names[old]
    return SkeletonSpec(tuple(names),
                        tuple((perm[a], perm[b]) for a, b in spec.edges),
                        tuple((n, tuple(perm[i] for i in m)) for n, m in spec.hyperedges))


def canonical_form(spec: SkeletonSpec):
    """Label-independent form: keypoints renumbered in name order."""
    order = sorted(range(spec.K), key=lambda k: spec.names[k])
    rank = {k: r for r, k in enumerate(order)}
    edges = tuple(sorted(tuple(sorted((rank[a], rank[b]))) for a, b in spec.edges))
    groups = tuple(sorted((n, tuple(sorted(rank[i] for i in m))) for n, m in spec.hyperedges))
    return tuple(spec.names[k] for k in order), edges, groups


def neighbor_table(spec: SkeletonSpec) -> np.ndarray:
    """K x max_degree index array; short rows are padded by repeating a neighbor.

    Repeats leave a max-aggregation unchanged.
    """
    lists = [neighbors(spec, k) for k in range(spec.K)]
    width = max((len(n) for n in lists), default=0)
    table = np.zeros((spec.K, width), dtype=np.intp)
    for k, nb in enumerate(lists):
        if nb:
            table[k] = (nb * width)[:width]
        else:
            table[k] = k
    return table


def complete_graph_table(n: int) -> np.ndarray:
    """Neighbor table of the complete graph on n nodes (no self loops)."""
    if n <= 1:
        return np.zeros((n, 0), dtype=np.intp)
    return np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.intp)


def membership(spec: SkeletonSpec) -> np.ndarray:
    """E x K 0/1 matrix, row e marks the members of hyperedge e."""
    m = np.zeros((len(spec.hyperedges), spec.K))
    for e, (_, members) in enumerate(spec.hyperedges):
        m[e, list(members)] = 1.0
    return m


TOY_NAMES = ("head", "neck", "l_shoulder", "r_shoulder", "l_hand", "r_hand", "l_foot", "r_foot")


def toy_skeleton() -> SkeletonSpec:
    """Eight keypoints: a neck hub with head, arm chains and two feet."""
    return SkeletonSpec(
        TOY_NAMES,
        ((0, 1), (1, 2), (1, 3), (2, 4), (3, 5), (1, 6), (1, 7)),
        (("head", (0, 1)), ("arms", (2, 3, 4, 5)), ("legs", (6, 7)), ("torso", (1, 2, 3))),
    )


def load_skeleton(path: str | Path) -> SkeletonSpec:
    """Parse a skeleton file; grammar in docs/formats.md."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise SkeletonError(f"{path}: cannot read file")
    try:
        sk = cp["skeleton"]
        K = int(sk["K"])
        names = tuple(sk["names"].split())
        edges = []
        for tok in cp["edges"]["pairs"].split():
            a, b = tok.split("-")
            edges.append((int(a), int(b)))
        hyper = tuple((name, tuple(int(v) for v in val.split())) for name, val in cp["hyperedges"].items())
    except (KeyError, ValueError) as err:
        raise SkeletonError(f"{path}: malformed entry {err}") from None
    if len(names) != K:
        raise SkeletonError(f"{path}: K={K} but {len(names)} names given")
    return checked(SkeletonSpec(names, tuple(edges), hyper))


def dump_skeleton(spec: SkeletonSpec, path: str | Path) -> None:
    lines = ["[skeleton]", f"K = {spec.K}", "names = " + " ".join(spec.names), "",
             "[edges]", "pairs = " + " ".join(f"{a}-{b}" for a, b in spec.edges), "", "[hyperedges]"]
    lines += [f"{n} = " + " ".join(str(i) for i in m) for n, m in spec.hyperedges]
    Path(path).write_text("\n".join(lines) + "\n")

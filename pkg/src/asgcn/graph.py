"""Skeleton graphs, the root/centripetal/centrifugal partition and the fixed
graph kernels built from it.

Kernels are plain float64 numpy arrays; layers convert them to tensors.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ParameterError, ParseError, ValidationError

PARTITIONS = ("root", "centripetal", "centrifugal")


@dataclass(frozen=True)
class SkeletonGraph:
    n: int
    bones: Tuple[Tuple[int, int], ...]
    center: int
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "bones", tuple(tuple(int(v) for v in b) for b in self.bones))
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ValidationError(f"graph needs at least one joint, got n={self.n}")
        if not 0 <= self.center < self.n:
            raise ValidationError(f"center {self.center} outside [0, {self.n})")
        seen = set()
        for i, j in self.bones:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValidationError(f"bone ({i}, {j}) has an endpoint outside [0, {self.n})")
            if i == j:
                raise ValidationError(f"self-pair bone ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"duplicate bone ({i}, {j})")
            seen.add(key)
        if self.names is not None and len(self.names) != self.n:
            raise ValidationError(f"{len(self.names)} names for {self.n} joints")
        dist = self.hop_distances()
        if any(d < 0 for d in dist):
            unreached = [k for k, d in enumerate(dist) if d < 0]
            raise ValidationError(f"graph is disconnected; joints {unreached} do not reach the center")

    def neighbors(self) -> List[List[int]]:
        nbrs: List[List[int]] = [[] for _ in range(self.n)]
        for i, j in self.bones:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def hop_distances(self, source: Optional[int] = None) -> List[int]:
        """BFS hop counts from ``source`` (default: the center); -1 if unreachable."""
        source = self.center if source is None else source
        nbrs = self.neighbors()
        dist = [-1] * self.n
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def adjacency(self, self_loops: bool = True) -> np.ndarray:
        a = np.eye(self.n) if self_loops else np.zeros((self.n, self.n))
        for i, j in self.bones:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a

    def to_dict(self) -> dict:
        out = {"n": self.n, "center": self.center, "bones": [list(b) for b in self.bones]}
        if self.names is not None:
            out["names"] = list(self.names)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        try:
            return cls(n=int(d["n"]), bones=[tuple(b) for b in d["bones"]],
                       center=int(d["center"]), names=d.get("names"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ParseError(f"malformed graph definition: {exc}") from exc


@dataclass
class PartitionedAdjacency:
    parts: Dict[str, np.ndarray]
    base: np.ndarray


@dataclass
class GraphKernels:
    sym_norm: Dict[str, np.ndarray]
    transition_powers: Dict[Tuple[str, int], np.ndarray]
    order: int = 1

    def stack(self, family: str = "transition") -> np.ndarray:
        """Kernels as one ``[3 * L, n, n]`` array ordered (l, p), p fastest.

        ``family="sym"`` stacks the symmetric one-hop kernels (L = 1 only).
        """
        if family == "sym":
            return np.stack([self.sym_norm[p] for p in PARTITIONS])
        if family != "transition":
            raise ParameterError(f"unknown kernel family {family!r}")
        return np.stack([self.transition_powers[(p, l)]
                         for l in range(1, self.order + 1) for p in PARTITIONS])


def build_partitions(g: SkeletonGraph) -> PartitionedAdjacency:
    """Split ``A = bones + I`` by hop distance to the center joint.

    Row ``i`` is the root; neighbor ``j`` is centripetal when it is closer
    to the center than ``i``, centrifugal when farther. Bones joining two
    joints at equal distance put 0.5 in each group.
    """
    g.validate()
    n = g.n
    dist = g.hop_distances()
    root = np.eye(n)
    cp = np.zeros((n, n))
    cf = np.zeros((n, n))
    for a, b in g.bones:
        for i, j in ((a, b), (b, a)):
            if dist[j] < dist[i]:
                cp[i, j] = 1.0
            elif dist[j] > dist[i]:
                cf[i, j] = 1.0
            else:
                cp[i, j] = 0.5
                cf[i, j] = 0.5
    return PartitionedAdjacency(parts={"root": root, "centripetal": cp, "centrifugal": cf},
                                base=g.adjacency(self_loops=True))


def _check_nonneg_square(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if (a < 0).any():
        raise ValidationError("adjacency has negative entries")
    return a


def sym_normalize(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 A D^-1/2`` with row-sum degrees; zero-degree rows/cols stay zero."""
    a = _check_nonneg_square(a)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = deg[pos] ** -0.5
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def transition(a: np.ndarray) -> np.ndarray:
    """Row-stochastic ``D^-1 A``; zero-degree rows stay zero."""
    a = _check_nonneg_square(a)
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    pos = deg > 0
    inv[pos] = 1.0 / deg[pos]
    return inv[:, None] * a


def build_kernels(pa: PartitionedAdjacency, L: int) -> GraphKernels:
    if L < 1:
        raise ParameterError(f"polynomial order must be >= 1, got {L}")
    sym = {p: sym_normalize(pa.parts[p]) for p in PARTITIONS}
    powers: Dict[Tuple[str, int], np.ndarray] = {}
    for p in PARTITIONS:
        hat = transition(pa.parts[p])
        acc = hat
        powers[(p, 1)] = hat
        for l in range(2, L + 1):
            acc = acc @ hat
            powers[(p, l)] = acc
    return GraphKernels(sym_norm=sym, transition_powers=powers, order=L)


def hop_reachability(g: SkeletonGraph, l: int) -> np.ndarray:
    """True at (i, j) iff a path of at most ``l`` bones joins i and j."""
    if l < 0:
        raise ParameterError(f"hop count must be >= 0, got {l}")
    out = np.zeros((g.n, g.n), dtype=bool)
    for i in range(g.n):
        d = g.hop_distances(i)
        out[i] = [0 <= x <= l for x in d]
    return out


def walk_reachability(adj: np.ndarray, l: int) -> np.ndarray:
    """True at (i, j) iff a directed walk of exactly ``l`` steps goes i -> j
    along nonzero entries of ``adj``. Set-based frontier expansion."""
    if l < 0:
        raise ParameterError(f"walk length must be >= 0, got {l}")
    adj = np.asarray(adj)
    n = adj.shape[0]
    succ = [set(np.flatnonzero(adj[i]).tolist()) for i in range(n)]
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        frontier = {i}
        for _ in range(l):
            frontier = set().union(*(succ[u] for u in frontier)) if frontier else set()
        out[i, sorted(frontier)] = True
    return out


def load_graph(path) -> SkeletonGraph:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return SkeletonGraph.from_dict(d)


def save_graph(g: SkeletonGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1))


def preset(name: str) -> SkeletonGraph:
    """Shipped layouts: ``ntu25``, ``kinetics18``; ``star<limbs>x<len>`` is
    generated (e.g. ``star4x7``: a center with 4 chains of 7 joints)."""
    if name.startswith("star"):
        limbs, length = (int(v) for v in name[4:].split("x"))
        return star_graph(limbs, length)
    try:
        text = resources.files("asgcn").joinpath("presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ValidationError(f"unknown graph preset {name!r}") from None
    return SkeletonGraph.from_dict(json.loads(text))


def resolve_graph(spec: str) -> SkeletonGraph:
    """A preset name or a path to a graph JSON file."""
    if Path(spec).suffix == ".json" or Path(spec).exists():
        return load_graph(spec)
    return preset(spec)


def star_graph(limbs: int, length: int) -> SkeletonGraph:
    """Center joint 0 with ``limbs`` chains; limb ``a`` depth ``k`` (1-based)
    is joint ``1 + a * length + (k - 1)``."""
    bones = []
    names = ["center"]
    for a in range(limbs):
        prev = 0
        for k in range(1, length + 1):
            j = 1 + a * length + (k - 1)
            bones.append((prev, j))
            names.append(f"limb{a}_{k}")
            prev = j
    return SkeletonGraph(n=1 + limbs * length, bones=bones, center=0, names=names)


def random_connected_graph(n: int, rng: np.random.Generator, extra_edges: int = 0) -> SkeletonGraph:
    """Random spanning tree plus up to ``extra_edges`` chords; random center."""
    order = rng.permutation(n)
    bones = set()
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        bones.add((min(order[k], parent), max(order[k], parent)))
    for _ in range(extra_edges):
        i, j = rng.integers(0, n, size=2)
        if i != j:
            bones.add((min(i, j), max(i, j)))
    return SkeletonGraph(n=n, bones=sorted((int(a), int(b)) for a, b in bones),
                         center=int(rng.integers(0, n)))

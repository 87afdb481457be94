"""Construction and independent training of GP expert ensembles.

Three ways of choosing each expert's training subset are supported: uniform
random subsets of data (SoD), nearest-neighbour neighbourhoods of random
centres (Local), and one expert per ball-tree node (Tree). Subset selection is
always serial and seed-driven; fitting is embarrassingly parallel.
"""

from __future__ import annotations

import enum
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .errors import InputError, NumericalError, UsageError
from .gp_core import OptimizerConfig, gp_fit, optimize_hyperparameters

__all__ = [
    "Strategy",
    "EnsembleConfig",
    "BallTreeNode",
    "BallTree",
    "Provenance",
    "FitFailure",
    "Ensemble",
    "substream",
    "build_ball_tree",
    "select_sod",
    "select_local",
    "local_subset",
    "select_tree",
    "fit_subsets",
    "build_sod",
    "build_local",
    "build_tree",
    "tree_path_experts",
    "train_ensemble",
]


class Strategy(str, enum.Enum):
    SOD = "sod"
    LOCAL = "local"
    TREE = "tree"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InputError(f"unknown strategy {value!r}; expected one of sod, local, tree")


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named component of a seeded run.

    Adding or removing sibling components never perturbs the draws of this one.
    """
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _expert_seed(seed: int, strategy: "Strategy", index: int) -> np.random.SeedSequence:
    key = (zlib.crc32(strategy.value.encode()), zlib.crc32(b"optimizer"), index)
    return np.random.SeedSequence(int(seed), spawn_key=key)


@dataclass(frozen=True)
class EnsembleConfig:
    strategy: Strategy = Strategy.SOD
    points_per_expert: int = 256
    num_experts: int = 512
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.points_per_expert < 2:
            raise InputError("points_per_expert must be at least 2")
        if self.num_experts < 1:
            raise InputError("num_experts must be at least 1")

    def check_against(self, n: int):
        if self.points_per_expert > n:
            raise InputError(
                f"points_per_expert={self.points_per_expert} exceeds training size {n}"
            )


@dataclass(frozen=True)
class BallTreeNode:
    center: np.ndarray
    radius: float
    point_indices: np.ndarray
    children: tuple | None = None
    depth: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass(frozen=True)
class BallTree:
    """Binary ball tree; ``nodes`` are stored breadth-first with the root at 0."""

    nodes: tuple

    @property
    def root(self) -> BallTreeNode:
        return self.nodes[0]

    def leaves(self):
        return [i for i, node in enumerate(self.nodes) if node.is_leaf]

    def path_to_leaf(self, x) -> list:
        """Node ids from the root down, following the nearer child centre."""
        x = np.asarray(x, dtype=float).reshape(-1)
        node_id = 0
        path = [0]
        while not self.nodes[node_id].is_leaf:
            left, right = self.nodes[node_id].children
            dl = np.sum((self.nodes[left].center - x) ** 2)
            dr = np.sum((self.nodes[right].center - x) ** 2)
            node_id = left if dl <= dr else right
            path.append(node_id)
        return path


def _make_node(X, idx):
    pts = X[idx]
    center = pts.mean(axis=0)
    radius = float(np.sqrt(np.max(np.sum((pts - center) ** 2, axis=1))))
    return center, radius


def _split(X, idx, rng):
    pts = X[idx]
    start = pts[rng.integers(len(idx))]
    p1 = pts[np.argmax(np.sum((pts - start) ** 2, axis=1))]
    p2 = pts[np.argmax(np.sum((pts - p1) ** 2, axis=1))]
    d1 = np.sum((pts - p1) ** 2, axis=1)
    d2 = np.sum((pts - p2) ** 2, axis=1)
    to_left = d1 <= d2
    if to_left.all() or not to_left.any():
        # coincident points: any balanced split preserves the invariants
        half = len(idx) // 2
        return idx[:half], idx[half:]
    return idx[to_left], idx[~to_left]


def build_ball_tree(data, leaf_capacity: int, seed=0) -> BallTree:
    """Recursive furthest-pair ball tree over the rows of ``data``."""
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise InputError("cannot build a ball tree on an empty dataset")
    if leaf_capacity < 1:
        raise InputError("leaf_capacity must be at least 1")
    rng = np.random.default_rng(seed)

    # breadth-first construction gives node ids in level order directly
    raw = []
    queue = deque([(np.arange(X.shape[0]), 0, None)])
    while queue:
        idx, depth, parent = queue.popleft()
        node_id = len(raw)
        raw.append({"idx": idx, "depth": depth, "children": []})
        if parent is not None:
            raw[parent]["children"].append(node_id)
        if len(idx) > leaf_capacity:
            left, right = _split(X, idx, rng)
            queue.append((left, depth + 1, node_id))
            queue.append((right, depth + 1, node_id))

    nodes = []
    for entry in raw:
        center, radius = _make_node(X, entry["idx"])
        idx = np.sort(entry["idx"])
        idx.setflags(write=False)
        center.setflags(write=False)
        children = tuple(entry["children"]) if entry["children"] else None
        nodes.append(BallTreeNode(center, radius, idx, children, entry["depth"]))
    return BallTree(tuple(nodes))


@dataclass(frozen=True)
class Provenance:
    strategy: Strategy
    subset: np.ndarray
    node_id: int | None = None
    index: int = 0


@dataclass(frozen=True)
class FitFailure:
    index: int
    provenance: Provenance
    reason: str


@dataclass(frozen=True)
class Ensemble:
    experts: tuple
    provenance: tuple
    strategy: Strategy
    tree: BallTree | None = None
    failures: tuple = ()
    warnings: tuple = ()

    def __len__(self):
        return len(self.experts)

    def node_experts(self) -> dict:
        """Map tree node id to the position of its expert in ``experts``."""
        return {p.node_id: i for i, p in enumerate(self.provenance) if p.node_id is not None}


def _standardize_inputs(X):
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (X - X.mean(axis=0)) / std


def select_sod(n: int, config: EnsembleConfig) -> list:
    config.check_against(n)
    rng = substream(config.seed, config.strategy.value, "subsets")
    return [
        np.sort(rng.choice(n, size=config.points_per_expert, replace=False))
        for _ in range(config.num_experts)
    ]


def select_local(X, config: EnsembleConfig):
    """Return ``(subsets, centers)``; each subset holds the nearest neighbours
    of its centre in standardized input space, ties broken by index."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    config.check_against(n)
    rng = substream(config.seed, config.strategy.value, "subsets")
    Z = _standardize_inputs(X)
    centers = []
    while len(centers) < config.num_experts:
        centers.extend(rng.permutation(n)[: config.num_experts - len(centers)].tolist())
    subsets = [local_subset(Z, c, config.points_per_expert) for c in centers]
    return subsets, centers


def local_subset(Z, center: int, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` rows of ``Z`` nearest to row ``center``."""
    d2 = np.sum((Z - Z[center]) ** 2, axis=1)
    return np.sort(np.argsort(d2, kind="stable")[:k])


def select_tree(X, config: EnsembleConfig):
    """Return ``(tree, subsets, node_ids)`` with one subset per node, breadth-first."""
    X = np.asarray(X, dtype=float)
    config.check_against(X.shape[0])
    tree = build_ball_tree(
        X, config.points_per_expert, seed=substream(config.seed, "tree", "ball_tree")
    )
    rng = substream(config.seed, config.strategy.value, "subsets")
    subsets, node_ids = [], []
    for node_id, node in enumerate(tree.nodes[: config.num_experts]):
        size = min(config.points_per_expert, node.point_indices.shape[0])
        subsets.append(np.sort(rng.choice(node.point_indices, size=size, replace=False)))
        node_ids.append(node_id)
    return tree, subsets, node_ids


def _fit_one(X, y, index, strategy, seed, config):
    name = f"{strategy.value}-expert-{index}"
    try:
        with threadpool_limits(limits=1):
            hyper, info = optimize_hyperparameters(
                X,
                y,
                config=config,
                seed=_expert_seed(seed, strategy, index),
                return_info=True,
            )
            expert = gp_fit(X, y, hyper, name=name)
    except (InputError, NumericalError) as exc:
        return None, f"{name}: {exc}"
    note = None if info.converged else f"{name}: optimizer did not converge ({info.message})"
    return expert, note


def fit_subsets(X, y, subsets, config: EnsembleConfig, parallelism: int = 1,
                node_ids=None, tree=None) -> Ensemble:
    """Fit one expert per index subset; failures are recorded, not raised."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    strategy = config.strategy
    provenance = [
        Provenance(strategy, s, None if node_ids is None else node_ids[i], i)
        for i, s in enumerate(subsets)
    ]
    jobs = (
        delayed(_fit_one)(X[s], y[s], i, strategy, config.seed, config.optimizer)
        for i, s in enumerate(subsets)
    )
    if parallelism <= 1:
        outputs = [fn(*args, **kw) for fn, args, kw in jobs]
    else:
        outputs = Parallel(n_jobs=parallelism)(jobs)

    experts, kept, failures, notes = [], [], [], []
    for prov, (expert, note) in zip(provenance, outputs):
        if expert is None:
            failures.append(FitFailure(prov.index, prov, note))
            continue
        experts.append(expert)
        kept.append(prov)
        if note:
            notes.append(note)
    return Ensemble(tuple(experts), tuple(kept), strategy, tree, tuple(failures), tuple(notes))


def _dataset(data):
    X, y = data
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, np.asarray(y, dtype=float).reshape(-1)


def _require(config, strategy):
    if config.strategy is not strategy:
        raise UsageError(f"expected a {strategy.value} config, got {config.strategy.value}")


def build_sod(data, config: EnsembleConfig, parallelism: int = 1) -> Ensemble:
    _require(config, Strategy.SOD)
    X, y = _dataset(data)
    return fit_subsets(X, y, select_sod(X.shape[0], config), config, parallelism)


def build_local(data, config: EnsembleConfig, parallelism: int = 1) -> Ensemble:
    _require(config, Strategy.LOCAL)
    X, y = _dataset(data)
    subsets, _ = select_local(X, config)
    return fit_subsets(X, y, subsets, config, parallelism)


def build_tree(data, config: EnsembleConfig, parallelism: int = 1) -> Ensemble:
    _require(config, Strategy.TREE)
    X, y = _dataset(data)
    tree, subsets, node_ids = select_tree(X, config)
    return fit_subsets(X, y, subsets, config, parallelism, node_ids=node_ids, tree=tree)


def tree_path_experts(ensemble: Ensemble, x) -> list:
    """Positions in ``ensemble.experts`` of the experts on x's root-to-leaf path."""
    if ensemble.strategy is not Strategy.TREE or ensemble.tree is None:
        raise UsageError("tree_path_experts requires a tree-strategy ensemble")
    lookup = ensemble.node_experts()
    return [lookup[n] for n in ensemble.tree.path_to_leaf(x) if n in lookup]


_BUILDERS = {
    Strategy.SOD: build_sod,
    Strategy.LOCAL: build_local,
    Strategy.TREE: build_tree,
}


def train_ensemble(data, config: EnsembleConfig, parallelism: int = 1) -> Ensemble:
    """Select subsets for ``config.strategy`` and fit all experts.

    The result does not depend on ``parallelism``.
    """
    return _BUILDERS[config.strategy](data, config, parallelism)

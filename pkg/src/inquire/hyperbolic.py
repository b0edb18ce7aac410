"""Poincare-ball embeddings of the act hierarchy.

Nodes related by a parent-child or sibling edge are pulled together and
negatively sampled unrelated nodes pushed apart, using the softmax ranking
loss over hyperbolic distances. Optimization is Riemannian SGD: the Euclidean
gradient is rescaled by the inverse metric ``(1 - |x|^2)^2 / 4`` and points are
projected back inside the ball after each step.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .store import array_digest
from .taxonomy import ActionPath, ActionTree

log = logging.getLogger(__name__)

BALL_EPS = 1e-5


class DomainError(ValueError):
    """A point lies on or outside the unit ball."""


def _check_inside(*points: np.ndarray) -> None:
    for p in points:
        if np.sum(np.square(p), axis=-1).max(initial=0.0) >= 1.0:
            raise DomainError("Poincare points must have norm < 1")


def poincare_distance(u, v) -> float | np.ndarray:
    """arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2))). Broadcasts over leading axes."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_inside(u, v)
    sq = np.sum((u - v) ** 2, axis=-1)
    alpha = 1.0 - np.sum(u * u, axis=-1)
    beta = 1.0 - np.sum(v * v, axis=-1)
    return np.arccosh(1.0 + 2.0 * sq / (alpha * beta))


def distance_grads(u: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distances from ``u`` to each row of ``xs`` with Euclidean gradients.

    Returns ``(d, dd_du, dd_dx)`` where ``dd_du[i]`` is the gradient of
    ``d(u, xs[i])`` with respect to ``u`` and ``dd_dx[i]`` with respect to ``xs[i]``.
    """
    uu = float(u @ u)
    xx = np.sum(xs * xs, axis=1)
    ux = xs @ u
    alpha = 1.0 - uu
    beta = 1.0 - xx
    sq = uu - 2.0 * ux + xx
    gamma = 1.0 + 2.0 * sq / (alpha * beta)
    d = np.arccosh(gamma)
    root = np.sqrt(np.maximum(gamma * gamma - 1.0, 1e-15))
    cu = 4.0 / (beta * root)
    du = cu[:, None] * (((xx - 2.0 * ux + 1.0) / alpha ** 2)[:, None] * u[None, :] - xs / alpha)
    cx = 4.0 / (alpha * root)
    dx = cx[:, None] * (((uu - 2.0 * ux + 1.0) / beta ** 2)[:, None] * xs - u[None, :] / beta[:, None])
    return d, du, dx


def project(x: np.ndarray, eps: float = BALL_EPS) -> np.ndarray:
    """Pull points with norm above 1 - eps back onto that radius."""
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    limit = 1.0 - eps
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return x * scale


def positive_pairs(tree: ActionTree) -> list[tuple[int, int]]:
    """Undirected relation set: every parent-child edge, then every sibling pair.

    Level-1 acts share no parent and so are not siblings of each other.
    """
    edges = [(n.parent, n.id) for n in tree.nodes if n.parent is not None]
    siblings = []
    for n in tree.nodes:
        siblings.extend(combinations(n.children, 2))
    return edges + siblings


@dataclass
class PoincareConfig:
    dim: int = 8
    epochs: int = 500
    lr: float = 0.1
    negatives: int = 10
    burn_in: int = 10
    burn_in_lr: float = 0.01
    init_range: float = 1e-3
    seed: int = 0


@dataclass
class EmbeddingTable:
    coords: np.ndarray
    config: PoincareConfig = field(default_factory=PoincareConfig)
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def point(self, node: int) -> np.ndarray:
        if not 0 <= node < len(self.coords):
            raise KeyError(f"unknown node {node}")
        return self.coords[node]

    def distance(self, a: int, b: int) -> float:
        return float(poincare_distance(self.point(a), self.point(b)))

    def digest(self) -> str:
        return array_digest({"coords": self.coords})

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = dict(config=asdict(self.config), loss_history=self.loss_history)
        return meta, {"coords": self.coords}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "EmbeddingTable":
        return cls(np.array(arrays["coords"]), PoincareConfig(**meta["config"]),
                   list(meta.get("loss_history", [])))


def action_features(table: EmbeddingTable, path: ActionPath | Sequence[int], depth: int = 3) -> np.ndarray:
    """Node coordinates of ``path`` concatenated and zero-padded to ``depth * dim``."""
    nodes = tuple(path)
    if len(nodes) > depth:
        raise ValueError(f"path longer than {depth}")
    out = np.zeros(depth * table.dim)
    for i, n in enumerate(nodes):
        out[i * table.dim:(i + 1) * table.dim] = table.point(n)
    return out


def path_features(table: EmbeddingTable, paths, depth: int = 3, node_ids: bool = False) -> np.ndarray:
    """Batch of :func:`action_features` rows for ``-1``-padded path rows.

    With ``node_ids`` a multi-hot of the path's nodes is appended. Siblings that
    share all their relations end up at nearly the same point, so coordinates
    alone cannot tell them apart.
    """
    paths = np.asarray(paths, dtype=np.int64).reshape(len(paths), -1)
    n = len(table.coords)
    out = np.zeros((len(paths), depth * table.dim + (n if node_ids else 0)))
    for i, row in enumerate(paths):
        nodes = [int(x) for x in row if x >= 0]
        out[i, :depth * table.dim] = action_features(table, nodes, depth)
        if node_ids:
            out[i, depth * table.dim + np.array(nodes, dtype=np.int64)] = 1.0
    return out


def _pair_index(pairs, n):
    related = [set() for _ in range(n)]
    for a, b in pairs:
        related[a].add(b)
        related[b].add(a)
    return related


def nll_loss(coords, positives, negatives) -> float:
    """Summed negative log-softmax of each positive against its negatives.

    The positive itself is part of the normalizer, so the loss is >= 0.
    """
    coords = coords.coords if isinstance(coords, EmbeddingTable) else np.asarray(coords)
    total = 0.0
    for (u, v), negs in zip(positives, negatives):
        negs = list(negs)
        if not negs:
            raise ValueError(f"empty negative set for pair ({u}, {v})")
        d = poincare_distance(coords[u][None, :], coords[[v] + negs])
        logits = -d
        m = logits.max()
        total += -(logits[0] - (m + np.log(np.sum(np.exp(logits - m)))))
    return float(total)


def _sample_negatives(rng, pool: np.ndarray, k: int) -> np.ndarray:
    return pool[rng.integers(0, len(pool), size=k)]


def train_embeddings(tree: ActionTree, config: PoincareConfig | None = None) -> EmbeddingTable:
    config = config or PoincareConfig()
    rng = np.random.default_rng(config.seed)
    n = len(tree)
    coords = rng.uniform(-config.init_range, config.init_range, size=(n, config.dim))
    pairs = positive_pairs(tree)
    related = _pair_index(pairs, n)
    pools = [np.array([j for j in range(n) if j != i and j not in related[i]]) for i in range(n)]
    directed = np.array(pairs + [(b, a) for a, b in pairs], dtype=np.int64).reshape(-1, 2)

    history = []
    if len(directed) == 0:
        return EmbeddingTable(coords, config, history)
    for epoch in range(config.epochs):
        lr = config.burn_in_lr if epoch < config.burn_in else config.lr
        epoch_loss = 0.0
        for u, v in directed[rng.permutation(len(directed))]:
            if len(pools[u]) == 0:
                continue
            others = np.concatenate(([v], _sample_negatives(rng, pools[u], config.negatives)))
            xs = coords[others]
            d, du, dx = distance_grads(coords[u], xs)
            logits = -d
            p = np.exp(logits - logits.max())
            p /= p.sum()
            epoch_loss += float(d[0] + np.log(np.sum(np.exp(-d))))
            # dL/dd: 1 - p for the positive, -p for each negative
            w = -p
            w[0] += 1.0
            grad_u = w @ du
            grad_x = w[:, None] * dx
            cu = coords[u]
            coords[u] = project(cu - lr * ((1.0 - cu @ cu) ** 2 / 4.0) * grad_u)
            # a node can appear twice among the negatives; accumulate its gradient
            uniq, inv = np.unique(others, return_inverse=True)
            g = np.zeros((len(uniq), config.dim))
            np.add.at(g, inv, grad_x)
            xu = coords[uniq]
            scale = (1.0 - np.sum(xu * xu, axis=1)) ** 2 / 4.0
            coords[uniq] = project(xu - lr * scale[:, None] * g)
        history.append(epoch_loss / len(directed))
        if epoch % 100 == 0:
            log.debug("poincare epoch=%d loss=%.6f", epoch, history[-1])
    return EmbeddingTable(coords, config, history)

"""Generalization-aware scoring, pruning bookkeeping, and discretization.

Candidate operations are ranked not by architecture logits alone but by a
combined indicator: the logit softmax plus a generalization score derived
from how closely an operation's classification error on the held-out
estimation split tracks its error on the search split. The edge-op score
multiplies in the edge-normalization softmax and drives both pruning and
the final discretization into a genotype.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cdc import OperatorRegistry, parse_kind

WINDOW_SIZE = 5
DIFF_CLAMP = 1e-3
LAMBDA_BALANCE = 0.15
GENOTYPE_SCHEMA_VERSION = 1

# intermediate nodes of the 7-node cell and their candidate predecessors
INTERMEDIATE_NODES = (2, 3, 4, 5)


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass
class EdgeState:
    """Search state of one (cell kind, i -> j) edge, shared across cells."""

    kind: str
    src: int
    dst: int
    alpha: "object"  # Tensor of shape (n_ops,), requires_grad
    beta: "object"   # scalar Tensor, requires_grad
    alive: np.ndarray
    windows: list = field(default_factory=list)

    def __post_init__(self):
        if not self.windows:
            self.windows = [deque(maxlen=WINDOW_SIZE)
                            for _ in range(len(self.alive))]

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def alive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def record_probe(self, op_index: int, err_search: float,
                     err_eval: float) -> None:
        for e in (err_search, err_eval):
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"probe error {e} outside [0, 1]")
        self.windows[op_index].append((err_search, err_eval))

    def has_probes(self) -> bool:
        return all(len(self.windows[i]) > 0 for i in self.alive_indices())


def window_min_diff(edge: EdgeState, op_index: int,
                    clamp: float = DIFF_CLAMP) -> float:
    """Smallest |err_search - err_eval| in the op's probe window, clamped."""
    win = edge.windows[op_index]
    if not win:
        raise ValueError(f"empty probe window for op {op_index} on edge "
                         f"({edge.kind}, {edge.src}->{edge.dst})")
    d = min(abs(s - e) for s, e in win)
    return max(d, clamp)


def generalization_score(edge: EdgeState) -> np.ndarray:
    """Softmax over alive ops of 1/min-window-diff; zero at dead ops."""
    idx = edge.alive_indices()
    inv = np.array([1.0 / window_min_diff(edge, i) for i in idx])
    out = np.zeros(len(edge.alive))
    out[idx] = _softmax(inv)
    return out


def generalization_score_or_uniform(edge: EdgeState) -> np.ndarray:
    """Like generalization_score, but uniform before any probes exist."""
    if edge.has_probes():
        return generalization_score(edge)
    out = np.zeros(len(edge.alive))
    out[edge.alive_indices()] = 1.0 / edge.n_alive
    return out


def alpha_softmax(edge: EdgeState) -> np.ndarray:
    idx = edge.alive_indices()
    out = np.zeros(len(edge.alive))
    out[idx] = _softmax(edge.alpha.data[idx])
    return out


def importance(edge: EdgeState, lam: float = LAMBDA_BALANCE,
               require_probes: bool = False) -> np.ndarray:
    """Combined indicator: logit softmax + lam * generalization score.

    Sums to 1 + lam over alive ops.
    """
    e = (generalization_score(edge) if require_probes
         else generalization_score_or_uniform(edge))
    return alpha_softmax(edge) + lam * e


def edge_op_score(edges: list[EdgeState], lam: float = LAMBDA_BALANCE) -> list[np.ndarray]:
    """Per-(edge, op) score H for one node's incoming edges: the edge
    softmax over beta times each edge's importance vector."""
    betas = np.array([float(e.beta.data) for e in edges])
    w = _softmax(betas)
    return [w[i] * importance(e, lam) for i, e in enumerate(edges)]


def prune(edge: EdgeState, scores: np.ndarray) -> None:
    """Kill the two lowest-scored alive ops; permanent. Skipped below 3."""
    if edge.n_alive < 3:
        return
    idx = edge.alive_indices()
    order = sorted(idx, key=lambda i: (scores[i], i))
    for i in order[:2]:
        edge.alive[i] = False


# -- genotype ---------------------------------------------------------------


@dataclass(frozen=True)
class Genotype:
    """Discretized cell description: per intermediate node, two
    (operation name, predecessor index) pairs for each cell kind."""

    registry_names: tuple
    normal: tuple   # 8 pairs (op_name, pred), node order 2..5, preds ascending
    reduction: tuple
    meta: dict = field(default_factory=dict, hash=False, compare=False)

    def validate(self) -> None:
        reg = OperatorRegistry(self.registry_names)
        for label, pairs in (("normal", self.normal),
                             ("reduction", self.reduction)):
            if len(pairs) != 8:
                raise ValueError(f"{label} cell needs 8 (op, pred) pairs, "
                                 f"got {len(pairs)}")
            for node_i, node in enumerate(INTERMEDIATE_NODES):
                a, b = pairs[2 * node_i], pairs[2 * node_i + 1]
                for op_name, pred in (a, b):
                    if op_name not in reg.names:
                        raise ValueError(f"unknown operation {op_name!r} in "
                                         f"{label} cell")
                    parse_kind(op_name)
                    if not 0 <= pred < node:
                        raise ValueError(f"predecessor {pred} invalid for "
                                         f"node {node}")
                if a[1] == b[1]:
                    raise ValueError(f"duplicate predecessor {a[1]} at node "
                                     f"{node} in {label} cell")

    def to_json(self) -> str:
        doc = {
            "schema_version": GENOTYPE_SCHEMA_VERSION,
            "registry": list(self.registry_names),
            "normal": [[op, pred] for op, pred in self.normal],
            "reduction": [[op, pred] for op, pred in self.reduction],
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "Genotype":
        doc = json.loads(text)
        if doc.get("schema_version") != GENOTYPE_SCHEMA_VERSION:
            raise ValueError(f"unsupported genotype schema version "
                             f"{doc.get('schema_version')!r}")
        g = Genotype(
            registry_names=tuple(doc["registry"]),
            normal=tuple((op, int(p)) for op, p in doc["normal"]),
            reduction=tuple((op, int(p)) for op, p in doc["reduction"]),
            meta=doc.get("meta", {}),
        )
        g.validate()
        return g


def discretize(edge_states: dict, registry: OperatorRegistry,
               lam: float = LAMBDA_BALANCE, meta: dict | None = None) -> Genotype:
    """Collapse the continuous search state into a Genotype.

    Per intermediate node: keep the two incoming edges whose best alive op
    has the highest H, then on each kept edge take the argmax-H operation.
    Ties break toward the lower predecessor index, then registry order.
    """
    cells = {}
    for kind in ("normal", "reduction"):
        pairs = []
        for node in INTERMEDIATE_NODES:
            edges = [edge_states[(kind, i, node)] for i in range(node)]
            hs = edge_op_score(edges, lam)
            best = []
            for i, (e, h) in enumerate(zip(edges, hs)):
                masked = np.where(e.alive, h, -np.inf)
                op_i = int(masked.argmax())
                best.append((masked[op_i], i, op_i))
            # two highest edge scores; ties to the lower predecessor
            keep = sorted(best, key=lambda t: (-t[0], t[1]))[:2]
            keep.sort(key=lambda t: t[1])
            pairs.extend((registry.names[op_i], i) for _, i, op_i in keep)
        cells[kind] = tuple(pairs)
    g = Genotype(registry_names=registry.names, normal=cells["normal"],
                 reduction=cells["reduction"], meta=meta or {})
    g.validate()
    return g

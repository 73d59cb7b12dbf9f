"""Relational retrieval with Random Walk with Restart.

Nodes are 0-based: database series occupy ``0..N-1`` and the target is
appended as node ``N``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .data import Snippet, TimeSeriesDB
from .errors import ConvergenceError, DataError, RetrievalError

DEFAULT_DAMPING = 0.9
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True, eq=False)
class RelationGraph:
    """Undirected, unweighted relation graph; edges stored as ``(i, j)`` with ``i < j``."""

    n_nodes: int
    edges: frozenset = frozenset()
    _adj: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise DataError("graph needs at least one node")
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise DataError(f"self-loop on node {i}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise DataError(f"edge ({i}, {j}) outside [0, {self.n_nodes})")
            norm.add((min(i, j), max(i, j)))
        adj = [[] for _ in range(self.n_nodes)]
        for i, j in norm:
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "edges", frozenset(norm))
        object.__setattr__(self, "_adj", [sorted(a) for a in adj])

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[tuple[int, int]]) -> "RelationGraph":
        return cls(n_nodes, frozenset(tuple(e) for e in edges))

    @classmethod
    def ring(cls, n_nodes: int) -> "RelationGraph":
        if n_nodes < 3:
            raise DataError("a ring needs at least 3 nodes")
        return cls.from_edges(n_nodes, ((i, (i + 1) % n_nodes) for i in range(n_nodes)))

    def neighbors(self, i: int) -> list[int]:
        return list(self._adj[i])

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def adjacency(self) -> sp.csr_matrix:
        if not self.edges:
            return sp.csr_matrix((self.n_nodes, self.n_nodes))
        rows, cols = zip(*self.edges)
        r = np.array(rows + cols)
        c = np.array(cols + rows)
        return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(self.n_nodes, self.n_nodes))

    @classmethod
    def read_csv(cls, path, series_ids: Sequence[str]) -> "RelationGraph":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"missing {path}")
        index = {s: i for i, s in enumerate(series_ids)}
        edges = set()
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["src", "dst"]:
                raise DataError(f"{path}: header must be 'src,dst', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise DataError(f"{path}:{lineno}: expected 2 cells, got {len(row)}")
                try:
                    i, j = index[row[0]], index[row[1]]
                except KeyError as exc:
                    raise DataError(f"{path}:{lineno}: unknown series id {exc.args[0]!r}") from None
                edges.add((min(i, j), max(i, j)))
        return cls(len(series_ids), frozenset(edges))

    def write_csv(self, path, series_ids: Sequence[str]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["src", "dst"])
            for i, j in sorted(self.edges):
                writer.writerow([series_ids[i], series_ids[j]])


@dataclass(frozen=True, eq=False)
class AugmentedGraph:
    """Database graph plus the target as node ``N``, linked to ``relations``."""

    base: RelationGraph
    relations: frozenset

    @property
    def n_total(self) -> int:
        return self.base.n_nodes + 1

    @property
    def target(self) -> int:
        return self.base.n_nodes

    def adjacency(self) -> sp.csr_matrix:
        n = self.base.n_nodes
        rel = np.array(sorted(self.relations), dtype=int)
        tgt = np.full(rel.size, n)
        link = sp.csr_matrix(
            (np.ones(2 * rel.size), (np.concatenate([rel, tgt]), np.concatenate([tgt, rel]))),
            shape=(n + 1, n + 1),
        )
        return sp.block_diag([self.base.adjacency(), sp.csr_matrix((1, 1))], format="csr") + link


@dataclass(frozen=True, eq=False)
class ProximityVector:
    p: np.ndarray
    damping: float
    iterations: int = 0

    def __len__(self) -> int:
        return len(self.p)


@dataclass(frozen=True)
class SpanPolicy:
    """How far back (``delta_t`` steps) reference windows sit relative to the target."""

    mode: str
    delta_t: int
    length: int

    def __post_init__(self):
        if self.mode not in ("imputation", "forecasting_periodic", "forecasting_history_only"):
            raise RetrievalError(f"unknown span mode {self.mode!r}")
        if self.length < 1:
            raise RetrievalError("span length must be >= 1")
        if self.mode == "imputation" and self.delta_t != 0:
            raise RetrievalError("imputation spans use delta_t = 0")
        if self.mode != "imputation" and self.delta_t < 1:
            raise RetrievalError(f"{self.mode} needs a positive shift, got {self.delta_t}")

    @classmethod
    def imputation(cls, length: int) -> "SpanPolicy":
        return cls("imputation", 0, length)

    @classmethod
    def periodic(cls, length: int, period: int) -> "SpanPolicy":
        return cls("forecasting_periodic", int(period), length)

    @classmethod
    def history_only(cls, length: int, tau: int) -> "SpanPolicy":
        """Shift so the reference window ends at the target's separation step."""
        if not 0 < tau < length:
            raise RetrievalError(f"separation step {tau} outside (0, {length})")
        return cls("forecasting_history_only", length - tau, length)

    @classmethod
    def for_task(cls, task: str, length: int, period: int | None = None, tau: int | None = None,
                 history_only: bool = False) -> "SpanPolicy":
        if task == "impute":
            return cls.imputation(length)
        if task != "forecast":
            raise RetrievalError(f"unknown task {task!r}")
        if history_only:
            if tau is None:
                raise RetrievalError("history-only forecasting needs the separation step")
            return cls.history_only(length, tau)
        if period is None:
            raise RetrievalError("periodic forecasting needs the dataset period")
        return cls.periodic(length, period)


def augment_adjacency(base: RelationGraph, relations: Iterable[int]) -> AugmentedGraph:
    rel = frozenset(int(r) for r in relations)
    if not rel:
        raise RetrievalError("target has no relations; retrieval is undefined")
    bad = [r for r in rel if not 0 <= r < base.n_nodes]
    if bad:
        raise RetrievalError(f"relations {sorted(bad)} outside [0, {base.n_nodes})")
    return AugmentedGraph(base, rel)


def normalize_adjacency(g: AugmentedGraph | RelationGraph | sp.spmatrix | np.ndarray) -> sp.csr_matrix:
    """Column-stochastic transition matrix; isolated nodes get a self-loop."""
    if isinstance(g, (AugmentedGraph, RelationGraph)):
        a = g.adjacency()
    else:
        a = sp.csr_matrix(g, dtype=np.float64)
    a = sp.csr_matrix(a, dtype=np.float64)
    deg = np.asarray(a.sum(axis=0)).ravel()
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        a = a + sp.csr_matrix((np.ones(isolated.size), (isolated, isolated)), shape=a.shape)
        deg[isolated] = 1.0
    return sp.csr_matrix(a @ sp.diags(1.0 / deg))


def rwr_solve(a_norm, e: np.ndarray, c: float = DEFAULT_DAMPING, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> ProximityVector:
    """Iterate ``p <- c * A p + (1 - c) * e`` from ``p = e`` until the max-norm step < ``tol``."""
    if not 0 < c < 1:
        raise RetrievalError(f"damping must lie in (0, 1), got {c}")
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or np.count_nonzero(e) != 1 or e.sum() != 1.0:
        raise RetrievalError("restart vector must be one-hot")
    if a_norm.shape != (e.size, e.size):
        raise RetrievalError(f"matrix shape {a_norm.shape} does not match restart vector of length {e.size}")
    restart = (1.0 - c) * e
    p = e.copy()
    for it in range(1, max_iter + 1):
        nxt = c * (a_norm @ p) + restart
        if np.max(np.abs(nxt - p)) < tol:
            return ProximityVector(nxt, c, it)
        p = nxt
    raise ConvergenceError(f"RWR did not converge within {max_iter} iterations (tol={tol})")


def proximity(base: RelationGraph, relations: Iterable[int], c: float = DEFAULT_DAMPING,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> ProximityVector:
    """Augment, normalize and solve; scores for all ``N + 1`` nodes."""
    g = augment_adjacency(base, relations)
    e = np.zeros(g.n_total)
    e[g.target] = 1.0
    return rwr_solve(normalize_adjacency(g), e, c, tol, max_iter)


def top_k_references(p: ProximityVector | np.ndarray, k: int, exclude: Iterable[int] = ()) -> list[int]:
    """Best ``k`` database nodes by descending score, ties to the lower index.

    ``p`` covers ``N + 1`` nodes; the last one (the target) is never returned.
    """
    scores = np.asarray(p.p if isinstance(p, ProximityVector) else p, dtype=np.float64)
    n = scores.size - 1
    excluded = set(int(x) for x in exclude)
    cand = np.array([i for i in range(n) if i not in excluded], dtype=int)
    if not 1 <= k <= cand.size:
        raise RetrievalError(f"k={k} but only {cand.size} eligible candidates")
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]].tolist()


def select_reference_span(db: TimeSeriesDB, ref: int | str, target_start: int, length: int,
                          policy: SpanPolicy) -> Snippet:
    if length != policy.length:
        raise RetrievalError(f"target length {length} != policy length {policy.length}")
    start = target_start - policy.delta_t
    if start < db.start_time or start + length > db.end_time:
        raise RetrievalError(
            f"reference window [{start}, {start + length}) outside database range "
            f"[{db.start_time}, {db.end_time})"
        )
    return db.snippet(ref, start, length)


def target_relations(graph: RelationGraph, node: int, include_self: bool = False) -> list[int]:
    """Relations of a database series used as a target: its neighbors (and itself)."""
    rel = graph.neighbors(node)
    if include_self:
        rel = sorted(set(rel) | {node})
    return rel


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    target_id: str
    k: int
    c: float
    indices: list[int]
    scores: list[float]
    snippets: list[Snippet]

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "k": self.k,
            "c": self.c,
            "references": [
                {"series_id": s.series_id, "score": score, "span_start": s.start}
                for s, score in zip(self.snippets, self.scores)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def retrieve_scored(db: TimeSeriesDB, relations: Iterable[int], target_start: int, length: int, k: int,
                    policy: SpanPolicy, c: float = DEFAULT_DAMPING, exclude: Iterable[int] = (),
                    target_id: str = "", tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER) -> RetrievalResult:
    p = proximity(db.graph, relations, c, tol, max_iter)
    idx = top_k_references(p, k, exclude)
    snippets = [select_reference_span(db, i, target_start, length, policy) for i in idx]
    return RetrievalResult(target_id, k, c, idx, [float(p.p[i]) for i in idx], snippets)


def retrieve(db: TimeSeriesDB, relations: Iterable[int], target: Snippet, k: int, policy: SpanPolicy,
             c: float = DEFAULT_DAMPING, exclude: Iterable[int] = ()) -> list[Snippet]:
    """Top-``k`` reference snippets for ``target`` (ordered by rank)."""
    res = retrieve_scored(db, relations, target.start, target.length, k, policy, c, exclude, target.series_id)
    return res.snippets

"""Cosine similarity views, average fusion, TopN accuracy and candidate blocking.

All similarity rows are produced by the same sparse row-times-matrix product,
whose per-entry summation order does not depend on which rows share a block.
That makes blocked top-k lists bit-identical to a full-matrix computation.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .synthlog import GroundTruth
from .tfidf import SparseVector

DEFAULT_TOPN = (3, 5, 10, 18, 50)


def cosine(a, b) -> float:
    """dot(a, b) / (|a| |b|), defined as 0 when either vector is zero."""
    if isinstance(a, SparseVector):
        a = a.to_dense()
    if isinstance(b, SparseVector):
        b = b.to_dense()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(vectors) -> sp.csr_matrix:
    """CSR copy with unit-L2 rows; zero rows stay zero."""
    m = sp.csr_matrix(vectors, dtype=float, copy=True)
    m.eliminate_zeros()
    m.sort_indices()
    sq = np.asarray(m.multiply(m).sum(axis=1)).ravel()
    norms = np.sqrt(sq)
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    # unit rows are left untouched so already-normalized TF-IDF keeps its bits
    scale[np.isclose(norms, 1.0, rtol=0, atol=1e-12)] = 1.0
    counts = np.diff(m.indptr)
    m.data *= np.repeat(scale, counts)
    return m


def _sorted_order(ids: Sequence[str]) -> np.ndarray | None:
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    return None if np.array_equal(order, np.arange(len(ids))) else order


def _block_rows(mats: Sequence[sp.csr_matrix], rows: np.ndarray, mats_t=None) -> np.ndarray:
    if mats_t is None:
        mats_t = [m.T.tocsr() for m in mats]
    total = None
    for m, mt in zip(mats, mats_t):
        block = (m[rows] @ mt).toarray()
        total = block if total is None else total + block
    if len(mats) > 1:
        total /= len(mats)
    np.clip(total, -1.0, 1.0, out=total)
    return total


def _topk_block(scores: np.ndarray, rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    scores[np.arange(len(rows)), rows] = -np.inf
    # stable sort on -score: equal scores keep ascending index (= ascending cookie id)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(scores, order, axis=1)


class _Scored:
    """Cookie universe (sorted ids) with one or more normalized row matrices."""

    ids: list[str]
    index: dict[str, int]
    mats: list[sp.csr_matrix]

    def pair_scores(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        """s(u, v) for many pairs, bit-identical to the entries of ranked rows."""
        if not pairs:
            return np.zeros(0)
        u = np.array([self.index[a] for a, _ in pairs])
        v = np.array([self.index[b] for _, b in pairs])
        total = None
        for m in self.mats:
            s = _sequential_row_dots(m[u], m[v])
            total = s if total is None else total + s
        if len(self.mats) > 1:
            total /= len(self.mats)
        return np.clip(total, -1.0, 1.0)


class VectorSpace(_Scored):
    """One representation: L2-normalized rows keyed by sorted cookie id."""

    def __init__(self, name: str, ids: Sequence[str], vectors):
        m = normalize_rows(vectors)
        if m.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids for {m.shape[0]} vectors")
        order = _sorted_order(ids)
        if order is not None:
            ids = [ids[i] for i in order]
            m = m[order]
        self.name = name
        self.ids = list(ids)
        self.index = {c: i for i, c in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate cookie ids")
        self.matrix = m
        self.mats = [m]

    def subset(self, ids: Sequence[str]) -> "VectorSpace":
        rows = [self.index[c] for c in sorted(ids)]
        return VectorSpace(self.name, sorted(ids), self.matrix[rows])


class Fusion(_Scored):
    """Unweighted mean of member-space cosines (pair scoring only)."""

    def __init__(self, spaces: Sequence[VectorSpace]):
        if not spaces:
            raise ValueError("empty view list")
        ids = spaces[0].ids
        for v in spaces[1:]:
            if v.ids != ids:
                raise ValueError(f"view {v.name} covers a different cookie set")
        self.views = list(spaces)
        self.names = [v.name for v in spaces]
        self.ids = list(ids)
        self.index = dict(spaces[0].index)
        self.mats = [v.matrix for v in spaces]


class _Ranked(_Scored):
    """Per-query top-k neighbour lists over the universe."""

    query_rows: np.ndarray
    neighbors: np.ndarray
    scores: np.ndarray
    k: int

    def _rank(self, k: int, queries, block_size: int, threads: int) -> None:
        n = len(self.ids)
        if n < 2:
            raise ValueError("need at least 2 cookies")
        if k >= n:
            warnings.warn(f"k={k} >= n={n}; clamped to {n - 1}", stacklevel=3)
            k = n - 1
        self.k = k
        if queries is None:
            rows = np.arange(n)
        else:
            rows = np.array(sorted(self.index[q] for q in queries), dtype=np.int64)
        self.query_rows = rows
        self._mats_t = [m.T.tocsr() for m in self.mats]
        blocks = [rows[s : s + block_size] for s in range(0, len(rows), block_size)]

        def work(block):
            return _topk_block(_block_rows(self.mats, block, self._mats_t), block, k)

        if threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, blocks))
        else:
            results = [work(b) for b in blocks]
        if results:
            self.neighbors = np.vstack([r[0] for r in results])
            self.scores = np.vstack([r[1] for r in results])
        else:
            self.neighbors = np.zeros((0, k), dtype=np.int64)
            self.scores = np.zeros((0, k))
        self._qpos = {int(r): p for p, r in enumerate(rows)}

    @property
    def query_ids(self) -> list[str]:
        return [self.ids[r] for r in self.query_rows]

    def row(self, cookie: str) -> np.ndarray:
        """Full similarity row for one cookie (self entry included)."""
        return _block_rows(self.mats, np.array([self.index[cookie]]), self._mats_t)[0]

    def top(self, cookie: str, n: int | None = None) -> list[tuple[str, float]]:
        p = self._qpos[self.index[cookie]]
        n = self.k if n is None else min(n, self.k)
        return [(self.ids[j], float(s)) for j, s in zip(self.neighbors[p, :n], self.scores[p, :n])]

    def neighbor_lists(self, n: int | None = None) -> dict[str, list[str]]:
        n = self.k if n is None else min(n, self.k)
        return {
            self.ids[r]: [self.ids[j] for j in self.neighbors[p, :n]]
            for p, r in enumerate(self.query_rows)
        }


def _sequential_row_dots(a: sp.csr_matrix, b: sp.csr_matrix) -> np.ndarray:
    # accumulate products in ascending column order, left to right, like the
    # sparse matmul kernel does (np.sum would use pairwise summation instead)
    prod = sp.csr_matrix(a.multiply(b))
    prod.sort_indices()
    counts = np.diff(prod.indptr)
    out = np.zeros(prod.shape[0])
    if prod.nnz == 0:
        return out
    width = int(counts.max())
    padded = np.zeros((prod.shape[0], width))
    cols = np.arange(prod.nnz) - np.repeat(prod.indptr[:-1], counts)
    padded[np.repeat(np.arange(prod.shape[0]), counts), cols] = prod.data
    for j in range(width):
        out += padded[:, j]
    return out


class SimilarityView(VectorSpace, _Ranked):
    """Cosine similarity of one representation, with per-query top-k lists."""

    def __init__(self, name: str, ids: Sequence[str], vectors, k: int, queries=None,
                 block_size: int = 256, threads: int = 1):
        VectorSpace.__init__(self, name, ids, vectors)
        self._rank(k, queries, block_size, threads)


def build_view(name: str, ids: Sequence[str], vectors, k: int, queries=None,
               block_size: int = 256, threads: int = 1) -> SimilarityView:
    return SimilarityView(name, ids, vectors, k, queries, block_size, threads)


class FusedSimilarity(Fusion, _Ranked):
    """Mean of member-view cosines, ranked from exact fused rows."""

    def __init__(self, views: Sequence[VectorSpace], k: int | None = None, queries=None,
                 block_size: int = 256, threads: int = 1):
        Fusion.__init__(self, views)
        if k is None:
            k = max(getattr(v, "k", 0) for v in views)
            if k == 0:
                raise ValueError("k required when fusing unranked spaces")
        if queries is None and isinstance(views[0], _Ranked):
            queries = views[0].query_ids
        self._rank(k, queries, block_size, threads)


def fuse(views: Sequence[VectorSpace], k: int | None = None, queries=None,
         block_size: int = 256, threads: int = 1) -> FusedSimilarity:
    return FusedSimilarity(views, k, queries, block_size, threads)


def topn_accuracy(
    neighbors: Mapping[str, Sequence[str]] | _Ranked,
    truth: GroundTruth,
    ns: Iterable[int] = DEFAULT_TOPN,
    universe: Iterable[str] | None = None,
) -> dict[int, float]:
    """Mean over users with >= 1 match of (matches found in top N) / (matches).

    Matches are restricted to ``universe`` when given (the searchable cookies).
    """
    if isinstance(neighbors, _Ranked):
        if universe is None:
            universe = neighbors.ids
        neighbors = neighbors.neighbor_lists()
    allowed = set(universe) if universe is not None else None
    ns = sorted(set(int(n) for n in ns))
    hits = {n: 0.0 for n in ns}
    users = 0
    for user, ranked in neighbors.items():
        matches = truth.matches(user)
        if allowed is not None:
            matches &= allowed
        if not matches:
            continue
        users += 1
        for n in ns:
            hits[n] += sum(1 for c in ranked[:n] if c in matches) / len(matches)
    if users == 0:
        raise ValueError("no evaluated user has a ground-truth match")
    return {n: hits[n] / users for n in ns}


@dataclass(frozen=True, order=True)
class CandidatePair:
    u: str
    v: str
    score: float
    label: int | None = None


def select_candidates(
    fused: _Ranked, k: int = 5, truth: GroundTruth | None = None
) -> list[CandidatePair]:
    """Pairs (query, one of its top-k neighbours), deduplicated as unordered pairs."""
    k = min(k, fused.k)
    keys = set()
    for p, r in enumerate(fused.query_rows):
        a = fused.ids[r]
        for j in fused.neighbors[p, :k]:
            b = fused.ids[j]
            keys.add((a, b) if a < b else (b, a))
    keys = sorted(keys)
    scores = fused.pair_scores(keys)
    return [
        CandidatePair(a, b, float(s), None if truth is None else int(truth.is_match(a, b)))
        for (a, b), s in zip(keys, scores)
    ]


def candidate_recall(candidates: Iterable[CandidatePair], target_pairs: set[tuple[str, str]]) -> float:
    if not target_pairs:
        return 0.0
    found = {(c.u, c.v) for c in candidates} & target_pairs
    return len(found) / len(target_pairs)


def write_neighbors(path: str | Path, ranked: _Ranked) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cookie_id", "rank", "neighbor_id", "score"])
        for p, r in enumerate(ranked.query_rows):
            for rank, (j, s) in enumerate(zip(ranked.neighbors[p], ranked.scores[p]), start=1):
                w.writerow([ranked.ids[r], rank, ranked.ids[j], repr(float(s))])


def read_neighbors(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["cookie_id"], []).append(row["neighbor_id"])
    return out

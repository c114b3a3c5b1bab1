"""Smoothed TF-IDF over token-pool documents, producing L2-normalized sparse rows."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

Document = Mapping[str, int] | Iterable[str]


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass
class TfIdfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    max_features: int | None
    n_documents: int

    @property
    def dim(self) -> int:
        return len(self.vocabulary)


def _counts(doc: Document) -> Mapping[str, int]:
    if isinstance(doc, Mapping):
        return doc
    return Counter(doc)


def fit(documents: Sequence[Document], max_features: int | None = None) -> TfIdfModel:
    """Keep the ``max_features`` tokens with highest document frequency
    (ties broken lexicographically); idf(t) = ln((1 + N) / (1 + df(t))) + 1."""
    df: Counter = Counter()
    n = 0
    for doc in documents:
        n += 1
        df.update(t for t, c in _counts(doc).items() if c > 0)
    if not df:
        raise FitError("all documents are empty")
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_features is not None:
        ranked = ranked[:max_features]
    tokens = sorted(t for t, _ in ranked)
    vocab = {t: i for i, t in enumerate(tokens)}
    idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in tokens])
    return TfIdfModel(vocab, idf, max_features, n)


def _weights(model: TfIdfModel, doc: Document) -> tuple[np.ndarray, np.ndarray]:
    pairs = sorted(
        (model.vocabulary[t], c) for t, c in _counts(doc).items() if c > 0 and t in model.vocabulary
    )
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    idx = np.array([i for i, _ in pairs], dtype=np.int64)
    vals = np.array([c for _, c in pairs], dtype=float) * model.idf[idx]
    vals /= np.sqrt(np.dot(vals, vals))
    return idx, vals


def transform(model: TfIdfModel, doc: Document) -> SparseVector:
    idx, vals = _weights(model, doc)
    return SparseVector(idx, vals, model.dim)


def transform_many(model: TfIdfModel, docs: Sequence[Document]) -> sp.csr_matrix:
    indptr = [0]
    indices, data = [], []
    for doc in docs:
        idx, vals = _weights(model, doc)
        indices.append(idx)
        data.append(vals)
        indptr.append(indptr[-1] + len(idx))
    return sp.csr_matrix(
        (
            np.concatenate(data) if data else np.zeros(0),
            np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
            np.asarray(indptr),
        ),
        shape=(len(docs), model.dim),
    )


def save_model(path: str | Path, model: TfIdfModel) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# N={model.n_documents} max_features={model.max_features}\n")
        for tok, i in model.vocabulary.items():
            fh.write(f"{tok}\t{i}\t{float(model.idf[i])!r}\n")


def load_model(path: str | Path) -> TfIdfModel:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(kv.split("=") for kv in header)
        vocab, idf = {}, []
        for line in fh:
            tok, i, w = line.rstrip("\n").split("\t")
            vocab[tok] = int(i)
            idf.append(float(w))
    mf = None if meta["max_features"] == "None" else int(meta["max_features"])
    return TfIdfModel(vocab, np.array(idf), mf, int(meta["N"]))


def save_vectors(path: str | Path, ids: Sequence[str], matrix: sp.csr_matrix) -> None:
    """One line per row: ``cookie_id<TAB>dim<TAB>idx:value idx:value ...`` (repr floats)."""
    matrix = sp.csr_matrix(matrix)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, cid in enumerate(ids):
            lo, hi = matrix.indptr[r], matrix.indptr[r + 1]
            cells = " ".join(
                f"{int(i)}:{float(v)!r}" for i, v in zip(matrix.indices[lo:hi], matrix.data[lo:hi])
            )
            fh.write(f"{cid}\t{matrix.shape[1]}\t{cells}\n")


def load_vectors(path: str | Path) -> tuple[list[str], sp.csr_matrix]:
    ids, indptr, indices, data = [], [0], [], []
    dim = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cid, d, cells = line.rstrip("\n").split("\t")
            dim = int(d)
            ids.append(cid)
            for cell in cells.split():
                i, v = cell.split(":")
                indices.append(int(i))
                data.append(float(v))
            indptr.append(len(indices))
    m = sp.csr_matrix(
        (np.array(data, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(ids), dim),
    )
    return ids, m

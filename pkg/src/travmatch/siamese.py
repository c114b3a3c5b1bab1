"""Supervised URL embedding: one dense ReLU layer trained with contrastive loss.

The network maps a TF-IDF row ``x`` to ``f(x) = relu(W x + b)``.  For a pair
with label ``y`` (0 = same user, 1 = different users) and squared embedding
distance ``D``, the loss is ``D / 2`` for matches and ``max(0, m - D) / 2``
for non-matches.  Gradients are written out by hand and optimized with Adam.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .simfusion import build_view
from .synthlog import GroundTruth

log = logging.getLogger(__name__)


@dataclass
class SiameseConfig:
    input_dim: int = 1000
    output_dim: int = 128
    margin: float = 3.0
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 20
    batch_size: int = 256
    negative_top_k: int = 40
    seed: int = 0

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.negative_top_k < 1:
            raise ValueError("negative_top_k must be >= 1")
        if self.output_dim < 1 or self.input_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EmbeddingParams:
    W: np.ndarray  # (output_dim, input_dim)
    b: np.ndarray  # (output_dim,)

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.W.copy(), self.b.copy())


@dataclass(frozen=True)
class TrainingPair:
    i: int
    j: int
    y: int  # 0 = match, 1 = non-match

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("pair of a cookie with itself")


class DivergenceError(ArithmeticError):
    pass


def contrastive_loss(f_i, f_j, y: int, m: float) -> float:
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    if f_i.shape != f_j.shape:
        raise ValueError(f"dimension mismatch: {f_i.shape} vs {f_j.shape}")
    d2 = float(np.sum((f_i - f_j) ** 2))
    if y == 0:
        return 0.5 * d2
    return 0.5 * max(0.0, m - d2)


def _as_dense_rows(x) -> np.ndarray:
    if sp.issparse(x):
        return x.toarray()
    return np.atleast_2d(np.asarray(x, dtype=float))


def embed(params: EmbeddingParams, x) -> np.ndarray:
    """relu(W x + b) for one vector (1-D result) or for each row of a matrix."""
    single = not sp.issparse(x) and np.ndim(x) == 1
    if sp.issparse(x):
        if x.shape[1] != params.W.shape[1]:
            raise ValueError(f"input dim {x.shape[1]} != {params.W.shape[1]}")
        z = np.asarray(x @ params.W.T) + params.b
    else:
        x = _as_dense_rows(x)
        if x.shape[1] != params.W.shape[1]:
            raise ValueError(f"input dim {x.shape[1]} != {params.W.shape[1]}")
        z = x @ params.W.T + params.b
    out = np.maximum(z, 0.0)
    return out[0] if single else out


def _batch_grads(params: EmbeddingParams, xi, xj, y: np.ndarray, m: float, Wt=None):
    """Mean loss and its gradients over a batch of pairs (rows of xi, xj).

    ``xj=None`` means ``xi`` already stacks both sides (i rows, then j rows).

    ``Wt`` is an optional C-contiguous copy of ``W.T``; the gradient for W is
    returned in that (input_dim, output_dim) layout when it is given.
    """
    n = len(y)
    if xj is None:
        x = xi  # already stacked: first n rows are the i side
    elif sp.issparse(xi):
        x = sp.vstack([xi, xj], format="csr")
    else:
        x = np.vstack([xi, xj])
    z = np.asarray(x @ (params.W.T if Wt is None else Wt)) + params.b
    f = np.maximum(z, 0.0)
    diff = f[:n] - f[n:]
    d2 = np.einsum("ij,ij->i", diff, diff)
    neg = y == 1
    hinge = m - d2
    losses = np.where(neg, 0.5 * np.maximum(hinge, 0.0), 0.5 * d2)
    # dL/df_i = diff for matches, -diff for active non-matches, 0 when saturated
    coef = (np.where(neg, np.where(hinge > 0, -1.0, 0.0), 1.0) / n).astype(diff.dtype)
    gf = coef[:, None] * diff
    gz = np.vstack([gf, -gf])
    gz *= z > 0
    gWt = np.asarray(x.T @ gz)
    gb = gz.sum(axis=0)
    return float(losses.mean()), (gWt if Wt is not None else gWt.T), gb


def loss_gradients(x_i, x_j, params: EmbeddingParams, y: int, m: float):
    """Gradients of the single-pair contrastive loss w.r.t. (W, b).

    Subgradient conventions: relu'(0) = 0 and the hinge is inactive at D == m.
    """
    xi = _as_dense_rows(x_i)
    xj = _as_dense_rows(x_j)
    if xi.shape != xj.shape or xi.shape[1] != params.W.shape[1]:
        raise ValueError("dimension mismatch")
    _, gW, gb = _batch_grads(params, xi, xj, np.array([int(y)]), m)
    if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
        raise DivergenceError("non-finite gradient")
    return gW, gb


def init_params(input_dim: int, output_dim: int, seed: int) -> EmbeddingParams:
    """He-uniform weights, zero bias."""
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / input_dim)
    W = rng.uniform(-limit, limit, size=(output_dim, input_dim))
    return EmbeddingParams(W, np.zeros(output_dim))


def sample_training_pairs(
    ids: Sequence[str], truth: GroundTruth, unsup_vectors, k: int = 40, block_size: int = 256
) -> list[TrainingPair]:
    """All ground-truth matches (y=0) plus, per cookie, its ``k`` most
    cosine-similar non-matching cookies (y=1).  Indices refer to ``ids``.

    Neighbours with similarity <= 0 are skipped, so zero vectors contribute
    no negatives.
    """
    ids = list(ids)
    pos = {c: i for i, c in enumerate(ids)}
    pairs: set[tuple[int, int, int]] = set()
    for a, b in truth.restrict(ids).pairs():
        i, j = sorted((pos[a], pos[b]))
        pairs.add((i, j, 0))
    if len(ids) >= 2:
        max_matches = max((len(truth.matches(c)) for c in ids), default=0)
        view = build_view("unsupervised_url", ids, unsup_vectors, k + max_matches, block_size=block_size)
        for c in view.query_ids:
            taken = 0
            for nb, score in view.top(c):
                if taken == k or score <= 0:
                    break
                if truth.is_match(c, nb):
                    continue
                i, j = sorted((pos[c], pos[nb]))
                pairs.add((i, j, 1))
                taken += 1
    return [TrainingPair(i, j, y) for i, j, y in sorted(pairs, key=lambda p: (p[2], p[0], p[1]))]


def train(
    pairs: Sequence[TrainingPair], inputs, config: SiameseConfig, trace: list | None = None
) -> EmbeddingParams:
    """Adam on the mean contrastive loss over shuffled mini-batches.

    ``trace`` (if given) receives one ``(epoch, mean_loss)`` tuple per epoch.
    """
    config.validate()
    ys = np.array([p.y for p in pairs], dtype=int)
    if config.epochs > 0 and not (np.any(ys == 0) and np.any(ys == 1)):
        raise ValueError("training needs at least one positive and one negative pair")
    # float32 inside the loop: roughly halves the sparse products' cost
    X = sp.csr_matrix(inputs, dtype=np.float32)
    if X.shape[1] != config.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != config.input_dim {config.input_dim}")
    params = init_params(config.input_dim, config.output_dim, config.seed)
    if config.epochs == 0:
        return params
    I = np.array([p.i for p in pairs])
    J = np.array([p.j for p in pairs])
    rng = np.random.default_rng(config.seed + 1)
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    Wt = np.ascontiguousarray(params.W.T, dtype=np.float32)
    bias = params.b.astype(np.float32)
    mW, vW = np.zeros_like(Wt), np.zeros_like(Wt)
    mb, vb = np.zeros_like(bias), np.zeros_like(bias)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        # one gather per epoch: each batch becomes a contiguous block of
        # rows holding its i side followed by its j side
        starts = range(0, len(order), config.batch_size)
        rows = np.concatenate(
            [np.concatenate([I[order[s : s + config.batch_size]], J[order[s : s + config.batch_size]]]) for s in starts]
        )
        Xe, ye = X[rows], ys[order]
        total, count = 0.0, 0
        for s in starts:
            idx = order[s : s + config.batch_size]
            loss, gW, gb = _batch_grads(
                EmbeddingParams(Wt.T, bias), Xe[2 * s : 2 * s + 2 * len(idx)], None,
                ye[s : s + len(idx)], config.margin, Wt,
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            step += 1
            c1, c2 = 1 - b1**step, 1 - b2**step
            for p, g, mom, var in ((Wt, gW, mW, vW), (bias, gb, mb, vb)):
                mom *= b1
                mom += (1 - b1) * g
                var *= b2
                var += (1 - b2) * (g * g)
                denom = np.sqrt(var / c2)
                denom += eps
                p -= (lr / c1) * mom / denom
            total += loss * len(idx)
            count += len(idx)
        mean_loss = total / count
        log.debug("siamese epoch %d loss %.6f", epoch, mean_loss)
        if trace is not None:
            trace.append((epoch, mean_loss))
    params.W = np.ascontiguousarray(Wt.T, dtype=float)
    params.b = bias.astype(float)
    return params


def save_params(path: str | Path, params: EmbeddingParams, config: SiameseConfig) -> None:
    """JSON header line followed by the raw .npy payloads of W and b."""
    header = {
        "output_dim": int(params.W.shape[0]),
        "input_dim": int(params.W.shape[1]),
        "seed": config.seed,
        "config_hash": config.digest(),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        np.save(fh, params.W)
        np.save(fh, params.b)


def load_params(path: str | Path) -> tuple[EmbeddingParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        W = np.load(fh)
        b = np.load(fh)
    return EmbeddingParams(W, b), header


def write_loss_trace(path: str | Path, trace: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in trace:
            fh.write(f"{epoch},{float(loss)!r}\n")

"""Analysis instruments: mining purity, gradient-vs-rank profiles, probes.

These run on the artifact's own embeddings and banks. Purity asks how many
mined neighbors share the query's held-out label; the gradient profile
measures how strongly each similarity rank of the bank would pull on a
query under the binary cross-entropy coefficient; the probes score frozen
embeddings with kNN or a small logistic head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .memory_bank import MemoryBank
from .numerics import check_unit_rows


@dataclass
class PurityReport:
    """Per-batch purity values for one epoch of mining."""

    k: int
    values: list[float] = field(default_factory=list)

    def add(self, value: float) -> None:
        self.values.append(float(value))

    @property
    def epoch_mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")


def purity(
    mined_labels: Sequence[np.ndarray], query_labels: np.ndarray, k: int | None = None
) -> PurityReport:
    """Fraction of mined labels matching their query's label, batch-averaged.

    ``mined_labels[i]`` lists the labels of the entries mined for query i
    (the augmented view itself is not part of the mined set). Queries with
    an empty mined list are skipped in the per-query average.
    """
    query_labels = np.asarray(query_labels).reshape(-1)
    if len(mined_labels) != query_labels.shape[0]:
        raise ValueError(
            f"{len(mined_labels)} mined lists for {query_labels.shape[0]} queries"
        )
    fractions = []
    widest = 0
    for got, want in zip(mined_labels, query_labels):
        got = np.asarray(got)
        widest = max(widest, got.size)
        if got.size:
            fractions.append(float(np.mean(got == want)))
    report = PurityReport(k=widest if k is None else k)
    if fractions:
        report.add(float(np.mean(fractions)))
    return report


def bce_gradient_coefficient(s, is_positive: bool):
    """Gradient coefficient of the pairwise BCE objective at similarity s.

    On [0, 1]-mapped similarities the positive branch contributes s - 1 and
    the negative branch s, so satisfied positives (s near 1) and
    dissimilar negatives (s near 0) are both uninformative.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError("similarity must lie in [0, 1] for this analysis")
    out = s - 1.0 if is_positive else s + 0.0
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class GradientProfile:
    """Rank-indexed gradient statistics, each curve scaled to max 1."""

    mean_norm: NDArray[np.float64]
    var_norm: NDArray[np.float64]
    mean_positive_rank: float
    rank_depth: int


def _normalize_curve(curve: np.ndarray) -> np.ndarray:
    top = curve.max() if curve.size else 0.0
    if top <= 0.0:
        return np.ones_like(curve)
    return curve / top


def gradient_profile(
    queries: np.ndarray, positives: np.ndarray, bank: MemoryBank, rank_depth: int = 200
) -> GradientProfile:
    """Mean/variance of the per-negative gradient magnitude by similarity rank.

    For each query the bank entries are ranked by descending cosine
    similarity; the entry at rank r contributes the magnitude of its BCE
    coefficient (negative branch, similarity remapped to [0, 1]) times the
    unit norm of d(s)/d(query). Curves are the across-query mean and
    variance per rank, each divided by its own maximum; a curve that is
    identically zero normalizes to all ones. The positive rank is where
    each query's own view would slot into that ranking, 1-based, averaged.
    """
    if rank_depth < 1:
        raise ValueError("rank_depth must be positive")
    if len(bank) < rank_depth:
        raise ValueError(
            f"bank holds {len(bank)} entries; profile needs at least {rank_depth}"
        )
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if positives.shape != queries.shape:
        raise ValueError("queries and positives must align")
    check_unit_rows(queries, "queries")
    check_unit_rows(positives, "positives")
    sims = bank.similarities(queries)
    ranked = -np.sort(-sims, axis=1)[:, :rank_depth]
    # statistic per (query, rank): |coefficient| * ||d s / d q|| with the
    # derivative of a dot product against a unit bank row having norm 1
    stats = bce_gradient_coefficient((ranked + 1.0) / 2.0, is_positive=False)
    mean_curve = stats.mean(axis=0)
    var_curve = stats.var(axis=0)
    s_pos = np.einsum("ij,ij->i", queries, positives)
    pos_rank = 1.0 + (sims > s_pos[:, None]).sum(axis=1)
    return GradientProfile(
        mean_norm=_normalize_curve(mean_curve),
        var_norm=_normalize_curve(var_curve),
        mean_positive_rank=float(pos_rank.mean()),
        rank_depth=rank_depth,
    )


def knn_probe(
    train_emb: np.ndarray,
    train_labels: np.ndarray,
    test_emb: np.ndarray,
    test_labels: np.ndarray,
    k_nn: int = 20,
) -> float:
    """Majority vote over the k_nn most cosine-similar training rows.

    Vote ties resolve to the smallest label. Expects normalized embeddings.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train_emb.shape[0] == 0:
        raise ValueError("empty train set")
    if k_nn < 1:
        raise ValueError("k_nn must be at least 1")
    k = min(k_nn, train_emb.shape[0])
    sims = test_emb @ train_emb.T
    nn_idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_labels[nn_idx]
    n_classes = int(train_labels.max()) + 1
    correct = 0
    for i in range(test_emb.shape[0]):
        counts = np.bincount(votes[i], minlength=n_classes)
        if counts.argmax() == test_labels[i]:
            correct += 1
    return correct / test_emb.shape[0]


def linear_probe(
    train_emb: np.ndarray,
    train_labels: np.ndarray,
    test_emb: np.ndarray,
    test_labels: np.ndarray,
    epochs: int = 100,
    lr: float = 1.0,
) -> tuple[float, float]:
    """Multinomial logistic head on frozen embeddings, full-batch GD.

    Returns (top-1 accuracy, top-min(5, C) accuracy) on the test rows.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train_emb.shape[0] == 0 or test_emb.shape[0] == 0:
        raise ValueError("probe needs nonempty train and test sets")
    n, d = train_emb.shape
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), train_labels] = 1.0
    for _ in range(epochs):
        logits = train_emb @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (g.T @ train_emb)
        b -= lr * g.sum(axis=0)
    logits = test_emb @ w.T + b
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = float(np.mean(order[:, 0] == test_labels))
    kk = min(5, n_classes)
    topk = float(np.mean([test_labels[i] in order[i, :kk] for i in range(len(test_labels))]))
    return top1, topk


def write_gradient_profile_csv(profile: GradientProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,mean_norm,var_norm\n")
        for r in range(profile.rank_depth):
            fh.write(
                f"{r + 1},{repr(float(profile.mean_norm[r]))},"
                f"{repr(float(profile.var_norm[r]))}\n"
            )


def write_purity_csv(
    rows: Iterable[tuple[int, int, float]], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,batch,purity\n")
        for epoch, batch, value in rows:
            fh.write(f"{epoch},{batch},{repr(float(value))}\n")

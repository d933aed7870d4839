"""Negative-sample mining: Bernoulli retention peaked at the positive similarity.

Each negative candidate survives with probability exp(-a * (s_neg - s_pos)**2),
so negatives whose similarity sits far from the positive's (uninformative ones
near -1/0, and the most extreme hard ones) are thinned out, while candidates
that look like the positive, the likely false negatives and the informative
hard negatives, are kept almost surely. ``a`` controls how sharply the window
closes; a = 0 keeps everything.

Mining is applied to similarities only and never carries gradient. All
randomness flows through explicit RngState substreams, so replaying a
(seed, epoch, step) triple reproduces the retained sets exactly, whatever
order the queries are evaluated in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ._kernels import mine_mask
from .numerics import RngState, check_unit_rows

FALLBACK_ARGMAX = "argmax_p"


@dataclass
class MiningConfig:
    """Density parameter and fallback policy for negative mining.

    The rng substream a caller passes in is expected to already encode the
    (seed, epoch, step) position; per-query separation happens inside
    filter_negative_sets.
    """

    a: float = 0.5
    fallback: str = FALLBACK_ARGMAX

    def __post_init__(self):
        if self.a < 0:
            raise ValueError(f"a must be nonnegative, got {self.a}")
        if self.fallback != FALLBACK_ARGMAX:
            raise ValueError(f"unknown fallback policy {self.fallback!r}")


@dataclass
class MinedNegativeSet:
    """Retention result for one query: kept candidate indices plus all p_i."""

    query_id: int
    kept: NDArray[np.int64]
    probs: NDArray[np.float64]


def mining_probability(s_neg, s_pos, a: float):
    """p = exp(-a * (s_neg - s_pos)**2), elementwise on array input."""
    if a < 0:
        raise ValueError(f"a must be nonnegative, got {a}")
    d = np.asarray(s_neg, dtype=np.float64) - np.asarray(s_pos, dtype=np.float64)
    p = np.exp(-a * d * d)
    if np.ndim(p) == 0:
        return float(p)
    return p


def mine_negatives(
    q1: np.ndarray,
    s_pos: float,
    candidates: np.ndarray,
    cfg: MiningConfig,
    rng: RngState,
    query_id: int = 0,
) -> MinedNegativeSet:
    """Bernoulli-select negatives for a single query.

    If every candidate is rejected, the one with the largest probability is
    retained instead (first index on ties), so the result is nonempty
    whenever ``candidates`` is.
    """
    q1 = np.asarray(q1, dtype=np.float64).reshape(-1)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.size == 0:
        return MinedNegativeSet(query_id, np.empty(0, dtype=np.int64), np.empty(0))
    check_unit_rows(candidates, "candidates")
    sims = np.clip(candidates @ q1, -1.0, 1.0)
    off = np.array([0, len(sims)], dtype=np.int64)
    uniforms = rng.uniform(len(sims))
    probs, keep = mine_mask(sims, np.array([s_pos]), off, cfg.a, uniforms)
    return MinedNegativeSet(query_id, np.nonzero(keep)[0].astype(np.int64), probs)


def filter_negative_sets(
    candidate_sets: Sequence[np.ndarray],
    q1: np.ndarray,
    s_pos: np.ndarray,
    cfg: MiningConfig,
    rng: RngState,
) -> list[MinedNegativeSet]:
    """Independent per-query mining over a batch of candidate sets.

    Query i draws from the substream rng.split("q", i), so the outcome does
    not depend on evaluation order. The anchor similarity s_pos[i] is the
    query's similarity to its own augmented view, for hard and soft
    candidate pools alike.
    """
    q1 = np.atleast_2d(np.asarray(q1, dtype=np.float64))
    s_pos = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    if len(candidate_sets) != q1.shape[0] or len(candidate_sets) != s_pos.shape[0]:
        raise ValueError(
            f"arity mismatch: {len(candidate_sets)} candidate sets, "
            f"{q1.shape[0]} queries, {s_pos.shape[0]} anchors"
        )
    out = []
    for i, cand in enumerate(candidate_sets):
        out.append(
            mine_negatives(q1[i], float(s_pos[i]), cand, cfg, rng.split("q", i), query_id=i)
        )
    return out


def filter_csr(
    sims_flat: np.ndarray,
    s_pos: np.ndarray,
    off: np.ndarray,
    cfg: MiningConfig,
    rng: RngState,
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Mining mask over pre-computed ragged similarities (trainer hot path).

    One flat uniform block is drawn for the whole pool, indexed by candidate
    position; determinism and order-independence follow from the fixed
    layout. Returns (probs, keep) aligned with sims_flat.
    """
    uniforms = rng.uniform(int(np.asarray(sims_flat).shape[0]))
    return mine_mask(sims_flat, s_pos, off, cfg.a, uniforms)

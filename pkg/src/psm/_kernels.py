"""Hot loops behind the loss and mining math, with two interchangeable backends.

The contrastive losses and the Bernoulli negative filter are per-query ragged
loops, which is exactly where numba pays off. Everything else in the package
(the MLP forward/backward in particular) is matmul-bound and stays in numpy
regardless of backend.

Backend selection:
  * env var PSM_BACKEND = "numba" | "numpy" (default: numba when importable)
  * set_backend() switches at runtime; active_backend() reports the choice
  * env var PSM_THREADS caps numba threads (default 1, for reproducibility)

Within one backend results are deterministic for fixed inputs regardless of
thread count: the parallel loop writes disjoint rows and each row reduces
sequentially. Across backends, values agree to ~1e-10 (summation order in
the dot products differs), not bit-exactly.

Both kernels consume pre-drawn uniforms / plain arrays only, so random
number consumption is identical whichever backend runs.
"""

from __future__ import annotations

import os
import warnings

import numpy as np
from numpy.typing import NDArray

try:
    import numba
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

_BACKENDS = ("numba", "numpy")
_active: str = ""


def available_backends() -> tuple[str, ...]:
    return _BACKENDS if NUMBA_AVAILABLE else ("numpy",)


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    """Select the kernel backend ("numba" or "numpy")."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {_BACKENDS}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise ValueError("numba backend requested but numba is not importable")
    _active = name


def _init_backend() -> None:
    requested = os.environ.get("PSM_BACKEND", "").strip().lower()
    if requested and requested not in _BACKENDS:
        warnings.warn(
            f"ignoring PSM_BACKEND={requested!r}; expected 'numba' or 'numpy'",
            stacklevel=1,
        )
        requested = ""
    if not requested:
        requested = "numba" if NUMBA_AVAILABLE else "numpy"
    if requested == "numba" and not NUMBA_AVAILABLE:
        warnings.warn("PSM_BACKEND=numba but numba is missing; using numpy")
        requested = "numpy"
    set_backend(requested)

    if NUMBA_AVAILABLE:
        raw = os.environ.get("PSM_THREADS", "1").strip()
        try:
            want = max(1, int(raw))
        except ValueError:
            warnings.warn(f"ignoring PSM_THREADS={raw!r}; using 1")
            want = 1
        numba.set_num_threads(min(want, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Weighted NCE loss + gradient, ragged over both positives and negatives.
#
# Layout: query i owns positives pos_flat[pos_off[i]:pos_off[i+1]] with
# weights w_flat over the same span, and negatives cands[neg_idx[m]] for
# m in [neg_off[i], neg_off[i+1]). The per-query loss is
#     sum_j w_j * (logsumexp(all logits / t) - s_pos_j / t)
# where "all logits" spans that query's positives and negatives together.
# The gradient is with respect to the raw (pre-normalization) query row;
# weights, positives, and candidates are constants.
# ---------------------------------------------------------------------------


def _nce_loss_grad_numpy(q_raw, pos_flat, w_flat, pos_off, cands, neg_idx, neg_off, t):
    nq, dim = q_raw.shape
    loss = np.zeros(nq, dtype=np.float64)
    grad = np.zeros_like(q_raw)
    for i in range(nq):
        u = q_raw[i]
        nrm = float(np.sqrt(u @ u))
        if nrm == 0.0:
            continue
        q = u / nrm
        ps, pe = pos_off[i], pos_off[i + 1]
        ns, ne = neg_off[i], neg_off[i + 1]
        if pe == ps:
            continue
        pos = pos_flat[ps:pe]
        w = w_flat[ps:pe]
        idx = neg_idx[ns:ne]
        sp = pos @ q
        sn = cands[idx] @ q if ne > ns else np.empty(0)
        logits = np.concatenate([sp, sn]) / t
        m = logits.max()
        e = np.exp(logits - m)
        z = e.sum()
        lse = m + np.log(z)
        wsum = w.sum()
        loss[i] = float(np.dot(w, lse - sp / t))
        # d(loss)/d(similarity) for every member of the denominator.
        dlds = (wsum / t) * (e / z)
        dlds[: pe - ps] -= w / t
        g = dlds[: pe - ps] @ pos
        if ne > ns:
            g = g + dlds[pe - ps :] @ cands[idx]
        grad[i] = (g - (q @ g) * q) / nrm
    return loss, grad


def _mine_mask_numpy(sims_flat, s_pos, off, a, uniforms):
    counts = np.diff(off)
    anchor = np.repeat(s_pos, counts)
    delta = sims_flat - anchor
    probs = np.exp(-a * delta * delta)
    keep = uniforms < probs
    # Fallback: a query whose candidates were all rejected keeps its
    # single most probable candidate (first index on ties).
    csum = np.concatenate([[0], np.cumsum(keep)])
    kept_per_q = csum[off[1:]] - csum[off[:-1]]
    for i in np.nonzero((kept_per_q == 0) & (counts > 0))[0]:
        s, e = off[i], off[i + 1]
        keep[s + int(np.argmax(probs[s:e]))] = True
    return probs, keep


if NUMBA_AVAILABLE:

    @njit(cache=True, parallel=True)
    def _nce_loss_grad_numba(
        q_raw, pos_flat, w_flat, pos_off, cands, neg_idx, neg_off, t
    ):  # pragma: no cover - measured through the dispatcher
        nq, dim = q_raw.shape
        loss = np.zeros(nq, dtype=np.float64)
        grad = np.zeros_like(q_raw)
        for i in prange(nq):
            nrm = 0.0
            for c in range(dim):
                nrm += q_raw[i, c] * q_raw[i, c]
            nrm = np.sqrt(nrm)
            if nrm == 0.0:
                continue
            ps, pe = pos_off[i], pos_off[i + 1]
            ns, ne = neg_off[i], neg_off[i + 1]
            npos = pe - ps
            nneg = ne - ns
            if npos == 0:
                continue
            q = q_raw[i] / nrm
            logits = np.empty(npos + nneg, dtype=np.float64)
            for j in range(npos):
                s = 0.0
                for c in range(dim):
                    s += pos_flat[ps + j, c] * q[c]
                logits[j] = s / t
            for m in range(nneg):
                row = neg_idx[ns + m]
                s = 0.0
                for c in range(dim):
                    s += cands[row, c] * q[c]
                logits[npos + m] = s / t
            mx = logits[0]
            for j in range(1, npos + nneg):
                if logits[j] > mx:
                    mx = logits[j]
            z = 0.0
            for j in range(npos + nneg):
                z += np.exp(logits[j] - mx)
            lse = mx + np.log(z)
            wsum = 0.0
            li = 0.0
            for j in range(npos):
                wj = w_flat[ps + j]
                wsum += wj
                li += wj * (lse - logits[j])
            loss[i] = li
            g = np.zeros(dim, dtype=np.float64)
            for j in range(npos):
                coef = (wsum / t) * np.exp(logits[j] - mx) / z - w_flat[ps + j] / t
                for c in range(dim):
                    g[c] += coef * pos_flat[ps + j, c]
            for m in range(nneg):
                row = neg_idx[ns + m]
                coef = (wsum / t) * np.exp(logits[npos + m] - mx) / z
                for c in range(dim):
                    g[c] += coef * cands[row, c]
            qg = 0.0
            for c in range(dim):
                qg += q[c] * g[c]
            for c in range(dim):
                grad[i, c] = (g[c] - qg * q[c]) / nrm
        return loss, grad

    @njit(cache=True, parallel=True)
    def _mine_mask_numba(
        sims_flat, s_pos, off, a, uniforms
    ):  # pragma: no cover - measured through the dispatcher
        n = sims_flat.shape[0]
        nq = off.shape[0] - 1
        probs = np.empty(n, dtype=np.float64)
        keep = np.zeros(n, dtype=np.bool_)
        for i in prange(nq):
            s, e = off[i], off[i + 1]
            any_kept = False
            best = s
            best_p = -1.0
            for m in range(s, e):
                d = sims_flat[m] - s_pos[i]
                p = np.exp(-a * d * d)
                probs[m] = p
                if uniforms[m] < p:
                    keep[m] = True
                    any_kept = True
                if p > best_p:
                    best_p = p
                    best = m
            if not any_kept and e > s:
                keep[best] = True
        return probs, keep


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _as_i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def nce_loss_grad(
    q_raw: NDArray[np.float64],
    pos_flat: NDArray[np.float64],
    w_flat: NDArray[np.float64],
    pos_off: NDArray[np.int64],
    cands: NDArray[np.float64],
    neg_idx: NDArray[np.int64],
    neg_off: NDArray[np.int64],
    t: float,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-query weighted NCE loss values and gradients w.r.t. raw queries.

    Args:
        q_raw: (B, d) query rows, normalized inside the kernel.
        pos_flat: flattened positive embeddings, unit rows.
        w_flat: weight per positive, aligned with pos_flat.
        pos_off: (B+1,) segment offsets into pos_flat / w_flat.
        cands: (M, d) candidate matrix holding every potential negative.
        neg_idx: flat candidate row indices, one per retained negative.
        neg_off: (B+1,) segment offsets into neg_idx.
        t: temperature, > 0.

    Returns:
        (loss_per_query, grad_raw) with shapes (B,) and (B, d).
    """
    if t <= 0.0:
        raise ValueError(f"temperature must be positive, got {t}")
    q_raw = _as_f64(q_raw)
    pos_flat = _as_f64(pos_flat)
    w_flat = _as_f64(w_flat)
    cands = _as_f64(cands)
    pos_off = _as_i64(pos_off)
    neg_idx = _as_i64(neg_idx)
    neg_off = _as_i64(neg_off)
    if cands.ndim != 2:
        cands = cands.reshape(0, q_raw.shape[1])
    if _active == "numba":
        return _nce_loss_grad_numba(
            q_raw, pos_flat, w_flat, pos_off, cands, neg_idx, neg_off, float(t)
        )
    return _nce_loss_grad_numpy(
        q_raw, pos_flat, w_flat, pos_off, cands, neg_idx, neg_off, float(t)
    )


def mine_mask(
    sims_flat: NDArray[np.float64],
    s_pos: NDArray[np.float64],
    off: NDArray[np.int64],
    a: float,
    uniforms: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Bernoulli retention mask over ragged per-query candidate similarities.

    Candidate m of query i is kept when uniforms[m] < exp(-a * (sims[m] -
    s_pos[i])**2). A query whose candidates were all rejected keeps the
    single candidate with the largest probability (first on ties), so the
    retained set is nonempty whenever the candidate set is.
    """
    if a < 0.0:
        raise ValueError(f"a must be nonnegative, got {a}")
    sims_flat = _as_f64(sims_flat)
    s_pos = _as_f64(s_pos)
    off = _as_i64(off)
    uniforms = _as_f64(uniforms)
    if sims_flat.shape != uniforms.shape:
        raise ValueError("uniforms must align with sims_flat")
    if _active == "numba":
        return _mine_mask_numba(sims_flat, s_pos, off, float(a), uniforms)
    return _mine_mask_numpy(sims_flat, s_pos, off, float(a), uniforms)


_init_backend()

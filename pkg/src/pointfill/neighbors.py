"""Exact k-nearest neighbours with a bounded working set.

Queries are processed ``chunk`` rows at a time against ``ref_chunk``
reference columns, so the transient distance block never exceeds
``chunk * ref_chunk`` entries regardless of the cloud sizes. Ties are
resolved by the smaller reference index, which makes the result independent
of the chunking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CHUNK = 512
DEFAULT_REF_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class KnnResult:
    indices: np.ndarray  # (Q, k) int64
    distances: np.ndarray  # (Q, k) float64, Euclidean, non-decreasing per row


def _coords(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    return np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))


def squared_block(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, summed as ``dx² + dy² + dz²``.

    The summation order is fixed so every entry is bit-identical however the
    clouds are blocked.
    """
    out = np.subtract.outer(q[:, 0], r[:, 0])
    out *= out
    tmp = np.subtract.outer(q[:, 1], r[:, 1])
    tmp *= tmp
    out += tmp
    np.subtract.outer(q[:, 2], r[:, 2], out=tmp)
    tmp *= tmp
    out += tmp
    return out


def _block_topk(d: np.ndarray, kk: int) -> np.ndarray:
    """Column indices of the ``kk`` smallest entries per row, ordered by (value, index)."""
    rows, cols = d.shape
    if kk == 1:
        # argmin reports the first minimum, i.e. the smallest index
        return d.argmin(axis=1)[:, None]
    if cols <= kk:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, [kk - 1, kk], axis=1)
    idx = part[:, :kk]
    ar = np.arange(rows)
    tied = d[ar, part[:, kk - 1]] == d[ar, part[:, kk]]
    # a tie straddling the cut makes the partition's choice arbitrary
    for row in np.flatnonzero(tied):
        idx[row] = np.argsort(d[row], kind="stable")[:kk]
    vals = np.take_along_axis(d, idx, axis=1)
    order = np.lexsort((idx, vals), axis=1)
    return np.take_along_axis(idx, order, axis=1)


def knn_squared(
    query,
    reference,
    k: int,
    exclude_self: bool = False,
    chunk: int = DEFAULT_CHUNK,
    ref_chunk: int = DEFAULT_REF_CHUNK,
) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices and *squared* distances; see :func:`knn`."""
    q = _coords(query)
    r = _coords(reference)
    if len(q) == 0 or len(r) == 0:
        raise ValueError("knn needs non-empty query and reference clouds")
    if exclude_self and len(q) != len(r):
        raise ValueError("exclude_self requires the query to be the reference cloud")
    available = len(r) - (1 if exclude_self else 0)
    if k < 1 or k > available:
        raise ValueError(f"k={k} is out of range for {available} candidate neighbours")
    if chunk < 1 or ref_chunk < 1:
        raise ValueError("chunk sizes must be >= 1")

    out_idx = np.empty((len(q), k), dtype=np.int64)
    out_d2 = np.empty((len(q), k), dtype=np.float64)
    for q0 in range(0, len(q), chunk):
        qc = q[q0:q0 + chunk]
        best_i = np.empty((len(qc), 0), dtype=np.int64)
        best_d = np.empty((len(qc), 0), dtype=np.float64)
        for r0 in range(0, len(r), ref_chunk):
            block = squared_block(qc, r[r0:r0 + ref_chunk])
            if exclude_self:
                rows = np.arange(len(qc))
                own = rows + q0 - r0
                hit = (own >= 0) & (own < block.shape[1])
                block[rows[hit], own[hit]] = np.inf
            sel = _block_topk(block, min(k, block.shape[1]))
            cand_i = np.concatenate([best_i, sel + r0], axis=1)
            cand_d = np.concatenate([best_d, np.take_along_axis(block, sel, axis=1)], axis=1)
            order = np.lexsort((cand_i, cand_d), axis=1)[:, :k]
            best_i = np.take_along_axis(cand_i, order, axis=1)
            best_d = np.take_along_axis(cand_d, order, axis=1)
        out_idx[q0:q0 + len(qc)] = best_i
        out_d2[q0:q0 + len(qc)] = best_d
    return out_idx, out_d2


def knn(
    query,
    reference,
    k: int,
    exclude_self: bool = False,
    chunk: int = DEFAULT_CHUNK,
    ref_chunk: int = DEFAULT_REF_CHUNK,
) -> KnnResult:
    """Exact ``k`` nearest reference points for every query point.

    With ``exclude_self`` the query cloud must be the reference cloud and row
    ``i`` never reports index ``i``.
    """
    idx, d2 = knn_squared(query, reference, k, exclude_self, chunk, ref_chunk)
    return KnnResult(idx, np.sqrt(d2))

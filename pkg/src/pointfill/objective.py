"""Chamfer-family training objectives with analytic gradients.

All functions accept :class:`~pointfill.cloud.PointCloud` objects or plain
``(n, 3)`` arrays and return a :class:`LossValue` whose ``gradient`` is taken
with respect to the *reconstructed* cloud (the first argument).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neighbors import knn_squared

KINDS = ("cd", "ecd", "dacd", "dacd_knn")


@dataclass
class ObjectiveConfig:
    kind: str = "dacd_knn"
    alpha: float = 0.1
    k: int = 4
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; choose from {KINDS}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and >= 0")
        if int(self.k) != self.k or self.k < 2:
            raise ValueError("k must be an integer >= 2")
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray | None = None

    def __add__(self, other: LossValue) -> LossValue:
        grad = None
        if self.gradient is not None and other.gradient is not None:
            grad = self.gradient + other.gradient
        return LossValue(self.value + other.value, grad)

    def scaled(self, w: float) -> LossValue:
        return LossValue(w * self.value, None if self.gradient is None else w * self.gradient)


def _pts(x) -> np.ndarray:
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("objective needs non-empty clouds")
    return pts


def _check_frames(pr, pgt) -> None:
    fa, fb = getattr(pr, "frame", None), getattr(pgt, "frame", None)
    if fa is not None and fb is not None and fa != fb:
        raise ValueError(f"clouds are in different frames ({fa} vs {fb})")


def _unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """``diff / dist`` with zero where the points coincide."""
    out = np.zeros_like(diff)
    nz = dist > 0
    out[nz] = diff[nz] / dist[nz, None]
    return out


def _nearest(x: np.ndarray, y: np.ndarray):
    i_xy, d2_xy = knn_squared(x, y, 1)
    i_yx, d2_yx = knn_squared(y, x, 1)
    return i_xy[:, 0], d2_xy[:, 0], i_yx[:, 0], d2_yx[:, 0]


def chamfer(pr, pgt, with_grad: bool = True) -> LossValue:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    _check_frames(pr, pgt)
    x, y = _pts(pr), _pts(pgt)
    i_xy, d2_xy, i_yx, d2_yx = _nearest(x, y)
    value = float(d2_xy.mean() + d2_yx.mean())
    if not with_grad:
        return LossValue(value)
    grad = 2.0 / len(x) * (x - y[i_xy])
    np.add.at(grad, i_yx, 2.0 / len(y) * (x[i_yx] - y))
    return LossValue(value, grad)


def extended_chamfer(pr, pgt, with_grad: bool = True) -> LossValue:
    """Larger of the two directional mean (unsquared) nearest-neighbour distances."""
    _check_frames(pr, pgt)
    x, y = _pts(pr), _pts(pgt)
    i_xy, d2_xy, i_yx, d2_yx = _nearest(x, y)
    d_xy, d_yx = np.sqrt(d2_xy), np.sqrt(d2_yx)
    forward, backward = d_xy.mean(), d_yx.mean()
    value = float(max(forward, backward))
    if not with_grad:
        return LossValue(value)
    grad = np.zeros_like(x)
    if forward >= backward:
        grad += _unit(x - y[i_xy], d_xy) / len(x)
    else:
        np.add.at(grad, i_yx, _unit(x[i_yx] - y, d_yx) / len(y))
    return LossValue(value, grad)


def dacd(pr, pgt, cfg: ObjectiveConfig | None = None, with_grad: bool = True) -> LossValue:
    """Density-aware chamfer distance.

    Each point contributes ``1 - exp(-t * d) / n`` where ``d`` is the distance
    to its nearest neighbour in the other cloud and ``n`` counts how many
    points share that neighbour; the two directional means are averaged.
    """
    _check_frames(pr, pgt)
    t = (cfg or ObjectiveConfig()).temperature
    x, y = _pts(pr), _pts(pgt)
    i_xy, d2_xy, i_yx, d2_yx = _nearest(x, y)
    d_xy, d_yx = np.sqrt(d2_xy), np.sqrt(d2_yx)
    hits_y = np.bincount(i_xy, minlength=len(y))[i_xy]
    hits_x = np.bincount(i_yx, minlength=len(x))[i_yx]
    e_xy = np.exp(-t * d_xy) / hits_y
    e_yx = np.exp(-t * d_yx) / hits_x
    value = float(0.5 * ((1.0 - e_xy).mean() + (1.0 - e_yx).mean()))
    if not with_grad:
        return LossValue(value)
    grad = (0.5 * t / len(x)) * e_xy[:, None] * _unit(x - y[i_xy], d_xy)
    np.add.at(grad, i_yx, (0.5 * t / len(y)) * e_yx[:, None] * _unit(x[i_yx] - y, d_yx))
    return LossValue(value, grad)


def _neighbour_spread(x: np.ndarray, k: int):
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(x) <= k:
        raise ValueError(f"uniformity term needs more than k={k} points, got {len(x)}")
    nbr, d2 = knn_squared(x, x, k, exclude_self=True)
    d = np.sqrt(d2)
    jj, ll = np.triu_indices(k, 1)
    return nbr, d, d[:, jj] - d[:, ll]


def uniformity_contributions(pr, k: int) -> np.ndarray:
    """Per-point ``sum_{j<l} |d(i, j) - d(i, l)|``; their mean is the uniformity term."""
    return np.abs(_neighbour_spread(_pts(pr), k)[2]).sum(axis=1)


def uniformity_term(pr, k: int, with_grad: bool = True) -> LossValue:
    """Spread of each point's k nearest-neighbour distances.

    ``(1/S) * sum_i sum_{j<l} |d(i, j) - d(i, l)|`` over the unordered pairs
    of point ``i``'s ``k`` neighbours. Zero when every point sees its
    neighbours at one common distance.
    """
    x = _pts(pr)
    nbr, d, diff = _neighbour_spread(x, k)
    jj, ll = np.triu_indices(k, 1)
    s = len(x)
    value = float(np.abs(diff).sum() / s)
    if not with_grad:
        return LossValue(value)
    sgn = np.sign(diff) / s
    coef = np.zeros_like(d)  # dL / d(distance to neighbour)
    np.add.at(coef, (slice(None), jj), sgn)
    np.add.at(coef, (slice(None), ll), -sgn)
    rel = x[:, None, :] - x[nbr]  # (S, k, 3)
    dirs = np.zeros_like(rel)
    nz = d > 0
    dirs[nz] = rel[nz] / d[nz, None]
    pull = coef[..., None] * dirs
    grad = pull.sum(axis=1)
    np.add.at(grad, nbr.ravel(), -pull.reshape(-1, 3))
    return LossValue(value, grad)


def objective(pr, pgt, cfg: ObjectiveConfig | None = None, with_grad: bool = True) -> LossValue:
    """Training objective selected by ``cfg.kind``.

    ``dacd_knn`` is the density-aware chamfer distance plus ``alpha`` times
    the neighbour-distance uniformity term of the reconstruction.
    """
    cfg = cfg or ObjectiveConfig()
    if cfg.kind == "cd":
        return chamfer(pr, pgt, with_grad)
    if cfg.kind == "ecd":
        return extended_chamfer(pr, pgt, with_grad)
    base = dacd(pr, pgt, cfg, with_grad)
    if cfg.kind == "dacd" or cfg.alpha == 0:
        return base
    return base + uniformity_term(pr, cfg.k, with_grad).scaled(cfg.alpha)

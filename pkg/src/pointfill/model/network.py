"""Geometry-aware completion transformer with a 3-D folding head.

A group of points is summarised by farthest-point-sampled proxies with
local edge features, refined by transformer blocks that mix global
self-attention with kNN aggregation over proxy coordinates, turned into a
handful of coarse query centres, and finally each query folds a regular
``s x s x s`` seed lattice into ``s**3`` output points.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..cloud import PointCloud, as_rng
from ..neighbors import knn_squared, squared_block
from .config import ModelConfig

VERSION = "pointfill-pct-1"


class TrainingDivergedError(RuntimeError):
    pass


def farthest_point_sampling(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Indices of ``m`` points picked greedily by largest distance to the picked set.

    Ties go to the smaller index; already picked points are never picked
    again, so ``m == len(points)`` yields a permutation.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    picked = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = int(start)
    for i in range(m):
        picked[i] = cur
        d = squared_block(points[cur:cur + 1], points)[0]
        np.minimum(dist, d, out=dist)
        dist[cur] = -1.0
        cur = int(np.argmax(dist))
    return picked


def seed_lattice(s: int, radius: float) -> torch.Tensor:
    """Regular ``s**3`` lattice spanning ``[-radius, radius]`` per axis."""
    ticks = torch.linspace(-radius, radius, s) if s > 1 else torch.zeros(1)
    gx, gy, gz = torch.meshgrid(ticks, ticks, ticks, indexing="ij")
    return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)


class SinusoidalEmbedding(nn.Module):
    """Per-axis sin/cos features of coordinates projected to ``dim``."""

    def __init__(self, dim: int, n_freq: int):
        super().__init__()
        self.register_buffer("freqs", math.pi * 2.0 ** torch.arange(n_freq, dtype=torch.float32))
        self.proj = nn.Linear(6 * n_freq, dim)

    def forward(self, xyz: torch.Tensor) -> torch.Tensor:
        ang = xyz[..., None] * self.freqs  # (..., 3, n_freq)
        feats = torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)
        return self.proj(feats)


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(dims[:-2], dims[1:-1]):
        layers += [nn.Linear(a, b), nn.GELU()]
    layers.append(nn.Linear(dims[-2], dims[-1]))
    return nn.Sequential(*layers)


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x[b, idx[b, ...]]`` for a batch of index arrays."""
    b = x.shape[0]
    flat = idx.reshape(b, -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


class ProxyExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feat_dim
        self.edge = _mlp([6, f, f])
        self.out = nn.Linear(f, f)
        self.scale = 1.0 / cfg.fold_radius

    def forward(self, points, centers, nbr_idx):
        nbrs = _gather(points, nbr_idx)  # (B, M, k, 3)
        rel = (nbrs - centers[:, :, None]) * self.scale
        edge = torch.cat([rel, centers[:, :, None].expand_as(rel)], dim=-1)
        return self.out(self.edge(edge).max(dim=2).values)


class LocalGeometry(nn.Module):
    """Max-pooled edge features over each proxy's kNN in coordinate space."""

    def __init__(self, f: int):
        super().__init__()
        self.edge = nn.Sequential(nn.Linear(2 * f, f), nn.GELU())
        self.out = nn.Linear(f, f)

    def forward(self, x, nbr_idx):
        nbrs = _gather(x, nbr_idx)
        edge = torch.cat([nbrs - x[:, :, None], x[:, :, None].expand_as(nbrs)], dim=-1)
        return self.out(self.edge(edge).max(dim=2).values)


class FeedForward(nn.Module):
    def __init__(self, f: int, mult: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(f, mult * f), nn.GELU(), nn.Linear(mult * f, f))

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feat_dim
        self.norm_attn = nn.LayerNorm(f)
        self.attn = nn.MultiheadAttention(f, cfg.n_heads, batch_first=True)
        self.norm_local = nn.LayerNorm(f)
        self.local = LocalGeometry(f)
        self.norm_ffn = nn.LayerNorm(f)
        self.ffn = FeedForward(f, cfg.ffn_mult)

    def forward(self, x, nbr_idx):
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.local(self.norm_local(x), nbr_idx)
        return x + self.ffn(self.norm_ffn(x))

    def output_layers(self):
        return [self.attn.out_proj, self.local.out, self.ffn.net[-1]]


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feat_dim
        self.norm_self = nn.LayerNorm(f)
        self.self_attn = nn.MultiheadAttention(f, cfg.n_heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(f)
        self.norm_mem = nn.LayerNorm(f)
        self.cross_attn = nn.MultiheadAttention(f, cfg.n_heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(f)
        self.ffn = FeedForward(f, cfg.ffn_mult)

    def forward(self, q, memory):
        h = self.norm_self(q)
        q = q + self.self_attn(h, h, h, need_weights=False)[0]
        m = self.norm_mem(memory)
        q = q + self.cross_attn(self.norm_cross(q), m, m, need_weights=False)[0]
        return q + self.ffn(self.norm_ffn(q))

    def output_layers(self):
        return [self.self_attn.out_proj, self.cross_attn.out_proj, self.ffn.net[-1]]


class QueryGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feat_dim
        self.n_queries = cfg.n_queries
        self.norm = nn.LayerNorm(f)
        self.coarse = _mlp([2 * f, f, 3 * cfg.n_queries])
        self.feats = _mlp([2 * f + 3, f, f])

    def forward(self, encoded):
        h = self.norm(encoded)
        glob = torch.cat([h.max(dim=1).values, h.mean(dim=1)], dim=-1)  # (B, 2F)
        centers = 0.5 + self.coarse(glob).reshape(-1, self.n_queries, 3)
        expanded = glob[:, None].expand(-1, self.n_queries, -1)
        feats = self.feats(torch.cat([expanded, centers], dim=-1))
        return centers, feats


class Fold3D(nn.Module):
    """Two-stage folding of a 3-D seed lattice conditioned on query features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.feat_dim
        self.register_buffer("seeds", seed_lattice(cfg.fold_seed, cfg.fold_radius))
        self.inv_radius = 1.0 / cfg.fold_radius
        self.stage1_q = nn.Linear(f, f)
        self.stage1_p = nn.Linear(3, f, bias=False)
        self.stage1 = nn.Sequential(nn.GELU(), nn.Linear(f, f), nn.GELU(), nn.Linear(f, 3))
        self.stage2_q = nn.Linear(f, f)
        self.stage2_p = nn.Linear(3, f, bias=False)
        self.stage2 = nn.Sequential(nn.GELU(), nn.Linear(f, f), nn.GELU(), nn.Linear(f, 3))

    def forward(self, centers, feats):
        b, nq, _ = centers.shape
        seeds = self.seeds.expand(b, nq, -1, -1)  # (B, Q, S, 3)
        h1 = self.stage1_q(feats)[:, :, None] + self.stage1_p(seeds * self.inv_radius)
        p1 = seeds + self.stage1(h1)
        h2 = self.stage2_q(feats)[:, :, None] + self.stage2_p(p1 * self.inv_radius)
        p2 = p1 + self.stage2(h2)
        return (centers[:, :, None] + p2).reshape(b, -1, 3)

    def output_layers(self):
        return [self.stage1[-1], self.stage2[-1]]


class CompletionTransformer(nn.Module):
    """Maps ``group_in`` points of the defective shape to ``group_out`` defect points."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = cfg or ModelConfig()
        cfg.validate()
        self.embed = SinusoidalEmbedding(cfg.feat_dim, cfg.n_freq)
        self.proxies = ProxyExtractor(cfg)
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_enc_blocks))
        self.queries = QueryGenerator(cfg)
        self.query_embed = SinusoidalEmbedding(cfg.feat_dim, cfg.n_freq)
        self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_dec_blocks))
        self.fold = Fold3D(cfg)

    # -- index bookkeeping (numpy; not differentiated) -------------------

    def proxy_indices(self, points: np.ndarray, start: int):
        """FPS centre indices, their neighbourhoods in the group, and proxy kNN."""
        cfg = self.config
        centers = farthest_point_sampling(points, cfg.n_proxies, start)
        cxyz = points[centers]
        group_nbrs, _ = knn_squared(cxyz, points, cfg.knn_k)
        proxy_nbrs, _ = knn_squared(cxyz, cxyz, cfg.knn_k)
        return centers, group_nbrs, proxy_nbrs

    def _indices(self, points: torch.Tensor, starts):
        arr = points.detach().cpu().double().numpy()
        per = [self.proxy_indices(p, int(s)) for p, s in zip(arr, starts)]
        return tuple(torch.from_numpy(np.stack(parts)) for parts in zip(*per))

    # -- stages ----------------------------------------------------------

    def extract_proxies(self, points: torch.Tensor, starts):
        """Returns centres ``(B, M, 3)``, features ``(B, M, F)`` and the proxy kNN."""
        if points.shape[1] != self.config.group_in:
            raise ValueError(
                f"group has {points.shape[1]} points, model expects {self.config.group_in}"
            )
        center_idx, group_nbrs, proxy_nbrs = self._indices(points, starts)
        centers = _gather(points, center_idx)
        feats = self.proxies(points, centers, group_nbrs) + self.embed(centers)
        return centers, feats, proxy_nbrs

    def encode(self, centers, feats, proxy_nbrs):
        x = feats
        for block in self.encoder:
            x = block(x, proxy_nbrs)
        if not torch.isfinite(x).all():
            raise TrainingDivergedError("non-finite encoder output")
        return x

    def generate_queries(self, encoded):
        return self.queries(encoded)

    def decode(self, coarse, query_feats, encoded):
        q = query_feats + self.query_embed(coarse)
        for block in self.decoder:
            q = block(q, encoded)
        return q

    def fold3d(self, coarse, query_feats):
        return self.fold(coarse, query_feats)

    def forward(self, points: torch.Tensor, starts=None) -> torch.Tensor:
        """``points`` is ``(B, group_in, 3)``; returns ``(B, group_out, 3)``."""
        if points.dim() == 2:
            return self.forward(points[None], starts)[0]
        if starts is None:
            starts = [0] * points.shape[0]
        centers, feats, proxy_nbrs = self.extract_proxies(points, starts)
        encoded = self.encode(centers, feats, proxy_nbrs)
        coarse, qfeats = self.generate_queries(encoded)
        out = self.fold3d(coarse, self.decode(coarse, qfeats, encoded))
        if not torch.isfinite(out).all():
            raise TrainingDivergedError("non-finite model output")
        return out

    def zero_residual_branches(self) -> None:
        """Zero the output projection of every encoder sub-layer."""
        with torch.no_grad():
            for block in self.encoder:
                for layer in block.output_layers():
                    layer.weight.zero_()
                    if layer.bias is not None:
                        layer.bias.zero_()

    def zero_fold_offsets(self) -> None:
        with torch.no_grad():
            for layer in self.fold.output_layers():
                layer.weight.zero_()
                layer.bias.zero_()


def complete_group(group: PointCloud, model: CompletionTransformer, seed=0) -> PointCloud:
    """Run the model on one normalized group; the FPS start is drawn from ``seed``."""
    if len(group) != model.config.group_in:
        raise ValueError(f"group has {len(group)} points, model expects {model.config.group_in}")
    start = int(as_rng(seed).integers(len(group)))
    x = torch.from_numpy(np.array(group.points, dtype=np.float32))
    with torch.no_grad():
        out = model(x[None], [start])[0]
    return group.with_points(out.double().numpy())

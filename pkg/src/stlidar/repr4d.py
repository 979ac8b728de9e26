"""4D hybrid feature representation.

Two complementary encoders, both split into a static part (indexed by
``xyz``) and a dynamic part (indexed by ``xyz`` paired with time):

* :class:`PlanarField` -- low-resolution, multi-scale orthogonal planes
  ``xy, xz, yz`` (static) and ``xt, yt, zt`` (dynamic). Bilinear lookups of
  the three planes are fused by elementwise product.
* :class:`HashGridField` -- high-resolution multi-level voxel grids stored in
  hashed tables: one ``xyz`` grid (static) and ``xyt, xzt, yzt`` grids
  (dynamic, fused by elementwise product).

Spatial coordinates live in ``[-1, 1]``, time in ``[0, 1]``; out-of-domain
queries are clamped.
"""

from __future__ import annotations

import itertools
import logging
import math
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)

_warned_clamp = False


def clamp_domain(xyz: torch.Tensor, t: torch.Tensor):
    global _warned_clamp
    if not _warned_clamp:
        with torch.no_grad():
            out = (xyz.abs() > 1).any() or (t < 0).any() or (t > 1).any()
        if out:
            logger.info("clamping out-of-domain feature queries to the scene cube")
            _warned_clamp = True
    return xyz.clamp(-1.0, 1.0), t.clamp(0.0, 1.0)


def hash_index(cell, resolution: Union[int, Sequence[int]], table_size: int):
    """Map integer grid vertices to table rows.

    Args:
        cell: integer coordinates, a tuple or a ``(..., D)`` long tensor.
        resolution: vertices per axis (an int applies to every axis).
        table_size: number of rows available for this grid.

    When the dense vertex count fits in the table the row-major linear index
    is used, so the mapping is collision free; otherwise the coordinates are
    hashed by XOR of prime products.
    """
    scalar = not torch.is_tensor(cell)
    c = torch.as_tensor(cell, dtype=torch.int64)
    dims = c.shape[-1]
    res = [resolution] * dims if isinstance(resolution, int) else list(resolution)
    if math.prod(res) <= table_size:
        idx = torch.zeros(c.shape[:-1], dtype=torch.int64)
        stride = 1
        for k in range(dims):
            idx = idx + c[..., k] * stride
            stride *= res[k]
    else:
        idx = torch.zeros(c.shape[:-1], dtype=torch.int64)
        for k in range(dims):
            idx = idx ^ (c[..., k] * PRIMES[k])
        idx = torch.remainder(idx, table_size)
    return int(idx) if scalar else idx


class PlanarField(nn.Module):
    """Multi-scale orthogonal feature planes.

    Level ``l`` has spatial resolution ``base_resolution * 2**l`` and a fixed
    temporal resolution. Plane tensors are stored as ``(3, C, rows, cols)``:
    static planes index (x, y), (x, z), (y, z) as (cols, rows); dynamic
    planes index (x, t), (y, t), (z, t) with the spatial axis along cols.
    """

    STATIC_PAIRS = ((0, 1), (0, 2), (1, 2))

    def __init__(
        self,
        n_levels: int = 4,
        base_resolution: int = 64,
        n_features: int = 8,
        time_resolution: int = 25,
        dtype=torch.float32,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.time_resolution = time_resolution
        self.resolutions = [base_resolution * 2**l for l in range(n_levels)]
        self.static_planes = nn.ParameterList()
        self.dynamic_planes = nn.ParameterList()
        for res in self.resolutions:
            self.static_planes.append(nn.Parameter(torch.empty(3, n_features, res, res, dtype=dtype)))
            self.dynamic_planes.append(
                nn.Parameter(torch.empty(3, n_features, time_resolution, res, dtype=dtype))
            )
        self.reset_parameters()

    def reset_parameters(self):
        # Products of three zero-mean planes start with vanishing gradients,
        # so start slightly positive.
        for p in itertools.chain(self.static_planes, self.dynamic_planes):
            nn.init.uniform_(p, 0.1 - 1e-2, 0.1 + 1e-2)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    @staticmethod
    def _lookup(planes: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
        # planes (3, C, rows, cols), grid (3, P, 2) in [-1, 1] -> (P, C)
        out = F.grid_sample(
            planes, grid.unsqueeze(2), mode="bilinear", padding_mode="border", align_corners=True
        )
        return out[..., 0].prod(0).transpose(0, 1)

    def static_features(self, xyz: torch.Tensor) -> torch.Tensor:
        grid = torch.stack([xyz[:, [a, b]] for a, b in self.STATIC_PAIRS], 0)
        grid = grid.to(self.static_planes[0].dtype)
        return torch.cat([self._lookup(p, grid) for p in self.static_planes], -1)

    def dynamic_features(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tt = (2.0 * t - 1.0).expand(-1, 1)
        grid = torch.stack([torch.cat([xyz[:, k : k + 1], tt], -1) for k in range(3)], 0)
        grid = grid.to(self.dynamic_planes[0].dtype)
        return torch.cat([self._lookup(p, grid) for p in self.dynamic_planes], -1)


class HashGridField(nn.Module):
    """Multi-level hashed voxel grids, static ``xyz`` plus dynamic ``xyt/xzt/yzt``.

    Per-level resolutions grow geometrically from ``min_resolution`` to
    ``max_resolution`` vertices per spatial axis. Every grid at every level
    owns ``min(table_size, dense vertex count)`` rows of one flat table.
    """

    # spatial axes used by each grid; dynamic grids append time as last axis
    GRID_AXES = ((0, 1, 2), (0, 1), (0, 2), (1, 2))

    def __init__(
        self,
        n_levels: int = 8,
        n_features: int = 4,
        log2_table_size: int = 19,
        min_resolution: int = 512,
        max_resolution: int = 2**15,
        time_resolution: int = 25,
        dtype=torch.float32,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2**log2_table_size
        self.time_resolution = time_resolution
        if n_levels > 1:
            growth = math.exp((math.log(max_resolution) - math.log(min_resolution)) / (n_levels - 1))
        else:
            growth = 1.0
        self.resolutions = [int(math.floor(min_resolution * growth**l + 1e-9)) for l in range(n_levels)]
        self.grid_dims = []
        offsets, rows = [], 0
        for res in self.resolutions:
            level_dims = [(res, res, res)] + [(res, res, time_resolution)] * 3
            self.grid_dims.append(level_dims)
            level_offsets = []
            for dims in level_dims:
                level_offsets.append(rows)
                rows += min(self.table_size, math.prod(dims))
            offsets.append(level_offsets)
        self.register_buffer("offsets", torch.tensor(offsets, dtype=torch.int64), persistent=False)
        self.embeddings = nn.Parameter(torch.empty(rows, n_features, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.uniform_(self.embeddings, -1e-4, 1e-4)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def grid_rows(self, level: int, grid: int) -> tuple[int, int]:
        start = int(self.offsets[level, grid])
        return start, start + min(self.table_size, math.prod(self.grid_dims[level][grid]))

    def _grid_constants(self, grids: tuple[int, ...]):
        cache = self.__dict__.setdefault("_const_cache", {})
        if grids not in cache:
            dims = torch.tensor([[self.grid_dims[l][g] for g in grids] for l in range(self.n_levels)])
            dense = dims.prod(-1) <= self.table_size
            strides = torch.stack([torch.ones_like(dims[..., 0]), dims[..., 0], dims[..., 0] * dims[..., 1]], -1)
            cache[grids] = dict(
                size=(dims - 1),
                dense=dense,
                any_dense=bool(dense.any()),
                all_dense=bool(dense.all()),
                strides=strides,
                offsets=self.offsets[:, list(grids)].clone(),
            )
        return cache[grids]

    def _interp(self, coords: torch.Tensor, grids: tuple[int, ...]) -> torch.Tensor:
        """Trilinear lookups at unit-cube coordinates ``coords`` of shape
        ``(G, P, 3)``, one coordinate set per entry of ``grids``.

        Returns ``(L, G, P, C)``.
        """
        k = self._grid_constants(grids)
        size = k["size"].to(coords.dtype)[:, :, None, :]  # (L, G, 1, 3)
        u = coords.unsqueeze(0) * size
        base = torch.minimum(torch.floor(u).clamp(min=0), size - 1)
        # axis-first layout keeps every per-corner op contiguous over points
        frac = (u - base).permute(3, 0, 1, 2).contiguous()  # (3, L, G, P)
        base = base.to(torch.int64).permute(3, 0, 1, 2).contiguous()
        # the 8 corners are ordered (x, y, z) with z fastest
        idx = None
        if k["any_dense"]:
            lin = [base[a] * k["strides"][:, :, a, None] for a in range(3)]
            lin = [torch.stack([v, v + k["strides"][:, :, a, None]]) for a, v in enumerate(lin)]
            idx = (lin[0][:, None, None] + lin[1][None, :, None] + lin[2][None, None, :]).flatten(0, 2)
        if not k["all_dense"]:
            hsh = [base[a] * PRIMES[a] for a in range(3)]
            hsh = [torch.stack([v, v + PRIMES[a]]) for a, v in enumerate(hsh)]
            hashed = (hsh[0][:, None, None] ^ hsh[1][None, :, None] ^ hsh[2][None, None, :]).flatten(0, 2)
            # every hashed grid owns exactly table_size rows
            if self.table_size & (self.table_size - 1) == 0:
                hashed = hashed & (self.table_size - 1)
            else:
                hashed = torch.remainder(hashed, self.table_size)
            idx = hashed if idx is None else torch.where(k["dense"][:, :, None], idx, hashed)
        idx = idx + k["offsets"][:, :, None]  # (8, L, G, P)
        wts = [torch.stack([1.0 - frac[a], frac[a]]) for a in range(3)]
        w = (wts[0][:, None, None] * wts[1][None, :, None] * wts[2][None, None, :]).flatten(0, 2)
        feats = self.embeddings.index_select(0, idx.reshape(-1)).view(*idx.shape, self.n_features)
        return (feats * w.unsqueeze(-1).to(feats.dtype)).sum(0)

    def static_features(self, xyz: torch.Tensor) -> torch.Tensor:
        grid = torch.stack([xyz[:, [a, b]] for a, b in self.STATIC_PAIRS], 0)
        grid = grid.to(self.static_planes[0].dtype)
        return torch.cat([self._lookup(p, grid) for p in self.static_planes], -1)

    def dynamic_features(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tt = (2.0 * t - 1.0).expand(-1, 1)
        grid = torch.stack([torch.cat([xyz[:, k : k + 1], tt], -1) for k in range(3)], 0)
        grid = grid.to(self.dynamic_planes[0].dtype)
        return torch.cat([self._lookup(p, grid) for p in self.dynamic_planes], -1)


class HashGridField(nn.Module):
    """Multi-level hashed voxel grids, static ``xyz`` plus dynamic ``xyt/xzt/yzt``.

    Per-level resolutions grow geometrically from ``min_resolution`` to
    ``max_resolution`` vertices per spatial axis. Every grid at every level
    owns ``min(table_size, dense vertex count)`` rows of one flat table.
    """

    # spatial axes used by each grid; dynamic grids append time as last axis
    GRID_AXES = ((0, 1, 2), (0, 1), (0, 2), (1, 2))

    def __init__(
        self,
        n_levels: int = 8,
        n_features: int = 4,
        log2_table_size: int = 19,
        min_resolution: int = 512,
        max_resolution: int = 2**15,
        time_resolution: int = 25,
        dtype=torch.float32,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2**log2_table_size
        self.time_resolution = time_resolution
        if n_levels > 1:
            growth = math.exp((math.log(max_resolution) - math.log(min_resolution)) / (n_levels - 1))
        else:
            growth = 1.0
        self.resolutions = [int(math.floor(min_resolution * growth**l + 1e-9)) for l in range(n_levels)]
        self.grid_dims = []
        offsets, rows = [], 0
        for res in self.resolutions:
            level_dims = [(res, res, res)] + [(res, res, time_resolution)] * 3
            self.grid_dims.append(level_dims)
            level_offsets = []
            for dims in level_dims:
                level_offsets.append(rows)
                rows += min(self.table_size, math.prod(dims))
            offsets.append(level_offsets)
        self.register_buffer("offsets", torch.tensor(offsets, dtype=torch.int64), persistent=False)
        self.embeddings = nn.Parameter(torch.empty(rows, n_features, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.uniform_(self.embeddings, -1e-4, 1e-4)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def grid_rows(self, level: int, grid: int) -> tuple[int, int]:
        start = int(self.offsets[level, grid])
        return start, start + min(self.table_size, math.prod(self.grid_dims[level][grid]))

    def _grid_constants(self, grids: tuple[int, ...]):
        key = grids
        cache = self.__dict__.setdefault("_const_cache", {})
        if key not in cache:
            dims = torch.tensor([[self.grid_dims[l][g] for g in grids] for l in range(self.n_levels)])
            rows = torch.tensor(
                [[min(self.table_size, math.prod(self.grid_dims[l][g])) for g in grids]
                 for l in range(self.n_levels)]
            )
            dense = dims.prod(-1) <= rows
            strides = torch.stack([torch.ones_like(dims[..., 0]), dims[..., 0], dims[..., 0] * dims[..., 1]], -1)
            cache[key] = dict(
                size=(dims - 1),
                primes=torch.tensor(PRIMES).expand_as(dims),
                rows=rows,
                dense=dense,
                # hashed tables have power-of-two sizes unless configured otherwise
                pow2=bool(all((r & (r - 1)) == 0 for r in rows[~dense].tolist())),
                strides=strides,
                offsets=self.offsets[:, list(grids)].clone(),
            )
        return cache[key]

    def _interp(self, coords: torch.Tensor, grids: tuple[int, ...]) -> torch.Tensor:
        """Trilinear lookups at unit-cube coordinates ``coords`` of shape
        ``(G, P, 3)``, one coordinate set per entry of ``grids``.

        Returns ``(L, G, P, C)``.
        """
        k = self._grid_constants(grids)
        size = k["size"].to(coords.dtype)[:, :, None, :]  # (L, G, 1, 3)
        u = coords.unsqueeze(0) * size
        base = torch.minimum(torch.floor(u).clamp(min=0), size - 1)
        frac = u - base
        base = base.to(torch.int64)
        # per-axis values for the lower/upper vertex, combined by broadcasting
        # into the 8 corners ordered (x, y, z) with z fastest
        lo_hi = torch.stack([base, base + 1], -1)  # (L, G, P, 3, 2)
        dense = k["dense"]
        idx = None
        if bool(dense.any()):
            lin = lo_hi * k["strides"][:, :, None, :, None]
            idx = lin[..., 0, :, None, None] + lin[..., 1, None, :, None] + lin[..., 2, None, None, :]
        if not bool(dense.all()):
            hsh = lo_hi * k["primes"][:, :, None, :, None]
            hashed = hsh[..., 0, :, None, None] ^ hsh[..., 1, None, :, None] ^ hsh[..., 2, None, None, :]
            if k["pow2"]:
                hashed = hashed & (k["rows"][:, :, None, None, None, None] - 1)
            else:
                hashed = torch.remainder(hashed, k["rows"][:, :, None, None, None, None])
            idx = hashed if idx is None else torch.where(dense[:, :, None, None, None, None], idx, hashed)
        idx = (idx + k["offsets"][:, :, None, None, None, None]).flatten(-3)  # (L, G, P, 8)
        wts = torch.stack([1.0 - frac, frac], -1)
        w = (wts[..., 0, :, None, None] * wts[..., 1, None, :, None] * wts[..., 2, None, None, :]).flatten(-3)
        feats = self.embeddings.index_select(0, idx.reshape(-1)).view(*idx.shape, self.n_features)
        return (feats * w.unsqueeze(-1).to(feats.dtype)).sum(-2)

    def static_features(self, xyz: torch.Tensor) -> torch.Tensor:
        u = ((xyz + 1.0) * 0.5).unsqueeze(0)
        out = self._interp(u, (0,))  # (L, 1, P, C)
        return out[:, 0].permute(1, 0, 2).reshape(len(xyz), -1)

    def dynamic_features(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        u = (xyz + 1.0) * 0.5
        coords = torch.stack(
            [torch.cat([u[:, list(self.GRID_AXES[g])], t], -1) for g in (1, 2, 3)], 0
        )
        out = self._interp(coords, (1, 2, 3)).prod(1)  # (L, P, C)
        return out.permute(1, 0, 2).reshape(len(xyz), -1)


def sample_planar(field: PlanarField, xyz: torch.Tensor, t: torch.Tensor):
    """(static, dynamic) planar features, each ``(P, L_p * C_p)``."""
    xyz, t = clamp_domain(xyz, t.reshape(-1, 1))
    return field.static_features(xyz), field.dynamic_features(xyz, t)


def sample_hash(field: HashGridField, xyz: torch.Tensor, t: torch.Tensor):
    """(static, dynamic) hash-grid features, each ``(P, L_h * C_h)``."""
    xyz, t = clamp_domain(xyz, t.reshape(-1, 1))
    return field.static_features(xyz), field.dynamic_features(xyz, t)


def hybrid_features(planar: PlanarField, hashgrid: HashGridField, xyz: torch.Tensor, t: torch.Tensor):
    """Concatenated feature vector: planar-static, planar-dynamic, hash-static, hash-dynamic."""
    ps, pd = sample_planar(planar, xyz, t)
    hs, hd = sample_hash(hashgrid, xyz, t)
    return torch.cat([ps, pd, hs, hd], -1)

"""Scene-flow prior: a coordinate MLP predicting motion to the adjacent
frames, chamfer-distance supervision from the raw point clouds, and
flow-warped temporal aggregation of the dynamic features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .repr4d import HashGridField, PlanarField, clamp_domain
from .sensor import PointCloud

logger = logging.getLogger(__name__)

CENTER_WEIGHT = 0.5
NEIGHBOR_WEIGHT = 0.25


def positional_encode(v: torch.Tensor, n_bands: int) -> torch.Tensor:
    """Frequency encoding ``(sin(2^k x), cos(2^k x))`` for ``k < n_bands``.

    Output layout is component-major: all bands of the first component come
    first, each band contributing a (sin, cos) pair.
    """
    v = torch.as_tensor(v)
    freqs = 2.0 ** torch.arange(n_bands, dtype=v.dtype)
    ang = v.unsqueeze(-1) * freqs  # (..., d, L)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], -1)  # (..., d, L, 2)
    return out.flatten(-3)


class FlowNet(nn.Module):
    """Maps encoded ``(x, y, z, t)`` to forward and backward displacements.

    The last layer starts at zero, so the initial flow is exactly zero.
    """

    def __init__(self, n_layers: int = 8, hidden: int = 128, n_bands: int = 6, dtype=torch.float32):
        super().__init__()
        self.n_bands = n_bands
        dims = [4 * 2 * n_bands] + [hidden] * (n_layers - 1) + [6]
        layers = []
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
            if i < n_layers - 1:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, xyz: torch.Tensor, t: torch.Tensor):
        t = t.reshape(-1, 1).to(xyz.dtype).expand(len(xyz), 1)
        out = self.mlp(positional_encode(torch.cat([xyz, t], -1), self.n_bands))
        return out[:, :3], out[:, 3:]


def flow_forward(net: FlowNet, xyz: torch.Tensor, t: torch.Tensor):
    """(forward, backward) displacement in normalized units."""
    return net(xyz, t)


def neighbor_weights(t: torch.Tensor, dt: float, eps: float = 1e-6):
    """Weights for the (t + dt, t - dt) neighbours; a neighbour that falls
    outside ``[0, 1]`` gets weight 0 and its share goes to the centre."""
    w_fwd = torch.where(t + dt <= 1.0 + eps, NEIGHBOR_WEIGHT, 0.0).to(t.dtype)
    w_bwd = torch.where(t - dt >= -eps, NEIGHBOR_WEIGHT, 0.0).to(t.dtype)
    return w_fwd, w_bwd


def aggregate_dynamic(
    xyz: torch.Tensor,
    t: torch.Tensor,
    planar: Optional[PlanarField],
    hashgrid: Optional[HashGridField],
    net: Optional[FlowNet],
    dt: float,
    flow_grad: bool = True,
):
    """Temporally aggregated dynamic features.

    Dynamic features are queried at ``(x, t)``, ``(x + d_fwd, t + dt)`` and
    ``(x + d_bwd, t - dt)`` and averaged with weights (0.5, 0.25, 0.25).
    ``net=None`` queries the neighbours without warping; ``flow_grad=False``
    stops feature-loss gradients from reaching the flow network.

    Returns ``(planar_dynamic, hash_dynamic)``; an encoder passed as ``None``
    yields ``None`` in its slot.
    """
    t = t.reshape(-1, 1).to(xyz.dtype)
    if net is not None:
        d_fwd, d_bwd = net(xyz, t)
        if not flow_grad:
            d_fwd, d_bwd = d_fwd.detach(), d_bwd.detach()
        x_fwd, x_bwd = xyz + d_fwd, xyz + d_bwd
    else:
        x_fwd = x_bwd = xyz
    w_fwd, w_bwd = neighbor_weights(t, dt)
    n = len(xyz)
    # the centre query carries no coordinate gradient, so it is looked up on
    # its own; the two warped neighbours share one batched lookup
    xyz0, t0 = clamp_domain(xyz, t)
    pts, ts = clamp_domain(torch.cat([x_fwd, x_bwd], 0), torch.cat([t + dt, t - dt], 0))
    out = []
    for enc in (planar, hashgrid):
        if enc is None:
            out.append(None)
            continue
        f0 = enc.dynamic_features(xyz0, t0)
        f = enc.dynamic_features(pts, ts)
        ff, fb = f[:n], f[n:]
        # difference form keeps the centre value exact when neighbours agree
        out.append(f0 + w_fwd * (ff - f0) + w_bwd * (fb - f0))
    return tuple(out)


def _as_tensor(points, dtype=torch.float64) -> torch.Tensor:
    if isinstance(points, PointCloud):
        points = points.points
    if torch.is_tensor(points):
        return points
    return torch.as_tensor(np.asarray(points), dtype=dtype)


def nearest_sq_dists(a: torch.Tensor, b: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Squared distance from each point of ``a`` to its nearest point in ``b``.

    The nearest neighbour is found without tracking gradients; the returned
    distances are recomputed exactly from the matched pairs, so they are
    differentiable in both inputs.
    """
    with torch.no_grad():
        nn_idx = torch.cat([torch.cdist(a[i : i + chunk], b).argmin(1) for i in range(0, len(a), chunk)]) \
            if len(a) else torch.zeros(0, dtype=torch.int64)
    return ((a - b[nn_idx]) ** 2).sum(-1)


def chamfer(s, s_hat) -> torch.Tensor:
    """Symmetric chamfer distance with squared nearest-neighbour distances.

    Each direction is averaged over its own cloud. Accepts point clouds,
    arrays or tensors; differentiable in tensor inputs.
    """
    a, b = _as_tensor(s), _as_tensor(s_hat)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    b = b.to(a.dtype)
    return nearest_sq_dists(b, a).mean() + nearest_sq_dists(a, b).mean()


def flow_loss(
    net: FlowNet,
    s_i: torch.Tensor,
    t_i: float,
    s_prev: Optional[torch.Tensor] = None,
    s_next: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Chamfer between frame ``i`` warped by the predicted flow and each
    available neighbour frame. Missing neighbours contribute nothing."""
    s_i = _as_tensor(s_i)
    p = next(net.parameters())
    s_i = s_i.to(p.dtype)
    d_fwd, d_bwd = net(s_i, torch.full((len(s_i), 1), float(t_i), dtype=p.dtype))
    loss = s_i.new_zeros(())
    if s_next is not None:
        loss = loss + chamfer(s_i + d_fwd, _as_tensor(s_next).to(p.dtype))
    if s_prev is not None:
        loss = loss + chamfer(s_i + d_bwd, _as_tensor(s_prev).to(p.dtype))
    return loss


@dataclass
class GroundRemoval:
    cloud: PointCloud
    plane: Optional[np.ndarray]  # (a, b, c, d) with unit normal, or None
    warning: bool = False


def remove_ground_ransac(
    pc: PointCloud,
    iters: int = 100,
    inlier_tol: float = 0.05,
    max_range: Optional[float] = None,
    origin=None,
    min_normal_z: float = 0.0,
    rng=None,
) -> GroundRemoval:
    """Remove the dominant plane found by 3-point RANSAC, then drop points
    farther than ``max_range`` from ``origin``.

    Distances are in the cloud's own units. ``min_normal_z`` > 0 restricts
    candidate planes to near-horizontal ones (``|n_z| >= min_normal_z``).
    Fewer than three points are returned untouched with ``warning`` set.
    """
    rng = np.random.default_rng(rng)
    pts = pc.points
    if len(pts) < 3:
        logger.warning("ground removal skipped: fewer than 3 points")
        return GroundRemoval(pc, None, warning=True)
    best_count, best_plane, best_inliers = -1, None, np.zeros(len(pts), bool)
    for _ in range(iters):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        if abs(n[2]) < min_normal_z:
            continue
        d = -n @ a
        inliers = np.abs(pts @ n + d) <= inlier_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_plane, best_inliers = count, np.append(n, d), inliers
    keep = ~best_inliers
    if max_range is not None:
        o = np.zeros(3) if origin is None else np.asarray(origin, np.float64)
        keep &= np.linalg.norm(pts - o, axis=1) <= max_range
    return GroundRemoval(pc.subset(keep), best_plane)

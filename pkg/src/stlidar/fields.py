"""Neural LiDAR fields and differentiable volume rendering along laser rays.

A sample at ``(x, t)`` seen from direction ``d`` is described by a density,
an intensity and a ray-drop probability. In this package the ray-drop
channel is expressed as the probability that the ray *returns* (the
valid-mask probability), so the refiner output, ground-truth masks and
binarised predictions all share one convention and an empty ray composites
to "dropped".
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flow import FlowNet, aggregate_dynamic, positional_encode
from .repr4d import HashGridField, PlanarField, clamp_domain
from .sensor import RangeScan, SceneScale, SensorConfig, SensorPose, scan_rays

logger = logging.getLogger(__name__)


@dataclass
class FieldConfig:
    """Architecture of the field. Defaults follow the full-size model."""

    use_planar: bool = True
    use_hash: bool = True
    dynamic: bool = True
    use_flow: bool = True
    planar_levels: int = 4
    planar_base_resolution: int = 64
    planar_features: int = 8
    hash_levels: int = 8
    hash_features: int = 4
    log2_table_size: int = 19
    hash_min_resolution: int = 512
    hash_max_resolution: int = 2**15
    time_resolution: int = 25
    flow_layers: int = 8
    flow_hidden: int = 128
    flow_bands: int = 6
    # let the rendering losses train the flow network through the warp
    flow_render_grad: bool = False
    view_bands: int = 12
    trunk_layers: int = 2
    trunk_hidden: int = 64
    geo_features: int = 15
    head_layers: int = 3
    head_hidden: int = 64
    # sigma = density_scale * softplus(raw + density_bias)
    density_bias: float = -5.0
    density_scale: float = 32.0
    n_samples: int = 768
    min_weight_sum: float = 0.05
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def mlp(in_dim: int, hidden: int, out_dim: int, n_layers: int, dtype) -> nn.Sequential:
    dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    layers = []
    for i in range(n_layers):
        layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
        if i < n_layers - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class FieldHeads(nn.Module):
    """Trunk producing density and a geometric feature, plus intensity and
    ray-drop heads conditioned on the encoded view direction."""

    def __init__(self, feature_dim: int, cfg: FieldConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.cfg = cfg
        self.trunk = mlp(feature_dim, cfg.trunk_hidden, 1 + cfg.geo_features, cfg.trunk_layers, dt)
        head_in = feature_dim + cfg.geo_features + 3 * 2 * cfg.view_bands
        self.intensity_head = mlp(head_in, cfg.head_hidden, 1, cfg.head_layers, dt)
        self.raydrop_head = mlp(head_in, cfg.head_hidden, 1, cfg.head_layers, dt)

    def forward(self, feats: torch.Tensor, dirs: torch.Tensor):
        h = self.trunk(feats)
        sigma = self.cfg.density_scale * F.softplus(h[:, 0] + self.cfg.density_bias)
        x = torch.cat([feats, h[:, 1:], positional_encode(dirs, self.cfg.view_bands)], -1)
        intensity = torch.sigmoid(self.intensity_head(x)[:, 0])
        raydrop = torch.sigmoid(self.raydrop_head(x)[:, 0])
        return sigma, intensity, raydrop


class LidarField(nn.Module):
    """Hybrid 4D features, optional flow aggregation and the field heads."""

    def __init__(self, cfg: FieldConfig, frame_dt: float = 0.05):
        super().__init__()
        if not (cfg.use_planar or cfg.use_hash):
            raise ValueError("at least one of the planar or hash encoders is required")
        self.cfg = cfg
        dt = cfg.torch_dtype
        self.planar = (
            PlanarField(cfg.planar_levels, cfg.planar_base_resolution, cfg.planar_features,
                        cfg.time_resolution, dtype=dt)
            if cfg.use_planar else None
        )
        self.hashgrid = (
            HashGridField(cfg.hash_levels, cfg.hash_features, cfg.log2_table_size,
                          cfg.hash_min_resolution, cfg.hash_max_resolution, cfg.time_resolution, dtype=dt)
            if cfg.use_hash else None
        )
        self.flow = (
            FlowNet(cfg.flow_layers, cfg.flow_hidden, cfg.flow_bands, dtype=dt)
            if cfg.dynamic and cfg.use_flow else None
        )
        self.register_buffer("frame_dt", torch.tensor(float(frame_dt), dtype=torch.float64))
        self.heads = FieldHeads(self.feature_dim, cfg)

    @property
    def feature_dim(self) -> int:
        parts = 2 if self.cfg.dynamic else 1
        dim = 0
        if self.planar is not None:
            dim += parts * self.planar.output_dim
        if self.hashgrid is not None:
            dim += parts * self.hashgrid.output_dim
        return dim

    def grid_parameters(self):
        for enc in (self.planar, self.hashgrid):
            if enc is not None:
                yield from enc.parameters()

    def mlp_parameters(self):
        yield from self.heads.parameters()
        if self.flow is not None:
            yield from self.flow.parameters()

    def features(self, xyz: torch.Tensor, t: torch.Tensor, aggregate: bool = True) -> torch.Tensor:
        """Feature vector per point: planar-static, planar-dynamic, hash-static,
        hash-dynamic (dynamic parts temporally aggregated unless disabled)."""
        xyz, t = clamp_domain(xyz, t.reshape(-1, 1).to(xyz.dtype))
        dyn_planar = dyn_hash = None
        if self.cfg.dynamic:
            if aggregate:
                dyn_planar, dyn_hash = aggregate_dynamic(
                    xyz, t, self.planar, self.hashgrid, self.flow, float(self.frame_dt),
                    self.cfg.flow_render_grad,
                )
            else:
                dyn_planar = self.planar.dynamic_features(xyz, t) if self.planar is not None else None
                dyn_hash = self.hashgrid.dynamic_features(xyz, t) if self.hashgrid is not None else None
        parts = []
        if self.planar is not None:
            parts.append(self.planar.static_features(xyz))
            if dyn_planar is not None:
                parts.append(dyn_planar)
        if self.hashgrid is not None:
            parts.append(self.hashgrid.static_features(xyz))
            if dyn_hash is not None:
                parts.append(dyn_hash)
        return torch.cat(parts, -1)

    def forward(self, xyz: torch.Tensor, t: torch.Tensor, dirs: torch.Tensor):
        return self.heads(self.features(xyz, t), dirs)


def sample_along_ray(near, far, n: int, perturb: bool = False, generator=None):
    """Uniform samples on ``[near, far]``.

    Evaluation uses bin midpoints; training jitters each sample within its
    bin. ``delta`` is the width of each sample's cell (boundaries halfway
    between neighbours, clipped to the bounds), so it sums to ``far - near``
    and equals the sample spacing for evenly spaced samples.

    Returns ``(z, delta)`` of shape ``(R, n)``.
    """
    near = torch.as_tensor(near, dtype=torch.float64 if not torch.is_tensor(near) else near.dtype)
    far = torch.as_tensor(far, dtype=near.dtype)
    near, far = near.reshape(-1), far.reshape(-1)
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if not torch.all(far > near):
        raise ValueError("sample_along_ray requires near < far")
    if perturb:
        u = torch.rand(len(near), n, generator=generator, dtype=near.dtype)
    else:
        u = torch.full((len(near), n), 0.5, dtype=near.dtype)
    steps = (torch.arange(n, dtype=near.dtype) + u) / n
    span = (far - near)[:, None]
    z = near[:, None] + span * steps
    mids = 0.5 * (z[:, 1:] + z[:, :-1])
    edges = torch.cat([near[:, None], mids, far[:, None]], -1)
    return z, edges[:, 1:] - edges[:, :-1]


def transmittance_weights(sigma: torch.Tensor, delta: torch.Tensor):
    """Compositing weights ``w_i = T_i (1 - exp(-sigma_i delta_i))`` and the
    accumulated transmittance ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    tau = sigma * delta
    excl = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau, -1)[..., :-1]], -1)
    trans = torch.exp(-excl)
    alpha = 1.0 - torch.exp(-tau)
    return trans * alpha, trans


def render_depth(weights: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return (weights * z).sum(-1)


def render_intensity_raydrop(weights: torch.Tensor, intensity: torch.Tensor, raydrop: torch.Tensor):
    return (weights * intensity).sum(-1), (weights * raydrop).sum(-1)


def render_rays(
    model: LidarField,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: torch.Tensor,
    far: torch.Tensor,
    t: torch.Tensor,
    n_samples: Optional[int] = None,
    perturb: bool = False,
    generator=None,
) -> dict:
    """Volume-render a batch of rays. All outputs are in normalized units."""
    n = n_samples or model.cfg.n_samples
    dtype = model.cfg.torch_dtype
    z, delta = sample_along_ray(near.to(dtype), far.to(dtype), n, perturb, generator)
    r = len(z)
    pts = origins.to(dtype)[:, None, :] + dirs.to(dtype)[:, None, :] * z[..., None]
    tt = t.to(dtype).reshape(-1, 1).expand(r, n).reshape(-1, 1)
    dd = dirs.to(dtype)[:, None, :].expand(r, n, 3).reshape(-1, 3)
    sigma, inten, drop = model(pts.reshape(-1, 3), tt, dd)
    w, _ = transmittance_weights(sigma.view(r, n), delta)
    depth = render_depth(w, z)
    i_hat, p_hat = render_intensity_raydrop(w, inten.view(r, n), drop.view(r, n))
    return {"depth": depth, "intensity": i_hat, "raydrop": p_hat, "acc": w.sum(-1)}


@dataclass
class RenderedScan:
    """Pre-refinement render of a full scan.

    ``depth`` is metric; ``raydrop`` is the composited return probability;
    ``acc`` is the total compositing weight per ray.
    """

    depth: np.ndarray
    intensity: np.ndarray
    raydrop: np.ndarray
    acc: np.ndarray
    pose: SensorPose
    timestamp: float
    min_weight_sum: float = 0.05
    extra: dict = field(default_factory=dict)

    def default_mask(self, threshold: float = 0.5) -> np.ndarray:
        return (self.raydrop >= threshold) & (self.acc >= self.min_weight_sum)

    def to_scan(self, mask: Optional[np.ndarray] = None) -> RangeScan:
        """Binarised scan; ``mask`` defaults to thresholding ``raydrop``."""
        m = self.default_mask() if mask is None else np.asarray(mask, bool)
        m = m & (self.depth > 0) & (self.acc >= self.min_weight_sum)
        return RangeScan(
            np.where(m, self.depth, 0.0), np.where(m, self.intensity, 0.0), m, self.pose, self.timestamp
        )


@torch.no_grad()
def render_scan(
    model: LidarField,
    config: SensorConfig,
    pose: SensorPose,
    t: float,
    scale: SceneScale,
    n_samples: Optional[int] = None,
    chunk: int = 4096,
) -> RenderedScan:
    """Render every pixel of a scan at a metric ``pose`` and normalized time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    rays = scan_rays(config, pose, scale)
    h, w = config.shape
    flat_valid = rays.valid.reshape(-1)
    out = {k: np.zeros(h * w) for k in ("depth", "intensity", "raydrop", "acc")}
    idx = np.nonzero(flat_valid)[0]
    o = torch.as_tensor(rays.origins.reshape(-1, 3)[idx])
    d = torch.as_tensor(rays.directions.reshape(-1, 3)[idx])
    near = torch.as_tensor(rays.near.reshape(-1)[idx])
    far = torch.as_tensor(rays.far.reshape(-1)[idx])
    model.eval()
    for s in range(0, len(idx), chunk):
        sl = slice(s, s + chunk)
        tt = torch.full((len(o[sl]),), float(t), dtype=torch.float64)
        res = render_rays(model, o[sl], d[sl], near[sl], far[sl], tt, n_samples)
        for k in out:
            out[k][idx[sl]] = res[k].double().numpy()
    depth = out["depth"] / scale.scale
    return RenderedScan(
        depth.reshape(h, w),
        np.clip(out["intensity"], 0, 1).reshape(h, w),
        np.clip(out["raydrop"], 0, 1).reshape(h, w),
        out["acc"].reshape(h, w),
        pose,
        t,
        model.cfg.min_weight_sum,
    )

"""Two-stage optimisation: the field and flow network on the composite loss,
then the ray-drop refiner with the field frozen."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, fields
from dataclasses import field as dc_field
from typing import Optional

import numpy as np
import torch

from .data import Checkpoint, SceneDataset
from .fields import FieldConfig, LidarField, RenderedScan, render_rays, render_scan
from .flow import flow_loss, remove_ground_ransac
from .refine import RefinerConfig, RefinerNet, apply_mask, refine_loss, refine_mask
from .sensor import RangeScan, SceneScale, SensorConfig, SensorPose, range_to_pointcloud, scan_rays

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; ``state`` holds diagnostics."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class LossWeights:
    depth: float = 1.0
    intensity: float = 0.1
    raydrop: float = 0.01
    flow: float = 0.01
    refine: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def stage1(cls) -> "LossWeights":
        return cls(refine=0.0)

    @classmethod
    def stage2(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 1.0)


@dataclass
class TrainConfig:
    iterations: int = 30000
    rays_per_batch: int = 1024
    lr_grids: float = 0.01
    lr_mlps: float = 0.001
    lr_final_factor: float = 0.1
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    refine_epochs: int = 300
    refine_lr: float = 0.001
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights.stage1)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    refiner: RefinerConfig = dc_field(default_factory=RefinerConfig)
    # flow supervision: ground removal and range limit on metric clouds
    flow_points: int = 4096
    ransac_iters: int = 100
    ransac_tol_m: float = 0.1
    ransac_min_normal_z: float = 0.9
    flow_max_range_m: float = 50.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1 or self.refine_epochs < 0:
            raise ValueError("iteration, batch and epoch counts must be positive")
        if not 0 < self.lr_final_factor <= 1:
            raise ValueError("lr_final_factor must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["refiner"] = self.refiner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "field" in d:
            d["field"] = FieldConfig.from_dict(d["field"])
        if "refiner" in d:
            d["refiner"] = RefinerConfig.from_dict(d["refiner"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """``paper`` is the full-size setting; ``desk`` is a CPU-sized
        setting for 16x128 scans."""
        if name == "paper":
            cfg = cls()
        elif name == "desk":
            cfg = cls(
                iterations=2000,
                rays_per_batch=64,
                flow_points=1024,
                field=FieldConfig(
                    flow_layers=4,
                    flow_hidden=64,
                    planar_base_resolution=16,
                    planar_levels=2,
                    hash_levels=4,
                    hash_min_resolution=32,
                    hash_max_resolution=256,
                    log2_table_size=14,
                    n_samples=64,
                ),
                refiner=RefinerConfig((16, 32, 64, 128)),
            )
        else:
            raise ValueError(f"unknown preset {name!r}")
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown training option {k!r}")
            setattr(cfg, k, v)
        cfg.__post_init__()
        return cfg


# ------------------------------------------------------------------- losses


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, name: str) -> torch.Tensor:
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        logger.warning("%s loss has no valid rays in this batch", name)
        return values.sum() * 0.0
    return values[mask].mean()


def depth_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error over valid rays."""
    return _masked_mean((pred - gt).abs(), mask, "depth")


def intensity_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared intensity error over valid rays."""
    return _masked_mean((pred - gt) ** 2, mask, "intensity")


def raydrop_loss(pred: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error of the composited return probability over all rays."""
    return ((pred - gt_mask.to(pred.dtype)) ** 2).mean()


def total_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the loss terms present in ``parts``."""
    out = 0.0
    for name, value in parts.items():
        out = out + getattr(weights, name) * value
    return out if torch.is_tensor(out) else torch.tensor(float(out))


# --------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: LidarField
    checkpoint: Checkpoint
    history: dict


def _ray_table(ds: SceneDataset, frames: list[int]):
    """Rays, targets and times of every pixel of ``frames`` that meets the scene cube."""
    cols = {k: [] for k in ("o", "d", "near", "far", "t", "depth", "intensity", "mask", "frame")}
    s = ds.scale
    for i in frames:
        f = ds.frames[i]
        rays = scan_rays(ds.config, f.pose, s)
        ok = rays.valid.reshape(-1)
        cols["o"].append(rays.origins.reshape(-1, 3)[ok])
        cols["d"].append(rays.directions.reshape(-1, 3)[ok])
        cols["near"].append(rays.near.reshape(-1)[ok])
        cols["far"].append(rays.far.reshape(-1)[ok])
        cols["t"].append(np.full(ok.sum(), s.time_to_unit(f.timestamp)))
        cols["depth"].append(f.depth.reshape(-1)[ok] * s.scale)
        cols["intensity"].append(f.intensity.reshape(-1)[ok])
        cols["mask"].append(f.mask.reshape(-1)[ok])
        cols["frame"].append(np.full(ok.sum(), i))
    return {k: torch.as_tensor(np.concatenate(v)) for k, v in cols.items()}


def flow_clouds(ds: SceneDataset, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Per-frame clouds for flow supervision in normalized units: ground
    removed, range limited and subsampled to ``cfg.flow_points``."""
    out = {}
    for i in ds.train_indices:
        f = ds.frames[i]
        pc = range_to_pointcloud(f, ds.config)
        res = remove_ground_ransac(
            pc, cfg.ransac_iters, cfg.ransac_tol_m, cfg.flow_max_range_m, f.pose.translation,
            cfg.ransac_min_normal_z, rng,
        )
        pts = res.cloud.points
        if len(pts) > cfg.flow_points:
            pts = pts[np.sort(rng.choice(len(pts), cfg.flow_points, replace=False))]
        if len(pts):
            out[i] = torch.as_tensor(ds.scale.points_to_unit(pts))
    return out


def build_model(cfg: FieldConfig, frame_dt: float, seed: int) -> LidarField:
    torch.manual_seed(seed)
    return LidarField(cfg, frame_dt)


def _optimizer(model: LidarField, cfg: TrainConfig):
    groups = [
        {"params": list(model.grid_parameters()), "lr": cfg.lr_grids},
        {"params": list(model.mlp_parameters()), "lr": cfg.lr_mlps},
    ]
    opt = torch.optim.Adam(groups, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    n = cfg.iterations
    gamma = cfg.lr_final_factor ** (1.0 / max(n - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    return opt, sched


def train(ds: SceneDataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """Fit the field (and flow network) to the training frames of ``ds``.

    Each iteration renders ``rays_per_batch`` rays drawn uniformly over all
    training pixels and, when flow is enabled, adds the flow loss of one
    random training frame against whichever adjacent frames are also
    training frames. ``progress(iteration, parts)`` is called every
    ``log_every`` iterations.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_idx = ds.train_indices
    if not train_idx:
        raise ValueError("dataset has no training frames")
    model = build_model(cfg.field, ds.frame_dt, cfg.seed)
    table = _ray_table(ds, train_idx)
    n_rays = len(table["o"])
    if n_rays == 0:
        raise ValueError("no training ray intersects the scene volume")
    clouds = flow_clouds(ds, cfg, rng) if model.flow is not None else {}
    times = {i: float(ds.scale.time_to_unit(ds.frames[i].timestamp)) for i in train_idx}
    flow_frames = [i for i in train_idx if i in clouds and ((i - 1) in clouds or (i + 1) in clouds)]
    opt, sched = _optimizer(model, cfg)
    dtype = cfg.field.torch_dtype
    hist = {k: [] for k in ("total", "depth", "intensity", "raydrop", "flow")}
    model.train()
    for it in range(cfg.iterations):
        sel = torch.randint(n_rays, (cfg.rays_per_batch,), generator=gen)
        out = render_rays(
            model, table["o"][sel], table["d"][sel], table["near"][sel], table["far"][sel],
            table["t"][sel], cfg.field.n_samples, perturb=True, generator=gen,
        )
        mask = table["mask"][sel]
        parts = {
            "depth": depth_loss(out["depth"], table["depth"][sel].to(dtype), mask),
            "intensity": intensity_loss(out["intensity"], table["intensity"][sel].to(dtype), mask),
            "raydrop": raydrop_loss(out["raydrop"], mask),
        }
        if flow_frames:
            i = flow_frames[int(torch.randint(len(flow_frames), (1,), generator=gen))]
            parts["flow"] = flow_loss(model.flow, clouds[i], times[i], clouds.get(i - 1), clouds.get(i + 1))
        loss = total_loss(parts, cfg.weights)
        if not torch.isfinite(loss):
            state = {"iteration": it, "parts": {k: float(v.detach()) for k, v in parts.items()},
                     "lr": [g["lr"] for g in opt.param_groups]}
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {state['parts']}", state)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it < cfg.iterations - 1:
            sched.step()
        hist["total"].append(float(loss.detach()))
        for k in ("depth", "intensity", "raydrop", "flow"):
            hist[k].append(float(parts[k].detach()) if k in parts else 0.0)
        if progress is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(it, {k: v[-1] for k, v in hist.items()})
    hist["final_lr"] = [g["lr"] for g in opt.param_groups]
    ckpt = make_checkpoint(model, ds, cfg, hist)
    return TrainResult(model, ckpt, hist)


def _state(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def make_checkpoint(model: LidarField, ds: SceneDataset, cfg: TrainConfig, hist: dict) -> Checkpoint:
    summary = {
        "depth_initial": hist["depth"][0] if hist.get("depth") else None,
        "depth_final": hist["depth"][-1] if hist.get("depth") else None,
        "final_lr": hist.get("final_lr"),
    }
    return Checkpoint(
        ds.config, ds.scale, cfg.field.to_dict(), _state(model), cfg.to_dict(), cfg.seed,
        float(model.frame_dt), history=summary,
    )


def load_model(ckpt: Checkpoint) -> tuple[LidarField, Optional[RefinerNet]]:
    """Rebuild the field (and refiner, when present) from a checkpoint."""
    model = LidarField(FieldConfig.from_dict(ckpt.field_config), ckpt.frame_dt)
    model.load_state_dict(ckpt.field_state)
    model.eval()
    refiner = None
    if ckpt.refiner_state is not None:
        refiner = RefinerNet(RefinerConfig.from_dict(ckpt.refiner_config))
        refiner.load_state_dict(ckpt.refiner_state)
        refiner.eval()
    return model, refiner


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- stage two


def refiner_inputs(r: RenderedScan, config: SensorConfig) -> torch.Tensor:
    """Stacked ``(3, H, W)`` refiner input of one rendered scan."""
    return torch.stack([
        torch.as_tensor(r.raydrop, dtype=torch.float32),
        torch.as_tensor(np.clip(r.depth / config.max_range_m, 0, 1), dtype=torch.float32),
        torch.as_tensor(r.intensity, dtype=torch.float32),
    ])


def render_frames(model: LidarField, ds: SceneDataset, frames, n_samples=None) -> list[RenderedScan]:
    s = ds.scale
    return [
        render_scan(model, ds.config, ds.frames[i].pose, float(s.time_to_unit(ds.frames[i].timestamp)), s, n_samples)
        for i in frames
    ]


@dataclass
class RefineResult:
    refiner: RefinerNet
    checkpoint: Checkpoint
    bce: list


def refine_stage(model: LidarField, ckpt: Checkpoint, ds: SceneDataset, cfg: TrainConfig,
                 renders: Optional[list] = None, progress=None) -> RefineResult:
    """Fit the ray-drop refiner on full renders of the training frames.

    The field is frozen; one epoch is one full-batch pass over all training
    frames. ``bce[k]`` is the training loss before the update of epoch ``k``
    and ``bce[-1]`` the loss after the final epoch.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        if renders is None:
            renders = render_frames(model, ds, ds.train_indices, cfg.field.n_samples)
        x = torch.stack([refiner_inputs(r, ds.config) for r in renders])
        gt = torch.stack([torch.as_tensor(ds.frames[i].mask, dtype=torch.float32) for i in ds.train_indices])
        torch.manual_seed(cfg.seed)
        net = RefinerNet(cfg.refiner)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.refine_lr, betas=tuple(cfg.adam_betas))
        weights = LossWeights.stage2()
        bce = []
        net.train()
        for epoch in range(cfg.refine_epochs):
            bce_t = refine_loss(torch.sigmoid(net(x))[:, 0], gt)
            loss = total_loss({"refine": bce_t}, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite refinement loss at epoch {epoch}", {"epoch": epoch})
            bce.append(float(bce_t.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if progress is not None and epoch % 50 == 0:
                progress(epoch, {"refine": bce[-1]})
        net.eval()
        with torch.no_grad():
            bce.append(float(refine_loss(torch.sigmoid(net(x))[:, 0], gt)))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    out = copy.copy(ckpt)
    out.refiner_state = _state(net)
    out.refiner_config = cfg.refiner.to_dict()
    out.history = dict(ckpt.history, refine_bce_initial=bce[0], refine_bce_final=bce[-1])
    return RefineResult(net, out, bce)


# ---------------------------------------------------------------- inference


@dataclass
class Prediction:
    rendered: RenderedScan
    prob: np.ndarray
    scan: RangeScan


def predict(model: LidarField, refiner: Optional[RefinerNet], config: SensorConfig, pose: SensorPose,
            t: float, scale: SceneScale, n_samples=None, tau: float = 0.5) -> Prediction:
    """Render a scan and binarise it with the refined (or raw) return probability."""
    r = render_scan(model, config, pose, t, scale, n_samples)
    if refiner is not None:
        with torch.no_grad():
            x = refiner_inputs(r, config)
            prob = refine_mask(refiner, x[0], x[1], x[2]).double().numpy()
    else:
        prob = r.raydrop
    prob = np.where(r.acc >= r.min_weight_sum, prob, 0.0)
    dense = RangeScan(r.depth, r.intensity, r.depth > 0, pose, t)
    return Prediction(r, prob, apply_mask(dense, prob, tau))

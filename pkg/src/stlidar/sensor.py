"""Spinning LiDAR geometry: ray generation, range-image projection and
scene normalization.

Conventions used throughout the package:

* Sensor frame is x forward, y left, z up. Azimuth ``theta`` is measured
  from +x towards +y, elevation ``phi`` from the horizontal plane.
* Range images are ``(n_beams, azimuth_count)``. Row 0 is the lowest beam,
  column 0 is the bin starting at ``-pi``. Beams and columns sit at bin
  centres.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CUBE_HALF_EXTENT = 1.05


@dataclass(frozen=True)
class SensorConfig:
    n_beams: int
    azimuth_count: int
    fov_up_deg: float
    fov_down_deg: float
    max_range_m: float

    def __post_init__(self):
        if self.n_beams < 1 or self.azimuth_count < 1:
            raise ValueError(
                f"n_beams and azimuth_count must be >= 1, got {self.n_beams}, {self.azimuth_count}"
            )
        if not self.fov_up_deg > self.fov_down_deg:
            raise ValueError(
                f"fov_up_deg ({self.fov_up_deg}) must exceed fov_down_deg ({self.fov_down_deg})"
            )
        if not self.max_range_m > 0:
            raise ValueError(f"max_range_m must be positive, got {self.max_range_m}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_beams, self.azimuth_count)

    @property
    def elevation_step(self) -> float:
        return math.radians(self.fov_up_deg - self.fov_down_deg) / self.n_beams

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.azimuth_count

    def elevations(self) -> np.ndarray:
        """Beam elevations in radians, lowest first."""
        lo = math.radians(self.fov_down_deg)
        return lo + (np.arange(self.n_beams) + 0.5) * self.elevation_step

    def azimuths(self) -> np.ndarray:
        return -math.pi + (np.arange(self.azimuth_count) + 0.5) * self.azimuth_step

    def with_overrides(self, **kwargs) -> "SensorConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


# 66 x 1030 range images over a 26.4 degree vertical field of view.
KITTI360 = SensorConfig(66, 1030, 2.0, -24.4, 80.0)
# 32 x 1080 range images over a 40 degree vertical field of view.
NUSCENES = SensorConfig(32, 1080, 10.0, -30.0, 70.0)


@dataclass
class SensorPose:
    """Sensor-to-world rigid transform."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("pose contains non-finite values")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("pose rotation is not orthonormal with determinant +1")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("pose last row must be (0, 0, 0, 1)")
        self.matrix = m

    @classmethod
    def identity(cls) -> "SensorPose":
        return cls(np.eye(4))

    @classmethod
    def from_translation(cls, xyz, yaw: float = 0.0) -> "SensorPose":
        m = np.eye(4)
        c, s = math.cos(yaw), math.sin(yaw)
        m[:2, :2] = [[c, -s], [s, c]]
        m[:3, 3] = xyz
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


def orthonormalize(matrix: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Project the rotation block of a nearly-rigid 4x4 onto SO(3).

    Raises ``ValueError`` when the input is further than ``tol`` from a
    rotation (Frobenius norm of ``R R^T - I``).
    """
    m = np.array(matrix, dtype=np.float64)
    rot = m[:3, :3]
    if np.linalg.norm(rot @ rot.T - np.eye(3)) > tol:
        raise ValueError("pose rotation is too far from orthonormal")
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise ValueError("pose rotation has negative determinant")
    m[:3, :3] = r
    m[3] = [0, 0, 0, 1]
    return m


@dataclass
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.points):
            raise ValueError("points and intensity lengths differ")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[keep], self.intensity[keep], self.frame)


@dataclass
class RangeScan:
    """One LiDAR frame as aligned range-view images.

    ``depth`` is 0 wherever ``mask`` is 0; intensity likewise.
    """

    depth: np.ndarray
    intensity: np.ndarray
    mask: np.ndarray
    pose: SensorPose
    timestamp: float

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.intensity = np.asarray(self.intensity, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.depth.shape == self.intensity.shape == self.mask.shape) or self.depth.ndim != 2:
            raise ValueError(
                f"depth/intensity/mask shapes differ: {self.depth.shape}, "
                f"{self.intensity.shape}, {self.mask.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def check(self, config: Optional[SensorConfig] = None) -> None:
        if config is not None and self.shape != config.shape:
            raise ValueError(f"scan shape {self.shape} does not match sensor {config.shape}")
        if np.any((self.depth > 0) != self.mask):
            raise ValueError("depth must be positive exactly where mask is set")
        if np.any(self.intensity[~self.mask] != 0):
            raise ValueError("intensity must be zero on dropped pixels")

    @classmethod
    def empty(cls, config: SensorConfig, pose: SensorPose, timestamp: float = 0.0) -> "RangeScan":
        z = np.zeros(config.shape, np.float32)
        return cls(z, z.copy(), np.zeros(config.shape, bool), pose, timestamp)


def ray_direction(theta, phi) -> np.ndarray:
    """Unit direction for azimuth ``theta`` and elevation ``phi`` (radians).

    Broadcasts over array inputs; the direction lives on the last axis.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise ValueError("ray_direction requires finite angles")
    cp = np.cos(phi)
    return np.stack(np.broadcast_arrays(cp * np.cos(theta), cp * np.sin(theta), np.sin(phi)), -1)


def sensor_directions(config: SensorConfig) -> np.ndarray:
    """``(H, W, 3)`` unit directions in the sensor frame."""
    phi, theta = np.meshgrid(config.elevations(), config.azimuths(), indexing="ij")
    return ray_direction(theta, phi)


@dataclass
class SceneScale:
    """Affine map from metric world coordinates to the normalized cube.

    ``normalized = (world - center) * scale``; timestamps map linearly from
    ``[t_min, t_max]`` to ``[0, 1]``.
    """

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)

    def points_to_unit(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, np.float64) - self.center) * self.scale

    def points_from_unit(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, np.float64) / self.scale + self.center

    def pose_to_unit(self, pose: SensorPose) -> SensorPose:
        m = pose.matrix.copy()
        m[:3, 3] = self.points_to_unit(m[:3, 3])
        return SensorPose(m)

    def pose_from_unit(self, pose: SensorPose) -> SensorPose:
        m = pose.matrix.copy()
        m[:3, 3] = self.points_from_unit(m[:3, 3])
        return SensorPose(m)

    def time_to_unit(self, t):
        span = self.t_max - self.t_min
        if span == 0:
            return np.zeros_like(np.asarray(t, np.float64)) if np.ndim(t) else 0.0
        return (np.asarray(t, np.float64) - self.t_min) / span if np.ndim(t) else (t - self.t_min) / span

    def time_from_unit(self, t):
        return self.t_min + np.asarray(t, np.float64) * (self.t_max - self.t_min) if np.ndim(t) else (
            self.t_min + t * (self.t_max - self.t_min)
        )

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.center, [self.scale, self.t_min, self.t_max]])

    @classmethod
    def from_array(cls, a) -> "SceneScale":
        a = np.asarray(a, np.float64)
        return cls(a[:3], a[3], a[4], a[5])


@dataclass
class Rays:
    """A bundle of rays with leading shape ``S``.

    Rays that miss the padded scene cube have ``valid == False``; their
    bounds are meaningless.
    """

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.near.shape


def clip_to_cube(origins: np.ndarray, directions: np.ndarray, half_extent: float = CUBE_HALF_EXTENT):
    """Slab intersection of rays with ``[-h, h]^3``. Returns (near, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (-half_extent - origins) * inv
        t1 = (half_extent - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(lo.max(-1), 0.0)
    far = hi.min(-1)
    return near, far, far > near


def scan_rays(config: SensorConfig, pose: SensorPose, scene_scale: Optional[SceneScale] = None) -> Rays:
    """One ray per range-image pixel, expressed in normalized scene units.

    ``pose`` is metric; ``scene_scale`` maps it into the unit cube (identity
    when omitted). Ray bounds come from the padded cube and are further
    capped at the sensor's maximum range.
    """
    scene_scale = scene_scale or SceneScale()
    dirs = sensor_directions(config) @ pose.rotation.T
    origin = scene_scale.points_to_unit(pose.translation)
    origins = np.broadcast_to(origin, dirs.shape).copy()
    near, far, hit = clip_to_cube(origins, dirs)
    far = np.minimum(far, config.max_range_m * scene_scale.scale)
    return Rays(origins, dirs, near, far, hit & (far > near))


def pixel_indices(points: np.ndarray, config: SensorConfig):
    """Bin sensor-frame points to (row, col, range); row is -1 outside the FOV."""
    rng = np.linalg.norm(points, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.clip(points[:, 2] / rng, -1.0, 1.0))
    theta = np.arctan2(points[:, 1], points[:, 0])
    row = np.floor((phi - math.radians(config.fov_down_deg)) / config.elevation_step).astype(np.int64)
    col = np.floor((theta + math.pi) / config.azimuth_step).astype(np.int64) % config.azimuth_count
    ok = (rng > 0) & (rng <= config.max_range_m) & (row >= 0) & (row < config.n_beams)
    row[~ok] = -1
    return row, col, rng


def pointcloud_to_range(
    pc: PointCloud, config: SensorConfig, pose: Optional[SensorPose] = None, timestamp: float = 0.0
) -> RangeScan:
    """Project a sensor-frame cloud to a range image, keeping the nearest return per pixel."""
    pose = pose or SensorPose.identity()
    scan = RangeScan.empty(config, pose, timestamp)
    if len(pc) == 0:
        return scan
    if pc.frame != "sensor":
        raise ValueError("pointcloud_to_range expects a sensor-frame cloud")
    row, col, rng = pixel_indices(pc.points, config)
    keep = np.nonzero(row >= 0)[0]
    if len(keep) == 0:
        return scan
    pix = row[keep] * config.azimuth_count + col[keep]
    # primary key pixel, then range, then original index
    order = np.lexsort((keep, rng[keep], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = keep[order[first]]
    flat = pix_sorted[first]
    depth = scan.depth.reshape(-1)
    inten = scan.intensity.reshape(-1)
    depth[flat] = rng[winners]
    inten[flat] = np.clip(pc.intensity[winners], 0.0, 1.0)
    scan.mask = scan.depth > 0
    inten[~scan.mask.reshape(-1)] = 0.0
    return scan


def range_to_pointcloud(scan: RangeScan, config: SensorConfig, frame: str = "world") -> PointCloud:
    """Unproject the valid pixels of a scan, in the world frame by default."""
    if scan.shape != config.shape:
        raise ValueError(f"scan shape {scan.shape} does not match sensor {config.shape}")
    rows, cols = np.nonzero(scan.mask)
    if len(rows) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0), frame)
    d = ray_direction(config.azimuths()[cols], config.elevations()[rows])
    pts = d * scan.depth[rows, cols].astype(np.float64)[:, None]
    if frame == "world":
        pts = scan.pose.transform_points(pts)
    return PointCloud(pts, scan.intensity[rows, cols], frame)


def scene_bounds(scans: Sequence[RangeScan], config: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    chunks = [s.pose.translation[None] for s in scans]
    chunks += [range_to_pointcloud(s, config).points for s in scans]
    pts = np.concatenate(chunks, 0)
    return pts.min(0), pts.max(0)


def fit_scene_scale(lo: np.ndarray, hi: np.ndarray, timestamps: Sequence[float]) -> SceneScale:
    extent = float(np.max(hi - lo))
    if not extent > 0 or not np.isfinite(extent):
        raise ValueError("degenerate scene: zero spatial extent")
    ts = np.asarray(timestamps, np.float64)
    return SceneScale((lo + hi) / 2.0, 2.0 / extent, float(ts.min()), float(ts.max()))


def normalize_scene(
    scans: Sequence[RangeScan], config: SensorConfig
) -> tuple[list[RangeScan], SceneScale]:
    """Map a metric scan sequence into ``[-1, 1]^3`` and ``t in [0, 1]``.

    The bound covers every unprojected point and every sensor origin. The
    longest axis spans exactly ``[-1, 1]``.
    """
    if len(scans) == 0:
        raise ValueError("normalize_scene needs at least one scan")
    lo, hi = scene_bounds(scans, config)
    rec = fit_scene_scale(lo, hi, [s.timestamp for s in scans])
    return [apply_scale(s, rec) for s in scans], rec


def apply_scale(scan: RangeScan, rec: SceneScale) -> RangeScan:
    return RangeScan(
        (scan.depth.astype(np.float64) * rec.scale).astype(np.float32),
        scan.intensity.copy(),
        scan.mask.copy(),
        rec.pose_to_unit(scan.pose),
        float(rec.time_to_unit(scan.timestamp)),
    )


def invert_scale(scan: RangeScan, rec: SceneScale) -> RangeScan:
    return RangeScan(
        (scan.depth.astype(np.float64) / rec.scale).astype(np.float32),
        scan.intensity.copy(),
        scan.mask.copy(),
        rec.pose_from_unit(scan.pose),
        float(rec.time_from_unit(scan.timestamp)),
    )

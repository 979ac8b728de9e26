"""Scene datasets on disk, the synthetic scene generator with its analytic
ray-casting oracle, and checkpoint persistence.

Scene directory layout::

    scene/
      sensor.cfg                    key=value sensor configuration
      timestamps.txt                one decimal per line
      frames/NNNNNN.depth.f32       H*W little-endian float32, metres, 0 = dropped
      frames/NNNNNN.intensity.f32   H*W little-endian float32
      frames/NNNNNN.pose.txt        16 decimals, row-major sensor-to-world
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .sensor import (
    RangeScan,
    SceneScale,
    SensorConfig,
    SensorPose,
    fit_scene_scale,
    orthonormalize,
    scene_bounds,
    sensor_directions,
)

logger = logging.getLogger(__name__)


class SceneLoadError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def default_heldout(n_frames: int, interval: int = 10) -> list[int]:
    """Every ``interval``-th frame, excluding the sequence endpoints."""
    return [i for i in range(1, n_frames - 1) if i % interval == 0]


@dataclass
class SceneDataset:
    config: SensorConfig
    frames: list[RangeScan]
    heldout: list[int] = field(default_factory=list)
    scale: Optional[SceneScale] = None

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if any(i < 0 or i >= len(self.frames) for i in self.heldout):
            raise ValueError("held-out index out of range")
        if self.scale is None and self.frames:
            lo, hi = scene_bounds(self.frames, self.config)
            self.scale = fit_scene_scale(lo, hi, ts)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def train_indices(self) -> list[int]:
        held = set(self.heldout)
        return [i for i in range(len(self.frames)) if i not in held]

    @property
    def frame_dt(self) -> float:
        """Median spacing of consecutive frames in normalized time."""
        if len(self.frames) < 2:
            return 1.0
        t = self.scale.time_to_unit(np.array([f.timestamp for f in self.frames]))
        return float(np.median(np.diff(t)))


# ---------------------------------------------------------------- scene files


def config_to_text(cfg: SensorConfig) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in asdict(cfg).items())


def config_from_text(text: str) -> SensorConfig:
    vals = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        vals[key.strip()] = value.strip()
    try:
        return SensorConfig(
            int(vals["n_beams"]),
            int(vals["azimuth_count"]),
            float(vals["fov_up_deg"]),
            float(vals["fov_down_deg"]),
            float(vals["max_range_m"]),
        )
    except KeyError as e:
        raise SceneLoadError(f"sensor config is missing key {e.args[0]}") from None


def save_scene(ds: SceneDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "sensor.cfg").write_text(config_to_text(ds.config))
    (out / "timestamps.txt").write_text("".join(f"{f.timestamp!r}\n" for f in ds.frames))
    for i, f in enumerate(ds.frames):
        stem = out / "frames" / f"{i:06d}"
        np.where(f.mask, f.depth, 0).astype("<f4").tofile(f"{stem}.depth.f32")
        np.where(f.mask, f.intensity, 0).astype("<f4").tofile(f"{stem}.intensity.f32")
        Path(f"{stem}.pose.txt").write_text(" ".join(repr(float(v)) for v in f.pose.matrix.reshape(-1)) + "\n")


def _read_f32(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise SceneLoadError(f"missing file {path}")
    raw = path.read_bytes()
    expected = 4 * shape[0] * shape[1]
    if len(raw) != expected:
        raise SceneLoadError(f"{path}: expected {expected} bytes for {shape[0]}x{shape[1]}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_scene(scene_dir, holdout_interval: int = 10) -> SceneDataset:
    root = Path(scene_dir)
    for name in ("sensor.cfg", "timestamps.txt"):
        if not (root / name).exists():
            raise SceneLoadError(f"missing file {root / name}")
    cfg = config_from_text((root / "sensor.cfg").read_text())
    try:
        stamps = [float(x) for x in (root / "timestamps.txt").read_text().split()]
    except ValueError as e:
        raise SceneLoadError(f"{root / 'timestamps.txt'}: {e}") from None
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise SceneLoadError(f"{root / 'timestamps.txt'}: timestamps are not strictly increasing")
    frames = []
    for i, ts in enumerate(stamps):
        stem = root / "frames" / f"{i:06d}"
        depth = _read_f32(Path(f"{stem}.depth.f32"), cfg.shape)
        inten = _read_f32(Path(f"{stem}.intensity.f32"), cfg.shape)
        pose_path = Path(f"{stem}.pose.txt")
        if not pose_path.exists():
            raise SceneLoadError(f"missing file {pose_path}")
        try:
            vals = np.array([float(v) for v in pose_path.read_text().split()])
            if vals.size != 16:
                raise ValueError(f"expected 16 values, got {vals.size}")
            pose = SensorPose(orthonormalize(vals.reshape(4, 4)))
        except ValueError as e:
            raise SceneLoadError(f"{pose_path}: {e}") from None
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise SceneLoadError(f"{stem}.depth.f32: depth must be finite and non-negative")
        mask = depth > 0
        frames.append(RangeScan(depth, np.where(mask, inten, 0), mask, pose, ts))
    return SceneDataset(cfg, frames, default_heldout(len(frames), holdout_interval))


# ------------------------------------------------------------ synthetic scenes


@dataclass
class PlaneSpec:
    """Axis-aligned rectangle ``x[axis] = offset`` bounded on the two other
    axes (in increasing axis order) by ``lo``/``hi``."""

    axis: int
    offset: float
    lo: Sequence[float] = (-1e9, -1e9)
    hi: Sequence[float] = (1e9, 1e9)
    intensity: float = 0.5
    drop_prob: float = 0.0


@dataclass
class BoxSpec:
    """Box with yaw about z. ``velocity`` is m/s; a non-zero ``yaw_rate``
    (rad/s) turns the box, moving it along its heading at ``|velocity_xy|``."""

    center: Sequence[float]
    size: Sequence[float]
    yaw: float = 0.0
    velocity: Sequence[float] = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0
    intensity: float = 0.5
    drop_prob: float = 0.0

    def state(self, time: float) -> tuple[np.ndarray, float]:
        c0 = np.asarray(self.center, np.float64)
        v = np.asarray(self.velocity, np.float64)
        if self.yaw_rate == 0.0:
            return c0 + v * time, self.yaw
        speed = math.hypot(v[0], v[1])
        psi0, psi = self.yaw, self.yaw + self.yaw_rate * time
        dx = speed / self.yaw_rate * (math.sin(psi) - math.sin(psi0))
        dy = speed / self.yaw_rate * (math.cos(psi0) - math.cos(psi))
        return c0 + np.array([dx, dy, v[2] * time]), psi


@dataclass
class SyntheticSpec:
    sensor: SensorConfig
    planes: list[PlaneSpec] = field(default_factory=list)
    boxes: list[BoxSpec] = field(default_factory=list)
    n_frames: int = 20
    frame_interval: float = 0.1
    sensor_start: Sequence[float] = (0.0, 0.0, 1.7)
    sensor_velocity: Sequence[float] = (0.0, 0.0, 0.0)
    sensor_yaw: float = 0.0
    noise: float = 0.0
    holdout_interval: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        sensor = SensorConfig(**d.pop("sensor"))
        planes = [PlaneSpec(**p) for p in d.pop("planes", [])]
        boxes = [BoxSpec(**b) for b in d.pop("boxes", [])]
        spec = cls(sensor, planes, boxes, **d)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ValueError("n_frames must be positive")
        for b in self.boxes:
            if not np.all(np.isfinite(b.velocity)) or not math.isfinite(b.yaw_rate):
                raise ValueError("box velocities must be finite")
            if np.any(np.asarray(b.size) <= 0):
                raise ValueError("box sizes must be positive")
        for p in self.planes:
            if p.axis not in (0, 1, 2):
                raise ValueError("plane axis must be 0, 1 or 2")

    def sensor_pose(self, time: float) -> SensorPose:
        pos = np.asarray(self.sensor_start, np.float64) + np.asarray(self.sensor_velocity, np.float64) * time
        return SensorPose.from_translation(pos, self.sensor_yaw)


def desk_sensor() -> SensorConfig:
    return SensorConfig(16, 128, 10.0, -20.0, 40.0)


def static_scene_spec(sensor: Optional[SensorConfig] = None) -> SyntheticSpec:
    """Street canyon: ground plus two facades, two parked boxes."""
    return SyntheticSpec(
        sensor or desk_sensor(),
        planes=[
            PlaneSpec(2, 0.0, (-30.0, -12.0), (40.0, 12.0), intensity=0.3),
            PlaneSpec(1, 8.0, (-30.0, 0.0), (40.0, 8.0), intensity=0.7),
            PlaneSpec(1, -8.0, (-30.0, 0.0), (40.0, 6.0), intensity=0.5),
        ],
        boxes=[
            BoxSpec((12.0, 4.0, 1.0), (4.0, 2.0, 2.0), intensity=0.9),
            BoxSpec((4.0, -5.0, 0.75), (2.0, 2.0, 1.5), yaw=0.4, intensity=0.6),
        ],
        n_frames=20,
        sensor_velocity=(5.0, 0.0, 0.0),
    )


def dynamic_scene_spec(sensor: Optional[SensorConfig] = None, box_speed: float = 2.0) -> SyntheticSpec:
    """The static canyon with one vehicle cutting diagonally across the street
    towards the sensor.

    The vehicle changes which background surfaces it hides over the
    sequence, so a static field cannot explain it. A vehicle driving alongside
    the sensor would look much like a long parked one.
    """
    spec = static_scene_spec(sensor)
    heading = 0.75 * math.pi
    velocity = (box_speed * math.cos(heading), box_speed * math.sin(heading), 0.0)
    spec.boxes.append(BoxSpec((20.0, -4.0, 0.9), (4.0, 1.8, 1.8), yaw=heading, velocity=velocity, intensity=0.8))
    return spec


def raydrop_scene_spec(sensor: Optional[SensorConfig] = None) -> SyntheticSpec:
    """Static canyon whose surfaces drop returns with surface-specific odds."""
    spec = static_scene_spec(sensor)
    drops = (0.05, 0.0, 0.6)
    for p, q in zip(spec.planes, drops):
        p.drop_prob = q
    spec.boxes[0].drop_prob = 0.9
    spec.boxes[1].drop_prob = 0.1
    return spec


PRESET_SPECS = {"static": static_scene_spec, "dynamic": dynamic_scene_spec, "raydrop": raydrop_scene_spec}


class SyntheticOracle:
    """Exact ray casting against a :class:`SyntheticSpec` at any time."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def cast(self, origins: np.ndarray, dirs: np.ndarray, time: float):
        """Nearest hit per ray. Returns ``(depth, intensity, surface, drop_prob)``
        with ``depth = inf`` and ``surface = -1`` for misses. Surfaces are
        numbered planes first, then boxes."""
        o = np.asarray(origins, np.float64).reshape(-1, 3)
        d = np.asarray(dirs, np.float64).reshape(-1, 3)
        n = len(o)
        best = np.full(n, np.inf)
        cosang = np.zeros(n)
        surf = np.full(n, -1)
        eps = 1e-9
        for k, p in enumerate(self.spec.planes):
            a = p.axis
            others = [i for i in range(3) if i != a]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (p.offset - o[:, a]) / d[:, a]
            hit = np.isfinite(t) & (t > eps)
            pt = o + d * np.where(hit, t, 0)[:, None]
            for j, ax in enumerate(others):
                hit &= (pt[:, ax] >= p.lo[j]) & (pt[:, ax] <= p.hi[j])
            better = hit & (t < best)
            best = np.where(better, t, best)
            cosang = np.where(better, np.abs(d[:, a]), cosang)
            surf = np.where(better, k, surf)
        for k, b in enumerate(self.spec.boxes):
            center, yaw = b.state(time)
            c, s = math.cos(-yaw), math.sin(-yaw)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            lo_ = (o - center) @ rot.T
            ld = d @ rot.T
            half = np.asarray(b.size, np.float64) / 2
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-half - lo_) / ld
                t1 = (half - lo_) / ld
            tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
            tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
            t_enter = tmin.max(1)
            t_exit = tmax.min(1)
            face = tmin.argmax(1)
            hit = (t_exit >= t_enter) & (t_enter > eps)
            better = hit & (t_enter < best)
            best = np.where(better, t_enter, best)
            cosang = np.where(better, np.abs(ld[np.arange(n), face]), cosang)
            surf = np.where(better, len(self.spec.planes) + k, surf)
        base = np.array([p.intensity for p in self.spec.planes] + [b.intensity for b in self.spec.boxes] + [0.0])
        drop = np.array([p.drop_prob for p in self.spec.planes] + [b.drop_prob for b in self.spec.boxes] + [1.0])
        return best, base[surf] * cosang, surf, drop[surf]

    def render(self, pose: SensorPose, time: float, config: Optional[SensorConfig] = None):
        """Noise- and drop-free oracle images ``(depth, intensity, surface)``
        at a metric pose; misses and returns beyond max range are 0 / -1."""
        cfg = config or self.spec.sensor
        dirs = sensor_directions(cfg).reshape(-1, 3) @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        depth, inten, surf, _ = self.cast(origins, dirs, time)
        ok = np.isfinite(depth) & (depth <= cfg.max_range_m)
        shape = cfg.shape
        return (
            np.where(ok, depth, 0.0).reshape(shape),
            np.where(ok, inten, 0.0).reshape(shape),
            np.where(ok, surf, -1).reshape(shape),
        )

    def box_displacement(self, box: int, t0: float, t1: float) -> np.ndarray:
        return self.spec.boxes[box].state(t1)[0] - self.spec.boxes[box].state(t0)[0]


def generate_synthetic(spec: SyntheticSpec, seed: int = 0):
    """Render a synthetic sequence. Returns ``(dataset, oracle)``.

    Depth is the exact ray-surface distance (plus optional Gaussian noise);
    intensity is the surface base value times the cosine of the incidence
    angle; each return is dropped with its surface's drop probability.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    oracle = SyntheticOracle(spec)
    cfg = spec.sensor
    frames = []
    for k in range(spec.n_frames):
        time = k * spec.frame_interval
        pose = spec.sensor_pose(time)
        depth, inten, surf = oracle.render(pose, time)
        drop_p = np.array([p.drop_prob for p in spec.planes] + [b.drop_prob for b in spec.boxes] + [1.0])[surf]
        keep = (surf >= 0) & (rng.random(cfg.shape) >= drop_p)
        if spec.noise > 0:
            depth = depth + rng.normal(0.0, spec.noise, cfg.shape)
        keep &= depth > 0
        frames.append(RangeScan(np.where(keep, depth, 0), np.where(keep, inten, 0), keep, pose, time))
    ds = SceneDataset(cfg, frames, default_heldout(spec.n_frames, spec.holdout_interval))
    return ds, oracle


def load_spec(path) -> SyntheticSpec:
    return SyntheticSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"STLIDARCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.uint8: (3, "u1"),
}
_DTYPE_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


@dataclass
class Checkpoint:
    sensor: SensorConfig
    scale: SceneScale
    field_config: dict
    field_state: dict
    train_config: dict
    seed: int
    frame_dt: float
    refiner_state: Optional[dict] = None
    refiner_config: Optional[dict] = None
    history: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def meta(self) -> dict:
        return {
            "sensor": asdict(self.sensor),
            "scale": self.scale.to_array().tolist(),
            "field_config": self.field_config,
            "train_config": self.train_config,
            "seed": self.seed,
            "frame_dt": self.frame_dt,
            "refiner_config": self.refiner_config,
            "history": self.history,
        }


def _tensor_record(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().contiguous().cpu()
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
    code, np_dt = _DTYPES[t.dtype]
    data = t.numpy().astype(np_dt, copy=False).tobytes()
    nm = name.encode()
    head = struct.pack("<I", len(nm)) + nm + struct.pack("<BB", code, t.dim())
    head += struct.pack(f"<{t.dim()}Q", *t.shape) + struct.pack("<Q", len(data))
    return head + data


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    records = [("__meta__", torch.frombuffer(bytearray(json.dumps(ckpt.meta(), sort_keys=True).encode()),
                                             dtype=torch.uint8))]
    records += [(f"field/{k}", v) for k, v in ckpt.field_state.items()]
    if ckpt.refiner_state is not None:
        records += [(f"refiner/{k}", v) for k, v in ckpt.refiner_state.items()]
    body = b"".join(_tensor_record(n, t) for n, t in records)
    body += _tensor_record("__end__", torch.tensor([len(records)], dtype=torch.int64))
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", ckpt.version) + body)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:12] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[12:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos, records = 16, {}
    order = []
    try:
        while True:
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            dt, np_dt = _DTYPE_CODES[code]
            arr = np.frombuffer(raw[pos : pos + nbytes], dtype=np_dt).reshape(shape)
            pos += nbytes
            if name == "__end__":
                if int(arr[0]) != len(order) or pos != len(raw):
                    raise CheckpointError(f"{path}: corrupt record table")
                break
            records[name] = torch.from_numpy(arr.astype(np_dt.replace("<", "="), copy=True)).to(dt)
            order.append(name)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    meta = json.loads(bytes(records.pop("__meta__").numpy()).decode())
    field_state = {k[6:]: v for k, v in records.items() if k.startswith("field/")}
    refiner = {k[8:]: v for k, v in records.items() if k.startswith("refiner/")} or None
    return Checkpoint(
        SensorConfig(**meta["sensor"]),
        SceneScale.from_array(meta["scale"]),
        meta["field_config"],
        field_state,
        meta["train_config"],
        meta["seed"],
        meta["frame_dt"],
        refiner,
        meta["refiner_config"],
        meta.get("history", {}),
        version,
    )

"""Range sensor models, scan simulation by ray casting, and scan files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .geometry.accel import Ray
from .geometry.transform import RigidTransform
from .scene import SceneGraph

SCAN_MAGIC = b"SGSCAN1"
INVALID = np.nan


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class PinholeModel:
    """Depth camera looking along +Z with x right and y down."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    min_range: float = 0.3
    max_range: float = 8.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SensorError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise SensorError("focal lengths must be positive")
        if not 0 < self.min_range < self.max_range:
            raise SensorError("need 0 < min_range < max_range")

    @classmethod
    def xtion(cls, **overrides) -> "PinholeModel":
        """Nominal 640x480 structured-light camera (intrinsics are a stand-in)."""
        params = dict(width=640, height=480, fx=570.0, fy=570.0, cx=319.5, cy=239.5, min_range=0.3, max_range=8.0)
        params.update(overrides)
        return cls(**params)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def ray_count(self) -> int:
        return self.width * self.height

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, row-major (v, u)."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def pixel_of(self, ray_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(ray_index) % self.width, np.asarray(ray_index) // self.width


@dataclass(frozen=True)
class SphericalModel:
    """Spinning LiDAR: columns sweep azimuth, rows are fixed elevations."""

    h_count: int
    h_start: float
    h_step: float
    v_angles: tuple[float, ...]
    min_range: float = 0.5
    max_range: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "v_angles", tuple(float(a) for a in self.v_angles))
        if self.h_count <= 0:
            raise SensorError("h_count must be positive")
        if len(self.v_angles) == 0 or np.any(np.diff(self.v_angles) <= 0):
            raise SensorError("v_angles must be non-empty and strictly increasing")
        if not 0 < self.min_range < self.max_range:
            raise SensorError("need 0 < min_range < max_range")

    @classmethod
    def vlp16(cls, h_count: int = 1824, **overrides) -> "SphericalModel":
        """16 channels from -15° to +15° in 2° steps, full 360° sweep."""
        params = dict(
            h_count=h_count,
            h_start=-np.pi,
            h_step=2.0 * np.pi / h_count,
            v_angles=tuple(np.radians(np.arange(-15.0, 16.0, 2.0))),
            min_range=0.5,
            max_range=100.0,
        )
        params.update(overrides)
        return cls(**params)

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.v_angles), self.h_count)

    @property
    def ray_count(self) -> int:
        return len(self.v_angles) * self.h_count

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, row-major (elevation, azimuth)."""
        az = self.h_start + np.arange(self.h_count) * self.h_step
        el = np.asarray(self.v_angles)
        el_g, az_g = np.meshgrid(el, az, indexing="ij")
        return np.stack(
            [np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1
        ).reshape(-1, 3)


SensorModel = Union[PinholeModel, SphericalModel]


def pinhole_ray(model: PinholeModel, u: float, v: float) -> Ray:
    if not (0 <= u < model.width and 0 <= v < model.height):
        raise SensorError(f"pixel ({u}, {v}) outside {model.width}x{model.height} image")
    return Ray((0.0, 0.0, 0.0), ((u - model.cx) / model.fx, (v - model.cy) / model.fy, 1.0))


def spherical_ray(model: SphericalModel, col: int, row: int) -> Ray:
    if not (0 <= col < model.h_count and 0 <= row < len(model.v_angles)):
        raise SensorError(f"index (col={col}, row={row}) outside {model.h_count}x{len(model.v_angles)} grid")
    a = model.h_start + col * model.h_step
    e = model.v_angles[row]
    return Ray((0.0, 0.0, 0.0), (np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)))


def model_to_dict(model: SensorModel) -> dict:
    kind = "pinhole" if isinstance(model, PinholeModel) else "spherical"
    out = {"type": kind}
    for f in fields(model):
        value = getattr(model, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def model_from_dict(data: dict) -> SensorModel:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        presets = {"xtion": PinholeModel.xtion, "vlp16": SphericalModel.vlp16}
        if preset not in presets:
            raise SensorError(f"unknown sensor preset {preset!r}; choose from {sorted(presets)}")
        data.pop("type", None)
        return presets[preset](**data)
    kind = data.pop("type", None)
    cls = {"pinhole": PinholeModel, "spherical": SphericalModel}.get(kind)
    if cls is None:
        raise SensorError(f"sensor 'type' must be 'pinhole' or 'spherical' (or give a 'preset'), got {kind!r}")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SensorError(f"unknown {kind} sensor fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise SensorError(f"{kind} sensor: {exc}") from None


def load_sensor(path: str | Path) -> SensorModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SensorError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return model_from_dict(data)


@dataclass(eq=False)
class Scan:
    """Measured (or simulated) ranges, one per model ray; NaN marks no return."""

    model: SensorModel
    sensor_pose: RigidTransform
    ranges: np.ndarray

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64).reshape(self.model.shape)

    @property
    def flat_ranges(self) -> np.ndarray:
        return self.ranges.reshape(-1)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.flat_ranges)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def directions_world(self) -> np.ndarray:
        return self.sensor_pose.rotate(self.model.directions())

    def points(self) -> np.ndarray:
        """Measured points in the map frame, NaN rows for invalid rays."""
        return self.sensor_pose.t + self.flat_ranges[:, None] * self.directions_world()

    def with_pose(self, pose: RigidTransform) -> "Scan":
        return Scan(self.model, pose, self.ranges.copy())


@dataclass(eq=False)
class SimScan(Scan):
    """Simulated scan carrying the hit point, normal and instance of every return."""

    hit_points: np.ndarray = field(default=None)
    hit_normals: np.ndarray = field(default=None)
    hit_instance: np.ndarray = field(default=None)

    def as_scan(self) -> Scan:
        return Scan(self.model, self.sensor_pose, self.ranges.copy())


def simulate_scan(
    graph: SceneGraph,
    model: SensorModel,
    sensor_pose: RigidTransform,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> SimScan:
    """Cast every model ray into the scene from ``sensor_pose`` (sensor -> map)."""
    dirs = sensor_pose.rotate(model.directions())
    origins = np.broadcast_to(sensor_pose.t, dirs.shape)
    res = graph.cast(origins, dirs, 0.0, model.max_range, threads=threads)
    ranges = res.range.copy()
    if noise_sigma > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        hit = np.isfinite(ranges)
        ranges[hit] += rng.normal(scale=noise_sigma, size=int(hit.sum()))
    valid = np.isfinite(ranges) & (ranges >= model.min_range) & (ranges <= model.max_range)
    ranges[~valid] = INVALID
    points = np.where(valid[:, None], res.point, np.nan)
    normals = np.where(valid[:, None], res.normal, np.nan)
    instance = np.where(valid, res.instance, -1)
    return SimScan(model, sensor_pose, ranges, hit_points=points, hit_normals=normals, hit_instance=instance)


# -- scan files ---------------------------------------------------------------


def write_scan(path: str | Path, scan: Scan) -> None:
    """Binary scan: magic, model type and dims, pose (7 doubles), model
    parameters, then little-endian float32 ranges in row-major order."""
    model = scan.model
    rows, cols = model.shape
    head = bytearray(SCAN_MAGIC)
    if isinstance(model, PinholeModel):
        head += struct.pack("<BII", 0, rows, cols)
        head += struct.pack("<7d", *scan.sensor_pose.to_list())
        head += struct.pack("<6d", model.fx, model.fy, model.cx, model.cy, model.min_range, model.max_range)
    else:
        head += struct.pack("<BII", 1, rows, cols)
        head += struct.pack("<7d", *scan.sensor_pose.to_list())
        head += struct.pack("<4d", model.h_start, model.h_step, model.min_range, model.max_range)
        head += struct.pack(f"<{rows}d", *model.v_angles)
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        fh.write(scan.flat_ranges.astype("<f4").tobytes())


def read_scan(path: str | Path) -> Scan:
    data = Path(path).read_bytes()
    if not data.startswith(SCAN_MAGIC):
        raise SensorError(f"{path}: not an SGSCAN1 file")
    off = len(SCAN_MAGIC)
    try:
        kind, rows, cols = struct.unpack_from("<BII", data, off)
        off += 9
        pose = RigidTransform.from_list(struct.unpack_from("<7d", data, off))
        off += 56
        if kind == 0:
            fx, fy, cx, cy, lo, hi = struct.unpack_from("<6d", data, off)
            off += 48
            model: SensorModel = PinholeModel(cols, rows, fx, fy, cx, cy, lo, hi)
        elif kind == 1:
            h_start, h_step, lo, hi = struct.unpack_from("<4d", data, off)
            off += 32
            v_angles = struct.unpack_from(f"<{rows}d", data, off)
            off += 8 * rows
            model = SphericalModel(cols, h_start, h_step, v_angles, lo, hi)
        else:
            raise SensorError(f"{path}: unknown model type {kind}")
    except struct.error as exc:
        raise SensorError(f"{path}: truncated header ({exc})") from None
    n = rows * cols
    if len(data) - off != 4 * n:
        raise SensorError(f"{path}: expected {n} ranges, found {(len(data) - off) // 4}")
    ranges = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
    return Scan(model, pose, ranges)


def write_scan_csv(path: str | Path, scan: Scan) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ray_index,range\n")
        for i, r in enumerate(scan.flat_ranges.tolist()):
            fh.write(f"{i},{r!r}\n" if np.isfinite(r) else f"{i},nan\n")

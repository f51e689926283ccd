"""Rays, hits, per-mesh BVHs and the packed two-level structure used for casting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .mesh import DEGENERATE_AREA, TriangleMesh

LEAF_SIZE = 4
BOX_PAD = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __init__(self, origin: Sequence[float], direction: Sequence[float], normalize: bool = True):
        o = np.asarray(origin, dtype=np.float64).reshape(3)
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("ray direction must be a finite non-zero vector")
        if normalize:
            d = d / n
        elif abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction has norm {n}, expected 1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, distance: float) -> np.ndarray:
        return self.origin + distance * self.direction


@dataclass(frozen=True)
class Hit:
    range: float
    point: np.ndarray
    normal: np.ndarray
    face_id: int


def _prepare_triangles(mesh: TriangleMesh):
    tri = mesh.triangles()
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    cross = np.cross(e1, e2)
    area2 = np.linalg.norm(cross, axis=1)
    valid = 0.5 * area2 > DEGENERATE_AREA
    if mesh.face_normals is not None:
        normal = np.array(mesh.face_normals)
    else:
        normal = np.zeros_like(cross)
        normal[valid] = cross[valid] / area2[valid, None]
    return v0, e1, e2, np.ascontiguousarray(normal), valid


def ray_triangle_intersect(ray: Ray, v0, v1, v2, min_range: float = 0.0, max_range: float = np.inf) -> Optional[Hit]:
    """Two-sided Möller–Trumbore test of one ray against one triangle."""
    mesh = TriangleMesh(np.array([v0, v1, v2], dtype=np.float64), np.array([[0, 1, 2]]))
    a, e1, e2, normal, valid = _prepare_triangles(mesh)
    if not valid[0]:
        return None
    t = _kernels.intersect_single(ray.origin, ray.direction, a, e1, e2)
    if not np.isfinite(t) or t < min_range or t > max_range:
        return None
    return Hit(range=float(t), point=ray.at(t), normal=normal[0], face_id=0)


@dataclass(eq=False)
class AccelStructure:
    """BVH over one mesh. Immutable after :func:`build_accel`.

    Triangle arrays are stored in leaf order; ``tri_face`` maps back to the
    mesh face index.
    """

    mesh: TriangleMesh
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    tri_normal: np.ndarray
    tri_valid: np.ndarray
    tri_face: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_lo)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.node_count))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.node_lo[0].copy(), self.node_hi[0].copy()

    def ray_cast(self, ray: Ray, max_range: float = np.inf, min_range: float = 0.0) -> Optional[Hit]:
        t, face, normal = self.cast(ray.origin[None], ray.direction[None], max_range, min_range)
        if face[0] < 0:
            return None
        return Hit(range=float(t[0]), point=ray.at(t[0]), normal=normal[0], face_id=int(face[0]))

    def cast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = np.inf, min_range: float = 0.0):
        """Batch closest hit in the mesh frame: (ranges, face ids, normals)."""
        packed = PackedScene.single(self)
        t, slot, face, normal = packed.cast(origins, dirs, min_range, max_range)
        return t, face, normal

    def brute_force(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = np.inf, min_range: float = 0.0):
        """Exhaustive intersection over all faces in id order (reference path)."""
        v0, e1, e2, _, valid = _prepare_triangles(self.mesh)
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        out_t = np.empty(len(origins))
        out_f = np.empty(len(origins), dtype=np.int64)
        _kernels.brute_force_cast(origins, dirs, float(min_range), float(max_range), v0, e1, e2, valid, out_t, out_f)
        return out_t, out_f

    def leaves(self):
        """Yield (lo, hi, face ids) for every leaf node."""
        for node in np.flatnonzero(self.node_count):
            s, c = self.node_start[node], self.node_count[node]
            yield self.node_lo[node], self.node_hi[node], self.tri_face[s:s + c]


def build_accel(mesh: TriangleMesh) -> AccelStructure:
    """Deterministic median-split BVH with at most ``LEAF_SIZE`` faces per leaf."""
    if mesh.n_faces == 0:
        raise ValueError("cannot build an acceleration structure for an empty mesh")
    tri = mesh.triangles()
    lo = np.ascontiguousarray(tri.min(axis=1))
    hi = np.ascontiguousarray(tri.max(axis=1))
    node_lo, node_hi, left, right, start, count, order = _kernels.build_bvh(lo, hi, LEAF_SIZE, BOX_PAD)
    v0, e1, e2, normal, valid = _prepare_triangles(mesh)
    arrays = [np.ascontiguousarray(a[order]) for a in (v0, e1, e2, normal, valid)]
    return AccelStructure(mesh, node_lo, node_hi, left, right, start, count, *arrays, tri_face=order.copy())


def transformed_box(lo: np.ndarray, hi: np.ndarray, rotation: np.ndarray, translation: np.ndarray):
    """World AABB of a local box under ``p -> R p + t``."""
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    c = rotation @ center + translation
    h = np.abs(rotation) @ half
    return c - h, c + h


class PackedScene:
    """Flat arrays for the compiled two-level traversal.

    Mesh-level BVHs are concatenated once per asset set; the top level (one
    box per instance) is rebuilt whenever a pose changes.
    """

    def __init__(self, accels: list[AccelStructure]):
        self.accels = accels
        node_off = np.cumsum([0] + [a.n_nodes for a in accels])
        prim_off = np.cumsum([0] + [len(a.tri_face) for a in accels])
        self.roots = node_off[:-1].astype(np.int64)

        def shift(links, off):
            out = links.copy()
            out[out >= 0] += off
            return out

        self.node_lo = np.concatenate([a.node_lo for a in accels])
        self.node_hi = np.concatenate([a.node_hi for a in accels])
        self.node_left = np.concatenate([shift(a.node_left, o) for a, o in zip(accels, node_off)])
        self.node_right = np.concatenate([shift(a.node_right, o) for a, o in zip(accels, node_off)])
        self.node_start = np.concatenate([a.node_start + o for a, o in zip(accels, prim_off)])
        self.node_count = np.concatenate([a.node_count for a in accels])
        self.v0 = np.concatenate([a.v0 for a in accels])
        self.e1 = np.concatenate([a.e1 for a in accels])
        self.e2 = np.concatenate([a.e2 for a in accels])
        self.tri_normal = np.concatenate([a.tri_normal for a in accels])
        self.tri_valid = np.concatenate([a.tri_valid for a in accels])
        self.tri_face = np.concatenate([a.tri_face for a in accels])
        self.set_instances(np.zeros(0, dtype=np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def single(cls, accel: AccelStructure) -> "PackedScene":
        packed = accel.__dict__.get("_packed")
        if packed is None:
            packed = cls([accel])
            packed.set_instances(np.array([0]), np.eye(3)[None], np.zeros((1, 3)), np.array([0]))
            accel.__dict__["_packed"] = packed
        return packed

    def set_instances(self, asset_index, rotations, translations, keys, enabled=None) -> None:
        """Install instance transforms (local -> world) and rebuild the top level."""
        n = len(asset_index)
        self.inst_asset = np.asarray(asset_index, dtype=np.int64)
        self.inst_rot = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 3, 3)
        self.inst_trans = np.ascontiguousarray(translations, dtype=np.float64).reshape(n, 3)
        self.inst_key = np.asarray(keys, dtype=np.int64)
        self.inst_root = self.roots[self.inst_asset] if n else np.zeros(0, dtype=np.int64)
        self.inst_enabled = np.ones(n, dtype=np.bool_) if enabled is None else np.asarray(enabled, dtype=np.bool_)
        lo = np.empty((n, 3))
        hi = np.empty((n, 3))
        for i in range(n):
            a = self.accels[self.inst_asset[i]]
            lo[i], hi[i] = transformed_box(a.node_lo[0], a.node_hi[0], self.inst_rot[i], self.inst_trans[i])
        self.inst_lo, self.inst_hi = lo, hi
        if n:
            (self.top_lo, self.top_hi, self.top_left, self.top_right,
             self.top_start, self.top_count, self.top_order) = _kernels.build_bvh(lo, hi, 1, BOX_PAD)
        else:
            # a single empty box that no ray can enter
            self.top_lo = np.full((1, 3), np.inf)
            self.top_hi = np.full((1, 3), -np.inf)
            self.top_left = np.full(1, -1, dtype=np.int64)
            self.top_right = np.full(1, -1, dtype=np.int64)
            self.top_start = np.zeros(1, dtype=np.int64)
            self.top_count = np.zeros(1, dtype=np.int64)
            self.top_order = np.zeros(0, dtype=np.int64)

    def cast(self, origins, dirs, min_range: float = 0.0, max_range: float = np.inf, threads: int = 1):
        """Closest hits: (range, instance slot, face id, world normal); misses are (inf, -1, -1, nan)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        out_t = np.empty(n)
        out_slot = np.empty(n, dtype=np.int64)
        out_face = np.empty(n, dtype=np.int64)
        out_normal = np.empty((n, 3))
        if n == 0 or len(self.inst_key) == 0:
            out_t[:] = np.inf
            out_slot[:] = -1
            out_face[:] = -1
            out_normal[:] = np.nan
            return out_t, out_slot, out_face, out_normal

        def run(s: slice) -> None:
            _kernels.cast_rays(
                origins[s], dirs[s], float(min_range), float(max_range),
                self.top_lo, self.top_hi, self.top_left, self.top_right,
                self.top_start, self.top_count, self.top_order,
                self.inst_rot, self.inst_trans, self.inst_root, self.inst_key, self.inst_enabled,
                self.node_lo, self.node_hi, self.node_left, self.node_right,
                self.node_start, self.node_count,
                self.v0, self.e1, self.e2, self.tri_normal, self.tri_valid, self.tri_face,
                out_t[s], out_slot[s], out_face[s], out_normal[s],
            )

        if threads <= 1 or n < 4096:
            run(slice(0, n))
        else:
            bounds = np.linspace(0, n, threads + 1).astype(int)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
        return out_t, out_slot, out_face, out_normal


def ray_cast(accel: AccelStructure, ray: Ray, max_range: float = np.inf) -> Optional[Hit]:
    if max_range <= 0.0:
        raise ValueError("max_range must be positive")
    return accel.ray_cast(ray, max_range)

"""Geometric scene graph: posed mesh instances sharing one ray-castable structure.

Static instances (the map) and dynamic instances (tracked objects) live in
the same graph. Each instance stores its pose relative to its parent; the
map root is ``None``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .geometry.accel import AccelStructure, Hit, PackedScene, Ray, build_accel
from .geometry.mesh import TriangleMesh, builtin_mesh, load_mesh, save_mesh
from .geometry.transform import RigidTransform

InstanceId = int
ROOT = None


class SceneError(ValueError):
    """Invalid scene operation (unknown id, cycle, malformed scene file)."""


class InstanceKind(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class Instance:
    id: InstanceId
    accel: AccelStructure
    pose: RigidTransform
    label: str
    kind: InstanceKind
    parent: Optional[InstanceId] = ROOT

    @property
    def mesh(self) -> TriangleMesh:
        return self.accel.mesh


@dataclass(frozen=True)
class SceneHit(Hit):
    instance: InstanceId = -1


@dataclass
class CastResult:
    """Per-ray batch output; misses have ``range = inf`` and ``instance = -1``."""

    range: np.ndarray
    instance: np.ndarray
    face: np.ndarray
    point: np.ndarray
    normal: np.ndarray


MeshRef = Union[TriangleMesh, AccelStructure]


class SceneGraph:
    def __init__(self):
        self._instances: dict[InstanceId, Instance] = {}
        self._next_id = 0
        self._accels: dict[int, AccelStructure] = {}
        self._packed: Optional[PackedScene] = None
        self._packed_assets: list[AccelStructure] = []
        self._top_dirty = True
        self._world_cache: dict[InstanceId, RigidTransform] = {}

    # -- membership ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._instances)

    def __contains__(self, instance_id: InstanceId) -> bool:
        return instance_id in self._instances

    def __iter__(self):
        return iter(self.ids())

    def ids(self, kind: Optional[InstanceKind | str] = None) -> list[InstanceId]:
        if kind is None:
            return sorted(self._instances)
        kind = InstanceKind(kind)
        return sorted(i for i, inst in self._instances.items() if inst.kind is kind)

    def instance(self, instance_id: InstanceId) -> Instance:
        try:
            return self._instances[instance_id]
        except KeyError:
            raise SceneError(f"unknown instance id {instance_id}") from None

    def find(self, label: str) -> list[InstanceId]:
        return [i for i in self.ids() if self._instances[i].label == label]

    def accel_for(self, mesh: MeshRef) -> AccelStructure:
        """One BVH per mesh asset, shared by every instance using it."""
        if isinstance(mesh, AccelStructure):
            self._accels.setdefault(id(mesh.mesh), mesh)
            return self._accels[id(mesh.mesh)]
        accel = self._accels.get(id(mesh))
        if accel is None:
            accel = build_accel(mesh)
            self._accels[id(mesh)] = accel
        return accel

    def add_instance(
        self,
        mesh: MeshRef,
        pose: Optional[RigidTransform] = None,
        label: str = "",
        kind: InstanceKind | str = InstanceKind.DYNAMIC,
        parent: Optional[InstanceId] = ROOT,
    ) -> InstanceId:
        if parent is not ROOT:
            self.instance(parent)
        accel = self.accel_for(mesh)
        iid = self._next_id
        self._next_id += 1
        self._instances[iid] = Instance(
            iid, accel, pose if pose is not None else RigidTransform.identity(), label, InstanceKind(kind), parent
        )
        self._invalidate()
        return iid

    def remove_instance(self, instance_id: InstanceId) -> None:
        """Remove an instance; its children move to its parent, world poses kept."""
        inst = self.instance(instance_id)
        for child in [c for c in self._instances.values() if c.parent == instance_id]:
            self.reparent(child.id, inst.parent)
        del self._instances[instance_id]
        self._invalidate()

    # -- poses --------------------------------------------------------------

    def _invalidate(self) -> None:
        self._top_dirty = True
        self._world_cache.clear()

    def set_instance_pose(self, instance_id: InstanceId, pose: RigidTransform) -> None:
        """Set the pose relative to the instance's parent."""
        self.instance(instance_id).pose = pose
        self._invalidate()

    def set_world_pose(self, instance_id: InstanceId, pose: RigidTransform) -> None:
        inst = self.instance(instance_id)
        if inst.parent is ROOT:
            inst.pose = pose
        else:
            inst.pose = self.world_pose(inst.parent).inverse() @ pose
        self._invalidate()

    def world_pose(self, instance_id: InstanceId) -> RigidTransform:
        cached = self._world_cache.get(instance_id)
        if cached is not None:
            return cached
        inst = self.instance(instance_id)
        if inst.parent is ROOT:
            world = inst.pose
        else:
            world = self.world_pose(inst.parent) @ inst.pose
        self._world_cache[instance_id] = world
        return world

    def ancestors(self, instance_id: InstanceId) -> list[InstanceId]:
        chain = []
        node = self.instance(instance_id).parent
        while node is not ROOT:
            chain.append(node)
            node = self._instances[node].parent
        return chain

    def reparent(self, child: InstanceId, new_parent: Optional[InstanceId]) -> None:
        """Attach ``child`` to ``new_parent`` keeping its world pose.

        The stored pose becomes ``world(new_parent)^-1 ∘ world(child)``.
        """
        inst = self.instance(child)
        if new_parent is not ROOT:
            self.instance(new_parent)
            if new_parent == child or child in self.ancestors(new_parent):
                raise SceneError(f"reparenting {child} under {new_parent} would create a cycle")
        if new_parent == inst.parent:
            return
        world = self.world_pose(child)
        inst.pose = world if new_parent is ROOT else self.world_pose(new_parent).inverse() @ world
        inst.parent = new_parent
        self._invalidate()

    # -- ray casting ----------------------------------------------------------

    def _packed_scene(self) -> Optional[PackedScene]:
        if not self._instances:
            return None
        assets = []
        seen = set()
        for iid in self.ids():
            a = self._instances[iid].accel
            if id(a) not in seen:
                seen.add(id(a))
                assets.append(a)
        if self._packed is None or [id(a) for a in assets] != [id(a) for a in self._packed_assets]:
            self._packed = PackedScene(assets)
            self._packed_assets = assets
            self._top_dirty = True
        if self._top_dirty:
            index = {id(a): k for k, a in enumerate(assets)}
            ids = self.ids()
            poses = [self.world_pose(i) for i in ids]
            self._packed.set_instances(
                [index[id(self._instances[i].accel)] for i in ids],
                np.array([p.rotation for p in poses]),
                np.array([p.t for p in poses]),
                ids,
            )
            self._top_dirty = False
        return self._packed

    def cast(
        self, origins: np.ndarray, dirs: np.ndarray, min_range: float = 0.0, max_range: float = np.inf, threads: int = 1
    ) -> CastResult:
        """Closest hit per ray (map frame) across all instances."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        packed = self._packed_scene()
        n = len(origins)
        if packed is None:
            return CastResult(
                np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.full(n, -1, dtype=np.int64),
                np.full((n, 3), np.nan), np.full((n, 3), np.nan),
            )
        t, slot, face, normal = packed.cast(origins, dirs, min_range, max_range, threads=threads)
        hit = slot >= 0
        instance = np.full(n, -1, dtype=np.int64)
        instance[hit] = packed.inst_key[slot[hit]]
        point = np.full((n, 3), np.nan)
        point[hit] = origins[hit] + t[hit, None] * dirs[hit]
        return CastResult(t, instance, face, point, normal)

    def scene_ray_cast(self, ray: Ray, max_range: float = np.inf, min_range: float = 0.0) -> Optional[SceneHit]:
        res = self.cast(ray.origin[None], ray.direction[None], min_range, max_range)
        if res.instance[0] < 0:
            return None
        return SceneHit(
            range=float(res.range[0]),
            point=res.point[0],
            normal=res.normal[0],
            face_id=int(res.face[0]),
            instance=int(res.instance[0]),
        )

    # -- copies & serialization ------------------------------------------------

    def copy(self) -> "SceneGraph":
        """Shallow copy sharing mesh assets; poses and hierarchy are independent."""
        other = SceneGraph()
        other._next_id = self._next_id
        other._accels = dict(self._accels)
        for iid, inst in self._instances.items():
            other._instances[iid] = Instance(inst.id, inst.accel, inst.pose, inst.label, inst.kind, inst.parent)
        return other

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        packed = self._packed_scene()
        if packed is None:
            raise SceneError("empty scene has no bounds")
        return packed.inst_lo.min(axis=0), packed.inst_hi.max(axis=0)

    def to_dict(self, mesh_dir: Optional[Path] = None, base_dir: Optional[Path] = None) -> list[dict]:
        entries = []
        written: dict[int, str] = {}
        for iid in self.ids():
            inst = self._instances[iid]
            ref = written.get(id(inst.mesh))
            if ref is None:
                ref = inst.mesh.source
                if ref is None:
                    if mesh_dir is None:
                        raise SceneError(f"instance {iid} uses an in-memory mesh; pass mesh_dir to write it")
                    mesh_dir.mkdir(parents=True, exist_ok=True)
                    path = mesh_dir / f"mesh_{len(written)}_{inst.mesh.name or 'asset'}.ply"
                    save_mesh(inst.mesh, path)
                    inst.mesh.source = str(path)
                    ref = str(path)
                if base_dir is not None and not ref.startswith("builtin:"):
                    try:
                        ref = str(Path(ref).resolve().relative_to(base_dir.resolve()))
                    except ValueError:
                        pass
                written[id(inst.mesh)] = ref
            entry = {
                "mesh": ref,
                "label": inst.label,
                "kind": inst.kind.value,
                "pose": {"t": [float(x) for x in inst.pose.t], "q": [float(x) for x in inst.pose.q]},
            }
            if inst.parent is not ROOT:
                parent_label = self._instances[inst.parent].label
                if len(self.find(parent_label)) != 1:
                    raise SceneError(f"parent label {parent_label!r} of instance {iid} is not unique")
                entry["parent"] = parent_label
            entries.append(entry)
        return entries

    def save(self, path: str | Path) -> None:
        path = Path(path)
        entries = self.to_dict(mesh_dir=path.parent / (path.stem + "_meshes"), base_dir=path.parent)
        path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, entries: Iterable[dict], base_dir: Optional[Path] = None) -> "SceneGraph":
        graph = cls()
        meshes: dict[str, TriangleMesh] = {}
        parents: list[tuple[InstanceId, str]] = []
        for k, entry in enumerate(entries):
            try:
                ref = entry["mesh"]
                pose = entry.get("pose", {})
                t = pose.get("t", [0.0, 0.0, 0.0])
                q = pose.get("q", [1.0, 0.0, 0.0, 0.0])
                label = entry.get("label", "")
                kind = entry.get("kind", "dynamic")
            except (KeyError, AttributeError, TypeError) as exc:
                raise SceneError(f"scene entry {k}: missing or malformed field ({exc})") from None
            if len(t) != 3 or len(q) != 4:
                raise SceneError(f"scene entry {k}: pose.t needs 3 values and pose.q needs 4")
            if kind not in ("static", "dynamic"):
                raise SceneError(f"scene entry {k}: kind must be 'static' or 'dynamic', got {kind!r}")
            mesh = meshes.get(ref)
            if mesh is None:
                if ref.startswith("builtin:"):
                    mesh = builtin_mesh(ref)
                else:
                    p = Path(ref)
                    if not p.is_absolute() and base_dir is not None:
                        p = base_dir / p
                    mesh = load_mesh(p)
                    mesh.source = ref
                meshes[ref] = mesh
            iid = graph.add_instance(mesh, RigidTransform(q=q, t=t), label, kind)
            if entry.get("parent") is not None:
                parents.append((iid, entry["parent"]))
        for iid, parent_label in parents:
            matches = graph.find(parent_label)
            if len(matches) != 1:
                raise SceneError(f"parent label {parent_label!r} matches {len(matches)} instances")
            if matches[0] == iid or iid in graph.ancestors(matches[0]):
                raise SceneError(f"parent link {parent_label!r} creates a cycle")
            # stored poses are already parent-relative
            graph._instances[iid].parent = matches[0]
        graph._invalidate()
        return graph

    @classmethod
    def load(cls, path: str | Path) -> "SceneGraph":
        path = Path(path)
        try:
            entries = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(entries, list):
            raise SceneError(f"{path}: scene file must contain a JSON list of instances")
        return cls.from_dict(entries, base_dir=path.parent)

"""Deterministic synthetic scenes used by the tests, the benchmark and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry.mesh import TABLE_I_OBJECTS, builtin_mesh, subdivided_box_mesh, table_i_mesh
from .geometry.transform import RigidTransform
from .scene import InstanceId, SceneGraph

# tabletop slots in front of a camera at the origin looking along +z
TABLETOP_SLOTS = (
    (-0.30, -0.12, 0.90),
    (0.00, -0.12, 0.90),
    (0.30, -0.12, 0.90),
    (-0.15, 0.16, 0.95),
    (0.15, 0.16, 0.90),
)

# static furniture inside the default room: (center, size)
ROOM_FURNITURE = (
    ((2.2, 1.4, 0.4), (0.8, 0.6, 0.8)),
    ((-2.3, -1.2, 0.5), (0.6, 1.0, 1.0)),
    ((1.5, -1.5, 0.25), (1.2, 0.5, 0.5)),
)


@dataclass
class TrackingFixture:
    truth: SceneGraph
    estimate: SceneGraph
    truth_poses: dict[InstanceId, RigidTransform]
    sensor_pose: RigidTransform


def perturb(pose: RigidTransform, rng: np.random.Generator, max_offset: float, max_angle_deg: float) -> RigidTransform:
    """Rotate about the object center by up to ``max_angle_deg`` and shift by up to
    ``max_offset`` in a uniformly random direction."""
    axis = rng.normal(size=3)
    rot = RigidTransform.from_axis_angle(axis, np.radians(rng.uniform(0.0, max_angle_deg)))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return RigidTransform((rot @ RigidTransform(pose.q)).q, pose.t + d * rng.uniform(0.0, max_offset))


def tabletop_fixture(seed: int, max_offset: float = 0.03, max_angle_deg: float = 5.0) -> TrackingFixture:
    """The five listed objects at random orientations; the estimate is perturbed."""
    rng = np.random.default_rng(seed)
    truth, est = SceneGraph(), SceneGraph()
    poses = {}
    for name, slot in zip(TABLE_I_OBJECTS, TABLETOP_SLOTS):
        mesh = table_i_mesh(name)
        pose = RigidTransform(RigidTransform.random(rng).q, slot)
        iid = truth.add_instance(mesh, pose, name)
        est.add_instance(mesh, perturb(pose, rng, max_offset, max_angle_deg), name)
        poses[iid] = pose
    return TrackingFixture(truth, est, poses, RigidTransform.identity())


def facing(local_dir, position, roll: float = 0.0) -> RigidTransform:
    """Object at ``position`` turned so that ``local_dir`` points at a camera in
    the origin, then rolled by ``roll`` radians about the line of sight."""
    a = np.asarray(local_dir, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = -np.asarray(position, dtype=np.float64)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    angle = np.arctan2(np.linalg.norm(axis), a @ b)
    align = RigidTransform.from_axis_angle(axis, angle) if np.linalg.norm(axis) > 1e-12 else RigidTransform()
    return RigidTransform(
        (RigidTransform.from_axis_angle(b, roll) @ align).q, np.asarray(position, dtype=np.float64)
    )


# lateral shift of the front box that hides 40% of the back box from the camera
OCCLUDER_SHIFT = 0.0872


def occlusion_fixture(seed: int, offset: float = 0.02) -> TrackingFixture:
    """A box partly hidden behind a smaller one; both estimates shifted by ``offset``."""
    rng = np.random.default_rng(seed)
    back = subdivided_box_mesh((0.24, 0.18, 0.12), 6)
    front = subdivided_box_mesh((0.12, 0.2, 0.1), 6)
    # corner-on views: every visible face is seen at roughly 55 degrees incidence
    poses = [facing((1.0, 1.0, 1.0), (0.0, 0.0, 1.0), 0.3), facing((-1.0, 1.0, 1.0), (OCCLUDER_SHIFT, 0.0, 0.75), -0.4)]
    truth, est = SceneGraph(), SceneGraph()
    out = {}
    for mesh, pose, label in zip((back, front), poses, ("back", "front")):
        iid = truth.add_instance(mesh, pose, label)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        est.add_instance(mesh, RigidTransform(pose.q, pose.t + offset * d), label)
        out[iid] = pose
    return TrackingFixture(truth, est, out, RigidTransform.identity())


def builtin_box(size):
    return builtin_mesh("builtin:box:" + "x".join(repr(float(s)) for s in size))


def room_scene(furniture: bool = True) -> SceneGraph:
    """6 x 4 x 2.5 m closed room, floor at z = 0, with optional static furniture."""
    g = SceneGraph()
    g.add_instance(builtin_mesh("builtin:room:6.0x4.0x2.5"), label="room", kind="static")
    if furniture:
        for k, (center, size) in enumerate(ROOM_FURNITURE):
            g.add_instance(builtin_box(size), RigidTransform(t=center), label=f"furniture{k}", kind="static")
    return g


def room_sensor_pose(rng: np.random.Generator) -> RigidTransform:
    """Random LiDAR pose low enough for the floor to be in view."""
    rotvec = rng.normal(size=3) * np.array([0.05, 0.05, 1.0])
    t = (rng.uniform(-1.0, 1.0), rng.uniform(-0.8, 0.8), rng.uniform(0.3, 0.6))
    return RigidTransform.from_rotvec(rotvec, t)


def unknown_box_fixture() -> tuple[SceneGraph, SceneGraph, InstanceId]:
    """(map, world, id of the unknown box in world): the world adds one box the map lacks."""
    known = room_scene()
    world = known.copy()
    box = world.add_instance(builtin_box((0.5, 0.4, 0.6)), RigidTransform(t=(1.2, 0.3, 0.3)), label="unknown", kind="static")
    return known, world, box


def stack_fixture(levels: int = 3) -> tuple[SceneGraph, list[InstanceId]]:
    """Unit cubes stacked along z, bottom first."""
    g = SceneGraph()
    cube = builtin_box((1.0, 1.0, 1.0))
    ids = [g.add_instance(cube, RigidTransform.from_translation(0, 0, float(k)), f"cube{k}") for k in range(levels)]
    return g, ids


def side_fixture() -> tuple[SceneGraph, InstanceId, InstanceId]:
    """Cube A beside cube B on B's +y side (A is left of B)."""
    g = SceneGraph()
    cube = builtin_box((1.0, 1.0, 1.0))
    b = g.add_instance(cube, RigidTransform.identity(), "B")
    a = g.add_instance(cube, RigidTransform.from_translation(0, 1.2, 0), "A")
    return g, a, b


def grid_scene(n_instances: int, seed: int = 0, spacing: float = 0.4) -> SceneGraph:
    """``n_instances`` listed objects on a square grid in the z = 1 plane."""
    rng = np.random.default_rng(seed)
    names = list(TABLE_I_OBJECTS)
    side = int(np.ceil(np.sqrt(n_instances)))
    g = SceneGraph()
    for k in range(n_instances):
        r, c = divmod(k, side)
        t = ((c - (side - 1) / 2) * spacing, (r - (side - 1) / 2) * spacing, 1.0)
        g.add_instance(table_i_mesh(names[k % len(names)]), RigidTransform(RigidTransform.random(rng).q, t), f"obj{k}")
    return g

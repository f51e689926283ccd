"""Qualitative spatial relations on oriented bounding boxes.

Every instance is abstracted by its OBB. A directional relation ``rel(a, b)``
holds when ``a``'s box overlaps the projection region extruded from the
matching face of ``b``'s box, in ``b``'s local frame (x forward, y left,
z up).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from itertools import permutations

import numpy as np

from .geometry.transform import RigidTransform
from .scene import InstanceId, InstanceKind, SceneError, SceneGraph

DEFAULT_DEPTH = 2.0
CONTACT_TOLERANCE = 0.02


class Relation(str, Enum):
    ON = "on"
    ABOVE = "above"
    BELOW = "below"
    LEFT_OF = "left_of"
    RIGHT_OF = "right_of"
    IN_FRONT_OF = "in_front_of"
    BEHIND = "behind"

    @classmethod
    def parse(cls, name: str) -> "Relation":
        key = name.strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown relation {name!r}; valid: {valid}") from None


# local axis index and sign of each relation's extrusion
_DIRECTION = {
    Relation.ON: (2, 1.0),
    Relation.ABOVE: (2, 1.0),
    Relation.BELOW: (2, -1.0),
    Relation.LEFT_OF: (1, 1.0),
    Relation.RIGHT_OF: (1, -1.0),
    Relation.IN_FRONT_OF: (0, 1.0),
    Relation.BEHIND: (0, -1.0),
}


@dataclass(frozen=True, eq=False)
class OrientedBox:
    pose: RigidTransform  # box frame -> map, origin at the box center
    half_extents: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError(f"half_extents must be positive, got {h}")
        object.__setattr__(self, "half_extents", h)

    @property
    def center(self) -> np.ndarray:
        return self.pose.t

    @property
    def axes(self) -> np.ndarray:
        """Columns are the box axes in the map frame."""
        return self.pose.rotation

    def corners(self) -> np.ndarray:
        signs = np.array([[(i >> k) & 1 for k in range(3)] for i in range(8)]) * 2.0 - 1.0
        return self.pose.apply(signs * self.half_extents)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = self.pose.inverse().apply(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half_extents + margin, axis=1)

    def transformed(self, motion: RigidTransform) -> "OrientedBox":
        return OrientedBox(motion @ self.pose, self.half_extents)


def instance_obb(graph: SceneGraph, instance_id: InstanceId) -> OrientedBox:
    """Local axis-aligned mesh bounds carried by the instance's world pose."""
    inst = graph.instance(instance_id)
    lo, hi = inst.mesh.bounds()
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 1e-9)  # flat meshes still get a valid box
    world = graph.world_pose(instance_id)
    return OrientedBox(RigidTransform(world.q, world.apply(center)), half)


def projection_region(box: OrientedBox, relation: Relation | str, depth: float = DEFAULT_DEPTH) -> OrientedBox:
    """Box of length ``depth`` extruded outward from one face of ``box``."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    axis, sign = _DIRECTION[Relation(relation)]
    half = box.half_extents.copy()
    offset = np.zeros(3)
    offset[axis] = sign * (half[axis] + 0.5 * depth)
    half[axis] = 0.5 * depth
    return OrientedBox(RigidTransform(box.pose.q, box.pose.apply(offset)), half)


def obb_intersect(a: OrientedBox, b: OrientedBox, eps: float = 1e-12) -> bool:
    """Separating-axis test over the 15 candidate axes."""
    A, B = a.axes, b.axes
    R = A.T @ B
    t = A.T @ (b.center - a.center)
    ha, hb = a.half_extents, b.half_extents
    absR = np.abs(R) + eps
    for i in range(3):
        if abs(t[i]) > ha[i] + hb @ absR[i]:
            return False
    for j in range(3):
        if abs(t @ R[:, j]) > ha @ absR[:, j] + hb[j]:
            return False
    for i in range(3):
        for j in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            ra = ha[i1] * absR[i2, j] + ha[i2] * absR[i1, j]
            rb = hb[j1] * absR[i, j2] + hb[j2] * absR[i, j1]
            if abs(t[i2] * R[i1, j] - t[i1] * R[i2, j]) > ra + rb:
                return False
    return True


@dataclass
class RelationConfig:
    depth: float = DEFAULT_DEPTH
    contact_tolerance: float = CONTACT_TOLERANCE


def check_relation(
    graph: SceneGraph,
    subject: InstanceId,
    obj: InstanceId,
    relation: Relation | str,
    cfg: RelationConfig | None = None,
) -> bool:
    if subject == obj:
        raise SceneError("subject and object must be distinct instances")
    cfg = cfg or RelationConfig()
    relation = Relation(relation)
    sbox = instance_obb(graph, subject)
    obox = instance_obb(graph, obj)
    region = projection_region(obox, relation, cfg.depth)
    if not obb_intersect(sbox, region):
        return False
    if relation is Relation.ON:
        # lowest point of the subject along the object's up axis vs its top face
        up = obox.axes[:, 2]
        lowest = np.min(sbox.corners() @ up)
        top = obox.center @ up + obox.half_extents[2]
        return abs(lowest - top) <= cfg.contact_tolerance
    return True


def query_relations(
    graph: SceneGraph, relation: Relation | str, cfg: RelationConfig | None = None
) -> list[tuple[InstanceId, InstanceId]]:
    ids = graph.ids(InstanceKind.DYNAMIC)
    return [(a, b) for a, b in permutations(ids, 2) if check_relation(graph, a, b, relation, cfg)]


def relations_to_json(graph: SceneGraph, relation: Relation | str, pairs) -> str:
    relation = Relation(relation)
    rows = [
        {
            "relation": relation.value,
            "subject_label": graph.instance(a).label,
            "subject_id": a,
            "object_label": graph.instance(b).label,
            "object_id": b,
        }
        for a, b in pairs
    ]
    return json.dumps(rows, indent=2)

"""Transforms, triangle meshes, BVH construction and ray casting."""

from .accel import AccelStructure, Hit, PackedScene, Ray, build_accel, ray_cast, ray_triangle_intersect
from .mesh import (
    MeshFormatError,
    TriangleMesh,
    box_mesh,
    load_mesh,
    room_mesh,
    save_mesh,
    subdivided_box_mesh,
    table_i_mesh,
)
from .transform import RigidTransform, compose, invert, pose_error

__all__ = [
    "AccelStructure",
    "Hit",
    "MeshFormatError",
    "PackedScene",
    "Ray",
    "RigidTransform",
    "TriangleMesh",
    "box_mesh",
    "build_accel",
    "compose",
    "invert",
    "load_mesh",
    "pose_error",
    "ray_cast",
    "ray_triangle_intersect",
    "room_mesh",
    "save_mesh",
    "subdivided_box_mesh",
    "table_i_mesh",
]

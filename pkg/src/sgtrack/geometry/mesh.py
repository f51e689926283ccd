"""Indexed triangle meshes, ASCII PLY/OBJ loading and procedural test shapes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull

DEGENERATE_AREA = 1e-12


class MeshFormatError(ValueError):
    """Raised for unreadable or unsupported mesh files."""


@dataclass(eq=False)
class TriangleMesh:
    """Vertices (n, 3) in meters and faces (m, 3) of vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray
    face_normals: Optional[np.ndarray] = None
    name: str = ""
    source: Optional[str] = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            bad = int(np.flatnonzero((self.faces < 0).any(1) | (self.faces >= len(self.vertices)).any(1))[0])
            raise ValueError(f"face {bad} references a vertex outside [0, {len(self.vertices)})")
        if self.face_normals is not None:
            n = np.asarray(self.face_normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(self.faces):
                raise ValueError("face_normals must have one entry per face")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
                raise ValueError("face normals must have unit length")
            self.face_normals = n
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangles(self) -> np.ndarray:
        """Corner coordinates, shape (m, 3, 3)."""
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def geometric_normals(self) -> np.ndarray:
        """Unit normals from the winding order; NaN rows for degenerate faces."""
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return n / norm

    def normals(self) -> np.ndarray:
        return self.face_normals if self.face_normals is not None else self.geometric_normals()

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


# -- file I/O ----------------------------------------------------------------


def load_mesh(path: str | Path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        mesh = _load_ply(path)
    elif suffix == ".obj":
        mesh = _load_obj(path)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r} (use .ply or .obj)")
    mesh.name = path.stem
    mesh.source = str(path)
    return mesh


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{path}: missing 'ply' magic")
    n_vert = n_face = None
    vert_props: list[str] = []
    current = None
    i = 1
    while i < len(lines):
        tokens = lines[i].split()
        i += 1
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise MeshFormatError(f"{path}: only ASCII PLY is supported, got {tokens[1]}")
        elif tokens[0] == "element":
            current = tokens[1]
            if current == "vertex":
                n_vert = int(tokens[2])
            elif current == "face":
                n_face = int(tokens[2])
        elif tokens[0] == "property" and current == "vertex":
            vert_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            break
    if n_vert is None or n_face is None:
        raise MeshFormatError(f"{path}: header must declare vertex and face elements")
    try:
        xyz = [vert_props.index(c) for c in "xyz"]
    except ValueError:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z properties") from None
    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise MeshFormatError(f"{path}: expected {n_vert} vertices and {n_face} faces, file truncated")
    vertices = np.array([[float(v) for v in body[k].split()] for k in range(n_vert)]).reshape(-1, len(vert_props))
    faces = np.empty((n_face, 3), dtype=np.int64)
    for k in range(n_face):
        tokens = body[n_vert + k].split()
        if int(tokens[0]) != 3:
            raise MeshFormatError(f"{path}: face {k} has {tokens[0]} vertices; only triangles are supported")
        faces[k] = [int(x) for x in tokens[1:4]]
    return TriangleMesh(vertices[:, xyz], faces)


def _load_obj(path: Path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                vertices.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "f":
                if len(tokens) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: face {len(faces)} has {len(tokens) - 1} vertices; only triangles are supported"
                    )
                idx = []
                for tok in tokens[1:]:
                    j = int(tok.split("/")[0])
                    idx.append(j - 1 if j > 0 else len(vertices) + j)
                faces.append(idx)
    return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        with open(path, "w", encoding="utf-8") as fh:
            for v in mesh.vertices.tolist():
                fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\nproperty double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {mesh.n_faces}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices.tolist():
            fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# -- procedural shapes ---------------------------------------------------------


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with outward winding, 8 vertices and 12 faces."""
    h = 0.5 * np.asarray(size, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    signs = np.array([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)]) * 2 - 1
    vertices = c + signs * h
    faces = np.array(
        [
            [0, 2, 1], [1, 2, 3],  # -z
            [4, 5, 6], [5, 7, 6],  # +z
            [0, 1, 4], [1, 5, 4],  # -y
            [2, 6, 3], [3, 6, 7],  # +y
            [0, 4, 2], [2, 4, 6],  # -x
            [1, 3, 5], [3, 7, 5],  # +x
        ]
    )
    return TriangleMesh(vertices, faces, name="box")


def subdivided_box_mesh(size=(1.0, 1.0, 1.0), divisions: int = 8) -> TriangleMesh:
    """Box whose faces are tessellated into ``divisions``² quads each."""
    h = 0.5 * np.asarray(size, dtype=np.float64)
    verts: list[np.ndarray] = []
    faces: list[np.ndarray] = []
    g = np.linspace(-1.0, 1.0, divisions + 1)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    for axis in range(3):
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            p = np.zeros((divisions + 1, divisions + 1, 3))
            p[..., axis] = sign
            p[..., a1] = uu
            p[..., a2] = vv
            base = sum(len(v) for v in verts)
            verts.append((p * h).reshape(-1, 3))
            idx = np.arange((divisions + 1) ** 2).reshape(divisions + 1, divisions + 1) + base
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, d = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
            if sign > 0:
                faces.append(np.stack([a, b, d], 1))
                faces.append(np.stack([a, d, c], 1))
            else:
                faces.append(np.stack([a, d, b], 1))
                faces.append(np.stack([a, c, d], 1))
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), name="subdivided_box")


def _fibonacci_directions(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def superellipsoid_points(directions: np.ndarray, half_extents, exponent: float) -> np.ndarray:
    """Scale unit directions onto the surface |x/a|^p + |y/b|^p + |z/c|^p = 1."""
    a = np.asarray(half_extents, dtype=np.float64)
    s = np.sum(np.abs(directions / a) ** exponent, axis=1) ** (-1.0 / exponent)
    return directions * s[:, None]


def convex_blob_mesh(n_vertices: int, half_extents=(0.1, 0.05, 0.03), exponent: float = 4.0) -> TriangleMesh:
    """Closed, strictly convex superellipsoid hull with exactly ``n_vertices``.

    The hull of points on a strictly convex surface keeps all of them, so the
    face count is ``2 * n_vertices - 4``.
    """
    pts = superellipsoid_points(_fibonacci_directions(n_vertices), half_extents, exponent)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    # orient outward: normal must point away from the (interior) origin
    tri = pts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri[:, 0]) < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    if len(np.unique(faces)) != n_vertices:
        raise RuntimeError("hull dropped vertices; surface is not strictly convex")
    return TriangleMesh(pts, faces, name="blob")


def mesh_with_counts(n_faces: int, n_vertices: int, half_extents, exponent: float = 4.0) -> TriangleMesh:
    """Convex closed surface padded with interior triangles to exact counts.

    The outside appearance is the convex hull only. Each extra face joins one
    endpoint of a hull edge with the two vertices opposite that edge; it is a
    face of the tetrahedron spanned by the two adjacent hull triangles and
    therefore lies inside the hull, close to the surface.
    """
    base = convex_blob_mesh(n_vertices, half_extents, exponent)
    extra = n_faces - base.n_faces
    if extra < 0:
        raise ValueError(f"cannot reach {n_faces} faces with {n_vertices} vertices (hull alone has {base.n_faces})")
    # edge -> opposite vertex of each adjacent face
    opposite: dict[tuple[int, int], list[int]] = {}
    for f in base.faces.tolist():
        for k in range(3):
            a, b, c = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            opposite.setdefault((min(a, b), max(a, b)), []).append(c)
    inner = []
    for (a, b), opp in sorted(opposite.items()):
        if len(inner) == extra:
            break
        if len(opp) == 2:
            inner.append((a, opp[0], opp[1]))
    if len(inner) < extra:
        raise ValueError(f"cannot add {extra} interior faces to a hull of {n_vertices} vertices")
    faces = np.concatenate([base.faces, np.array(inner, dtype=np.int64).reshape(-1, 3)])
    return TriangleMesh(base.vertices, faces, name="padded_blob")


# Face and vertex counts of the tracked objects; half extents are nominal.
TABLE_I_OBJECTS = {
    "multimeter": {"faces": 100338, "vertices": 33446, "half_extents": (0.045, 0.09, 0.028)},
    "screwdriver": {"faces": 26682, "vertices": 8894, "half_extents": (0.10, 0.022, 0.015)},
    "materialbox": {"faces": 13617, "vertices": 4539, "half_extents": (0.12, 0.08, 0.05)},
    "klt3147": {"faces": 14124, "vertices": 4708, "half_extents": (0.15, 0.10, 0.075)},
    "relay": {"faces": 9312, "vertices": 3104, "half_extents": (0.045, 0.03, 0.02)},
}


@lru_cache(maxsize=None)
def table_i_mesh(name: str) -> TriangleMesh:
    """Stand-in mesh with the exact face/vertex counts of a listed object."""
    spec = TABLE_I_OBJECTS[name]
    mesh = mesh_with_counts(spec["faces"], spec["vertices"], spec["half_extents"], exponent=6.0)
    mesh.name = name
    mesh.source = f"builtin:{name}"
    return mesh


def room_mesh(size=(6.0, 4.0, 2.5), divisions: int = 4) -> TriangleMesh:
    """Closed box room with inward-facing walls; floor at z = 0."""
    box = subdivided_box_mesh(size, divisions)
    v = box.vertices + np.array([0.0, 0.0, 0.5 * size[2]])
    mesh = TriangleMesh(v, box.faces[:, [0, 2, 1]], name="room")
    return mesh


def random_triangle_soup(n_faces: int, rng: np.random.Generator, extent: float = 1.0, tri_size: float = 0.2) -> TriangleMesh:
    """Unindexed random triangles inside a cube of half-width ``extent``."""
    centers = rng.uniform(-extent, extent, size=(n_faces, 1, 3))
    tri = centers + rng.normal(scale=tri_size, size=(n_faces, 3, 3))
    return TriangleMesh(tri.reshape(-1, 3), np.arange(3 * n_faces).reshape(-1, 3), name="soup")


@lru_cache(maxsize=64)
def builtin_mesh(ref: str) -> TriangleMesh:
    """Procedural meshes addressable from scene files.

    ``builtin:box:WxHxD``, ``builtin:room:WxHxD`` or ``builtin:<object>`` for
    the stand-ins in :data:`TABLE_I_OBJECTS`.
    """
    parts = ref.split(":")
    if parts[0] != "builtin" or len(parts) < 2:
        raise MeshFormatError(f"not a builtin mesh reference: {ref!r}")
    kind = parts[1]
    dims = None
    if len(parts) > 2:
        try:
            dims = tuple(float(x) for x in parts[2].split("x"))
        except ValueError:
            raise MeshFormatError(f"{ref!r}: dimensions must look like 1x2x3") from None
        if len(dims) != 3:
            raise MeshFormatError(f"{ref!r}: expected three dimensions")
    if kind == "box":
        mesh = box_mesh(dims or (1.0, 1.0, 1.0))
    elif kind == "room":
        mesh = room_mesh(dims or (6.0, 4.0, 2.5))
    elif kind in TABLE_I_OBJECTS:
        mesh = table_i_mesh(kind)
    else:
        raise MeshFormatError(f"unknown builtin mesh {kind!r}")
    mesh.source = ref
    return mesh

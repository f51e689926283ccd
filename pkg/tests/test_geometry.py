import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import all_ranges, closest_hits, random_rays
from sgtrack.geometry import (
    MeshFormatError,
    Ray,
    RigidTransform,
    TriangleMesh,
    box_mesh,
    build_accel,
    compose,
    invert,
    load_mesh,
    pose_error,
    ray_cast,
    ray_triangle_intersect,
    save_mesh,
    table_i_mesh,
)
from sgtrack.geometry.mesh import TABLE_I_OBJECTS, random_triangle_soup

IDENTITY7 = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])

finite = st.floats(-5.0, 5.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
quat = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


@st.composite
def poses(draw):
    return RigidTransform(q=draw(quat), t=draw(vec3))


def as7(t: RigidTransform) -> np.ndarray:
    return np.array(t.to_list())


# -- transforms -----------------------------------------------------------------


def test_compose_identity_left():
    p = RigidTransform.from_rotvec([0.1, -0.2, 0.3], t=[1, 2, 3])
    assert compose(RigidTransform.identity(), p).allclose(p, atol=0)


def test_compose_translations_add():
    r = compose(RigidTransform.from_translation(1, 0, 0), RigidTransform.from_translation(0, 2, 0))
    np.testing.assert_allclose(r.t, [1, 2, 0], atol=0)
    np.testing.assert_allclose(r.q, [1, 0, 0, 0], atol=0)


def test_compose_rotations_about_z():
    rz90 = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2)
    rz180 = RigidTransform.from_axis_angle([0, 0, 1], np.pi)
    np.testing.assert_allclose(compose(rz90, rz90).rotation, rz180.rotation, atol=1e-12)


def test_compose_applies_right_operand_first():
    a = RigidTransform.from_rotvec([0, 0, np.pi / 2])
    b = RigidTransform.from_translation(1, 0, 0)
    p = np.array([0.0, 0.0, 0.0])
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-15)
    np.testing.assert_allclose(compose(a, b).apply(p), [0, 1, 0], atol=1e-15)


def test_invert_examples():
    assert invert(RigidTransform.identity()).allclose(RigidTransform.identity(), atol=0)
    np.testing.assert_allclose(invert(RigidTransform.from_translation(1, 2, 3)).t, [-1, -2, -3], atol=0)


def test_invert_random_poses(rng):
    for _ in range(1000):
        p = RigidTransform.random(rng, max_translation=10.0)
        np.testing.assert_allclose(as7(compose(invert(p), p)), IDENTITY7, atol=1e-9)
        np.testing.assert_allclose(as7(compose(p, invert(p))), IDENTITY7, atol=1e-9)


@given(poses())
def test_quaternion_unit_after_construction(p):
    assert abs(np.linalg.norm(p.q) - 1.0) <= 1e-9


@given(poses(), poses())
def test_quaternion_unit_after_composition(a, b):
    assert abs(np.linalg.norm((a @ b).q) - 1.0) <= 1e-9


@given(poses(), poses(), poses())
def test_compose_associative(a, b, c):
    np.testing.assert_allclose(as7((a @ b) @ c), as7(a @ (b @ c)), atol=1e-9)


@given(poses())
def test_invert_is_involution(p):
    np.testing.assert_allclose(as7(invert(invert(p))), as7(p), atol=1e-9)


@given(poses())
def test_compose_with_inverse_is_identity(p):
    np.testing.assert_allclose(as7(compose(p, invert(p))), IDENTITY7, atol=1e-9)


def test_from_matrix_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform.from_matrix(np.diag([1.0, 1.0, -1.0]))


def test_list_round_trip(rng):
    p = RigidTransform.random(rng)
    assert RigidTransform.from_list(p.to_list()).allclose(p, atol=0)
    with pytest.raises(ValueError):
        RigidTransform.from_list([1, 2, 3])


def test_pose_error_components():
    truth = RigidTransform.from_translation(1, 0, 0)
    est = RigidTransform.from_axis_angle([0, 0, 1], np.radians(2.0), t=[1, 0.003, 0.004])
    dt, da = pose_error(est, truth)
    assert dt == pytest.approx(0.005, abs=1e-15)
    assert da == pytest.approx(2.0, abs=1e-12)


def test_angle_is_in_zero_pi(rng):
    for _ in range(200):
        p = RigidTransform.random(rng)
        assert 0.0 <= p.angle <= np.pi + 1e-12


# -- rays and triangles ------------------------------------------------------------

UNIT_TRI = (np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))


def test_ray_direction_is_normalized():
    r = Ray((0, 0, 0), (3, 4, 0))
    assert abs(np.linalg.norm(r.direction) - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (2, 0, 0), normalize=False)


def test_ray_triangle_axis_aligned_hit():
    hit = ray_triangle_intersect(Ray((0.25, 0.25, -1), (0, 0, 1)), *UNIT_TRI)
    assert hit is not None
    np.testing.assert_allclose(hit.point, [0.25, 0.25, 0.0], atol=1e-15)
    assert hit.range == pytest.approx(1.0, abs=1e-15)
    assert abs(abs(hit.normal[2]) - 1.0) <= 1e-15


def test_ray_triangle_outside_barycentric_range():
    assert ray_triangle_intersect(Ray((2, 2, -1), (0, 0, 1)), *UNIT_TRI) is None


def test_ray_triangle_no_backface_culling():
    front = ray_triangle_intersect(Ray((0.25, 0.25, -1), (0, 0, 1)), *UNIT_TRI)
    back = ray_triangle_intersect(Ray((0.25, 0.25, 1), (0, 0, -1)), *UNIT_TRI)
    assert front is not None and back is not None
    assert front.range == pytest.approx(back.range, abs=1e-15)


def test_ray_triangle_degenerate_is_ignored():
    v0, v1 = np.zeros(3), np.array([1.0, 0, 0])
    assert ray_triangle_intersect(Ray((0.5, 0, -1), (0, 0, 1)), v0, v1, np.array([2.0, 0, 0])) is None
    # area 5e-13 m^2, below the threshold
    tiny = ray_triangle_intersect(Ray((1e-7, 1e-7, -1), (0, 0, 1)), v0, np.array([1e-6, 0, 0]), np.array([0, 1e-6, 0]))
    assert tiny is None


def test_ray_triangle_behind_origin_misses():
    assert ray_triangle_intersect(Ray((0.25, 0.25, 1), (0, 0, 1)), *UNIT_TRI) is None


def test_ray_triangle_matches_oracle(rng):
    n = 10_000
    tri = rng.normal(size=(n, 3, 3))
    origins = rng.normal(size=(n, 3)) * 2.0
    targets = tri.mean(axis=1) + rng.normal(scale=0.5, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hits = 0
    for k in range(n):
        want = all_ranges(origins[k:k + 1], dirs[k:k + 1], tri[k:k + 1])[0, 0]
        got = ray_triangle_intersect(Ray(origins[k], dirs[k]), *tri[k])
        assert (got is not None) == np.isfinite(want), k
        if got is not None:
            hits += 1
            assert abs(got.range - want) <= 1e-9
            np.testing.assert_allclose(got.point, origins[k] + got.range * dirs[k], atol=1e-9)
    assert hits > n // 4  # the fixture exercises both outcomes


# -- meshes ------------------------------------------------------------------------


def test_mesh_rejects_out_of_range_index():
    with pytest.raises(ValueError, match="face 1"):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2], [0, 1, 3]])


def test_mesh_rejects_non_unit_normals():
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), [[0, 1, 2]], face_normals=[[0, 0, 2.0]])


def test_box_mesh_normals_are_unit_and_outward():
    m = box_mesh((1, 2, 3))
    n = m.normals()
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    centroids = m.triangles().mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, centroids) > 0)


@pytest.mark.parametrize("suffix", [".ply", ".obj"])
def test_mesh_file_round_trip(tmp_path, suffix, rng):
    m = random_triangle_soup(50, rng)
    path = tmp_path / f"soup{suffix}"
    save_mesh(m, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_ply_quad_rejected_naming_face(tmp_path):
    path = tmp_path / "quad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 2\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n4 0 1 2 3\n"
    )
    with pytest.raises(MeshFormatError, match="face 1"):
        load_mesh(path)


def test_obj_quad_rejected_naming_face(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshFormatError, match="face 0"):
        load_mesh(path)


def test_unknown_mesh_format(tmp_path):
    path = tmp_path / "mesh.stl"
    path.write_text("solid")
    with pytest.raises(MeshFormatError):
        load_mesh(path)


def test_binary_ply_rejected(tmp_path):
    path = tmp_path / "b.ply"
    path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(MeshFormatError, match="ASCII"):
        load_mesh(path)


# -- BVH -----------------------------------------------------------------------------


def test_empty_mesh_cannot_be_built():
    with pytest.raises(ValueError):
        build_accel(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


def test_single_triangle_is_one_leaf():
    accel = build_accel(TriangleMesh(np.array(UNIT_TRI), [[0, 1, 2]]))
    assert accel.n_nodes == 1
    assert accel.n_leaves == 1


def test_table_i_multimeter_builds():
    spec = TABLE_I_OBJECTS["multimeter"]
    assert (spec["faces"], spec["vertices"]) == (100338, 33446)
    mesh = table_i_mesh("multimeter")
    assert (mesh.n_faces, mesh.n_vertices) == (100338, 33446)
    accel = build_accel(mesh)
    hit = accel.ray_cast(Ray((0, 0, -1), (0, 0, 1)))
    assert hit is not None and 0.9 < hit.range < 1.0


# published (faces, vertices) of the tracked object meshes
PUBLISHED_COUNTS = {
    "multimeter": (100338, 33446),
    "screwdriver": (26682, 8894),
    "materialbox": (13617, 4539),
    "klt3147": (14124, 4708),
    "relay": (9312, 3104),
}


@pytest.mark.parametrize("name", sorted(PUBLISHED_COUNTS))
def test_table_i_counts(name):
    assert set(TABLE_I_OBJECTS) == set(PUBLISHED_COUNTS)
    mesh = table_i_mesh(name)
    assert (mesh.n_faces, mesh.n_vertices) == PUBLISHED_COUNTS[name]


def test_leaves_contain_their_triangles_and_respect_leaf_size(rng):
    mesh = random_triangle_soup(1000, rng)
    accel = build_accel(mesh)
    tri = mesh.triangles()
    seen = []
    for lo, hi, faces in accel.leaves():
        assert 1 <= len(faces) <= 4
        pts = tri[faces].reshape(-1, 3)
        assert np.all(pts >= lo) and np.all(pts <= hi)
        seen.extend(faces.tolist())
    assert sorted(seen) == list(range(mesh.n_faces))


def test_build_is_deterministic(rng):
    mesh = random_triangle_soup(500, rng)
    a, b = build_accel(mesh), build_accel(mesh)
    for name in ("node_lo", "node_hi", "node_left", "node_right", "node_start", "node_count", "tri_face"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_bvh_matches_brute_force_on_random_mesh(rng):
    mesh = random_triangle_soup(1000, rng)
    accel = build_accel(mesh)
    origins, dirs = random_rays(rng, 10_000, *mesh.bounds())
    t, face, _ = accel.cast(origins, dirs)
    want_t, want_f = closest_hits(origins, dirs, mesh.triangles())
    hit = want_f >= 0
    np.testing.assert_array_equal(face >= 0, hit)
    assert np.max(np.abs(t[hit] - want_t[hit])) <= 1e-9
    np.testing.assert_array_equal(face[hit], want_f[hit])


def test_exhaustive_kernel_matches_oracle(rng):
    mesh = random_triangle_soup(300, rng)
    origins, dirs = random_rays(rng, 2000, *mesh.bounds())
    t, f = build_accel(mesh).brute_force(origins, dirs)
    want_t, want_f = closest_hits(origins, dirs, mesh.triangles())
    np.testing.assert_array_equal(f, want_f)
    hit = want_f >= 0
    assert np.max(np.abs(t[hit] - want_t[hit])) <= 1e-9


def test_ray_cast_unit_cube():
    accel = build_accel(box_mesh())
    hit = ray_cast(accel, Ray((0, 0, -2), (0, 0, 1)), max_range=10.0)
    assert hit.range == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(hit.point, [0, 0, -0.5], atol=1e-12)
    assert ray_cast(accel, Ray((0, 0, -2), (0, 0, 1)), max_range=1.0) is None


def test_ray_cast_rejects_non_positive_max_range():
    with pytest.raises(ValueError):
        ray_cast(build_accel(box_mesh()), Ray((0, 0, -2), (0, 0, 1)), max_range=0.0)


def test_ray_cast_closest_of_stacked_triangles():
    v = np.array([[-1, -1, 2], [1, -1, 2], [0, 1, 2], [-1, -1, 1], [1, -1, 1], [0, 1, 1]], dtype=float)
    accel = build_accel(TriangleMesh(v, [[0, 1, 2], [3, 4, 5]]))
    hit = ray_cast(accel, Ray((0, 0, 0), (0, 0, 1)))
    assert hit.face_id == 1
    assert hit.range == pytest.approx(1.0, abs=1e-15)


def test_equal_range_tie_takes_lowest_face_id():
    v = np.array([[-1, -1, 1], [1, -1, 1], [0, 1, 1]], dtype=float)
    accel = build_accel(TriangleMesh(np.vstack([v, v, v]), [[6, 7, 8], [3, 4, 5], [0, 1, 2]]))
    assert ray_cast(accel, Ray((0, 0, 0), (0, 0, 1))).face_id == 0


def test_hit_point_consistency(rng):
    mesh = random_triangle_soup(500, rng)
    accel = build_accel(mesh)
    origins, dirs = random_rays(rng, 500, *mesh.bounds())
    for o, d in zip(origins, dirs):
        hit = accel.ray_cast(Ray(o, d))
        if hit is not None:
            np.testing.assert_allclose(hit.point, o + hit.range * d, atol=1e-9)
            assert hit.range >= 0.0


def test_min_range_skips_near_hits():
    accel = build_accel(box_mesh())
    hit = accel.ray_cast(Ray((0, 0, -2), (0, 0, 1)), min_range=1.6)
    assert hit.range == pytest.approx(2.5, abs=1e-12)

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import sampled_overlap

from sgtrack.fixtures import side_fixture, stack_fixture
from sgtrack.geometry import RigidTransform, box_mesh, table_i_mesh
from sgtrack.scene import SceneError, SceneGraph
from sgtrack.spatial import (
    OrientedBox,
    Relation,
    RelationConfig,
    check_relation,
    instance_obb,
    obb_intersect,
    projection_region,
    query_relations,
    relations_to_json,
)

UNIT = box_mesh((1.0, 1.0, 1.0))


def two_cubes(a_position, b_position=(0, 0, 0)):
    g = SceneGraph()
    b = g.add_instance(UNIT, RigidTransform.from_translation(*b_position), "B")
    a = g.add_instance(UNIT, RigidTransform.from_translation(*a_position), "A")
    return g, a, b


def random_box(rng, spread=1.0):
    return OrientedBox(
        RigidTransform(RigidTransform.random(rng).q, rng.uniform(-spread, spread, 3)), rng.uniform(0.05, 0.6, 3)
    )


# -- boxes ------------------------------------------------------------------------


def test_unit_cube_obb():
    g, a, _ = two_cubes((0, 0, 0))
    box = instance_obb(g, a)
    np.testing.assert_allclose(box.half_extents, 0.5)
    np.testing.assert_allclose(box.center, 0.0)


def test_rotated_cube_keeps_its_extents():
    g = SceneGraph()
    i = g.add_instance(UNIT, RigidTransform.from_axis_angle([0, 0, 1], np.pi / 4))
    box = instance_obb(g, i)
    np.testing.assert_allclose(box.half_extents, 0.5)
    np.testing.assert_allclose(box.axes[:, 0], [np.sqrt(0.5), np.sqrt(0.5), 0], atol=1e-15)


def test_multimeter_obb_matches_vertex_scan():
    mesh = table_i_mesh("multimeter")
    assert mesh.n_vertices == 33446
    g = SceneGraph()
    pose = RigidTransform.from_rotvec([0.3, -0.2, 1.1], t=[0.5, 0.2, 0.8])
    i = g.add_instance(mesh, pose, "multimeter")
    box = instance_obb(g, i)
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    np.testing.assert_allclose(box.half_extents, 0.5 * (hi - lo), atol=1e-15)
    np.testing.assert_allclose(box.center, pose.apply(0.5 * (lo + hi)), atol=1e-12)
    assert np.all(box.contains(pose.apply(v), margin=1e-9))


def test_unknown_instance_is_an_error():
    with pytest.raises(SceneError):
        instance_obb(SceneGraph(), 3)


def test_box_validation():
    with pytest.raises(ValueError):
        OrientedBox(RigidTransform.identity(), (0.5, 0.0, 0.5))


# -- projection regions -------------------------------------------------------------------


def test_on_region_of_unit_cube():
    box = OrientedBox(RigidTransform.identity(), (0.5, 0.5, 0.5))
    region = projection_region(box, Relation.ON, 1.0)
    np.testing.assert_allclose(region.center, [0, 0, 1])
    np.testing.assert_allclose(region.half_extents, 0.5)


@pytest.mark.parametrize(
    "relation, direction",
    [("on", (0, 0, 1)), ("above", (0, 0, 1)), ("below", (0, 0, -1)), ("left_of", (0, 1, 0)),
     ("right_of", (0, -1, 0)), ("in_front_of", (1, 0, 0)), ("behind", (-1, 0, 0))],
)
def test_region_base_and_length(relation, direction):
    half = np.array([0.3, 0.2, 0.1])
    box = OrientedBox(RigidTransform.identity(), half)
    region = projection_region(box, relation, 0.7)
    d = np.array(direction, dtype=float)
    axis = int(np.flatnonzero(d)[0])
    # base face coincides with the source face, far face sits exactly depth beyond it
    base = region.center @ d - region.half_extents[axis]
    assert base == pytest.approx(half[axis], abs=1e-12)
    assert 2 * region.half_extents[axis] == pytest.approx(0.7, abs=1e-12)
    others = [k for k in range(3) if k != axis]
    np.testing.assert_array_equal(region.half_extents[others], half[others])


def test_left_region_follows_object_rotation():
    box = OrientedBox(RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2, t=[1, 2, 0]), (0.5, 0.5, 0.5))
    region = projection_region(box, "left_of", 2.0)
    np.testing.assert_allclose(region.center - box.center, [-1.5, 0, 0], atol=1e-12)
    np.testing.assert_allclose(region.axes, box.axes, atol=0)


def test_depth_must_be_positive():
    box = OrientedBox(RigidTransform.identity(), (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        projection_region(box, "on", 0.0)


# -- relations ------------------------------------------------------------------------


def test_stacked_cubes():
    g, a, b = two_cubes((0, 0, 1))
    assert check_relation(g, a, b, Relation.ON)
    assert not check_relation(g, b, a, Relation.ON)
    assert check_relation(g, b, a, Relation.BELOW)


def test_floating_cube_is_above_not_on():
    g, a, b = two_cubes((0, 0, 3))
    cfg = RelationConfig(depth=5.0)
    assert check_relation(g, a, b, "above", cfg)
    assert not check_relation(g, a, b, "on", cfg)


def test_contact_tolerance():
    g, a, b = two_cubes((0, 0, 1.019))
    assert check_relation(g, a, b, "on")
    g.set_world_pose(a, RigidTransform.from_translation(0, 0, 1.021))
    assert not check_relation(g, a, b, "on")


def test_side_by_side():
    g, a, b = two_cubes((0, 0.8, 0))
    assert check_relation(g, a, b, "left_of")
    assert not check_relation(g, a, b, "right_of")
    g, a, b = side_fixture()
    assert check_relation(g, a, b, "left_of") and check_relation(g, b, a, "right_of")


def test_same_subject_and_object_is_an_error():
    g, a, _ = two_cubes((0, 0, 1))
    with pytest.raises(SceneError):
        check_relation(g, a, a, "on")


def test_stack_query_returns_direct_contacts():
    g, (a, b, c) = stack_fixture(3)
    assert query_relations(g, "on") == [(b, a), (c, b)]
    assert set(query_relations(g, "on")) == {(c, b), (b, a)}


def test_single_instance_has_no_relations():
    g = SceneGraph()
    g.add_instance(UNIT)
    for rel in Relation:
        assert query_relations(g, rel) == []


def test_query_skips_static_instances():
    g, (a, b) = stack_fixture(2)
    g.add_instance(box_mesh((4.0, 4.0, 0.1)), RigidTransform.from_translation(0, 0, -0.55), "floor", kind="static")
    assert query_relations(g, "on") == [(b, a)]


@given(st.integers(0, 10_000))
def test_query_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = SceneGraph()
    for k in range(5):
        g.add_instance(box_mesh(rng.uniform(0.2, 1.0, 3)), RigidTransform.from_rotvec([0, 0, rng.uniform(-3, 3)], t=rng.uniform(-1.5, 1.5, 3)), f"o{k}")
    for rel in Relation:
        expected = [(a, b) for a in g.ids() for b in g.ids() if a != b and check_relation(g, a, b, rel)]
        assert query_relations(g, rel) == expected


def test_relation_names():
    assert Relation.parse("left-of") is Relation.LEFT_OF
    assert Relation.parse(" ON ") is Relation.ON
    with pytest.raises(ValueError, match="valid"):
        Relation.parse("inside")


def test_query_json():
    g, (a, b, c) = stack_fixture(3)
    rows = json.loads(relations_to_json(g, "on", query_relations(g, "on")))
    assert rows[0] == {"relation": "on", "subject_label": "cube1", "subject_id": b, "object_label": "cube0", "object_id": a}


# -- properties -----------------------------------------------------------------------


@given(st.integers(0, 10_000))
def test_opposed_relations_are_exclusive_for_disjoint_boxes(seed):
    rng = np.random.default_rng(seed)
    g = SceneGraph()
    a = g.add_instance(box_mesh(rng.uniform(0.1, 1.0, 3)), RigidTransform(RigidTransform.random(rng).q, rng.uniform(-2, 2, 3)))
    b = g.add_instance(box_mesh(rng.uniform(0.1, 1.0, 3)), RigidTransform(RigidTransform.random(rng).q, rng.uniform(-2, 2, 3)))
    if obb_intersect(instance_obb(g, a), instance_obb(g, b)):
        return
    for pos, neg in [("left_of", "right_of"), ("above", "below"), ("in_front_of", "behind")]:
        assert not (check_relation(g, a, b, pos) and check_relation(g, a, b, neg))


@given(st.integers(0, 10_000))
def test_rigid_motion_of_whole_scene_preserves_relations(seed):
    rng = np.random.default_rng(seed)
    g, _ = stack_fixture(3)
    g.add_instance(box_mesh((0.5, 0.5, 0.5)), RigidTransform.from_translation(0, 1.0, 0), "side")
    g.add_instance(box_mesh((0.3, 0.3, 0.3)), RigidTransform.from_rotvec([0, 0, 0.4], t=[1.2, -0.5, 2.0]), "float")
    before = {rel: query_relations(g, rel) for rel in Relation}
    motion = RigidTransform.random(rng, 10.0)
    for i in g.ids():
        g.set_world_pose(i, motion @ g.world_pose(i))
    assert {rel: query_relations(g, rel) for rel in Relation} == before


def test_separating_axis_matches_sampling():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        overlap, margin = sampled_overlap(a, b, rng)
        if abs(margin) <= 1e-3:
            continue
        checked += 1
        assert obb_intersect(a, b) == overlap
    assert checked >= 90

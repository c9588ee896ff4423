import numpy as np
import pytest

from prism_forge.geometry import Pose, box, compose, cylinder, invert, pose_from_yaw, sphere, translation
from prism_forge.world import (
    Action,
    DEFAULT_PHYSICS,
    GripperState,
    SceneObject,
    TaskSpec,
    WorldState,
    check_collision,
    clamp_action,
    footprint_overlap_frac,
    lowest_point_z,
    pair_penetration,
    scene_from_json,
    scene_to_json,
    settle,
    step,
    support_parent,
    task_success,
    top_point_z,
)


def make_world(objects, gripper_t=(0.0, 0.0, 0.3), aperture="open", held=None):
    return WorldState(
        objects=tuple(objects),
        gripper=GripperState(pose=Pose(np.array(gripper_t, dtype=float)), aperture=aperture, held=held),
    )


def ball(oid, x, y, z, r=0.03, graspable=True, name=None):
    return SceneObject(id=oid, name=name or f"ball{oid}", shape=sphere(r),
                       pose=Pose(np.array([x, y, z])), graspable=graspable)


def crate(oid, x, y, z, half=(0.04, 0.04, 0.04), yaw=0.0, graspable=True):
    return SceneObject(id=oid, name=f"crate{oid}", shape=box(*half),
                       pose=pose_from_yaw([x, y, z], yaw), graspable=graspable)


def can(oid, x, y, z, r=0.035, hh=0.06, graspable=True):
    return SceneObject(id=oid, name=f"can{oid}", shape=cylinder(r, hh),
                       pose=Pose(np.array([x, y, z])), graspable=graspable)


# --- collisions -------------------------------------------------------------

def test_spheres_apart_no_collision():
    w = make_world([ball(1, 0, 0, 1.0, r=1.0), ball(2, 3.0, 0, 1.0, r=1.0)])
    assert check_collision(w) == []


def test_spheres_overlapping_penetration():
    w = make_world([ball(1, 0, 0, 1.0, r=1.0), ball(2, 1.0, 0, 1.0, r=1.0)])
    rows = check_collision(w)
    assert len(rows) == 1
    a, b, pen = rows[0]
    assert (a, b) == (1, 2)
    assert abs(pen - 1.0) < 1e-12


def mc_boxes_overlap(b1, b2, rng, n=100_000):
    """Monte-Carlo overlap oracle: sample points in b1, test membership in b2."""
    half1 = np.asarray(b1.shape.params)
    pts_local = rng.uniform(-half1, half1, size=(n, 3))
    pts_world = pts_local @ b1.pose.rotation().T + b1.pose.t
    inv = invert(b2.pose)
    local2 = pts_world @ inv.rotation().T + inv.t
    inside = (np.abs(local2) <= np.asarray(b2.shape.params)).all(axis=1)
    return bool(inside.any())


def test_box_box_matches_monte_carlo():
    rng = np.random.default_rng(5)
    margin = 0.01
    checked = 0
    while checked < 40:
        b1 = crate(1, *rng.uniform(-0.1, 0.1, 3), half=rng.uniform(0.03, 0.09, 3), yaw=rng.uniform(-3, 3))
        b2 = crate(2, *rng.uniform(-0.1, 0.1, 3), half=rng.uniform(0.03, 0.09, 3), yaw=rng.uniform(-3, 3))
        pen = pair_penetration(b1, b2)
        if abs(pen) < margin:  # skip near-boundary cases: MC can't resolve them
            continue
        assert mc_boxes_overlap(b1, b2, rng) == (pen > 0), (b1.pose.t, b2.pose.t)
        checked += 1


def test_sphere_box_penetration_analytic():
    b = crate(1, 0, 0, 0.04)
    s = ball(2, 0.0, 0.0, 0.04 + 0.04 + 0.02, r=0.03)
    # sphere center 0.02 above box top, radius 0.03 -> 0.01 penetration
    assert abs(pair_penetration(b, s) - 0.01) < 1e-12


def test_capsule_penetration_symmetric():
    c1 = can(1, 0, 0, 0.06)
    c2 = can(2, 0.05, 0, 0.06)
    pen = pair_penetration(c1, c2)
    assert abs(pen - (0.07 - 0.05)) < 1e-12
    assert abs(pair_penetration(c2, c1) - pen) < 1e-12


# --- settle -----------------------------------------------------------------

def test_settle_lifts_object_out_of_table():
    w = make_world([ball(1, 0, 0, -0.02)])
    s = settle(w)
    assert abs(s.obj(1).pose.t[2] - 0.03) < 1e-12


def test_settle_idempotent():
    rng = np.random.default_rng(8)
    objs = [ball(1, 0, 0, rng.uniform(0, 0.3)), crate(2, 0.02, 0.01, rng.uniform(0, 0.3)),
            can(3, 0.3, 0.3, rng.uniform(0, 0.3))]
    w = make_world(objs)
    s1 = settle(w)
    s2 = settle(s1)
    for o1, o2 in zip(s1.objects, s2.objects):
        assert np.allclose(o1.pose.t, o2.pose.t, atol=1e-12)


def test_settle_stacks_on_footprint_overlap():
    bottom = can(1, 0, 0, 0.06)
    top = can(2, 0.01, 0.0, 0.5)
    w = make_world([bottom, top])
    s = settle(w)
    # top rests on bottom: origin at bottom-top + hh + capsule cap
    assert abs(lowest_point_z(s.obj(2)) - top_point_z(s.obj(1))) < 1e-9
    assert support_parent(s, 2) == 1


def test_settle_soundness_random_scenes():
    rng = np.random.default_rng(9)
    for _ in range(25):
        objs = []
        for i in range(1, rng.integers(2, 6)):
            kind = rng.integers(0, 3)
            x, y = rng.uniform(-0.25, 0.25, 2)
            z = rng.uniform(-0.05, 0.4)
            if kind == 0:
                objs.append(ball(i, x, y, z, r=rng.uniform(0.02, 0.05)))
            elif kind == 1:
                objs.append(crate(i, x, y, z, half=rng.uniform(0.02, 0.06, 3), yaw=rng.uniform(-3, 3)))
            else:
                objs.append(can(i, x, y, z, r=rng.uniform(0.02, 0.05), hh=rng.uniform(0.03, 0.08)))
        s = settle(make_world(objs))
        assert check_collision(s) == []
        for o in s.objects:
            assert lowest_point_z(o) >= s.table_height - 1e-6


# --- step -------------------------------------------------------------------

def test_zero_action_is_fixpoint():
    w = settle(make_world([ball(1, 0.1, 0, 0.03)]))
    s = step(w, Action(np.zeros(3), 0.0, "hold"))
    assert np.allclose(s.obj(1).pose.t, w.obj(1).pose.t, atol=1e-12)
    assert np.allclose(s.gripper.pose.t, w.gripper.pose.t, atol=1e-12)
    assert s.step_count == w.step_count + 1


def test_close_at_object_attaches():
    w = settle(make_world([ball(1, 0.0, 0.0, 0.03)], gripper_t=(0.0, 0.0, 0.03)))
    s = step(w, Action(np.zeros(3), 0.0, "close"))
    assert s.gripper.held == 1
    assert s.gripper.aperture == "closed"


def test_close_attaches_nearest():
    w = settle(make_world([ball(1, 0.02, 0, 0.03), ball(2, -0.01, 0, 0.03)],
                          gripper_t=(0.0, 0.0, 0.03)))
    s = step(w, Action(np.zeros(3), 0.0, "close"))
    assert s.gripper.held == 2


def test_close_out_of_range_grabs_nothing():
    w = settle(make_world([ball(1, 0.2, 0, 0.03)], gripper_t=(0.0, 0.0, 0.1)))
    s = step(w, Action(np.zeros(3), 0.0, "close"))
    assert s.gripper.held is None
    assert s.gripper.aperture == "closed"


def test_open_drops_and_settles():
    w = settle(make_world([ball(1, 0.0, 0.0, 0.03)], gripper_t=(0.0, 0.0, 0.03)))
    w = step(w, Action(np.zeros(3), 0.0, "close"))
    for _ in range(6):
        w = step(w, Action(np.array([0.0, 0.0, 0.05]), 0.0, "hold"))
    assert w.obj(1).pose.t[2] > 0.25
    w = step(w, Action(np.zeros(3), 0.0, "open"))
    assert w.gripper.held is None
    assert abs(w.obj(1).pose.t[2] - 0.03) < 1e-9


def test_held_object_rigid():
    w = settle(make_world([crate(1, 0.0, 0.0, 0.04)], gripper_t=(0.0, 0.0, 0.04)))
    w = step(w, Action(np.zeros(3), 0.0, "close"))
    rel0 = compose(invert(w.gripper.pose), w.obj(1).pose)
    rng = np.random.default_rng(3)
    for _ in range(12):
        a = Action(rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.2, 0.2), "hold")
        w = step(w, a)
        rel = compose(invert(w.gripper.pose), w.obj(1).pose)
        assert np.linalg.norm(rel.t - rel0.t) < 1e-9
        assert min(np.linalg.norm(rel.q - rel0.q), np.linalg.norm(rel.q + rel0.q)) < 1e-9


def test_id_set_invariant_under_actions():
    rng = np.random.default_rng(4)
    w = settle(make_world([ball(1, 0, 0, 0.03), can(2, 0.1, 0.1, 0.06)]))
    ids0 = {o.id for o in w.objects}
    for _ in range(30):
        a = Action(rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.2, 0.2),
                   ("open", "close", "hold")[rng.integers(0, 3)])
        w = step(w, a)
        assert {o.id for o in w.objects} == ids0


def test_step_determinism():
    def run():
        w = settle(make_world([ball(1, 0.05, 0, 0.03), crate(2, -0.1, 0.05, 0.04)]))
        rng = np.random.default_rng(17)
        out = []
        for _ in range(25):
            a = Action(rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.2, 0.2),
                       ("open", "close", "hold")[rng.integers(0, 3)])
            w = step(w, a)
            out.append(np.concatenate([w.gripper.pose.t] + [o.pose.t for o in w.objects]))
        return np.array(out)

    a, b = run(), run()
    assert (a == b).all()


def test_truncate_at_table_contact():
    w = settle(make_world([ball(1, 0.0, 0.0, 0.03)], gripper_t=(0.0, 0.0, 0.05)))
    w = step(w, Action(np.zeros(3), 0.0, "close"))
    assert w.gripper.held == 1
    # push straight down: the held ball stops at table contact
    for _ in range(3):
        w = step(w, Action(np.array([0.0, 0.0, -0.05]), 0.0, "hold"))
    assert lowest_point_z(w.obj(1)) >= -1e-6
    assert lowest_point_z(w.obj(1)) < 1e-4


def test_truncate_on_other_object():
    w = settle(make_world([ball(1, 0.0, 0.0, 0.03), crate(2, 0.0, 0.12, 0.04, graspable=False)],
                          gripper_t=(0.0, 0.0, 0.03)))
    w = step(w, Action(np.zeros(3), 0.0, "close"))
    for _ in range(5):
        w = step(w, Action(np.array([0.0, 0.05, 0.0]), 0.0, "hold"))
    pen = pair_penetration(w.obj(1), w.obj(2))
    assert pen <= 1e-4
    assert w.obj(1).pose.t[1] < 0.12


def test_action_clamping():
    a = clamp_action(Action(np.array([1.0, -1.0, 0.01]), 5.0, "hold"))
    assert np.allclose(a.delta_t, [0.05, -0.05, 0.01])
    assert a.delta_yaw == 0.2


def test_pressable_push_and_latch():
    button = SceneObject(id=1, name="button", shape=box(0.02, 0.02, 0.01),
                         pose=Pose(np.array([0.0, 0.0, 0.045])), graspable=False,
                         support_height=0.045, pressable=True)
    w = settle(make_world([button], gripper_t=(0.0, 0.0, 0.12)))
    assert abs(w.obj(1).pose.t[2] - 0.045) < 1e-12
    for _ in range(3):
        w = step(w, Action(np.array([0.0, 0.0, -0.05]), 0.0, "hold"))
    # pressed to the travel stop and latched there
    assert abs(w.obj(1).pose.t[2] - (0.045 - DEFAULT_PHYSICS.press_travel)) < 1e-6
    w = step(w, Action(np.array([0.0, 0.0, 0.05]), 0.0, "hold"))
    assert abs(w.obj(1).pose.t[2] - (0.045 - DEFAULT_PHYSICS.press_travel)) < 1e-6


# --- task predicates ---------------------------------------------------------

def test_lift_task_success():
    task = TaskSpec("lift", [1], {"lift_height": 0.10})
    w = settle(make_world([ball(1, 0.0, 0.0, 0.03)], gripper_t=(0.0, 0.0, 0.03)))
    assert not task_success(w, task)
    w = step(w, Action(np.zeros(3), 0.0, "close"))
    for _ in range(4):
        w = step(w, Action(np.array([0.0, 0.0, 0.05]), 0.0, "hold"))
    assert w.obj(1).pose.t[2] >= 0.13
    assert task_success(w, task)


def test_stack_task_success():
    task = TaskSpec("stack", [2, 1])
    bottom = can(1, 0, 0, 0.06)
    top = can(2, 0.005, 0.0, 0.5)
    w = settle(make_world([bottom, top]))
    assert task_success(w, task)
    apart = settle(make_world([can(1, 0, 0, 0.06), can(2, 0.3, 0.3, 0.06)]))
    assert not task_success(apart, task)


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        TaskSpec("juggle", [1])


def test_scene_json_roundtrip():
    objs = [ball(1, 0.1, -0.2, 0.03), crate(2, 0, 0, 0.04, yaw=0.3, graspable=False),
            can(3, 0.2, 0.2, 0.06)]
    w = settle(make_world(objs))
    d = scene_to_json(w)
    w2, cams = scene_from_json(d)
    assert cams == []
    for a, b in zip(w.objects, w2.objects):
        assert a.id == b.id and a.name == b.name
        assert np.allclose(a.pose.t, b.pose.t)
        assert np.allclose(a.pose.q, b.pose.q)
        assert a.shape == b.shape
    assert w2.gripper.aperture == "open"

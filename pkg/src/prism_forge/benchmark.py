"""Default query templates and labeled benchmark scenes.

Templates pair each skill family with the projection relationships a human
would supply as guidance: alignment checks on the level side views (scene and
right span the horizontal axes), containment checks on the bird view.

Benchmark cases drive the label-fidelity property and the accuracy-vs-views
study. Negatives come in graded kinds: an "easy" negative violates every
queried view, a "depth" negative hides its offset along the scene camera's
optical axis (resolved by the right view), and a "snuggle" negative touches
the reference object so that every side view accepts it and only the bird
view's containment check fails. All offsets carry margins of several pixels
against the template thresholds across the placement randomization range.
"""

from dataclasses import replace

import numpy as np

from .geometry import Pose
from .oracle import ProjectionRelation, QueryTemplate
from .scenes import GRIPPER_MARKER_ID, GroundTruthScene, build_scene, standard_cameras
from .world import GripperState, WorldState, settle, task_success

SKILL_OF_TASK = {
    "lift": "pick",
    "pick_place": "place",
    "insert": "insert",
    "stack": "stack",
    "press": "press",
}
STUDY_SKILLS = ("pick", "place", "insert", "stack")

SIDE_VIEWS = ("scene", "right")
TOP_VIEWS = ("bird",)

TAU_ALIGN = 8.0          # px, gripper-to-target pre-task alignment
TAU_PLACE = 10.0
TAU_INSERT = 8.0
TAU_STACK = 15.0
TAU_PRESS_POST = 5.0

PICK_ALIGN_TOL = 0.05    # m, 3D ground truth for pre-task alignment


def make_default_template(scene: GroundTruthScene) -> QueryTemplate:
    """Template for the scene's task, in terms of its object ids."""
    fam = scene.task.family
    skill = SKILL_OF_TASK[fam]
    tid = scene.task.target_ids[0]
    pre = [ProjectionRelation("near_in_image", GRIPPER_MARKER_ID, tid, TAU_ALIGN, SIDE_VIEWS)]
    if fam == "lift":
        post = [ProjectionRelation("above_in_image", tid, "horizon", views=SIDE_VIEWS)]
    elif fam == "press":
        post = [ProjectionRelation("near_in_image", GRIPPER_MARKER_ID, tid, TAU_PRESS_POST, SIDE_VIEWS)]
    elif fam == "insert":
        cid = scene.task.target_ids[1]
        post = [
            ProjectionRelation("near_in_image", tid, cid, TAU_INSERT, SIDE_VIEWS),
            ProjectionRelation("inside_footprint", tid, cid, views=TOP_VIEWS),
        ]
    elif fam == "pick_place":
        cid = scene.task.target_ids[1]
        post = [
            ProjectionRelation("near_in_image", tid, cid, TAU_PLACE, SIDE_VIEWS),
            ProjectionRelation("inside_footprint", tid, cid, views=TOP_VIEWS),
        ]
    elif fam == "stack":
        cid = scene.task.target_ids[1]
        post = [
            ProjectionRelation("near_in_image", tid, cid, TAU_STACK, SIDE_VIEWS),
            ProjectionRelation("inside_footprint", tid, cid, views=TOP_VIEWS),
        ]
    else:
        raise ValueError(fam)
    return QueryTemplate(family=skill, pre_task=pre, post_task=post)


# ---------------------------------------------------------------------------
# benchmark cases


CASE_KINDS = ("positive", "easy_neg", "depth_neg", "snuggle_neg")

# sampling weights per skill; snuggle is geometrically impossible for
# pick/place (any 3D-near configuration there is genuinely positive)
KIND_WEIGHTS = {
    "pick": (("positive", 0.45), ("depth_neg", 0.40), ("easy_neg", 0.15)),
    "place": (("positive", 0.45), ("depth_neg", 0.40), ("easy_neg", 0.15)),
    "insert": (("positive", 0.40), ("depth_neg", 0.20), ("snuggle_neg", 0.25), ("easy_neg", 0.15)),
    "stack": (("positive", 0.40), ("depth_neg", 0.20), ("snuggle_neg", 0.25), ("easy_neg", 0.15)),
}
AMBIGUITY_FREE_WEIGHTS = (("positive", 0.5), ("easy_neg", 0.5))


def _sign(rng):
    return 1.0 if rng.random() < 0.5 else -1.0


def _with_gripper(w: WorldState, t) -> WorldState:
    return replace(w, gripper=GripperState(pose=Pose(np.asarray(t, dtype=float)),
                                           aperture="open", held=None))


def _scene_center(rng, spread=0.06):
    return rng.uniform(-spread, spread, size=2)


def make_case(skill: str, kind: str, rng: np.random.Generator):
    """(world, truth) for one benchmark scene of the given kind."""
    if skill == "pick":
        gt = build_scene("lift")
        c = _scene_center(rng)
        w = gt.world.with_object_pose(1, Pose(np.array([c[0], c[1], gt.world.obj(1).pose.t[2]])))
        w = settle(w)
        target = w.obj(1).pose.t
        if kind == "positive":
            off = rng.normal(size=3)
            off = off / np.linalg.norm(off) * rng.uniform(0.0, 0.02)
            off[2] = abs(off[2])
            g = target + off
        elif kind == "depth_neg":
            g = target + np.array([_sign(rng) * rng.uniform(0.25, 0.30), 0.0, 0.0])
        elif kind == "easy_neg":
            g = target + np.array([_sign(rng) * rng.uniform(0.20, 0.28),
                                   _sign(rng) * rng.uniform(0.20, 0.28),
                                   rng.uniform(0.12, 0.2)])
        else:
            raise ValueError(kind)
        g[2] = max(g[2], 0.012)
        w = _with_gripper(w, g)
        truth = float(np.linalg.norm(w.gripper.pose.t - w.obj(1).pose.t)) <= PICK_ALIGN_TOL
        return w, truth

    if skill == "stack":
        gt = build_scene("stack")
        c = _scene_center(rng)
        bz = gt.world.obj(2).pose.t[2]
        w = gt.world.with_object_pose(2, Pose(np.array([c[0], c[1], bz])))
        if kind == "positive":
            off = rng.uniform(-0.004, 0.004, size=2)
            top_z = 3 * 0.06  # settle snaps exactly onto the bottom can
            w = w.with_object_pose(1, Pose(np.array([c[0] + off[0], c[1] + off[1], top_z])))
        elif kind == "depth_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.28, 0.32), c[1], 0.06])))
        elif kind == "snuggle_neg":
            off = _sign(rng) * (0.097 + rng.uniform(0.0, 0.004))
            w = w.with_object_pose(1, Pose(np.array([c[0] + off, c[1], 0.06])))
        elif kind == "easy_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.32, 0.38),
                                                     c[1] + _sign(rng) * rng.uniform(0.32, 0.38), 0.06])))
        w = settle(_with_gripper(w, [0.3, 0.3, 0.3]))
        return w, task_success(w, gt.task)

    if skill == "insert":
        gt = build_scene("insert")
        c = _scene_center(rng)
        cup = gt.world.obj(2)
        w = gt.world.with_object_pose(2, Pose(np.array([c[0], c[1], cup.pose.t[2]])))
        floor_z = (cup.pose.t[2] - cup.shape.params[1]) + 0.005
        pen_hh = gt.world.obj(1).shape.params[1]
        if kind == "positive":
            off = rng.uniform(-0.004, 0.004, size=2)
            w = w.with_object_pose(1, Pose(np.array([c[0] + off[0], c[1] + off[1], floor_z + pen_hh])))
        elif kind == "depth_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.28, 0.32), c[1], pen_hh])))
        elif kind == "snuggle_neg":
            off = _sign(rng) * (0.052 + rng.uniform(0.0, 0.003))
            w = w.with_object_pose(1, Pose(np.array([c[0] + off, c[1], pen_hh])))
        elif kind == "easy_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.25, 0.30),
                                                     c[1] + _sign(rng) * rng.uniform(0.25, 0.30), pen_hh])))
        w = settle(_with_gripper(w, [0.3, 0.3, 0.3]))
        return w, task_success(w, gt.task)

    if skill == "place":
        gt = build_scene("pick_place")
        c = _scene_center(rng)
        plate = gt.world.obj(2)
        w = gt.world.with_object_pose(2, Pose(np.array([c[0], c[1], plate.pose.t[2]])))
        apple_r = gt.world.obj(1).shape.params[0]
        on_plate_z = 0.02 + apple_r
        if kind == "positive":
            off = rng.normal(size=2)
            off = off / np.linalg.norm(off) * rng.uniform(0.0, 0.05)
            w = w.with_object_pose(1, Pose(np.array([c[0] + off[0], c[1] + off[1], on_plate_z])))
        elif kind == "depth_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.28, 0.32), c[1], apple_r])))
        elif kind == "easy_neg":
            w = w.with_object_pose(1, Pose(np.array([c[0] + _sign(rng) * rng.uniform(0.25, 0.30),
                                                     c[1] + _sign(rng) * rng.uniform(0.25, 0.30), apple_r])))
        else:
            raise ValueError(kind)
        w = settle(_with_gripper(w, [0.3, 0.3, 0.3]))
        return w, task_success(w, gt.task)

    raise ValueError(f"unknown skill {skill!r}")


def sample_case(skill: str, rng: np.random.Generator, ambiguous: bool = True):
    weights = KIND_WEIGHTS[skill] if ambiguous else AMBIGUITY_FREE_WEIGHTS
    kinds = [k for k, _ in weights]
    probs = np.array([p for _, p in weights])
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    return make_case(skill, kind, rng)


def study_relations(skill: str):
    """Relations and stage used for the accuracy-vs-views study."""
    fam = {v: k for k, v in SKILL_OF_TASK.items()}[skill]
    template = make_default_template(build_scene(fam))
    if skill == "pick":
        return template.pre_task
    return template.post_task


def study_cameras():
    return standard_cameras(("scene", "right", "front", "bird", "left"))

"""Built-in primitive-shape scene library: one ground-truth scene, task, and
camera rig per task family, plus the noisy pose-estimate generator that hides
ground truth from the rest of the pipeline.

The four standard cameras are scene/right/front/bird (a fifth, left, exists
for view-count studies). Side cameras sit level with the workspace at height
SIDE_CAM_Z so the image horizon row corresponds exactly to that world height,
independent of object distance.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Pose, box, cylinder, look_at_camera, sphere
from .seeding import stream
from .world import GripperState, SceneObject, TaskSpec, WorldState, settle

SIDE_CAM_Z = 0.095          # lift predicate fires when an object's lowest point clears this
CAM_DIST = 0.85
BIRD_CAM_Z = 0.75
CAM_RES = 64
CAM_FOCAL = 70.0

GRIPPER_MARKER_ID = 9001
TABLE_ID = 9002
TABLE_HALF = (0.45, 0.45, 0.01)
GRIPPER_MARKER_RADIUS = 0.018

CAMERA_ORDER = ("scene", "right", "front", "bird", "left")


def standard_cameras(names=("scene", "right", "front", "bird")) -> list:
    rigs = {
        "scene": ((-CAM_DIST, 0.0, SIDE_CAM_Z), (1.0, 0.0, 0.0)),
        "right": ((0.0, -CAM_DIST, SIDE_CAM_Z), (0.0, 1.0, 0.0)),
        "front": ((CAM_DIST, 0.0, SIDE_CAM_Z), (-1.0, 0.0, 0.0)),
        "left": ((0.0, CAM_DIST, SIDE_CAM_Z), (0.0, -1.0, 0.0)),
        "bird": ((0.0, 0.0, BIRD_CAM_Z), (0.0, 0.0, -1.0)),
    }
    cams = []
    for name in names:
        eye, fwd = rigs[name]
        eye = np.array(eye)
        cams.append(
            look_at_camera(eye=eye, target=eye + np.array(fwd), focal=CAM_FOCAL,
                           width=CAM_RES, height=CAM_RES, name=name)
        )
    return cams


def render_entries(w: WorldState, with_marker=True, with_table=True) -> list:
    """(id, shape, pose) triples for rasterization, including the synthetic
    gripper marker and table slab."""
    entries = [(o.id, o.shape, o.pose) for o in w.objects]
    if with_marker:
        entries.append((GRIPPER_MARKER_ID, sphere(GRIPPER_MARKER_RADIUS), w.gripper.pose))
    if with_table:
        table_pose = Pose(np.array([0.0, 0.0, w.table_height - TABLE_HALF[2]]))
        entries.append((TABLE_ID, box(*TABLE_HALF), table_pose))
    return entries


@dataclass
class GroundTruthScene:
    world: WorldState
    task: TaskSpec
    cameras: list
    family: str


def _gripper_home():
    return GripperState(pose=Pose(np.array([-0.05, -0.12, 0.24])), aperture="open", held=None)


def _world(objects) -> WorldState:
    return settle(WorldState(objects=tuple(objects), gripper=_gripper_home(), table_height=0.0))


def lift_scene() -> GroundTruthScene:
    objs = [
        SceneObject(id=1, name="banana", shape=box(0.045, 0.018, 0.018),
                    pose=Pose(np.array([0.02, 0.03, 0.018])), graspable=True),
        SceneObject(id=2, name="block", shape=box(0.03, 0.03, 0.03),
                    pose=Pose(np.array([0.2, -0.16, 0.03])), graspable=False),
    ]
    task = TaskSpec("lift", [1], {"lift_height": 0.10})
    return GroundTruthScene(_world(objs), task, standard_cameras(), "lift")


def press_scene() -> GroundTruthScene:
    objs = [
        SceneObject(id=1, name="button", shape=box(0.02, 0.02, 0.01),
                    pose=Pose(np.array([0.0, 0.0, 0.045])), graspable=False,
                    support_height=0.045, pressable=True),
        SceneObject(id=2, name="block", shape=box(0.03, 0.03, 0.03),
                    pose=Pose(np.array([-0.2, 0.18, 0.03])), graspable=False),
    ]
    task = TaskSpec("press", [1], {"press_depth": 0.015})
    return GroundTruthScene(_world(objs), task, standard_cameras(), "press")


def insert_scene() -> GroundTruthScene:
    objs = [
        SceneObject(id=1, name="pen", shape=cylinder(0.01, 0.06),
                    pose=Pose(np.array([-0.12, -0.08, 0.06])), graspable=True),
        SceneObject(id=2, name="cup", shape=cylinder(0.04, 0.05),
                    pose=Pose(np.array([0.1, 0.08, 0.05])), graspable=False, hollow=True),
    ]
    task = TaskSpec("insert", [1, 2], {"insert_xy_tol": 0.02})
    return GroundTruthScene(_world(objs), task, standard_cameras(), "insert")


def pick_place_scene() -> GroundTruthScene:
    objs = [
        SceneObject(id=1, name="apple", shape=sphere(0.035),
                    pose=Pose(np.array([-0.14, 0.1, 0.035])), graspable=True),
        SceneObject(id=2, name="plate", shape=cylinder(0.12, 0.01),
                    pose=Pose(np.array([0.12, -0.06, 0.01])), graspable=False),
    ]
    task = TaskSpec("pick_place", [1, 2], {"contain_frac": 0.8})
    return GroundTruthScene(_world(objs), task, standard_cameras(), "pick_place")


def stack_scene() -> GroundTruthScene:
    objs = [
        SceneObject(id=1, name="can_a", shape=cylinder(0.035, 0.06),
                    pose=Pose(np.array([-0.1, 0.12, 0.06])), graspable=True),
        SceneObject(id=2, name="can_b", shape=cylinder(0.06, 0.06),
                    pose=Pose(np.array([0.12, -0.08, 0.06])), graspable=True),
    ]
    task = TaskSpec("stack", [1, 2])
    return GroundTruthScene(_world(objs), task, standard_cameras(), "stack")


SCENE_BUILDERS = {
    "lift": lift_scene,
    "press": press_scene,
    "insert": insert_scene,
    "pick_place": pick_place_scene,
    "stack": stack_scene,
}


def build_scene(family: str) -> GroundTruthScene:
    if family not in SCENE_BUILDERS:
        raise ValueError(f"unknown task family {family!r}")
    return SCENE_BUILDERS[family]()


def noisy_estimates(gt: GroundTruthScene, translation_scale: float, yaw_scale: float,
                    master_seed: int, index: int = 0):
    """Synthetic pose-estimation front end: ground-truth poses corrupted by
    uniform per-axis translation and yaw noise. Stands in for an external
    6-DoF pose estimator; everything downstream sees only these estimates."""
    from .geometry import pose_from_yaw, quat_mul, quat_from_yaw
    from .refine import PoseEstimate

    rng = stream(master_seed, "pose-noise", index)
    out = []
    for o in gt.world.objects:
        dt = rng.uniform(-translation_scale, translation_scale, size=3)
        dyaw = float(rng.uniform(-yaw_scale, yaw_scale))
        pose = Pose(o.pose.t + dt, quat_mul(quat_from_yaw(dyaw), o.pose.q))
        out.append(PoseEstimate(object_id=o.id, pose=pose,
                                translation_noise_scale=translation_scale,
                                yaw_noise_scale=yaw_scale))
    return out


def world_with_poses(template: WorldState, poses: dict) -> WorldState:
    """Copy of template with object poses replaced (ids missing keep theirs)."""
    w = template
    for oid, pose in sorted(poses.items()):
        w = w.with_object_pose(oid, pose)
    return w


def randomize_placements(world: WorldState, rng: np.random.Generator,
                         translation_scale: float = 0.10, ee_sigma: float = 0.02,
                         max_tries: int = 20, xy_bound: float = 0.35,
                         physics=None) -> WorldState:
    """Uniform per-object planar translation plus Gaussian end-effector noise,
    resampled until the settled scene is collision-free and on the table."""
    from .world import DEFAULT_PHYSICS, check_collision
    from dataclasses import replace as _replace

    physics = physics or DEFAULT_PHYSICS
    for _ in range(max_tries):
        w = world
        ok = True
        for o in world.objects:
            d = rng.uniform(-translation_scale, translation_scale, size=2)
            t = o.pose.t.copy()
            t[0] += d[0]
            t[1] += d[1]
            if abs(t[0]) > xy_bound or abs(t[1]) > xy_bound:
                ok = False
            w = w.with_object_pose(o.id, Pose(t, o.pose.q))
        gt = world.gripper.pose.t + rng.normal(0.0, ee_sigma, size=3)
        gt[2] = max(gt[2], physics.gripper_min_clearance + 0.02)
        w = _replace(w, gripper=GripperState(pose=Pose(gt, world.gripper.pose.q),
                                             aperture=world.gripper.aperture, held=None))
        if not ok:
            continue
        w = settle(w, physics)
        if not check_collision(w, physics):
            return w
    raise RuntimeError(f"no feasible randomized placement in {max_tries} tries")

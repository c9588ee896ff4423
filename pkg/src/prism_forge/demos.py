"""Stand-in expert demonstrations and their mapping into simulated scenes.

Demonstrations are produced by a hand-coded waypoint controller running in a
held-out ground-truth world; the rest of the pipeline only ever sees the
recorded frames (poses, actions, rendered observations) and noisy pose
estimates. Mapping to simulation replays the recorded action sequence
open-loop through the world stepper.

Every scripted demo ends with a single no-op frame, so the last frame's state
is the settled post-task state.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import IdDepthImage, Pose
from .seeding import stream
from .world import (
    Action,
    DEFAULT_PHYSICS,
    GripperState,
    TaskSpec,
    WorldState,
    settle,
    step,
    task_success,
    top_point_z,
)
from .scenes import render_entries

MAX_DEMO_FRAMES = 120


@dataclass
class DemoFrame:
    gripper_pose: Pose
    aperture: str
    action: Action
    observations: list = None      # IdDepthImage per camera, None if not loaded
    obs_refs: list = field(default_factory=list)


@dataclass
class Demonstration:
    id: str
    task: TaskSpec
    frames: list
    source: str = "scripted"

    def __post_init__(self):
        if not self.frames:
            raise ValueError("demonstration must have at least one frame")

    def gripper_positions(self) -> np.ndarray:
        return np.array([f.gripper_pose.t for f in self.frames])

    def apertures(self) -> list:
        return [f.aperture for f in self.frames]

    def actions(self) -> list:
        return [f.action for f in self.frames]


@dataclass
class SimFrame:
    state: WorldState
    action: Action


@dataclass
class SimDemonstration:
    demo_id: str
    scene_ref: str
    frames: list
    final_state: WorldState


@dataclass
class ReplayReport:
    success: bool
    constraint_rows: list          # (t, object_id, residual, epsilon, satisfied)
    final_task_success: bool
    max_residual: float

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "final_task_success": self.final_task_success,
            "max_residual": self.max_residual,
            "constraints": [
                {"t": t, "object_id": m, "residual": r, "epsilon": e, "satisfied": ok}
                for (t, m, r, e, ok) in self.constraint_rows
            ],
        }


# ---------------------------------------------------------------------------
# scripted expert


class ScriptError(RuntimeError):
    pass


class _Recorder:
    def __init__(self, world, cameras, record_observations, physics):
        self.w = world
        self.cameras = cameras
        self.record = record_observations
        self.physics = physics
        self.frames = []

    def _observe(self):
        if not self.record:
            return None
        from .geometry import rasterize

        entries = render_entries(self.w)
        return [rasterize(entries, cam) for cam in self.cameras]

    def emit(self, action: Action):
        if len(self.frames) >= MAX_DEMO_FRAMES:
            raise ScriptError("step budget exhausted; scene misconfigured")
        self.frames.append(
            DemoFrame(
                gripper_pose=self.w.gripper.pose,
                aperture=self.w.gripper.aperture,
                action=action,
                observations=self._observe(),
            )
        )
        self.w = step(self.w, action, self.physics)

    def drive_to(self, waypoint, tol=0.004, stop_on_contact=False):
        waypoint = np.asarray(waypoint, dtype=float)
        for _ in range(MAX_DEMO_FRAMES):
            delta = waypoint - self.w.gripper.pose.t
            if float(np.linalg.norm(delta)) <= tol:
                return
            before = self.w.gripper.pose.t.copy()
            self.emit(Action(np.clip(delta, -0.05, 0.05), 0.0, "hold"))
            moved = float(np.linalg.norm(self.w.gripper.pose.t - before))
            if stop_on_contact and moved < 1e-7:
                return
        raise ScriptError(f"cannot reach waypoint {waypoint}; scene misconfigured")

    def grip(self, command: str):
        self.emit(Action(np.zeros(3), 0.0, command))

    def noop(self):
        self.emit(Action(np.zeros(3), 0.0, "hold"))


def generate_scripted_demo(task: TaskSpec, world: WorldState, cameras, seed: int,
                           demo_id: str = "demo", record_observations: bool = True,
                           physics=DEFAULT_PHYSICS) -> Demonstration:
    """Run the waypoint expert for `task` in the ground-truth `world`.

    Succeeds by construction: raises ScriptError if the final frame does not
    satisfy the task predicate.
    """
    rng = stream(seed, "demo-script")
    jitter = rng.uniform(-0.008, 0.008, size=2)
    rec = _Recorder(settle(world, physics), cameras, record_observations, physics)
    fam = task.family

    def above(xy, z):
        return np.array([xy[0] + jitter[0], xy[1] + jitter[1], z])

    if fam == "lift":
        target = rec.w.obj(task.target_ids[0])
        rec.drive_to(above(target.pose.t[:2], 0.16))
        rec.drive_to(np.array([*target.pose.t[:2], target.pose.t[2]]), tol=0.003)
        rec.grip("close")
        lift_to = target.shape.rest_offset() + task.threshold("lift_height", 0.10) + 0.12
        rec.drive_to(np.array([*rec.w.gripper.pose.t[:2], lift_to]))
    elif fam == "press":
        button = rec.w.obj(task.target_ids[0])
        rec.drive_to(above(button.pose.t[:2], 0.14), tol=0.003)
        rec.drive_to(np.array([button.pose.t[0], button.pose.t[1], 0.02]),
                     tol=0.001, stop_on_contact=True)
    elif fam == "insert":
        pen = rec.w.obj(task.target_ids[0])
        cup = rec.w.obj(task.target_ids[1])
        rec.drive_to(above(pen.pose.t[:2], 0.2))
        rec.drive_to(pen.pose.t.copy(), tol=0.003)
        rec.grip("close")
        rec.drive_to(np.array([*rec.w.gripper.pose.t[:2], 0.22]))
        rec.drive_to(np.array([cup.pose.t[0], cup.pose.t[1], 0.22]), tol=0.003)
        floor_z = (cup.pose.t[2] - cup.shape.params[1]) + physics.hollow_floor
        rec.drive_to(np.array([cup.pose.t[0], cup.pose.t[1], floor_z + pen.shape.params[1] - 0.002]),
                     tol=0.001, stop_on_contact=True)
        rec.grip("open")
    elif fam == "pick_place":
        obj = rec.w.obj(task.target_ids[0])
        plate = rec.w.obj(task.target_ids[1])
        rec.drive_to(above(obj.pose.t[:2], 0.2))
        rec.drive_to(obj.pose.t.copy(), tol=0.003)
        rec.grip("close")
        rec.drive_to(np.array([*rec.w.gripper.pose.t[:2], 0.22]))
        rec.drive_to(np.array([plate.pose.t[0], plate.pose.t[1], 0.22]), tol=0.003)
        rest = top_point_z(plate) + obj.shape.rest_offset()
        rec.drive_to(np.array([plate.pose.t[0], plate.pose.t[1], rest - 0.003]),
                     tol=0.001, stop_on_contact=True)
        rec.grip("open")
    elif fam == "stack":
        top = rec.w.obj(task.target_ids[0])
        bottom = rec.w.obj(task.target_ids[1])
        rec.drive_to(above(top.pose.t[:2], 0.22))
        rec.drive_to(top.pose.t.copy(), tol=0.003)
        rec.grip("close")
        carry = top_point_z(bottom) + top.shape.params[1] + 0.1
        rec.drive_to(np.array([*rec.w.gripper.pose.t[:2], carry]))
        rec.drive_to(np.array([bottom.pose.t[0], bottom.pose.t[1], carry]), tol=0.003)
        rest = top_point_z(bottom) + top.shape.params[1]
        rec.drive_to(np.array([bottom.pose.t[0], bottom.pose.t[1], rest - 0.003]),
                     tol=0.001, stop_on_contact=True)
        rec.grip("open")
    else:
        raise ScriptError(f"no script for family {fam!r}")

    rec.noop()
    if not task_success(rec.w, task, physics):
        raise ScriptError(f"script failed to achieve {fam} success; scene misconfigured")
    return Demonstration(id=demo_id, task=task, frames=rec.frames, source="scripted")


# ---------------------------------------------------------------------------
# sim mapping and replay measurement


def map_to_sim(demo: Demonstration, scene_world: WorldState, scene_ref: str = "",
               physics=DEFAULT_PHYSICS) -> SimDemonstration:
    """Open-loop replay of the demo's actions from the (refined) scene.

    States are captured before each action; actions are copied verbatim.
    """
    g0 = demo.frames[0]
    w = replace(scene_world,
                gripper=GripperState(pose=g0.gripper_pose, aperture=g0.aperture, held=None))
    w = settle(w, physics)
    frames = []
    for f in demo.frames:
        frames.append(SimFrame(state=w, action=f.action))
        w = step(w, f.action, physics)
    return SimDemonstration(demo_id=demo.id, scene_ref=scene_ref, frames=frames, final_state=w)


def replay_report(simdemo: SimDemonstration, demo: Demonstration, constraints,
                  physics=DEFAULT_PHYSICS) -> ReplayReport:
    """Key-state constraint satisfaction and final task success of a replay."""
    rows = []
    max_res = 0.0
    for c in constraints:
        grip = demo.frames[c.t_index].gripper_pose.t
        obj = simdemo.frames[c.t_index].state.obj(c.object_id)
        residual = float(np.linalg.norm(grip - obj.pose.t))
        ok = residual <= c.epsilon
        rows.append((c.t_index, c.object_id, residual, c.epsilon, ok))
        max_res = max(max_res, residual)
    final = task_success(simdemo.final_state, demo.task, physics)
    success = final and all(r[4] for r in rows)
    return ReplayReport(success=success, constraint_rows=rows,
                        final_task_success=final, max_residual=max_res)


# ---------------------------------------------------------------------------
# serialization: JSON document + hashed binary image blobs


_BLOB_MAGIC = b"PFIM"


def _image_bytes(img: IdDepthImage) -> bytes:
    ids = np.ascontiguousarray(img.ids, dtype="<i4")
    depth = np.ascontiguousarray(img.depth, dtype="<f8")
    header = _BLOB_MAGIC + struct.pack("<II", img.height, img.width)
    return header + ids.tobytes() + depth.tobytes()


def _image_from_bytes(buf: bytes) -> IdDepthImage:
    if buf[:4] != _BLOB_MAGIC:
        raise ValueError("bad image blob magic")
    h, w = struct.unpack("<II", buf[4:12])
    n = h * w
    ids = np.frombuffer(buf[12:12 + 4 * n], dtype="<i4").reshape(h, w).astype(np.int32)
    depth = np.frombuffer(buf[12 + 4 * n:12 + 12 * n], dtype="<f8").reshape(h, w).astype(float)
    return IdDepthImage(ids=ids, depth=depth)


def save_demo(demo: Demonstration, path, blob_dir=None) -> None:
    frames = []
    for f in demo.frames:
        refs = []
        if f.observations is not None and blob_dir is not None:
            blob_dir.mkdir(parents=True, exist_ok=True)
            for img in f.observations:
                buf = _image_bytes(img)
                h = hashlib.sha256(buf).hexdigest()[:24]
                blob = blob_dir / f"{h}.bin"
                if not blob.exists():
                    blob.write_bytes(buf)
                refs.append(h)
        frames.append(
            {
                "gripper": f.gripper_pose.to_json(),
                "aperture": f.aperture,
                "action": f.action.to_json(),
                "obs_refs": refs,
            }
        )
    doc = {"id": demo.id, "task": demo.task.to_json(), "frames": frames, "source": demo.source}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_demo(path, blob_dir=None, load_observations=False) -> Demonstration:
    with open(path) as fh:
        doc = json.load(fh)
    frames = []
    for fd in doc["frames"]:
        obs = None
        if load_observations and fd["obs_refs"] and blob_dir is not None:
            obs = [_image_from_bytes((blob_dir / f"{h}.bin").read_bytes()) for h in fd["obs_refs"]]
        frames.append(
            DemoFrame(
                gripper_pose=Pose.from_json(fd["gripper"]),
                aperture=fd["aperture"],
                action=Action.from_json(fd["action"]),
                observations=obs,
                obs_refs=list(fd["obs_refs"]),
            )
        )
    return Demonstration(id=doc["id"], task=TaskSpec.from_json(doc["task"]),
                         frames=frames, source=doc.get("source", "recorded"))

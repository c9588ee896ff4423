"""Quasi-static tabletop world: objects, gripper, action stepping, gravity
settling, and analytic collision queries.

No velocities or friction: motion is kinematic, infeasible moves truncate at
contact, and unheld objects drop straight to their support height after every
step. This keeps transitions exactly reproducible.

Cylinders use their bounding capsule for collision queries; rasterization
(geometry module) treats them exactly. Footprint reasoning assumes objects
stay upright (scene rotations are yaw-only), which holds for every built-in
scene and for the yaw-only action space.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera, Pose, Shape, compose, invert, pose_from_yaw, quat_from_yaw, quat_mul

PEN_TOL = 1e-4        # reported-penetration threshold
CONTACT_TOL = 1e-7    # allowed numeric overlap during motion
DT_CLAMP = 0.05
DYAW_CLAMP = 0.2

GRIP_COMMANDS = ("open", "close", "hold")


@dataclass
class Physics:
    grasp_radius: float = 0.03
    stack_overlap_frac: float = 0.5
    gripper_contact_radius: float = 0.015
    gripper_min_clearance: float = 0.004
    press_travel: float = 0.02
    hollow_floor: float = 0.005


DEFAULT_PHYSICS = Physics()


@dataclass
class SceneObject:
    id: int
    name: str
    shape: Shape
    pose: Pose
    graspable: bool
    support_height: float = None
    pressable: bool = False
    hollow: bool = False

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("object ids must be positive")
        if self.support_height is None:
            self.support_height = self.shape.rest_offset()


@dataclass
class GripperState:
    pose: Pose
    aperture: str = "open"          # open | closed
    held: int | None = None

    def __post_init__(self):
        if self.aperture not in ("open", "closed"):
            raise ValueError(f"bad aperture {self.aperture!r}")
        if self.held is not None and self.aperture != "closed":
            raise ValueError("held object requires closed aperture")


@dataclass
class WorldState:
    objects: tuple
    gripper: GripperState
    table_height: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate object ids")
        self.objects = tuple(self.objects)

    def obj(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def with_object_pose(self, oid: int, pose: Pose) -> "WorldState":
        objs = tuple(replace(o, pose=pose) if o.id == oid else o for o in self.objects)
        return replace(self, objects=objs)


@dataclass(frozen=True)
class Action:
    delta_t: np.ndarray
    delta_yaw: float
    grip: str

    def __post_init__(self):
        object.__setattr__(self, "delta_t", np.asarray(self.delta_t, dtype=float).reshape(3).copy())
        if self.grip not in GRIP_COMMANDS:
            raise ValueError(f"bad grip command {self.grip!r}")

    def to_json(self) -> dict:
        return {"dt": [float(v) for v in self.delta_t], "dyaw": float(self.delta_yaw), "grip": self.grip}

    @staticmethod
    def from_json(d: dict) -> "Action":
        return Action(np.array(d["dt"], dtype=float), float(d["dyaw"]), d["grip"])


def clamp_action(a: Action) -> Action:
    return Action(
        np.clip(a.delta_t, -DT_CLAMP, DT_CLAMP),
        float(np.clip(a.delta_yaw, -DYAW_CLAMP, DYAW_CLAMP)),
        a.grip,
    )


TASK_FAMILIES = ("lift", "press", "insert", "pick_place", "stack")


@dataclass
class TaskSpec:
    family: str
    target_ids: list
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in TASK_FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")

    def threshold(self, key: str, default: float) -> float:
        return float(self.thresholds.get(key, default))

    def to_json(self) -> dict:
        return {"family": self.family, "target_ids": list(self.target_ids), "thresholds": dict(self.thresholds)}

    @staticmethod
    def from_json(d: dict) -> "TaskSpec":
        return TaskSpec(d["family"], list(d["target_ids"]), dict(d.get("thresholds", {})))


# ---------------------------------------------------------------------------
# collision primitives


UPRIGHT_AXIS_Z = 0.999


def _capsule(obj: SceneObject):
    r, hh = obj.shape.params
    a = obj.pose.apply([0.0, 0.0, -hh])
    b = obj.pose.apply([0.0, 0.0, hh])
    return a, b, r


def _is_upright_cylinder(obj: SceneObject) -> bool:
    return obj.shape.kind == "cylinder" and abs(obj.pose.rotation()[2, 2]) >= UPRIGHT_AXIS_Z


def _upright_cyl_cyl_penetration(o1: SceneObject, o2: SceneObject) -> float:
    r1, h1 = o1.shape.params
    r2, h2 = o2.shape.params
    pen_z = (h1 + h2) - abs(float(o1.pose.t[2] - o2.pose.t[2]))
    pen_r = (r1 + r2) - float(np.hypot(*(o1.pose.t[:2] - o2.pose.t[:2])))
    return min(pen_z, pen_r)


def _upright_cyl_sphere_penetration(cyl: SceneObject, sph: SceneObject) -> float:
    r_c, hh = cyl.shape.params
    r_s = sph.shape.params[0]
    dxy = float(np.hypot(*(sph.pose.t[:2] - cyl.pose.t[:2]))) - r_c
    dz = abs(float(sph.pose.t[2] - cyl.pose.t[2])) - hh
    if dxy > 0.0 or dz > 0.0:
        sd = float(np.hypot(max(dxy, 0.0), max(dz, 0.0)))
    else:
        sd = max(dxy, dz)
    return r_s - sd


def _point_box_signed_dist(p_local: np.ndarray, half: np.ndarray) -> float:
    d = np.abs(p_local) - half
    outside = np.maximum(d, 0.0)
    out_dist = float(np.linalg.norm(outside))
    if out_dist > 0.0:
        return out_dist
    return float(d.max())  # negative: inside depth


def _point_box_sd_world(point, pose: Pose, half) -> float:
    local = invert(pose).apply(point)
    return _point_box_signed_dist(local, np.asarray(half))


def _segment_point_closest(a, b, p):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-18 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + t * ab


def _segment_segment_dist(p1, q1, p2, q2) -> float:
    # standard closest-point-between-segments routine
    d1, d2 = q1 - p1, q2 - p2
    r = p1 - p2
    a, e, f = float(d1 @ d1), float(d2 @ d2), float(d2 @ r)
    if a < 1e-18 and e < 1e-18:
        return float(np.linalg.norm(r))
    if a < 1e-18:
        t = np.clip(f / e, 0.0, 1.0)
        return float(np.linalg.norm(p1 - (p2 + t * d2)))
    c = float(d1 @ r)
    if e < 1e-18:
        s = np.clip(-c / a, 0.0, 1.0)
        return float(np.linalg.norm(p1 + s * d1 - p2))
    b = float(d1 @ d2)
    denom = a * e - b * b
    s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > 1e-18 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = float(np.clip(-c / a, 0.0, 1.0))
    elif t > 1.0:
        t = 1.0
        s = float(np.clip((b - c) / a, 0.0, 1.0))
    return float(np.linalg.norm((p1 + s * d1) - (p2 + t * d2)))


def _segment_box_min_sd(a, b, pose: Pose, half) -> float:
    # signed distance from a convex set is convex along the segment: ternary search
    inv = invert(pose)
    la, lb = inv.apply(a), inv.apply(b)
    half = np.asarray(half)
    lo, hi = 0.0, 1.0
    for _ in range(70):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        f1 = _point_box_signed_dist(la + m1 * (lb - la), half)
        f2 = _point_box_signed_dist(la + m2 * (lb - la), half)
        if f1 < f2:
            hi = m2
        else:
            lo = m1
    mids = [0.0, (lo + hi) / 2.0, 1.0]
    return min(_point_box_signed_dist(la + t * (lb - la), half) for t in mids)


def _box_box_penetration(o1: SceneObject, o2: SceneObject) -> float:
    r1, r2 = o1.pose.rotation(), o2.pose.rotation()
    h1, h2 = np.asarray(o1.shape.params), np.asarray(o2.shape.params)
    d = o2.pose.t - o1.pose.t
    axes = [r1[:, i] for i in range(3)] + [r2[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(r1[:, i], r2[:, j])
            n = np.linalg.norm(c)
            if n > 1e-9:
                axes.append(c / n)
    min_overlap = np.inf
    for ax in axes:
        proj1 = float(np.abs(r1.T @ ax) @ h1)
        proj2 = float(np.abs(r2.T @ ax) @ h2)
        overlap = proj1 + proj2 - abs(float(d @ ax))
        if overlap < min_overlap:
            min_overlap = overlap
        if min_overlap <= 0.0:
            return min_overlap
    return min_overlap


def pair_penetration(o1: SceneObject, o2: SceneObject) -> float:
    """Penetration depth (> 0 means overlap) for any primitive pair."""
    k1, k2 = o1.shape.kind, o2.shape.kind
    if k1 > k2:
        return pair_penetration(o2, o1)
    if k1 == "sphere" and k2 == "sphere":
        return o1.shape.params[0] + o2.shape.params[0] - float(np.linalg.norm(o1.pose.t - o2.pose.t))
    if k1 == "box" and k2 == "sphere":
        sd = _point_box_sd_world(o2.pose.t, o1.pose, o1.shape.params)
        return o2.shape.params[0] - sd
    if k1 == "box" and k2 == "box":
        return _box_box_penetration(o1, o2)
    if k1 == "cylinder" and k2 == "sphere":
        if _is_upright_cylinder(o1):
            return _upright_cyl_sphere_penetration(o1, o2)
        a, b, r = _capsule(o1)
        cp = _segment_point_closest(a, b, o2.pose.t)
        return r + o2.shape.params[0] - float(np.linalg.norm(cp - o2.pose.t))
    if k1 == "box" and k2 == "cylinder":
        a, b, r = _capsule(o2)
        sd = _segment_box_min_sd(a, b, o1.pose, o1.shape.params)
        return r - sd
    # cylinder-cylinder
    if _is_upright_cylinder(o1) and _is_upright_cylinder(o2):
        return _upright_cyl_cyl_penetration(o1, o2)
    a1, b1, r1 = _capsule(o1)
    a2, b2, r2 = _capsule(o2)
    return r1 + r2 - _segment_segment_dist(a1, b1, a2, b2)


def sphere_object_penetration(center, radius, obj: SceneObject) -> float:
    probe = SceneObject(id=999999, name="_probe", shape=Shape("sphere", (radius,)),
                        pose=Pose(np.asarray(center, dtype=float)), graspable=False)
    return pair_penetration(probe, obj)


def _cylinder_z_reach(obj: SceneObject) -> float:
    r, hh = obj.shape.params
    az = abs(float(obj.pose.rotation()[2, 2]))
    return az * hh + r * float(np.sqrt(max(1.0 - az * az, 0.0)))


def lowest_point_z(obj: SceneObject) -> float:
    if obj.shape.kind == "sphere":
        return float(obj.pose.t[2]) - obj.shape.params[0]
    if obj.shape.kind == "box":
        rot = obj.pose.rotation()
        half = np.asarray(obj.shape.params)
        return float(obj.pose.t[2]) - float(np.abs(rot[2, :]) @ half)
    return float(obj.pose.t[2]) - _cylinder_z_reach(obj)


def top_point_z(obj: SceneObject) -> float:
    if obj.shape.kind == "sphere":
        return float(obj.pose.t[2]) + obj.shape.params[0]
    if obj.shape.kind == "box":
        rot = obj.pose.rotation()
        half = np.asarray(obj.shape.params)
        return float(obj.pose.t[2]) + float(np.abs(rot[2, :]) @ half)
    return float(obj.pose.t[2]) + _cylinder_z_reach(obj)


def check_collision(w: WorldState, physics: Physics = DEFAULT_PHYSICS) -> list:
    """All object pairs penetrating deeper than PEN_TOL, as (idA, idB, depth)."""
    out = []
    solid = [o for o in w.objects if not o.hollow]
    for i in range(len(solid)):
        for j in range(i + 1, len(solid)):
            a, b = solid[i], solid[j]
            if a.id > b.id:
                a, b = b, a
            pen = pair_penetration(a, b)
            if pen > PEN_TOL:
                out.append((a.id, b.id, float(pen)))
    out.sort(key=lambda r: (r[0], r[1]))
    return out


# ---------------------------------------------------------------------------
# footprints (xy shadows, upright assumption for boxes/cylinders)


def footprint_contains(obj: SceneObject, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    if obj.shape.kind == "sphere":
        r = obj.shape.params[0]
        return np.hypot(pts[:, 0] - obj.pose.t[0], pts[:, 1] - obj.pose.t[1]) <= r
    if obj.shape.kind == "cylinder":
        r, hh = obj.shape.params
        axis = obj.pose.rotation() @ np.array([0.0, 0.0, 1.0])
        r_eff = r + float(np.hypot(axis[0], axis[1])) * hh
        return np.hypot(pts[:, 0] - obj.pose.t[0], pts[:, 1] - obj.pose.t[1]) <= r_eff
    corners = _box_corners(obj)[:, :2]
    hull = _convex_hull_2d(corners)
    return _in_convex_polygon(hull, pts)


def _box_corners(obj: SceneObject) -> np.ndarray:
    half = np.asarray(obj.shape.params)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    rot = obj.pose.rotation()
    return (signs * half) @ rot.T + obj.pose.t


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    pts = np.unique(np.round(pts, 12), axis=0)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) <= 2:
        return pts

    def cross2(u, v):
        return u[0] * v[1] - u[1] * v[0]

    def half_hull(points):
        hull = []
        for p in points:
            while len(hull) >= 2 and cross2(hull[-1] - hull[-2], p - hull[-2]) <= 0:
                hull.pop()
            hull.append(p)
        return hull

    lower = half_hull(pts)
    upper = half_hull(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _in_convex_polygon(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    if len(poly) < 3:
        return np.zeros(len(pts), dtype=bool)
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        edge = b - a
        rel = pts - a
        inside &= edge[0] * rel[:, 1] - edge[1] * rel[:, 0] >= -1e-12
    return inside


def footprint_bbox(obj: SceneObject):
    if obj.shape.kind == "box":
        c = _box_corners(obj)[:, :2]
        return c.min(axis=0), c.max(axis=0)
    r = obj.shape.bounding_radius()
    c = obj.pose.t[:2]
    return c - r, c + r


def footprint_overlap_frac(obj: SceneObject, support: SceneObject, grid: int = 24) -> float:
    """Fraction of obj's footprint lying within support's footprint."""
    lo, hi = footprint_bbox(obj)
    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    in_self = footprint_contains(obj, pts)
    n_self = int(in_self.sum())
    if n_self == 0:
        return 0.0
    in_both = footprint_contains(support, pts[in_self])
    return float(in_both.sum()) / n_self


# ---------------------------------------------------------------------------
# settling


def _rest_z(obj: SceneObject, table_height: float) -> float:
    return table_height + obj.support_height


def _support_offset(obj: SceneObject) -> float:
    return float(obj.pose.t[2]) - lowest_point_z(obj)


def _placed(obj: SceneObject, z: float) -> SceneObject:
    t = obj.pose.t.copy()
    t[2] = z
    return replace(obj, pose=Pose(t, obj.pose.q))


def _penetrates_any(candidate: SceneObject, others) -> bool:
    for other in others:
        if other.hollow or candidate.hollow:
            continue
        if pair_penetration(candidate, other) > PEN_TOL:
            return True
    return False


def settle(w: WorldState, physics: Physics = DEFAULT_PHYSICS) -> WorldState:
    """Drop every unheld object to its lowest supported non-penetrating height.

    Supports: the table, tops of objects overlapped by at least
    stack_overlap_frac of the footprint, or a hollow container's floor when the
    object's origin lies over it. Pressable objects latch anywhere within their
    travel below rest height. Idempotent.
    """
    objs = {o.id: o for o in w.objects}
    held_id = w.gripper.held
    order = sorted((o for o in w.objects if o.id != held_id), key=lambda o: (lowest_point_z(o), o.id))
    for obj in order:
        obj = objs[obj.id]
        if obj.pressable:
            rest = _rest_z(obj, w.table_height)
            z = float(np.clip(obj.pose.t[2], rest - physics.press_travel, rest))
            objs[obj.id] = _placed(obj, z)
            continue
        off = _support_offset(obj)
        others = [o for oid, o in sorted(objs.items()) if oid not in (obj.id, held_id)]
        if held_id is not None:
            others.append(objs[held_id])
        candidates = [w.table_height + off]
        fallback = []
        for other in others:
            if other.hollow:
                if footprint_contains(other, obj.pose.t[:2][None])[0]:
                    floor = lowest_point_z(other) + physics.hollow_floor
                    candidates.append(floor + off)
                continue
            frac = footprint_overlap_frac(obj, other)
            if frac > 0.0:
                top = top_point_z(other) + off
                if frac >= physics.stack_overlap_frac:
                    candidates.append(top)
                else:
                    fallback.append(top)
        placed = None
        for z in sorted(candidates) + sorted(fallback):
            cand = _placed(obj, z)
            if not _penetrates_any(cand, others):
                placed = cand
                break
        if placed is None:
            # no support admits it (degenerate input): raise until clear
            z = max(top_point_z(o) for o in others) + off if others else w.table_height + off
            cand = _placed(obj, z)
            for _ in range(200):
                if not _penetrates_any(cand, others):
                    break
                z += 0.005
                cand = _placed(obj, z)
            placed = cand
        objs[obj.id] = placed
    new_objects = tuple(objs[o.id] for o in w.objects)
    return replace(w, objects=new_objects)


# ---------------------------------------------------------------------------
# stepping


def _held_rel(gripper_pose: Pose, obj_pose: Pose) -> Pose:
    return compose(invert(gripper_pose), obj_pose)


def _gripper_pose_at(g: Pose, dt: np.ndarray, dyaw: float, alpha: float) -> Pose:
    t = g.t + alpha * dt
    q = quat_mul(quat_from_yaw(alpha * dyaw), g.q)
    return Pose(t, q)


def _move_feasible(w: WorldState, pose: Pose, held_rel, physics: Physics) -> bool:
    if pose.t[2] < w.table_height + physics.gripper_min_clearance:
        return False
    for obj in w.objects:
        if obj.pressable:
            floored = _placed(obj, _rest_z(obj, w.table_height) - physics.press_travel)
            if sphere_object_penetration(pose.t, physics.gripper_contact_radius, floored) > CONTACT_TOL:
                return False
    if w.gripper.held is not None:
        held = w.obj(w.gripper.held)
        moved = replace(held, pose=compose(pose, held_rel))
        if lowest_point_z(moved) < w.table_height - CONTACT_TOL:
            return False
        for other in w.objects:
            if other.id == held.id or other.hollow or other.pressable:
                continue
            if pair_penetration(moved, other) > CONTACT_TOL:
                return False
        for other in w.objects:
            if other.hollow and footprint_contains(other, moved.pose.t[:2][None])[0]:
                floor = lowest_point_z(other) + physics.hollow_floor
                if lowest_point_z(moved) < floor - CONTACT_TOL:
                    return False
    return True


def step(w: WorldState, a: Action, physics: Physics = DEFAULT_PHYSICS) -> WorldState:
    """One quasi-static transition; infeasible motion truncates at contact."""
    a = clamp_action(a)
    g = w.gripper.pose
    held_rel = None
    if w.gripper.held is not None:
        held_rel = _held_rel(g, w.obj(w.gripper.held).pose)

    if _move_feasible(w, _gripper_pose_at(g, a.delta_t, a.delta_yaw, 1.0), held_rel, physics):
        alpha = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(44):
            mid = 0.5 * (lo + hi)
            if _move_feasible(w, _gripper_pose_at(g, a.delta_t, a.delta_yaw, mid), held_rel, physics):
                lo = mid
            else:
                hi = mid
        alpha = lo
    new_g = _gripper_pose_at(g, a.delta_t, a.delta_yaw, alpha)

    objs = {o.id: o for o in w.objects}
    if w.gripper.held is not None:
        oid = w.gripper.held
        objs[oid] = replace(objs[oid], pose=compose(new_g, held_rel))

    # gripper presses latching objects downward
    for obj in sorted(w.objects, key=lambda o: o.id):
        if not obj.pressable:
            continue
        cur = objs[obj.id]
        pen = sphere_object_penetration(new_g.t, physics.gripper_contact_radius, cur)
        if pen > CONTACT_TOL:
            rest = _rest_z(cur, w.table_height)
            z = float(np.clip(cur.pose.t[2] - pen, rest - physics.press_travel, rest))
            objs[obj.id] = _placed(cur, z)

    aperture, held = w.gripper.aperture, w.gripper.held
    if a.grip == "close":
        if aperture == "open":
            best = None
            for obj in sorted(w.objects, key=lambda o: o.id):
                if not obj.graspable or obj.id == held:
                    continue
                d = float(np.linalg.norm(objs[obj.id].pose.t - new_g.t))
                if d <= physics.grasp_radius and (best is None or d < best[0]):
                    best = (d, obj.id)
            held = best[1] if best else None
        aperture = "closed"
    elif a.grip == "open":
        aperture = "open"
        held = None

    new_w = WorldState(
        objects=tuple(objs[o.id] for o in w.objects),
        gripper=GripperState(pose=new_g, aperture=aperture, held=held),
        table_height=w.table_height,
        step_count=w.step_count + 1,
    )
    return settle(new_w, physics)


# ---------------------------------------------------------------------------
# task predicates (evaluation and oracle validation only, never a training signal)


def support_parent(w: WorldState, oid: int, physics: Physics = DEFAULT_PHYSICS):
    """Id of the object oid is resting on, or None (table/held/airborne)."""
    obj = w.obj(oid)
    if w.gripper.held == oid:
        return None
    bottom = lowest_point_z(obj)
    for other in sorted(w.objects, key=lambda o: o.id):
        if other.id == oid or other.hollow:
            continue
        if abs(bottom - top_point_z(other)) <= 1e-3 and footprint_overlap_frac(obj, other) >= physics.stack_overlap_frac:
            return other.id
    return None


def task_success(w: WorldState, task: TaskSpec, physics: Physics = DEFAULT_PHYSICS) -> bool:
    fam = task.family
    if fam == "lift":
        oid = task.target_ids[0]
        obj = w.obj(oid)
        thr = task.threshold("lift_height", 0.10)
        return w.gripper.held == oid and float(obj.pose.t[2]) >= _rest_z(obj, w.table_height) + thr
    if fam == "press":
        oid = task.target_ids[0]
        obj = w.obj(oid)
        thr = task.threshold("press_depth", 0.015)
        return _rest_z(obj, w.table_height) - float(obj.pose.t[2]) >= thr
    if fam == "insert":
        oid, cid = task.target_ids[0], task.target_ids[1]
        obj, cont = w.obj(oid), w.obj(cid)
        thr = task.threshold("insert_xy_tol", 0.02)
        xy = float(np.linalg.norm(obj.pose.t[:2] - cont.pose.t[:2]))
        return xy <= thr and float(obj.pose.t[2]) <= top_point_z(cont)
    if fam == "pick_place":
        oid, cid = task.target_ids[0], task.target_ids[1]
        obj, cont = w.obj(oid), w.obj(cid)
        thr = task.threshold("contain_frac", 0.8)
        if w.gripper.held == oid:
            return False
        contained = footprint_overlap_frac(obj, cont) >= thr
        if cont.hollow:
            resting = abs(lowest_point_z(obj) - (lowest_point_z(cont) + physics.hollow_floor)) <= 1e-3
        else:
            resting = support_parent(w, oid, physics) == cid
        return contained and resting
    if fam == "stack":
        top_id, bottom_id = task.target_ids[0], task.target_ids[1]
        return w.gripper.held != top_id and support_parent(w, top_id, physics) == bottom_id
    raise ValueError(f"unknown task family {fam!r}")


# ---------------------------------------------------------------------------
# scene JSON


def scene_to_json(w: WorldState, cameras=()) -> dict:
    objs = []
    for o in w.objects:
        d = {
            "id": o.id,
            "name": o.name,
            "shape": o.shape.to_json(),
            "pose": o.pose.to_json(),
            "graspable": o.graspable,
        }
        if o.support_height != o.shape.rest_offset():
            d["support_height"] = o.support_height
        if o.pressable:
            d["pressable"] = True
        if o.hollow:
            d["hollow"] = True
        objs.append(d)
    return {
        "table_height": w.table_height,
        "objects": objs,
        "cameras": [c.to_json() for c in cameras],
        "gripper": {
            "pose": w.gripper.pose.to_json(),
            "aperture": w.gripper.aperture,
            "held": w.gripper.held,
        },
    }


def scene_from_json(d: dict):
    """(WorldState, [Camera]) from the scene document."""
    objs = []
    for od in d["objects"]:
        objs.append(
            SceneObject(
                id=int(od["id"]),
                name=od["name"],
                shape=Shape.from_json(od["shape"]),
                pose=Pose.from_json(od["pose"]),
                graspable=bool(od["graspable"]),
                support_height=od.get("support_height"),
                pressable=bool(od.get("pressable", False)),
                hollow=bool(od.get("hollow", False)),
            )
        )
    g = d.get("gripper", {})
    gripper = GripperState(
        pose=Pose.from_json(g["pose"]) if "pose" in g else Pose(np.array([0.0, 0.0, 0.3])),
        aperture=g.get("aperture", "open"),
        held=g.get("held"),
    )
    w = WorldState(objects=tuple(objs), gripper=gripper, table_height=float(d.get("table_height", 0.0)))
    cams = [Camera.from_json(cd) for cd in d.get("cameras", [])]
    return w, cams


def load_scene(path):
    with open(path) as f:
        d = json.load(f)
    return scene_from_json(d)


def save_scene(path, w: WorldState, cameras=()):
    with open(path, "w") as f:
        json.dump(scene_to_json(w, cameras), f, indent=2, sort_keys=True)
        f.write("\n")

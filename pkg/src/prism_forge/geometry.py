"""Rigid-body math, pinhole cameras, and an analytic-primitive ray-casting rasterizer.

Conventions:
  - Quaternions are (w, x, y, z), unit norm, canonical sign (w >= 0; if w == 0
    the first nonzero of x, y, z is positive).
  - Camera frame: +x right, +y down (image rows grow with +y), +z forward.
  - Depth images store camera-frame z-depth in meters; background pixels hold
    exactly `far` and id 0.
"""

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-9


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + bw * ax + ay * bz - az * by,
            aw * by + bw * ay + az * bx - ax * bz,
            aw * bz + bw * az + ax * by - ay * bx,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method, numerically safe for all rotation matrices.
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return _canonical_quat(q)


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2.0), 0.0, 0.0, np.sin(yaw / 2.0)])


def yaw_of_quat(q: np.ndarray) -> float:
    w, x, y, z = q
    return float(np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z)))


@dataclass(frozen=True)
class Pose:
    """SE(3) transform: rotate by q then translate by t."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        object.__setattr__(self, "q", _canonical_quat(self.q))

    def rotation(self) -> np.ndarray:
        return quat_to_mat(self.q)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation() @ np.asarray(point, dtype=float) + self.t

    def to_json(self) -> dict:
        return {"t": [float(v) for v in self.t], "q": [float(v) for v in self.q]}

    @staticmethod
    def from_json(d: dict) -> "Pose":
        return Pose(np.array(d["t"], dtype=float), np.array(d["q"], dtype=float))


def identity_pose() -> Pose:
    return Pose()


def translation(x: float, y: float, z: float) -> Pose:
    return Pose(np.array([x, y, z], dtype=float))


def pose_from_yaw(t, yaw: float) -> Pose:
    return Pose(np.asarray(t, dtype=float), quat_from_yaw(yaw))


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    return Pose(a.rotation() @ b.t + a.t, quat_mul(a.q, b.q))


def invert(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(-(quat_to_mat(qi) @ p.t), qi)


def pose_distance(a: Pose, b: Pose) -> tuple:
    """(translation distance, quaternion distance up to sign)."""
    dt = float(np.linalg.norm(a.t - b.t))
    dq = min(float(np.linalg.norm(a.q - b.q)), float(np.linalg.norm(a.q + b.q)))
    return dt, dq


@dataclass(frozen=True)
class Shape:
    """Primitive solid.

    kind/params: box -> (hx, hy, hz) half-extents; sphere -> (radius,);
    cylinder -> (radius, half_height), axis along local z.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        expected = {"box": 3, "sphere": 1, "cylinder": 2}
        if self.kind not in expected:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        if len(p) != expected[self.kind]:
            raise ValueError(f"{self.kind} expects {expected[self.kind]} params, got {len(p)}")
        if any(v <= 0.0 for v in p):
            raise ValueError("shape dimensions must be strictly positive")
        object.__setattr__(self, "params", p)

    def bounding_radius(self) -> float:
        if self.kind == "box":
            return float(np.linalg.norm(self.params))
        if self.kind == "sphere":
            return self.params[0]
        r, hh = self.params
        return float(np.hypot(r, hh))

    def rest_offset(self) -> float:
        """Height of the origin above the lowest point, canonical upright pose."""
        if self.kind == "box":
            return self.params[2]
        if self.kind == "sphere":
            return self.params[0]
        return self.params[1]

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @staticmethod
    def from_json(d: dict) -> "Shape":
        return Shape(d["kind"], tuple(d["params"]))


def box(hx: float, hy: float, hz: float) -> Shape:
    return Shape("box", (hx, hy, hz))


def sphere(radius: float) -> Shape:
    return Shape("sphere", (radius,))


def cylinder(radius: float, half_height: float) -> Shape:
    return Shape("cylinder", (radius, half_height))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; pose maps camera frame to world frame."""

    pose: Pose
    focal: float
    principal: np.ndarray
    width: int
    height: int
    near: float = 0.05
    far: float = 3.0
    name: str = "cam"

    def __post_init__(self):
        object.__setattr__(self, "principal", np.asarray(self.principal, dtype=float).reshape(2).copy())
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution must be at least 8x8")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "pose": self.pose.to_json(),
            "focal": self.focal,
            "principal": [float(v) for v in self.principal],
            "resolution": [self.width, self.height],
            "near": self.near,
            "far": self.far,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(
            pose=Pose.from_json(d["pose"]),
            focal=float(d["focal"]),
            principal=np.array(d["principal"], dtype=float),
            width=int(d["resolution"][0]),
            height=int(d["resolution"][1]),
            near=float(d["near"]),
            far=float(d["far"]),
            name=d.get("name", "cam"),
        )


def look_at_camera(eye, target, focal, width, height, name="cam", near=0.05, far=3.0, up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `eye` with +z toward `target`; image-down chosen against world `up`."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:  # looking straight along up: pick x as right
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    return Camera(
        pose=Pose(eye, mat_to_quat(rot)),
        focal=focal,
        principal=np.array([(width - 1) / 2.0, (height - 1) / 2.0]),
        width=width,
        height=height,
        near=near,
        far=far,
        name=name,
    )


def project(cam: Camera, point_world) -> np.ndarray | None:
    """Pixel coordinates of a world point, or None when camera-frame depth <= near."""
    pc = invert(cam.pose).apply(point_world)
    if pc[2] <= cam.near:
        return None
    return np.array(
        [cam.focal * pc[0] / pc[2] + cam.principal[0], cam.focal * pc[1] / pc[2] + cam.principal[1]]
    )


@dataclass
class IdDepthImage:
    """Per-pixel nearest object id (0 = background) and z-depth (= far at background)."""

    ids: np.ndarray
    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


def _ray_grid(cam: Camera):
    """World-frame ray directions with unit camera-frame z, plus origin."""
    us = np.arange(cam.width, dtype=float)
    vs = np.arange(cam.height, dtype=float)
    xs = (us - cam.principal[0]) / cam.focal
    ys = (vs - cam.principal[1]) / cam.focal
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    rot = cam.pose.rotation()
    dirs_world = dirs_cam @ rot.T
    return cam.pose.t, dirs_world


def _intersect_sphere(origin, dirs, center, radius, near):
    oc = origin - center
    a = np.einsum("hwk,hwk->hw", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    r1 = (-b - sq) / (2.0 * a)
    r2 = (-b + sq) / (2.0 * a)
    s = np.where(r1 >= near, r1, np.where(r2 >= near, r2, np.inf))
    return np.where(hit, s, np.inf)

def _intersect_box(o_l, d_l, half, near):
    d_safe = np.where(np.abs(d_l) < 1e-15, 1e-15, d_l)
    t1 = (-half - o_l) / d_safe
    t2 = (half - o_l) / d_safe
    lo = np.minimum(t1, t2).max(axis=-1)
    hi = np.maximum(t1, t2).min(axis=-1)
    hit = (hi >= lo) & (hi >= near)
    s = np.where(lo >= near, lo, hi)
    return np.where(hit, s, np.inf)


def _intersect_cylinder(o_l, d_l, radius, hh, near):
    ox, oy, oz = o_l[..., 0], o_l[..., 1], o_l[..., 2]
    dx, dy, dz = d_l[..., 0], d_l[..., 1], d_l[..., 2]
    best = np.full(ox.shape, np.inf)
    # lateral surface
    a = dx * dx + dy * dy
    lateral_ok = a > 1e-14
    a_safe = np.where(lateral_ok, a, 1.0)
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a_safe * c
    sq = np.sqrt(np.where(disc >= 0.0, disc, 0.0))
    for sign in (-1.0, 1.0):
        s = (-b + sign * sq) / (2.0 * a_safe)
        z = oz + s * dz
        ok = lateral_ok & (disc >= 0.0) & (s >= near) & (np.abs(z) <= hh)
        best = np.where(ok & (s < best), s, best)
    # end caps
    dz_safe = np.where(np.abs(dz) < 1e-15, 1e-15, dz)
    for zcap in (-hh, hh):
        s = (zcap - oz) / dz_safe
        px = ox + s * dx
        py = oy + s * dy
        ok = (np.abs(dz) >= 1e-15) & (s >= near) & (px * px + py * py <= radius * radius)
        best = np.where(ok & (s < best), s, best)
    return best


def rasterize(objects, cam: Camera) -> IdDepthImage:
    """Z-buffer render of (id, Shape, Pose) triples by per-pixel analytic ray casting.

    Ray parameter equals camera-frame z-depth; the nearest hit in [near, far) wins.
    """
    ids = [oid for oid, _, _ in objects]
    if len(ids) != len(set(ids)) or any(i <= 0 for i in ids):
        raise ValueError("object ids must be unique and positive")
    origin, dirs = _ray_grid(cam)
    depth = np.full((cam.height, cam.width), np.inf)
    idmap = np.zeros((cam.height, cam.width), dtype=np.int32)
    for oid, shape, pose in objects:
        if shape.kind == "sphere":
            s = _intersect_sphere(origin, dirs, pose.t, shape.params[0], cam.near)
        else:
            rot = pose.rotation()
            o_l = rot.T @ (origin - pose.t)
            d_l = dirs @ rot  # == dirs @ (rot.T).T
            o_l = np.broadcast_to(o_l, dirs.shape)
            if shape.kind == "box":
                s = _intersect_box(o_l, d_l, np.array(shape.params), cam.near)
            else:
                s = _intersect_cylinder(o_l, d_l, shape.params[0], shape.params[1], cam.near)
        closer = s < depth
        depth = np.where(closer, s, depth)
        idmap = np.where(closer, np.int32(oid), idmap)
    background = depth >= cam.far
    depth = np.where(background, cam.far, depth)
    idmap = np.where(background, np.int32(0), idmap)
    return IdDepthImage(ids=idmap, depth=depth)


def write_depth_pgm(img: IdDepthImage, path, near: float, far: float) -> None:
    """Debug dump: depth scaled to 8-bit, near = white, far/background = black."""
    scaled = np.clip((far - img.depth) / max(far - near, 1e-9), 0.0, 1.0)
    data = (scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        f.write(data.tobytes())


def _id_color(oid: int) -> tuple:
    if oid == 0:
        return (0, 0, 0)
    h = (oid * 0.61803398875) % 1.0
    i = int(h * 6.0)
    f = h * 6.0 - i
    p, q, t = 0.25, 1.0 - 0.75 * f, 0.25 + 0.75 * f
    rgb = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)][i % 6]
    return tuple(int(255 * v) for v in rgb)


def write_id_ppm(img: IdDepthImage, path) -> None:
    """Debug dump: object-identity map with a distinct color per id."""
    out = np.zeros((img.height, img.width, 3), dtype=np.uint8)
    for oid in np.unique(img.ids):
        out[img.ids == oid] = _id_color(int(oid))
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        f.write(out.tobytes())

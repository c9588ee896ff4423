"""Refine noisy object pose estimates until the simulated scene is physically
plausible and consistent with expert-demonstration key states.

Decision variables are one rigid offset (dx, dy, dyaw) per estimated object;
heights come from gravity settling. The solver is a penalty method (quadratic
penalties on collision depth and on trajectory-constraint excess, weight x10
per round) with coordinate-descent line search inside, plus seeded random
restarts. Candidate scoring uses a cheap kinematic surrogate; feasibility of
each restart's solution is always confirmed by a full demonstration replay.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .demos import Demonstration, map_to_sim, replay_report
from .geometry import Pose, quat_from_yaw, quat_mul
from .seeding import stream
from .world import DEFAULT_PHYSICS, PEN_TOL, WorldState, check_collision, lowest_point_z, pair_penetration

log = logging.getLogger(__name__)


@dataclass
class PoseEstimate:
    object_id: int
    pose: Pose
    translation_noise_scale: float
    yaw_noise_scale: float

    def __post_init__(self):
        if self.translation_noise_scale < 0 or self.yaw_noise_scale < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass
class TrajectoryConstraint:
    t_index: int
    object_id: int
    epsilon: float
    kind: str = "alignment"        # alignment | final

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class SolverConfig:
    rounds: int = 5
    mu0: float = 10.0
    mu_growth: float = 10.0
    restarts: int = 8
    sweeps: int = 2
    line_search_iters: int = 16
    seed: int = 0
    epsilon_g: float = 0.02
    full_horizon_objective: bool = False


@dataclass
class RefinementProblem:
    estimates: list
    demo: Demonstration
    constraints: list
    scene_template: WorldState      # shape/flag source (the retrieved-model library side)
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        ids = {e.object_id for e in self.estimates}
        for c in self.constraints:
            if c.object_id not in ids:
                raise ValueError(f"constraint references unestimated object {c.object_id}")
            if not (0 <= c.t_index < len(self.demo.frames)):
                raise ValueError("constraint timestep outside demonstration")


@dataclass
class RefinementResult:
    poses: dict                    # object_id -> Pose (settled heights)
    objective: float               # replay-measured sum of squared key-state residuals
    feasible: bool
    violations: list
    iterations: int
    restart: int = 0
    penalty_trace: list = field(default_factory=list)   # per round: accepted penalty values


# ---------------------------------------------------------------------------
# key-state extraction


def _final_epsilons(task, scene: WorldState, physics, epsilon_g: float) -> dict:
    """Per-object final-state thresholds: epsilon_g plus the geometric
    gripper-to-object offset implied by the task's terminal contact."""
    fam = task.family
    out = {}
    tid = task.target_ids[0]
    if fam == "lift":
        out[tid] = epsilon_g
    elif fam == "press":
        hz = scene.obj(tid).shape.params[-1]
        out[tid] = epsilon_g + physics.gripper_contact_radius + hz
    elif fam == "insert":
        cid = task.target_ids[1]
        hh_obj = scene.obj(tid).shape.params[1]
        hh_cup = scene.obj(cid).shape.params[1]
        out[tid] = epsilon_g
        out[cid] = epsilon_g + abs(physics.hollow_floor + hh_obj - hh_cup) + 0.01
    elif fam == "pick_place":
        cid = task.target_ids[1]
        out[tid] = epsilon_g
        out[cid] = epsilon_g + scene.obj(cid).shape.params[1] + scene.obj(tid).shape.rest_offset()
    elif fam == "stack":
        cid = task.target_ids[1]
        out[tid] = epsilon_g
        out[cid] = epsilon_g + scene.obj(tid).shape.params[1] + scene.obj(cid).shape.params[1]
    return out


def extract_key_states(demo: Demonstration, epsilon_g: float, scene: WorldState = None,
                       estimates=None, physics=DEFAULT_PHYSICS) -> list:
    """Key states: one per gripper open->close transition (bound to the nearest
    estimated graspable object) plus the task final state (bound to each task
    target object, with shape-derived epsilon)."""
    constraints = []
    positions = {}
    graspable = {}
    if estimates is not None and scene is not None:
        for e in estimates:
            positions[e.object_id] = e.pose.t
            graspable[e.object_id] = scene.obj(e.object_id).graspable
    elif scene is not None:
        for o in scene.objects:
            positions[o.id] = o.pose.t
            graspable[o.id] = o.graspable

    for t, f in enumerate(demo.frames):
        if f.action.grip == "close" and f.aperture == "open":
            cands = [(float(np.linalg.norm(f.gripper_pose.t - positions[oid])), oid)
                     for oid in sorted(positions) if graspable.get(oid)]
            if cands:
                _, oid = min(cands)
                constraints.append(TrajectoryConstraint(t, oid, epsilon_g, "alignment"))

    final_t = len(demo.frames) - 1
    if scene is not None:
        eps = _final_epsilons(demo.task, scene, physics, epsilon_g)
        for oid in demo.task.target_ids:
            if oid in eps:
                constraints.append(TrajectoryConstraint(final_t, oid, eps[oid], "final"))
    if not constraints:
        log.warning("demonstration %s yields no key-state constraints", demo.id)
    return constraints


# ---------------------------------------------------------------------------
# candidate worlds


def _offset_pose(est: PoseEstimate, off: np.ndarray) -> Pose:
    t = est.pose.t.copy()
    t[0] += off[0]
    t[1] += off[1]
    return Pose(t, quat_mul(quat_from_yaw(off[2]), est.pose.q))


def candidate_world(problem: RefinementProblem, offsets: np.ndarray, physics=DEFAULT_PHYSICS) -> WorldState:
    from .world import settle

    w = problem.scene_template
    for e, off in zip(problem.estimates, offsets):
        w = w.with_object_pose(e.object_id, _offset_pose(e, off))
    return settle(w, physics)


# ---------------------------------------------------------------------------
# surrogate objective (objects on the table until grasped; replay confirms)


class _Surrogate:
    def __init__(self, problem: RefinementProblem, physics):
        self.problem = problem
        self.physics = physics
        demo = problem.demo
        self.grip = demo.gripper_positions()
        self.est_index = {e.object_id: i for i, e in enumerate(problem.estimates)}
        self.rest_z = {}
        for e in problem.estimates:
            o = problem.scene_template.obj(e.object_id)
            self.rest_z[e.object_id] = problem.scene_template.table_height + o.support_height
        self.grasp_t = {}
        for c in problem.constraints:
            if c.kind == "alignment":
                self.grasp_t[c.object_id] = c.t_index
        self.final_t = len(demo.frames) - 1
        self._build_pair_table()

    def _build_pair_table(self):
        """Pairs that can ever collide at rest height, with a bounding-circle
        reject radius so exact penetration runs only near contact."""
        self.pairs = []
        ests = self.problem.estimates
        for i in range(len(ests)):
            for j in range(i + 1, len(ests)):
                oi = self.problem.scene_template.obj(ests[i].object_id)
                oj = self.problem.scene_template.obj(ests[j].object_id)
                if oi.hollow or oj.hollow:
                    continue
                zi, zj = self.rest_z[oi.id], self.rest_z[oj.id]
                # conservative vertical overlap reject via bounding radii
                if abs(zi - zj) >= oi.shape.bounding_radius() + oj.shape.bounding_radius():
                    continue
                reject = oi.shape.bounding_radius() + oj.shape.bounding_radius()
                self.pairs.append((i, j, oi, oj, reject))

    def _pos0(self, oid: int, offsets) -> np.ndarray:
        e = self.problem.estimates[self.est_index[oid]]
        off = offsets[self.est_index[oid]]
        return np.array([e.pose.t[0] + off[0], e.pose.t[1] + off[1], self.rest_z[oid]])

    def predicted(self, oid: int, t: int, offsets) -> np.ndarray:
        p0 = self._pos0(oid, offsets)
        tg = self.grasp_t.get(oid)
        if tg is None or t <= tg:
            return p0
        return p0 + (self.grip[t] - self.grip[tg])

    def objective(self, offsets) -> float:
        total = 0.0
        if self.problem.config.full_horizon_objective:
            for t in range(len(self.grip)):
                for oid in self.est_index:
                    d = self.grip[t] - self.predicted(oid, t, offsets)
                    total += float(d @ d)
            return total
        for c in self.problem.constraints:
            d = self.grip[c.t_index] - self.predicted(c.object_id, c.t_index, offsets)
            total += float(d @ d)
        return total

    def violation_sq(self, offsets) -> float:
        from dataclasses import replace as _replace

        v = 0.0
        for c in self.problem.constraints:
            d = self.grip[c.t_index] - self.predicted(c.object_id, c.t_index, offsets)
            excess = float(np.linalg.norm(d)) - c.epsilon
            if excess > 0:
                v += excess * excess
        ests = self.problem.estimates
        for (i, j, oi, oj, reject) in self.pairs:
            dx = (ests[i].pose.t[0] + offsets[i, 0]) - (ests[j].pose.t[0] + offsets[j, 0])
            dy = (ests[i].pose.t[1] + offsets[i, 1]) - (ests[j].pose.t[1] + offsets[j, 1])
            if dx * dx + dy * dy >= reject * reject:
                continue
            pi = _offset_pose(ests[i], offsets[i])
            pj = _offset_pose(ests[j], offsets[j])
            ti, tj = pi.t.copy(), pj.t.copy()
            ti[2], tj[2] = self.rest_z[oi.id], self.rest_z[oj.id]
            pen = pair_penetration(_replace(oi, pose=Pose(ti, pi.q)),
                                   _replace(oj, pose=Pose(tj, pj.q)))
            if pen > PEN_TOL:
                v += pen * pen
        return v

    def penalty(self, offsets, mu: float) -> float:
        return self.objective(offsets) + mu * self.violation_sq(offsets)


# ---------------------------------------------------------------------------
# validation (exact, replay-backed)


def validate(poses: dict, problem: RefinementProblem, physics=DEFAULT_PHYSICS):
    """(feasible, violations) for the given object poses, checking environment
    constraints and every trajectory constraint via open-loop replay."""
    feasible, violations, _ = validate_detail(poses, problem, physics)
    return feasible, violations


def validate_detail(poses: dict, problem: RefinementProblem, physics=DEFAULT_PHYSICS):
    w = problem.scene_template
    for oid, pose in sorted(poses.items()):
        w = w.with_object_pose(oid, pose)
    violations = []
    for o in w.objects:
        depth = (w.table_height - lowest_point_z(o))
        if depth > 1e-6:
            violations.append(("table", o.id, float(depth)))
    for a, b, pen in check_collision(w, physics):
        violations.append(("collision", (a, b), float(pen)))
    sim = map_to_sim(problem.demo, w, physics=physics)
    rep = replay_report(sim, problem.demo, problem.constraints, physics)
    residual_sq = 0.0
    for (t, oid, residual, eps, ok) in rep.constraint_rows:
        residual_sq += residual * residual
        if not ok:
            violations.append(("trajectory", (t, oid), float(residual - eps)))
    return (not violations), violations, {"replay": rep, "objective": residual_sq}


# ---------------------------------------------------------------------------
# solver


def _coordinate_descent(surrogate: _Surrogate, offsets: np.ndarray, windows: np.ndarray,
                        mu: float, cfg: SolverConfig):
    """In-place sweeps of per-coordinate ternary line search; returns
    (offsets, accepted-penalty trace, eval count)."""
    evals = 0
    best = surrogate.penalty(offsets, mu)
    evals += 1
    trace = [best]
    n, k = offsets.shape
    for _ in range(cfg.sweeps):
        for i in range(n):
            for j in range(k):
                prev = offsets[i, j]
                a = prev - windows[i, j]
                b = prev + windows[i, j]
                if b - a < 1e-12:
                    continue
                for _ in range(cfg.line_search_iters):
                    m1 = a + (b - a) / 3.0
                    m2 = b - (b - a) / 3.0
                    offsets[i, j] = m1
                    f1 = surrogate.penalty(offsets, mu)
                    offsets[i, j] = m2
                    f2 = surrogate.penalty(offsets, mu)
                    evals += 2
                    if f1 < f2:
                        b = m2
                    else:
                        a = m1
                offsets[i, j] = 0.5 * (a + b)
                f_cand = surrogate.penalty(offsets, mu)
                evals += 1
                if f_cand < best:
                    best = f_cand
                    trace.append(best)
                else:
                    offsets[i, j] = prev  # only strict improvements move
        windows *= 0.5  # finer search each sweep
    return offsets, trace, evals


def refine(problem: RefinementProblem, physics=DEFAULT_PHYSICS) -> RefinementResult:
    cfg = problem.config
    surrogate = _Surrogate(problem, physics)
    n = len(problem.estimates)

    best_feasible = None
    best_infeasible = None
    total_evals = 0

    for r in range(max(cfg.restarts, 1)):
        if r == 0:
            offsets = np.zeros((n, 3))
        else:
            rng = stream(cfg.seed, "refine-restart", r)
            offsets = np.zeros((n, 3))
            for i, e in enumerate(problem.estimates):
                offsets[i, 0] = rng.uniform(-e.translation_noise_scale, e.translation_noise_scale)
                offsets[i, 1] = rng.uniform(-e.translation_noise_scale, e.translation_noise_scale)
                offsets[i, 2] = rng.uniform(-e.yaw_noise_scale, e.yaw_noise_scale)
        windows = np.zeros((n, 3))
        for i, e in enumerate(problem.estimates):
            w0 = max(e.translation_noise_scale * 1.5, 0.03)
            windows[i] = (w0, w0, max(e.yaw_noise_scale * 1.5, 0.1))

        mu = cfg.mu0
        round_traces = []
        evals = 0
        for _ in range(cfg.rounds):
            offsets, trace, ev = _coordinate_descent(surrogate, offsets, windows.copy(), mu, cfg)
            round_traces.append(trace)
            evals += ev
            mu *= cfg.mu_growth
        total_evals += evals

        world = candidate_world(problem, offsets, physics)
        poses = {e.object_id: world.obj(e.object_id).pose for e in problem.estimates}
        feasible, violations, detail = validate_detail(poses, problem, physics)
        if feasible:
            key = (detail["objective"], evals, r)
            if best_feasible is None or key < best_feasible[0]:
                best_feasible = (key, poses, violations, round_traces, r)
        else:
            vmag = sum(v[2] for v in violations)
            key = (vmag, detail["objective"], evals, r)
            if best_infeasible is None or key < best_infeasible[0]:
                best_infeasible = (key, poses, violations, round_traces, r, detail["objective"])

    if best_feasible is not None:
        key, poses, violations, traces, r = best_feasible
        return RefinementResult(poses=poses, objective=key[0], feasible=True, violations=[],
                                iterations=total_evals, restart=r, penalty_trace=traces)
    key, poses, violations, traces, r, obj = best_infeasible
    return RefinementResult(poses=poses, objective=obj, feasible=False, violations=violations,
                            iterations=total_evals, restart=r, penalty_trace=traces)

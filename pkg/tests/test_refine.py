import numpy as np
import pytest

from prism_forge.demos import DemoFrame, Demonstration, generate_scripted_demo, map_to_sim, replay_report
from prism_forge.geometry import Pose
from prism_forge.refine import (
    PoseEstimate,
    RefinementProblem,
    SolverConfig,
    TrajectoryConstraint,
    candidate_world,
    extract_key_states,
    refine,
    validate,
)
from prism_forge.scenes import build_scene, noisy_estimates
from prism_forge.world import Action


def gt_estimates(gt, t_scale=0.05, y_scale=0.3):
    return [PoseEstimate(o.id, o.pose, t_scale, y_scale) for o in gt.world.objects]


def make_problem(family="lift", noise_seed=None, seed=0, t_scale=0.05, restarts=8):
    gt = build_scene(family)
    demo = generate_scripted_demo(gt.task, gt.world, gt.cameras, seed=21,
                                  record_observations=False)
    if noise_seed is None:
        estimates = gt_estimates(gt, t_scale)
    else:
        estimates = noisy_estimates(gt, t_scale, 0.3, noise_seed)
    constraints = extract_key_states(demo, 0.02, scene=gt.world, estimates=estimates)
    cfg = SolverConfig(seed=seed, restarts=restarts)
    return gt, demo, RefinementProblem(estimates=estimates, demo=demo,
                                       constraints=constraints,
                                       scene_template=gt.world, config=cfg)


def test_extract_key_states_lift():
    gt = build_scene("lift")
    demo = generate_scripted_demo(gt.task, gt.world, gt.cameras, seed=21,
                                  record_observations=False)
    cs = extract_key_states(demo, 0.02, scene=gt.world)
    kinds = [c.kind for c in cs]
    assert kinds.count("alignment") == 1
    assert kinds.count("final") == 1
    close_frame = next(t for t, f in enumerate(demo.frames) if f.action.grip == "close")
    align = next(c for c in cs if c.kind == "alignment")
    assert align.t_index == close_frame
    assert align.object_id == 1
    final = next(c for c in cs if c.kind == "final")
    assert final.t_index == len(demo.frames) - 1


def test_extract_key_states_three_constraints_for_two_grasp_demo():
    gt = build_scene("lift")
    base = generate_scripted_demo(gt.task, gt.world, gt.cameras, seed=21,
                                  record_observations=False)
    # splice a second pick: open, move, close again
    frames = list(base.frames)
    g = frames[-1].gripper_pose
    frames.append(DemoFrame(g, "closed", Action(np.zeros(3), 0.0, "open")))
    frames.append(DemoFrame(g, "open", Action(np.zeros(3), 0.0, "close")))
    frames.append(DemoFrame(g, "closed", Action(np.zeros(3), 0.0, "hold")))
    demo2 = Demonstration(id="twograsp", task=gt.task, frames=frames)
    cs = extract_key_states(demo2, 0.02, scene=gt.world)
    assert len(cs) == 3  # two alignment transitions + one final


def test_extract_no_transitions_warns_and_returns_empty(caplog):
    gt = build_scene("lift")
    frames = [DemoFrame(gt.world.gripper.pose, "open", Action(np.zeros(3), 0.0, "hold"))]
    demo = Demonstration(id="idle", task=gt.task, frames=frames)
    import logging

    with caplog.at_level(logging.WARNING):
        cs = extract_key_states(demo, 0.02, scene=None)
    assert cs == []
    assert any("key-state" in r.message for r in caplog.records)


def test_validate_ground_truth_feasible():
    gt, demo, problem = make_problem()
    poses = {o.id: o.pose for o in gt.world.objects}
    feasible, violations = validate(poses, problem)
    assert feasible and violations == []


def test_validate_identical_poses_collide():
    gt, demo, problem = make_problem()
    poses = {o.id: gt.world.obj(1).pose for o in gt.world.objects}
    feasible, violations = validate(poses, problem)
    assert not feasible
    assert any(v[0] == "collision" for v in violations)


def test_validate_epsilon_excess_magnitude():
    gt, demo, problem = make_problem()
    align = next(c for c in problem.constraints if c.kind == "alignment")
    grip = demo.frames[align.t_index].gripper_pose.t
    obj = gt.world.obj(align.object_id)
    direction = np.array([1.0, 0.0, 0.0])
    target = grip + direction * (align.epsilon + 0.001)
    poses = {o.id: o.pose for o in gt.world.objects}
    poses[align.object_id] = Pose(np.array([target[0], target[1], obj.pose.t[2]]), obj.pose.q)
    feasible, violations = validate(poses, problem)
    traj = [v for v in violations if v[0] == "trajectory"]
    assert not feasible and traj
    # residual excess ~ 0.001 (grasp z matches, xy offset exact)
    assert abs(traj[0][2] - 0.001) < 2e-4


def test_refine_feasible_estimates_unchanged():
    gt, demo, problem = make_problem(t_scale=0.02)
    res = refine(problem)
    assert res.feasible
    assert res.objective < 1e-4
    for o in gt.world.objects:
        assert np.linalg.norm(res.poses[o.id].t - o.pose.t) < 1e-9


def test_refine_below_table_estimate_restored_to_support():
    gt, demo, problem = make_problem()
    est = problem.estimates[0]
    sunk = Pose(est.pose.t - np.array([0.0, 0.0, 0.05]), est.pose.q)
    problem.estimates[0] = PoseEstimate(est.object_id, sunk, est.translation_noise_scale,
                                        est.yaw_noise_scale)
    res = refine(problem)
    assert res.feasible
    obj = gt.world.obj(est.object_id)
    assert abs(res.poses[est.object_id].t[2] - obj.shape.rest_offset()) < 1e-6


def test_refine_recovers_offset_grasp_target():
    gt, demo, problem = make_problem()
    est = problem.estimates[0]
    shifted = Pose(est.pose.t + np.array([0.05, -0.06, 0.0]), est.pose.q)
    problem.estimates[0] = PoseEstimate(est.object_id, shifted, 0.08, est.yaw_noise_scale)
    res = refine(problem)
    assert res.feasible
    sim_world = candidate_world(problem, np.zeros((len(problem.estimates), 3)))
    w = gt.world
    for oid, pose in res.poses.items():
        w = w.with_object_pose(oid, pose)
    sim = map_to_sim(demo, w)
    rep = replay_report(sim, demo, problem.constraints)
    assert rep.success


def test_refine_noisy_estimates_end_to_end():
    gt, demo, problem = make_problem(noise_seed=5)
    res = refine(problem)
    assert res.feasible
    w = gt.world
    for oid, pose in res.poses.items():
        w = w.with_object_pose(oid, pose)
    rep = replay_report(map_to_sim(demo, w), demo, problem.constraints)
    assert rep.success


def test_refine_deterministic():
    def run():
        gt, demo, problem = make_problem(noise_seed=9, seed=4)
        res = refine(problem)
        return res

    r1, r2 = run(), run()
    assert r1.feasible == r2.feasible
    assert r1.objective == r2.objective
    assert r1.iterations == r2.iterations
    for oid in r1.poses:
        assert (r1.poses[oid].t == r2.poses[oid].t).all()


def test_refine_penalty_trace_monotone_per_round():
    gt, demo, problem = make_problem(noise_seed=3)
    res = refine(problem)
    assert res.penalty_trace
    for trace in res.penalty_trace:
        arr = np.array(trace)
        assert (np.diff(arr) <= 1e-12).all()


def test_refine_infeasible_reports_violations():
    gt, demo, problem = make_problem(restarts=1)
    # impossible constraint: epsilon tiny at a frame where gripper is far from any pose
    problem.constraints.append(TrajectoryConstraint(0, 2, 1e-6, "alignment"))
    res = refine(problem)
    assert not res.feasible
    assert res.violations

"""BC-regularized soft actor-critic on learned rewards.

Actor outputs a squashed Gaussian over the 4 continuous action dimensions
(dx, dy, dz, dyaw, each normalized to [-1, 1]) plus a categorical head for the
gripper command. Critics see (policy features, continuous action, gripper
one-hot); during actor updates the gripper enters as softmax probabilities so
the expected Q is differentiable. Demonstration transitions live in a
protected buffer region, are never evicted, and anchor a decaying
behavior-cloning loss. Every stored reward is rewritten whenever the reward
model is retrained.

Float32 throughout the update path; gradient-check tests run the same math in
float64.
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .nets import Adam, MlpParams, clip_grad_norm, init_mlp, mlp_backward, mlp_forward
from .reward import (
    ACTION_DIM,
    FeatureSpec,
    GRIP_ORDER,
    RewardDataset,
    TrainConfig,
    encode_action,
    feasibility_input,
    forward as reward_forward,
    gate as feasibility_gate,
    policy_features,
    relabel,
    audit_relabel,
    render_observation,
    train as reward_train,
)
from .scenes import randomize_placements
from .seeding import stream
from .world import Action, TaskSpec, WorldState, step as world_step, task_success

log = logging.getLogger(__name__)

N_CONT = 4
N_GRIP = 3
ACTION_SCALES = np.array([0.05, 0.05, 0.05, 0.2])
LOGSTD_MIN, LOGSTD_MAX = -5.0, 2.0
SQUASH_EPS = 1e-6


@dataclass
class TrainLoopConfig:
    gamma: float = 0.99
    tau: float = 0.005
    target_entropy: float = -5.0
    lambda_bc: float = 1.0
    lambda_bc_decay: float = 0.999
    batch: int = 256
    demo_batch: int = 64
    updates_per_step: int = 1
    lr: float = 3e-4
    hidden: tuple = (64, 32)
    reward_update_period: int = 2000
    label_budget: int = 128
    obj_translation_scale: float = 0.10
    ee_noise_sigma: float = 0.02
    horizon: int = 60
    capacity: int = 20000
    checkpoint_every: int = 10000
    eval_episodes: int = 10
    reward_train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0,1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0,1]")
        if self.lambda_bc < 0:
            raise ValueError("lambda_bc must be non-negative")


@dataclass
class PolicyParams:
    net: MlpParams


@dataclass
class CriticParams:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams


def init_policy(feature_dim: int, cfg: TrainLoopConfig, rng, dtype=np.float32) -> PolicyParams:
    return PolicyParams(net=init_mlp([feature_dim, *cfg.hidden, 2 * N_CONT + N_GRIP], rng, dtype))


def init_critics(feature_dim: int, cfg: TrainLoopConfig, rng, dtype=np.float32) -> CriticParams:
    q1 = init_mlp([feature_dim + N_CONT + N_GRIP, *cfg.hidden, 1], rng, dtype)
    q2 = init_mlp([feature_dim + N_CONT + N_GRIP, *cfg.hidden, 1], rng, dtype)
    return CriticParams(q1=q1, q2=q2, q1_target=q1.copy(), q2_target=q2.copy())


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Ring buffer over non-demo slots; demonstration transitions occupy a
    protected prefix and are never evicted."""

    def __init__(self, capacity: int, policy_dim: int, reward_dim: int):
        self.capacity = capacity
        self.pol_s = np.zeros((capacity, policy_dim), dtype=np.float16)
        self.pol_s2 = np.zeros((capacity, policy_dim), dtype=np.float16)
        self.cont = np.zeros((capacity, N_CONT), dtype=np.float32)
        self.grip = np.zeros(capacity, dtype=np.int8)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.uint8)
        self.is_demo = np.zeros(capacity, dtype=bool)
        self.reward_feat = np.zeros((capacity, reward_dim), dtype=np.float16)
        self.n_demo = 0
        self.size = 0
        self._ptr = 0

    def __len__(self):
        return self.size

    def add_demo(self, **kw):
        if self.size > self.n_demo:
            raise RuntimeError("demo transitions must be added before rollouts")
        self._write(self.n_demo, is_demo=True, **kw)
        self.n_demo += 1
        self.size = self.n_demo
        self._ptr = self.n_demo

    def add(self, **kw):
        i = self._ptr
        self._write(i, is_demo=False, **kw)
        self._ptr += 1
        if self._ptr >= self.capacity:
            self._ptr = self.n_demo      # wrap over non-demo region only
        self.size = max(self.size, i + 1)

    def _write(self, i, pol_s, cont, grip, reward, pol_s2, done, reward_feat, is_demo):
        self.pol_s[i] = pol_s
        self.pol_s2[i] = pol_s2
        self.cont[i] = cont
        self.grip[i] = grip
        self.reward[i] = reward
        self.done[i] = done
        self.is_demo[i] = is_demo
        self.reward_feat[i] = reward_feat

    def sample(self, batch: int, rng) -> dict:
        idx = rng.integers(0, self.size, size=batch)
        return self._gather(idx)

    def sample_demo(self, batch: int, rng) -> dict:
        if self.n_demo == 0:
            return None
        idx = rng.integers(0, self.n_demo, size=batch)
        return self._gather(idx)

    def _gather(self, idx):
        onehot = np.zeros((len(idx), N_GRIP), dtype=np.float32)
        onehot[np.arange(len(idx)), self.grip[idx]] = 1.0
        return {
            "s": self.pol_s[idx].astype(np.float32),
            "s2": self.pol_s2[idx].astype(np.float32),
            "cont": self.cont[idx],
            "grip": self.grip[idx].astype(np.intp),
            "grip_onehot": onehot,
            "r": self.reward[idx],
            "done": self.done[idx].astype(np.float32),
        }

    def reward_features_array(self):
        return self.reward_feat[: self.size]

    def rewards_array(self):
        return self.reward[: self.size]

    def set_rewards(self, r):
        self.reward[: self.size] = r.astype(np.float32)


# ---------------------------------------------------------------------------
# acting


def _split_out(out):
    mu = out[:, :N_CONT]
    logstd = np.clip(out[:, N_CONT: 2 * N_CONT], LOGSTD_MIN, LOGSTD_MAX)
    logits = out[:, 2 * N_CONT:]
    return mu, logstd, logits


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cont_logp(eps, logstd, t):
    # density of t = tanh(mu + std*eps), plus the physical scaling constant
    scales = ACTION_SCALES[: t.shape[1]]
    per = (-0.5 * eps * eps - logstd - 0.5 * np.log(2 * np.pi)
           - np.log(1.0 - t * t + SQUASH_EPS) - np.log(scales)[None, :])
    return per.sum(axis=1)


def action_from_heads(t_row, grip_idx) -> Action:
    phys = t_row * ACTION_SCALES
    return Action(phys[:3].copy(), float(phys[3]), GRIP_ORDER[int(grip_idx)])


def act(policy: PolicyParams, features: np.ndarray, mode: str = "stochastic",
        rng: np.random.Generator = None):
    """(Action, aux) where aux carries the normalized heads and log-prob."""
    x = np.atleast_2d(features).astype(policy.net.weights[0].dtype)
    out, _ = mlp_forward(policy.net, x)
    mu, logstd, logits = _split_out(out)
    probs = _softmax(logits)
    if mode == "deterministic":
        eps = np.zeros_like(mu)
        grip_idx = int(np.argmax(probs[0]))
    elif mode == "stochastic":
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        grip_idx = int(np.searchsorted(np.cumsum(probs[0]), rng.random()))
        grip_idx = min(grip_idx, N_GRIP - 1)
    else:
        raise ValueError(f"unknown act mode {mode!r}")
    u = mu + np.exp(logstd) * eps
    t = np.tanh(u)
    logp = float(_cont_logp(eps, logstd, t)[0] + np.log(probs[0, grip_idx] + 1e-12))
    return action_from_heads(t[0], grip_idx), {
        "cont": t[0].copy(), "grip": grip_idx, "logp": logp, "probs": probs[0].copy(),
    }


# ---------------------------------------------------------------------------
# losses (pure functions of parameters; shared by updates and gradient tests)


def critic_loss_and_grads(qnet: MlpParams, inputs: np.ndarray, targets: np.ndarray):
    q, acts = mlp_forward(qnet, inputs)
    err = q.reshape(-1) - targets
    loss = float((err * err).mean())
    dq = (2.0 * err / len(err)).reshape(-1, 1).astype(inputs.dtype)
    grads, _ = mlp_backward(qnet, acts, dq)
    return loss, grads


def _policy_heads(policy: PolicyParams, s, eps):
    out, acts = mlp_forward(policy.net, s)
    mu, logstd, logits = _split_out(out)
    raw_logstd = out[:, N_CONT: 2 * N_CONT]
    clip_mask = ((raw_logstd > LOGSTD_MIN) & (raw_logstd < LOGSTD_MAX)).astype(out.dtype)
    std = np.exp(logstd)
    u = mu + std * eps
    t = np.tanh(u)
    probs = _softmax(logits)
    return acts, mu, logstd, clip_mask, std, u, t, probs


def _q_and_input_grad(critics: CriticParams, x):
    q1, acts1 = mlp_forward(critics.q1, x)
    q2, acts2 = mlp_forward(critics.q2, x)
    q1 = q1.reshape(-1)
    q2 = q2.reshape(-1)
    use1 = q1 <= q2
    ones = np.ones((len(x), 1), dtype=x.dtype)
    _, dx1 = mlp_backward(critics.q1, acts1, ones)
    _, dx2 = mlp_backward(critics.q2, acts2, ones)
    qmin = np.where(use1, q1, q2)
    dx = np.where(use1[:, None], dx1, dx2)
    return qmin, dx


def actor_loss_and_grads(policy: PolicyParams, critics: CriticParams, s, eps,
                         alpha: float, lambda_bc: float, demo=None):
    """BC-SAC actor objective: mean(alpha*logpi - minQ) + lambda_bc * BC.

    eps is the fixed reparameterization noise; the gripper head enters the
    critic as softmax probabilities, and its entropy joins the continuous
    log-prob. Returns (loss, grads on policy.net, mean logp).
    """
    n = len(s)
    dt = s.dtype
    acts, mu, logstd, clip_mask, std, u, t, probs = _policy_heads(policy, s, eps)
    logp_cont = _cont_logp(eps, logstd, t)
    plogp = (probs * np.log(probs + 1e-12)).sum(axis=1)
    logp = logp_cont + plogp

    x = np.concatenate([s, t, probs], axis=1).astype(dt)
    qmin, dx = _q_and_input_grad(critics, x)
    loss = float((alpha * logp - qmin).mean())

    d_feat = s.shape[1]
    dq_dt = dx[:, d_feat: d_feat + N_CONT]
    dq_dp = dx[:, d_feat + N_CONT:]

    one_m_t2 = 1.0 - t * t
    g_t = 2.0 * t * one_m_t2 / (one_m_t2 + SQUASH_EPS)     # d(-log(1-t^2+eps))/du
    # d loss / d mu and d logstd (through u and the squash correction)
    dlogp_du = g_t
    dmu = (alpha * dlogp_du - dq_dt * one_m_t2) / n
    dlogstd = ((alpha * (-1.0 + dlogp_du * std * eps) - dq_dt * one_m_t2 * std * eps) / n) * clip_mask
    # categorical head: alpha * d(sum p log p) + dQ/dp through softmax
    logp_k = np.log(probs + 1e-12)
    d_plogp = probs * (logp_k - plogp[:, None])
    inner = dq_dp - (dq_dp * probs).sum(axis=1, keepdims=True)
    dlogits = (alpha * d_plogp - probs * inner) / n

    bc_loss = 0.0
    if demo is not None and lambda_bc > 0.0:
        out_d, acts_d = mlp_forward(policy.net, demo["s"])
        mu_d, _, logits_d = _split_out(out_d)
        t_d = np.tanh(mu_d)
        diff = t_d - demo["cont"]
        m = len(t_d)
        probs_d = _softmax(logits_d)
        ce = -np.log(probs_d[np.arange(m), demo["grip"]] + 1e-12)
        bc_loss = float((diff * diff).sum(axis=1).mean() + ce.mean())
        dmu_d = lambda_bc * 2.0 * diff * (1.0 - t_d * t_d) / m
        onehot = np.zeros_like(probs_d)
        onehot[np.arange(m), demo["grip"]] = 1.0
        dlogits_d = lambda_bc * (probs_d - onehot) / m
        dout_d = np.concatenate([dmu_d, np.zeros_like(dmu_d), dlogits_d], axis=1).astype(dt)
        grads_d, _ = mlp_backward(policy.net, acts_d, dout_d)
    else:
        grads_d = None

    dout = np.concatenate([dmu, dlogstd, dlogits], axis=1).astype(dt)
    grads, _ = mlp_backward(policy.net, acts, dout)
    if grads_d is not None:
        gw, gb = grads
        gwd, gbd = grads_d
        for a, b in zip(gw, gwd):
            a += b
        for a, b in zip(gb, gbd):
            a += b
    total = loss + lambda_bc * bc_loss
    return total, grads, float(logp.mean())


def compute_targets(policy: PolicyParams, critics: CriticParams, batch, alpha: float,
                    gamma: float, eps2):
    _, _, logstd2, _, std2, u2, t2, probs2 = _policy_heads(policy, batch["s2"], eps2)
    logp2 = _cont_logp(eps2, logstd2, t2) + (probs2 * np.log(probs2 + 1e-12)).sum(axis=1)
    x2 = np.concatenate([batch["s2"], t2, probs2], axis=1).astype(batch["s2"].dtype)
    q1t, _ = mlp_forward(critics.q1_target, x2)
    q2t, _ = mlp_forward(critics.q2_target, x2)
    qt = np.minimum(q1t.reshape(-1), q2t.reshape(-1))
    y = batch["r"] + gamma * (1.0 - batch["done"]) * (qt - alpha * logp2)
    return y.astype(batch["s2"].dtype), logp2


@dataclass
class SacState:
    policy: PolicyParams
    critics: CriticParams
    log_alpha: float
    opt_actor: Adam
    opt_q1: Adam
    opt_q2: Adam
    alpha_m: float = 0.0
    alpha_v: float = 0.0
    alpha_t: int = 0
    lambda_bc: float = 1.0


def new_sac_state(feature_dim: int, cfg: TrainLoopConfig, rng, dtype=np.float32) -> SacState:
    return SacState(
        policy=init_policy(feature_dim, cfg, rng, dtype),
        critics=init_critics(feature_dim, cfg, rng, dtype),
        log_alpha=float(np.log(0.2)),
        opt_actor=Adam(lr=cfg.lr),
        opt_q1=Adam(lr=cfg.lr),
        opt_q2=Adam(lr=cfg.lr),
        lambda_bc=cfg.lambda_bc,
    )


def _alpha_step(state: SacState, grad: float, lr: float):
    state.alpha_t += 1
    state.alpha_m = 0.9 * state.alpha_m + 0.1 * grad
    state.alpha_v = 0.999 * state.alpha_v + 0.001 * grad * grad
    mhat = state.alpha_m / (1 - 0.9 ** state.alpha_t)
    vhat = state.alpha_v / (1 - 0.999 ** state.alpha_t)
    state.log_alpha -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def polyak(target: MlpParams, online: MlpParams, tau: float):
    for tw, ow in zip(target.weights + target.biases, online.weights + online.biases):
        tw *= 1.0 - tau
        tw += tau * ow


def sac_update(buffer: ReplayBuffer, state: SacState, cfg: TrainLoopConfig,
               rng: np.random.Generator) -> dict:
    """One gradient step on critics, actor, and temperature, plus Polyak
    target updates. Raises on non-finite losses with a diagnostic dump."""
    batch = buffer.sample(cfg.batch, rng)
    alpha = float(np.exp(state.log_alpha))
    dt = batch["s"].dtype

    eps2 = rng.standard_normal((len(batch["s2"]), N_CONT)).astype(dt)
    y, logp2 = compute_targets(state.policy, state.critics, batch, alpha, cfg.gamma, eps2)
    bound = 1.0 / (1.0 - cfg.gamma) + alpha * float(np.abs(logp2).max()) + 1.0
    if float(np.abs(y).max()) > bound:
        raise RuntimeError(f"critic target {np.abs(y).max():.3f} exceeds bound {bound:.3f}")

    x = np.concatenate([batch["s"], batch["cont"], batch["grip_onehot"]], axis=1).astype(dt)
    l1, g1 = critic_loss_and_grads(state.critics.q1, x, y)
    l2, g2 = critic_loss_and_grads(state.critics.q2, x, y)
    clip_grad_norm(g1, 10.0)
    clip_grad_norm(g2, 10.0)
    state.opt_q1.step(state.critics.q1, g1)
    state.opt_q2.step(state.critics.q2, g2)

    demo = buffer.sample_demo(cfg.demo_batch, rng) if state.lambda_bc > 0 else None
    eps = rng.standard_normal((len(batch["s"]), N_CONT)).astype(dt)
    actor_loss, ga, logp_mean = actor_loss_and_grads(
        state.policy, state.critics, batch["s"], eps, alpha, state.lambda_bc, demo)
    clip_grad_norm(ga, 10.0)
    state.opt_actor.step(state.policy.net, ga)

    _alpha_step(state, -(logp_mean + cfg.target_entropy), cfg.lr)
    state.lambda_bc *= cfg.lambda_bc_decay

    polyak(state.critics.q1_target, state.critics.q1, cfg.tau)
    polyak(state.critics.q2_target, state.critics.q2, cfg.tau)

    diag = {"critic_loss": 0.5 * (l1 + l2), "actor_loss": actor_loss,
            "alpha": alpha, "logp": logp_mean}
    if not all(np.isfinite(v) for v in diag.values()):
        raise RuntimeError(f"non-finite SAC losses: {diag}")
    return diag


# ---------------------------------------------------------------------------
# environments, rollouts, training loop


@dataclass
class TrainEnv:
    name: str
    world: WorldState
    task: TaskSpec
    cameras: list


def randomize_init(env: TrainEnv, seed_stream: np.random.Generator,
                   cfg: TrainLoopConfig = None) -> WorldState:
    cfg = cfg or TrainLoopConfig()
    return randomize_placements(env.world, seed_stream,
                                translation_scale=cfg.obj_translation_scale,
                                ee_sigma=cfg.ee_noise_sigma)


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    denied: int = 0


def rollout(env: TrainEnv, w0: WorldState, policy: PolicyParams, spec: FeatureSpec,
            cfg: TrainLoopConfig, rng, mode="stochastic", reward_params=None,
            buffer: ReplayBuffer = None, on_step=None, gate_pred=None,
            noise_sigma: float = 0.0) -> EpisodeResult:
    """One episode; optionally records transitions and invokes on_step hooks."""
    w = w0
    obs = render_observation(w, env.cameras, spec)
    pol = policy_features(obs, spec).astype(np.float32)
    denied = 0
    for t in range(cfg.horizon):
        action, aux = act(policy, pol, mode, rng)
        if noise_sigma > 0.0:
            action = Action(action.delta_t + rng.normal(0.0, noise_sigma, size=3),
                            action.delta_yaw, action.grip)
        if gate_pred is not None:
            action, was_denied = feasibility_gate(gate_pred, obs, action)
            denied += int(was_denied)
        if on_step is not None:
            on_step(t, w, obs, action)
        w2 = world_step(w, action)
        obs2 = render_observation(w2, env.cameras, spec)
        pol2 = policy_features(obs2, spec).astype(np.float32)
        success = task_success(w2, env.task)
        if buffer is not None:
            rfeat = np.concatenate([obs2, encode_action(action)])
            r = reward_forward(reward_params, rfeat) if reward_params is not None else 0.0
            buffer.add(pol_s=pol, cont=aux["cont"], grip=aux["grip"], reward=r,
                       pol_s2=pol2, done=1 if success else 0, reward_feat=rfeat)
        w, obs, pol = w2, obs2, pol2
        if success:
            return EpisodeResult(success=True, steps=t + 1, denied=denied)
    return EpisodeResult(success=False, steps=cfg.horizon, denied=denied)


def evaluate(policy: PolicyParams, envs, spec: FeatureSpec, cfg: TrainLoopConfig,
             episodes: int, seed: int, gate_pred=None, noise_sigma: float = 0.0,
             stream_name: str = "eval"):
    """Deterministic-mode rollouts from randomized initial states.

    Returns (success_rate, per-episode logs)."""
    if episodes < 1:
        raise ValueError("episodes must be positive")
    logs = []
    wins = 0
    for i in range(episodes):
        env = envs[i % len(envs)]
        init_rng = stream(seed, stream_name + "-init", i)
        w0 = randomize_init(env, init_rng, cfg)
        rng = stream(seed, stream_name + "-noise", i)
        res = rollout(env, w0, policy, spec, cfg, rng, mode="deterministic",
                      gate_pred=gate_pred, noise_sigma=noise_sigma)
        wins += int(res.success)
        logs.append({"episode": i, "env": env.name, "success": res.success,
                     "steps": res.steps, "denied_actions": res.denied})
    return wins / episodes, logs


# ---------------------------------------------------------------------------
# oracle label collection


class LabelCollector:
    """Budgeted two-stage oracle querying into the reward dataset.

    Per rollout: the initial state (pre-stage, with the first action), the
    state right before the first gripper-close attempt (the imminent-grasp
    state), and the terminal state (post-stage, with the last action). Query
    budget resets every reward-update period. Tracks noisy-label agreement
    with the handcrafted ground-truth predicates for metrics only.
    """

    def __init__(self, template, err, envs, spec, budget: int):
        self.template = template
        self.err = err
        self.envs = {e.name: e for e in envs}
        self.spec = spec
        self.budget = budget
        self.used = 0
        self.total_queries = 0
        self.agree = 0
        self.compared = 0

    def reset_period(self):
        self.used = 0

    def _truth(self, env, world, stage):
        if stage == "post":
            return task_success(world, env.task)
        target = world.obj(env.task.target_ids[0])
        return float(np.linalg.norm(world.gripper.pose.t - target.pose.t)) <= 0.05

    def query(self, env: TrainEnv, world, obs, action, stage, dataset: RewardDataset):
        if self.used >= self.budget:
            return None
        from .oracle import noisy_label

        relations = self.template.pre_task if stage == "pre" else self.template.post_task
        rec = noisy_label(world, env.cameras, relations, self.err, stage=stage)
        feat = np.concatenate([obs, encode_action(action)])
        dataset.add(feat, rec.label, stage)
        self.used += 1
        self.total_queries += 1
        self.agree += int(rec.label == int(self._truth(env, world, stage)))
        self.compared += 1
        return rec

    @property
    def accuracy(self):
        return self.agree / self.compared if self.compared else 0.0


def demo_transitions_into_buffer(sim_demos, envs_by_name, spec: FeatureSpec,
                                 buffer: ReplayBuffer, reward_params):
    """Render demonstration states and insert flagged transitions."""
    for env_name, sim in sim_demos:
        env = envs_by_name[env_name]
        obs_seq = [render_observation(f.state, env.cameras, spec) for f in sim.frames]
        obs_seq.append(render_observation(sim.final_state, env.cameras, spec))
        for t, frame in enumerate(sim.frames):
            action = frame.action
            cont = np.concatenate([frame.action.delta_t / 0.05,
                                   [frame.action.delta_yaw / 0.2]]).astype(np.float32)
            grip = GRIP_ORDER.index(action.grip)
            nxt = sim.frames[t + 1].state if t + 1 < len(sim.frames) else sim.final_state
            rfeat = np.concatenate([obs_seq[t + 1], encode_action(action)])
            r = reward_forward(reward_params, rfeat) if reward_params is not None else 0.0
            done = 1 if (t == len(sim.frames) - 1 and task_success(nxt, env.task)) else 0
            buffer.add_demo(pol_s=policy_features(obs_seq[t], spec).astype(np.float32),
                            cont=np.clip(cont, -1, 1), grip=grip, reward=r,
                            pol_s2=policy_features(obs_seq[t + 1], spec).astype(np.float32),
                            done=done, reward_feat=rfeat)


def bootstrap_reward_dataset(sim_demos, envs_by_name, spec: FeatureSpec, template, err,
                             collector_seed: int = 0) -> RewardDataset:
    """Seed labels from demonstrations: pre-stage at each gripper-close frame
    and at the initial frame, post-stage at the terminal state."""
    from .oracle import noisy_label

    ds = RewardDataset()
    for env_name, sim in sim_demos:
        env = envs_by_name[env_name]
        close_frames = [t for t, f in enumerate(sim.frames)
                        if f.action.grip == "close" and f.state.gripper.aperture == "open"]
        pre_frames = sorted(set([0] + close_frames))
        for t in pre_frames:
            w = sim.frames[t].state
            obs = render_observation(w, env.cameras, spec)
            rec = noisy_label(w, env.cameras, template.pre_task, err, stage="pre")
            ds.add(np.concatenate([obs, encode_action(sim.frames[t].action)]),
                   rec.label, "pre")
        w_end = sim.final_state
        obs_end = render_observation(w_end, env.cameras, spec)
        rec = noisy_label(w_end, env.cameras, template.post_task, err, stage="post")
        ds.add(np.concatenate([obs_end, encode_action(sim.frames[-1].action)]),
               rec.label, "post")
        # mid-trajectory post-stage negatives/positives for coverage
        for t in range(0, len(sim.frames), max(len(sim.frames) // 4, 1)):
            w = sim.frames[t].state
            obs = render_observation(w, env.cameras, spec)
            rec = noisy_label(w, env.cameras, template.post_task, err, stage="post")
            ds.add(np.concatenate([obs, encode_action(sim.frames[t].action)]),
                   rec.label, "post")
    return ds


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: SacState
    reward_params: MlpParams
    dataset: RewardDataset
    metrics: list                      # dict rows for metrics.csv
    buffer: ReplayBuffer
    relabel_audits: list               # mismatch counts, one per reward update


METRICS_COLUMNS = ("step", "success_rate", "actor_loss", "critic_loss", "alpha",
                   "reward_acc", "label_queries")


def run_training(envs, sim_demos, template, err, cfg: TrainLoopConfig, seed: int,
                 total_steps: int, spec: FeatureSpec = None, audit_relabels: bool = False,
                 reward_dataset: RewardDataset = None, progress=None) -> TrainResult:
    """Alternating reward-model / BC-SAC optimization over randomized scenes.

    envs: TrainEnv list (one per refined demonstration scene).
    sim_demos: (env_name, SimDemonstration) pairs, replay-verified.
    """
    if not envs:
        raise ValueError("need at least one training environment")
    if spec is None:
        spec = FeatureSpec(camera_names=tuple(c.name for c in envs[0].cameras),
                           target_ids=tuple(envs[0].task.target_ids))
    envs_by_name = {e.name: e for e in envs}

    dataset = reward_dataset
    if dataset is None:
        dataset = bootstrap_reward_dataset(sim_demos, envs_by_name, spec, template, err)
    rcfg = replace(cfg.reward_train, seed=stream(seed, "reward-seed", 0).integers(2**31))
    reward_params, _ = reward_train(dataset, rcfg)

    buffer = ReplayBuffer(cfg.capacity, spec.policy_dim, spec.feature_dim)
    demo_transitions_into_buffer(sim_demos, envs_by_name, spec, buffer, reward_params)

    state = new_sac_state(spec.policy_dim, cfg, stream(seed, "net-init"))
    collector = LabelCollector(template, err, envs, spec, cfg.label_budget)

    metrics = []
    audits = []
    recent = {"actor_loss": 0.0, "critic_loss": 0.0, "alpha": 0.0}
    step_i = 0
    episode_i = 0
    reward_updates = 0

    while step_i < total_steps:
        env = envs[episode_i % len(envs)]
        w0 = randomize_init(env, stream(seed, "train-init", episode_i), cfg)
        rng = stream(seed, "train-episode", episode_i)
        w = w0
        obs = render_observation(w, env.cameras, spec)
        pol = policy_features(obs, spec).astype(np.float32)
        queried_pre_close = False
        for t in range(cfg.horizon):
            action, aux = act(state.policy, pol, "stochastic", rng)
            if t == 0:
                collector.query(env, w, obs, action, "pre", dataset)
            if (action.grip == "close" and w.gripper.aperture == "open"
                    and not queried_pre_close):
                collector.query(env, w, obs, action, "pre", dataset)
                queried_pre_close = True
            w2 = world_step(w, action)
            obs2 = render_observation(w2, env.cameras, spec)
            pol2 = policy_features(obs2, spec).astype(np.float32)
            success = task_success(w2, env.task)
            rfeat = np.concatenate([obs2, encode_action(action)])
            buffer.add(pol_s=pol, cont=aux["cont"], grip=aux["grip"],
                       reward=reward_forward(reward_params, rfeat),
                       pol_s2=pol2, done=1 if success else 0, reward_feat=rfeat)
            w, obs, pol = w2, obs2, pol2
            step_i += 1

            if buffer.size >= cfg.batch:
                for _ in range(cfg.updates_per_step):
                    diag = sac_update(buffer, state, cfg, stream(seed, "update", step_i))
                    for k in recent:
                        recent[k] = 0.99 * recent[k] + 0.01 * diag[k]

            if step_i % cfg.reward_update_period == 0:
                rcfg = replace(cfg.reward_train,
                               seed=stream(seed, "reward-seed", reward_updates + 1).integers(2**31))
                reward_params, _ = reward_train(dataset, rcfg)
                relabel(buffer, reward_params)
                reward_updates += 1
                collector.reset_period()
                if audit_relabels:
                    audits.append(audit_relabel(buffer, reward_params))

            if step_i % cfg.checkpoint_every == 0 or step_i >= total_steps:
                rate, _ = evaluate(state.policy, envs, spec, cfg, cfg.eval_episodes,
                                   seed, stream_name=f"train-eval-{step_i}")
                metrics.append({
                    "step": step_i,
                    "success_rate": rate,
                    "actor_loss": recent["actor_loss"],
                    "critic_loss": recent["critic_loss"],
                    "alpha": recent["alpha"],
                    "reward_acc": collector.accuracy,
                    "label_queries": collector.total_queries,
                })
                if progress is not None:
                    progress(step_i, metrics[-1])
            if step_i >= total_steps:
                break
            if success:
                break
        # terminal post-stage query at the episode's last state
        collector.query(env, w, obs, Action(np.zeros(3), 0.0, "hold"), "post", dataset)
        episode_i += 1

    return TrainResult(state=state, reward_params=reward_params, dataset=dataset,
                       metrics=metrics, buffer=buffer, relabel_audits=audits)


def metrics_to_csv(rows) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for r in rows:
        lines.append(",".join(
            f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in METRICS_COLUMNS
        ))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# behavior-cloning baseline


def train_bc(buffer: ReplayBuffer, spec: FeatureSpec, cfg: TrainLoopConfig, seed: int,
             steps: int = 4000, batch: int = 128) -> PolicyParams:
    """Actor-only imitation of the demonstration transitions (same losses as
    the BC term inside the actor update)."""
    if buffer.n_demo == 0:
        raise ValueError("no demonstration transitions to clone")
    rng = stream(seed, "bc-train")
    policy = init_policy(spec.policy_dim, cfg, stream(seed, "bc-init"))
    opt = Adam(lr=1e-3)
    for _ in range(steps):
        demo = buffer.sample_demo(min(batch, buffer.n_demo), rng)
        out, acts = mlp_forward(policy.net, demo["s"])
        mu, _, logits = _split_out(out)
        t = np.tanh(mu)
        diff = t - demo["cont"]
        probs = _softmax(logits)
        m = len(t)
        onehot = np.zeros_like(probs)
        onehot[np.arange(m), demo["grip"]] = 1.0
        dmu = 2.0 * diff * (1.0 - t * t) / m
        dlogits = (probs - onehot) / m
        dout = np.concatenate([dmu, np.zeros_like(dmu), dlogits], axis=1).astype(out.dtype)
        grads, _ = mlp_backward(policy.net, acts, dout)
        clip_grad_norm(grads, 10.0)
        opt.step(policy.net, grads)
    return policy

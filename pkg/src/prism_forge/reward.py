"""Projection-based reward model and the single-view action feasibility gate.

Features are rasterized: per view, a 24x24 area-mean depth map (normalized by
the far plane) concatenated with per-target binary masks (max-pooled), then a
gripper aperture bit and the candidate action (5 normalized values). The
reward network is a small MLP trained with BCE on oracle labels; its raw
probability is the dense reward, the 0.5-thresholded label is used only for
gating and accuracy metrics. Relabeling rewrites every stored transition
reward whenever the model is retrained.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, IdDepthImage, rasterize
from .nets import Adam, MlpParams, bce_loss_and_grad, clip_grad_norm, init_mlp, mlp_backward, mlp_forward, sigmoid
from .scenes import render_entries
from .seeding import stream
from .world import Action, WorldState

log = logging.getLogger(__name__)

FEATURE_RES = 24
ACTION_DIM = 5
GRIP_CODE = {"open": -1.0, "hold": 0.0, "close": 1.0}
GRIP_ORDER = ("open", "hold", "close")


@dataclass(frozen=True)
class FeatureSpec:
    camera_names: tuple            # view order; first entry is the policy view
    target_ids: tuple              # mask channel per target, in this order
    res: int = FEATURE_RES
    far: float = 3.0
    include_gripper_mask: bool = True   # end-effector visibility, as in camera images

    @property
    def view_block(self) -> int:
        channels = 1 + int(self.include_gripper_mask) + len(self.target_ids)
        return self.res * self.res * channels

    @property
    def obs_dim(self) -> int:
        return self.view_block * len(self.camera_names) + 1   # + aperture bit

    @property
    def feature_dim(self) -> int:
        return self.obs_dim + ACTION_DIM

    @property
    def policy_dim(self) -> int:
        return self.view_block + 1

    def single_view_indices(self) -> np.ndarray:
        """Feature indices of the scene-view block + aperture + action."""
        idx = list(range(self.view_block))
        idx.append(self.obs_dim - 1)
        idx.extend(range(self.obs_dim, self.obs_dim + ACTION_DIM))
        return np.array(idx, dtype=np.intp)


def _downsample_weights(src: int, dst: int):
    """Row-stochastic interval-overlap matrix: exact area mean for any ratio."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


_DS_CACHE = {}


def _ds_matrix(src: int, dst: int):
    key = (src, dst)
    if key not in _DS_CACHE:
        _DS_CACHE[key] = _downsample_weights(src, dst)
    return _DS_CACHE[key]


@dataclass
class ViewBundle:
    """One camera's observation: the composite render plus the gripper
    marker's own footprint (a marker buried in a grasped object would vanish
    from the composite exactly when it matters most)."""

    composite: IdDepthImage
    gripper_footprint: IdDepthImage = None


def render_view_bundles(world: WorldState, cameras, include_gripper_mask=True):
    from .scenes import GRIPPER_MARKER_RADIUS, GRIPPER_MARKER_ID
    from .geometry import sphere as _sphere

    entries = render_entries(world)
    marker_entry = (GRIPPER_MARKER_ID, _sphere(GRIPPER_MARKER_RADIUS), world.gripper.pose)
    bundles = []
    for cam in cameras:
        composite = rasterize(entries, cam)
        marker = rasterize([marker_entry], cam) if include_gripper_mask else None
        bundles.append(ViewBundle(composite=composite, gripper_footprint=marker))
    return bundles


def encode_view(bundle: ViewBundle, spec: FeatureSpec) -> np.ndarray:
    img = bundle.composite
    d = _ds_matrix(img.height, spec.res)
    depth = (d @ (img.depth / spec.far) @ d.T).ravel()
    blocks = [np.clip(depth, 0.0, 1.0)]
    pool = d > 0
    if spec.include_gripper_mask:
        if bundle.gripper_footprint is None:
            raise ValueError("feature spec expects a gripper footprint channel")
        gmask = bundle.gripper_footprint.ids > 0
        blocks.append(((pool @ gmask @ pool.T) > 0).astype(float).ravel())
    for tid in spec.target_ids:
        mask = img.ids == tid
        blocks.append(((pool @ mask @ pool.T) > 0).astype(float).ravel())
    return np.concatenate(blocks)


def encode_action(action: Action) -> np.ndarray:
    return np.array([
        action.delta_t[0] / 0.05,
        action.delta_t[1] / 0.05,
        action.delta_t[2] / 0.05,
        action.delta_yaw / 0.2,
        GRIP_CODE[action.grip],
    ])


def encode_observation(views, aperture: str, spec: FeatureSpec) -> np.ndarray:
    """Multi-view observation part of the feature vector (no action)."""
    if len(views) != len(spec.camera_names):
        raise ValueError(f"expected {len(spec.camera_names)} views, got {len(views)}")
    views = [v if isinstance(v, ViewBundle) else ViewBundle(composite=v) for v in views]
    blocks = [encode_view(v, spec) for v in views]
    blocks.append(np.array([1.0 if aperture == "closed" else 0.0]))
    return np.concatenate(blocks)


def encode(views, aperture: str, action: Action, spec: FeatureSpec) -> np.ndarray:
    """Full reward-model input: multi-view observation + candidate action."""
    return np.concatenate([encode_observation(views, aperture, spec), encode_action(action)])


def render_observation(world: WorldState, cameras, spec: FeatureSpec) -> np.ndarray:
    bundles = render_view_bundles(world, cameras, spec.include_gripper_mask)
    return encode_observation(bundles, world.gripper.aperture, spec)


def policy_features(obs: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Scene-view block + aperture bit: the single-camera policy input."""
    return np.concatenate([obs[: spec.view_block], obs[-1:]])


# ---------------------------------------------------------------------------
# reward model


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Reward probabilities in (0,1) for a batch or single feature vector."""
    single = np.ndim(x) == 1
    logits, _ = mlp_forward(params, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    p = sigmoid(logits.reshape(-1))
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(p[0]) if single else p


@dataclass
class RewardDataset:
    features: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def add(self, feature: np.ndarray, label: int, stage: str, weight: float = 1.0):
        if label not in (0, 1):
            raise ValueError("labels must be 0 or 1")
        if weight <= 0:
            raise ValueError("weights must be positive")
        self.features.append(np.asarray(feature, dtype=np.float32))
        self.labels.append(int(label))
        self.stages.append(stage)
        self.weights.append(float(weight))

    def __len__(self):
        return len(self.labels)

    def arrays(self, stage=None):
        idx = range(len(self)) if stage is None else [i for i, s in enumerate(self.stages) if s == stage]
        X = np.array([self.features[i] for i in idx], dtype=np.float64)
        y = np.array([self.labels[i] for i in idx], dtype=np.float64)
        w = np.array([self.weights[i] for i in idx], dtype=np.float64)
        return X, y, w


@dataclass
class TrainConfig:
    batch: int = 64
    lr: float = 1e-3
    steps: int = 2000
    clip: float = 5.0
    hidden: tuple = (64, 32)
    seed: int = 0


def train(dataset: RewardDataset, config: TrainConfig = None, features=None, labels=None,
          weights=None):
    """Minibatch Adam on mean BCE with gradient-norm clipping.

    Returns (MlpParams, loss_trace). A single-class dataset trains anyway with
    a degenerate-dataset warning.
    """
    config = config or TrainConfig()
    if features is None:
        features, labels, weights = dataset.arrays()
    if len(labels) == 0:
        raise ValueError("empty dataset")
    classes = set(int(v) for v in labels)
    if len(classes) < 2:
        log.warning("degenerate reward dataset: single class %s", classes)
    rng = stream(config.seed, "reward-train")
    params = init_mlp([features.shape[1], *config.hidden, 1], rng)
    opt = Adam(lr=config.lr)
    n = len(labels)
    trace = []
    for step_i in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch, n))
        logits, acts = mlp_forward(params, features[idx])
        loss, dlogits = bce_loss_and_grad(logits, labels[idx], weights[idx])
        grads, _ = mlp_backward(params, acts, dlogits)
        clip_grad_norm(grads, config.clip)
        opt.step(params, grads)
        trace.append(loss)
    return params, trace


def relabel(buffer, params: MlpParams) -> int:
    """Rewrite every stored reward as forward(params, stored features).

    Demonstration transitions included; idempotent for fixed params.
    Returns the number of rewritten transitions.
    """
    n = len(buffer)
    if n == 0:
        return 0
    feats = buffer.reward_features_array()
    probs = forward(params, feats.astype(np.float64))
    buffer.set_rewards(probs)
    return n


def audit_relabel(buffer, params: MlpParams) -> int:
    """Number of stored rewards that disagree with forward(params, features)."""
    n = len(buffer)
    if n == 0:
        return 0
    feats = buffer.reward_features_array()
    probs = forward(params, feats.astype(np.float64))
    return int((buffer.rewards_array() != probs.astype(np.float32)).sum())


# ---------------------------------------------------------------------------
# action feasibility predictor


@dataclass
class FeasibilityParams:
    params: MlpParams
    spec: FeatureSpec
    threshold: float = 0.5
    irreversible: tuple = ("close",)


def derive_feasibility(dataset: RewardDataset, spec: FeatureSpec,
                       config: TrainConfig = None) -> FeasibilityParams:
    """Single-view predictor trained on pre-stage records: the multi-view
    features are reduced to the scene-view block + aperture + action."""
    X, y, w = dataset.arrays(stage="pre")
    if len(y) == 0:
        raise ValueError("no pre-stage records to derive the feasibility predictor from")
    idx = spec.single_view_indices()
    Xs = X[:, idx]
    params, _ = train(None, config or TrainConfig(), features=Xs, labels=y, weights=w)
    return FeasibilityParams(params=params, spec=spec)


def feasibility_input(obs: np.ndarray, action: Action, spec: FeatureSpec) -> np.ndarray:
    full = np.concatenate([obs, encode_action(action)])
    return full[spec.single_view_indices()]


def gate(pred: FeasibilityParams, obs: np.ndarray, action: Action):
    """(possibly modified action, denied flag): irreversible commands with
    predicted feasibility below threshold are replaced by hold, deltas kept.
    Ties at the threshold favor execution."""
    if action.grip not in pred.irreversible:
        return action, False
    p = forward(pred.params, feasibility_input(obs, action, pred.spec))
    if p >= pred.threshold:
        return action, False
    return Action(action.delta_t, action.delta_yaw, "hold"), True

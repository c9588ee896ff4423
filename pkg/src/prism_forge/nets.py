"""Minimal feedforward networks with analytic backprop, Adam, and a binary
checkpoint format (magic, version, architecture, row-major float64 blocks).

Hidden activations are tanh; the output layer is linear so heads (sigmoid,
Gaussian parameters, logits) are applied by callers, keeping one backprop
path for every network in the project.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: list                 # layer l: (fan_out, fan_in)
    biases: list                  # layer l: (fan_out,)

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("non-finite parameters")
            if w.shape[0] != b.shape[0]:
                raise ValueError("weight/bias shape mismatch")

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out_w, out_b = [], []
        i = 0
        for w in self.weights:
            out_w.append(vec[i:i + w.size].reshape(w.shape).copy())
            i += w.size
        for b in self.biases:
            out_b.append(vec[i:i + b.size].reshape(b.shape).copy())
            i += b.size
        return MlpParams(out_w, out_b)


def init_mlp(sizes, rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """(output, cache) for a batch (N, d_in); tanh hiddens, linear output."""
    x = np.atleast_2d(x)
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")
    acts = [x]
    h = x
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if l == n_layers - 1 else np.tanh(z)
        acts.append(h)
    return acts[-1], acts


def mlp_backward(params: MlpParams, acts, d_out: np.ndarray):
    """Gradients for mean-aggregated losses: d_out is dL/d(output), shape (N, d_out).

    Returns (grad MlpParams-like lists, dL/d_input).
    """
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = np.atleast_2d(d_out)
    d_input = None
    for l in range(n_layers - 1, -1, -1):
        h_in = acts[l]
        gw[l] = delta.T @ h_in
        gb[l] = delta.sum(axis=0)
        back = delta @ params.weights[l]
        if l > 0:
            delta = back * (1.0 - acts[l] ** 2)   # acts[l] is the tanh output feeding layer l
        else:
            d_input = back
    return (gw, gb), d_input


def clip_grad_norm(grads, max_norm: float) -> float:
    gw, gb = grads
    total = 0.0
    for g in gw + gb:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in gw + gb:
            g *= scale
    return norm


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: MlpParams, grads) -> None:
        gw, gb = grads
        flat_g = gw + gb
        flat_p = params.weights + params.biases
        if not self.m:
            self.m = [np.zeros_like(p) for p in flat_p]
            self.v = [np.zeros_like(p) for p in flat_p]
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(flat_p, flat_g, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss_and_grad(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray = None):
    """Mean weighted binary cross-entropy on logits; returns (loss, dL/dlogits)."""
    logits = logits.reshape(-1)
    labels = labels.reshape(-1).astype(float)
    if weights is None:
        weights = np.ones_like(labels)
    weights = weights.reshape(-1).astype(float)
    wsum = weights.sum()
    # log(1+exp(-|z|)) form is stable on both tails
    loss_vec = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    loss = float((weights * loss_vec).sum() / wsum)
    grad = (weights * (sigmoid(logits) - labels) / wsum).reshape(-1, 1)
    return loss, grad


# ---------------------------------------------------------------------------
# checkpoint format


def save_mlp(path, params: MlpParams, head: str = "linear") -> None:
    sizes = params.sizes
    head_b = head.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(struct.pack("<I", len(head_b)))
        f.write(head_b)
        for w in params.weights:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        for b in params.biases:
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_mlp(path):
    """(MlpParams, head) from a checkpoint file."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_sizes = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        sizes = struct.unpack(f"<{n_sizes}I", f.read(4 * n_sizes))
        (head_len,) = struct.unpack("<I", f.read(4))
        head = f.read(head_len).decode("utf-8")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            buf = f.read(8 * fan_in * fan_out)
            weights.append(np.frombuffer(buf, dtype="<f8").reshape(fan_out, fan_in).copy())
        for fan_out in sizes[1:]:
            buf = f.read(8 * fan_out)
            biases.append(np.frombuffer(buf, dtype="<f8").copy())
    return MlpParams(weights, biases), head

"""From-scratch multilayer perceptron and its training loop.

ReLU hidden layers, affine output (logits), softmax + cross-entropy or
a soft-label KL objective, analytic backpropagation and SGD with
classic momentum. Everything is float64 and driven by explicit RNG
streams so training is bit-reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng

EPS = 1e-12  # floor inside logarithms; avoids -inf on saturated softmax

PARAM_MAGIC = b"DFLW"
PARAM_VERSION = 1

HIDDEN_PRESETS = {
    "mnist-mlp": (512, 256, 128),
    "tiny": (64, 32),
}


@dataclass
class Mlp:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # weights[l] maps dims[l] -> dims[l+1]
    biases: list[np.ndarray]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class SgdConfig:
    eta: float = 0.001
    mu: float = 0.5

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must be in [0, 1)")


@dataclass
class VtConfig:
    beta: float = 0.9


def init_random(layer_dims, seed: int) -> Mlp:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError("need >= 2 positive layer dims")
    rng = make_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=dims, weights=weights, biases=biases)


def forward(m: Mlp, batch: np.ndarray) -> np.ndarray:
    """Logits for a (batch, d_in) matrix."""
    if batch.ndim != 2 or batch.shape[1] != m.layer_dims[0]:
        raise ValueError(f"batch must be (B, {m.layer_dims[0]})")
    h = batch
    last = len(m.weights) - 1
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w + b
        if l != last:
            h = np.maximum(h, 0.0)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean-reduced cross-entropy of probability rows vs hard labels."""
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, EPS))))


def vt_labels(c: int, num_classes: int, beta: float) -> np.ndarray:
    """Soft-label row: beta on the true class, remainder spread evenly.

    Rows sum to exactly 1.0 (the true-class entry absorbs the rounding).
    """
    if num_classes < 2:
        raise ValueError("need >= 2 classes for soft labels")
    if not 0 <= c < num_classes:
        raise ValueError("class out of range")
    if not (1.0 / num_classes) < beta <= 1.0:
        raise ValueError("beta must be in (1/num_classes, 1]")
    row = np.full(num_classes, (1.0 - beta) / (num_classes - 1))
    row[c] = 0.0
    # correct against the exactly rounded sum; numpy's vectorized sum
    # uses several accumulators and can skip 1.0 entirely, while with
    # fsum a one-ulp nudge always lands inside 1.0's rounding interval
    row[c] = 1.0 - math.fsum(row)
    while (err := 1.0 - math.fsum(row)) != 0.0:
        bumped = row[c] + err
        if bumped == row[c]:
            bumped = np.nextafter(row[c], np.inf if err > 0 else -np.inf)
        row[c] = bumped
    return row


def vt_label_matrix(labels: np.ndarray, num_classes: int, beta: float) -> np.ndarray:
    rows = {c: vt_labels(c, num_classes, beta) for c in np.unique(labels)}
    return np.stack([rows[int(y)] for y in labels])


def kl_loss(student_probs: np.ndarray, teacher_probs: np.ndarray) -> float:
    """Mean over batch of KL(teacher || student).

    0 * log 0 is taken as 0 on the teacher side; the student log has an
    epsilon floor.
    """
    if student_probs.shape != teacher_probs.shape:
        raise ValueError("student/teacher shape mismatch")
    t = teacher_probs
    s = np.maximum(student_probs, EPS)
    terms = np.where(t > 0, t * (np.log(np.maximum(t, EPS)) - np.log(s)), 0.0)
    return float(np.mean(terms.sum(axis=-1)))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def backward(m: Mlp, batch: np.ndarray, targets, loss_kind: str) -> np.ndarray:
    """Gradient of the mean-reduced loss w.r.t. all parameters, flattened.

    loss_kind "ce" takes hard labels, "kl" takes teacher probability
    rows. Both reduce to d(logits) = (softmax - target) / B.
    """
    if loss_kind not in ("ce", "kl"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    acts = [batch]
    pre = []
    h = batch
    last = len(m.weights) - 1
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l != last else z
        acts.append(h)
    probs = softmax(acts[-1])
    if loss_kind == "ce":
        target = _one_hot(np.asarray(targets), m.layer_dims[-1])
    else:
        target = np.asarray(targets)
        if target.shape != probs.shape:
            raise ValueError("teacher rows must match logits shape")
    batch_size = batch.shape[0]
    delta = (probs - target) / batch_size
    grads_w = [None] * len(m.weights)
    grads_b = [None] * len(m.biases)
    for l in range(last, -1, -1):
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ m.weights[l].T) * (pre[l - 1] > 0)
    return np.concatenate(
        [np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)]
    )


def get_params(m: Mlp) -> np.ndarray:
    """Flatten layer by layer: weights row-major, then bias."""
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(m.weights, m.biases)])


def set_params(m: Mlp, vec: np.ndarray) -> None:
    if vec.size != m.num_params:
        raise ValueError(f"expected {m.num_params} params, got {vec.size}")
    offset = 0
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        m.weights[l] = vec[offset : offset + w.size].reshape(w.shape).copy()
        offset += w.size
        m.biases[l] = vec[offset : offset + b.size].copy()
        offset += b.size


def sgd_step(m: Mlp, grads: np.ndarray, cfg: SgdConfig, velocity: np.ndarray) -> np.ndarray:
    """Classic momentum: v <- mu*v + g; w <- w - eta*v. Returns new v."""
    if grads.size != m.num_params:
        raise ValueError("gradient length mismatch")
    velocity = cfg.mu * velocity + grads
    set_params(m, get_params(m) - cfg.eta * velocity)
    return velocity


def train_local(
    m: Mlp,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    loss_kind: str,
    cfg: SgdConfig,
    rng: np.random.Generator,
    velocity: np.ndarray | None = None,
    beta: float = 0.9,
) -> np.ndarray:
    """Train in place for `epochs` passes of seeded shuffled mini-batches.

    Momentum velocity persists across batches (and, via the returned
    vector, across communication rounds). A batch_size larger than the
    slice falls back to one full batch per epoch.
    """
    if len(features) == 0:
        raise ValueError("empty data slice")
    if velocity is None:
        velocity = np.zeros(m.num_params)
    num_classes = m.layer_dims[-1]
    eff_batch = min(batch_size, len(features))
    for _ in range(epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(features), eff_batch):
            idx = order[start : start + eff_batch]
            xb, yb = features[idx], labels[idx]
            if loss_kind == "kl":
                targets = vt_label_matrix(yb, num_classes, beta)
            else:
                targets = yb
            grads = backward(m, xb, targets, loss_kind)
            velocity = sgd_step(m, grads, cfg, velocity)
    return velocity


def evaluate(m: Mlp, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean CE loss) on a test set. Argmax ties go to the
    lowest class index."""
    if len(features) == 0:
        raise ValueError("empty test set")
    logits = forward(m, features)
    preds = np.argmax(logits, axis=1)
    acc = float(np.mean(preds == labels))
    loss = ce_loss(softmax(logits), labels)
    return acc, loss


def save_params(vec: np.ndarray, path: str) -> None:
    """Checkpoint format: 16-byte header (magic, version, length) then
    little-endian float64s."""
    with open(path, "wb") as f:
        f.write(PARAM_MAGIC)
        f.write(struct.pack("<IQ", PARAM_VERSION, vec.size))
        f.write(vec.astype("<f8").tobytes())


def load_params(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != PARAM_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, length = struct.unpack("<IQ", header[4:])
        if version != PARAM_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(length * 8), dtype="<f8")
        if data.size != length:
            raise ValueError(f"{path}: truncated checkpoint")
        return data.astype(np.float64)

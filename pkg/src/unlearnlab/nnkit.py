"""Small deterministic feed-forward classifier with hand-written backprop."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import lambert_w  # noqa: F401  (re-exported for callers)

LOG_FLOOR = 1e-12
ACTIVATIONS = ("relu", "tanh")


@dataclass
class Model:
    """Parameter bundle. ``layers[i] = (W, b)`` with ``W`` shaped (fan_in, fan_out)."""

    layers: list
    activation: str = "relu"
    input_dim: int = 0
    num_classes: int = 0
    seed: int = 0

    @property
    def hidden_dims(self):
        return [w.shape[1] for w, _ in self.layers[:-1]]

    @property
    def num_params(self):
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self):
        return Model(
            [(w.copy(), b.copy()) for w, b in self.layers],
            self.activation,
            self.input_dim,
            self.num_classes,
            self.seed,
        )

    def flat(self):
        return np.concatenate([a.ravel() for wb in self.layers for a in wb])

    def equals(self, other):
        """Bit-for-bit parameter equality."""
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for la, lb in zip(self.layers, other.layers)
            for a, b in zip(la, lb)
        )


@dataclass
class GradBundle:
    grads: list
    loss: float = 0.0

    def flat(self):
        return np.concatenate([a.ravel() for wb in self.grads for a in wb])


@dataclass
class ParamMask:
    masks: list
    selected_count: int = field(init=False)

    def __post_init__(self):
        self.selected_count = int(sum(int(m.sum()) for wb in self.masks for m in wb))

    @classmethod
    def full(cls, model, value=True):
        return cls([(np.full(w.shape, value), np.full(b.shape, value)) for w, b in model.layers])

    def apply(self, grads: GradBundle) -> GradBundle:
        out = [(gw * mw, gb * mb) for (gw, gb), (mw, mb) in zip(grads.grads, self.masks)]
        return GradBundle(out, grads.loss)


def init_model(input_dim, hidden_dims, num_classes, seed, activation="relu"):
    """Glorot-uniform weights, ``U(-s, s)`` with ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return Model(layers, activation, int(input_dim), int(num_classes), int(seed))


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return 1.0 - a * a


def _forward_cache(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"batch must be (n, {model.input_dim}), got {X.shape}")
    acts, pre = [X], []
    h = X
    for w, b in model.layers[:-1]:
        z = h @ w + b
        h = _act(z, model.activation)
        pre.append(z)
        acts.append(h)
    w, b = model.layers[-1]
    return h @ w + b, acts, pre


def forward(model, X):
    """Return ``(logits, embeddings)``; embeddings are the penultimate activations."""
    logits, acts, _ = _forward_cache(model, X)
    return logits, acts[-1]


def backward(model, X, dlogits, dembed=None, loss=0.0):
    """Backpropagate ``dL/dlogits`` (and optionally ``dL/dembeddings``) to parameters."""
    _, acts, pre = _forward_cache(model, X)
    grads = [None] * len(model.layers)
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i == 0:
            break
        dh = delta @ w.T
        if dembed is not None and i == len(model.layers) - 1:
            dh = dh + dembed
        delta = dh * _act_grad(pre[i - 1], acts[i], model.activation)
    return GradBundle(grads, float(loss))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_sample_cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    p = softmax(logits)
    return -np.log(np.maximum(p[np.arange(len(labels)), labels], LOG_FLOOR))


def cross_entropy(logits, labels, weights=None):
    """Mean (optionally sample-weighted) cross-entropy and its gradient w.r.t. logits.

    With weights ``w_i`` the loss is ``mean(w_i * ce_i)``; weights are constants.
    Rows whose true-class probability is at the 1e-12 floor get zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    ce = per_sample_cross_entropy(logits, labels)
    grad = softmax(logits)
    floored = grad[np.arange(n), labels] <= LOG_FLOOR
    grad[np.arange(n), labels] -= 1.0
    # the floored loss is flat, so its gradient vanishes
    grad[floored] = 0.0
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        ce = weights * ce
        grad = grad * weights[:, None]
    return float(ce.mean()), grad / n


def kl_divergence(p_logits, q_logits, weights=None):
    """Mean over rows of ``KL(softmax(p) || softmax(q))`` and its gradient w.r.t. ``p_logits``.

    Optional per-row ``weights`` act as constants, as in ``cross_entropy``.
    """
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    n = p_logits.shape[0]
    logp = np.maximum(log_softmax(p_logits), np.log(LOG_FLOOR))
    logq = np.maximum(log_softmax(q_logits), np.log(LOG_FLOOR))
    p = softmax(p_logits)
    rows = (p * (logp - logq)).sum(axis=1)
    grad = p * ((logp - logq) - rows[:, None])
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        rows = weights * rows
        grad = grad * weights[:, None]
    return float(max(rows.mean(), 0.0)), grad / n


def sgd_step(model, grads, lr, mask=None, direction="descend"):
    """Return a new model with ``theta -/+ lr * g`` applied where ``mask`` is set."""
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr!r}")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    g = grads if mask is None else mask.apply(grads)
    sign = -1.0 if direction == "descend" else 1.0
    layers = []
    for (w, b), (gw, gb) in zip(model.layers, g.grads):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient shapes do not match model")
        layers.append((w + sign * lr * gw, b + sign * lr * gb))
    return Model(layers, model.activation, model.input_dim, model.num_classes, model.seed)


# Checkpoint format (little endian):
#   magic b"ULCK" | u32 version | u32 activation code | i64 input_dim | i64 n_hidden
#   | i64 hidden[n_hidden] | i64 num_classes | i64 seed
#   | f64 W0 (row-major) | f64 b0 | f64 W1 | f64 b1 | ...
_MAGIC = b"ULCK"
_VERSION = 1


def model_to_bytes(model):
    hidden = model.hidden_dims
    parts = [
        _MAGIC,
        struct.pack("<II", _VERSION, ACTIVATIONS.index(model.activation)),
        struct.pack(f"<qq{len(hidden)}qqq", model.input_dim, len(hidden), *hidden, model.num_classes, model.seed),
    ]
    for w, b in model.layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data):
    if data[:4] != _MAGIC:
        raise ValueError("not a model checkpoint")
    version, act = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    input_dim, n_hidden = struct.unpack_from("<qq", data, off)
    off += 16
    hidden = list(struct.unpack_from(f"<{n_hidden}q", data, off))
    off += 8 * n_hidden
    num_classes, seed = struct.unpack_from("<qq", data, off)
    off += 16
    dims = [input_dim, *hidden, num_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * w.size
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return Model(layers, ACTIVATIONS[act], int(input_dim), int(num_classes), int(seed))


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())

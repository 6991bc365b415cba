"""Dense feed-forward classifiers with hand-written backprop.

A model is a stack of affine layers.  Hidden layers apply ``relu`` or
``sigmoid``; the last layer emits logits.  Parameters live in one flat float64
vector laid out layer by layer: the weight matrix (shape ``out x in``,
row-major) followed by its bias.  The first ``encoder_depth`` layers form the
encoder, the rest the classification head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, TrainingDivergedError

FORMAT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0.0).astype(z.dtype)


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_grad(z, a):
    return a * (1.0 - a)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}

sigmoid = _sigmoid


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator keyed directly by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class DenseNetSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        acts = tuple(self.activations)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if not acts:
            acts = ("relu",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ConfigError(
                f"{len(widths) - 2} hidden layers but {len(acts)} activations given"
            )
        unknown = set(acts) - set(ACTIVATIONS)
        if unknown:
            raise ConfigError(f"unknown activation(s): {sorted(unknown)}")
        object.__setattr__(self, "activations", acts)
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes())


def init_params(spec: DenseNetSpec) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = philox(spec.seed)
    chunks = []
    for out_w, in_w in spec.shapes():
        bound = 1.0 / np.sqrt(in_w)
        chunks.append(rng.uniform(-bound, bound, size=out_w * in_w))
        chunks.append(rng.uniform(-bound, bound, size=out_w))
    return np.concatenate(chunks)


@dataclass
class VictimModel:
    spec: DenseNetSpec
    params: np.ndarray
    encoder_depth: int = 1
    model_id: str = ""
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ShapeError(
                f"parameter vector has shape {self.params.shape}, "
                f"spec needs ({self.spec.n_params},)"
            )
        if not 0 <= self.encoder_depth < self.spec.n_layers:
            raise ConfigError(
                f"encoder_depth must lie in [0, {self.spec.n_layers}), got {self.encoder_depth}"
            )

    @classmethod
    def build(cls, spec: DenseNetSpec, encoder_depth: int = 1, model_id: str = "") -> "VictimModel":
        return cls(spec, init_params(spec), encoder_depth, model_id)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params``; writing to them updates the model."""
        out, pos = [], 0
        for out_w, in_w in self.spec.shapes():
            W = self.params[pos : pos + out_w * in_w].reshape(out_w, in_w)
            pos += out_w * in_w
            b = self.params[pos : pos + out_w]
            pos += out_w
            out.append((W, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.spec.layer_widths[-1]

    @property
    def embed_dim(self) -> int:
        return self.spec.layer_widths[self.encoder_depth]

    def copy(self) -> "VictimModel":
        return replace(self, params=self.params.copy(), history=list(self.history))

    def predict(self, x) -> np.ndarray:
        logits, _, _ = forward(self, x)
        return np.argmax(logits, axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _as_batch(model: VictimModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2:
        raise ShapeError(f"expected a vector or a 2-d batch, got shape {x.shape}")
    return X, single


def _trace(model: VictimModel, X: np.ndarray, start: int = 0):
    """Run layers ``start..end`` keeping pre-activations and activations."""
    layers = model.layers()
    n_layers = len(layers)
    zs, acts = [], [X]
    a = X
    for idx in range(start, n_layers):
        W, b = layers[idx]
        if a.shape[1] != W.shape[1]:
            raise ShapeError(
                f"layer {idx}: expects input width {W.shape[1]}, got {a.shape[1]}"
            )
        z = a @ W.T + b
        if idx < n_layers - 1:
            a = ACTIVATIONS[model.spec.activations[idx]][0](z)
        else:
            a = z
        zs.append(z)
        acts.append(a)
    return zs, acts


def forward(model: VictimModel, x):
    """Return ``(logits, probs, encoding)`` for a vector or a batch of rows."""
    X, single = _as_batch(model, x)
    _, acts = _trace(model, X)
    logits = acts[-1]
    probs = softmax(logits)
    enc = acts[model.encoder_depth]
    if single:
        return logits[0], probs[0], enc[0]
    return logits, probs, enc


def encode(model: VictimModel, x) -> np.ndarray:
    X, single = _as_batch(model, x)
    a = X
    for idx, (W, b) in enumerate(model.layers()[: model.encoder_depth]):
        if a.shape[1] != W.shape[1]:
            raise ShapeError(f"layer {idx}: expects input width {W.shape[1]}, got {a.shape[1]}")
        a = ACTIVATIONS[model.spec.activations[idx]][0](a @ W.T + b)
    return a[0] if single else a


def head(model: VictimModel, h) -> np.ndarray:
    """Apply the classification head to encoder outputs, returning logits."""
    H = np.atleast_2d(np.asarray(h, dtype=np.float64))
    _, acts = _trace(model, H, start=model.encoder_depth)
    return acts[-1][0] if np.ndim(h) == 1 else acts[-1]


def _check_labels(model: VictimModel, y, n: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(y), (n,)).astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise DomainError(f"class index outside [0, {model.n_classes})")
    return y


def _logit_grad(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy loss and its gradient with respect to the logits.

    The true-class entry is written as minus the mass on the other classes, so
    a confident but unsaturated prediction keeps a nonzero gradient instead of
    cancelling to ``1 - 1 == 0``.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(len(y))
    loss = -logp[rows, y]
    g = p.copy()
    g[rows, y] = 0.0
    g[rows, y] = -g.sum(axis=1)
    return loss, g


def _backward(model: VictimModel, zs, acts, dz, need_params: bool = True):
    layers = model.layers()
    grads = [None] * len(layers) if need_params else None
    dx = None
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        if need_params:
            grads[idx] = (dz.T @ acts[idx], dz.sum(axis=0))
        da = dz @ W
        if idx > 0:
            act_grad = ACTIVATIONS[model.spec.activations[idx - 1]][1]
            dz = da * act_grad(zs[idx - 1], acts[idx])
        else:
            dx = da
    flat = None
    if need_params:
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return flat, dx


def loss(model: VictimModel, x, y) -> float:
    """Mean softmax cross-entropy."""
    X, _ = _as_batch(model, x)
    y = _check_labels(model, y, len(X))
    logits, _, _ = forward(model, X)
    return float(-log_softmax(logits)[np.arange(len(y)), y].mean())


def input_gradient(model: VictimModel, x, y) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the input.

    ``x`` may be a single vector or a batch; for a batch each row gets the
    gradient of its own loss (no averaging).
    """
    X, single = _as_batch(model, x)
    y = _check_labels(model, y, len(X))
    zs, acts = _trace(model, X)
    _, dz = _logit_grad(acts[-1], y)
    _, dx = _backward(model, zs, acts, dz, need_params=False)
    return dx[0] if single else dx


def loss_and_param_gradient(model: VictimModel, X, y, weight_decay: float = 0.0):
    X, _ = _as_batch(model, X)
    if len(X) == 0:
        raise DomainError("param_gradient needs a nonempty batch")
    y = _check_labels(model, y, len(X))
    zs, acts = _trace(model, X)
    losses, dz = _logit_grad(acts[-1], y)
    g, _ = _backward(model, zs, acts, dz / len(X))
    if weight_decay:
        g = g + weight_decay * model.params
    return float(losses.mean()), g


def param_gradient(model: VictimModel, X, y, weight_decay: float = 0.0) -> np.ndarray:
    """Mean cross-entropy gradient over the batch plus ``weight_decay * params``."""
    return loss_and_param_gradient(model, X, y, weight_decay)[1]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    learning_rate: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (100, 150)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    shuffle_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0 or self.lr_drop_factor <= 0:
            raise ConfigError("learning_rate and lr_drop_factor must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError("lr_drop_epochs must be strictly increasing")
        if self.epochs and any(e >= self.epochs for e in drops):
            raise ConfigError("every lr_drop_epoch must be < epochs")

    def lr_at(self, epoch: int) -> float:
        n_drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.learning_rate / self.lr_drop_factor**n_drops


def sgd_momentum(
    theta: np.ndarray,
    n_samples: int,
    grad_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    cfg: TrainConfig,
) -> tuple[np.ndarray, list[float]]:
    """Minibatch SGD with heavy-ball momentum.

    ``grad_fn(theta, batch_indices)`` returns ``(loss, gradient)`` and must
    already include any weight-decay term.  Returns the final parameters and
    the mean batch loss of every epoch.
    """
    theta = theta.copy()
    velocity = np.zeros_like(theta)
    rng = philox(cfg.shuffle_seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n_samples)
        total, count = 0.0, 0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_loss, g = grad_fn(theta, idx)
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(g)):
                raise TrainingDivergedError(epoch, batch_loss)
            velocity = cfg.momentum * velocity + g
            theta -= lr * velocity
            total += batch_loss * len(idx)
            count += len(idx)
        history.append(total / count)
    return theta, history


def train(
    spec: DenseNetSpec,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    encoder_depth: int = 1,
    model_id: str = "",
    init: VictimModel | None = None,
) -> VictimModel:
    """Train a classifier from its seeded initialization (or continue ``init``)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise DomainError("cannot train on an empty dataset")
    if y.max() >= spec.layer_widths[-1] or y.min() < 0:
        raise DomainError("class labels exceed the output width")
    model = init.copy() if init is not None else VictimModel.build(spec, encoder_depth, model_id)
    scratch = model.copy()

    def grad_fn(theta, idx):
        scratch.params = theta
        return loss_and_param_gradient(scratch, X[idx], y[idx], cfg.weight_decay)

    model.params, hist = sgd_momentum(model.params, len(X), grad_fn, cfg)
    model.history = list(model.history) + hist
    return model


def save_model(model: VictimModel, path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_id": model.model_id,
        "layer_widths": list(model.spec.layer_widths),
        "activations": list(model.spec.activations),
        "seed": model.spec.seed,
        "encoder_depth": model.encoder_depth,
        "n_params": model.spec.n_params,
        "dtype": "<f8",
        "loss_history": [float(v) for v in model.history],
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    model.params.astype("<f8").tofile(path.with_suffix(".bin"))


def load_model(path) -> VictimModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    spec = DenseNetSpec(
        tuple(manifest["layer_widths"]), tuple(manifest["activations"]), manifest["seed"]
    )
    params = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
    return VictimModel(
        spec,
        params,
        manifest["encoder_depth"],
        manifest.get("model_id", ""),
        list(manifest.get("loss_history", [])),
    )


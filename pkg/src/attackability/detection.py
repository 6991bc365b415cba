"""Deep attackability detectors on frozen encoder embeddings, plus baselines.

A detector maps an embedding ``h`` to ``sigmoid(W1 @ sigmoid(W0 @ h))`` with
no bias terms and a hidden width equal to the embedding width.  One detector
is trained per seen model and polarity; their mean probability, raised to
``alpha``, estimates the probability that a sample is universally
attackable (or robust) including an unseen target.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DegenerateLabelsError, ShapeError
from .nn_core import TrainConfig, VictimModel, encode, forward, philox, sgd_momentum, sigmoid


@dataclass
class DetectorModel:
    W0: np.ndarray
    W1: np.ndarray
    owning_model_id: str = ""
    polarity: str = "attackable"
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.W1 = np.asarray(self.W1, dtype=np.float64).reshape(1, -1)
        if self.W0.ndim != 2 or self.W0.shape[0] != self.W0.shape[1]:
            raise ShapeError(f"W0 must be square (hidden = embedding width), got {self.W0.shape}")
        if self.W1.shape[1] != self.W0.shape[0]:
            raise ShapeError("W1 width must equal the hidden width")

    @property
    def embed_dim(self) -> int:
        return self.W0.shape[1]

    def score_embeddings(self, H) -> np.ndarray:
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        if H.shape[1] != self.embed_dim:
            raise ShapeError(f"detector expects embeddings of width {self.embed_dim}, got {H.shape[1]}")
        return sigmoid(sigmoid(H @ self.W0.T) @ self.W1.T)[:, 0]

    def save(self, path) -> None:
        """Same byte layout as victim models: little-endian f8, W0 then W1, no biases."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": 1,
            "layer_widths": [self.embed_dim, self.embed_dim, 1],
            "activations": ["sigmoid"],
            "output": "sigmoid",
            "bias": False,
            "dtype": "<f8",
            "polarity": self.polarity,
            "owning_model_id": self.owning_model_id,
            "loss_history": [float(v) for v in self.history],
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        np.concatenate([self.W0.ravel(), self.W1.ravel()]).astype("<f8").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path) -> "DetectorModel":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        e = manifest["layer_widths"][0]
        flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
        return cls(
            flat[: e * e].reshape(e, e),
            flat[e * e :].reshape(1, e),
            manifest["owning_model_id"],
            manifest["polarity"],
            manifest.get("loss_history", []),
        )


def _bce_grad(theta, H, t, weight_decay):
    e = H.shape[1]
    W0 = theta[: e * e].reshape(e, e)
    W1 = theta[e * e :].reshape(1, e)
    a = sigmoid(H @ W0.T)
    z = (a @ W1.T)[:, 0]
    loss = np.mean(np.logaddexp(0.0, z) - t * z)
    dz = (sigmoid(z) - t)[:, None] / len(t)
    gW1 = dz.T @ a
    da = dz @ W1
    gW0 = (da * a * (1.0 - a)).T @ H
    g = np.concatenate([gW0.ravel(), gW1.ravel()]) + weight_decay * theta
    return float(loss + 0.5 * weight_decay * theta @ theta), g


def train_detector_embeddings(
    H,
    targets,
    cfg: TrainConfig,
    polarity: str = "attackable",
    owning_model_id: str = "",
    init_seed: int = 0,
) -> DetectorModel:
    """Fit a detector with binary cross-entropy on precomputed embeddings."""
    H = np.asarray(H, dtype=np.float64)
    t = np.asarray(targets, dtype=bool)
    if H.ndim != 2 or len(H) != len(t):
        raise ShapeError("embeddings and targets must align")
    if t.all() or not t.any():
        raise DegenerateLabelsError(
            f"targets for {owning_model_id or 'detector'} ({polarity}) contain a single class"
        )
    e = H.shape[1]
    bound = 1.0 / np.sqrt(e)
    rng = philox(init_seed)
    theta = rng.uniform(-bound, bound, size=e * e + e)
    tf = t.astype(np.float64)

    def grad_fn(theta, idx):
        return _bce_grad(theta, H[idx], tf[idx], cfg.weight_decay)

    theta, hist = sgd_momentum(theta, len(t), grad_fn, cfg)
    return DetectorModel(theta[: e * e].reshape(e, e), theta[e * e :], owning_model_id, polarity, hist)


def train_detector(
    model: VictimModel,
    X,
    targets,
    cfg: TrainConfig,
    polarity: str = "attackable",
    init_seed: int = 0,
) -> DetectorModel:
    """Train a detector on ``model``'s frozen encoder; the model is not modified."""
    return train_detector_embeddings(encode(model, X), targets, cfg, polarity, model.model_id, init_seed)


def detector_score(det: DetectorModel, model: VictimModel, X) -> np.ndarray:
    """``p(flag)`` per row of ``X``; a scalar for a single sample."""
    single = np.ndim(X) == 1
    s = det.score_embeddings(encode(model, X))
    return float(s[0]) if single else s


@dataclass
class ScoreVector:
    """Per-sample detection scores in [0, 1]."""

    sample_ids: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.sample_ids = list(self.sample_ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.sample_ids),):
            raise ShapeError("scores must align with sample_ids")
        if not np.all(np.isfinite(self.scores)) or self.scores.min(initial=0) < 0 or self.scores.max(initial=0) > 1:
            raise ValueError("scores must be finite and lie in [0, 1]")

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "score"])
            for sid, s in zip(self.sample_ids, self.scores):
                w.writerow([sid, repr(float(s))])

    @classmethod
    def from_csv(cls, path) -> "ScoreVector":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([r["sample_id"] for r in rows], [float(r["score"]) for r in rows])


def default_alpha(n_seen: int) -> float:
    """Number of seen models plus the target."""
    return float(n_seen + 1)


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float = 1.0
    members: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        object.__setattr__(self, "members", tuple(self.members))


def ensemble_score(members: Sequence[ScoreVector], cfg: EnsembleConfig) -> ScoreVector:
    """Mean member probability raised to ``cfg.alpha``."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    ids = members[0].sample_ids
    for m in members[1:]:
        if m.sample_ids != ids:
            raise AlignmentError("member score vectors cover different samples")
    mean = np.mean([m.scores for m in members], axis=0)
    return ScoreVector(ids, mean**cfg.alpha)


def confidence_score(model: VictimModel, X, polarity: str) -> np.ndarray:
    """``1 - max prob`` for attackable polarity, ``max prob`` for robust."""
    _, probs, _ = forward(model, X)
    conf = probs.max(axis=-1)
    if polarity == "attackable":
        return 1.0 - conf
    if polarity == "robust":
        return conf
    raise ValueError(f"unknown polarity {polarity!r}")


def ensemble_confidence(models: Sequence[VictimModel], X, polarity: str) -> np.ndarray:
    """Seen-model average of the polarity-adjusted confidence score."""
    return np.mean([confidence_score(m, X, polarity) for m in models], axis=0)

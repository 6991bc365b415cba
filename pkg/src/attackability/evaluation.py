"""Detection metrics, rank correlation, fooling rate and active adversarial training."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, attack
from .data import LabeledDataset
from .errors import ConfigError, DomainError
from .nn_core import TrainConfig, VictimModel, forward, philox, train

RANKINGS = ("random", "uncertainty", "deep")


@dataclass
class PRCurve:
    """Operating points ordered by increasing threshold ``beta``.

    A sample is predicted positive when its score is strictly above ``beta``.
    Precision is reported as 1 where nothing is predicted positive.
    """

    betas: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.f1))

    @property
    def best_f1(self) -> float:
        return float(self.f1[self.best_index])

    @property
    def best_threshold(self) -> float:
        return float(self.betas[self.best_index])

    def points(self) -> set[tuple[float, float]]:
        return set(zip(self.precision.tolist(), self.recall.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "precision", "recall", "f1"])
            for row in zip(self.betas, self.precision, self.recall, self.f1):
                w.writerow([repr(float(v)) for v in row])


def pr_sweep(scores, truth) -> PRCurve:
    """Precision/recall/F1 at every distinct score threshold plus one below the minimum."""
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores and truth must be aligned, nonempty vectors")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise DomainError("recall is undefined: truth has no positives")
    uniq = np.unique(scores)
    betas = np.concatenate([[uniq[0] - 1.0], uniq])
    order = np.argsort(-scores, kind="stable")
    cum_tp = np.concatenate([[0], np.cumsum(truth[order])])
    ascending = np.sort(scores)
    n_pred = len(scores) - np.searchsorted(ascending, betas, side="right")
    tp = cum_tp[n_pred].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
    recall = tp / n_pos
    # 2PR / (P + R) rewritten as one division of counts; 0 when tp = 0
    f1 = 2 * tp / (n_pred + n_pos)
    return PRCurve(betas, precision, recall, f1)


def prevalence_f1(truth) -> float:
    """F1 of predicting every sample positive."""
    truth = np.asarray(truth, dtype=bool)
    p, n = truth.sum(), truth.size
    return float(2 * p / (n + p))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    a = np.asarray(values, dtype=np.float64)
    if np.isnan(a).any():
        raise DomainError("cannot rank NaN")
    n = a.size
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    new_group = np.concatenate([[True], s[1:] != s[:-1]])
    starts = np.flatnonzero(new_group)
    ends = np.concatenate([starts[1:], [n]])
    group = np.cumsum(new_group) - 1
    ranks = np.empty(n)
    ranks[order] = ((starts + 1 + ends) / 2.0)[group]
    return ranks


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    saa, sbb, sab = ra @ ra, rb @ rb, ra @ rb
    if saa == 0 or sbb == 0:
        raise DomainError("correlation undefined for a constant vector")
    # equal spreads (no ties) divide once, keeping rational results correctly rounded
    r = sab / saa if saa == sbb else sab / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


def fooling_rate(model: VictimModel, X, cfg: AttackConfig) -> float:
    """Fraction of rows whose prediction changes under the attack."""
    X = np.asarray(getattr(X, "samples", X), dtype=np.float64)
    if len(X) == 0:
        raise DomainError("fooling rate of an empty dataset")
    return float(np.mean(attack(model, X, cfg).success))


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def rank_pool(
    target: VictimModel,
    pool: LabeledDataset,
    ranking: str,
    deep_scores=None,
    seed: int = 0,
) -> np.ndarray:
    """Pool indices ordered from most to least worth attacking."""
    if ranking == "random":
        return philox(seed).permutation(len(pool))
    if ranking == "uncertainty":
        _, probs, _ = forward(target, pool.samples)
        return np.argsort(-entropy(probs), kind="stable")
    if ranking == "deep":
        if deep_scores is None:
            raise ConfigError("deep ranking needs detector scores")
        s = np.asarray(getattr(deep_scores, "scores", deep_scores), dtype=np.float64)
        if s.shape != (len(pool),):
            raise ConfigError("deep scores must align with the pool")
        return np.argsort(-s, kind="stable")
    raise ConfigError(f"unknown ranking {ranking!r}")


def active_adv_train(
    target: VictimModel,
    pool: LabeledDataset,
    ranking: str,
    budget_fraction: float,
    attack_cfg: AttackConfig,
    train_cfg: TrainConfig,
    test: LabeledDataset,
    deep_scores=None,
    rank_seed: int = 0,
    clean_mix: float = 0.0,
    eval_cfg: AttackConfig | None = None,
) -> tuple[VictimModel, float]:
    """Adversarially fine-tune ``target`` on the top-ranked share of ``pool``.

    The selected samples are attacked against ``target`` and the model keeps
    training on the adversarial examples under their original labels.
    ``clean_mix`` appends that fraction of the selected clean samples to the
    fine-tuning set.  Returns the fine-tuned model and its fooling rate on
    ``test`` under ``eval_cfg`` (defaults to ``attack_cfg``).
    """
    if not 0 < budget_fraction <= 1:
        raise ConfigError("budget_fraction must lie in (0, 1]")
    k = int(np.floor(budget_fraction * len(pool) + 1e-9))
    if k == 0:
        raise DomainError("budget selects no samples")
    order = rank_pool(target, pool, ranking, deep_scores, rank_seed)
    chosen = np.sort(order[:k])
    X = pool.samples[chosen]
    y = pool.labels[chosen]
    X_adv = X + attack(target, X, attack_cfg).delta
    if clean_mix > 0:
        n_clean = int(round(clean_mix * k))
        X_adv = np.concatenate([X_adv, X[:n_clean]])
        y = np.concatenate([y, y[:n_clean]])
    tuned = train(target.spec, X_adv, y, train_cfg, init=target)
    return tuned, fooling_rate(tuned, test.samples, eval_cfg or attack_cfg)


def write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)

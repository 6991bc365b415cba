"""Attackable / robust labels, universal intersections and evaluation sets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import PerturbationTable
from .errors import ConfigError, DomainError, IncompleteTableError

POLARITIES = ("attackable", "robust")
SETTINGS = ("all", "uni", "spec", "vspec")


@dataclass(frozen=True)
class ThresholdPair:
    eps_attackable: float
    eps_robust: float

    def __post_init__(self):
        if self.eps_attackable <= 0 or self.eps_robust <= 0:
            raise ConfigError("thresholds must be positive")
        if not self.eps_attackable < self.eps_robust:
            raise ConfigError("eps_attackable must be below eps_robust")


# values used with CIFAR-scale models; BIM shares the PGD pair
REFERENCE_THRESHOLDS = {
    "fgsm": ThresholdPair(0.05, 0.39),
    "pgd": ThresholdPair(0.03, 0.10),
    "bim": ThresholdPair(0.03, 0.10),
}


def thresholds_from_quantiles(
    table: PerturbationTable,
    method: str,
    model_ids: Sequence[str],
    attackable_quantile: float,
    robust_quantile: float,
) -> ThresholdPair:
    """Read a threshold pair off the pooled per-model distribution of delta-hat.

    ``attackable_quantile = 0.3`` puts roughly the 30% smallest perturbations
    below ``eps_attackable``; ``robust_quantile = 0.7`` leaves roughly the top
    30% above ``eps_robust``.
    """
    if not 0 < attackable_quantile < robust_quantile < 1:
        raise ConfigError("need 0 < attackable_quantile < robust_quantile < 1")
    pooled = np.concatenate([table.delta(m, method) for m in model_ids])
    # order statistics rather than interpolation, so sentinels (inf) are harmless
    ordered = np.sort(pooled)
    n = ordered.size
    eps_a = ordered[int(np.floor(attackable_quantile * (n - 1)))]
    eps_r = ordered[int(np.floor(robust_quantile * (n - 1)))]
    if not np.isfinite(eps_a):
        raise DomainError(f"{method}: quantile {attackable_quantile} falls on unattackable samples")
    if not np.isfinite(eps_r):
        eps_r = ordered[np.isfinite(ordered)].max()
    return ThresholdPair(float(eps_a), float(eps_r))


@dataclass
class AttackabilityLabels:
    """Boolean flags per (sample, model); columns follow ``model_ids``."""

    sample_ids: list[str]
    model_ids: list[str]
    attackable: np.ndarray
    robust: np.ndarray
    method: str = ""
    thresholds: ThresholdPair | None = None

    def __post_init__(self):
        shape = (len(self.sample_ids), len(self.model_ids))
        self.attackable = np.asarray(self.attackable, dtype=bool).reshape(shape)
        self.robust = np.asarray(self.robust, dtype=bool).reshape(shape)
        if np.any(self.attackable & self.robust):
            raise ValueError("a sample cannot be both attackable and robust for one model")

    def flags(self, polarity: str) -> np.ndarray:
        if polarity == "attackable":
            return self.attackable
        if polarity == "robust":
            return self.robust
        raise ValueError(f"unknown polarity {polarity!r}")

    def column(self, model_id: str, polarity: str) -> np.ndarray:
        return self.flags(polarity)[:, self.model_ids.index(model_id)]

    def universal(self, model_ids: Sequence[str], polarity: str) -> np.ndarray:
        """Conjunction of the per-model flags over ``model_ids``."""
        cols = [self.model_ids.index(m) for m in model_ids]
        return self.flags(polarity)[:, cols].all(axis=1)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "model_id", "attackable", "robust"])
            for j, mid in enumerate(self.model_ids):
                for i, sid in enumerate(self.sample_ids):
                    w.writerow([sid, mid, int(self.attackable[i, j]), int(self.robust[i, j])])

    @classmethod
    def from_csv(cls, path) -> "AttackabilityLabels":
        sids: dict[str, int] = {}
        mids: dict[str, int] = {}
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                sids.setdefault(row["sample_id"], len(sids))
                mids.setdefault(row["model_id"], len(mids))
                rows.append(row)
        A = np.zeros((len(sids), len(mids)), dtype=bool)
        R = np.zeros_like(A)
        for row in rows:
            i, j = sids[row["sample_id"]], mids[row["model_id"]]
            A[i, j] = row["attackable"] == "1"
            R[i, j] = row["robust"] == "1"
        return cls(list(sids), list(mids), A, R)


def label_samples(
    table: PerturbationTable,
    thresholds: ThresholdPair,
    method: str,
    model_ids: Sequence[str] | None = None,
) -> AttackabilityLabels:
    """Attackable iff delta-hat < eps_a; robust iff delta-hat > eps_r.

    A sentinel (``inf``) counts as robust and never as attackable.
    """
    model_ids = list(model_ids) if model_ids is not None else table.model_ids
    missing = []
    cols_a, cols_r = [], []
    for mid in model_ids:
        if (mid, method) not in table.entries:
            missing.extend((sid, mid, method) for sid in table.sample_ids)
            continue
        delta = table.delta(mid, method)
        holes = np.flatnonzero(np.isnan(delta))
        missing.extend((table.sample_ids[i], mid, method) for i in holes)
        cols_a.append(delta < thresholds.eps_attackable)
        cols_r.append(delta > thresholds.eps_robust)
    if missing:
        raise IncompleteTableError(missing)
    A = np.stack(cols_a, axis=1) if cols_a else np.zeros((len(table.sample_ids), 0), bool)
    R = np.stack(cols_r, axis=1) if cols_r else np.zeros_like(A)
    return AttackabilityLabels(table.sample_ids, model_ids, A, R, method, thresholds)


def fraction_attackable_curve(
    table: PerturbationTable,
    method: str,
    model: str | Sequence[str],
    eps_grid: Sequence[float],
    seen: Sequence[str] | None = None,
) -> list[tuple[float, float]]:
    """Fraction of samples with delta-hat < eps at every eps of ``eps_grid``.

    ``model`` is a model id, or ``"uni"`` for the universal fraction over
    ``seen`` (all models in the table when ``seen`` is omitted).
    """
    grid = np.asarray(eps_grid, dtype=np.float64)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ConfigError("eps grid must be increasing")
    if not table.sample_ids:
        raise DomainError("empty dataset")
    if isinstance(model, str) and model != "uni":
        deltas = table.delta(model, method)[:, None]
    else:
        ids = list(seen) if seen is not None else (table.model_ids if model == "uni" else list(model))
        deltas = np.stack([table.delta(m, method) for m in ids], axis=1)
    # universal delta is the largest per-model delta: A_n^(M) holds iff max_k delta < eps
    worst = deltas.max(axis=1)
    return [(float(e), float(np.mean(worst < e))) for e in grid]


def evaluation_sets(
    labels: AttackabilityLabels,
    seen: Sequence[str],
    target: str,
    polarity: str = "attackable",
) -> dict[str, np.ndarray]:
    """Ground-truth masks for the four evaluation settings.

    all   - flagged for the target
    uni   - flagged for the target and for every seen model
    spec  - flagged for the target but not for every seen model
    vspec - flagged for the target and for no seen model
    """
    if target in seen:
        raise ConfigError(f"target {target!r} is also in the seen set")
    if not seen:
        raise ConfigError("seen set is empty")
    flags = labels.flags(polarity)
    t = flags[:, labels.model_ids.index(target)]
    seen_cols = flags[:, [labels.model_ids.index(m) for m in seen]]
    universal = seen_cols.all(axis=1)
    return {
        "all": t.copy(),
        "uni": t & universal,
        "spec": t & ~universal,
        "vspec": t & ~seen_cols.any(axis=1),
    }


def set_summary(labels: AttackabilityLabels, seen: Sequence[str], target: str) -> dict:
    out = {}
    for polarity in POLARITIES:
        sets = evaluation_sets(labels, seen, target, polarity)
        out[polarity] = {
            "per_model": {m: int(labels.column(m, polarity).sum()) for m in labels.model_ids},
            "universal_seen": int(labels.universal(seen, polarity).sum()),
            **{k: int(v.sum()) for k, v in sets.items()},
        }
    return {"n_samples": len(labels.sample_ids), **out}


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))

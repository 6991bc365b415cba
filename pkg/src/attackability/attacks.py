"""l-inf gradient-sign attacks and the minimum-perturbation search.

Every attack labels the clean sample with the model's own prediction and
counts as successful when the prediction on ``x + delta`` differs from it.
All entry points accept one sample or a batch of rows; batched calls treat
rows independently.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetViolation, ConfigError, DomainError, ProvenanceError, ShapeError
from .nn_core import VictimModel, input_gradient, philox

METHODS = ("fgsm", "bim", "pgd")
BUDGET_SLACK = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule for one attack.

    ``step_alpha`` defaults to ``epsilon`` for FGSM and ``epsilon / 4`` for the
    iterative methods.  A zero ``epsilon`` is accepted and yields ``delta = 0``.
    """

    method: str = "fgsm"
    epsilon: float = 0.03
    step_alpha: float | None = None
    iterations: int = 8
    init_seed: int = 0
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.step_alpha is None:
            alpha = self.epsilon if self.method == "fgsm" else self.epsilon / 4
            object.__setattr__(self, "step_alpha", float(alpha))
        if self.step_alpha < 0 or self.step_alpha > self.epsilon * (1 + 1e-12):
            raise ConfigError("step_alpha must lie in [0, epsilon]")
        if self.method != "fgsm" and self.iterations < 1:
            raise ConfigError("iterative attacks need iterations >= 1")
        if not self.clamp_lo < self.clamp_hi:
            raise ConfigError("clamp_lo must be below clamp_hi")

    @property
    def step_ratio(self) -> float:
        if self.epsilon > 0:
            return self.step_alpha / self.epsilon
        return 1.0 if self.method == "fgsm" else 0.25

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        """Same schedule at a new budget, keeping ``step_alpha / epsilon`` fixed."""
        return replace(self, epsilon=float(epsilon), step_alpha=float(epsilon) * self.step_ratio)


@dataclass
class AttackOutcome:
    """Result of one attack call.

    For a batched call every field is an array with one entry (or row) per
    sample; ``queries`` is the number of forward/gradient passes per sample.
    """

    delta: np.ndarray
    success: np.ndarray | bool
    delta_inf_norm: np.ndarray | float
    queries: int


@dataclass
class BudgetAudit:
    calls: int = 0
    samples: int = 0
    violations: int = 0

    def reset(self):
        self.calls = self.samples = self.violations = 0


# process-wide tally of every budget/box check made by the attacks below
AUDIT = BudgetAudit()


def _check_budget(X, X_adv, eps, lo, hi):
    norms = np.abs(X_adv - X).max(axis=1) if X.shape[1] else np.zeros(len(X))
    bad = (norms > np.ravel(eps) + BUDGET_SLACK) | (X_adv < lo).any(axis=1) | (X_adv > hi).any(axis=1)
    AUDIT.calls += 1
    AUDIT.samples += len(X)
    if bad.any():
        AUDIT.violations += int(bad.sum())
        raise BudgetViolation(
            f"{int(bad.sum())} perturbation(s) leave the eps-ball or the input box"
        )
    return norms


def _batch(x, cfg: AttackConfig):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"expected a vector or 2-d batch, got shape {np.shape(x)}")
    if (X < cfg.clamp_lo).any() or (X > cfg.clamp_hi).any():
        raise DomainError("input lies outside the clamp range")
    return X, single


def _column(eps, n):
    return np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,)).reshape(n, 1)


def start_noise(shape, seed: int) -> np.ndarray:
    """Uniform draw on [-1, 1]^d used to place PGD's random start."""
    return philox(seed).uniform(-1.0, 1.0, size=shape)


def _fgsm_step(model, X, y, eps, lo, hi):
    g = input_gradient(model, X, y)
    return np.clip(X + eps * np.sign(g), lo, hi)


def _sign_ascent(model, X, y, x0, eps, alpha, iterations, lo, hi):
    xa = x0
    for _ in range(iterations):
        g = input_gradient(model, xa, y)
        xa = xa + alpha * np.sign(g)
        xa = np.clip(xa, X - eps, X + eps)
        xa = np.clip(xa, lo, hi)
    return xa


def run_attack(model: VictimModel, X, y, eps, cfg: AttackConfig, noise=None):
    """Batched attack core with a per-row budget ``eps``.

    ``y`` holds the class the attack pushes away from.  ``noise`` overrides
    PGD's random start (rows of U[-1, 1]^d scaled by each row's budget).
    Returns ``(x_adv, queries)``; budget and box are asserted before return.
    """
    n = len(X)
    eps = _column(eps, n)
    lo, hi = cfg.clamp_lo, cfg.clamp_hi
    if cfg.method == "fgsm":
        x_adv = _fgsm_step(model, X, y, eps, lo, hi)
        queries = 1
    else:
        if cfg.method == "pgd":
            if noise is None:
                noise = start_noise(X.shape, cfg.init_seed)
            x0 = np.clip(X + eps * noise, lo, hi)
        else:
            x0 = X
        alpha = eps * cfg.step_ratio
        x_adv = _sign_ascent(model, X, y, x0, eps, alpha, cfg.iterations, lo, hi)
        queries = cfg.iterations
    _check_budget(X, x_adv, eps, lo, hi)
    return x_adv, queries


def _outcome(model, X, x_adv, y, queries, single):
    delta = x_adv - X
    success = model.predict(x_adv) != y
    norms = np.abs(delta).max(axis=1)
    # clean prediction and adversarial prediction
    queries += 2
    if single:
        return AttackOutcome(delta[0], bool(success[0]), float(norms[0]), queries)
    return AttackOutcome(delta, success, norms, queries)


def attack(model: VictimModel, x, cfg: AttackConfig, start=None) -> AttackOutcome:
    """Dispatch on ``cfg.method``.  ``start`` fixes the PGD initial point."""
    X, single = _batch(x, cfg)
    y = model.predict(X)
    if start is not None:
        if cfg.method == "fgsm":
            raise ConfigError("FGSM takes no starting point")
        x0 = np.clip(np.asarray(start, dtype=np.float64).reshape(X.shape), X - cfg.epsilon, X + cfg.epsilon)
        x0 = np.clip(x0, cfg.clamp_lo, cfg.clamp_hi)
        x_adv = _sign_ascent(
            model, X, y, x0, cfg.epsilon, cfg.step_alpha, cfg.iterations, cfg.clamp_lo, cfg.clamp_hi
        )
        _check_budget(X, x_adv, _column(cfg.epsilon, len(X)), cfg.clamp_lo, cfg.clamp_hi)
        return _outcome(model, X, x_adv, y, cfg.iterations, single)
    x_adv, queries = run_attack(model, X, y, cfg.epsilon, cfg)
    return _outcome(model, X, x_adv, y, queries, single)


def fgsm(model: VictimModel, x, cfg: AttackConfig) -> AttackOutcome:
    """One step of size epsilon along the sign of the input gradient."""
    if cfg.method != "fgsm":
        raise ConfigError(f"fgsm() called with method={cfg.method!r}")
    return attack(model, x, cfg)


def pgd(model: VictimModel, x, cfg: AttackConfig, start=None) -> AttackOutcome:
    """Random start in the eps-ball, then ``iterations`` projected sign steps."""
    if cfg.method != "pgd":
        raise ConfigError(f"pgd() called with method={cfg.method!r}")
    return attack(model, x, cfg, start=start)


def bim(model: VictimModel, x, cfg: AttackConfig) -> AttackOutcome:
    """PGD started at the clean input."""
    if cfg.method != "bim":
        raise ConfigError(f"bim() called with method={cfg.method!r}")
    return attack(model, x, cfg)


@dataclass(frozen=True)
class MinPerturbConfig:
    epsilon_grid: tuple[float, ...] = tuple(np.round(np.arange(1, 101) * 0.005, 6))
    refine: bool = True
    refine_tolerance: float = 5e-4
    not_attackable_sentinel: float = math.inf

    def __post_init__(self):
        grid = tuple(float(e) for e in self.epsilon_grid)
        object.__setattr__(self, "epsilon_grid", grid)
        if not grid:
            raise ConfigError("epsilon_grid is empty")
        if grid[0] <= 0 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("epsilon_grid must be positive and strictly increasing")
        gaps = np.diff((0.0,) + grid)
        if self.refine_tolerance <= 0 or self.refine_tolerance >= gaps.min():
            raise ConfigError("refine_tolerance must be positive and below the smallest grid gap")


def min_perturbation_batch(
    model: VictimModel,
    X,
    method: str,
    mp_cfg: MinPerturbConfig,
    base_cfg: AttackConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Smallest successful budget per row, plus the realised ``||delta||_inf``.

    Scans the whole grid (success need not be monotone in epsilon), then
    bisects each hit against its predecessor budget.  PGD reuses one noise
    draw per row at every budget.  Rows never fooled get the sentinel.
    """
    cfg = AttackConfig(method=method) if base_cfg is None else replace(base_cfg, method=method)
    X, _ = _batch(X, cfg)
    n = len(X)
    y = model.predict(X)
    noise = start_noise(X.shape, cfg.init_seed) if method == "pgd" else None
    sentinel = mp_cfg.not_attackable_sentinel
    found = np.full(n, sentinel)
    norms = np.full(n, sentinel)
    lower = np.zeros(n)
    active = np.arange(n)
    prev = 0.0

    def attempt(rows, eps):
        x_adv, _ = run_attack(
            model, X[rows], y[rows], eps, cfg, None if noise is None else noise[rows]
        )
        ok = model.predict(x_adv) != y[rows]
        return ok, np.abs(x_adv - X[rows]).max(axis=1)

    for eps in mp_cfg.epsilon_grid:
        if active.size == 0:
            break
        ok, nrm = attempt(active, eps)
        hit = active[ok]
        found[hit] = eps
        norms[hit] = nrm[ok]
        lower[hit] = prev
        active = active[~ok]
        prev = eps

    if mp_cfg.refine:
        tol = mp_cfg.refine_tolerance
        while True:
            open_rows = np.flatnonzero(np.isfinite(found) & (found - lower > tol))
            if open_rows.size == 0:
                break
            mid = 0.5 * (lower[open_rows] + found[open_rows])
            ok, nrm = attempt(open_rows, mid)
            found[open_rows[ok]] = mid[ok]
            norms[open_rows[ok]] = nrm[ok]
            lower[open_rows[~ok]] = mid[~ok]
    return found, norms


def min_perturbation(
    model: VictimModel,
    x,
    method: str,
    mp_cfg: MinPerturbConfig,
    base_cfg: AttackConfig | None = None,
) -> float:
    """Smallest budget on the (refined) grid at which ``method`` flips ``x``."""
    found, _ = min_perturbation_batch(model, np.asarray(x)[None, :], method, mp_cfg, base_cfg)
    return float(found[0])


@dataclass
class PerturbationTable:
    """Minimum perturbation per (sample, model, method).

    ``entries[(model_id, method)]`` holds two aligned arrays: the smallest
    successful budget (``inf`` if none) and the realised l-inf norm of the
    adversarial example found there.
    """

    sample_ids: list[str]
    entries: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_ids = list(self.sample_ids)
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")

    def add(self, model_id: str, method: str, eps_found, norms) -> None:
        eps_found = np.asarray(eps_found, dtype=np.float64)
        norms = np.asarray(norms, dtype=np.float64)
        if eps_found.shape != (len(self.sample_ids),) or norms.shape != eps_found.shape:
            raise ShapeError("entry arrays must align with sample_ids")
        self.entries[(model_id, method)] = (eps_found, norms)

    def delta(self, model_id: str, method: str) -> np.ndarray:
        return self.entries[(model_id, method)][0]

    @property
    def model_ids(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.entries))

    @property
    def methods(self) -> list[str]:
        return sorted({meth for _, meth in self.entries})

    def rows(self) -> Iterable[tuple[str, str, str, float, float]]:
        for (model_id, method), (eps_found, norms) in self.entries.items():
            for sid, e, nrm in zip(self.sample_ids, eps_found, norms):
                yield sid, model_id, method, float(nrm), float(e)

    def to_csv(self, path) -> None:
        """CSV plus a ``.json`` sidecar carrying split and provenance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "model_id", "attack_method", "delta_inf_norm", "success_epsilon_or_inf"])
            for sid, mid, meth, nrm, e in self.rows():
                w.writerow([sid, mid, meth, repr(nrm), repr(e)])
        sidecar = {"split": self.split, "sample_ids": self.sample_ids, **self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path, expected_split: str | None = None) -> "PerturbationTable":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        split = sidecar.pop("split")
        if expected_split is not None and split != expected_split:
            raise ProvenanceError(f"{path.name} holds split {split!r}, expected {expected_split!r}")
        sample_ids = sidecar.pop("sample_ids")
        pos = {sid: i for i, sid in enumerate(sample_ids)}
        raw: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["model_id"], row["attack_method"])
                if key not in raw:
                    raw[key] = (np.full(len(sample_ids), np.nan), np.full(len(sample_ids), np.nan))
                i = pos[row["sample_id"]]
                raw[key][0][i] = float(row["success_epsilon_or_inf"])
                raw[key][1][i] = float(row["delta_inf_norm"])
        return cls(sample_ids, raw, split, sidecar)


def perturbation_table(
    models: Sequence[VictimModel],
    X,
    sample_ids: Sequence[str],
    methods: Sequence[str],
    mp_cfg: MinPerturbConfig,
    attack_cfgs: dict[str, AttackConfig] | None = None,
    split: str = "",
) -> PerturbationTable:
    attack_cfgs = attack_cfgs or {}
    table = PerturbationTable(list(sample_ids), split=split)
    for model in models:
        for method in methods:
            cfg = attack_cfgs.get(method, AttackConfig(method=method))
            found, norms = min_perturbation_batch(model, X, method, mp_cfg, cfg)
            table.add(model.model_id, method, found, norms)
    table.meta = {
        "epsilon_grid": list(mp_cfg.epsilon_grid),
        "refine": mp_cfg.refine,
        "refine_tolerance": mp_cfg.refine_tolerance,
        "attack_configs": {m: asdict(attack_cfgs.get(m, AttackConfig(method=m))) for m in methods},
    }
    return table

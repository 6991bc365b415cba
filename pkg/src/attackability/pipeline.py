"""Stage-by-stage experiment runner with content-hash caching.

Stages run in a fixed order; each writes into ``<output_dir>/<stage>/`` and
records a ``_stage.json`` holding the hash of its config subtree and its
upstream hashes.  A stage whose recorded hash matches is skipped.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attacks as atk
from .config import ExperimentConfig, content_hash
from .data import LabeledDataset, ingest_cifar10, make_synthetic, make_two_scale
from .detection import (
    DetectorModel,
    EnsembleConfig,
    ScoreVector,
    confidence_score,
    default_alpha,
    ensemble_confidence,
    ensemble_score,
    train_detector_embeddings,
)
from .errors import ConfigError, ProvenanceError
from .evaluation import active_adv_train, fooling_rate, pr_sweep, prevalence_f1, spearman, write_rows
from .labeling import (
    POLARITIES,
    SETTINGS,
    AttackabilityLabels,
    ThresholdPair,
    evaluation_sets,
    fraction_attackable_curve,
    label_samples,
    set_summary,
    thresholds_from_quantiles,
)
from .nn_core import encode, load_model, save_model, train

log = logging.getLogger(__name__)

STAGES = ("data", "train-victims", "perturb", "label", "train-detectors", "evaluate", "active-adv", "report")
DETECTORS = ("conf-s", "conf-u", "deep")


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, output_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.root = Path(output_dir or cfg.output_dir)
        self.status: dict[str, str] = {}
        self._keys: dict[str, str] = {}

    # -- hashing -----------------------------------------------------------

    def _subtree(self, stage: str):
        c = self.cfg.to_dict()
        return {
            "data": [c["data"]],
            "train-victims": [c["seen"], c["target"], c["victim_train"]],
            "perturb": [c["attack"], c["grid"], c["evaluation"]["matched_method"],
                        c["evaluation"]["unmatched_method"], c["evaluation"]["correlation_methods"]],
            "label": [c["thresholds"], c["evaluation"]["matched_method"], c["evaluation"]["unmatched_method"]],
            "train-detectors": [c["detector_train"]],
            "evaluate": [c["evaluation"]],
            "active-adv": [c["active"], c["attack"]],
            "report": [],
        }[stage]

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            idx = STAGES.index(stage)
            upstream = [self.key(s) for s in STAGES[:idx]]
            self._keys[stage] = content_hash(stage, self._subtree(stage), upstream)
        return self._keys[stage]

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def _is_current(self, stage: str) -> bool:
        marker = self.stage_dir(stage) / "_stage.json"
        return marker.exists() and _read_json(marker).get("config_hash") == self.key(stage)

    def _require(self, stage: str) -> Path:
        """Directory of a finished upstream stage, checked against the config hash."""
        if not self._is_current(stage):
            raise ProvenanceError(f"artifacts of stage {stage!r} do not match this config")
        return self.stage_dir(stage)

    # -- driver ------------------------------------------------------------

    def run(self, until: str = "report") -> dict[str, str]:
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        for stage in STAGES[: STAGES.index(until) + 1]:
            if self._is_current(stage):
                self.status[stage] = "cached"
                log.info("stage %s: cached", stage)
                continue
            d = self.stage_dir(stage)
            if d.exists():
                shutil.rmtree(d)
            d.mkdir(parents=True)
            log.info("stage %s: running", stage)
            try:
                getattr(self, "_stage_" + stage.replace("-", "_"))(d)
            except (ConfigError, ProvenanceError):
                raise
            except Exception as exc:
                raise StageFailure(stage, exc) from exc
            _write_json(d / "_stage.json", {"stage": stage, "config_hash": self.key(stage)})
            self.status[stage] = "ran"
        return self.status

    # -- loaders -----------------------------------------------------------

    def dataset(self, split: str) -> LabeledDataset:
        return LabeledDataset.load(self._require("data") / f"{split}.npz", expected_split=split)

    def victim(self, model_id: str):
        return load_model(self._require("train-victims") / model_id)

    def table(self, split: str) -> atk.PerturbationTable:
        path = self._require("perturb") / f"{split}.csv"
        t = atk.PerturbationTable.from_csv(path, expected_split=split)
        if t.meta.get("config_hash") != self.key("perturb"):
            raise ProvenanceError(f"{path} was produced by another configuration")
        return t

    def labels(self, split: str, method: str) -> AttackabilityLabels:
        d = self._require("label")
        meta = _read_json(d / f"{split}_{method}.json")
        if meta["split"] != split:
            raise ProvenanceError(f"label file for {split}/{method} holds split {meta['split']!r}")
        lab = AttackabilityLabels.from_csv(d / f"{split}_{method}.csv")
        lab.method = method
        lab.thresholds = ThresholdPair(**meta["thresholds"])
        return lab

    def embeddings(self, model_id: str, split: str) -> np.ndarray:
        return np.load(self._require("train-detectors") / "embeddings" / f"{model_id}_{split}.npy")

    def detector(self, model_id: str, polarity: str) -> DetectorModel:
        return DetectorModel.load(self._require("train-detectors") / f"{model_id}_{polarity}")

    # -- stages ------------------------------------------------------------

    def _stage_data(self, d: Path):
        c = self.cfg.data
        if c.source == "blobs":
            splits = make_synthetic(
                c.n_classes, c.dim, c.n_per_class, c.spread, c.seed,
                validation_fraction=c.validation_fraction, mean_scale=c.mean_scale,
            )
        elif c.source == "two_scale":
            splits = make_two_scale(
                c.n_classes, c.dim, c.n_per_class, c.seed, c.n_sparse, c.sparse_width,
                c.sparse_gap, c.sparse_noise, c.dense_amplitude, c.dense_noise,
                validation_fraction=c.validation_fraction,
            )
        else:
            if not (c.cifar_train_path and c.cifar_test_path):
                raise ConfigError("cifar10 source needs cifar_train_path and cifar_test_path")
            full = ingest_cifar10(c.cifar_train_path, "train")
            perm = np.random.Generator(np.random.Philox(key=c.seed)).permutation(len(full))
            n_val = int(round(len(full) * c.validation_fraction))
            val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            train_ds = full.subset(tr)
            val_ds = full.subset(val)
            val_ds.split = "validation"
            splits = {"train": train_ds, "validation": val_ds, "test": ingest_cifar10(c.cifar_test_path, "test")}
        for split, ds in splits.items():
            ds.save(d / f"{split}.npz")
        _write_json(d / "summary.json", {s: len(ds) for s, ds in splits.items()})

    def _stage_train_victims(self, d: Path):
        tr = self.dataset("train")
        te = self.dataset("test")
        acc = {}
        for v in self.cfg.victims:
            model = train(v.spec(), tr.samples, tr.labels, self.cfg.victim_train, v.encoder_depth, v.model_id)
            save_model(model, d / v.model_id, {"config_hash": self.key("train-victims")})
            acc[v.model_id] = float(np.mean(model.predict(te.samples) == te.labels))
        _write_json(d / "accuracy.json", acc)

    def _methods(self, split: str) -> list[str]:
        ev = self.cfg.evaluation
        if split == "validation":
            ms = [ev.matched_method, *ev.correlation_methods]
        else:
            ms = [ev.matched_method, ev.unmatched_method]
        return list(dict.fromkeys(ms))

    def _stage_perturb(self, d: Path):
        mp = self.cfg.grid.build()
        models = [self.victim(v.model_id) for v in self.cfg.victims]
        for split in ("validation", "test"):
            ds = self.dataset(split)
            methods = self._methods(split)
            cfgs = {m: self.cfg.attack.build(m) for m in methods}
            table = atk.perturbation_table(models, ds.samples, ds.sample_ids, methods, mp, cfgs, split)
            table.meta["config_hash"] = self.key("perturb")
            table.to_csv(d / f"{split}.csv")

    def resolve_thresholds(self, method: str, val_table) -> ThresholdPair:
        th = self.cfg.thresholds.get(method)
        if th is None:
            raise ConfigError(f"no thresholds configured for {method!r}")
        if th.mode == "fixed":
            return th.fixed_pair()
        # quantile mode reads only the validation split of the seen models
        return thresholds_from_quantiles(
            val_table, method, self.cfg.seen_ids, th.attackable_quantile, th.robust_quantile
        )

    def _stage_label(self, d: Path):
        ev = self.cfg.evaluation
        val = self.table("validation")
        test = self.table("test")
        resolved = {}
        for method in dict.fromkeys([ev.matched_method, ev.unmatched_method]):
            source = val if all((m, method) in val.entries for m in self.cfg.seen_ids) else None
            if source is None and self.cfg.thresholds[method].mode == "quantile":
                raise ConfigError(f"quantile thresholds for {method!r} need validation perturbations")
            resolved[method] = self.resolve_thresholds(method, source)
        _write_json(d / "thresholds.json", {m: asdict(p) for m, p in resolved.items()})
        for split, table in (("validation", val), ("test", test)):
            for method in table.methods:
                if method not in resolved:
                    continue
                lab = label_samples(table, resolved[method], method, [v.model_id for v in self.cfg.victims])
                lab.to_csv(d / f"{split}_{method}.csv")
                summary = set_summary(lab, self.cfg.seen_ids, self.cfg.target.model_id)
                _write_json(d / f"{split}_{method}.json", {
                    "split": split, "method": method, "thresholds": asdict(resolved[method]),
                    "config_hash": self.key("label"), "summary": summary,
                })
        grid = self.cfg.grid.build().epsilon_grid
        rows = []
        for method in val.methods:
            for mid in [*self.cfg.seen_ids, "uni"]:
                curve = fraction_attackable_curve(val, method, mid, grid, self.cfg.seen_ids)
                rows.extend((method, mid, e, f) for e, f in curve)
        write_rows(d / "fraction_attackable.csv", ["method", "model", "epsilon", "fraction"], rows)

    def _stage_train_detectors(self, d: Path):
        method = self.cfg.evaluation.matched_method
        val_labels = self.labels("validation", method)
        emb_dir = d / "embeddings"
        emb_dir.mkdir()
        for v in self.cfg.victims:
            model = self.victim(v.model_id)
            for split in ("validation", "test"):
                np.save(emb_dir / f"{v.model_id}_{split}.npy", encode(model, self.dataset(split).samples))
        losses = {}
        for k, mid in enumerate(self.cfg.seen_ids):
            H = np.load(emb_dir / f"{mid}_validation.npy")
            for p, polarity in enumerate(POLARITIES):
                det = train_detector_embeddings(
                    H, val_labels.column(mid, polarity), self.cfg.detector_train,
                    polarity, mid, init_seed=self.cfg.detector_train.shuffle_seed + 17 * k + p,
                )
                det.save(d / f"{mid}_{polarity}")
                losses[f"{mid}_{polarity}"] = det.history[-1] if det.history else None
        _write_json(d / "final_loss.json", losses)

    def alpha(self) -> float:
        a = self.cfg.evaluation.alpha
        return default_alpha(len(self.cfg.seen)) if a is None else a

    def detector_scores(self, split: str, polarity: str, alpha: float | None = None) -> ScoreVector:
        ds_ids = self.dataset(split).sample_ids
        members = [
            ScoreVector(ds_ids, self.detector(mid, polarity).score_embeddings(self.embeddings(mid, split)))
            for mid in self.cfg.seen_ids
        ]
        return ensemble_score(members, EnsembleConfig(self.alpha() if alpha is None else alpha, self.cfg.seen_ids))

    def baseline_scores(self, split: str, polarity: str) -> dict[str, ScoreVector]:
        ds = self.dataset(split)
        target = self.victim(self.cfg.target.model_id)
        seen = [self.victim(m) for m in self.cfg.seen_ids]
        return {
            "conf-s": ScoreVector(ds.sample_ids, confidence_score(target, ds.samples, polarity)),
            "conf-u": ScoreVector(ds.sample_ids, ensemble_confidence(seen, ds.samples, polarity)),
        }

    def _stage_evaluate(self, d: Path):
        ev = self.cfg.evaluation
        seen, target = self.cfg.seen_ids, self.cfg.target.model_id
        curves_dir = d / "pr_curves"
        curves_dir.mkdir()
        scores = {}
        for polarity in POLARITIES:
            scores[polarity] = {**self.baseline_scores("test", polarity), "deep": self.detector_scores("test", polarity)}
            for name, sv in scores[polarity].items():
                sv.to_csv(d / "scores" / f"{name}_{polarity}.csv")
        results = []
        for regime, method in (("matched", ev.matched_method), ("unmatched", ev.unmatched_method)):
            labels = self.labels("test", method)
            for polarity in POLARITIES:
                sets = evaluation_sets(labels, seen, target, polarity)
                for setting in SETTINGS:
                    truth = sets[setting]
                    for det in DETECTORS:
                        entry = {
                            "regime": regime, "method": method, "polarity": polarity,
                            "setting": setting, "detector": det,
                            "n_positive": int(truth.sum()), "n_samples": int(truth.size),
                        }
                        if not truth.any():
                            entry.update(status="skipped", reason="no positive samples")
                        else:
                            curve = pr_sweep(scores[polarity][det], truth)
                            curve.to_csv(curves_dir / f"{regime}_{polarity}_{setting}_{det}.csv")
                            entry.update(
                                status="ok", best_f1=curve.best_f1,
                                best_threshold=curve.best_threshold,
                                prevalence_f1=prevalence_f1(truth),
                            )
                        results.append(entry)
        val = self.table("validation")
        corr = []
        for mid in [*seen, target]:
            base = val.delta(mid, ev.matched_method)
            for other in ev.correlation_methods:
                if other == ev.matched_method:
                    continue
                corr.append({"model": mid, "pair": f"{ev.matched_method}-{other}",
                             "spearman": spearman(base, val.delta(mid, other))})
        _write_json(d / "evaluation.json", {
            "config_hash": self.key("evaluate"), "alpha": self.alpha(),
            "detection": results, "correlation": corr,
        })

    def _stage_active_adv(self, d: Path):
        a = self.cfg.active
        out = {"enabled": a.enabled, "config_hash": self.key("active-adv"), "runs": []}
        if a.enabled:
            pool = self.dataset("validation")
            test = self.dataset("test")
            target = self.victim(self.cfg.target.model_id)
            deep = self.detector_scores("validation", "attackable")
            atk_cfg = self.cfg.attack.build("pgd", a.epsilon)
            eval_cfg = self.cfg.attack.build("pgd", a.eval_epsilon)
            out["fooling_rate_before"] = fooling_rate(target, test.samples, eval_cfg)
            for budget in a.budgets:
                for ranking in a.rankings:
                    _, fr = active_adv_train(
                        target, pool, ranking, budget, atk_cfg, a.train, test,
                        deep_scores=deep, rank_seed=a.rank_seed, clean_mix=a.clean_mix, eval_cfg=eval_cfg,
                    )
                    out["runs"].append({"budget": budget, "ranking": ranking, "fooling_rate": fr})
        _write_json(d / "active_adv.json", out)

    def _stage_report(self, d: Path):
        ev = _read_json(self._require("evaluate") / "evaluation.json")
        act = _read_json(self._require("active-adv") / "active_adv.json")
        if ev["config_hash"] != self.key("evaluate") or act["config_hash"] != self.key("active-adv"):
            raise ProvenanceError("evaluation and active-training artifacts come from different configs")
        accuracy = _read_json(self._require("train-victims") / "accuracy.json")
        thresholds = _read_json(self._require("label") / "thresholds.json")
        report = {
            "config_hash": self.key("report"),
            "seen": self.cfg.seen_ids,
            "target": self.cfg.target.model_id,
            "victim_accuracy": accuracy,
            "thresholds": thresholds,
            "alpha": ev["alpha"],
            "detection": ev["detection"],
            "correlation": ev["correlation"],
            "active_adv": act,
        }
        _write_json(d / "report.json", report)
        rows = [
            (r["regime"], r["setting"], r["detector"], r["polarity"],
             repr(r["best_f1"]) if r["status"] == "ok" else "", r["status"])
            for r in ev["detection"]
        ]
        write_rows(d / "report.csv", ["regime", "setting", "detector", "polarity", "best_f1", "status"], rows)
        src = self._require("evaluate") / "pr_curves"
        shutil.copytree(src, d / "pr_curves")


def run_experiment(cfg: ExperimentConfig, until: str = "report", output_dir=None) -> dict[str, str]:
    return Pipeline(cfg, output_dir).run(until)

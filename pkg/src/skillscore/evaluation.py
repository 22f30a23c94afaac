"""Four-fold cross-validation and metric reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import FoldSpec, VideoSample
from .metrics import GRS_MAX, GRS_MIN, UndefinedCorrelationError, r_l2, spearman
from .temporal import denormalize
from .training import TrainConfig, TrainingError, predict, train_fold

log = logging.getLogger(__name__)

TABLE_TASKS = ("SU", "NP", "KT")
# a synthetic-only run fills the first table column
TABLE_COLUMN = {"SU": "SU", "NP": "NP", "KT": "KT", "SYNTH": "SU"}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "protocol", "per_task", "average"],
    "properties": {
        "method": {"type": "string"},
        "protocol": {"type": "object", "required": ["folds", "aggregation", "score_range"]},
        "per_task": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["per_fold", "mean"],
                "properties": {
                    "per_fold": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["fold", "rho", "r_l2_x100"],
                            "properties": {
                                "fold": {"type": "integer", "minimum": 0},
                                "rho": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                                "r_l2_x100": {"type": "number", "minimum": 0},
                                "train_rho": {"type": ["number", "null"]},
                                "n_test": {"type": "integer"},
                                "predictions": {"type": "string"},
                            },
                        },
                    },
                    "mean": {"$ref": "#/$defs/pair"},
                },
            },
        },
        "average": {"$ref": "#/$defs/pair"},
    },
    "$defs": {
        "pair": {
            "type": "object",
            "required": ["rho", "r_l2_x100"],
            "properties": {"rho": {"type": ["number", "null"]}, "r_l2_x100": {"type": ["number", "null"]}},
        }
    },
}


class FoldError(RuntimeError):
    def __init__(self, task: str, fold: int, cause: Exception):
        super().__init__(f"task {task}, fold {fold}: {cause}")
        self.task = task
        self.fold = fold


def _safe_spearman(truth, pred) -> float | None:
    try:
        return spearman(truth, pred)
    except UndefinedCorrelationError:
        return None


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class FoldResult:
    fold: int
    rho: float | None
    r_l2_x100: float
    train_rho: float | None
    test_ids: list[str]
    truth: list[float]
    pred: list[float]
    best_epoch: int | None = None
    val_loss: float | None = None

    def to_dict(self) -> dict:
        d = {"fold": self.fold, "rho": self.rho, "r_l2_x100": self.r_l2_x100,
             "train_rho": self.train_rho, "n_test": len(self.test_ids)}
        if self.best_epoch is not None:
            d["best_epoch"] = self.best_epoch
            d["val_loss"] = self.val_loss
        return d


@dataclass
class MetricsReport:
    method: str
    protocol: dict
    folds: dict[str, list[FoldResult]] = field(default_factory=dict)

    def task_mean(self, task: str) -> dict:
        rows = self.folds[task]
        return {"rho": _mean(r.rho for r in rows), "r_l2_x100": _mean(r.r_l2_x100 for r in rows)}

    def average(self) -> dict:
        means = [self.task_mean(t) for t in self.folds]
        return {"rho": _mean(m["rho"] for m in means), "r_l2_x100": _mean(m["r_l2_x100"] for m in means)}

    def to_dict(self) -> dict:
        per_task = {}
        for task, rows in self.folds.items():
            per_fold = []
            for r in rows:
                d = r.to_dict()
                d["predictions"] = prediction_filename(task, r.fold)
                per_fold.append(d)
            per_task[task] = {"per_fold": per_fold, "mean": self.task_mean(task)}
        return {"method": self.method, "protocol": self.protocol, "per_task": per_task,
                "average": self.average()}


def prediction_filename(task: str, fold: int) -> str:
    return f"predictions_{task}_fold{fold}.csv"


def run_cross_validation(items: Mapping[str, object], samples: Sequence[VideoSample],
                         folds: Mapping[str, FoldSpec], cfg: TrainConfig, net=None,
                         out_dir: Path | None = None, oracle: bool = False,
                         method: str | None = None, net_overrides: dict | None = None) -> MetricsReport:
    """Train and test every fold of every task; metrics on the GRS scale.

    ``items`` maps video id to a FeatureSequence or VideoClip. With
    ``oracle`` no model is trained and predictions equal the ground truth.
    """
    by_id = {s.id: s for s in samples}
    report = MetricsReport(
        method or ("oracle" if oracle else cfg.variant),
        {"folds": 4, "aggregation": "per-fold mean", "score_range": [GRS_MIN, GRS_MAX],
         "metric_space": "raw GRS", "variant": cfg.variant, "preset": cfg.preset,
         "epochs": cfg.epochs, "seed": cfg.seed, "oracle": oracle,
         "freeze_extractor": cfg.freeze_extractor, "config_hash": cfg.config_hash()},
    )
    for task in sorted(folds):
        spec = folds[task]
        results = []
        for k, fold in enumerate(spec.folds):
            try:
                results.append(_run_fold(task, k, fold, items, by_id, cfg, net, out_dir, oracle,
                                         net_overrides))
            except (TrainingError, ValueError, RuntimeError) as exc:
                raise FoldError(task, k, exc) from exc
        report.folds[task] = results
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _run_fold(task, k, fold, items, by_id, cfg, net, out_dir, oracle, net_overrides) -> FoldResult:
    test = list(fold.test)
    truth = [float(by_id[i].grs) for i in test]
    if oracle:
        train_truth = [float(by_id[i].grs) for i in fold.train]
        return FoldResult(k, _safe_spearman(truth, truth), 100.0 * r_l2(truth, truth),
                          _safe_spearman(train_truth, train_truth), test, truth, list(truth))
    fold_cfg = replace(cfg, seed=cfg.seed + k)
    fold_dir = Path(out_dir) / task / f"fold{k}" if out_dir is not None else None
    if fold_dir is not None:
        fold_dir.mkdir(parents=True, exist_ok=True)
    ckpt, history = train_fold([items[i] for i in fold.train], [items[i] for i in fold.val],
                               fold_cfg, net=net,
                               log_path=fold_dir / "run_log.jsonl" if fold_dir else None,
                               net_overrides=net_overrides)
    if fold_dir is not None:
        ckpt.save(fold_dir / "checkpoint.safetensors")
    model = ckpt.build_model()
    pred = [float(denormalize(v)) for v in predict(model, [items[i] for i in test], fold_cfg)]
    train_pred = [float(denormalize(v)) for v in predict(model, [items[i] for i in fold.train], fold_cfg)]
    train_truth = [float(by_id[i].grs) for i in fold.train]
    rho = _safe_spearman(truth, pred)
    if rho is None:
        log.warning("task %s fold %d: constant predictions, rho undefined", task, k)
    return FoldResult(k, rho, 100.0 * r_l2(truth, pred), _safe_spearman(train_truth, train_pred),
                      test, truth, pred, ckpt.epoch, ckpt.val_loss)


# -- report files ---------------------------------------------------------------

def write_report(report: MetricsReport, out_dir: Path) -> Path:
    import jsonschema

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    jsonschema.validate(doc, REPORT_SCHEMA)
    path = out_dir / "report.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for task, rows in report.folds.items():
        for r in rows:
            with open(out_dir / prediction_filename(task, r.fold), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["video_id", "grs", "prediction"])
                for vid, t, p in zip(r.test_ids, r.truth, r.pred):
                    w.writerow([vid, int(t), repr(float(p))])
    write_tables([doc], out_dir)
    return path


def load_report(path: Path) -> dict:
    import jsonschema

    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


def table_rows(docs: Sequence[dict], metric: str) -> list[list]:
    """Rows ``Method, SU, NP, KT, Average`` for one metric across reports."""
    rows = []
    for doc in docs:
        cols = {c: None for c in TABLE_TASKS}
        for task, entry in doc["per_task"].items():
            cols[TABLE_COLUMN[task]] = entry["mean"][metric]
        rows.append([doc["method"], *(cols[c] for c in TABLE_TASKS), doc["average"][metric]])
    return rows


def _fmt(v, digits) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}"


def write_tables(docs: Sequence[dict], out_dir: Path) -> list[Path]:
    out = []
    for metric, name, digits in (("rho", "table_rho.csv", 2), ("r_l2_x100", "table_r_l2_x100.csv", 3)):
        path = Path(out_dir) / name
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["Method", *TABLE_TASKS, "Average"])
            for row in table_rows(docs, metric):
                w.writerow([row[0], *(_fmt(v, digits) for v in row[1:])])
        out.append(path)
    return out


def read_predictions(path: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return ([r["video_id"] for r in rows], np.array([float(r["grs"]) for r in rows]),
            np.array([float(r["prediction"]) for r in rows]))

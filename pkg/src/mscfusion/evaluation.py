"""Frozen-feature probing, ranking metrics, checkpoint selection, and CKA.

The probe is an elastic-net-penalized multinomial logistic regression
(scikit-learn, saga solver) whose inverse regularization strength and mixing
parameter are drawn by plain random search; the trial with the best
validation metric wins, first encountered on ties.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import torch
from scipy.stats import rankdata
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .errors import ConfigurationError, DataError
from .model import FusionModel
from .synthdata import UNLABELED, VolumePair
from .trainer import CheckpointRecord, rebuild_model, select_task_pairs


@dataclass
class FeatureMatrix:
    """n x d global representations with subject ids and labels."""

    Z: np.ndarray
    subject_ids: list[str]
    labels: np.ndarray

    def validate(self) -> None:
        if not np.isfinite(self.Z).all():
            raise DataError("feature matrix has non-finite values")
        if len(self.subject_ids) != self.Z.shape[0]:
            raise DataError("subject ids / rows mismatch")


@dataclass(frozen=True)
class ProbeConfig:
    """Random-search settings for the logistic-regression probe."""

    trials: int = 500
    c_range: tuple[float, float] = (1e-6, 1e3)
    l1_ratio_range: tuple[float, float] = (0.0, 1.0)
    task: str = "2way"
    seed: int = 0
    max_iter: int = 3000

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.task not in ("2way", "3way"):
            raise ConfigurationError("task must be '2way' or '3way'")
        if self.c_range[0] <= 0 or self.c_range[1] <= self.c_range[0]:
            raise ConfigurationError("invalid C range")


@dataclass
class ProbeResult:
    best_c: float
    best_l1_ratio: float
    metric_val: float
    metric_test: float
    betas: np.ndarray


def extract_features(
    record_or_model: CheckpointRecord | FusionModel,
    pairs: list[VolumePair],
    modality: str,
    batch_size: int = 16,
) -> FeatureMatrix:
    """Frozen-encoder z (the encoder's own output, before any projection
    head) for each subject, without augmentation."""
    if not pairs:
        raise DataError("no subjects to extract features from")
    model = (
        record_or_model
        if isinstance(record_or_model, FusionModel)
        else rebuild_model(record_or_model)
    )
    part = model[modality]
    rows = []
    part.eval()
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            x = torch.from_numpy(
                np.stack([p.volume(modality) for p in chunk])
            ).unsqueeze(1).float()
            rows.append(part.encode(x).z.numpy().astype(np.float64))
    fm = FeatureMatrix(
        Z=np.concatenate(rows),
        subject_ids=[p.subject_id for p in pairs],
        labels=np.asarray([p.label for p in pairs], dtype=np.int64),
    )
    fm.validate()
    return fm


def task_features(fm: FeatureMatrix, task: str) -> FeatureMatrix:
    """Apply the task's label mapping: 2-way keeps {0, 1}; 3-way recodes
    UNLABELED as class 2."""
    if task == "2way":
        keep = np.isin(fm.labels, (0, 1))
        return FeatureMatrix(
            Z=fm.Z[keep],
            subject_ids=[s for s, k in zip(fm.subject_ids, keep) if k],
            labels=fm.labels[keep],
        )
    labels = np.where(fm.labels == UNLABELED, 2, fm.labels)
    return FeatureMatrix(Z=fm.Z, subject_ids=list(fm.subject_ids), labels=labels)


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Binary ROC-AUC as the normalized Mann-Whitney rank statistic (ties
    count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n1, n0 = int(pos.sum()), int(neg.sum())
    if n1 == 0 or n0 == 0:
        raise ConfigurationError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def ovo_macro_auc(probs, labels) -> float:
    """One-vs-one macro ROC-AUC: the unweighted mean over class pairs of the
    two directed AUCs' average."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigurationError("ovo_macro_auc needs >= 2 classes")
    pair_values = []
    for a, b in combinations(classes.tolist(), 2):
        mask = np.isin(labels, (a, b))
        sub = labels[mask]
        auc_a = roc_auc(probs[mask, int(a)], (sub == a).astype(int))
        auc_b = roc_auc(probs[mask, int(b)], (sub == b).astype(int))
        pair_values.append((auc_a + auc_b) / 2.0)
    return float(np.mean(pair_values))


def _score_features(clf, fm: FeatureMatrix, task: str) -> float:
    if task == "2way":
        return roc_auc(clf.decision_function(fm.Z), fm.labels)
    probs = clf.predict_proba(fm.Z)
    # Column order follows clf.classes_; realign to label values.
    full = np.zeros((len(fm.labels), int(max(clf.classes_)) + 1))
    for col, cls in enumerate(clf.classes_):
        full[:, int(cls)] = probs[:, col]
    return ovo_macro_auc(full, fm.labels)


def fit_probe(
    train: FeatureMatrix,
    val: FeatureMatrix,
    cfg: ProbeConfig,
    test: FeatureMatrix | None = None,
) -> ProbeResult:
    """Random hyperparameter search; returns the first trial achieving the
    best validation metric, scored on ``test`` when given."""
    cfg.validate()
    for name, fm in (("train", train), ("val", val)):
        if len(np.unique(fm.labels)) < 2:
            raise ConfigurationError(f"{name} split has a single class")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = math.log10(cfg.c_range[0]), math.log10(cfg.c_range[1])
    best = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(cfg.trials):
            c = float(10.0 ** rng.uniform(lo, hi))
            l1 = float(
                rng.uniform(cfg.l1_ratio_range[0], cfg.l1_ratio_range[1])
            )
            clf = LogisticRegression(
                penalty="elasticnet",
                solver="saga",
                C=c,
                l1_ratio=l1,
                max_iter=cfg.max_iter,
                random_state=cfg.seed,
            )
            clf.fit(train.Z, train.labels)
            metric = _score_features(clf, val, cfg.task)
            if best is None or metric > best[0]:
                best = (metric, c, l1, clf)
    metric_val, c, l1, clf = best
    metric_test = (
        _score_features(clf, test, cfg.task) if test is not None else float("nan")
    )
    return ProbeResult(
        best_c=c,
        best_l1_ratio=l1,
        metric_val=float(metric_val),
        metric_test=float(metric_test),
        betas=np.array(clf.coef_, dtype=np.float64),
    )


def select_checkpoint(rows: list[dict], modalities=("m1", "m2")) -> int:
    """Pick the checkpoint with the best validation metric averaged over
    modalities; ties go to the earliest epoch.

    Each row needs keys: checkpoint (epoch id), epoch, modality, metric_val.
    """
    if not rows:
        raise ConfigurationError("select_checkpoint got no probe results")
    by_ckpt: dict[int, dict] = {}
    for r in rows:
        entry = by_ckpt.setdefault(
            r["checkpoint"], {"epoch": r["epoch"], "metrics": {}}
        )
        entry["metrics"][r["modality"]] = r["metric_val"]
    scored = []
    for ckpt, entry in by_ckpt.items():
        values = [entry["metrics"][m] for m in modalities if m in entry["metrics"]]
        if not values:
            raise ConfigurationError(f"checkpoint {ckpt} has no metrics")
        scored.append((-float(np.mean(values)), entry["epoch"], ckpt))
    scored.sort()
    return scored[0][2]


def cka(Z_m: np.ndarray, Z_k: np.ndarray, center: bool = False) -> float:
    """Linear CKA between two n x d feature matrices.

    Uncentered by default (the Gram-norm ratio form); pass ``center=True``
    for the conventional column-centered variant.
    """
    Z_m = np.asarray(Z_m, dtype=np.float64)
    Z_k = np.asarray(Z_k, dtype=np.float64)
    if Z_m.shape[0] != Z_k.shape[0]:
        raise ConfigurationError("cka inputs must share the sample count")
    if center:
        Z_m = Z_m - Z_m.mean(axis=0, keepdims=True)
        Z_k = Z_k - Z_k.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(Z_k.T @ Z_m, "fro") ** 2
    norm_m = np.linalg.norm(Z_m.T @ Z_m, "fro")
    norm_k = np.linalg.norm(Z_k.T @ Z_k, "fro")
    if norm_m == 0 or norm_k == 0:
        raise DataError("cka undefined for a zero matrix")
    return float(cross / (norm_m * norm_k))

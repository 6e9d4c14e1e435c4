"""Class-center scoring and ranking metrics: AUC (strict-inequality pair
count), ROC staircase, Precision@k and report assembly/export."""

from __future__ import annotations

import json
import warnings
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .data_pipeline import EmptyClassError, LabeledSample, NormalizationStats, TgBand, normalize
from .deepglassnet import ModelParams, eval_features
from .numeric_core import NumericsWarning


@dataclass
class ClassCenter:
    """Mean feature vector of the training targets; not re-normalized."""

    vector: np.ndarray


@dataclass
class ScoreRecord:
    index: int
    score: float
    label: int
    tg: float | None = None


@dataclass
class Report:
    auc: float
    roc: list[tuple[float, float]]
    precision_at_k: float
    k: int
    scores: list[ScoreRecord]


def class_center(
    targets: list[LabeledSample],
    params: ModelParams,
    stats: NormalizationStats,
) -> ClassCenter:
    """Arithmetic mean of eval-mode features of the (non-augmented) targets.

    The mean of unit vectors can cancel to (near) zero; that case is flagged
    with a warning but still returned.
    """
    if not targets:
        raise EmptyClassError("class center needs at least one target sample")
    x = normalize(np.stack([s.fractions for s in targets]), stats)
    features = eval_features(x, params)
    center = features.mean(axis=0)
    if float(np.linalg.norm(center)) <= 1e-12:
        warnings.warn("class center has near-zero norm; scores will be ~0",
                      NumericsWarning, stacklevel=2)
    return ClassCenter(vector=center)


def score(
    samples: list[LabeledSample],
    params: ModelParams,
    stats: NormalizationStats,
    center: ClassCenter,
) -> list[ScoreRecord]:
    """Inner-product similarity of each sample's feature with the center,
    in input order, without augmentation."""
    if not samples:
        return []
    x = normalize(np.stack([s.fractions for s in samples]), stats)
    features = eval_features(x, params)
    sims = features @ center.vector
    return [
        ScoreRecord(index=i, score=float(sims[i]), label=s.y, tg=s.tg)
        for i, s in enumerate(samples)
    ]


def auc(records: list[ScoreRecord]) -> float:
    """Fraction of (target, non-target) pairs with strictly greater target
    score. Ties count zero. Computed by sorted counting in O(m log m); equals
    the quadratic pair count exactly.
    """
    target_scores = [r.score for r in records if r.label == 1]
    other_scores = sorted(r.score for r in records if r.label != 1)
    if not target_scores or not other_scores:
        raise EmptyClassError("AUC needs at least one sample of each class")
    wins = sum(bisect_left(other_scores, s) for s in target_scores)
    return wins / (len(target_scores) * len(other_scores))


def roc_points(records: list[ScoreRecord]) -> list[tuple[float, float]]:
    """ROC staircase swept over distinct scores descending, from (0,0) to (1,1)."""
    m1 = sum(1 for r in records if r.label == 1)
    m0 = len(records) - m1
    if m1 == 0 or m0 == 0:
        raise EmptyClassError("ROC needs at least one sample of each class")
    ordered = sorted(records, key=lambda r: -r.score)
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(ordered):
        threshold = ordered[i].score
        while i < len(ordered) and ordered[i].score == threshold:
            if ordered[i].label == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / m0, tp / m1))
    return points


def precision_at_k(records: list[ScoreRecord], k: int) -> float:
    """Target fraction among the k highest scores (ties broken by ascending
    sample index for determinism)."""
    if not 1 <= k <= len(records):
        raise ValueError(f"k={k} out of range for {len(records)} records")
    ordered = sorted(records, key=lambda r: (-r.score, r.index))
    return sum(r.label for r in ordered[:k]) / k


def evaluate(
    val: list[LabeledSample],
    params: ModelParams,
    stats: NormalizationStats,
    center: ClassCenter,
    k: int,
) -> Report:
    """Score the validation samples and assemble the full report."""
    if not val:
        raise ValueError("evaluate needs a non-empty validation set")
    records = score(val, params, stats, center)
    return Report(
        auc=auc(records),
        roc=roc_points(records),
        precision_at_k=precision_at_k(records, k),
        k=k,
        scores=records,
    )


# ---------------------------------------------------------------------------
# report files


def write_scores_csv(records: list[ScoreRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,score,label,tg\n")
        for r in records:
            tg_cell = "" if r.tg is None else repr(float(r.tg))
            fh.write(f"{r.index},{r.score!r},{r.label},{tg_cell}\n")


def write_roc_csv(points: list[tuple[float, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in points:
            fh.write(f"{fpr!r},{tpr!r}\n")


def write_summary_json(report: Report, band: TgBand, fingerprint: str, path) -> None:
    payload = {
        "auc": report.auc,
        "precision_at_k": report.precision_at_k,
        "k": report.k,
        "band_low": band.low,
        "band_high": band.high,
        "config_fingerprint": fingerprint,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

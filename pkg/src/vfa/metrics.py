"""Correlation metrics and the score-file benchmark runner.

SRCC uses average ranks for ties, KRCC is Kendall's tau-b, PLCC is the plain
Pearson coefficient (optionally after a four-parameter logistic mapping of
the predictions). A correlation that is undefined because one side has zero
variance raises instead of returning NaN.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

log = logging.getLogger(__name__)

MOS_LEVELS = tuple(1.0 + 0.5 * i for i in range(9))


class DataError(ValueError):
    """Malformed or inconsistent evaluation data."""


class UndefinedCorrelationError(DataError):
    """Correlation requested for a constant sequence."""


@dataclass(frozen=True)
class ScoreRecord:
    video_id: str
    pred: float
    mos: float | None = None

    def __post_init__(self):
        if self.mos is not None and not 1.0 <= self.mos <= 5.0:
            raise DataError(f"{self.video_id}: MOS {self.mos} outside [1, 5]")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise DataError("need at least two samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("scores must be finite")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.dot(da, da)), float(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    r = float(np.dot(da, db)) / math.sqrt(sa * sb)
    return max(-1.0, min(1.0, r))


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2


def fit_logistic(pred: np.ndarray, mos: np.ndarray) -> np.ndarray:
    p0 = [mos.max(), mos.min(), float(np.median(pred)), float(np.std(pred)) or 1.0]
    try:
        popt, _ = optimize.curve_fit(logistic4, pred, mos, p0=p0, maxfev=20000)
    except RuntimeError as exc:
        raise DataError(f"logistic fit failed: {exc}") from exc
    return logistic4(pred, *popt)


def srcc(pred, mos) -> float:
    a, b = _pair(pred, mos)
    return _pearson(stats.rankdata(a), stats.rankdata(b))


def plcc(pred, mos, logistic: bool = False) -> float:
    a, b = _pair(pred, mos)
    if logistic:
        a = fit_logistic(a, b)
    return _pearson(a, b)


def krcc(pred, mos) -> float:
    a, b = _pair(pred, mos)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("Kendall tau undefined for a constant sequence")
    tau = stats.kendalltau(a, b, variant="b").statistic
    return float(tau)


def evaluate(pred, mos, logistic: bool = False) -> dict:
    a, b = _pair(pred, mos)
    return {"srcc": srcc(a, b), "plcc": plcc(a, b, logistic), "krcc": krcc(a, b), "n": int(a.size)}


# ---------------------------------------------------------------- MOS


def check_annotation(video_id: str, score: float) -> float:
    score = float(score)
    if score not in MOS_LEVELS:
        raise DataError(f"{video_id}: annotator score {score} not on the 1-5 half-point scale")
    return score


def aggregate_mos(annotations: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Per-video arithmetic mean of annotator scores."""
    out = {}
    for vid, scores in annotations.items():
        if len(scores) == 0:
            raise DataError(f"{vid}: no annotator scores")
        vals = [check_annotation(vid, s) for s in scores]
        out[vid] = math.fsum(vals) / len(vals)
    return out


# ---------------------------------------------------------------- files


def _read_rows(path: Path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            return list(reader.fieldnames or []), rows
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def read_scores(path) -> dict[str, float]:
    """CSV ``video_id,score`` -> {video_id: score}."""
    path = Path(path)
    fields, rows = _read_rows(path)
    if "video_id" not in fields or "score" not in fields:
        raise DataError(f"{path}: expected columns video_id,score, got {fields}")
    out: dict[str, float] = {}
    for row in rows:
        vid = row["video_id"]
        if vid in out:
            raise DataError(f"{path}: duplicate video_id {vid}")
        try:
            out[vid] = float(row["score"])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad score for {vid}: {row['score']!r}") from exc
    return out


def read_mos(path) -> dict[str, float]:
    """MOS CSV, either per-video scores or per-annotator rows to be averaged."""
    path = Path(path)
    fields, rows = _read_rows(path)
    if "annotator_id" in fields:
        ann: dict[str, list[float]] = {}
        for row in rows:
            ann.setdefault(row["video_id"], []).append(float(row["score"]))
        return aggregate_mos(ann)
    mos = read_scores(path)
    for vid, y in mos.items():
        ScoreRecord(vid, 0.0, y)
    return mos


def write_scores(path, scores: Mapping[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "score"])
        for vid, s in scores.items():
            w.writerow([vid, repr(float(s))])


def format_table(report: Mapping[str, Mapping]) -> str:
    name_w = max([len("method")] + [len(m) for m in report])
    lines = [f"{'method':<{name_w}}  {'SRCC':>7}  {'PLCC':>7}  {'KRCC':>7}  {'n':>5}"]
    for name, r in report.items():
        lines.append(f"{name:<{name_w}}  {r['srcc']:>7.4f}  {r['plcc']:>7.4f}  {r['krcc']:>7.4f}  {r['n']:>5d}")
    return "\n".join(lines) + "\n"


def run_benchmark(pred_files: Sequence, mos_file, report_path=None, logistic: bool = False,
                  max_missing: float = 0.5) -> tuple[dict, list[str]]:
    """Score every prediction file against the MOS file.

    Returns ``(report, warnings)``; the report maps method name (file stem)
    to its metrics and is ordered by SRCC, best first. Prediction ids absent
    from the MOS file are dropped with a warning; if more than
    ``max_missing`` of a file's ids are absent the run fails.
    """
    if not pred_files:
        raise DataError("no prediction files given")
    mos = read_mos(mos_file)
    warnings: list[str] = []
    results = {}
    for path in pred_files:
        path = Path(path)
        name = path.stem
        if name in results:
            raise DataError(f"duplicate method name {name}")
        preds = read_scores(path)
        missing = sorted(set(preds) - set(mos))
        if preds and len(missing) / len(preds) > max_missing:
            raise DataError(f"{name}: {len(missing)} of {len(preds)} ids have no MOS")
        for vid in missing:
            warnings.append(f"{name}: no MOS for {vid}")
        ids = [vid for vid in preds if vid in mos]
        unscored = len(mos) - len(ids)
        if unscored:
            warnings.append(f"{name}: {unscored} MOS ids without a prediction")
        results[name] = evaluate([preds[i] for i in ids], [mos[i] for i in ids], logistic)
    order = sorted(results, key=lambda m: (-results[m]["srcc"], m))
    report = {m: results[m] for m in order}
    for w in warnings:
        log.warning(w)
    if report_path is not None:
        report_path = Path(report_path)
        report_path.write_text(json.dumps(report, indent=2, sort_keys=False) + "\n")
        text = format_table(report) + "".join(f"warning: {w}\n" for w in warnings)
        report_path.with_suffix(".txt").write_text(text)
    return report, warnings

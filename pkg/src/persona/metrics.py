"""Ranking metrics over 1-positive candidate lists and report emission."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

CONDITIONS = ("baseline", "persona_s", "persona_m", "persona_m_global", "finetune", "group_finetune")
METRIC_NAMES = ("auc", "hr5", "hr10", "ndcg5", "ndcg10")


@dataclass
class RankedPrediction:
    positive_id: int
    positive_score: float
    negative_ids: Sequence[int]
    negative_scores: Sequence[float]

    def __post_init__(self):
        if len(self.negative_ids) != len(self.negative_scores):
            raise InvalidInputError("negative ids and scores differ in length")
        if not len(self.negative_scores):
            raise InvalidInputError("need at least one negative")
        if not (np.all(np.isfinite(self.negative_scores)) and np.isfinite(self.positive_score)):
            raise InvalidInputError("non-finite score")

    @property
    def candidate_count(self) -> int:
        return 1 + len(self.negative_scores)

    @property
    def rank(self) -> int:
        """1-based rank of the positive; ties go to the lower item id."""
        s = np.asarray(self.negative_scores, dtype=np.float64)
        ids = np.asarray(self.negative_ids)
        return 1 + int(np.sum(s > self.positive_score) + np.sum((s == self.positive_score) & (ids < self.positive_id)))

    @property
    def ranked(self) -> list[int]:
        ids = np.concatenate(([self.positive_id], self.negative_ids))
        scores = np.concatenate(([self.positive_score], self.negative_scores))
        return [int(i) for i in ids[np.lexsort((ids, -scores))]]

    @classmethod
    def from_scores(cls, candidates, scores) -> "RankedPrediction":
        """Column 0 of ``candidates`` is the positive."""
        return cls(int(candidates[0]), float(scores[0]), [int(c) for c in candidates[1:]],
                   [float(s) for s in scores[1:]])


def _check(predictions, k: int | None = None) -> None:
    if not predictions:
        raise InvalidInputError("no predictions")
    if k is not None:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        if any(k > p.candidate_count for p in predictions):
            raise InvalidInputError("k exceeds the candidate count")


def auc(predictions: Sequence[RankedPrediction]) -> float:
    _check(predictions)
    vals = []
    for p in predictions:
        s = np.asarray(p.negative_scores, dtype=np.float64)
        vals.append((np.sum(p.positive_score > s) + 0.5 * np.sum(p.positive_score == s)) / len(s))
    return float(np.mean(vals))


def hr_at_k(predictions: Sequence[RankedPrediction], k: int) -> float:
    _check(predictions, k)
    return float(np.mean([p.rank <= k for p in predictions]))


def ndcg_at_k(predictions: Sequence[RankedPrediction], k: int) -> float:
    _check(predictions, k)
    return float(np.mean([1.0 / math.log2(p.rank + 1) if p.rank <= k else 0.0 for p in predictions]))


def ranks_from_scores(candidates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Vectorised ``RankedPrediction.rank`` for (N, C) arrays, positive in column 0."""
    pos, neg = scores[:, :1], scores[:, 1:]
    pid, nid = candidates[:, :1], candidates[:, 1:]
    return 1 + np.sum(neg > pos, axis=1) + np.sum((neg == pos) & (nid < pid), axis=1)


def metrics_from_scores(candidates: np.ndarray, scores: np.ndarray) -> dict[str, float]:
    if len(scores) == 0:
        raise InvalidInputError("no predictions")
    ranks = ranks_from_scores(candidates, scores)
    pos, neg = scores[:, :1], scores[:, 1:]
    auc_rows = (np.sum(pos > neg, axis=1) + 0.5 * np.sum(pos == neg, axis=1)) / neg.shape[1]
    out = {"auc": float(auc_rows.mean())}
    for k in (5, 10):
        out[f"hr{k}"] = float(np.mean(ranks <= k))
        out[f"ndcg{k}"] = float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0)))
    return out


@dataclass
class MetricReport:
    auc: float
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    count: int
    seed: int
    condition: str
    setting: str = ""

    @classmethod
    def from_predictions(cls, predictions: Sequence[RankedPrediction], seed: int, condition: str,
                         setting: str = "") -> "MetricReport":
        return cls(auc(predictions), hr_at_k(predictions, 5), hr_at_k(predictions, 10),
                   ndcg_at_k(predictions, 5), ndcg_at_k(predictions, 10), len(predictions), seed,
                   condition, setting)

    @classmethod
    def from_scores(cls, candidates, scores, seed: int, condition: str, setting: str = "") -> "MetricReport":
        m = metrics_from_scores(np.asarray(candidates), np.asarray(scores, dtype=np.float64))
        return cls(count=len(scores), seed=seed, condition=condition, setting=setting, **m)


def summarize(reports: Iterable[MetricReport]) -> list[dict]:
    """Mean and sample std (n-1) per (condition, setting)."""
    groups: dict[tuple[str, str], list[MetricReport]] = {}
    for r in reports:
        groups.setdefault((r.condition, r.setting), []).append(r)
    rows = []
    for (cond, setting), rs in groups.items():
        row = {"condition": cond, "setting": setting, "seeds": len(rs)}
        for m in METRIC_NAMES:
            vals = np.array([getattr(r, m) for r in rs])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def emit_report(reports: Sequence[MetricReport], out_dir, sweep_axis: str | None = None,
                name: str = "report") -> dict[str, Path]:
    """Write ``<name>_results.csv`` (one row per condition x seed), the
    mean+-std summary as CSV and JSON, and for sweeps a long-format
    ``<name>_sweep.csv`` keyed by the axis value."""
    if not reports:
        raise InvalidInputError("no reports to emit")
    out_dir = Path(out_dir)
    paths = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = [f.name for f in fields(MetricReport)]
        paths["results"] = out_dir / f"{name}_results.csv"
        with open(paths["results"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in reports:
                d = asdict(r)
                w.writerow([_fmt(d[c]) for c in cols])
        summary = summarize(reports)
        paths["summary"] = out_dir / f"{name}_summary.csv"
        with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
            w.writeheader()
            for row in summary:
                w.writerow({k: _fmt(v) for k, v in row.items()})
        paths["summary_json"] = out_dir / f"{name}_summary.json"
        paths["summary_json"].write_text(json.dumps({"axis": sweep_axis, "rows": summary}, indent=2,
                                                    sort_keys=True) + "\n", encoding="utf-8")
        if sweep_axis:
            paths["sweep"] = out_dir / f"{name}_sweep.csv"
            with open(paths["sweep"], "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["axis", "value", "condition", "metric", "mean", "std", "seeds"])
                for row in summary:
                    for m in METRIC_NAMES:
                        w.writerow([sweep_axis, row["setting"], row["condition"], m,
                                    _fmt(row[f"{m}_mean"]), _fmt(row[f"{m}_std"]), row["seeds"]])
    except OSError as exc:
        raise OSError(f"could not write report under {out_dir}: {exc}") from exc
    return paths

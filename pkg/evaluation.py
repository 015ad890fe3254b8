#!/usr/bin/env python3
"""
ROC AUC, DeLong variance and paired DeLong tests, comparison reports

Scores files are CSV with columns id, label, score (one per scheme run).
"""

import json
import os
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

from matplotlib.figure import Figure
import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata
from sklearn.metrics import roc_curve

import runlog
from errors import DataError, DegenerateStatisticsError, InvalidInputError, MissingScoresError

SCORES_NAME = "scores.csv"
SCHEMES = ("none", "traditional", "cigan+traditional")
SCHEME_LABELS = {
    "none": "Baseline (no augmentation)",
    "traditional": "Traditional augmentation",
    "cigan+traditional": "ciGAN + Traditional aug",
}
MIN_PER_CLASS = 2
MIN_TOTAL = 4


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise InvalidInputError(f"{scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    if not np.isfinite(scores).all():
        raise InvalidInputError("scores must be finite")
    labels = labels.astype(np.int64)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise InvalidInputError("both classes must be present")
    return scores, labels


def roc_auc(scores, labels):
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties 0.5."""
    scores, labels = _validate(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _structural_components(scores, labels):
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    m, n = positives.size, negatives.size
    pooled = rankdata(np.concatenate([positives, negatives]))
    v10 = (pooled[:m] - rankdata(positives)) / n
    v01 = 1.0 - (pooled[m:] - rankdata(negatives)) / m
    return v10, v01


def delong_variance(scores, labels):
    scores, labels = _validate(scores, labels)
    v10, v01 = _structural_components(scores, labels)
    return float(np.var(v10, ddof=1) / v10.size + np.var(v01, ddof=1) / v01.size)


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    covariance: float
    z: float
    p_value: float


def delong_test(scores_a, scores_b, labels):
    """Paired DeLong test for two score lists over the same labels (two-sided, normal approximation)."""
    a, y = _validate(scores_a, labels)
    b, _ = _validate(scores_b, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if min(n_pos, n_neg) < MIN_PER_CLASS or y.size < MIN_TOTAL:
        raise InvalidInputError(
            f"DeLong needs >= {MIN_PER_CLASS} per class and >= {MIN_TOTAL} total, got {n_pos}/{n_neg}")

    auc_a, auc_b = roc_auc(a, y), roc_auc(b, y)
    a10, a01 = _structural_components(a, y)
    b10, b01 = _structural_components(b, y)
    s = np.cov(np.vstack([a10, b10])) / n_pos + np.cov(np.vstack([a01, b01])) / n_neg
    var_a, var_b, cov = float(s[0, 0]), float(s[1, 1]), float(s[0, 1])

    diff = auc_a - auc_b
    var_diff = var_a + var_b - 2.0 * cov
    if diff == 0.0:
        return DeLongResult(auc_a, auc_b, var_a, var_b, cov, 0.0, 1.0)
    if not var_diff > 0.0:
        raise DegenerateStatisticsError(
            f"AUCs differ ({auc_a:.6f} vs {auc_b:.6f}) but the variance of the difference is zero")
    z = diff / np.sqrt(var_diff)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return DeLongResult(auc_a, auc_b, var_a, var_b, cov, float(z), p)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    schemes: list
    aucs: dict
    variances: dict
    p_values: dict
    z_values: dict
    n_pos: int
    n_neg: int
    fingerprints: dict = field(default_factory=dict)


def read_scores(run_dir):
    path = Path(run_dir) / SCORES_NAME
    if not path.exists():
        raise MissingScoresError(path)
    frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    missing = {"id", "label", "score"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return frame.sort_values("id", kind="stable").reset_index(drop=True)


def _fingerprint(run_dir):
    path = Path(run_dir) / "run.json"
    if not path.exists():
        return ""
    with open(path) as f:
        return json.load(f).get("fingerprint", "")


def build_report(run_dirs):
    """EvalReport over {scheme: run_dir}; every pair of schemes gets a DeLong test."""
    if not run_dirs:
        raise InvalidInputError("no runs to evaluate")
    schemes = list(run_dirs)
    frames = {scheme: read_scores(run_dirs[scheme]) for scheme in schemes}
    reference = frames[schemes[0]]
    for scheme in schemes[1:]:
        other = frames[scheme]
        if len(other) != len(reference) or not (other["id"].values == reference["id"].values).all():
            raise DataError(f"scores of '{scheme}' cover different patches than '{schemes[0]}'")
        if not (other["label"].values == reference["label"].values).all():
            raise DataError(f"labels of '{scheme}' disagree with '{schemes[0]}'")

    labels = reference["label"].to_numpy()
    report = EvalReport(
        schemes=schemes,
        aucs={s: roc_auc(frames[s]["score"], labels) for s in schemes},
        variances={s: delong_variance(frames[s]["score"], labels) for s in schemes},
        p_values={},
        z_values={},
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        fingerprints={s: _fingerprint(run_dirs[s]) for s in schemes},
    )
    for a, b in combinations(schemes, 2):
        result = delong_test(frames[a]["score"], frames[b]["score"], labels)
        report.p_values[(a, b)] = result.p_value
        report.z_values[(a, b)] = result.z
    return report


def render_report(report):
    """Aligned text table: one row per scheme, then the pairwise tests."""
    labels = {s: SCHEME_LABELS.get(s, s) for s in report.schemes}
    width = max(len("Data augmentation scheme"), *(len(v) for v in labels.values()))
    lines = [f"{'Data augmentation scheme'.ljust(width)}  ROC AUC  DeLong var",
             "-" * (width + 21)]
    for s in report.schemes:
        lines.append(f"{labels[s].ljust(width)}  {report.aucs[s]:.4f}   {report.variances[s]:.3e}")
    lines.append("")
    lines.append(f"n_pos={report.n_pos}  n_neg={report.n_neg}")
    lines.append("")
    lines.append("Pairwise DeLong tests")
    for (a, b), p in report.p_values.items():
        lines.append(f"  {labels[a]} vs {labels[b]}: z={report.z_values[(a, b)]:+.3f}  p={p:.4g}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    with open(out_dir / "report.txt", "w") as f:
        f.write(render_report(report))
    pd.DataFrame([
        {"scheme": s, "label": SCHEME_LABELS.get(s, s), "auc": report.aucs[s], "variance": report.variances[s],
         "n_pos": report.n_pos, "n_neg": report.n_neg, "fingerprint": report.fingerprints.get(s, "")}
        for s in report.schemes
    ]).to_csv(out_dir / "report.csv", index=False)
    pd.DataFrame([
        {"scheme_a": a, "scheme_b": b, "z": report.z_values[(a, b)], "p": p}
        for (a, b), p in report.p_values.items()
    ], columns=["scheme_a", "scheme_b", "z", "p"]).to_csv(out_dir / "pairwise.csv", index=False)
    return [out_dir / "report.txt", out_dir / "report.csv", out_dir / "pairwise.csv"]


def roc_points(scores, labels):
    scores, labels = _validate(scores, labels)
    fpr, tpr, _ = roc_curve(labels, scores)
    return fpr, tpr


def save_roc_curve(scores, labels, path, title=""):
    fpr, tpr = roc_points(scores, labels)
    fig = Figure(figsize=(4, 4), dpi=100)
    ax = fig.subplots()
    ax.plot(fpr, tpr, lw=1.5, label=f"AUC {roc_auc(scores, labels):.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    runlog.log(f"ROC curve {path}", "📈")
    return path

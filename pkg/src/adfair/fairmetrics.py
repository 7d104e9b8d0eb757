"""Accuracy, AUC and group-fairness metrics for multi-class predictions.

Multi-class metrics are one-vs-rest per class and macro-averaged. Every
disparity is a max-min gap over groups (or group pairs) and is reported in
percent. Cells without the samples a metric needs are dropped with a
:class:`DegenerateCellWarning` rather than scored as zero.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

METRIC_COLUMNS = ("acc", "auc", "dpd", "deodds", "gauc", "inter_auc", "intra_auc")
FAIRNESS_COLUMNS = ("dpd", "deodds", "gauc", "inter_auc", "intra_auc")
COLUMN_TITLES = {
    "acc": "Acc", "auc": "AUC", "dpd": "DPD", "deodds": "DEOdds",
    "gauc": "GAUC", "inter_auc": "Inter-AUC", "intra_auc": "Intra-AUC",
}
GAUC_MODES = ("label-free", "within-group")


class MetricError(ValueError):
    pass


class DegenerateCellWarning(UserWarning):
    pass


@dataclass
class Predictions:
    """Column form of a list of prediction records."""

    group: np.ndarray
    label: np.ndarray
    scores: np.ndarray  # N x C_cls
    sample_id: np.ndarray | None = None

    def __post_init__(self):
        self.group = np.asarray(self.group, dtype=np.int64).reshape(-1)
        self.label = np.asarray(self.label, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise MetricError(f"scores must be N x C, got shape {self.scores.shape}")
        n, c = self.scores.shape
        if self.group.shape[0] != n or self.label.shape[0] != n:
            raise MetricError("group, label and scores must have the same length")
        if self.sample_id is None:
            self.sample_id = np.arange(n)
        else:
            self.sample_id = np.asarray(self.sample_id, dtype=np.int64)
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if n and (self.label.min() < 0 or self.label.max() >= c):
            raise MetricError(f"labels must lie in [0, {c})")
        if n and self.group.min() < 0:
            raise MetricError("group indices must be >= 0")

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        # argmax breaks ties toward the lowest index
        return np.argmax(self.scores, axis=1)

    def groups(self) -> np.ndarray:
        return np.unique(self.group)


@dataclass
class MetricTable:
    acc: float
    auc: float
    dpd: float
    deodds: float
    gauc: float
    inter_auc: float
    intra_auc: float

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self, decimals: int | None = 2) -> list:
        vals = [getattr(self, k) for k in METRIC_COLUMNS]
        if decimals is None:
            return vals
        return [f"{v:.{decimals}f}" for v in vals]


def _warn(msg):
    warnings.warn(msg, DegenerateCellWarning, stacklevel=3)


def _require_groups(preds: Predictions):
    groups = preds.groups()
    if groups.size < 2:
        raise MetricError("at least two groups required")
    return groups


def mw_auc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 * P(pos == neg) over all cross pairs, via midranks."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_auc(scores, binary_labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(binary_labels).astype(bool).reshape(-1)
    if labels.all() or not labels.any():
        raise MetricError("AUC undefined for single-class input")
    return mw_auc(scores[labels], scores[~labels])


def macro_auc(preds: Predictions) -> float:
    vals = []
    for c in range(preds.n_classes):
        y = preds.label == c
        if y.all() or not y.any():
            _warn(f"class {c}: AUC undefined (single-class), excluded")
            continue
        vals.append(binary_auc(preds.scores[:, c], y))
    if not vals:
        raise MetricError("AUC undefined for every class")
    return float(np.mean(vals))


def accuracy(preds: Predictions) -> float:
    if preds.label.size == 0:
        raise MetricError("accuracy of an empty prediction set")
    return float(np.mean(preds.predicted == preds.label) * 100.0)


def _macro(values, what):
    values = [v for v in values if v is not None]
    if not values:
        raise MetricError(f"{what}: no class had enough data")
    return float(np.mean(values) * 100.0)


def dpd(preds: Predictions) -> float:
    groups = _require_groups(preds)
    pred = preds.predicted
    per_class = []
    for c in range(preds.n_classes):
        rates = [np.mean(pred[preds.group == g] == c) for g in groups]
        per_class.append(max(rates) - min(rates))
    return _macro(per_class, "DPD")


def _gap(rates):
    return max(rates) - min(rates) if len(rates) >= 2 else None


def deodds(preds: Predictions) -> float:
    groups = _require_groups(preds)
    pred = preds.predicted
    per_class = []
    for c in range(preds.n_classes):
        tpr, fpr = [], []
        for g in groups:
            in_g = preds.group == g
            pos = in_g & (preds.label == c)
            neg = in_g & (preds.label != c)
            if pos.any():
                tpr.append(np.mean(pred[pos] == c))
            else:
                _warn(f"class {c}, group {g}: no positives, excluded from TPR gap")
            if neg.any():
                fpr.append(np.mean(pred[neg] == c))
            else:
                _warn(f"class {c}, group {g}: no negatives, excluded from FPR gap")
        gaps = [x for x in (_gap(tpr), _gap(fpr)) if x is not None]
        per_class.append(max(gaps) if gaps else None)
    return _macro(per_class, "DEOdds")


def gauc_disparity(preds: Predictions, mode: str = "label-free") -> float:
    """Largest deviation from 0.5 of the cross-group score-ranking AUC.

    ``mode='within-group'`` is the label-conditioned reading and equals
    :func:`intra_auc_disparity`.
    """
    if mode == "within-group":
        return intra_auc_disparity(preds)
    if mode != "label-free":
        raise MetricError(f"unknown GAUC mode {mode!r}; choose from {GAUC_MODES}")
    groups = _require_groups(preds)
    per_class = []
    for c in range(preds.n_classes):
        s = preds.scores[:, c]
        worst = 0.0
        for g, h in itertools.permutations(groups, 2):
            val = mw_auc(s[preds.group == g], s[preds.group == h])
            worst = max(worst, abs(val - 0.5))
        per_class.append(worst)
    return _macro(per_class, "GAUC")


def inter_auc_disparity(preds: Predictions) -> float:
    groups = _require_groups(preds)
    per_class = []
    for c in range(preds.n_classes):
        s = preds.scores[:, c]
        y = preds.label == c
        aucs = []
        for g, h in itertools.permutations(groups, 2):
            pos = s[(preds.group == g) & y]
            neg = s[(preds.group == h) & ~y]
            if pos.size and neg.size:
                aucs.append(mw_auc(pos, neg))
        if len(aucs) < 2:
            _warn(f"class {c}: fewer than two usable group pairs for Inter-AUC, excluded")
            per_class.append(None)
        else:
            per_class.append(max(aucs) - min(aucs))
    return _macro(per_class, "Inter-AUC")


def intra_auc_disparity(preds: Predictions) -> float:
    groups = _require_groups(preds)
    per_class = []
    for c in range(preds.n_classes):
        s = preds.scores[:, c]
        y = preds.label == c
        aucs = []
        for g in groups:
            in_g = preds.group == g
            pos, neg = s[in_g & y], s[in_g & ~y]
            if pos.size and neg.size:
                aucs.append(mw_auc(pos, neg))
        if len(aucs) < 2:
            _warn(f"class {c}: fewer than two usable groups for Intra-AUC, excluded")
            per_class.append(None)
        else:
            per_class.append(max(aucs) - min(aucs))
    return _macro(per_class, "Intra-AUC")


def metric_table(preds: Predictions, gauc_mode: str = "label-free") -> MetricTable:
    return MetricTable(
        acc=accuracy(preds),
        auc=macro_auc(preds) * 100.0,
        dpd=dpd(preds),
        deodds=deodds(preds),
        gauc=gauc_disparity(preds, gauc_mode),
        inter_auc=inter_auc_disparity(preds),
        intra_auc=intra_auc_disparity(preds),
    )


def fairness_improvement(baseline: dict, run: dict) -> float:
    """Mean relative drop (percent) of the five disparity metrics vs ``baseline``."""
    gains = []
    for k in FAIRNESS_COLUMNS:
        b = float(baseline[k])
        if b == 0:
            raise MetricError(f"baseline {k} is zero; relative improvement undefined")
        gains.append((b - float(run[k])) / b)
    return float(np.mean(gains) * 100.0)


# -- audit file format ---------------------------------------------------------

def audit_header(n_classes: int) -> list[str]:
    return ["sample_id", "group", "label"] + [f"score_{c}" for c in range(n_classes)]


def write_predictions(path, preds: Predictions):
    lines = [",".join(audit_header(preds.n_classes))]
    for i in range(preds.label.size):
        parts = [str(int(preds.sample_id[i])), str(int(preds.group[i])), str(int(preds.label[i]))]
        parts += [repr(float(x)) for x in preds.scores[i]]
        lines.append(",".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class AuditFormatError(ValueError):
    pass


def read_predictions(path) -> Predictions:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) < 4 or header[:3] != ["sample_id", "group", "label"]:
            raise AuditFormatError(f"{path}:1: header must start with sample_id,group,label,score_0")
        n_cls = len(header) - 3
        if header != audit_header(n_cls):
            raise AuditFormatError(f"{path}:1: score columns must be score_0..score_{n_cls - 1}")
        ids, groups, labels, scores = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise AuditFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}"
                )
            try:
                ids.append(int(parts[0]))
                groups.append(int(parts[1]))
                labels.append(int(parts[2]))
                row = [float(x) for x in parts[3:]]
            except ValueError as exc:
                raise AuditFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(row)):
                raise AuditFormatError(f"{path}:{lineno}: non-finite score")
            if not 0 <= labels[-1] < n_cls or groups[-1] < 0:
                raise AuditFormatError(f"{path}:{lineno}: group/label index out of range")
            scores.append(row)
    if not ids:
        raise AuditFormatError(f"{path}: no prediction rows")
    return Predictions(groups, labels, np.array(scores), np.array(ids))

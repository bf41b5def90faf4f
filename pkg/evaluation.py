"""
Classification metrics and analysis tables for the FedHAR simulator
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import ACTIVITY_CODES, N_CLASSES
from models import DEFAULT_AE_SPEC, encode_windows, predict_logits

logger = logging.getLogger(__name__)

# classes absent from the ground truth are left out of the macro mean
MACRO_AVERAGE = "present_classes"
REPORT_KEYS = ("arm", "combined", "per_dataset", "confusion")


class MetricError(ValueError):
    """Metric precondition violated"""


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes"""
    counts: np.ndarray

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def n_classes(self):
        return self.counts.shape[0]

    def support(self):
        return self.counts.sum(axis=1)

    def to_frame(self, codes=None):
        codes = codes or ACTIVITY_CODES[:self.n_classes]
        return pd.DataFrame(self.counts, index=pd.Index(codes, name="true"), columns=codes)


def confusion(true, pred, n_classes=N_CLASSES):
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise MetricError(f"true has {true.size} labels, pred has {pred.size}")
    for name, values in (("true", true), ("pred", pred)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise MetricError(f"{name} labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def _safe_ratio(num, den):
    return np.divide(num, den, out=np.zeros(len(num), dtype=np.float64), where=den > 0)


def _class_arrays(cm):
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    precision = _safe_ratio(tp, counts.sum(axis=0))
    recall = _safe_ratio(tp, support)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1, support, support > 0


def per_class_scores(cm):
    """
    Precision, recall and F1 per class.

    Zero denominators give 0. Classes with no true samples are marked present=False and
    carry NaN recall/F1; they never enter a macro mean.
    """
    precision, recall, f1, support, present = _class_arrays(cm)
    recall = np.where(present, recall, np.nan)
    f1 = np.where(present, f1, np.nan)
    return pd.DataFrame({
        "class": ACTIVITY_CODES[:cm.n_classes],
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": support.astype(np.int64),
        "present": present,
    })


def macro_f1(cm):
    """Mean per-class F1 over the classes present in the ground truth"""
    if cm.n == 0:
        raise MetricError("macro F1 of an empty confusion matrix")
    _, _, f1, _, present = _class_arrays(cm)
    return float(f1[present].mean())


@dataclass
class EvalReport:
    macro_f1: float
    per_class: pd.DataFrame
    confusion: ConfusionMatrix
    per_dataset: Dict[str, float] = field(default_factory=dict)
    per_dataset_n: Dict[str, int] = field(default_factory=dict)

    def to_dict(self, arm="", config=None, metadata=None):
        """JSON-ready report; NaN scores become null"""
        per_class = []
        for row in self.per_class.itertuples(index=False):
            per_class.append({
                "class": row[0],
                "precision": float(row.precision),
                "recall": None if np.isnan(row.recall) else float(row.recall),
                "f1": None if np.isnan(row.f1) else float(row.f1),
                "support": int(row.support),
            })
        return {
            "arm": arm,
            "combined": {"macro_f1": self.macro_f1, "n": self.confusion.n, "per_class": per_class},
            "per_dataset": {
                tag: {"macro_f1": score, "n": self.per_dataset_n.get(tag, 0)} for tag, score in self.per_dataset.items()
            },
            "confusion": self.confusion.counts.tolist(),
            "metadata": {"macro_average": MACRO_AVERAGE, **(metadata or {})},
            "config_echo": config or {},
        }


def report_from_predictions(true, pred, n_classes=N_CLASSES):
    cm = confusion(true, pred, n_classes)
    return EvalReport(macro_f1=macro_f1(cm), per_class=per_class_scores(cm), confusion=cm)


def per_dataset_breakdown(params, layout, tags=None, spec=DEFAULT_AE_SPEC, n_classes=N_CLASSES):
    """
    Combined report over the union test set plus a macro-F1 per source tag.

    Per-tag scores are computed on that tag's clients' test windows, averaging over the
    classes present in the restriction.
    """
    available = layout.tags
    tags = list(tags) if tags is not None else available
    missing = [t for t in tags if t not in available]
    if missing:
        raise MetricError(f"tags not in layout: {missing}")

    true = layout.server_test.labels
    pred = predict_logits(params, layout.server_test.windows, spec).argmax(axis=1)
    report = report_from_predictions(true, pred, n_classes)

    index = layout.test_index
    for tag in tags:
        idx = index[tag]
        cm = confusion(true[idx], pred[idx], n_classes)
        report.per_dataset[tag] = macro_f1(cm)
        report.per_dataset_n[tag] = cm.n
        logger.info(f"  {tag}: macro-F1 {report.per_dataset[tag]:.4f} on {cm.n} windows")
    logger.info(f"Combined macro-F1 {report.macro_f1:.4f} on {report.confusion.n} windows")
    return report


# ============================================================
# ANALYSIS TABLES
# ============================================================
def export_embeddings(params, ws, client_ids=None, spec=DEFAULT_AE_SPEC):
    """
    Latent vectors of every window, for external 2D projection.

    Returns:
        pd.DataFrame: client_id, label (if labeled), z0..z{latent-1}
    """
    if len(ws) == 0:
        raise MetricError("cannot export embeddings of an empty window set")
    latents = encode_windows(params, ws.windows, spec)
    ids = np.asarray(client_ids, dtype=object) if client_ids is not None else np.full(len(ws), ws.client_id, dtype=object)
    if len(ids) != len(ws):
        raise MetricError("client_ids must match the number of windows")
    df = pd.DataFrame({"client_id": ids})
    if ws.labels is not None:
        df["label"] = [ACTIVITY_CODES[i] for i in ws.labels]
    latent_df = pd.DataFrame(latents.astype(np.float64), columns=[f"z{i}" for i in range(latents.shape[1])])
    return pd.concat([df, latent_df], axis=1)


def class_distribution(layout):
    """
    Window counts per activity per source tag over all ground truth in the layout
    (client training labels, client test labels and the server pool).
    """
    rows = []
    for shard in layout.clients:
        for labels in (shard.withheld_labels, shard.test.labels):
            if labels is not None:
                rows.append(pd.DataFrame({"source": shard.source_dataset, "label": labels}))
    if len(layout.server_labeled):
        rows.append(pd.DataFrame({"source": layout.labeled_sources, "label": layout.server_labeled.labels}))
    if not rows:
        return pd.DataFrame(0, index=pd.Index([], name="source"), columns=ACTIVITY_CODES)

    df = pd.concat(rows, ignore_index=True)
    table = pd.crosstab(df["source"], df["label"])
    table = table.reindex(index=layout.tags, columns=range(N_CLASSES), fill_value=0)
    table.columns = ACTIVITY_CODES
    table.index.name = "source"
    return table


# ============================================================
# REPORT FILES AND COMPARISON
# ============================================================
def write_report_json(report_dict, path):
    with open(path, "w") as f:
        json.dump(report_dict, f, indent=2, sort_keys=True)
    logger.info(f"Wrote report to {path}")


def write_confusion_csv(cm, path):
    cm.to_frame().to_csv(path)
    logger.info(f"Wrote confusion matrix to {path}")


def load_report(path):
    with open(path, "r") as f:
        return json.load(f)


def compare_reports(reports: List[dict]):
    """
    Comparison frame: one row per arm, columns Combined plus each source tag.

    Raises:
        MetricError: no reports, missing keys, or reports over different tags
    """
    if not reports:
        raise MetricError("compare needs at least one report")
    tags: Optional[List[str]] = None
    rows = []
    for i, report in enumerate(reports):
        missing = [k for k in REPORT_KEYS if k not in report]
        if missing or "macro_f1" not in report.get("combined", {}):
            raise MetricError(f"report {i} is missing keys: {missing or ['combined.macro_f1']}")
        report_tags = list(report["per_dataset"])
        if tags is None:
            tags = report_tags
        elif sorted(report_tags) != sorted(tags):
            raise MetricError(f"report {i} covers tags {report_tags}, expected {tags}")
        row = {"arm": report["arm"], "Combined": report["combined"]["macro_f1"]}
        row.update({tag: report["per_dataset"][tag]["macro_f1"] for tag in tags})
        rows.append(row)
    return pd.DataFrame(rows, columns=["arm", "Combined"] + tags).set_index("arm")


def column_maxima(table):
    """Boolean frame marking each column's maximum (ties all marked)"""
    return table.eq(table.max(axis=0), axis=1)


def render_comparison(table):
    """Plain-text table of macro F-scores in percent, column maxima in **bold**"""
    marks = column_maxima(table)
    cells = pd.DataFrame(index=table.index, columns=table.columns, dtype=object)
    for col in table.columns:
        for arm in table.index:
            text = f"{table.at[arm, col] * 100:.2f}"
            cells.at[arm, col] = f"**{text}**" if marks.at[arm, col] else text
    return cells.to_string()

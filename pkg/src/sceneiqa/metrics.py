"""Per-scene correlation/error metrics and their median aggregation.

Scene quality scales are not comparable across scenes, so metrics are
computed per scene and summarized by the median across scenes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core import ClassProbVector, SceneRegistry

METRIC_NAMES = ("srcc", "plcc", "krcc", "mae")


class MetricUndefinedError(ValueError):
    """Correlation is undefined (constant inputs or too few points)."""


@dataclass(frozen=True)
class MetricRecord:
    """Per-scene metric values for one attribute; the unit of benchmark aggregation."""

    scene_id: str
    attribute: str
    srcc: float
    plcc: float
    krcc: float
    mae: float
    n_images: int


def compute_scene_metrics(preds: Sequence[float], targets: Sequence[float]):
    """Spearman, Pearson, Kendall tau-b, and MAE for one scene.

    Spearman uses average ranks on ties; Kendall is the tie-corrected tau-b.
    Raw scores are used for Pearson (no logistic remapping).
    """
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size < 2:
        raise MetricUndefinedError("need at least 2 points")
    if np.ptp(t) == 0 or np.ptp(p) == 0:
        raise MetricUndefinedError("constant predictions or targets")
    srcc = stats.spearmanr(p, t).statistic
    plcc = stats.pearsonr(p, t).statistic
    krcc = stats.kendalltau(p, t, variant="b").statistic
    mae = float(np.mean(np.abs(p - t)))
    return float(srcc), float(plcc), float(krcc), mae


def median_across_scenes(values: Sequence[float], mode: str = "standard") -> float:
    """Median of per-scene metric values.

    mode="standard" averages the two middle elements for even counts;
    mode="lower" takes the lower middle element instead.
    """
    if len(values) == 0:
        raise ValueError("empty input")
    v = sorted(float(x) for x in values)
    n = len(v)
    if mode == "lower":
        return v[(n - 1) // 2]
    if mode != "standard":
        raise ValueError(f"unknown median mode: {mode}")
    if n % 2 == 1:
        return v[n // 2]
    return 0.5 * (v[n // 2 - 1] + v[n // 2])


def averaged_correlation(record: MetricRecord) -> float:
    """Arithmetic mean of the three correlation coefficients."""
    vals = (record.srcc, record.plcc, record.krcc)
    if any(not np.isfinite(v) for v in vals):
        raise MetricUndefinedError(f"undefined correlation in scene {record.scene_id}")
    return float(sum(vals) / 3.0)


@dataclass
class BenchmarkTable:
    """model -> attribute -> {srcc, plcc, krcc, mae} medians across scenes."""

    rows: dict
    attributes: tuple[str, ...]

    GAP = "-"

    def cell(self, model: str, attribute: str):
        return self.rows.get(model, {}).get(attribute)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["model"]
        for attr in self.attributes:
            header += [f"{attr}_{m}" for m in METRIC_NAMES]
        writer.writerow(header)
        for model, by_attr in self.rows.items():
            row = [model]
            for attr in self.attributes:
                cell = by_attr.get(attr)
                if cell is None:
                    row += [self.GAP] * len(METRIC_NAMES)
                else:
                    row += [f"{cell[m]:.4f}" for m in METRIC_NAMES]
            writer.writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned-text rendering, one block of four metric columns per attribute."""
        name_w = max([len("model")] + [len(m) for m in self.rows])
        lines = []
        head = "model".ljust(name_w)
        for attr in self.attributes:
            head += " | " + " ".join(f"{attr[:4]}.{m}".rjust(10) for m in METRIC_NAMES)
        lines.append(head)
        lines.append("-" * len(head))
        for model, by_attr in self.rows.items():
            line = model.ljust(name_w)
            for attr in self.attributes:
                cell = by_attr.get(attr)
                if cell is None:
                    line += " | " + " ".join(self.GAP.rjust(10) for _ in METRIC_NAMES)
                else:
                    line += " | " + " ".join(f"{cell[m]:.2f}".rjust(10) for m in METRIC_NAMES)
            lines.append(line)
        return "\n".join(lines) + "\n"


def build_benchmark_table(
    records: Iterable[tuple[str, MetricRecord]],
    models: Sequence[str],
    median_mode: str = "standard",
) -> BenchmarkTable:
    """Aggregate (model, per-scene record) pairs into the benchmark table.

    Each cell is the median across scenes of one metric. Missing
    (model, attribute) combinations get an explicit gap marker.
    """
    grouped: dict[str, dict[str, list[MetricRecord]]] = {}
    attributes: list[str] = []
    for model, rec in records:
        grouped.setdefault(model, {}).setdefault(rec.attribute, []).append(rec)
        if rec.attribute not in attributes:
            attributes.append(rec.attribute)
    rows = {}
    for model in models:
        by_attr = {}
        for attr in attributes:
            recs = grouped.get(model, {}).get(attr)
            if not recs:
                by_attr[attr] = None
                continue
            by_attr[attr] = {
                "srcc": median_across_scenes([r.srcc for r in recs], median_mode),
                "plcc": median_across_scenes([r.plcc for r in recs], median_mode),
                "krcc": median_across_scenes([r.krcc for r in recs], median_mode),
                "mae": median_across_scenes([r.mae for r in recs], median_mode),
            }
        rows[model] = by_attr
    return BenchmarkTable(rows=rows, attributes=tuple(attributes))


def class_distribution_histogram(
    predictions: Sequence[ClassProbVector], registry: SceneRegistry
) -> np.ndarray:
    """Count argmax training-scene assignments across a set of images.

    Ties break to the lower scene index; counts sum to the number of images.
    """
    if len(predictions) == 0:
        raise ValueError("empty prediction set")
    counts = np.zeros(registry.count, dtype=int)
    for probs in predictions:
        counts[int(np.argmax(probs.weights))] += 1
    return counts


def records_to_csv(records: Iterable[tuple[str, MetricRecord]]) -> str:
    """Long-format metric record CSV: model,scene,attribute,n,srcc,plcc,krcc,mae."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "scene", "attribute", "n", "srcc", "plcc", "krcc", "mae"])
    for model, r in records:
        writer.writerow(
            [model, r.scene_id, r.attribute, r.n_images]
            + [f"{v:.6f}" for v in (r.srcc, r.plcc, r.krcc, r.mae)]
        )
    return buf.getvalue()


def histogram_to_csv(test_scene: str, counts: np.ndarray, registry: SceneRegistry) -> str:
    """Histogram CSV rows: test_scene,train_scene,count."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["test_scene", "train_scene", "count"])
    for scene_id, c in zip(registry.scene_ids, counts):
        writer.writerow([test_scene, scene_id, int(c)])
    return buf.getvalue()

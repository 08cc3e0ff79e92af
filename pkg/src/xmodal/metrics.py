"""Standard depth-evaluation metrics (AbsRel, SqRel, RMSE, RMSElog, deltas)."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import DepthMap

CSV_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log",
               "delta1", "delta2", "delta3", "n_pixels")


@dataclass(frozen=True)
class MetricsRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def csv_row(self) -> str:
        """One CSV row in the fixed column order."""
        parts = [f"{getattr(self, name):.9g}" for name in CSV_COLUMNS[:-1]]
        parts.append(str(self.n_pixels))
        return ",".join(parts)


def evaluate_depth(pred: DepthMap, gt: DepthMap, min_depth: float,
                   max_depth: float) -> MetricsRecord:
    """Score a prediction over pixels with in-range, valid ground truth.

    Predictions are clamped to [min_depth, max_depth] before scoring, so
    invalid-prediction pixels (value 0, e.g. splat holes) count against the
    method at the near cap rather than being excluded.
    """
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth extents differ")
    qualify = gt.valid & (gt.values >= min_depth) & (gt.values <= max_depth)
    n = int(qualify.sum())
    if n == 0:
        raise ValueError("no pixels qualify for evaluation")
    p = np.clip(pred.values[qualify], min_depth, max_depth)
    g = gt.values[qualify]

    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff * diff / g))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    log_diff = np.log(p) - np.log(g)
    rmse_log = float(np.sqrt(np.mean(log_diff * log_diff)))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < 1.25))
    delta2 = float(np.mean(ratio < 1.25 ** 2))
    delta3 = float(np.mean(ratio < 1.25 ** 3))
    return MetricsRecord(abs_rel, sq_rel, rmse, rmse_log,
                         delta1, delta2, delta3, n)


def average_records(records: list[MetricsRecord]) -> MetricsRecord:
    """Equal-weight average of per-image records; pixel counts are summed."""
    if not records:
        raise ValueError("cannot average zero records")
    out = {}
    for f in fields(MetricsRecord):
        vals = [getattr(r, f.name) for r in records]
        out[f.name] = sum(vals) if f.name == "n_pixels" else sum(vals) / len(vals)
    return MetricsRecord(**out)

"""Evaluation metrics: volume Dice (%) and surface Hausdorff distance.

Hausdorff is the symmetric max over directed farthest-nearest distances
between boundary pixel sets (4-connectivity boundary, image edges count),
Euclidean, scaled by per-axis spacing.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def dice_coefficient(pred: np.ndarray, gt: np.ndarray) -> float:
    """100 * 2|P n G| / (|P| + |G|); 100 when both masks are empty, 0 when one is."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 100.0
    if p == 0 or g == 0:
        return 0.0
    return 100.0 * 2.0 * int((pred & gt).sum()) / (p + g)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a non-mask 4-neighbor or on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.pad(mask, 1, constant_values=False)
    core = (interior[2:, 1:-1] & interior[:-2, 1:-1] &
            interior[1:-1, 2:] & interior[1:-1, :-2])
    return np.argwhere(mask & ~core)


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray,
                       spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    """Symmetric max of directed Hausdorff distances between boundary sets."""
    pa = boundary_points(pred) * np.asarray(spacing)
    pb = boundary_points(gt) * np.asarray(spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("hausdorff_distance requires both masks nonempty")
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class MetricsReport:
    """Per-class, per-modality summary with recomputable per-case values."""

    # (modality, class, metric) -> list of per-case values
    values: dict[tuple[str, int, str], list[float]] = field(default_factory=dict)
    # (modality, metric) -> number of cases where a structure was missing
    missing: dict[tuple[str, str], int] = field(default_factory=dict)

    def add(self, modality: str, cls: int, metric: str, value: float | None) -> None:
        if value is None:
            key = (modality, metric)
            self.missing[key] = self.missing.get(key, 0) + 1
            return
        self.values.setdefault((modality, cls, metric), []).append(float(value))

    def summary(self, modality: str, cls: int, metric: str) -> tuple[float, float, int]:
        vals = self.values.get((modality, cls, metric), [])
        if not vals:
            raise ValueError(f"no cases for {modality}/{cls}/{metric}")
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), std, len(arr)

    def modality_mean(self, modality: str, metric: str) -> float:
        classes = sorted({c for (m, c, met) in self.values if m == modality and met == metric})
        if not classes:
            raise ValueError(f"no values for modality {modality}")
        return float(np.mean([self.summary(modality, c, metric)[0] for c in classes]))

    def overall_mean(self, metric: str) -> float:
        """Mean of the two modality means (the 'Overall Mean' column)."""
        mods = sorted({m for (m, _c, met) in self.values if met == metric})
        return float(np.mean([self.modality_mean(m, metric) for m in mods]))

    def write_csv(self, path, setting: str = "") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "modality", "class", "metric", "mean", "std", "n"])
            for (modality, cls, metric) in sorted(self.values):
                mean, std, n = self.summary(modality, cls, metric)
                writer.writerow([setting, modality, cls, metric, repr(mean), repr(std), n])


def aggregate_report(per_case: dict[str, list[dict[int, dict[str, float | None]]]]) -> MetricsReport:
    """Build a report from {modality: [case -> {class -> {metric -> value}}]}.

    A None value marks a missing structure (excluded, counted).
    """
    report = MetricsReport()
    total = 0
    for modality, cases in per_case.items():
        for case in cases:
            total += 1
            for cls, metrics in case.items():
                for metric, value in metrics.items():
                    report.add(modality, cls, metric, value)
    if total == 0:
        raise ValueError("aggregate_report needs at least one case")
    return report

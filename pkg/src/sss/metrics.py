"""Dice, Jaccard, 95th-percentile Hausdorff distance and average surface distance.

Overlap scores are percentages. Distances are Euclidean in voxel units scaled
by the voxel spacing. Surfaces are foreground voxels with at least one
background neighbour (8-neighbourhood for 2D masks, face neighbours for 3D);
voxels outside the array count as background.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def _binary_pair(pred, true, class_id):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return pred == class_id, true == class_id


def dice(pred, true, class_id: int = 1) -> float:
    p, t = _binary_pair(pred, true, class_id)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((p & t).sum()) / denom


def jaccard(pred, true, class_id: int = 1) -> float:
    p, t = _binary_pair(pred, true, class_id)
    union = int((p | t).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((p & t).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        structure = np.ones((3, 3), dtype=bool)
    else:
        structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def surface_distances(pred, true, class_id: int = 1, spacing=None) -> np.ndarray | None:
    """Pooled directed surface distances (pred->true and true->pred); ``None`` if undefined."""
    p, t = _binary_pair(pred, true, class_id)
    if not p.any() or not t.any():
        return None
    if spacing is None:
        spacing = (1.0,) * p.ndim
    sp, st = surface(p), surface(t)
    dt_true = ndimage.distance_transform_edt(~st, sampling=spacing)
    dt_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([dt_true[sp], dt_pred[st]])


def hd95(pred, true, class_id: int = 1, spacing=None) -> float:
    d = surface_distances(pred, true, class_id, spacing)
    if d is None:
        return math.nan
    return float(np.percentile(d, 95, method="linear"))


def asd(pred, true, class_id: int = 1, spacing=None) -> float:
    d = surface_distances(pred, true, class_id, spacing)
    if d is None:
        return math.nan
    return float(d.mean())


@dataclass
class ClassScore:
    dice: float
    jaccard: float
    hd95: float  # nan when undefined
    asd: float

    @property
    def distances_defined(self) -> bool:
        return not (math.isnan(self.hd95) or math.isnan(self.asd))


@dataclass
class SegScore:
    per_class: dict[int, ClassScore] = field(default_factory=dict)

    def _mean(self, attr):
        vals = [getattr(c, attr) for c in self.per_class.values()]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def dice(self):
        return self._mean("dice")

    @property
    def jaccard(self):
        return self._mean("jaccard")

    @property
    def hd95(self):
        return self._mean("hd95")

    @property
    def asd(self):
        return self._mean("asd")


def score_volume(pred, true, num_classes: int, spacing=None) -> SegScore:
    """Per-foreground-class scores for one prediction/label pair."""
    out = SegScore()
    for c in range(1, num_classes):
        out.per_class[c] = ClassScore(
            dice(pred, true, c), jaccard(pred, true, c),
            hd95(pred, true, c, spacing), asd(pred, true, c, spacing))
    return out


def _json_num(v: float):
    return None if math.isnan(v) else v


def score_records(ids, scores: list[SegScore]) -> list[dict]:
    """One JSON-ready record per (case, class); undefined distances become ``null``."""
    recs = []
    for vid, sc in zip(ids, scores):
        for c, cs in sc.per_class.items():
            recs.append({"id": vid, "class": c, "dice": cs.dice, "jaccard": cs.jaccard,
                         "hd95": _json_num(cs.hd95), "asd": _json_num(cs.asd)})
    return recs


def summarize(records: list[dict]) -> dict:
    """Per-class and overall means of score records (undefined entries skipped)."""
    classes = sorted({r["class"] for r in records})
    out = {}
    keys = ("dice", "jaccard", "hd95", "asd")
    for c in classes + ["mean"]:
        rows = records if c == "mean" else [r for r in records if r["class"] == c]
        row = {}
        for k in keys:
            vals = [r[k] for r in rows if r[k] is not None]
            row[k] = float(np.mean(vals)) if vals else None
        out[str(c)] = row
    return out


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "Dice ↑", "Jaccard ↑", "95HD ↓", "ASD ↓"])
    for c, row in summary.items():
        writer.writerow([c] + ["" if row[k] is None else f"{row[k]:.4f}"
                               for k in ("dice", "jaccard", "hd95", "asd")])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)

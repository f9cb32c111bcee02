"""Prompt generation with physical constraints and a sliding window.

A light convolutional head turns encoder features into per-slice class
probabilities. Windows of ``N`` consecutive slices are scanned in order of
increasing ``N`` then increasing start; the first window whose pseudo-mask is
physically plausible (the same classes on every slice, and for each class a
large enough share of its mass in per-slice dominant 8-connected components)
is kept and turned into point and box prompts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_TAU = 0.8

_NEIGHBORS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class VolumeTooShortError(ValueError):
    pass


# --------------------------------------------------------------------------
# pseudo-mask prediction


class PseudoMaskHead(nn.Module):
    """Per-level 1x1 projections, upsampled and summed, then SiLU and a 3x3 conv to K logits."""

    def __init__(self, widths, num_classes: int, hidden: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.convs = nn.ModuleList(nn.Conv2d(c, hidden, 1) for c in widths)
        self.out = nn.Conv2d(hidden, num_classes, 3, padding=1)

    def forward(self, pyramid, out_size) -> torch.Tensor:
        if len(pyramid) != len(self.convs):
            raise ValueError(f"expected {len(self.convs)} levels, got {len(pyramid)}")
        h = 0
        for f, conv in zip(pyramid, self.convs):
            h = h + F.interpolate(conv(f), size=tuple(out_size), mode="bilinear",
                                  align_corners=False)
        return self.out(F.silu(h))


@dataclass
class PseudoMaskVolume:
    probs: np.ndarray  # S x H x W x K
    hard: np.ndarray   # S x H x W

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[:3] != self.hard.shape:
            raise ValueError(f"probs {self.probs.shape} and hard {self.hard.shape} disagree")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "PseudoMaskVolume":
        """One-hot wrapper so hard masks (e.g. ground truth) go through the same path."""
        labels = np.asarray(labels)
        probs = np.eye(num_classes, dtype=np.float32)[labels]
        return cls(probs, labels.astype(np.int64))


@torch.no_grad()
def predict_pseudo_masks(pyramid, head: PseudoMaskHead, out_size,
                         num_classes: int | None = None) -> PseudoMaskVolume:
    """Softmax maps and argmax labels for a stack of slices (the pyramid's batch axis)."""
    if num_classes is not None and num_classes != head.num_classes:
        raise ValueError(f"head predicts {head.num_classes} classes, dataset has {num_classes}")
    logits = head(pyramid, out_size)
    probs = torch.softmax(logits.double(), dim=1).permute(0, 2, 3, 1).cpu().numpy()
    return PseudoMaskVolume(probs, probs.argmax(axis=-1))


# --------------------------------------------------------------------------
# windows


def window_band(num_slices: int, strict: bool = False) -> range:
    """Window lengths between a third and a half of the slice count.

    Closed integer band ``[ceil(S/3), floor(S/2)]``; ``strict`` keeps only
    lengths strictly inside ``(S/3, S/2)``.
    """
    s = num_slices
    if strict:
        lo, hi = s // 3 + 1, (s - 1) // 2
    else:
        lo, hi = math.ceil(s / 3), s // 2
    return range(max(lo, 1), hi + 1)


def enumerate_windows(num_slices: int, strict: bool = False) -> list[tuple[int, int]]:
    """``(start, length)`` pairs, ``start`` 0-based, ordered by length then start."""
    band = window_band(num_slices, strict)
    if len(band) == 0:
        raise VolumeTooShortError(
            f"volume too short: no window length fits between S/3 and S/2 for S={num_slices}")
    return [(i, n) for n in band for i in range(num_slices - n + 1)]


# --------------------------------------------------------------------------
# connectivity


def label_components(binary: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """8-connected components by iterative depth-first search.

    Returns a label image (0 = not in the set, components numbered from 1 in
    raster order of their first pixel) and the size of each component.
    """
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    flat = binary.ravel().tolist()
    labels = [0] * (h * w)
    sizes: list[int] = []
    for seed in np.flatnonzero(binary.ravel()).tolist():
        if labels[seed]:
            continue
        comp = len(sizes) + 1
        labels[seed] = comp
        stack = [seed]
        size = 0
        while stack:
            p = stack.pop()
            size += 1
            r, c = divmod(p, w)
            for dr, dc in _NEIGHBORS_8:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    q = rr * w + cc
                    if flat[q] and not labels[q]:
                        labels[q] = comp
                        stack.append(q)
        sizes.append(size)
    return np.asarray(labels, dtype=np.int32).reshape(h, w), sizes


def connected_components(slice_labels: np.ndarray, class_id: int) -> list[int]:
    """Sizes of the 8-connected components of ``class_id``, largest first."""
    _, sizes = label_components(np.asarray(slice_labels) == class_id)
    return sorted(sizes, reverse=True)


def aggregate_sizes(per_slice: list[list[int]]) -> list[int]:
    """Elementwise sum of descending size lists (shorter lists padded with zeros).

    Entry 0 is the total of every slice's largest component.
    """
    width = max((len(s) for s in per_slice), default=0)
    total = [0] * width
    for sizes in per_slice:
        for j, v in enumerate(sizes):
            total[j] += v
    return total


def connectivity_ratio(window_slices: np.ndarray, class_id, *,
                       _sizes: list[list[int]] | None = None) -> float | None:
    """Share of the class's pixels lying in each slice's largest component.

    ``class_id`` may be a set of ids, treated as one merged class. Returns
    ``None`` when the class is absent from the window.
    """
    if _sizes is None:
        _sizes = [_slice_sizes(s, class_id) for s in np.asarray(window_slices)]
    agg = aggregate_sizes(_sizes)
    total = sum(agg)
    if total == 0:
        return None
    return max(agg) / total


def _slice_sizes(slice_labels: np.ndarray, class_id) -> list[int]:
    if isinstance(class_id, (set, frozenset, tuple, list)):
        mask = np.isin(slice_labels, list(class_id))
        return sorted(label_components(mask)[1], reverse=True)
    return connected_components(slice_labels, class_id)


@dataclass
class WindowCandidate:
    start: int
    length: int
    classes: tuple[int, ...] = ()
    sizes: dict = field(default_factory=dict)   # class -> per-slice descending size lists
    ratios: dict = field(default_factory=dict)  # class -> connectivity ratio
    consistent: bool = False
    valid: bool = False

    @property
    def slices(self) -> range:
        return range(self.start, self.start + self.length)

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "length": self.length,
            "classes": list(self.classes),
            "ratios": {str(k): v for k, v in self.ratios.items()},
            "consistent": self.consistent,
            "valid": self.valid,
        }


class _SliceCache:
    """Per-slice class sets and component sizes, shared by overlapping windows."""

    def __init__(self, hard: np.ndarray, num_classes: int, per_class: bool):
        self.hard = hard
        self.per_class = per_class
        self.num_classes = num_classes
        self._sets: dict[int, frozenset] = {}
        self._sizes: dict[tuple, list[int]] = {}

    def class_set(self, z: int) -> frozenset:
        if z not in self._sets:
            present = np.unique(self.hard[z])
            self._sets[z] = frozenset(int(c) for c in present if c != 0)
        return self._sets[z]

    def sizes(self, z: int, key) -> list[int]:
        if (z, key) not in self._sizes:
            self._sizes[(z, key)] = _slice_sizes(self.hard[z], key)
        return self._sizes[(z, key)]


def evaluate_window(cache: _SliceCache, start: int, length: int, tau: float) -> WindowCandidate:
    cand = WindowCandidate(start, length)
    zs = range(start, start + length)
    sets = [cache.class_set(z) for z in zs]
    cand.consistent = bool(sets[0]) and all(a == b for a, b in zip(sets, sets[1:]))
    present = sorted(set().union(*sets))
    cand.classes = tuple(present)
    keys = present if cache.per_class else ([frozenset(present)] if present else [])
    for key in keys:
        per_slice = [cache.sizes(z, key) for z in zs]
        name = key if cache.per_class else 0
        cand.sizes[name] = per_slice
        cand.ratios[name] = connectivity_ratio(None, key, _sizes=per_slice)
    cand.valid = cand.consistent and all(r is not None and r >= tau for r in cand.ratios.values())
    return cand


def _hard_labels(masks) -> tuple[np.ndarray, int]:
    if isinstance(masks, PseudoMaskVolume):
        return masks.hard, masks.num_classes
    hard = np.asarray(masks)
    return hard, int(hard.max()) + 1 if hard.size else 1


def scan_windows(masks, tau: float = DEFAULT_TAU, *, per_class: bool = True,
                 strict_band: bool = False, stop_at_first: bool = False) -> list[WindowCandidate]:
    """Evaluate windows in enumeration order (optionally stopping at the first valid one)."""
    hard, k = _hard_labels(masks)
    cache = _SliceCache(hard, k, per_class)
    out = []
    for start, length in enumerate_windows(hard.shape[0], strict_band):
        cand = evaluate_window(cache, start, length, tau)
        out.append(cand)
        if stop_at_first and cand.valid:
            break
    return out


def select_valid_window(masks, tau: float = DEFAULT_TAU, *, per_class: bool = True,
                        strict_band: bool = False) -> WindowCandidate | None:
    """First window in enumeration order that passes both physical checks, else ``None``."""
    scanned = scan_windows(masks, tau, per_class=per_class, strict_band=strict_band,
                           stop_at_first=True)
    if scanned and scanned[-1].valid:
        return scanned[-1]
    return None


# --------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PointPrompt:
    slice: int
    y: int
    x: int
    class_id: int
    positive: bool = True


@dataclass(frozen=True)
class BoxPrompt:
    slice: int
    y0: int
    x0: int
    y1: int  # inclusive
    x1: int  # inclusive
    class_id: int


@dataclass
class PromptSet:
    points: list[PointPrompt] = field(default_factory=list)
    boxes: list[BoxPrompt] = field(default_factory=list)

    def __len__(self):
        return len(self.points) + len(self.boxes)

    def for_slice(self, z: int) -> "PromptSet":
        return PromptSet([p for p in self.points if p.slice == z],
                         [b for b in self.boxes if b.slice == z])

    @property
    def slices(self) -> list[int]:
        return sorted({p.slice for p in self.points} | {b.slice for b in self.boxes})

    def to_dict(self) -> dict:
        return {"points": [asdict(p) for p in self.points],
                "boxes": [asdict(b) for b in self.boxes]}


def component_prompt(component: np.ndarray, z: int, class_id: int):
    """Centroid point (snapped into the component) and tight box of one component."""
    ys, xs = np.nonzero(component)
    cy, cx = ys.mean(), xs.mean()
    y, x = int(round(cy)), int(round(cx))
    if not component[y, x]:
        j = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        y, x = int(ys[j]), int(xs[j])
    point = PointPrompt(z, y, x, class_id)
    if len(ys) == 1:
        return point, None
    return point, BoxPrompt(z, int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()), class_id)


def prompts_from_labels(hard_slices: np.ndarray, slice_ids, classes=None) -> PromptSet:
    """Largest component per (slice, class) -> one positive point and its box."""
    prompts = PromptSet()
    for z, lab in zip(slice_ids, np.asarray(hard_slices)):
        present = [int(c) for c in np.unique(lab) if c != 0]
        for c in present if classes is None else [c for c in classes if c in present]:
            comp_labels, sizes = label_components(lab == c)
            biggest = int(np.argmax(sizes)) + 1
            point, box = component_prompt(comp_labels == biggest, int(z), c)
            prompts.points.append(point)
            if box is not None:
                prompts.boxes.append(box)
    return prompts


def prompts_from_window(window: WindowCandidate, masks) -> PromptSet:
    hard, _ = _hard_labels(masks)
    zs = list(window.slices)
    return prompts_from_labels(hard[zs], zs)


def raw_prompts(masks) -> PromptSet:
    """Unvalidated prompts from every slice of a pseudo-mask (the no-PCSW ablation)."""
    hard, _ = _hard_labels(masks)
    return prompts_from_labels(hard, range(hard.shape[0]))


@dataclass
class PCSWResult:
    window: WindowCandidate | None
    prompts: PromptSet
    scanned: list[WindowCandidate]

    def to_dict(self) -> dict:
        return {
            "selected": None if self.window is None else self.window.to_dict(),
            "windows": [c.to_dict() for c in self.scanned],
            "prompts": self.prompts.to_dict(),
        }


def run_pcsw(masks, tau: float = DEFAULT_TAU, *, per_class: bool = True,
             strict_band: bool = False) -> PCSWResult:
    """Full scan (for reporting), first-valid selection and prompt extraction."""
    scanned = scan_windows(masks, tau, per_class=per_class, strict_band=strict_band)
    window = next((c for c in scanned if c.valid), None)
    prompts = PromptSet() if window is None else prompts_from_window(window, masks)
    return PCSWResult(window, prompts, scanned)

"""3D volumes, label masks, the synthetic lesion generator and the binary volume format.

Binary layout (little-endian)::

    offset  size  field
    0       4     magic  b"SSSV"
    4       2     format version (1)
    6       1     kind   (0 = intensity volume, 1 = label mask)
    7       1     dtype code (see ``_DTYPES``)
    8       12    S, H, W as uint32
    20      4     K (number of classes; 0 for intensity volumes)
    24      24    voxel spacing, 3 x float64
    48      ...   row-major payload, S*H*W items
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"SSSV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBB3II3d")
HEADER_SIZE = _HEADER.size  # 48

KIND_VOLUME = 0
KIND_MASK = 1

_DTYPES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
}
_DTYPE_CODES = {dt: code for code, dt in _DTYPES.items()}

MIN_SLICES = 2
MIN_SIDE = 8

_EIGHT = np.ones((3, 3), dtype=bool)


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be parsed."""


class NoTargetPairError(ValueError):
    """Raised when a mask has no two consecutive slices containing a target."""


def _check_dims(s: int, h: int, w: int) -> None:
    if s < MIN_SLICES:
        raise ValueError(f"volume needs at least {MIN_SLICES} slices, got S={s}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"slices must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")


@dataclass(eq=False)
class Volume3D:
    """Stack of ``S`` slices of shape ``H x W`` with intensities in [0, 1]."""

    slices: np.ndarray
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.slices)
        if arr.ndim != 3:
            raise ValueError(f"expected an S x H x W array, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_dims(*arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite intensities")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        self.slices = arr
        self.voxel_spacing = tuple(float(v) for v in self.voxel_spacing)
        if len(self.voxel_spacing) != 3:
            raise ValueError("voxel_spacing must have three entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.slices.shape

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.slices.dtype == other.slices.dtype
            and self.voxel_spacing == other.voxel_spacing
            and np.array_equal(self.slices, other.slices)
        )


@dataclass(eq=False)
class MaskVolume:
    """Integer class labels per voxel; class 0 is background."""

    labels: np.ndarray
    num_classes: int
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError(f"expected an S x H x W array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {arr.dtype}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (class 0 is background)")
        _check_dims(*arr.shape)
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        if arr.dtype not in (np.uint8, np.int32):
            arr = arr.astype(np.uint8 if self.num_classes <= 256 else np.int32)
        self.labels = arr
        self.voxel_spacing = tuple(float(v) for v in self.voxel_spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.labels.dtype == other.labels.dtype
            and self.voxel_spacing == other.voxel_spacing
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class DatasetSplit:
    """Labeled pairs, unlabeled volumes and a held-out test set.

    Ids are unique across all three lists.
    """

    labeled: list[tuple[Volume3D, MaskVolume]]
    unlabeled: list[Volume3D]
    labeled_batch: int = 1
    unlabeled_batch: int = 1
    test: list[tuple[Volume3D, MaskVolume]] = field(default_factory=list)
    labeled_ids: list[str] = field(default_factory=list)
    unlabeled_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    # Ground truth of the unlabeled volumes; diagnostics only, never used for training.
    unlabeled_masks: list[MaskVolume] = field(default_factory=list)

    def __post_init__(self):
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.labeled_ids:
            self.labeled_ids = [f"L{i:03d}" for i in range(len(self.labeled))]
        if not self.unlabeled_ids:
            self.unlabeled_ids = [f"U{i:03d}" for i in range(len(self.unlabeled))]
        if not self.test_ids:
            self.test_ids = [f"T{i:03d}" for i in range(len(self.test))]
        ids = self.labeled_ids + self.unlabeled_ids + self.test_ids
        if len(set(ids)) != len(ids):
            raise ValueError("volume ids must be unique across splits")

    @property
    def num_classes(self) -> int:
        return self.labeled[0][1].num_classes


def num_labeled(count: int, labeled_fraction: float) -> int:
    """Labeled volume count: ``floor(count * fraction)``, tolerant to float noise."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n = int(math.floor(count * labeled_fraction + 1e-9))
    if n < 1:
        raise ValueError(
            f"labeled_fraction={labeled_fraction} with count={count} yields no labeled volumes"
        )
    return n


# --------------------------------------------------------------------------
# synthetic data


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def _blob(shape, cy, cx, radius, coeffs, phases) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    r = np.full_like(theta, radius)
    for k, (a, phi) in enumerate(zip(coeffs, phases), start=2):
        r += radius * a * np.cos(k * theta + phi)
    inside = np.hypot(dy, dx) <= r
    iy = int(np.clip(round(cy), 0, h - 1))
    ix = int(np.clip(round(cx), 0, w - 1))
    inside[iy, ix] = True
    return _largest_component(inside)


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def _lesion_extent(rng, s: int) -> tuple[int, int]:
    lo = max(2, math.ceil(s / 2))
    hi = max(lo, s - 2)
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, s - length + 1))
    return start, length


def _make_case(rng: np.random.Generator, dims, num_classes: int):
    s, h, w = dims
    # anatomy: textured background with a brighter tissue ellipse
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ey, ex = h / 2 + rng.uniform(-0.08, 0.08) * h, w / 2 + rng.uniform(-0.08, 0.08) * w
    ay, ax = rng.uniform(0.32, 0.45) * h, rng.uniform(0.32, 0.45) * w
    tissue = (((yy - ey) / ay) ** 2 + ((xx - ex) / ax) ** 2) <= 1.0
    tissue = ndimage.gaussian_filter(tissue.astype(np.float64), 1.5)

    # per-volume acquisition style, so a handful of labeled cases cannot cover it
    tex_amp = rng.uniform(0.02, 0.14)
    tex_sigma = rng.uniform(1.0, max(2.0, h / 8))
    tissue_level = rng.uniform(0.15, 0.40)

    vol = np.empty((s, h, w), dtype=np.float64)
    bg_field = _smooth_field(rng, (h, w), tex_sigma)
    for z in range(s):
        drift = 0.4 * _smooth_field(rng, (h, w), tex_sigma)
        vol[z] = 0.12 + tissue_level * tissue + tex_amp * (bg_field + drift)

    labels = np.zeros((s, h, w), dtype=np.uint8)
    start, length = _lesion_extent(rng, s)
    contrast = rng.uniform(0.08, 0.30)
    irregular = rng.uniform(0.0, 0.3)
    margin = max(2.0, 0.2 * min(h, w))
    placed: list[tuple[float, float, float]] = []
    for cls in range(1, num_classes):
        r_max = rng.uniform(0.07, 0.17) * min(h, w)
        for _ in range(200):
            cy, cx = rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)
            if all(math.hypot(cy - py, cx - px) > r_max + pr + 2 for py, px, pr in placed):
                break
        else:
            raise RuntimeError("could not place non-overlapping lesions; enlarge the slices")
        placed.append((cy, cx, r_max * 1.3))
        coeffs = rng.uniform(0.0, irregular, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        level = contrast * (1.0 + 0.35 * (cls - 1))
        for k, z in enumerate(range(start, start + length)):
            profile = 0.55 + 0.45 * math.sin(math.pi * (k + 0.5) / length)
            jy, jx = rng.uniform(-0.8, 0.8, size=2)
            blob = _blob((h, w), cy + jy, cx + jx, max(1.5, r_max * profile),
                         coeffs, phases + rng.uniform(-0.15, 0.15, size=3))
            blob &= labels[z] == 0
            blob = _largest_component(blob)
            labels[z][blob] = cls
            soft = ndimage.gaussian_filter(blob.astype(np.float64), 0.7)
            vol[z] += level * soft

    # small single-slice look-alikes: lesion brightness, labelled background
    for _ in range(int(rng.poisson(3.0))):
        z = int(rng.integers(0, s))
        cy, cx = rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)
        blob = _blob((h, w), cy, cx, rng.uniform(0.025, 0.06) * min(h, w), [0.05], [0.0])
        blob &= labels[z] == 0
        vol[z] += contrast * ndimage.gaussian_filter(blob.astype(np.float64), 0.7)

    blur = rng.uniform(0.0, 1.2)
    if blur > 0.3:
        vol = ndimage.gaussian_filter(vol, (0, blur, blur))
    gain, bias = rng.uniform(0.6, 1.4), rng.uniform(-0.1, 0.1)
    vol = gain * vol + bias + rng.normal(0.0, rng.uniform(0.01, 0.07), size=vol.shape)
    vol = np.clip(vol, 0.0, 1.0) ** rng.uniform(0.7, 1.4)
    return Volume3D(vol.astype(np.float32)), MaskVolume(labels, num_classes)


def generate_synthetic_dataset(
    seed: int,
    count: int,
    dims: tuple[int, int, int],
    num_classes: int,
    labeled_fraction: float,
    test_count: int = 0,
    labeled_batch: int = 1,
    unlabeled_batch: int = 1,
) -> DatasetSplit:
    """Seeded synthetic benchmark.

    Every foreground class is a single blob extruded over a run of consecutive
    slices (at least two, and at least half the volume), 8-connected in each
    slice it touches. All classes of a case share the same slice extent.
    """
    s, h, w = (int(d) for d in dims)
    _check_dims(s, h, w)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2; a background-only dataset is degenerate")
    if count < 1:
        raise ValueError("count must be >= 1")
    n_lab = num_labeled(count, labeled_fraction)

    children = np.random.SeedSequence(seed).spawn(count + test_count)
    cases = [_make_case(np.random.default_rng(c), (s, h, w), num_classes) for c in children]
    train, test = cases[:count], cases[count:]
    return DatasetSplit(
        labeled=train[:n_lab],
        unlabeled=[v for v, _ in train[n_lab:]],
        unlabeled_masks=[m for _, m in train[n_lab:]],
        test=test,
        labeled_batch=labeled_batch,
        unlabeled_batch=unlabeled_batch,
    )


# --------------------------------------------------------------------------
# frame sampling


def target_pairs(mask: MaskVolume | np.ndarray) -> list[int]:
    """Start indices ``t`` such that slices ``t`` and ``t + 1`` both hold foreground."""
    labels = mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask)
    has_fg = labels.reshape(labels.shape[0], -1).max(axis=1) > 0
    return [t for t in range(len(has_fg) - 1) if has_fg[t] and has_fg[t + 1]]


def extract_frame_pair(volume: Volume3D, mask: MaskVolume, rng: np.random.Generator):
    """Pick two consecutive slices that both contain a target.

    Returns ``(t, images, labels)`` where ``images`` and ``labels`` hold slices
    ``t`` and ``t + 1``.
    """
    if volume.shape != mask.shape:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} disagree")
    pairs = target_pairs(mask)
    if not pairs:
        raise NoTargetPairError("no target pair: no two consecutive slices contain foreground")
    t = pairs[int(rng.integers(len(pairs)))]
    return t, volume.slices[t:t + 2], mask.labels[t:t + 2]


# --------------------------------------------------------------------------
# file I/O


def save_volume(path: str | os.PathLike, vol: Volume3D | MaskVolume) -> None:
    if isinstance(vol, Volume3D):
        kind, data, k = KIND_VOLUME, vol.slices, 0
    elif isinstance(vol, MaskVolume):
        kind, data, k = KIND_MASK, vol.labels, vol.num_classes
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")
    dt = data.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {data.dtype}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, _DTYPE_CODES[dt], *data.shape, k,
                          *vol.voxel_spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype=dt).tobytes())


def parse_volume(buf: bytes) -> Volume3D | MaskVolume:
    if len(buf) < HEADER_SIZE:
        raise VolumeFormatError(
            f"truncated header: need {HEADER_SIZE} bytes at offset 0, found {len(buf)}")
    magic, version, kind, code, s, h, w, k, *spacing = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported version {version} at offset 4")
    if kind not in (KIND_VOLUME, KIND_MASK):
        raise VolumeFormatError(f"unknown kind {kind} at offset 6")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code} at offset 7")
    dt = _DTYPES[code]
    expected = s * h * w * dt.itemsize
    found = len(buf) - HEADER_SIZE
    if found != expected:
        raise VolumeFormatError(
            f"payload at offset {HEADER_SIZE} has {found} bytes but header dims "
            f"{s}x{h}x{w} ({dt}) need {expected}")
    data = np.frombuffer(buf, dtype=dt, offset=HEADER_SIZE).reshape(s, h, w)
    data = data.astype(dt.newbyteorder("="), copy=True)
    try:
        if kind == KIND_VOLUME:
            return Volume3D(data, tuple(spacing))
        return MaskVolume(data, k, tuple(spacing))
    except ValueError as exc:
        raise VolumeFormatError(f"invalid payload at offset {HEADER_SIZE}: {exc}") from exc


def load_volume(path: str | os.PathLike) -> Volume3D | MaskVolume:
    return parse_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    split: str
    id: str


SPLITS = ("labeled", "labeled-mask", "unlabeled", "unlabeled-mask", "test", "test-mask")


def write_manifest(path: str | os.PathLike, records: list[ManifestRecord],
                   header: dict[str, str] | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines += [f"{r.path}\t{r.split}\t{r.id}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> tuple[list[ManifestRecord], dict[str, str]]:
    records, header = [], {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in SPLITS:
            raise VolumeFormatError(f"{path}:{n}: malformed manifest record {line!r}")
        records.append(ManifestRecord(*parts))
    return records, header


def save_dataset(split: DatasetSplit, out_dir: str | os.PathLike,
                 header: dict[str, str] | None = None) -> Path:
    """Write every volume of ``split`` plus ``manifest.txt``; paths are relative."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    records = []

    def put(obj, split_name, vid):
        rel = f"volumes/{vid}_{split_name}.vol"
        save_volume(out / rel, obj)
        records.append(ManifestRecord(rel, split_name, vid))

    for vid, (v, m) in zip(split.labeled_ids, split.labeled):
        put(v, "labeled", vid)
        put(m, "labeled-mask", vid)
    for i, (vid, v) in enumerate(zip(split.unlabeled_ids, split.unlabeled)):
        put(v, "unlabeled", vid)
        if i < len(split.unlabeled_masks):
            put(split.unlabeled_masks[i], "unlabeled-mask", vid)
    for vid, (v, m) in zip(split.test_ids, split.test):
        put(v, "test", vid)
        put(m, "test-mask", vid)
    manifest = out / "manifest.txt"
    write_manifest(manifest, records, header)
    return manifest


def load_dataset(manifest: str | os.PathLike, labeled_batch: int = 1,
                 unlabeled_batch: int = 1) -> DatasetSplit:
    records, _ = read_manifest(manifest)
    root = Path(manifest).parent
    by_split: dict[str, dict[str, object]] = {s: {} for s in SPLITS}
    for r in records:
        by_split[r.split][r.id] = load_volume(root / r.path)

    def paired(vol_split, mask_split):
        ids = list(by_split[vol_split])
        missing = [i for i in ids if i not in by_split[mask_split]]
        if missing:
            raise VolumeFormatError(f"manifest lacks {mask_split} records for {missing}")
        return ids, [(by_split[vol_split][i], by_split[mask_split][i]) for i in ids]

    lab_ids, labeled = paired("labeled", "labeled-mask")
    test_ids, test = paired("test", "test-mask")
    unl_ids = list(by_split["unlabeled"])
    return DatasetSplit(
        labeled=labeled,
        unlabeled=[by_split["unlabeled"][i] for i in unl_ids],
        unlabeled_masks=[by_split["unlabeled-mask"][i] for i in unl_ids
                         if i in by_split["unlabeled-mask"]],
        test=test,
        labeled_batch=labeled_batch,
        unlabeled_batch=unlabeled_batch,
        labeled_ids=lab_ids,
        unlabeled_ids=unl_ids,
        test_ids=test_ids,
    )

"""Dataset handling: on-disk layout, synthetic shape generation, automatic
scribbles and edge maps, augmentation, and patient-level splits.

On-disk layout (all PNG):
    root/images/<id>.png     8-bit gray or RGB
    root/scribbles/<id>.png  8-bit class ids, 255 = unlabeled
    root/edges/<id>.png      8-bit gray mapped to [0, 1] (optional)
    root/masks/<id>.png      8-bit dense class ids (optional, evaluation)
    root/meta.csv            id,patient,spacing_y,spacing_x

Internally the unlabeled code is num_classes (labels stay contiguous);
255 is only the storage encoding.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import ConfigError, DataError
from .losses import ScribbleMap

logger = logging.getLogger(__name__)

UNLABELED_DISK_CODE = 255
_EIGHT = np.ones((3, 3), dtype=bool)
MAX_SCRIBBLE_FRACTION = 0.4
SPUR_PRUNE_STEPS = 5


@dataclass
class ImageSample:
    """One record: image in [0,1], scribble labels, edge ground truth,
    optional dense labels (evaluation only), pixel spacing in mm."""

    id: str
    image: np.ndarray            # (C, H, W) float32
    scribble: ScribbleMap
    edge_gt: np.ndarray          # (1, H, W) float32
    dense_gt: np.ndarray | None  # (H, W) int
    spacing: tuple[float, float] = (1.0, 1.0)
    patient: str = ""

    def __post_init__(self):
        if not self.patient:
            self.patient = self.id


@dataclass
class SplitSpec:
    """Cross-validation layout; folds partition patients, never slices."""

    fold_count: int = 5
    fold_index: int = 0
    unit: str = "patient"


# ---------------------------------------------------------------------------
# Automatic scribbles
# ---------------------------------------------------------------------------

def _prune_spurs(skel, steps=SPUR_PRUNE_STEPS):
    """Trim short skeleton spurs by iterative endpoint removal; keeps the
    input when pruning would erase everything."""
    kernel = np.ones((3, 3))
    kernel[1, 1] = 0
    out = skel.copy()
    for _ in range(steps):
        neighbors = ndimage.convolve(out.astype(np.uint8), kernel, mode="constant")
        endpoints = out & (neighbors <= 1)
        if not endpoints.any():
            break
        trimmed = out & ~endpoints
        if not trimmed.any():
            break
        out = trimmed
    return out if out.any() else skel


def synth_scribble(dense, num_classes, rng) -> ScribbleMap:
    """Thin curve labels from a dense map: per class, skeletonize the (up to)
    two largest connected components; everything else is unlabeled.

    Skeletons are spur-pruned and, if still covering more than
    MAX_SCRIBBLE_FRACTION of the class area, randomly subsampled.
    """
    dense = np.asarray(dense)
    labels = np.full(dense.shape, num_classes, dtype=np.int64)
    for cls in range(num_classes):
        region = dense == cls
        area = int(region.sum())
        if area == 0:
            continue
        comps, n = ndimage.label(region, structure=_EIGHT)
        sizes = ndimage.sum_labels(region, comps, index=np.arange(1, n + 1))
        keep = np.argsort(sizes)[::-1][:2] + 1
        marks = np.zeros_like(region)
        for comp_id in keep:
            comp = comps == comp_id
            skel = _prune_spurs(skeletonize(comp))
            if not skel.any():
                skel = comp.copy()  # single-pixel components survive as-is
            marks |= skel
        limit = max(1, int(MAX_SCRIBBLE_FRACTION * area))
        coords = np.argwhere(marks)
        if len(coords) > limit:
            chosen = coords[rng.choice(len(coords), size=limit, replace=False)]
            marks = np.zeros_like(region)
            marks[chosen[:, 0], chosen[:, 1]] = True
        labels[marks] = cls
    return ScribbleMap(labels, num_classes)


# ---------------------------------------------------------------------------
# Automatic edge maps
# ---------------------------------------------------------------------------

def synth_edge(image) -> np.ndarray:
    """Gradient-magnitude edge map of an image in [0,1], max-normalized to
    [0,1]; an entirely flat image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lum = image.mean(axis=0)
    gy = ndimage.sobel(lum, axis=0)
    gx = ndimage.sobel(lum, axis=1)
    mag = np.sqrt(gy * gy + gx * gx)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return mag[None].astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(sample: ImageSample, rng) -> ImageSample:
    """Random 90-degree rotation and horizontal/vertical flips, applied
    identically to every field."""
    h, w = sample.image.shape[-2:]
    if h != w:
        raise ConfigError(f"augmentation requires square samples, got {h}x{w}")
    k = int(rng.integers(4))
    flip_h = bool(rng.integers(2))
    flip_v = bool(rng.integers(2))

    def tf(a):
        a = np.rot90(a, k, axes=(-2, -1))
        if flip_h:
            a = np.flip(a, axis=-1)
        if flip_v:
            a = np.flip(a, axis=-2)
        return np.ascontiguousarray(a)

    return replace(
        sample,
        image=tf(sample.image),
        scribble=ScribbleMap(tf(sample.scribble.labels), sample.scribble.unknown_code),
        edge_gt=tf(sample.edge_gt),
        dense_gt=None if sample.dense_gt is None else tf(sample.dense_gt),
    )


def sample_rng(run_seed, epoch, sample_id):
    """Per-sample generator independent of worker scheduling."""
    digest = hashlib.blake2s(str(sample_id).encode(), digest_size=8).digest()
    return np.random.default_rng((run_seed, epoch, int.from_bytes(digest, "little")))


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

def _nested_dense(size, num_classes, rng):
    """Dense label map of nested star-convex regions (ellipse or jittered
    polygon outline), one per foreground class. Returns None when a region
    falls below the 2% area guard."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(0.38, 0.62) * size
    cx = rng.uniform(0.38, 0.62) * size
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)

    outer = rng.uniform(0.30, 0.42) * size
    if rng.uniform() < 0.5:
        # ellipse: radius as a function of angle
        ratio = rng.uniform(0.7, 1.0)
        theta = rng.uniform(0, np.pi)
        a, b = outer, outer * ratio
        ct, st = np.cos(phi - theta), np.sin(phi - theta)
        r_outline = a * b / np.sqrt((b * ct) ** 2 + (a * st) ** 2)
    else:
        # star-convex polygon: piecewise-linear radius over jittered vertices
        n_vert = int(rng.integers(5, 9))
        angles = np.linspace(-np.pi, np.pi, n_vert, endpoint=False)
        radii = outer * rng.uniform(0.75, 1.0, size=n_vert)
        order = np.argsort(angles)
        ang = np.concatenate([angles[order], [angles[order][0] + 2 * np.pi]])
        rad = np.concatenate([radii[order], [radii[order][0]]])
        r_outline = np.interp(phi, ang, rad, period=2 * np.pi)

    n_fg = num_classes - 1
    # roughly equal-area nesting fractions with jitter, outermost = 1
    base = np.sqrt(1.0 - np.arange(n_fg) / n_fg)
    jitter = rng.uniform(0.9, 1.1, size=n_fg)
    fracs = np.clip(base * jitter, 0.15, 1.0)
    fracs[0] = 1.0
    fracs = np.sort(fracs)[::-1]

    dense = np.zeros((size, size), dtype=np.int64)
    for k in range(n_fg):
        inside = rho <= fracs[k] * r_outline
        dense[inside] = k + 1

    min_area = 0.02 * size * size
    counts = np.bincount(dense.ravel(), minlength=num_classes)
    if (counts < min_area).any():
        return None
    return dense


def _render_image(dense, num_classes, rng):
    """Grayscale image: distinct per-class intensity, mild background ramp,
    light noise; clipped to [0,1]."""
    size = dense.shape[0]
    levels = np.linspace(0.35, 0.95, num_classes - 1)
    img = np.full(dense.shape, 0.12, dtype=np.float64)
    direction = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ramp = (np.cos(direction) * xx + np.sin(direction) * yy) * rng.uniform(0.0, 0.12)
    img += ramp
    for k in range(1, num_classes):
        img[dense == k] = levels[k - 1] + rng.uniform(-0.05, 0.05)
    img += rng.normal(0.0, 0.02, size=dense.shape)
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def synth_shapes_dataset(n, size, num_classes, seed) -> list[ImageSample]:
    """Deterministic synthetic dataset of nested-shape images with dense
    labels, automatic scribbles and edge maps; spacing (1, 1)."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        dense = None
        for _ in range(200):
            dense = _nested_dense(size, num_classes, rng)
            if dense is not None:
                break
        if dense is None:
            raise ConfigError(
                f"could not place {num_classes - 1} regions of >=2% area at size {size}")
        image = _render_image(dense, num_classes, rng)
        samples.append(ImageSample(
            id=f"s{i:05d}",
            image=image,
            scribble=synth_scribble(dense, num_classes, rng),
            edge_gt=synth_edge(image),
            dense_gt=dense,
            spacing=(1.0, 1.0),
            patient=f"p{i:05d}",
        ))
    return samples


# ---------------------------------------------------------------------------
# Disk IO
# ---------------------------------------------------------------------------

def save_dataset(samples, root):
    """Write samples in the documented layout (images, scribbles, edges,
    masks, meta.csv)."""
    root = Path(root)
    for sub in ("images", "scribbles", "edges", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img = np.clip(s.image, 0.0, 1.0)
        arr = np.round(img * 255).astype(np.uint8)
        pil = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
        pil.save(root / "images" / f"{s.id}.png")

        labels = s.scribble.labels.astype(np.int64).copy()
        labels[labels == s.scribble.unknown_code] = UNLABELED_DISK_CODE
        Image.fromarray(labels.astype(np.uint8)).save(root / "scribbles" / f"{s.id}.png")

        edge = np.round(np.clip(s.edge_gt[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(edge).save(root / "edges" / f"{s.id}.png")

        if s.dense_gt is not None:
            Image.fromarray(s.dense_gt.astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
        rows.append((s.id, s.patient, s.spacing[0], s.spacing[1]))
    with open(root / "meta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "patient", "spacing_y", "spacing_x"])
        writer.writerows(rows)
    return root


def _resize(arr, size, nearest):
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    mode = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(Image.fromarray(arr).resize((size, size), mode))


def load_dataset(root, size=None, num_classes=None) -> list[ImageSample]:
    """Read the documented layout; resizes images (bilinear) and label maps
    (nearest) to `size` when given. Missing edge files are synthesized from
    the image with a warning."""
    root = Path(root)
    meta_path = root / "meta.csv"
    if not meta_path.exists():
        raise DataError(f"missing {meta_path}")
    samples = []
    with open(meta_path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            img_path = root / "images" / f"{sid}.png"
            scrib_path = root / "scribbles" / f"{sid}.png"
            if not img_path.exists():
                raise DataError(f"missing image file {img_path}")
            if not scrib_path.exists():
                raise DataError(f"missing scribble file {scrib_path}")

            img = np.asarray(Image.open(img_path))
            scrib = np.asarray(Image.open(scrib_path))
            if img.shape[:2] != scrib.shape[:2]:
                raise DataError(
                    f"{sid}: image size {img.shape[:2]} != scribble size {scrib.shape[:2]}")
            if size is not None:
                img = _resize(img, size, nearest=False)
                scrib = _resize(scrib, size, nearest=True)

            if img.ndim == 2:
                image = img[None].astype(np.float32) / 255.0
            else:
                image = img.transpose(2, 0, 1).astype(np.float32) / 255.0

            labels = scrib.astype(np.int64)
            if num_classes is not None:
                ids = np.unique(labels)
                bad = ids[(ids != UNLABELED_DISK_CODE) & (ids >= num_classes)]
                if bad.size:
                    raise DataError(
                        f"{sid}: scribble ids {bad.tolist()} exceed num_classes {num_classes}")
                unknown = num_classes
            else:
                unknown = int(labels[labels != UNLABELED_DISK_CODE].max(initial=0)) + 1
            labels[labels == UNLABELED_DISK_CODE] = unknown

            edge_path = root / "edges" / f"{sid}.png"
            if edge_path.exists():
                edge = np.asarray(Image.open(edge_path))
                if size is not None:
                    edge = _resize(edge, size, nearest=False)
                edge_gt = edge[None].astype(np.float32) / 255.0
            else:
                logger.warning("%s: no edge file, synthesizing from the image", sid)
                edge_gt = synth_edge(image)

            mask_path = root / "masks" / f"{sid}.png"
            dense = None
            if mask_path.exists():
                dense = np.asarray(Image.open(mask_path)).astype(np.int64)
                if size is not None:
                    dense = _resize(dense.astype(np.uint8), size, nearest=True).astype(np.int64)

            samples.append(ImageSample(
                id=sid,
                image=image,
                scribble=ScribbleMap(labels, unknown),
                edge_gt=edge_gt,
                dense_gt=dense,
                spacing=(float(row["spacing_y"]), float(row["spacing_x"])),
                patient=row["patient"],
            ))
    return samples


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def make_splits(samples, spec: SplitSpec, seed):
    """Patient-disjoint (train, val, test) lists for one fold.

    Patients are shuffled deterministically and cut into fold_count folds;
    fold fold_index is validation, the next fold (cyclically) is test, the
    rest train. Val folds across fold_index therefore partition all patients.
    """
    if not 0 <= spec.fold_index < spec.fold_count:
        raise ConfigError(
            f"fold_index {spec.fold_index} outside [0, {spec.fold_count})")
    patients = sorted({s.patient for s in samples})
    if spec.fold_count > len(patients):
        raise ConfigError(
            f"{spec.fold_count} folds requested but only {len(patients)} patients")
    if spec.fold_count < 3:
        raise ConfigError("need at least 3 folds for disjoint train/val/test")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    folds = [list(f) for f in np.array_split(np.array(order, dtype=object),
                                             spec.fold_count)]
    val_p = set(folds[spec.fold_index])
    test_p = set(folds[(spec.fold_index + 1) % spec.fold_count])
    train = [s for s in samples if s.patient not in val_p and s.patient not in test_p]
    val = [s for s in samples if s.patient in val_p]
    test = [s for s in samples if s.patient in test_p]
    return train, val, test

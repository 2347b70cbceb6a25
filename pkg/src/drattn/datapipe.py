"""Image ingestion, resizing, augmentation, and stratified manifest splits."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .seeding import derive_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
AUG_OPS = ("rot90", "rot180", "rot270", "hflip")
AUG_TAGS = ("orig",) + AUG_OPS
POLICIES = ("none", "one-random", "full")
MANIFEST_HEADER = ("path", "grade", "split", "aug_tag")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class IngestionError(IOError):
    pass


class ManifestError(ValueError):
    pass


class DRGrade(IntEnum):
    DR0 = 0  # no DR
    DR1 = 1  # mild
    DR2 = 2  # moderate
    DR3 = 3  # severe
    DR4 = 4  # proliferative


@dataclass(frozen=True)
class Sample:
    path: str
    grade: int
    split: str = ""
    aug_tag: str = "orig"
    origin: str = ""

    def __post_init__(self):
        if self.grade not in DRGrade._value2member_map_:
            raise ManifestError(f"{self.path}: grade {self.grade} outside 0..{max(DRGrade)}")
        if self.aug_tag not in AUG_TAGS:
            raise ManifestError(f"{self.path}: unknown augmentation tag {self.aug_tag!r}")
        if self.split not in SPLITS + ("",):
            raise ManifestError(f"{self.path}: unknown split {self.split!r}")
        if not self.origin:
            object.__setattr__(self, "origin", origin_of(self.path, self.aug_tag))


def augmented_path(path: str, tag: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}__{tag}.png"))


def origin_of(path: str, tag: str) -> str:
    """Grouping key shared by an image and its variants: the original's path minus extension."""
    p = Path(path)
    stem = p.stem
    suffix = f"__{tag}"
    if tag != "orig" and stem.endswith(suffix):
        stem = stem[: -len(suffix)]
    return str(p.with_name(stem))


@dataclass
class Manifest:
    samples: list = field(default_factory=list)
    source: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def counts(self) -> dict:
        return class_distribution(self).counts

    def split(self, name: str) -> "Manifest":
        return Manifest([s for s in self.samples if s.split == name], f"{self.source}:{name}")

    def sorted(self) -> "Manifest":
        return Manifest(sorted(self.samples, key=lambda s: (s.path, s.aug_tag)), self.source)


# --- images --------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read an image file as an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc


def save_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def bilinear_resize(values: np.ndarray, size: tuple) -> np.ndarray:
    """Corner-aligned bilinear resampling of an (H, W, ...) float array."""
    th, tw = size
    h, w = values.shape[:2]
    if (h, w) == (th, tw):
        return values.astype(np.float64, copy=True)

    def axis(n_src, n_dst):
        if n_dst == 1 or n_src == 1:
            pos = np.zeros(n_dst)
        else:
            pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    v = values.astype(np.float64)
    extra = (1,) * (v.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = v[y0][:, x0] * (1 - fx) + v[y0][:, x1] * fx
    bottom = v[y1][:, x0] * (1 - fx) + v[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def rescale_image(pixels: np.ndarray, target: tuple = (512, 512)) -> np.ndarray:
    """Bilinear (corner-aligned) resize of an 8-bit RGB image, rounded back to uint8."""
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise IngestionError(f"expected an (H, W, 3) image, got shape {pixels.shape}")
    if pixels.shape[:2] == tuple(target):
        return pixels.copy()
    out = bilinear_resize(pixels, target)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, op: str) -> np.ndarray:
    """Lossless rotation (counter-clockwise) or horizontal flip."""
    if op in ("rot90", "rot180", "rot270"):
        if image.shape[0] != image.shape[1]:
            raise ValueError(f"rotation needs a square image, got {image.shape[:2]}")
        return np.ascontiguousarray(np.rot90(image, k=int(op[3:]) // 90, axes=(0, 1)))
    if op == "hflip":
        return np.ascontiguousarray(image[:, ::-1])
    if op == "orig":
        return image.copy()
    raise ValueError(f"unknown augmentation {op!r}")


def to_tensor_batch(images: Iterable[np.ndarray]) -> np.ndarray:
    """Stack uint8 (H, W, 3) images into a float64 (n, 3, H, W) batch in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


# --- manifests -----------------------------------------------------------

def read_manifest(path) -> Manifest:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        base = Path(path).parent
        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            p, grade, split, tag = (c.strip() for c in row)
            try:
                g = int(grade)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if not os.path.isabs(p):
                p = str(base / p)
            samples.append(Sample(p, g, split, tag or "orig"))
    return Manifest(samples, str(path))


def write_manifest(manifest: Manifest, path, relative_to=None) -> None:
    """Write ``path,grade,split,aug_tag`` rows; paths relative to the file's directory."""
    root = Path(relative_to if relative_to is not None else Path(path).parent).resolve()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            p = Path(s.path).resolve()
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            w.writerow((p.as_posix(), s.grade, s.split, s.aug_tag))


def scan_directory(input_dir, labels_csv=None) -> Manifest:
    """Ingest images with pre-assigned grades.

    Grades come from ``labels_csv`` (``image,grade`` rows) when given,
    otherwise from grade-named subdirectories (``0``..``4`` or ``DR0``..``DR4``).
    """
    root = Path(input_dir)
    if not root.is_dir():
        raise IngestionError(f"input directory {root} does not exist")
    samples = []
    if labels_csv is not None:
        with open(labels_csv, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        for row in rows[1:]:
            if row:
                p = root / row[0].strip()
                if not p.exists():
                    raise IngestionError(f"labelled image {p} does not exist")
                samples.append(Sample(str(p), int(row[1])))
    else:
        for sub in sorted(root.iterdir()):
            if not sub.is_dir():
                continue
            name = sub.name.upper().removeprefix("DR")
            if not name.isdigit():
                continue
            for p in sorted(sub.iterdir()):
                if p.suffix.lower() in IMAGE_SUFFIXES:
                    samples.append(Sample(str(p), int(name)))
    return Manifest(samples, str(root)).sorted()


def expand_dataset(manifest: Manifest, policy: str = "one-random", seed: int = 0) -> Manifest:
    """Add augmented variants: ``one-random`` one per original (2x), ``full`` all four (5x).

    Variants inherit grade, split, and origin of their source sample.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    originals = [s for s in manifest.samples if s.aug_tag == "orig"]
    out = list(manifest.samples)
    if policy == "none":
        return Manifest(out, manifest.source)
    rng = derive_rng(seed, "augment")
    for s in originals:
        ops_ = AUG_OPS if policy == "full" else (AUG_OPS[rng.integers(len(AUG_OPS))],)
        for op in ops_:
            out.append(replace(s, path=augmented_path(s.path, op), aug_tag=op, origin=s.origin))
    return Manifest(out, manifest.source)


def allocate(n: int, fractions) -> list:
    """Split ``n`` items by cumulative floor boundaries; e.g. 7 -> [3, 2, 2]."""
    bounds, acc = [], 0.0
    for f in fractions[:-1]:
        acc += f
        # guard against 0.1+0.2-style representation error just below an integer
        bounds.append(min(n, math.floor(n * acc + 1e-9)))
    bounds.append(n)
    sizes, prev = [], 0
    for b in bounds:
        sizes.append(b - prev)
        prev = b
    return sizes


def split_dataset(manifest: Manifest, fractions=(0.5, 0.3, 0.2), seed: int = 0) -> Manifest:
    """Stratified train/val/test assignment per grade, grouped by origin image."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    by_origin = {}
    for s in manifest.samples:
        by_origin.setdefault(s.origin, []).append(s)
    groups_by_grade = {}
    for origin in sorted(by_origin):
        grades = {s.grade for s in by_origin[origin]}
        if len(grades) != 1:
            raise ManifestError(f"variants of {origin} carry different grades {sorted(grades)}")
        groups_by_grade.setdefault(grades.pop(), []).append(origin)

    assignment = {}
    for grade in sorted(groups_by_grade):
        origins = groups_by_grade[grade]
        if len(origins) < 3:
            log.warning("grade %d has only %d images; all go to train", grade, len(origins))
            assignment.update((o, "train") for o in origins)
            continue
        order = derive_rng(seed, "split", grade).permutation(len(origins))
        start = 0
        for name, size in zip(SPLITS, allocate(len(origins), fractions)):
            for i in order[start:start + size]:
                assignment[origins[i]] = name
            start += size
    samples = [replace(s, split=assignment[s.origin]) for s in manifest.samples]
    return Manifest(samples, manifest.source).sorted()


@dataclass
class ClassDistribution:
    counts: dict
    fractions: dict
    total: int


def class_distribution(manifest: Manifest, num_classes: int = 5) -> ClassDistribution:
    counts = {g: 0 for g in range(num_classes)}
    for s in manifest.samples:
        counts[s.grade] = counts.get(s.grade, 0) + 1
    total = len(manifest.samples)
    fractions = {g: (c / total if total else 0.0) for g, c in counts.items()}
    return ClassDistribution(counts, fractions, total)


# --- preprocessing driver ------------------------------------------------

def preprocess(input_dir, out_dir, resize: Optional[int] = 512, policy: str = "one-random",
               fractions=(0.5, 0.3, 0.2), seed: int = 0, labels_csv=None) -> Manifest:
    """Rescale every image, materialise augmented variants as PNGs, split, and return the manifest."""
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    raw = scan_directory(input_dir, labels_csv)
    if not raw.samples:
        raise IngestionError(f"no labelled images found under {input_dir}")
    processed = []
    seen = set()
    for s in raw.samples:
        stem = Path(s.path).stem
        if stem in seen:
            stem = f"{stem}_{len(seen)}"
        seen.add(stem)
        pixels = load_image(s.path)
        if resize:
            pixels = rescale_image(pixels, (resize, resize))
        dest = img_dir / f"g{s.grade}_{stem}.png"
        save_png(dest, pixels)
        processed.append(Sample(str(dest), s.grade))
    manifest = split_dataset(expand_dataset(Manifest(processed, str(input_dir)), policy, seed), fractions, seed)
    originals = {s.origin: s.path for s in manifest.samples if s.aug_tag == "orig"}
    for s in manifest.samples:
        if s.aug_tag != "orig":
            save_png(s.path, augment(load_image(originals[s.origin]), s.aug_tag))
    return manifest


def load_split_arrays(manifest: Manifest, split: Optional[str] = None) -> tuple:
    """Images as a float64 (n, 3, H, W) batch plus integer grades."""
    m = manifest.split(split) if split else manifest
    if not m.samples:
        return np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=np.int64)
    images = [load_image(s.path) for s in m.samples]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise IngestionError(f"images in split {split!r} have mixed sizes {sorted(shapes)}")
    return to_tensor_batch(images), np.array([s.grade for s in m.samples], dtype=np.int64)

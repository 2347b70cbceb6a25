"""Synthetic fundus-like images for smoke tests and demos.

Each image is a dark-red disc with bright "lesion" spots; the grade sets
the spot count (grade + 1) and hue, positions are random. The class signal
is rotation/flip invariant, so augmented variants keep their label.

    python -m drattn.synthetic OUT_DIR [--per-class 50] [--size 64] [--seed 0]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .datapipe import save_png
from .seeding import derive_rng

SPOT_COLOURS = np.array([
    [255, 255, 255],
    [40, 230, 40],
    [40, 80, 255],
    [255, 230, 0],
    [0, 230, 230],
], dtype=np.float64)


def blob_image(grade: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    disc = ((yy - c) ** 2 + (xx - c) ** 2) <= (0.46 * size) ** 2
    img = np.zeros((size, size, 3))
    img[disc] = [150, 45, 25]
    img += rng.normal(0, 12, img.shape) * disc[..., None]
    radius = max(1.0, size / 12)
    colour = SPOT_COLOURS[grade % len(SPOT_COLOURS)]
    for _ in range(grade + 1):
        ang = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0, 0.3 * size)
        cy, cx = c + r * np.sin(ang), c + r * np.cos(ang)
        spot = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
        img = img * (1 - spot[..., None]) + colour * spot[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_dataset(per_class: int = 50, size: int = 64, seed: int = 0, num_classes: int = 5):
    """Return (images uint8 (n, size, size, 3), grades) ordered by grade."""
    images, grades = [], []
    for g in range(num_classes):
        rng = derive_rng(seed, "synthetic", g)
        for _ in range(per_class):
            images.append(blob_image(g, size, rng))
            grades.append(g)
    return np.stack(images), np.array(grades, dtype=np.int64)


def write_dataset(out_dir, per_class: int = 50, size: int = 64, seed: int = 0, num_classes: int = 5) -> list:
    """Write ``<out_dir>/<grade>/img_XXXX.png`` (the layout ``preprocess`` ingests)."""
    out = Path(out_dir)
    images, grades = make_dataset(per_class, size, seed, num_classes)
    paths = []
    for i, (im, g) in enumerate(zip(images, grades)):
        d = out / str(int(g))
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"img_{i:04d}.png"
        save_png(p, im)
        paths.append(p)
    return paths


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="write a synthetic graded image folder")
    ap.add_argument("out_dir")
    ap.add_argument("--per-class", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    paths = write_dataset(args.out_dir, args.per_class, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

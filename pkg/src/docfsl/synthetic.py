"""Synthetic genuine/fake document images for desk-scale runs.

Gray level of a document = meta-class base + label shift + blocky noise. The
noise is i.i.d. N(0, sigma) per ``cell`` x ``cell`` pixel block and the
genuine and fake means sit ``separation * sigma`` apart. Each meta-class also
gets a zero-mean colour tint, which the channel-averaging mock backbone cannot
see.

    python -m docfsl.synthetic OUT_DIR [--meta-classes 10] [--per-label 15]
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import MANIFEST_FIELDS


def render(rng: np.random.Generator, height: int, width: int, level: float, sigma: float, cell: int,
           tint: np.ndarray) -> np.ndarray:
    gh, gw = -(-height // cell), -(-width // cell)
    noise = rng.normal(0.0, sigma, (gh, gw)).repeat(cell, axis=0).repeat(cell, axis=1)[:height, :width]
    gray = level + noise
    rgb = gray[..., None] + tint[None, None, :]
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def make_dataset(root, meta_classes: int = 10, per_label: int = 15, height: int = 64, width: int = 96,
                 separation: float = 5.0, sigma: float = 0.04, cell: int = 4, seed: int = 0,
                 dataset_id: str = "synthetic", size_jitter: float = 0.0, grayscale_every: int = 0) -> Path:
    """Write PNGs and ``manifest.csv`` under ``root``; return the manifest path.

    ``size_jitter`` > 0 scales each image side by a random factor in
    [1 - jitter, 1 + jitter] to exercise native-resolution inference.
    ``grayscale_every`` = n saves every n-th image as single-channel.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = [f"M{i:02d}" for i in range(meta_classes)]
    rows = []
    for mc in names:
        base = 0.5 + rng.uniform(-0.25, 0.25) * sigma
        t = rng.uniform(-0.05, 0.05, 3)
        tint = t - t.mean()
        (root / "images" / mc).mkdir(parents=True, exist_ok=True)
        for label, shift in (("genuine", -0.5), ("fake", 0.5)):
            for j in range(per_label):
                sid = f"{mc.lower()}_{label[0]}{j:03d}"
                h, w = height, width
                if size_jitter > 0:
                    h = max(1, int(round(height * rng.uniform(1 - size_jitter, 1 + size_jitter))))
                    w = max(1, int(round(width * rng.uniform(1 - size_jitter, 1 + size_jitter))))
                img = render(rng, h, w, base + shift * separation * sigma, sigma, cell, tint)
                rel = Path("images") / mc / f"{sid}.png"
                if grayscale_every and len(rows) % grayscale_every == 0:
                    Image.fromarray(img.mean(axis=2).round().astype(np.uint8), mode="L").save(root / rel)
                else:
                    Image.fromarray(img).save(root / rel)
                rows.append([sid, rel.as_posix(), label, mc, dataset_id])
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return manifest


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m docfsl.synthetic", description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--meta-classes", type=int, default=10)
    ap.add_argument("--per-label", type=int, default=15)
    ap.add_argument("--height", type=int, default=64)
    ap.add_argument("--width", type=int, default=96)
    ap.add_argument("--separation", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size-jitter", type=float, default=0.0)
    args = ap.parse_args(argv)
    path = make_dataset(args.out, args.meta_classes, args.per_label, args.height, args.width,
                        args.separation, seed=args.seed, size_jitter=args.size_jitter)
    print(path)


if __name__ == "__main__":
    main()

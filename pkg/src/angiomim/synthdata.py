"""Synthetic angiogram phantoms with exact ground-truth vessel masks.

Each phantom is a smooth background with one or more branching trees of dark
tubes (Gaussian cross-section) plus white noise.  The ground truth marks the
pixels where the noiseless dip exceeds half of its peak depth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import save_image, save_mask
from .validation import ParameterError

__all__ = [
    "PhantomConfig",
    "GenerationError",
    "generate_phantom",
    "make_benchmark",
    "config_hash",
    "tree_segments",
    "rasterize",
]

MIN_VESSEL_FRACTION = 0.01
MAX_VESSEL_FRACTION = 0.30
MAX_RETRIES = 10
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    n_trees: int = 1
    branch_depth: int = 3
    tube_width_range: tuple = (2.0, 6.0)
    vessel_contrast: float = 0.4
    noise_sigma: float = 0.02
    background_gradient: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tube_width_range
        if not 0 < lo <= hi:
            raise ParameterError(f"tube widths must be positive and ordered, got {self.tube_width_range}")
        if not 0.0 <= self.vessel_contrast <= 1.0:
            raise ParameterError("vessel_contrast must lie in [0, 1]")
        if self.size < 8 or self.n_trees < 1 or self.branch_depth < 1:
            raise ParameterError("size >= 8, n_trees >= 1 and branch_depth >= 1 are required")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be nonnegative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tube_width_range"] = [float(v) for v in self.tube_width_range]
        return d


def config_hash(cfg: PhantomConfig, **extra) -> str:
    payload = dict(cfg.to_dict(), **extra)
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------ geometry


def _perturbed_polyline(a, b, rng, levels=2, amount=0.15):
    """Recursive midpoint displacement perpendicular to the chord."""
    pts = [np.asarray(a, float), np.asarray(b, float)]
    for _ in range(levels):
        out = [pts[0]]
        for p, q in zip(pts[:-1], pts[1:]):
            d = q - p
            length = math.hypot(*d)
            normal = np.array([-d[1], d[0]]) / max(length, 1e-12)
            mid = 0.5 * (p + q) + normal * rng.normal(0.0, amount * length)
            out.extend([mid, q])
        pts = out
    return pts


def tree_segments(cfg: PhantomConfig, rng: np.random.Generator):
    """Return a list of (p, q, width) segments, coordinates as (x, y)."""
    size = cfg.size
    lo, hi = cfg.tube_width_range
    segments = []

    def grow(start, angle, length, width, depth):
        end = start + length * np.array([math.cos(angle), math.sin(angle)])
        end = np.clip(end, 0.0, size - 1.0)
        pts = _perturbed_polyline(start, end, rng)
        for p, q in zip(pts[:-1], pts[1:]):
            segments.append((p, q, width))
        if depth <= 1:
            return
        for sign in (-1.0, 1.0):
            spread = math.radians(rng.uniform(20.0, 50.0))
            child_w = max(lo, width * rng.uniform(0.6, 0.85))
            grow(end, angle + sign * spread, length * rng.uniform(0.55, 0.75), child_w, depth - 1)

    for _ in range(cfg.n_trees):
        # root enters from a random border side heading roughly inward
        side = rng.integers(4)
        t = rng.uniform(0.25, 0.75) * (size - 1)
        start, heading = {
            0: (np.array([t, 0.0]), math.pi / 2),
            1: (np.array([size - 1.0, t]), math.pi),
            2: (np.array([t, size - 1.0]), -math.pi / 2),
            3: (np.array([0.0, t]), 0.0),
        }[int(side)]
        angle = heading + math.radians(rng.uniform(-25.0, 25.0))
        width = rng.uniform(0.5 * (lo + hi), hi)
        grow(start, angle, rng.uniform(0.35, 0.5) * size, width, cfg.branch_depth)
    return segments


def _segment_distance(xx, yy, p, q):
    d = q - p
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(xx - p[0], yy - p[1])
    t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))


def rasterize(segments, size: int, contrast: float) -> np.ndarray:
    """Noiseless dip depth per pixel: max over segments of a Gaussian profile
    whose full width at half maximum equals the segment width."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dip = np.zeros((size, size))
    for p, q, width in segments:
        s = width * FWHM_TO_SIGMA
        dist = _segment_distance(xx, yy, p, q)
        np.maximum(dip, contrast * np.exp(-0.5 * (dist / s) ** 2), out=dip)
    return dip


def _background(cfg: PhantomConfig, rng):
    size = cfg.size
    theta = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    level = rng.uniform(0.6, 0.7)
    return level + cfg.background_gradient * (math.cos(theta) * xx + math.sin(theta) * yy)


def generate_phantom(cfg: PhantomConfig, index: int = 0):
    """Return ``(image, gt_mask)`` for ``cfg`` and a per-image ``index``.

    Raises ``GenerationError`` if ten consecutive draws produce a vessel
    fraction outside [0.01, 0.30].
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    fraction = 0.0
    for _ in range(MAX_RETRIES):
        segments = tree_segments(cfg, rng)
        dip = rasterize(segments, cfg.size, cfg.vessel_contrast)
        gt = (dip > 0.5 * cfg.vessel_contrast).astype(np.uint8) if cfg.vessel_contrast > 0 else np.zeros_like(dip, np.uint8)
        fraction = gt.mean()
        if MIN_VESSEL_FRACTION <= fraction <= MAX_VESSEL_FRACTION:
            break
    else:
        raise GenerationError(
            f"vessel fraction {fraction:.4f} outside [{MIN_VESSEL_FRACTION}, {MAX_VESSEL_FRACTION}] "
            f"after {MAX_RETRIES} attempts"
        )
    img = _background(cfg, rng) - dip
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), gt


def make_benchmark(out_dir, seed: int = 7, n_train: int = 64, n_test: int = 16, cfg: PhantomConfig | None = None) -> dict:
    """Write ``train/`` and ``test/`` splits of PGM images and masks plus ``manifest.json``.

    Image ``i`` of the test split uses generator index ``n_train + i`` so the
    splits never share a phantom.
    """
    if n_train < 1 or n_test < 1:
        raise ParameterError("n_train and n_test must be at least 1")
    cfg = dataclasses.replace(cfg or PhantomConfig(), seed=seed)
    manifest = {
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg, n_train=n_train, n_test=n_test),
        "files": {"train": [], "test": []},
    }
    for split, offset, count in (("train", 0, n_train), ("test", n_train, n_test)):
        img_dir = os.path.join(out_dir, split, "images")
        mask_dir = os.path.join(out_dir, split, "masks")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        for i in range(count):
            name = f"{split}_{i:04d}.pgm"
            img, gt = generate_phantom(cfg, index=offset + i)
            save_image(os.path.join(img_dir, name), img)
            save_mask(os.path.join(mask_dir, name), gt)
            manifest["files"][split].append(name)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest

"""Unsupervised vessel extraction: Hessian vesselness, percentile threshold, seeded growth."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imagecore import eig2x2_symmetric, gaussian_smooth, hessian, percentile
from .validation import ParameterError, check_image, check_mask

__all__ = [
    "FrangiConfig",
    "GrowthResult",
    "ExtractionResult",
    "vesselness_at_scale",
    "multiscale_vesselness",
    "adaptive_threshold",
    "select_seeds",
    "region_grow",
    "extract_anatomy",
    "extract_anatomy_details",
    "FrangiExtractor",
]

POLARITIES = ("dark", "bright")
# "cross": |l2|, the curvature across the vessel.  "along": |l1|, the
# smaller-magnitude eigenvalue, which vanishes on straight tubes.
RESPONSES = ("cross", "along")


@dataclass(frozen=True)
class FrangiConfig:
    scales: tuple = (1.0, 2.0, 3.0, 4.0)
    alpha: float = 92.0
    polarity: str = "dark"
    connectivity: int = 8
    multi_seed: int = 1
    response: str = "cross"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or min(self.scales) <= 0:
            raise ParameterError(f"scales must be nonempty and positive, got {self.scales}")
        if not 0.0 <= self.alpha <= 100.0:
            raise ParameterError(f"alpha must lie in [0, 100], got {self.alpha}")
        if self.polarity not in POLARITIES:
            raise ParameterError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if self.connectivity not in (4, 8):
            raise ParameterError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.multi_seed < 1:
            raise ParameterError("multi_seed must be >= 1")
        if self.response not in RESPONSES:
            raise ParameterError(f"response must be one of {RESPONSES}, got {self.response!r}")


def vesselness_at_scale(img, sigma: float, polarity: str = "dark", response: str = "cross") -> np.ndarray:
    """Hessian ridge response of the image smoothed at ``sigma``.

    With eigenvalues ordered |l1| <= |l2|, pixels where l2 >= 0 score 0;
    elsewhere the score is |l2| (``response="cross"``) or |l1|
    (``response="along"``).  Dark vessels are handled by negating intensities
    first, which turns them into bright ridges with negative cross curvature.
    """
    img = check_image(img)
    if polarity not in POLARITIES:
        raise ParameterError(f"unknown polarity {polarity!r}")
    if response not in RESPONSES:
        raise ParameterError(f"unknown response {response!r}")
    if polarity == "dark":
        img = -img
    h = hessian(gaussian_smooth(img, sigma))
    l1, l2 = eig2x2_symmetric(h.dxx, h.dxy, h.dyy)
    score = np.abs(l2) if response == "cross" else np.abs(l1)
    return np.where(l2 < 0, score, 0.0)


def multiscale_vesselness(img, cfg: FrangiConfig = FrangiConfig()) -> np.ndarray:
    img = check_image(img)
    out = vesselness_at_scale(img, cfg.scales[0], cfg.polarity, cfg.response)
    for sigma in cfg.scales[1:]:
        np.maximum(out, vesselness_at_scale(img, sigma, cfg.polarity, cfg.response), out=out)
    return out


def adaptive_threshold(v, alpha: float = 92.0) -> tuple[np.ndarray, float]:
    """Binary map of responses >= the nearest-rank ``alpha`` percentile.

    Returns ``(mask, threshold)``.
    """
    v = np.asarray(v, dtype=np.float64)
    t = percentile(v, alpha)
    return (v >= t).astype(np.uint8), t


def select_seeds(v, k: int = 1) -> list[tuple[int, int]]:
    """The ``k`` strongest pixels as (row, col); ties go to the smaller row-major index."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    # lexsort: last key is primary
    order = np.lexsort((np.arange(flat.size), -flat))[:k]
    return [tuple(int(c) for c in np.unravel_index(i, v.shape)) for i in order]


class GrowthResult(NamedTuple):
    mask: np.ndarray
    skipped_seeds: int
    no_growth: bool


_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def region_grow(threshold_mask, seeds, connectivity: int = 8) -> GrowthResult:
    """Breadth-first union of the components of ``threshold_mask`` that contain a seed."""
    mask = check_mask(threshold_mask)
    if connectivity not in _OFFSETS:
        raise ParameterError("connectivity must be 4 or 8")
    h, w = mask.shape
    out = np.zeros_like(mask)
    skipped = 0
    queue = deque()
    for r, c in seeds:
        if not (0 <= r < h and 0 <= c < w):
            raise ParameterError(f"seed {(r, c)} outside {mask.shape}")
        if not mask[r, c]:
            skipped += 1
            continue
        if not out[r, c]:
            out[r, c] = 1
            queue.append((r, c))
    offsets = _OFFSETS[connectivity]
    while queue:
        r, c = queue.popleft()
        for dr, dc in offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not out[rr, cc]:
                out[rr, cc] = 1
                queue.append((rr, cc))
    return GrowthResult(out, skipped, skipped == len(seeds))


class ExtractionResult(NamedTuple):
    mask: np.ndarray
    vesselness: np.ndarray
    threshold: float
    seeds: list
    no_growth: bool


def extract_anatomy_details(img, cfg: FrangiConfig = FrangiConfig()) -> ExtractionResult:
    img = check_image(img)
    v = multiscale_vesselness(img, cfg)
    if not np.any(v > 0):
        return ExtractionResult(np.zeros(img.shape, np.uint8), v, 0.0, [], True)
    binary, t = adaptive_threshold(v, cfg.alpha)
    seeds = select_seeds(v, cfg.multi_seed)
    grown = region_grow(binary, seeds, cfg.connectivity)
    return ExtractionResult(grown.mask, v, t, seeds, grown.no_growth)


def extract_anatomy(img, cfg: FrangiConfig = FrangiConfig()) -> np.ndarray:
    """Vessel mask of ``img``; an all-zero vesselness map yields an empty mask."""
    return extract_anatomy_details(img, cfg).mask


class FrangiExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a stack of images to vessel masks.

    Parameters mirror :class:`FrangiConfig`.  ``fit`` only validates the
    parameters so the extractor can sit inside a ``Pipeline``.
    """

    def __init__(self, scales=(1.0, 2.0, 3.0, 4.0), alpha=92.0, polarity="dark", connectivity=8, multi_seed=1,
                 response="cross"):
        self.scales = scales
        self.alpha = alpha
        self.polarity = polarity
        self.connectivity = connectivity
        self.multi_seed = multi_seed
        self.response = response

    def _config(self) -> FrangiConfig:
        return FrangiConfig(self.scales, self.alpha, self.polarity, self.connectivity, self.multi_seed, self.response)

    def fit(self, X, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self._config()
        images = np.asarray(X, dtype=np.float64)
        if images.ndim == 2:
            return extract_anatomy(images, cfg)
        return np.stack([extract_anatomy(im, cfg) for im in images])

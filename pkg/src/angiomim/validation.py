"""Input checks shared by every module, in the spirit of sklearn's ``check_array``."""

from __future__ import annotations

import numpy as np


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent."""


class ModelStateError(RuntimeError):
    """An operation is not allowed in the model's current state (e.g. frozen)."""


class ConfigError(ValueError):
    """A run configuration failed validation; ``problems`` lists every field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def check_image(img, min_size: int = 3) -> np.ndarray:
    """Return ``img`` as a finite 2-D float64 array of at least ``min_size`` per side."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ShapeError(f"image {arr.shape} smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("image contains NaN or Inf")
    return arr


def check_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype != np.uint8 or arr.max(initial=0) > 1:
        if not np.all((arr == 0) | (arr == 1)):
            raise ParameterError("mask values must be 0 or 1")
        arr = arr.astype(np.uint8)
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def check_rng(seed) -> np.random.Generator:
    """Accept None, an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

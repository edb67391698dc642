"""Anatomy-guided patch masking.

Vessel masks are tiled into ``P x P`` patches (row-major patch order).  The
share of vessel pixels in each patch defines a sampling distribution; at epoch
``e`` a fraction ``beta_e`` of the masked patches is drawn from it and the rest
uniformly at random.  ``beta_e`` moves linearly from ``beta0`` to ``betaE``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import ParameterError, ShapeError, check_mask, check_rng

__all__ = [
    "PatchGrid",
    "AnatomyDistribution",
    "Schedule",
    "MaskPlan",
    "round_half_up",
    "patch_grid",
    "patchify",
    "unpatchify",
    "patch_vessel_counts",
    "anatomy_distribution",
    "beta_at",
    "sample_mask_plan",
    "epoch_plans",
    "MaskingStats",
    "schedule_statistics",
    "child_seed",
    "masked_vessel_proportion",
    "cumulative_mask_ratio",
]


def round_half_up(x: float) -> int:
    # The tiny slack keeps products such as 0.5 * 0.7 * 49 from rounding
    # differently depending on the order the factors were multiplied.
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


def patch_grid(shape, patch_size: int) -> PatchGrid:
    h, w = shape
    if patch_size < 1:
        raise ParameterError("patch size must be >= 1")
    if h % patch_size or w % patch_size or h == 0 or w == 0:
        raise ShapeError(f"image {h}x{w} does not tile exactly by patch size {patch_size}")
    return PatchGrid(patch_size, h // patch_size, w // patch_size)


def patchify(arr, patch_size: int) -> np.ndarray:
    """(H, W) -> (N, P*P), patches in row-major order, pixels row-major inside."""
    arr = np.asarray(arr)
    g = patch_grid(arr.shape, patch_size)
    p = patch_size
    return arr.reshape(g.grid_h, p, g.grid_w, p).transpose(0, 2, 1, 3).reshape(g.n, p * p)


def unpatchify(patches, grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    patches = np.asarray(patches)
    return patches.reshape(grid.grid_h, grid.grid_w, p, p).transpose(0, 2, 1, 3).reshape(grid.grid_h * p, grid.grid_w * p)


def patch_vessel_counts(mask, patch_size: int) -> np.ndarray:
    return patchify(check_mask(mask), patch_size).sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class AnatomyDistribution:
    probs: np.ndarray
    vessel_counts: np.ndarray
    total_vessel_pixels: int

    @property
    def n(self) -> int:
        return int(self.probs.size)


def anatomy_distribution(counts) -> AnatomyDistribution:
    """Normalize per-patch vessel counts; uniform when there are no vessel pixels."""
    counts = np.asarray(counts, dtype=np.int64).ravel()
    if counts.size == 0:
        raise ParameterError("counts must be nonempty")
    if np.any(counts < 0):
        raise ParameterError("counts must be nonnegative")
    total = int(counts.sum())
    if total == 0:
        probs = np.full(counts.size, 1.0 / counts.size)
    else:
        probs = counts / total
    return AnatomyDistribution(probs, counts, total)


@dataclass(frozen=True)
class Schedule:
    beta0: float = 0.0
    betaE: float = 0.5
    epochs: int = 200

    def __post_init__(self):
        if not (0.0 <= self.beta0 <= 1.0 and 0.0 <= self.betaE <= 1.0):
            raise ParameterError("beta0 and betaE must lie in [0, 1]")
        if self.epochs < 1:
            raise ParameterError("epochs must be a positive integer")


def beta_at(s: Schedule, e: float) -> float:
    """Linear ramp: beta0 at e = 0, betaE at e = E."""
    if not 0 <= e <= s.epochs:
        raise ParameterError(f"epoch {e} outside [0, {s.epochs}]")
    return s.beta0 + (e / s.epochs) * (s.betaE - s.beta0)


@dataclass(frozen=True)
class MaskPlan:
    n: int
    masked: frozenset
    guided: frozenset
    random: frozenset
    gamma: float
    epoch: int = 0

    def masked_array(self) -> np.ndarray:
        """Boolean length-N indicator of masked patches."""
        out = np.zeros(self.n, dtype=bool)
        out[list(self.masked)] = True
        return out


def child_seed(master: int, epoch: int, image_index: int) -> np.random.SeedSequence:
    """Per-(epoch, image) stream, independent of execution order."""
    return np.random.SeedSequence([int(master), int(epoch), int(image_index)])


def _weighted_draw(weights: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential draw without replacement, renormalizing after each pick."""
    w = np.array(weights, dtype=np.float64)
    picks = []
    for _ in range(k):
        total = w.sum()
        if total <= 0:
            break
        cdf = np.cumsum(w)
        u = rng.random() * cdf[-1]
        i = min(int(np.searchsorted(cdf, u, side="right")), w.size - 1)
        # u can round up onto a zero-weight tail
        while w[i] == 0:
            i -= 1
        picks.append(i)
        w[i] = 0.0
    return picks


def sample_mask_plan(f: AnatomyDistribution, gamma: float, beta_e: float, rng=None, epoch: int = 0) -> MaskPlan:
    """Choose ``round(gamma*N)`` patches, ``round(beta_e*gamma*N)`` of them by ``f``.

    Guided picks that cannot be made because too few patches have positive
    probability are moved to the uniform pool.
    """
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"masking ratio gamma must lie in (0, 1), got {gamma}")
    if not 0.0 <= beta_e <= 1.0:
        raise ParameterError(f"beta_e must lie in [0, 1], got {beta_e}")
    rng = check_rng(rng)
    n = f.n
    k_total = round_half_up(gamma * n)
    if k_total > n:
        raise ParameterError("round(gamma * N) exceeds N")
    k_guided = min(round_half_up(beta_e * gamma * n), k_total)

    guided = _weighted_draw(f.probs, k_guided, rng)
    remaining = np.setdiff1d(np.arange(n), np.asarray(guided, dtype=np.int64), assume_unique=True)
    k_random = k_total - len(guided)
    random = rng.choice(remaining, size=k_random, replace=False).tolist() if k_random else []
    g, r = frozenset(guided), frozenset(int(i) for i in random)
    return MaskPlan(n, g | r, g, r, gamma, epoch)


def masked_vessel_proportion(plan: MaskPlan, counts) -> float:
    """Fraction of masked patches that contain at least one vessel pixel."""
    counts = np.asarray(counts)
    if counts.size != plan.n:
        raise ShapeError(f"counts length {counts.size} != N = {plan.n}")
    if not plan.masked:
        raise ParameterError("plan masks no patches")
    idx = np.fromiter(plan.masked, dtype=np.int64)
    return float(np.count_nonzero(counts[idx] > 0) / idx.size)


def cumulative_mask_ratio(plans) -> np.ndarray:
    """Per-patch fraction of the given plans (one per epoch) that mask it."""
    plans = list(plans)
    if not plans:
        raise ParameterError("no plans given")
    n = plans[0].n
    if any(p.n != n for p in plans):
        raise ShapeError("plans disagree on N")
    hits = np.zeros(n)
    for p in plans:
        hits += p.masked_array()
    return hits / len(plans)


def epoch_plans(dists, gamma: float, schedule: Schedule, seed: int, epoch: int) -> list:
    """One plan per image for ``epoch``, each from its own child stream."""
    beta = beta_at(schedule, epoch)
    return [sample_mask_plan(f, gamma, beta, child_seed(seed, epoch, i), epoch=epoch) for i, f in enumerate(dists)]


@dataclass(frozen=True)
class MaskingStats:
    betas: list  # beta_e per epoch
    proportions: list  # mean masked_vessel_proportion over images, per epoch
    cumulative: np.ndarray  # (n_images, N) share of epochs masking each patch


def schedule_statistics(masks, patch_size: int, gamma: float, schedule: Schedule, seed: int = 0) -> MaskingStats:
    """Replay the plans a pre-training run with the same settings would draw."""
    counts = [patch_vessel_counts(m, patch_size) for m in masks]
    if not counts:
        raise ParameterError("no masks given")
    dists = [anatomy_distribution(c) for c in counts]
    hits = np.zeros((len(dists), dists[0].n))
    betas, props = [], []
    for e in range(schedule.epochs):
        plans = epoch_plans(dists, gamma, schedule, seed, e)
        betas.append(beta_at(schedule, e))
        props.append(float(np.mean([masked_vessel_proportion(p, c) for p, c in zip(plans, counts)])))
        for i, p in enumerate(plans):
            hits[i] += p.masked_array()
    return MaskingStats(betas, props, hits / schedule.epochs)

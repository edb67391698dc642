"""Desk-scale masked image modeling with an anatomical consistency term.

The model is deliberately tiny so every gradient can be checked by finite
differences:

* ``embed``: affine map of each flattened ``P x P`` patch to ``d`` features;
* ``context``: linear map applied to the mean embedding of the visible patches;
* decoder: for each masked patch, ``[mask_token + pos_i, context]`` goes through
  an affine layer with ReLU (``h`` units) and an affine output layer of ``P*P``
  pixels.  ``pos_i`` is a fixed 2-D sine-cosine position code.

The reconstructed image keeps the visible patches of the input verbatim and
fills the masked ones with decoder output.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import masking
from .masking import MaskPlan, PatchGrid, Schedule, patch_grid, patchify, unpatchify
from .metrics import cldice
from .segmentor import EPS, SegmentorModel, bce, seg_backward, seg_forward, seg_forward_cached
from .validation import (
    ConfigError,
    ModelStateError,
    ParameterError,
    ShapeError,
    check_image,
    check_mask,
    check_rng,
)

__all__ = [
    "MIM_PARAM_NAMES",
    "MimModel",
    "LossReport",
    "LossConfig",
    "PretrainResult",
    "init_mim",
    "zero_mim",
    "position_codes",
    "mim_forward",
    "loss_rec",
    "loss_wrec",
    "loss_cons",
    "loss_train",
    "instance_loss",
    "pretrain",
    "encode_features",
    "LinearProbe",
    "probe_train_eval",
    "save_mim",
    "load_mim",
    "MaskedAutoencoder",
]

log = logging.getLogger(__name__)

MIM_PARAM_NAMES = ("we", "be", "mask_token", "wc", "wh", "bh", "wo", "bo")
METRICS = ("ce", "l1", "dice")
DICE_SMOOTH = 1.0
MAGIC = b"AMMIM001"


@dataclass
class MimModel:
    params: dict
    patch_size: int

    @property
    def embed_dim(self) -> int:
        return int(self.params["be"].size)

    @property
    def hidden_dim(self) -> int:
        return int(self.params["bh"].size)

    def copy(self) -> "MimModel":
        return MimModel({k: v.copy() for k, v in self.params.items()}, self.patch_size)


def _mim_shapes(p: int, d: int, h: int):
    q = p * p
    return {
        "we": (d, q),
        "be": (d,),
        "mask_token": (d,),
        "wc": (d, d),
        "wh": (h, 2 * d),
        "bh": (h,),
        "wo": (q, h),
        "bo": (q,),
    }


def zero_mim(patch_size: int = 8, embed_dim: int = 32, hidden_dim: int = 64) -> MimModel:
    if embed_dim % 4:
        raise ParameterError("embed_dim must be divisible by 4 for the position code")
    return MimModel({k: np.zeros(s) for k, s in _mim_shapes(patch_size, embed_dim, hidden_dim).items()}, patch_size)


def init_mim(patch_size: int = 8, embed_dim: int = 32, hidden_dim: int = 64, rng=None) -> MimModel:
    rng = check_rng(rng)
    m = zero_mim(patch_size, embed_dim, hidden_dim)
    q, d, h = patch_size * patch_size, embed_dim, hidden_dim
    m.params["we"] = rng.normal(0.0, 1.0 / math.sqrt(q), (d, q))
    m.params["mask_token"] = rng.normal(0.0, 0.02, d)
    m.params["wc"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
    m.params["wh"] = rng.normal(0.0, math.sqrt(2.0 / (2 * d)), (h, 2 * d))
    m.params["wo"] = rng.normal(0.0, 1.0 / math.sqrt(h), (q, h))
    return m


def position_codes(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine codes, half of the dimensions per grid axis."""
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / max(quarter, 1))
    rows, cols = np.divmod(np.arange(grid.n), grid.grid_w)

    def code(pos):
        ang = np.outer(pos, omega)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([code(rows), code(cols)], axis=1)


# ------------------------------------------------------------------ forward



@dataclass
class ForwardResult:
    recon: np.ndarray  # reconstructed image I'
    patches: np.ndarray  # (N, P*P) original patches
    pred: np.ndarray  # (n_masked, P*P) decoder output, rows follow ``masked_idx``
    masked_idx: np.ndarray
    visible_idx: np.ndarray
    grid: PatchGrid
    cache: dict = field(repr=False, default_factory=dict)


def _check_plan(img, model: MimModel, plan: MaskPlan) -> PatchGrid:
    grid = patch_grid(img.shape, model.patch_size)
    if plan.n != grid.n:
        raise ShapeError(f"plan covers {plan.n} patches but the image has {grid.n}")
    return grid


def mim_forward(model: MimModel, img, plan: MaskPlan) -> ForwardResult:
    img = check_image(img, min_size=1)
    grid = _check_plan(img, model, plan)
    p = model.params
    x = patchify(img, model.patch_size)
    masked = np.array(sorted(plan.masked), dtype=np.int64)
    visible = np.setdiff1d(np.arange(grid.n), masked)
    d = model.embed_dim

    if visible.size:
        emb = x[visible] @ p["we"].T + p["be"]
        mean_emb = emb.mean(axis=0)
    else:
        mean_emb = np.zeros(d)
    ctx = p["wc"] @ mean_emb

    recon_patches = x.copy()
    cache = {"x": x, "mean_emb": mean_emb}
    if masked.size:
        pos = position_codes(grid, d)[masked]
        u = np.concatenate([p["mask_token"] + pos, np.broadcast_to(ctx, (masked.size, d))], axis=1)
        a = u @ p["wh"].T + p["bh"]
        hid = np.maximum(a, 0.0)
        pred = hid @ p["wo"].T + p["bo"]
        recon_patches[masked] = pred
        cache.update(u=u, a=a, hid=hid)
    else:
        pred = np.zeros((0, x.shape[1]))
    recon = unpatchify(recon_patches, grid)
    return ForwardResult(recon, x, pred, masked, visible, grid, cache)


def mim_backward(model: MimModel, fwd: ForwardResult, dpred: np.ndarray) -> dict:
    """Parameter gradients given ``dL/dpred`` (rows aligned with ``fwd.masked_idx``)."""
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    if fwd.masked_idx.size == 0:
        return grads
    c = fwd.cache
    d = model.embed_dim
    grads["wo"] = dpred.T @ c["hid"]
    grads["bo"] = dpred.sum(axis=0)
    da = (dpred @ p["wo"]) * (c["a"] > 0)
    grads["wh"] = da.T @ c["u"]
    grads["bh"] = da.sum(axis=0)
    du = da @ p["wh"]
    grads["mask_token"] = du[:, :d].sum(axis=0)
    dctx = du[:, d:].sum(axis=0)
    grads["wc"] = np.outer(dctx, c["mean_emb"])
    nv = fwd.visible_idx.size
    if nv:
        dmean = p["wc"].T @ dctx
        grads["we"] = np.outer(dmean, c["x"][fwd.visible_idx].sum(axis=0) / nv)
        grads["be"] = dmean
    return grads


# ------------------------------------------------------------------- losses


def _masked_targets(fwd: ForwardResult) -> np.ndarray:
    return fwd.patches[fwd.masked_idx]


def loss_rec(original_patches, pred_patches, plan_or_idx=None):
    """Mean over masked patches of the per-patch mean squared error.

    ``original_patches`` and ``pred_patches`` hold the masked patches only,
    row-aligned.  Returns ``(loss, dloss/dpred)``.
    """
    orig = np.asarray(original_patches, dtype=np.float64)
    pred = np.asarray(pred_patches, dtype=np.float64)
    if orig.shape[0] == 0:
        raise ParameterError("reconstruction loss needs at least one masked patch")
    diff = pred - orig
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def loss_wrec(original_patches, pred_patches, weights):
    """Per-patch MSE weighted by the anatomy distribution of the masked patches.

    ``weights`` are the distribution values of the masked patches (row-aligned);
    they are renormalized to sum 1, or replaced by uniform weights if they sum
    to zero.
    """
    orig = np.asarray(original_patches, dtype=np.float64)
    pred = np.asarray(pred_patches, dtype=np.float64)
    if orig.shape[0] == 0:
        raise ParameterError("reconstruction loss needs at least one masked patch")
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    w = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
    diff = pred - orig
    per_patch = np.mean(diff**2, axis=1)
    grad = 2.0 * diff * (w / diff.shape[1])[:, None]
    return float(w @ per_patch), grad


def consistency_metric(prob, target, metric: str = "ce"):
    """Loss between segmentor probabilities and hard targets, with d/dprob."""
    n = prob.size
    if metric == "ce":
        return bce(prob, target)
    if metric == "l1":
        diff = prob - target
        return float(np.abs(diff).mean()), np.sign(diff) / n
    if metric == "dice":
        inter = float((prob * target).sum())
        denom = float(prob.sum() + target.sum()) + DICE_SMOOTH
        num = 2.0 * inter + DICE_SMOOTH
        loss = 1.0 - num / denom
        dprob = -(2.0 * target * denom - num) / denom**2
        return loss, dprob
    raise ParameterError(f"unknown metric {metric!r}; choose from {METRICS}")


def hard_targets(seg: SegmentorModel, img) -> np.ndarray:
    # p == 0.5 exactly maps to background
    return (seg_forward(seg, img) > 0.5).astype(np.float64)


def loss_cons(seg: SegmentorModel, img, recon, metric: str = "ce", targets=None):
    """Segmentor agreement between the original and the reconstruction.

    Targets are the hard labels of ``seg(img)`` (no gradient); predictions are
    ``seg(recon)``.  Returns ``(loss, dloss/drecon)``.
    """
    if not seg.frozen:
        raise ModelStateError("consistency loss requires a frozen segmentor")
    recon = check_image(recon, min_size=3)
    if targets is None:
        targets = hard_targets(seg, img)
    if targets.shape != recon.shape:
        raise ShapeError("image and reconstruction differ in shape")
    prob, cache = seg_forward_cached(seg, recon)
    loss, dprob = consistency_metric(prob, targets, metric)
    _, dx = seg_backward(seg, cache, dprob * prob * (1.0 - prob), need_params=False)
    return loss, dx


@dataclass(frozen=True)
class LossReport:
    l_rec: float
    l_cons: float
    l_train: float
    l_wrec: float | None = None


def loss_train(l_rec: float, l_cons: float | None = None, l_wrec: float | None = None) -> LossReport:
    """Sum the active components: rec + cons, or rec + weighted rec."""
    if l_wrec is not None:
        return LossReport(l_rec, 0.0, l_rec + l_wrec, l_wrec)
    cons = 0.0 if l_cons is None else l_cons
    return LossReport(l_rec, cons, l_rec + cons)


@dataclass(frozen=True)
class LossConfig:
    use_cons: bool = True
    weighted_rec: bool = False
    metric: str = "ce"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError(f"metric must be one of {METRICS}")
        if self.use_cons and self.weighted_rec:
            raise ParameterError("the weighted reconstruction variant replaces the consistency loss; enable one")


def instance_loss(model: MimModel, img, plan: MaskPlan, losses: LossConfig = LossConfig(), seg=None,
                  dist=None, targets=None, need_grad: bool = True):
    """Forward, losses and parameter gradients for one (image, plan) pair."""
    fwd = mim_forward(model, img, plan)
    orig = _masked_targets(fwd)
    l_rec, dpred = loss_rec(orig, fwd.pred)
    l_cons = l_wrec = None
    if losses.weighted_rec:
        if dist is None:
            raise ParameterError("weighted reconstruction needs the anatomy distribution")
        l_wrec, dw = loss_wrec(orig, fwd.pred, dist.probs[fwd.masked_idx])
        dpred = dpred + dw
    elif losses.use_cons:
        if seg is None:
            raise ParameterError("consistency loss needs a segmentor")
        l_cons, dimg = loss_cons(seg, img, fwd.recon, losses.metric, targets)
        dpred = dpred + patchify(dimg, model.patch_size)[fwd.masked_idx]
    report = loss_train(l_rec, l_cons, l_wrec)
    grads = mim_backward(model, fwd, dpred) if need_grad else None
    return report, grads, fwd


# ---------------------------------------------------------------- training


@dataclass
class PretrainResult:
    model: MimModel
    reports: list  # per epoch, LossReport averaged over images
    step_reports: list  # every per-image LossReport, in processing order
    masked_vessel_proportion: list  # per epoch mean over images
    cumulative_ratio: np.ndarray  # (n_images, N)


def pretrain(images, masks, *, patch_size=8, embed_dim=32, hidden_dim=64, gamma=0.5,
             schedule: Schedule = Schedule(0.0, 0.5, 200), lr=0.01, batch_size=8,
             losses: LossConfig = LossConfig(), segmentor: SegmentorModel | None = None,
             seed=0, workers=1, init: MimModel | None = None) -> PretrainResult:
    """Mini-batch SGD on the combined objective.

    At epoch ``e`` (0-based) every image gets a fresh plan drawn with
    ``beta_at(schedule, e)`` from the child stream ``(seed, e, image index)``.
    Batches follow image order; per-image gradients are summed in that order,
    so results do not depend on ``workers``.
    """
    images = [check_image(im, min_size=1) for im in images]
    masks = [check_mask(m) for m in masks]
    problems = []
    if not images or len(images) != len(masks):
        problems.append("need a nonempty, paired list of images and vessel masks")
    if not 0.0 < gamma < 1.0:
        problems.append(f"gamma={gamma} must lie in (0, 1)")
    for im in images[:1]:
        if im.shape[0] % patch_size or im.shape[1] % patch_size:
            problems.append(f"patch_size={patch_size} does not tile images of shape {im.shape}")
    if losses.use_cons and not losses.weighted_rec:
        if segmentor is None:
            problems.append("consistency loss enabled but no segmentor given")
        elif not segmentor.frozen:
            problems.append("segmentor must be frozen before pre-training")
    if batch_size < 1 or lr <= 0:
        problems.append("batch_size >= 1 and lr > 0 are required")
    if problems:
        raise ConfigError(problems)

    model = init.copy() if init is not None else init_mim(
        patch_size, embed_dim, hidden_dim, np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1])))
    counts = [masking.patch_vessel_counts(m, patch_size) for m in masks]
    dists = [masking.anatomy_distribution(c) for c in counts]
    targets = [None] * len(images)
    if losses.use_cons and not losses.weighted_rec:
        targets = [hard_targets(segmentor, im) for im in images]
    n_img = len(images)
    hits = np.zeros((n_img, dists[0].n))

    reports, step_reports, mvp = [], [], []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for e in range(schedule.epochs):
            beta = masking.beta_at(schedule, e)
            plans = masking.epoch_plans(dists, gamma, schedule, seed, e)
            for i, plan in enumerate(plans):
                hits[i] += plan.masked_array()
            mvp.append(float(np.mean([masking.masked_vessel_proportion(p, c) for p, c in zip(plans, counts)])))

            epoch_reports = []
            for start in range(0, n_img, batch_size):
                idx = range(start, min(start + batch_size, n_img))

                def job(i, model=model, plans=plans):
                    return instance_loss(model, images[i], plans[i], losses, segmentor, dists[i], targets[i])

                results = list(pool.map(job, idx)) if pool else [job(i) for i in idx]
                total = {k: np.zeros_like(v) for k, v in model.params.items()}
                for rep, grads, _ in results:
                    epoch_reports.append(rep)
                    for k in total:
                        total[k] += grads[k]
                scale = lr / len(results)
                for k in total:
                    model.params[k] -= scale * total[k]
            step_reports.extend(epoch_reports)
            reports.append(_mean_report(epoch_reports))
            log.debug("epoch %d beta=%.3f %s", e, beta, reports[-1])
    finally:
        if pool:
            pool.shutdown()
    return PretrainResult(model, reports, step_reports, mvp, hits / schedule.epochs)


def _mean_report(reports) -> LossReport:
    l_rec = float(np.mean([r.l_rec for r in reports]))
    l_cons = float(np.mean([r.l_cons for r in reports]))
    if reports[0].l_wrec is not None:
        l_wrec = float(np.mean([r.l_wrec for r in reports]))
        return LossReport(l_rec, l_cons, l_rec + l_wrec, l_wrec)
    return LossReport(l_rec, l_cons, l_rec + l_cons)


# ----------------------------------------------------------- downstream


def encode_features(model: MimModel, img) -> np.ndarray:
    """Embedding of every patch, shape (N, d)."""
    img = check_image(img, min_size=1)
    x = patchify(img, model.patch_size)
    return x @ model.params["we"].T + model.params["be"]


class LinearProbe(BaseEstimator):
    """Per-patch linear head from frozen features to ``P*P`` pixel logits.

    Features are standardized with training-set statistics before the head,
    the usual parameter-free normalization for linear probing.
    """

    def __init__(self, patch_size=8, epochs=60, lr=0.5, random_state=0):
        self.patch_size = patch_size
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, features, masks):
        feats = [np.asarray(f, dtype=np.float64) for f in features]
        targets = [patchify(check_mask(m), self.patch_size).astype(np.float64) for m in masks]
        if not feats:
            raise ConfigError("linear probe needs a nonempty training split")
        stacked = np.concatenate(feats)
        self.mean_ = stacked.mean(axis=0)
        self.scale_ = stacked.std(axis=0) + 1e-8
        rng = np.random.default_rng(self.random_state)
        q, d = self.patch_size**2, stacked.shape[1]
        self.coef_ = rng.normal(0.0, 0.01, (q, d))
        self.intercept_ = np.zeros(q)
        for _ in range(self.epochs):
            for i in rng.permutation(len(feats)):
                z = (feats[i] - self.mean_) / self.scale_
                prob = 1.0 / (1.0 + np.exp(-(z @ self.coef_.T + self.intercept_)))
                g = (prob - targets[i]) / prob.size
                self.coef_ -= self.lr * g.T @ z
                self.intercept_ -= self.lr * g.sum(axis=0)
        return self

    def decision_function(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.mean_) / self.scale_
        return z @ self.coef_.T + self.intercept_

    def predict_mask(self, features, shape) -> np.ndarray:
        grid = patch_grid(shape, self.patch_size)
        # logit 0 is probability 0.5, which maps to background
        return unpatchify((self.decision_function(features) > 0).astype(np.uint8), grid)


def probe_train_eval(extractor, train, test, seed=0, patch_size=8, epochs=60, lr=0.5):
    """Fit a linear probe on ``extractor(img)`` features and score the test split.

    ``train`` and ``test`` are ``(images, gt_masks)`` pairs.  Returns a dict with
    mean ``dsc`` and ``cldice`` plus the per-image ``reports`` and ``predictions``.
    """
    (tr_img, tr_gt), (te_img, te_gt) = train, test
    if len(tr_img) == 0 or len(te_img) == 0:
        raise ConfigError("train and test splits must both be nonempty")
    probe = LinearProbe(patch_size, epochs, lr, seed).fit([extractor(im) for im in tr_img], tr_gt)
    preds = [probe.predict_mask(extractor(im), np.shape(im)) for im in te_img]
    reports = [cldice(p, g) for p, g in zip(preds, te_gt)]
    return {
        "dsc": float(np.mean([r.dsc for r in reports])),
        "cldice": float(np.mean([r.cldice for r in reports])),
        "reports": reports,
        "predictions": preds,
    }


# ------------------------------------------------------------- checkpoints


def save_mim(path, model: MimModel) -> None:
    """Magic, (P, d, h) as uint32, then float64 params in ``MIM_PARAM_NAMES`` order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", model.patch_size, model.embed_dim, model.hidden_dim))
        for k in MIM_PARAM_NAMES:
            fh.write(model.params[k].astype("<f8").tobytes())


def load_mim(path) -> MimModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a masked-autoencoder checkpoint")
    p, d, h = struct.unpack_from("<III", data, len(MAGIC))
    flat = np.frombuffer(data, dtype="<f8", offset=len(MAGIC) + 12)
    shapes = _mim_shapes(p, d, h)
    params, pos = {}, 0
    for k in MIM_PARAM_NAMES:
        size = int(np.prod(shapes[k]))
        params[k] = flat[pos : pos + size].reshape(shapes[k]).astype(np.float64)
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: trailing or missing parameter data")
    return MimModel(params, p)


class MaskedAutoencoder(TransformerMixin, BaseEstimator):
    """Estimator facade over :func:`pretrain` and :func:`encode_features`.

    ``fit(X, y)`` takes images ``X`` and vessel masks ``y`` (used for guided
    masking); ``transform`` returns per-patch features of shape (n, N, d).
    """

    def __init__(self, patch_size=8, embed_dim=32, hidden_dim=64, gamma=0.5, beta0=0.0, betaE=0.5,
                 epochs=200, lr=0.01, batch_size=8, use_cons=True, weighted_rec=False, metric="ce",
                 segmentor=None, random_state=0, workers=1):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.gamma = gamma
        self.beta0 = beta0
        self.betaE = betaE
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.use_cons = use_cons
        self.weighted_rec = weighted_rec
        self.metric = metric
        self.segmentor = segmentor
        self.random_state = random_state
        self.workers = workers

    def fit(self, X, y):
        seg = self.segmentor.model_ if hasattr(self.segmentor, "model_") else self.segmentor
        result = pretrain(
            list(X), list(y), patch_size=self.patch_size, embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
            gamma=self.gamma, schedule=Schedule(self.beta0, self.betaE, self.epochs), lr=self.lr,
            batch_size=self.batch_size, losses=LossConfig(self.use_cons, self.weighted_rec, self.metric),
            segmentor=seg, seed=self.random_state, workers=self.workers,
        )
        self.model_ = result.model
        self.history_ = result
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return encode_features(self.model_, X)
        return np.stack([encode_features(self.model_, im) for im in X])

"""A small fully-convolutional vessel segmentor with hand-written gradients.

Architecture: 3x3 conv (1 -> c) -> ReLU -> 3x3 conv (c -> c) -> ReLU ->
1x1 conv (c -> 1) -> logistic.  Convolutions use reflect padding so the output
has the input's size.  The model is trained on pseudo-labels and then frozen;
a frozen model still exposes forward passes and input gradients, which is all
the consistency loss needs.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import ModelStateError, ParameterError, check_image, check_mask, check_rng, check_same_shape

__all__ = [
    "PARAM_NAMES",
    "SegmentorModel",
    "init_segmentor",
    "zero_segmentor",
    "seg_forward",
    "seg_forward_cached",
    "seg_backward",
    "seg_loss",
    "bce",
    "seg_train",
    "freeze",
    "save_segmentor",
    "load_segmentor",
    "Segmentor",
]

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
EPS = 1e-7
MAGIC = b"AMSEG001"


@dataclass
class SegmentorModel:
    params: dict
    frozen: bool = False

    @property
    def channels(self) -> int:
        return int(self.params["b1"].size)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "SegmentorModel":
        return SegmentorModel({k: np.array(v, copy=True) for k, v in self.params.items()}, self.frozen)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])


def _shapes(c: int):
    return {"w1": (c, 1, 3, 3), "b1": (c,), "w2": (c, c, 3, 3), "b2": (c,), "w3": (1, c), "b3": (1,)}


def zero_segmentor(c: int = 8) -> SegmentorModel:
    return SegmentorModel({k: np.zeros(s) for k, s in _shapes(c).items()})


def init_segmentor(c: int = 8, rng=None) -> SegmentorModel:
    """He-normal weights, zero biases."""
    if c < 1:
        raise ParameterError("channel width must be >= 1")
    rng = check_rng(rng)
    model = zero_segmentor(c)
    model.params["w1"] = rng.normal(0.0, np.sqrt(2.0 / 9.0), (c, 1, 3, 3))
    model.params["w2"] = rng.normal(0.0, np.sqrt(2.0 / (9.0 * c)), (c, c, 3, 3))
    model.params["w3"] = rng.normal(0.0, np.sqrt(1.0 / c), (1, c))
    return model


# ------------------------------------------------------------- conv kernels


def _windows(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C, H, W, 3, 3) views over the reflect-padded input."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def _conv3x3(win: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def _fold_reflect(gp: np.ndarray) -> np.ndarray:
    """Adjoint of 1-pixel reflect padding on the last two axes."""
    g = gp[:, 1:-1, :].copy()
    g[:, 1, :] += gp[:, 0, :]
    g[:, -2, :] += gp[:, -1, :]
    out = g[:, :, 1:-1].copy()
    out[:, :, 1] += g[:, :, 0]
    out[:, :, -2] += g[:, :, -1]
    return out


def _conv3x3_backward(g: np.ndarray, win: np.ndarray, w: np.ndarray, need_input: bool = True):
    gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
    gb = g.sum(axis=(1, 2))
    if not need_input:
        return gw, gb, None
    _, h, wd = g.shape
    gp = np.zeros((w.shape[1], h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            gp[:, i : i + h, j : j + wd] += np.tensordot(w[:, :, i, j], g, axes=([0], [0]))
    return gw, gb, _fold_reflect(gp)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ------------------------------------------------------------- forward/back


def seg_forward_cached(model: SegmentorModel, img):
    x = check_image(img)[None]
    p = model.params
    win1 = _windows(x)
    z1 = _conv3x3(win1, p["w1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    win2 = _windows(a1)
    z2 = _conv3x3(win2, p["w2"], p["b2"])
    a2 = np.maximum(z2, 0.0)
    logits = np.tensordot(p["w3"], a2, axes=([1], [0]))[0] + p["b3"][0]
    prob = _sigmoid(logits)
    cache = {"win1": win1, "z1": z1, "win2": win2, "z2": z2, "a2": a2, "prob": prob}
    return prob, cache


def seg_forward(model: SegmentorModel, img) -> np.ndarray:
    """Per-pixel vessel probability, same shape as ``img``."""
    return seg_forward_cached(model, img)[0]


def seg_backward(model: SegmentorModel, cache, dlogits: np.ndarray, need_params: bool = True):
    """Backpropagate ``dL/dlogits``; returns ``(param_grads or None, input_grad)``."""
    p = model.params
    a2 = cache["a2"]
    gw3 = np.tensordot(dlogits, a2, axes=([0, 1], [1, 2]))[None]
    gb3 = np.array([dlogits.sum()])
    ga2 = p["w3"][0][:, None, None] * dlogits[None]
    gz2 = ga2 * (cache["z2"] > 0)
    gw2, gb2, ga1 = _conv3x3_backward(gz2, cache["win2"], p["w2"])
    gz1 = ga1 * (cache["z1"] > 0)
    gw1, gb1, gx = _conv3x3_backward(gz1, cache["win1"], p["w1"])
    grads = None
    if need_params:
        grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return grads, gx[0]


def bce(prob: np.ndarray, target: np.ndarray):
    """Mean clamped binary cross-entropy and its derivative w.r.t. ``prob``."""
    n = prob.size
    pc = np.clip(prob, EPS, 1.0 - EPS)
    loss = -np.mean(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
    inside = (prob > EPS) & (prob < 1.0 - EPS)
    dprob = np.where(inside, (-target / pc + (1.0 - target) / (1.0 - pc)) / n, 0.0)
    return float(loss), dprob


def seg_loss(model: SegmentorModel, img, target):
    """Pixel-mean BCE against ``target`` with gradients for parameters and input."""
    img = check_image(img)
    target = check_mask(target).astype(np.float64)
    check_same_shape(img, target, "image and target")
    prob, cache = seg_forward_cached(model, img)
    loss, dprob = bce(prob, target)
    grads, gx = seg_backward(model, cache, dprob * prob * (1.0 - prob))
    return loss, grads, gx


def seg_train(model: SegmentorModel, images, targets, epochs: int = 200, lr: float = 0.05, rng=None):
    """Per-image SGD with a fixed step; returns ``(model, per-epoch mean losses)``.

    The input model is not modified.
    """
    if model.frozen:
        raise ModelStateError("cannot train a frozen segmentor")
    images = [check_image(im) for im in images]
    targets = [check_mask(t) for t in targets]
    if not images or len(images) != len(targets):
        raise ParameterError("need a nonempty, paired set of images and targets")
    rng = check_rng(rng)
    model = model.copy()
    curve = []
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(images)):
            loss, grads, _ = seg_loss(model, images[i], targets[i])
            total += loss
            for k in PARAM_NAMES:
                model.params[k] -= lr * grads[k]
        curve.append(total / len(images))
    return model, curve


def freeze(model: SegmentorModel) -> SegmentorModel:
    """Frozen, read-only copy of ``model``."""
    if model.frozen:
        return model
    out = model.copy()
    for v in out.params.values():
        v.setflags(write=False)
    out.frozen = True
    return out


# ------------------------------------------------------------- checkpoints


def save_segmentor(path, model: SegmentorModel) -> None:
    """Magic, channel width (uint32), frozen flag (uint8), then float64 params in
    ``PARAM_NAMES`` order, all little-endian."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IB", model.channels, int(model.frozen)))
        fh.write(model.flat().astype("<f8").tobytes())


def load_segmentor(path) -> SegmentorModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a segmentor checkpoint")
    c, frozen = struct.unpack_from("<IB", data, len(MAGIC))
    flat = np.frombuffer(data, dtype="<f8", offset=len(MAGIC) + 5).astype(np.float64)
    shapes = _shapes(c)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != expected:
        raise ValueError(f"{path}: expected {expected} parameters, found {flat.size}")
    params, pos = {}, 0
    for k in PARAM_NAMES:
        size = int(np.prod(shapes[k]))
        params[k] = flat[pos : pos + size].reshape(shapes[k]).copy()
        pos += size
    model = SegmentorModel(params)
    return freeze(model) if frozen else model


class Segmentor(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on (images, masks), ``predict_proba`` per pixel."""

    def __init__(self, channels=8, epochs=200, lr=0.05, random_state=0):
        self.channels = channels
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        rng = np.random.default_rng(self.random_state)
        model = init_segmentor(self.channels, rng)
        self.model_, self.loss_curve_ = seg_train(model, list(X), list(y), self.epochs, self.lr, rng)
        self.classes_ = np.array([0, 1])
        return self

    def freeze(self):
        self.model_ = freeze(self.model_)
        return self

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return seg_forward(self.model_, X)
        return np.stack([seg_forward(self.model_, im) for im in X])

    def predict(self, X):
        # ties at exactly 0.5 map to background
        return (self.predict_proba(X) > 0.5).astype(np.uint8)

import threading

import numpy as np
import pytest

from angiomim.segmentor import (
    PARAM_NAMES,
    Segmentor,
    bce,
    freeze,
    init_segmentor,
    load_segmentor,
    save_segmentor,
    seg_forward,
    seg_loss,
    seg_train,
    zero_segmentor,
)
from angiomim.validation import ModelStateError


def _refl(i, n):
    return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)


def _naive_conv(x, w, b):
    cin, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for r in range(h):
            for c in range(wd):
                acc = b[o]
                for i in range(cin):
                    for dr in range(3):
                        for dc in range(3):
                            acc += w[o, i, dr, dc] * x[i, _refl(r + dr - 1, h), _refl(c + dc - 1, wd)]
                out[o, r, c] = acc
    return out


def _naive_forward(model, img):
    p = model.params
    a1 = np.maximum(_naive_conv(img[None], p["w1"], p["b1"]), 0)
    a2 = np.maximum(_naive_conv(a1, p["w2"], p["b2"]), 0)
    logits = np.einsum("c,chw->hw", p["w3"][0], a2) + p["b3"][0]
    return 1 / (1 + np.exp(-logits))


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    model = init_segmentor(3, rng)
    img = rng.random((7, 9))
    np.testing.assert_allclose(seg_forward(model, img), _naive_forward(model, img), atol=1e-13)


def test_parameter_count_formula():
    for c in (1, 4, 8):
        assert zero_segmentor(c).n_params == 9 * c + c + 9 * c * c + c + c + 1
    assert zero_segmentor(8).n_params == 673


def test_zero_model_outputs_half():
    assert np.all(seg_forward(zero_segmentor(4), np.random.default_rng(1).random((6, 6))) == 0.5)


def test_interior_translation_covariance():
    rng = np.random.default_rng(2)
    model = init_segmentor(4, rng)
    img = rng.random((24, 24))
    shifted = np.roll(img, (3, 2), axis=(0, 1))
    a = seg_forward(model, img)
    b = seg_forward(model, shifted)
    # receptive field radius is 2, so away from borders and the wrap seam the outputs agree
    np.testing.assert_allclose(b[8:-3, 7:-3], a[5:-6, 5:-5], atol=1e-14)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_parameter_and_input_gradients(self, seed, fd, rel_err):
        rng = np.random.default_rng(seed)
        model = init_segmentor(2, rng)
        for k in ("b1", "b2", "b3"):
            model.params[k] = rng.normal(0, 0.1, model.params[k].shape)
        img = rng.random((5, 6))
        target = (rng.random((5, 6)) < 0.4).astype(np.uint8)
        _, grads, gx = seg_loss(model, img, target)
        for k in PARAM_NAMES:
            num = fd(lambda: seg_loss(model, img, target)[0], model.params[k])
            assert rel_err(grads[k], num) <= 1e-3, k
        num_x = fd(lambda: seg_loss(model, img, target)[0], img)
        assert rel_err(gx, num_x) <= 1e-3

    def test_bce_derivative(self, fd, rel_err):
        rng = np.random.default_rng(3)
        prob = rng.uniform(0.05, 0.95, 10)
        target = (rng.random(10) < 0.5).astype(float)
        _, d = bce(prob, target)
        assert rel_err(d, fd(lambda: bce(prob, target)[0], prob)) <= 1e-6

    def test_bce_clamped_region_has_zero_gradient(self):
        loss, d = bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss) and loss == pytest.approx(-np.log(1e-7), rel=1e-6)
        assert not d.any()


class TestTraining:
    def _data(self):
        rng = np.random.default_rng(4)
        imgs, masks = [], []
        for _ in range(4):
            img = np.full((16, 16), 0.7) + rng.normal(0, 0.02, (16, 16))
            m = np.zeros((16, 16), np.uint8)
            r = rng.integers(3, 13)
            m[r - 1 : r + 1, :] = 1
            img[m == 1] -= 0.4
            imgs.append(img)
            masks.append(m)
        return imgs, masks

    def test_loss_decreases(self):
        imgs, masks = self._data()
        model, curve = seg_train(init_segmentor(4, 0), imgs, masks, epochs=30, lr=0.1, rng=0)
        assert curve[-1] < 0.5 * curve[0]

    def test_input_model_untouched_and_deterministic(self):
        imgs, masks = self._data()
        start = init_segmentor(4, 0)
        before = start.flat().copy()
        a, ca = seg_train(start, imgs, masks, epochs=3, rng=1)
        b, cb = seg_train(start, imgs, masks, epochs=3, rng=1)
        np.testing.assert_array_equal(start.flat(), before)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert ca == cb

    def test_zero_epochs_is_identity(self):
        imgs, masks = self._data()
        start = init_segmentor(3, 2)
        out, curve = seg_train(start, imgs, masks, epochs=0, rng=0)
        assert curve == []
        np.testing.assert_array_equal(out.flat(), start.flat())

    def test_all_foreground_targets_converge(self):
        rng = np.random.default_rng(9)
        imgs = [rng.random((32, 32)) for _ in range(8)]
        ones = [np.ones((32, 32), np.uint8)] * 8
        model, curve = seg_train(init_segmentor(8, 0), imgs, ones, epochs=200, rng=0)
        assert curve[-1] <= curve[0]
        assert np.mean([seg_forward(model, im).mean() for im in imgs]) >= 0.9

    def test_frozen_model_rejects_training(self):
        imgs, masks = self._data()
        with pytest.raises(ModelStateError):
            seg_train(freeze(init_segmentor(2, 0)), imgs, masks, epochs=1)

    def test_freeze_is_read_only_and_idempotent(self):
        m = freeze(init_segmentor(2, 0))
        assert freeze(m) is m
        with pytest.raises(ValueError):
            m.params["w1"][0, 0, 0, 0] = 1.0

    def test_concurrent_forward_is_deterministic(self):
        model = freeze(init_segmentor(4, 5))
        img = np.random.default_rng(5).random((32, 32))
        ref = seg_forward(model, img)
        out = [None] * 8

        def run(i):
            out[i] = seg_forward(model, img)

        threads = [threading.Thread(target=run, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for o in out:
            np.testing.assert_array_equal(o, ref)


@pytest.mark.parametrize("frozen", [False, True])
def test_checkpoint_roundtrip(tmp_path, frozen):
    model = init_segmentor(3, 6)
    if frozen:
        model = freeze(model)
    path = tmp_path / "seg.bin"
    save_segmentor(path, model)
    back = load_segmentor(path)
    assert back.frozen == frozen
    np.testing.assert_array_equal(back.flat(), model.flat())


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_segmentor(path)


def test_estimator_api():
    rng = np.random.default_rng(7)
    X = rng.random((2, 12, 12))
    y = (X < 0.3).astype(np.uint8)
    est = Segmentor(channels=3, epochs=2, random_state=0)
    assert est.get_params()["channels"] == 3
    est.fit(X, y).freeze()
    assert est.model_.frozen
    proba = est.predict_proba(X)
    assert proba.shape == X.shape and np.all((proba > 0) & (proba < 1))
    np.testing.assert_array_equal(est.predict(X), (proba > 0.5).astype(np.uint8))

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hvc import HVCEncoder, LabelPropagator
from hvc.exceptions import ShapeMismatch
from hvc.synthdata import SynthConfig, eval_videos, train_images
from hvc.validation import check_features, check_images, check_label_map

SMALL = dict(backbone_channels=(4, 4, 4), hidden_channels=8, out_channels=8,
             batch_size=4, epochs=1)


@pytest.fixture(scope="module")
def fitted():
    return HVCEncoder(**SMALL).fit(train_images(SynthConfig(n_train=8)))


def test_params_roundtrip_and_clone():
    enc = HVCEncoder(alpha=0.5, seed=3)
    p = enc.get_params()
    assert p["alpha"] == 0.5 and p["seed"] == 3
    c = clone(enc)
    assert c.get_params() == p
    enc.set_params(r=0.2)
    assert enc.r == 0.2


def test_fit_transform(fitted):
    X = train_images(SynthConfig(n_train=3))
    F = fitted.transform(X)
    assert F.shape == (3, 8, 8, 8)
    np.testing.assert_allclose(np.linalg.norm(F, axis=1), 1, atol=1e-5)
    assert fitted.loss_curve_.shape == (2,) and fitted.n_steps_ == 2


def test_fit_is_reproducible(fitted):
    X = train_images(SynthConfig(n_train=8))
    again = HVCEncoder(**SMALL).fit(X)
    np.testing.assert_array_equal(again.transform(X[:2]), fitted.transform(X[:2]))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        HVCEncoder().transform(np.zeros((1, 8, 8, 3)))
    with pytest.raises(NotFittedError):
        LabelPropagator().predict(np.zeros((1, 8, 8, 3)))


def test_propagator_with_encoder(fitted):
    _, frames, masks = eval_videos(SynthConfig(n_videos=1, n_frames=4))[0]
    prop = LabelPropagator(encoder=fitted).fit(frames[:1], masks[0])
    out = prop.predict(frames[1:])
    assert out.shape == (3, 64, 64)
    assert set(np.unique(out)) <= set(prop.classes_)


def test_propagator_with_features():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((1, 4, 2, 2))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    feats = np.repeat(f, 3, axis=0)
    mask = np.zeros((16, 16), int)
    mask[:, 8:] = 1
    frame = np.zeros((1, 16, 16, 3))
    prop = LabelPropagator(top_k=1).fit(frame, mask)
    out = prop.predict(np.zeros((2, 16, 16, 3)), features=feats)
    np.testing.assert_array_equal(out, [mask, mask])
    with pytest.raises(ValueError):
        prop.predict(np.zeros((2, 16, 16, 3)), features=feats[:2])
    with pytest.raises(ValueError):
        prop.predict(np.zeros((2, 16, 16, 3)))


def test_validation_helpers():
    x = check_images(np.zeros((4, 5, 3), dtype=np.uint8) + 255)
    assert x.shape == (1, 4, 5, 3) and x.max() == 1.0
    with pytest.raises(ShapeMismatch):
        check_images(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 2, 2, 3), np.nan))
    with pytest.raises(ShapeMismatch):
        check_images(np.zeros((1, 4, 4, 3)), min_side=8)
    assert check_label_map(np.ones((2, 2), bool)).dtype == np.int64
    with pytest.raises(ValueError):
        check_label_map(np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        check_label_map(-np.ones((2, 2), int))
    with pytest.raises(ShapeMismatch):
        check_label_map(np.ones((2, 2), int), shape=(3, 3))
    with pytest.raises(ShapeMismatch):
        check_features(np.ones((2, 2)))

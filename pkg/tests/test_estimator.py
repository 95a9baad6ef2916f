import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from objclust.estimator import ObjectClusterer, check_images
from objclust.metrics import Detection

TINY_KW = dict(image_size=16, grid_size=2, what_dim=2, num_clusters=2, glimpse_size=8,
               anchor=8.0, backbone="small", batch_size=4, num_steps=3,
               overrides=("model.feature_channels=8", "model.head_channels=8"))


def test_check_images_shapes_and_dtypes():
    gray = np.zeros((2, 16, 16), np.uint8)
    gray[0, 3, 4] = 255
    out = check_images(gray)
    assert out.shape == (2, 3, 16, 16) and out.dtype == np.float32 and out[0, 2, 3, 4] == 1.0
    assert check_images(np.full((1, 1, 8, 8), 0.5)).shape == (1, 3, 8, 8)
    assert check_images(np.zeros((1, 3, 8, 8)), (8, 8)).shape == (1, 3, 8, 8)


@pytest.mark.parametrize("bad", [np.zeros((2, 2, 8, 8)), np.zeros((8, 8)), np.zeros((0, 8, 8)),
                                 np.full((1, 8, 8), 1.5), np.full((1, 8, 8), np.nan),
                                 np.array([[["a"]]])])
def test_check_images_rejects(bad):
    with pytest.raises(ValueError):
        check_images(bad)


def test_check_images_size_mismatch():
    with pytest.raises(ValueError, match="expects"):
        check_images(np.zeros((1, 8, 8)), (16, 16))


def test_params_round_trip():
    est = ObjectClusterer(**TINY_KW)
    params = est.get_params()
    assert params["what_dim"] == 2 and params["overrides"] == TINY_KW["overrides"]
    assert clone(est).get_params() == params
    est.set_params(num_clusters=3)
    assert est.num_clusters == 3
    assert ObjectClusterer().get_params()["what_dim"] == 256


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        ObjectClusterer(**TINY_KW).transform(np.zeros((1, 16, 16)))


def test_fit_transform_predict(tmp_path):
    X = np.random.default_rng(0).integers(0, 256, (6, 16, 16)).astype(np.uint8)
    est = ObjectClusterer(out_dir=str(tmp_path), **TINY_KW).fit(X)
    assert est.n_steps_ == 3 and (tmp_path / "ckpt_3.pt").is_file()
    Z = est.transform(X)
    assert Z.shape == (6, 4, 2)
    assert np.array_equal(Z, est.transform(X))
    dets = est.predict(X)
    assert len(dets) == 6 and all(isinstance(d, Detection) for s in dets for d in s)
    again = ObjectClusterer.from_checkpoint(tmp_path / "ckpt_3.pt")
    assert again.what_dim == 2
    assert np.array_equal(again.transform(X), Z)
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 32, 32)))

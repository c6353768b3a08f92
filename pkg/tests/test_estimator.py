import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import TINY_D, TINY_G
from surge import SuperResolver
from surge.exceptions import ShapeError


def tiny(**kw):
    params = dict(epochs=1, batch_size=2, patch_size=32, seed=1, dtype="float64",
                  generator=TINY_G, discriminator=TINY_D)
    params.update(kw)
    return SuperResolver(**params)


def test_params_follow_sklearn_conventions():
    est = tiny()
    params = est.get_params()
    assert params["patch_size"] == 32 and params["generator"] == TINY_G
    est.set_params(epochs=4)
    assert est.epochs == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert "SuperResolver(" in repr(est)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        tiny().predict(np.zeros((16, 16, 3)))


@pytest.fixture(scope="module")
def fitted():
    from oracles import synthetic_image
    return tiny().fit([synthetic_image(i, 64, 72) for i in range(4)])


def test_fit_sets_attributes(fitted):
    assert len(fitted.loss_log_) == 2
    assert fitted.config_.patch_size == 32
    assert fitted.checkpoint_.epoch == 1


def test_predict_single_and_batch(fitted, rng):
    single = fitted.predict(rng.random((10, 12, 3)))
    assert single.shape == (40, 48, 3)
    many = fitted.predict([rng.random((8, 8, 3)), rng.random((9, 5, 3))])
    assert [m.shape for m in many] == [(32, 32, 3), (36, 20, 3)]
    with pytest.raises(ShapeError):
        fitted.predict(rng.random((8, 8)))


def test_score_is_mean_psnr(fitted):
    from oracles import synthetic_image
    s = fitted.score([synthetic_image(7, 34, 41)])
    assert math.isfinite(s) and s > 0


def test_save_and_reload_predicts_identically(fitted, tmp_path, rng):
    path = fitted.save(tmp_path / "m.srge")
    again = SuperResolver.from_checkpoint(path)
    x = rng.random((12, 12, 3))
    np.testing.assert_array_equal(again.predict(x), fitted.predict(x))
    assert again.get_params()["patch_size"] == 32

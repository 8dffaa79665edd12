import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from actproj.estimators import (
    ActivationCodec,
    ChannelPCA,
    GreedyReducer,
    LearnableProjection,
    ThresholdReducer,
    check_activations,
)
from actproj.numerics import ShapeError, ValidationError
from actproj.refnet import generate_synthetic_dataset


@pytest.fixture(scope="module")
def acts():
    rng = np.random.default_rng(0)
    return rng.normal(size=(6, 5, 4, 4)) * np.array([3, 2, 1, 0.5, 0.1])[None, :, None, None]


def test_check_activations():
    with pytest.raises(ShapeError):
        check_activations(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        check_activations(np.full((1, 2, 2, 2), np.nan))
    with pytest.raises(ShapeError):
        check_activations(np.zeros((1, 2, 2, 2)), channels=3)
    assert check_activations(np.zeros((1, 2, 2, 2), dtype=int)).dtype == np.float32


def test_params_and_clone():
    est = LearnableProjection(dims=[1, 2, 3, 4], lr=1e-4, epochs=2)
    params = est.get_params()
    assert params["lr"] == 1e-4 and params["dims"] == [1, 2, 3, 4]
    assert clone(est).get_params()["epochs"] == 2
    assert ChannelPCA(3).set_params(n_components=2).n_components == 2
    assert GreedyReducer(100, use_sigma=True).get_params() == {
        "budget_bits": 100, "strict_recompute": False, "use_sigma": True}


def test_channel_pca(acts):
    pca = ChannelPCA(5).fit(acts)
    z = pca.transform(acts)
    assert z.shape == (6, 5, 4, 4)
    assert np.allclose(pca.inverse_transform(z), acts, atol=1e-5)
    assert np.all(np.diff(pca.explained_variance_) <= 0)
    small = ChannelPCA(2).fit(acts)
    assert small.transform(acts).shape == (6, 2, 4, 4)
    assert small.components_.shape == (2, 5)
    with pytest.raises(ValidationError):
        ChannelPCA(9).fit(acts)
    with pytest.raises(NotFittedError):
        ChannelPCA().transform(acts)


def test_activation_codec(acts):
    codec = ActivationCodec().fit(acts)
    symbols = codec.transform(acts)
    assert symbols.dtype == np.int8 and np.abs(symbols).max() == 127
    assert np.max(np.abs(codec.inverse_transform(symbols) - acts)) <= codec.quant_.scale / 2 + 1e-6
    assert codec.encoded_bits(acts) == codec.encoded_bits(acts, overhead=False) + 2080


def test_threshold_reducer():
    spectra = [np.array([4.0, 3, 2, 1]), np.array([1.0, 0, 0])]
    assert ThresholdReducer(0.9).fit(spectra).dims_ == [3, 1]


def test_learnable_projection_end_to_end(net):
    images = generate_synthetic_dataset(5, 4).images
    est = LearnableProjection(net, dims=[4, 8, 16, 32], calibration_size=20, epochs=1, batch_size=20)
    est.fit(images)
    assert est.model_.dims == [4, 8, 16, 32]
    proba = est.predict_proba(images[:6])
    assert proba.shape == (6, 10) and np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(est.predict(images[:6]), proba.argmax(axis=1))
    symbols = est.transform(images[:2])
    assert [s.shape[0] for s in symbols] == [4, 8, 16, 32]
    reducer = GreedyReducer(budget_bits=0).fit(est.initial_model_, images[:10], est.spectra_)
    assert reducer.dims_ == [1, 1, 1, 1] and reducer.plan_.unmet_budget
    with pytest.raises(ValidationError):
        LearnableProjection().fit(images)

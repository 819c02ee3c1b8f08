import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from promptlab.bench import DatasetConfig, gen_dataset
from promptlab.estimator import SoftPromptASR, check_features, check_transcripts


@pytest.fixture(scope="module")
def xy():
    ds = list(gen_dataset(DatasetConfig(size=6, min_units=2, max_units=3), seed=4))
    return [u.features for u in ds], [u.tokens for u in ds]


def test_params_round_trip_and_clone():
    est = SoftPromptASR(method="LoRA", n_enc=8, epochs=2)
    params = est.get_params()
    assert params["method"] == "LoRA" and params["n_enc"] == 8
    other = clone(est).set_params(n_dec=3)
    assert other.n_dec == 3 and est.n_dec == 16


def test_fit_predict_score(xy):
    X, y = xy
    est = SoftPromptASR(n_enc=4, n_dec=4, epochs=2, batch_size=3).fit(X, y)
    hyps = est.predict(X)
    assert len(hyps) == len(X) and all(isinstance(h, list) for h in hyps)
    assert est.n_trainable_ == 8 * 64 and est.n_features_in_ == 16
    assert est.score(X, y) <= 1.0
    assert len(est.report_.losses) == 4


def test_base_model_is_not_mutated(base_free_model, xy):
    X, y = xy
    before = {k: p.data.copy() for k, p in base_free_model.params.items()}
    SoftPromptASR(method="FFT", epochs=1, base_model=base_free_model).fit(X, y)
    assert all(np.array_equal(before[k], p.data) for k, p in base_free_model.params.items())


@pytest.fixture
def base_free_model():
    from promptlab.model import ModelConfig, build_model
    return build_model(ModelConfig(seed=2))


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        SoftPromptASR().predict([np.zeros((2, 16))])


def test_input_validation():
    with pytest.raises(ValueError, match="nonempty"):
        check_features([])
    with pytest.raises(ValueError, match="2-D"):
        check_features([np.zeros(3)])
    with pytest.raises(ValueError, match="NaN"):
        check_features([np.full((2, 16), np.nan)])
    with pytest.raises(ValueError, match="width"):
        check_features([np.zeros((2, 16)), np.zeros((2, 8))])
    with pytest.raises(ValueError, match="expected 16"):
        check_features([np.zeros((2, 8))], 16)
    assert len(check_features(np.zeros((3, 2, 16)))) == 3
    with pytest.raises(ValueError, match="outside"):
        check_transcripts([[70]], 56, 1)
    with pytest.raises(ValueError, match="transcripts"):
        check_transcripts([[1]], 56, 2)
    with pytest.raises(ValueError, match="empty"):
        check_transcripts([[]], 56, 1)

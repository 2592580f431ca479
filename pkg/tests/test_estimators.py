import numpy as np
import pytest
from sklearn.base import clone

from mebqat.data import sample_episode, synthetic_dataset
from mebqat.estimators import (
    BitwidthAdaptiveClassifier,
    MamlFewShotClassifier,
    PrototypeFewShotClassifier,
)


@pytest.fixture(scope="module")
def small_images():
    ds = synthetic_dataset(num_classes=3, samples_per_class=30, image_size=16, seed=8)
    return ds.images, ds.labels


@pytest.fixture(scope="module")
def fitted(small_images):
    X, y = small_images
    clf = BitwidthAdaptiveClassifier(
        weight_bits=(2, 8, "FP"), minor_weight_bits=(), branches=2,
        epochs=3, batch_size=16, random_state=0,
    )
    return clf.fit(X, y)


def test_classifier_learns_and_predicts(fitted, small_images):
    X, y = small_images
    assert fitted.score(X, y) > 0.9
    proba = fitted.predict_proba(X[:5])
    assert proba.shape == (5, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)


def test_classifier_scores_under_other_bitwidths(fitted, small_images):
    X, y = small_images
    for bits in ("2,2", "8,8"):
        assert fitted.score_at(X, y, bits) > 0.5


def test_classifier_maps_original_labels(small_images):
    X, y = small_images
    shifted = y + 10  # labels need not be 0-based
    clf = BitwidthAdaptiveClassifier(
        weight_bits=("FP",), minor_weight_bits=(), branches=1,
        epochs=2, batch_size=16, random_state=1,
    ).fit(X, shifted)
    assert set(clf.predict(X[:10])) <= {10, 11, 12}


def test_get_set_params_and_clone_roundtrip():
    clf = BitwidthAdaptiveClassifier(epochs=7, lr=0.01)
    params = clf.get_params()
    assert params["epochs"] == 7
    twin = clone(clf)
    assert twin.get_params() == params
    clf.set_params(branches=2)
    assert clf.branches == 2


def test_rejects_flat_feature_matrix(small_images):
    X, y = small_images
    clf = BitwidthAdaptiveClassifier(epochs=1)
    with pytest.raises(ValueError, match="rank"):
        clf.fit(X.reshape(len(X), -1), y)


def test_prototype_few_shot_end_to_end():
    pool = synthetic_dataset(num_classes=10, samples_per_class=8, image_size=16, seed=9)
    train = pool.subset(np.flatnonzero(pool.labels < 7))
    clf = PrototypeFewShotClassifier(
        weight_bits=(4, "FP"), ways=3, shots=1, query_shots=3,
        branches=2, outer_updates=30, embed_channels=16, random_state=0,
    ).fit(train.images, train.labels)
    # adapt to entirely unseen classes
    holdout = pool.subset(np.flatnonzero(pool.labels >= 7))
    episode = sample_episode(holdout, holdout.classes, 3, 1, 4, np.random.default_rng(0))
    original = np.array(episode.class_ids)
    clf.adapt(episode.support_x, original[episode.support_y])
    predictions = clf.predict(episode.query_x)
    truth = original[episode.query_y]
    assert set(predictions) <= set(original)
    assert (predictions == truth).mean() > 1.0 / 3.0  # beats chance


def test_maml_few_shot_adapt_and_predict():
    pool = synthetic_dataset(num_classes=8, samples_per_class=8, image_size=16, seed=10)
    clf = MamlFewShotClassifier(
        weight_bits=("FP",), ways=3, shots=2, query_shots=2, branches=2,
        outer_updates=10, inner_steps=2, adapt_steps=3, random_state=0,
    ).fit(pool.images, pool.labels)
    episode = sample_episode(pool, pool.classes, 3, 2, 3, np.random.default_rng(1))
    original = np.array(episode.class_ids)
    clf.adapt(episode.support_x, original[episode.support_y])
    predictions = clf.predict(episode.query_x)
    assert predictions.shape == (9,)
    assert set(predictions) <= set(original)


def test_adapt_requires_fit():
    clf = PrototypeFewShotClassifier()
    with pytest.raises(Exception):
        clf.adapt(np.zeros((3, 1, 16, 16), dtype=np.float32), [0, 1, 2])

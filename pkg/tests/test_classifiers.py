import numpy as np
import pytest

from moesense.classifiers import (
    LabeledDataset,
    model_from_jsonable,
    predict_forest,
    predict_knn,
    predict_linear_svm,
    predict_posterior,
    svm_objective,
    train_forest,
    train_knn,
    train_linear_svm,
)
from moesense.errors import InputError, TrainingError
from moesense.features import FeatureKind, FeatureVector


def fv(values, kind=FeatureKind.AMPLITUDE_STATS, rate=500.0):
    return FeatureVector(kind, np.asarray(values, dtype=float), rate)


def dataset(matrix, labels, num_classes=None, kind=FeatureKind.AMPLITUDE_STATS):
    feats = [fv(row, kind) for row in matrix]
    return LabeledDataset.build(feats, labels, num_classes)


def random_dataset(rng, n=50, d=4, num_classes=3):
    matrix = rng.normal(size=(n, d))
    labels = rng.integers(0, num_classes, n)
    return dataset(matrix, labels.tolist(), num_classes), matrix, labels


# ---------------------------------------------------------------------------
# LabeledDataset
# ---------------------------------------------------------------------------

def test_dataset_rejects_empty():
    with pytest.raises(TrainingError):
        LabeledDataset.build([], [])


def test_dataset_rejects_mixed_kinds():
    feats = [fv([1, 2]), fv([3, 4], kind=FeatureKind.DOPPLER_ENERGY)]
    with pytest.raises(TrainingError):
        LabeledDataset.build(feats, [0, 1])


def test_dataset_rejects_count_mismatch():
    with pytest.raises(TrainingError):
        LabeledDataset.build([fv([1, 2])], [0, 1])


def test_dataset_rejects_mixed_lengths():
    with pytest.raises(TrainingError):
        LabeledDataset.build([fv([1, 2]), fv([1, 2, 3])], [0, 1])


def test_dataset_rejects_label_out_of_range():
    with pytest.raises(TrainingError):
        LabeledDataset.build([fv([1, 2])], [5], num_classes=3)


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------

def test_knn_k_out_of_range():
    data = dataset([[0, 0], [1, 1]], [0, 1])
    with pytest.raises(TrainingError):
        train_knn(data, k=3)
    with pytest.raises(TrainingError):
        train_knn(data, k=0)


def test_knn_k1_memorizes_training_points():
    rng = np.random.default_rng(3)
    data, matrix, labels = random_dataset(rng)
    model = train_knn(data, k=1)
    for row, label in zip(matrix, labels):
        post = predict_knn(model, fv(row))
        assert post[label] == 1.0
        assert post.sum() == pytest.approx(1.0)


def test_knn_two_point_toy():
    data = dataset([[0, 0], [1, 1]], [0, 1], num_classes=2)
    model = train_knn(data, k=1)
    post = predict_knn(model, fv([0.1, 0.1]))
    assert np.array_equal(post, [1.0, 0.0])


def test_knn_distance_tie_prefers_lower_index():
    # both training points are exactly 1.0 away from the query
    data = dataset([[1, 0], [-1, 0]], [1, 0], num_classes=2)
    model = train_knn(data, k=1)
    post = predict_knn(model, fv([0, 0]))
    assert post[1] == 1.0  # index 0 holds label 1


def knn_oracle(matrix, labels, query, k, num_classes):
    d2 = ((matrix - query) ** 2).sum(axis=1)
    order = sorted(range(len(matrix)), key=lambda i: (d2[i], i))[:k]
    votes = np.zeros(num_classes)
    for i in order:
        votes[labels[i]] += 1
    return votes / k


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(17)
    for _ in range(20):
        data, matrix, labels = random_dataset(rng, n=50, d=3, num_classes=4)
        model = train_knn(data, k=3)
        for _ in range(10):
            q = rng.normal(size=3)
            expected = knn_oracle(matrix, labels, q, 3, 4)
            assert np.array_equal(predict_knn(model, fv(q)), expected)


def test_knn_kind_and_length_mismatch():
    data = dataset([[0, 0], [1, 1]], [0, 1])
    model = train_knn(data, k=1)
    with pytest.raises(InputError):
        predict_knn(model, fv([0, 0], kind=FeatureKind.DOPPLER_ENERGY))
    with pytest.raises(InputError):
        predict_knn(model, fv([0, 0, 0]))


# ---------------------------------------------------------------------------
# Linear SVM
# ---------------------------------------------------------------------------

def test_svm_rejects_single_class():
    data = dataset([[0.0], [1.0]], [1, 1], num_classes=2)
    with pytest.raises(TrainingError):
        train_linear_svm(data)


def test_svm_separable_1d_reaches_full_accuracy():
    matrix = [[-1.0], [-0.8], [-1.2], [1.0], [0.8], [1.2]]
    labels = [0, 0, 0, 1, 1, 1]
    data = dataset(matrix, labels, num_classes=2)
    model = train_linear_svm(data)
    preds = [int(np.argmax(predict_linear_svm(model, fv(row)))) for row in matrix]
    assert preds == labels


def test_svm_zero_epochs_uniform_posterior():
    data = dataset([[-1.0], [1.0]], [0, 1], num_classes=2)
    model = train_linear_svm(data, epochs=0)
    assert np.all(model.weights == 0.0)
    post = predict_linear_svm(model, fv([0.3]))
    assert np.allclose(post, [0.5, 0.5], atol=1e-12)


def test_svm_deterministic_retraining():
    rng = np.random.default_rng(23)
    data, _, _ = random_dataset(rng, n=30, d=4, num_classes=3)
    a = train_linear_svm(data)
    b = train_linear_svm(data)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.biases, b.biases)


def test_svm_objective_non_increasing_over_epochs():
    # separable 2-class toy data; objective sampled at epoch boundaries
    matrix = [[-1.5, 0.2], [-1.0, -0.1], [-0.8, 0.05], [0.9, -0.2], [1.1, 0.1], [1.4, 0.0]]
    labels = [0, 0, 0, 1, 1, 1]
    data = dataset(matrix, labels, num_classes=2)
    losses = [
        svm_objective(train_linear_svm(data, epochs=e, step_size=0.01, l2=1e-3), data, 1e-3)
        for e in range(0, 16)
    ]
    diffs = np.diff(losses)
    assert np.all(diffs <= 1e-9)


def test_svm_posterior_follows_margins():
    rng = np.random.default_rng(31)
    data, _, _ = random_dataset(rng, n=40, d=5, num_classes=4)
    model = train_linear_svm(data)
    for _ in range(20):
        q = rng.normal(size=5)
        z = (q - model.mean) / model.std
        margins = model.weights @ z + model.biases
        post = predict_linear_svm(model, fv(q))
        assert post.sum() == pytest.approx(1.0, abs=1e-9)
        assert int(np.argmax(post)) == int(np.argmax(margins))


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

def test_forest_single_tree_full_sample_memorizes():
    rng = np.random.default_rng(41)
    matrix = rng.normal(size=(40, 5))  # unique rows almost surely
    labels = rng.integers(0, 3, 40).tolist()
    data = dataset(matrix, labels, num_classes=3)
    model = train_forest(data, num_trees=1, max_depth=None, seed=9, bootstrap=False)
    preds = [int(np.argmax(predict_forest(model, fv(row)))) for row in matrix]
    assert preds == labels


def test_forest_pure_class_single_leaf():
    data = dataset([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]], [2, 2, 2], num_classes=4)
    model = train_forest(data, num_trees=3, max_depth=4, seed=1)
    for tree in model.trees:
        assert tree.probs is not None
        assert tree.probs[2] == 1.0
    post = predict_forest(model, fv([9.0, 9.0]))
    assert post[2] == 1.0


def test_forest_deterministic_retraining():
    rng = np.random.default_rng(47)
    data, matrix, _ = random_dataset(rng, n=60, d=4, num_classes=3)
    a = train_forest(data, seed=123)
    b = train_forest(data, seed=123)
    assert a.to_jsonable() == b.to_jsonable()
    c = train_forest(data, seed=124)
    assert c.to_jsonable() != a.to_jsonable()


def test_forest_posterior_valid():
    rng = np.random.default_rng(53)
    data, matrix, _ = random_dataset(rng, n=50, d=4, num_classes=5)
    model = train_forest(data, seed=3)
    for _ in range(20):
        post = predict_forest(model, fv(rng.normal(size=4)))
        assert post.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(post >= 0.0)


def test_forest_dimension_mismatch():
    data = dataset([[0, 1], [2, 3]], [0, 1])
    model = train_forest(data, num_trees=2, seed=5)
    with pytest.raises(InputError):
        predict_forest(model, fv([1, 2, 3]))


def test_forest_rejects_bad_tree_count():
    data = dataset([[0, 1], [2, 3]], [0, 1])
    with pytest.raises(TrainingError):
        train_forest(data, num_trees=0)


# ---------------------------------------------------------------------------
# serialization / dispatch
# ---------------------------------------------------------------------------

def test_models_round_trip_jsonable():
    rng = np.random.default_rng(61)
    data, matrix, _ = random_dataset(rng, n=30, d=4, num_classes=3)
    models = [
        train_knn(data, k=3),
        train_linear_svm(data, epochs=20),
        train_forest(data, num_trees=5, seed=77),
    ]
    q = fv(rng.normal(size=4))
    for model in models:
        clone = model_from_jsonable(model.to_jsonable())
        assert type(clone) is type(model)
        assert clone.to_jsonable() == model.to_jsonable()
        assert np.array_equal(predict_posterior(clone, q), predict_posterior(model, q))

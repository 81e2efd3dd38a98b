import numpy as np
import pytest
from scipy.stats import spearmanr

from glioma_survival.config.config import PipelineConfig
from glioma_survival.core.predictors import (
    CLASS_DAYS,
    SHORT_LIMIT_DAYS,
    LONG_LIMIT_DAYS,
    class_to_days,
    days_to_class,
    classes_of,
    design_matrix,
    train_linear_regression,
    train_svr,
    train_rf_regression,
    train_svc_ovr,
    train_svc_ensemble,
    member_seed,
    decision_scores,
    ensemble_vote,
    predict_days,
    predict_class,
    train_model,
    save_model,
    load_model,
)
from glioma_survival.exceptions.custom_exceptions import ModelError
from glioma_survival.models.data_models import (
    FeatureTable,
    SurvivalClass,
    ModelKind,
    EnsembleSpec,
)

CENTERS = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]])


def _blobs(n_per=20, spread=0.7, seed=0):
    """三类二维高斯团块（外加一个无关特征），天数取各类平均天数"""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), n_per)
    points = CENTERS[labels] + rng.normal(0.0, spread, size=(len(labels), 2))
    values = np.column_stack([points, rng.normal(size=len(labels))])
    table = FeatureTable([f"b{i:03d}" for i in range(len(labels))], ["u", "v", "w"], values)
    days = np.array([CLASS_DAYS[SurvivalClass(c)] for c in labels])
    return table, labels, days


def _regression_problem(n=80, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = 500.0 + 120.0 * x[:, 0] - 60.0 * x[:, 1] + rng.normal(0.0, 5.0, size=n)
    return FeatureTable([f"r{i}" for i in range(n)], ["a", "b", "c"], x), y


def _settings(kind, **model):
    return PipelineConfig.from_dict({
        'model': {'kind': kind, 'n_trees': 15, **model},
        'ensemble': {'n_members': 7},
    })


@pytest.mark.parametrize("days,expected", [
    (0.0, SurvivalClass.SHORT),
    (304.374, SurvivalClass.SHORT),
    (304.375, SurvivalClass.MID),
    (456.5625, SurvivalClass.MID),
    (456.57, SurvivalClass.LONG),
    (2000.0, SurvivalClass.LONG),
])
def test_days_to_class_thresholds(days, expected):
    assert days_to_class(days) == expected


def test_class_limits_and_days():
    assert SHORT_LIMIT_DAYS == 304.375
    assert LONG_LIMIT_DAYS == 456.5625
    assert [class_to_days(c) for c in SurvivalClass] == [147.0, 376.0, 626.0]
    assert all(days_to_class(class_to_days(c)) == c for c in SurvivalClass)
    assert classes_of([10.0, 400.0, 900.0]).tolist() == [0, 1, 2]


@pytest.mark.parametrize("days", [-1.0, float('nan'), float('inf')])
def test_days_to_class_rejects_invalid(days):
    with pytest.raises(ModelError):
        days_to_class(days)


def test_linear_regression_residual_is_orthogonal():
    table, y = _regression_problem()
    model = train_linear_regression(table, y)
    x = design_matrix(model, table)
    residual = y - predict_days(model, table)
    assert np.abs(x.T @ residual).max() < 1e-6
    assert abs(residual.sum()) < 1e-6


def test_linear_regression_is_exact_on_linear_data():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 3))
    y = 1500.0 + 120.0 * x[:, 0] - 60.0 * x[:, 1] + 3.0 * x[:, 2]
    assert y.min() > 0.0
    table = FeatureTable([f"e{i}" for i in range(50)], ["a", "b", "c"], x)
    residual = y - predict_days(train_linear_regression(table, y), table)
    assert np.abs(residual).max() <= 1e-8


def test_svr_tracks_linear_signal():
    table, y = _regression_problem()
    model = train_svr(table, y, c=10.0, epsilon=0.1)
    predicted = predict_days(model, table)
    assert spearmanr(predicted, y)[0] > 0.95
    assert abs(predicted.mean() - y.mean()) < 50.0


def test_regressor_days_are_clipped_at_zero():
    table, y = _regression_problem()
    model = train_linear_regression(table, y - 2000.0)
    assert np.all(predict_days(model, table) >= 0.0)
    assert all(c == SurvivalClass.SHORT for c in predict_class(model, table))


def test_random_forest_is_deterministic_per_seed():
    table, y = _regression_problem()
    first = predict_days(train_rf_regression(table, y, n_trees=10, seed=3), table)
    second = predict_days(train_rf_regression(table, y, n_trees=10, seed=3), table)
    assert np.array_equal(first, second)
    assert spearmanr(first, y)[0] > 0.8


@pytest.mark.parametrize("kind", ["svc_ovr", "logistic_ovr", "rf_clf", "svc_ensemble"])
def test_classifiers_fit_separable_blobs(kind):
    table, labels, days = _blobs()
    model = train_model(kind, table, days, table.feature_names, _settings(kind))
    predicted = [int(c) for c in predict_class(model, table)]
    assert predicted == labels.tolist()
    assert set(predict_days(model, table).tolist()) == {147.0, 376.0, 626.0}


def test_prediction_binds_features_by_name():
    table, labels, days = _blobs()
    model = train_model("svc_ovr", table, days, ["u", "v"], _settings("svc_ovr"))
    shuffled = table.select_features(["w", "v", "u"])
    assert np.array_equal(predict_days(model, table), predict_days(model, shuffled))


def test_prediction_with_missing_feature():
    table, labels, days = _blobs()
    model = train_model("linear", table, days, ["u", "v"], _settings("linear"))
    with pytest.raises(ModelError):
        predict_days(model, table.select_features(["u", "w"]))


def test_missing_class_is_rejected():
    table, labels, days = _blobs()
    keep = [sid for sid, c in zip(table.subject_ids, labels) if c != 2]
    subset = table.select_subjects(keep)
    y = labels[labels != 2]
    with pytest.raises(ModelError):
        train_svc_ovr(subset, y)


def test_training_needs_listed_features():
    table, labels, days = _blobs()
    with pytest.raises(ModelError):
        train_model("linear", table, days, ["u", "Age"], _settings("linear"))


def test_ensemble_vote_majority_and_tie():
    unanimous = np.array([[[0.0, 1.0, 0.0]], [[0.0, 1.0, 0.0]], [[100.0, 0.0, 0.0]]])
    assert ensemble_vote(unanimous).tolist() == [1]
    tie = np.array([[[5.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]]])
    assert ensemble_vote(tie).tolist() == [0]
    other_tie = np.array([[[1.0, 0.0, 0.0]], [[0.0, 0.0, 3.0]]])
    assert ensemble_vote(other_tie).tolist() == [2]


def test_ensemble_is_independent_of_worker_count():
    table, labels, _ = _blobs(spread=2.5)
    spec = EnsembleSpec(n_members=6, subsample_fraction=0.8, base_c=1.0, master_seed=11)
    serial = train_svc_ensemble(table, labels, spec, workers=1)
    parallel = train_svc_ensemble(table, labels, spec, workers=4)
    for a, b in zip(serial.parameters['members'], parallel.parameters['members']):
        assert np.array_equal(a['coef'], b['coef'])
        assert np.array_equal(a['intercept'], b['intercept'])
    assert np.array_equal(predict_days(serial, table), predict_days(parallel, table))


def test_member_seeds_differ():
    states = {tuple(member_seed(0, i).generate_state(2)) for i in range(20)}
    assert len(states) == 20


def test_decision_scores_only_for_linear_classifiers():
    table, labels, days = _blobs()
    model = train_model("rf_reg", table, days, table.feature_names, _settings("rf_reg"))
    with pytest.raises(ModelError):
        decision_scores(model, table)


@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_saved_model_predicts_identically(tmp_path, kind):
    table, labels, days = _blobs(spread=1.5)
    model = train_model(kind, table, days, table.feature_names, _settings(kind))
    model.fingerprint = "abc"
    path = tmp_path / f"{kind}.yaml"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.kind == ModelKind(kind)
    assert loaded.fingerprint == "abc"
    assert loaded.feature_names == model.feature_names
    assert np.array_equal(loaded.stats.mean, model.stats.mean)
    assert np.array_equal(predict_days(loaded, table), predict_days(model, table))


def test_load_model_rejects_foreign_documents(tmp_path):
    path = tmp_path / "other.yaml"
    path.write_text("format: something-else\nversion: 1\n", encoding='utf-8')
    with pytest.raises(ModelError):
        load_model(path)
    path.write_text("format: glioma-survival-model\nversion: 99\n", encoding='utf-8')
    with pytest.raises(ModelError):
        load_model(path)


def _hinge_dual_oracle(x, y, c, iterations=20000):
    """带偏置增广的 L1 损失 SVM 对偶问题的 FISTA 投影梯度解，返回 (原始目标, 对偶目标)"""
    augmented = np.column_stack([x, np.ones(len(x))])
    signed = augmented * y[:, None]
    q = signed @ signed.T
    step = 1.0 / np.linalg.eigvalsh(q).max()
    alpha = np.zeros(len(y))
    z = alpha.copy()
    t = 1.0
    for _ in range(iterations):
        updated = np.clip(z - step * (q @ z - 1.0), 0.0, c)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = updated + ((t - 1.0) / t_next) * (updated - alpha)
        alpha, t = updated, t_next
    w = signed.T @ alpha
    primal = _hinge_primal(augmented, y, w, c)
    dual = alpha.sum() - 0.5 * alpha @ q @ alpha
    return primal, dual


def _hinge_primal(augmented, y, w, c):
    return 0.5 * w @ w + c * np.maximum(0.0, 1.0 - y * (augmented @ w)).sum()


def test_svc_matches_dual_oracle():
    table, labels, _ = _blobs(n_per=15, spread=3.0, seed=4)
    c = 0.1
    model = train_svc_ovr(table, labels, c=c)
    x = design_matrix(model, table)
    augmented = np.column_stack([x, np.ones(len(x))])
    for k in range(3):
        y = np.where(labels == k, 1.0, -1.0)
        w = np.append(model.parameters['coef'][k], model.parameters['intercept'][k])
        ours = _hinge_primal(augmented, y, w, c)
        oracle_primal, oracle_dual = _hinge_dual_oracle(x, y, c)
        assert oracle_dual <= ours * (1.0 + 1e-9) + 1e-9
        assert ours <= oracle_primal * (1.0 + 1e-3)


def _affinely_rescaled(table):
    scales = np.array([3.0, 0.01, 250.0])
    offsets = np.array([-40.0, 7.5, 1e3])
    return FeatureTable(table.subject_ids, table.feature_names, table.values * scales + offsets)


@pytest.mark.parametrize("kind", ["linear", "logistic_ovr", "svc_ovr", "rf_clf", "svc_ensemble"])
def test_predictions_invariant_to_affine_feature_rescaling(kind):
    table, labels, days = _blobs(spread=1.5)
    rescaled = _affinely_rescaled(table)
    settings = _settings(kind)
    original = train_model(kind, table, days, table.feature_names, settings)
    refit = train_model(kind, rescaled, days, table.feature_names, settings)
    assert predict_class(refit, rescaled) == predict_class(original, table)
    if kind == "linear":
        assert np.allclose(predict_days(refit, rescaled), predict_days(original, table), rtol=1e-8)


def _duplicated_with_noise(table, seed):
    rng = np.random.default_rng(seed)
    copy = table.values + rng.normal(0.0, 0.1, size=table.values.shape)
    ids = table.subject_ids + [f"{sid}_dup" for sid in table.subject_ids]
    return FeatureTable(ids, table.feature_names, np.vstack([table.values, copy]))


def test_ensemble_keeps_up_with_single_svc():
    ensemble_scores, single_scores = [], []
    for seed in range(20):
        train, labels, _ = _blobs(n_per=20, spread=2.5, seed=seed)
        train = _duplicated_with_noise(train, seed)
        labels = np.concatenate([labels, labels])
        test, truth, _ = _blobs(n_per=30, spread=2.5, seed=100 + seed)
        single = train_svc_ovr(train, labels, c=1.0)
        spec = EnsembleSpec(n_members=25, subsample_fraction=0.8, base_c=1.0, master_seed=seed)
        ensemble = train_svc_ensemble(train, labels, spec)
        single_scores.append(np.mean(np.array([int(c) for c in predict_class(single, test)]) == truth))
        ensemble_scores.append(np.mean(np.array([int(c) for c in predict_class(ensemble, test)]) == truth))
    assert np.mean(ensemble_scores) >= np.mean(single_scores) - 0.02

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

from glioma_survival.core.evaluation import (
    accuracy,
    mse,
    spearman,
    stratified_kfold,
    fit_pipeline,
    survival_targets,
    cross_validate,
    random_holdout_split,
    holdout_evaluate,
    evaluate_resection,
    restrict_to_resection,
    compare_models,
    comparison_frame,
    write_cv_report,
    occurrence_projection,
    write_occurrence_maps,
)
from glioma_survival.core.predictors import classes_of
from glioma_survival.core.volume_io import merge_feature_tables
from glioma_survival.exceptions.custom_exceptions import EvaluationError
from glioma_survival.models.data_models import FeatureTable, ResectionStatus, SurvivalClass
from glioma_survival.utils.file import FileManager
from glioma_survival.utils.image import ImageProcessor


def _with_column(table, name, values):
    extra = FeatureTable(table.subject_ids, [name], np.asarray(values, dtype=np.float64).reshape(-1, 1))
    return merge_feature_tables(table, extra)


def test_metric_examples():
    assert accuracy([0, 1, 2], [0, 1, 1]) == pytest.approx(2.0 / 3.0)
    assert mse([1.0, 2.0], [3.0, 2.0]) == 2.0
    assert spearman([1.0, 2.0, 3.0], [10.0, 20.0, 30.0]) == (1.0, True)
    assert spearman([1.0, 2.0, 3.0], [30.0, 20.0, 10.0]) == (-1.0, True)


def test_spearman_undefined_for_constant_side():
    assert spearman([376.0, 376.0, 376.0], [10.0, 20.0, 30.0]) == (0.0, False)


@pytest.mark.parametrize("seed", range(5))
def test_spearman_matches_rank_correlation(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 6, size=25).astype(float)
    b = a + rng.integers(-3, 4, size=25)
    rho, defined = spearman(a, b)
    assert defined
    assert rho == pytest.approx(spearmanr(a, b)[0], abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_mse_and_accuracy_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 900, size=30)
    truth = rng.uniform(0, 900, size=30)
    assert mse(pred, truth) == pytest.approx(sum((p - t) ** 2 for p, t in zip(pred, truth)) / 30)
    pc, tc = classes_of(pred), classes_of(truth)
    assert accuracy(pc, tc) == pytest.approx(sum(int(p == t) for p, t in zip(pc, tc)) / 30)


def test_metric_input_errors():
    with pytest.raises(EvaluationError):
        accuracy([0, 1], [0])
    with pytest.raises(EvaluationError):
        mse([], [])
    with pytest.raises(EvaluationError):
        spearman([1.0], [2.0])


def test_stratified_folds_balance_classes_and_sizes():
    y = np.array([0] * 13 + [1] * 7 + [2] * 9)
    assignment = stratified_kfold(y, k=5, seed=3)
    sizes = [len(assignment.test_indices(f)) for f in range(5)]
    assert max(sizes) - min(sizes) <= 1
    for c in range(3):
        per_fold = [int((y[assignment.test_indices(f)] == c).sum()) for f in range(5)]
        assert max(per_fold) - min(per_fold) <= 1
    assert sorted(np.concatenate([assignment.test_indices(f) for f in range(5)]).tolist()) == list(range(len(y)))


def test_stratified_folds_balance_over_many_label_vectors():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        k = int(rng.integers(2, 8))
        counts = k + rng.integers(0, 40, size=3)
        y = rng.permutation(np.repeat(np.arange(3), counts))
        assignment = stratified_kfold(y, k=k, seed=trial)
        sizes = np.bincount(assignment.folds, minlength=k)
        assert sizes.sum() == len(y)
        assert sizes.max() - sizes.min() <= 1
        for c in range(3):
            per_fold = np.bincount(assignment.folds[y == c], minlength=k)
            assert per_fold.max() - per_fold.min() <= 1


def test_stratified_folds_are_deterministic():
    y = np.array([0, 1, 2] * 10)
    a = stratified_kfold(y, k=5, seed=np.random.SeedSequence([0, 1]))
    b = stratified_kfold(y, k=5, seed=np.random.SeedSequence([0, 1]))
    c = stratified_kfold(y, k=5, seed=np.random.SeedSequence([0, 2]))
    assert np.array_equal(a.folds, b.folds)
    assert not np.array_equal(a.folds, c.folds)


def test_stratified_folds_need_enough_members():
    with pytest.raises(EvaluationError):
        stratified_kfold([0] * 10 + [1] * 3 + [2] * 10, k=5)
    with pytest.raises(EvaluationError):
        stratified_kfold([0, 1, 2], k=1)


def test_survival_targets_follow_table_order(cohort_table):
    table, records = cohort_table
    reordered = list(reversed(records))
    days = survival_targets(table, reordered)
    assert days[0] == records[0].survival_days


def test_cross_validation_with_oracle_feature_is_perfect(cohort_table, settings_for):
    table, records = cohort_table
    table = _with_column(table, "oracle", [r.survival_days for r in records])
    settings = settings_for(
        selection={'method': 'fixed', 'fixed_features': ['oracle']},
        model={'kind': 'linear'},
    )
    report = cross_validate(settings, table, records, k=5, repeats=2, seed=0)
    assert len(report.records) == 10
    assert report.mean('accuracy') == 1.0
    assert report.mean('mse') < 1e-6
    assert report.mean('spearman') == pytest.approx(1.0)
    assert [(r.repetition, r.fold) for r in report.records] == [(r, f) for r in range(2) for f in range(5)]


def test_cross_validation_is_independent_of_worker_count(cohort_table, settings_for):
    table, records = cohort_table
    settings = settings_for(selection={'method': 'univariate', 'k_features': 5}, model={'kind': 'svc_ovr'})
    serial = cross_validate(settings, table, records, k=3, repeats=2, workers=1)
    parallel = cross_validate(settings, table, records, k=3, repeats=2, workers=3)
    assert serial.records == parallel.records
    assert serial.mean('accuracy') > 0.6


def test_holdout_canary_never_reaches_the_model(cohort_table, settings_for):
    table, records = cohort_table
    settings = settings_for(selection={'method': 'univariate', 'k_features': 5}, model={'kind': 'svc_ovr'})
    train_ids, holdout_ids = random_holdout_split(table.subject_ids, 33, seed=1)
    holdout = set(holdout_ids)
    truth = classes_of([r.survival_days for r in records])
    canary = [float(c) if sid in holdout else 0.0 for sid, c in zip(table.subject_ids, truth)]
    marked = _with_column(table, "canary", canary)

    plain = holdout_evaluate(settings, table.select_subjects(train_ids), table.select_subjects(holdout_ids), records)
    leaked = holdout_evaluate(settings, marked.select_subjects(train_ids), marked.select_subjects(holdout_ids), records)
    assert leaked == plain

    train = marked.select_subjects(train_ids)
    fitted = fit_pipeline(settings, train, survival_targets(train, records))
    assert "canary" not in fitted.model.stats.usable


def test_random_holdout_split(cohort_table):
    table, _ = cohort_table
    train, holdout = random_holdout_split(table.subject_ids, 33, seed=4)
    assert len(holdout) == 33
    assert len(train) == 130
    assert not set(train) & set(holdout)
    assert random_holdout_split(table.subject_ids, 33, seed=4) == (train, holdout)
    with pytest.raises(EvaluationError):
        random_holdout_split(["a", "b"], 2)


def test_holdout_rejects_overlap_and_empty(cohort_table, settings_for):
    table, records = cohort_table
    settings = settings_for(selection={'method': 'univariate', 'k_features': 3}, model={'kind': 'linear'})
    ids = table.subject_ids
    with pytest.raises(EvaluationError):
        holdout_evaluate(settings, table.select_subjects(ids[:100]), table.select_subjects(ids[90:]), records)
    with pytest.raises(EvaluationError):
        holdout_evaluate(settings, table.select_subjects(ids[:100]), table.select_subjects([]), records)
    metrics = holdout_evaluate(settings, table.select_subjects(ids[:100]), table.select_subjects(ids[90:]),
                               records, allow_overlap=True)
    assert metrics.n_subjects == len(ids) - 90


def test_resection_holdout_scores_only_gtr(cohort_table, settings_for):
    table, records = cohort_table
    settings = settings_for(selection={'method': 'univariate', 'k_features': 5}, model={'kind': 'svc_ovr'})
    _, holdout_ids = random_holdout_split(table.subject_ids, 33, seed=2)
    gtr = {r.id for r in restrict_to_resection(records, "GTR")}
    metrics = evaluate_resection(settings, table, records, holdout_ids, ResectionStatus.GTR)
    assert metrics.n_subjects == len([sid for sid in holdout_ids if sid in gtr])
    assert all(r.resection_status == ResectionStatus.GTR for r in restrict_to_resection(records))


def test_compare_models_and_reports(tmp_path, cohort_table, settings_for):
    table, records = cohort_table
    settings = settings_for(selection={'method': 'univariate', 'k_features': 4}, evaluation={'repeats': 1, 'k_folds': 3})
    reports = compare_models(settings, table, records, ["linear", "svc_ovr"])
    assert list(reports) == ["linear", "svc_ovr"]
    assert settings.model.kind == "svc_ensemble"
    frame = comparison_frame(reports)
    assert frame['model'].tolist() == ["linear", "svc_ovr"]
    assert {'accuracy_mean', 'mse_std', 'spearman_mean'} <= set(frame.columns)

    records_path, summary_path = write_cv_report(reports["linear"], tmp_path / "cv", stem="cv_linear")
    assert FileManager.read_fingerprint(records_path) == reports["linear"].fingerprint != settings.fingerprint()
    assert len(FileManager.read_csv(records_path)) == 3
    summary = yaml.safe_load(summary_path.read_text(encoding='utf-8'))
    assert summary['n_records'] == 3
    assert summary['model_kind'] == "linear"
    assert set(summary['accuracy']) == {'mean', 'std'}


def _masks(seed, n, shape=(6, 5, 4)):
    rng = np.random.default_rng(seed)
    return [rng.random(shape) > 0.7 for _ in range(n)]


def test_occurrence_counts_are_additive():
    groups = {SurvivalClass.SHORT: _masks(0, 3), SurvivalClass.MID: _masks(1, 2), SurvivalClass.LONG: _masks(2, 4)}
    maps = occurrence_projection(groups, mode="sum")
    assert set(maps.counts) == {"short", "mid", "long", "all"}
    assert np.array_equal(maps.counts["all"], maps.counts["short"] + maps.counts["mid"] + maps.counts["long"])
    assert np.array_equal(maps.counts["short"], np.sum(groups[SurvivalClass.SHORT], axis=0))
    for direction in ("sagittal", "coronal", "axial"):
        total = sum(maps.projections[(g, direction)] for g in ("short", "mid", "long"))
        assert np.array_equal(maps.projections[("all", direction)], total)
    assert maps.projections[("all", "axial")].shape == (6, 5)


def test_occurrence_doubling_cohort_doubles_counts():
    masks = _masks(5, 3)
    single = occurrence_projection({"short": masks}, mode="max")
    double = occurrence_projection({"short": masks + masks}, mode="max")
    assert np.array_equal(double.counts["short"], 2 * single.counts["short"])
    assert np.array_equal(double.projections[("short", "coronal")], 2 * single.projections[("short", "coronal")])


def test_occurrence_errors():
    with pytest.raises(EvaluationError):
        occurrence_projection({"short": [np.zeros((2, 2, 2)), np.zeros((3, 2, 2))]})
    with pytest.raises(EvaluationError):
        occurrence_projection({"short": []})
    with pytest.raises(EvaluationError):
        occurrence_projection({"short": _masks(0, 1)}, mode="mean")


def test_write_occurrence_maps(tmp_path):
    groups = {SurvivalClass.SHORT: _masks(0, 3), SurvivalClass.MID: _masks(1, 2), SurvivalClass.LONG: _masks(2, 1)}
    maps = occurrence_projection(groups, mode="max")
    written = write_occurrence_maps(maps, tmp_path / "occurrence", fingerprint="beef")
    assert len(written) == 4 * 3 * 2
    image = ImageProcessor.load_image(tmp_path / "occurrence" / "occurrence_all_axial.pgm")
    assert image.shape == (6, 5)
    assert image.max() == 255
    counts = FileManager.read_csv(tmp_path / "occurrence" / "occurrence_all_axial.csv", header=None).to_numpy()
    assert np.array_equal(counts, maps.projections[("all", "axial")])


@pytest.mark.slow
def test_challenge_configuration_beats_age_baseline(cohort_table, settings_for):
    table, records = cohort_table
    challenge = settings_for(
        selection={'method': 'model_based_l1svc', 'k_features': 30},
        model={'kind': 'svc_ensemble'},
    )
    baseline = settings_for(
        selection={'method': 'fixed', 'fixed_features': ['Age']},
        model={'kind': 'logistic_ovr'},
    )
    ensemble = cross_validate(challenge, table, records, k=5, repeats=2, seed=0, workers=2)
    age_only = cross_validate(baseline, table, records, k=5, repeats=2, seed=0, workers=2)
    assert ensemble.mean('accuracy') >= 0.90
    assert ensemble.mean('spearman') >= 0.80
    assert ensemble.mean('accuracy') >= age_only.mean('accuracy') + 0.15

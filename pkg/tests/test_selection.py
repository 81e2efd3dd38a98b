import numpy as np
import pytest

from glioma_survival.core.predictors import classes_of
from glioma_survival.core.synthetic import make_cohort
from glioma_survival.core.selection import (
    fit_standardization,
    standardize,
    expand_clinical,
    univariate_scores,
    stepwise_select,
    l1_svc_select,
    fixed_selection,
    run_selection,
    selection_overlap,
    describe_feature,
    write_selection,
    read_selection,
)
from glioma_survival.exceptions.custom_exceptions import SelectionError
from glioma_survival.models.data_models import FeatureTable, SelectionMethod, SelectionResult
from glioma_survival.utils.file import FileManager

SIGNAL = {"signal_00", "signal_01", "signal_02", "signal_03"}


def _linear_problem(n=60, p=25, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    y = 2.0 * x[:, 3] - 3.0 * x[:, 17] + 0.01 * rng.normal(size=n)
    names = [f"f{j:02d}" for j in range(p)]
    return FeatureTable(subject_ids=[f"s{i}" for i in range(n)], feature_names=names, values=x), y


def _noisy_cohort():
    return make_cohort(n=163, n_features=40, signal_features=4, noise=0.5, seed=2)


def _rescaled(table, seed=5):
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.1, 50.0, size=table.n_features)
    shift = rng.uniform(-100.0, 100.0, size=table.n_features)
    return FeatureTable(table.subject_ids, table.feature_names, table.values * scale + shift)


def test_standardization_uses_training_rows_and_drops_constants():
    table = FeatureTable(["a", "b", "c"], ["x", "k"], [[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    stats = fit_standardization(table)
    x, usable = standardize(table, stats)
    assert usable == ["x"]
    assert np.allclose(x.ravel(), np.array([-1.0, 0.0, 1.0]) / np.std([1.0, 2.0, 3.0]))


def test_expand_clinical_indicators():
    table = FeatureTable(["a", "b", "c"], ["Age", "ResectionStatus"], [[50, 0], [60, 1], [70, 2]])
    expanded = expand_clinical(table)
    assert expanded.feature_names == ["Age", "ResectionStatus_GTR", "ResectionStatus_STR"]
    assert expanded.column("ResectionStatus_GTR").tolist() == [0.0, 1.0, 0.0]
    assert expanded.column("ResectionStatus_STR").tolist() == [0.0, 0.0, 1.0]
    assert expanded.provenance["ResectionStatus_GTR"] == "clinical"
    assert expand_clinical(expanded).equals(expanded)


def test_univariate_perfect_separation_and_constant():
    y = np.array([0, 0, 1, 1, 2, 2])
    table = FeatureTable([f"s{i}" for i in range(6)], ["sep", "const", "noisy"],
                         np.column_stack([y * 10.0, np.ones(6), [1.0, 3.0, 2.0, 1.0, 3.0, 2.0]]))
    result = univariate_scores(table, y, k=2)
    assert result.selected == ["sep", "noisy"]
    assert result.scores["const"] == 0.0
    assert np.isfinite(result.scores["sep"])
    assert result.method == SelectionMethod.UNIVARIATE


def test_univariate_needs_two_classes():
    table = FeatureTable(["a", "b"], ["x"], [[1.0], [2.0]])
    with pytest.raises(SelectionError):
        univariate_scores(table, [1, 1])


def test_univariate_recovers_planted_signal(cohort_table):
    table, records = cohort_table
    y = classes_of([r.survival_days for r in records])
    result = univariate_scores(table, y, k=4)
    assert set(result.selected) == SIGNAL


def test_univariate_invariant_to_affine_rescaling(cohort_table):
    table, records = cohort_table
    y = classes_of([r.survival_days for r in records])
    a = univariate_scores(table, y, k=10)
    b = univariate_scores(_rescaled(table), y, k=10)
    assert a.selected == b.selected


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_stepwise_recovers_linear_support(direction):
    table, y = _linear_problem()
    result = stepwise_select(table, y, direction=direction, k=2)
    assert set(result.selected) == {"f03", "f17"}
    assert result.selected[0] == "f17"
    assert result.method == SelectionMethod.STEPWISE
    assert result.history


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_stepwise_k_zero_selects_nothing(direction):
    table, y = _linear_problem(p=6)
    assert stepwise_select(table, y, direction=direction, k=0).selected == []


def test_stepwise_needs_more_subjects_than_k():
    table, y = _linear_problem(n=10, p=12)
    with pytest.raises(SelectionError):
        stepwise_select(table, y, k=9)
    with pytest.raises(SelectionError):
        stepwise_select(table, y, direction="sideways", k=2)


def test_l1_svc_prefers_signal_features():
    table, records = _noisy_cohort()
    y = classes_of([r.survival_days for r in records])
    result = l1_svc_select(table, y, c=0.05, k=4)
    assert result.selected[0] in SIGNAL
    assert len(set(result.selected) & SIGNAL) >= 2
    assert result.method == SelectionMethod.MODEL_BASED_L1SVC
    assert all(result.scores[name] > 0 for name in result.selected)


def test_l1_svc_recovers_planted_features_across_cohorts():
    recovered = 0
    for seed in range(20):
        table, records = make_cohort(n=200, n_features=48, signal_features=2, noise=0.5, seed=seed)
        assert table.n_features == 50
        y = classes_of([r.survival_days for r in records])
        top = set(l1_svc_select(table, y, c=0.1, k=5).selected)
        recovered += {"signal_00", "signal_01"} <= top
    assert recovered >= 19


def test_l1_svc_nonzero_count_grows_with_c():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 12))
    score = 1.5 * x[:, 0] - x[:, 1] + 0.5 * x[:, 2] + 0.3 * rng.normal(size=200)
    y = np.digitize(score, np.quantile(score, [1.0 / 3.0, 2.0 / 3.0]))
    table = FeatureTable([f"s{i}" for i in range(200)], [f"f{j:02d}" for j in range(12)], x)
    counts = [len(l1_svc_select(table, y, c=c, k=12).selected) for c in (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)]
    assert counts[0] >= 1
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_l1_svc_top_features_invariant_to_rescaling():
    table, records = _noisy_cohort()
    y = classes_of([r.survival_days for r in records])
    a = l1_svc_select(table, y, c=0.05, k=3)
    b = l1_svc_select(_rescaled(table), y, c=0.05, k=3)
    assert set(a.selected) == set(b.selected)


def test_l1_svc_all_zero_weights():
    table, records = _noisy_cohort()
    y = classes_of([r.survival_days for r in records])
    with pytest.raises(SelectionError):
        l1_svc_select(table, y, c=1e-8, k=4)


def test_fixed_selection():
    table, _ = _linear_problem(p=4)
    assert fixed_selection(table, ["f02", "f00"]).selected == ["f02", "f00"]
    with pytest.raises(SelectionError):
        fixed_selection(table, ["Age"])


def test_run_selection_dispatch(cohort_table):
    table, records = cohort_table
    days = np.array([r.survival_days for r in records])
    y = classes_of(days)
    assert run_selection(table, y, days, "univariate", k=3).method == SelectionMethod.UNIVARIATE
    assert run_selection(table, y, days, "stepwise", k=3).method == SelectionMethod.STEPWISE
    assert run_selection(table, y, days, "fixed", k=3, fixed_features=["Age"]).selected == ["Age"]
    with pytest.raises(ValueError):
        run_selection(table, y, days, "lasso", k=3)


def test_selection_overlap_is_jaccard():
    results = {
        "a": SelectionResult(selected=["x", "y"], scores={}, method=SelectionMethod.FIXED),
        "b": SelectionResult(selected=["y", "z"], scores={}, method=SelectionMethod.FIXED),
    }
    frame = selection_overlap(results)
    assert frame.loc["a", "b"] == pytest.approx(1.0 / 3.0)
    assert frame.loc["a", "a"] == 1.0


@pytest.mark.parametrize("name,expected", [
    ("Age", ("Age", "Clinical", "", "")),
    ("ResectionStatus_GTR", ("Resection Status GTR", "Clinical", "", "")),
    ("ET_T1c_glcm_Idmn", ("Inverse Difference Moment Normalized", "Intensity", "ET", "T1c")),
    ("NCR_FLAIR_firstorder_10Percentile", ("10th Percentile", "Intensity", "NCR/NET", "Flair")),
    ("ED_T2_glszm_SmallAreaEmphasis", ("Small Area Emphasis", "Intensity", "ED", "T2")),
    ("NCR_shape_SurfaceVolumeRatio", ("Surface Volume Ratio", "Shape", "NCR/NET", "")),
    ("ET_rim_Q3Q1Ratio", ("Rim Width Q3/Q1 Ratio", "Shape", "ET", "")),
    ("WT_ratio_ET_WT", ("Volume Ratio ET/WT", "Shape", "", "")),
    ("atlas_Left-Thalamus", ("Left Thalamus", "Atlas", "", "")),
    ("radiologist_score", ("radiologist_score", "External", "", "")),
])
def test_describe_feature(name, expected):
    assert describe_feature(name) == expected


def test_describe_feature_diameter_slice_counts_as_intensity():
    assert describe_feature("ED_shape_Maximum2DDiameterSlice")[1] == "Intensity"


def test_selection_file_round_trip(tmp_path, cohort_table):
    table, records = cohort_table
    y = classes_of([r.survival_days for r in records])
    result = univariate_scores(table, y, k=5)
    path = tmp_path / "selection.csv"
    write_selection(result, path, fingerprint="f00d")
    assert FileManager.read_fingerprint(path) == "f00d"
    loaded = read_selection(path)
    assert loaded.selected == result.selected
    assert loaded.method == SelectionMethod.UNIVARIATE
    for name in result.selected:
        assert loaded.scores[name] == pytest.approx(result.scores[name], rel=1e-12)


def test_read_selection_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("feature,score\nAge,1\n", encoding='utf-8')
    with pytest.raises(SelectionError):
        read_selection(path)

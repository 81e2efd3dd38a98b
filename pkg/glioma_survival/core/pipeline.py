"""命令行各子命令的流程编排"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config.config import PipelineConfig
from ..exceptions.custom_exceptions import FingerprintMismatchError, EvaluationError
from ..models.data_models import FeatureTable, SubjectRecord, SurvivalClass
from ..utils.file import FileManager
from ..utils.logging import logger
from . import evaluation
from .extractor import FeatureExtractor, write_failures, subject_ce_mask
from .predictors import classes_of, predict_class, predict_days, save_model, load_model, train_model
from .selection import expand_clinical, run_selection, write_selection, read_selection
from .volume_io import read_cohort_csv, read_feature_table, write_feature_table

FEATURES_FILE = "features.csv"
ERRORS_FILE = "extraction_errors.csv"
SELECTION_FILE = "selection.csv"
MODEL_FILE = "model.yaml"
PREDICTIONS_FILE = "predictions.csv"


def _output(settings: PipelineConfig, name: str) -> Path:
    FileManager.ensure_dir(settings.output_dir)
    return Path(settings.output_dir) / name


def load_table(settings: PipelineConfig, table_path: Optional[Path] = None) -> Tuple[FeatureTable, Optional[str]]:
    """读取特征表及其指纹；与当前提取配置不一致时给出警告"""
    path = Path(table_path) if table_path else _output(settings, FEATURES_FILE)
    table = read_feature_table(path)
    fingerprint = FileManager.read_fingerprint(path)
    if fingerprint and fingerprint != settings.extraction_fingerprint():
        logger.warning(f"特征表 {path.name} 的提取指纹 {fingerprint} 与当前配置 {settings.extraction_fingerprint()} 不一致")
    return table, fingerprint


def labelled(table: FeatureTable, records: Sequence[SubjectRecord]) -> Tuple[FeatureTable, List[SubjectRecord]]:
    """只保留有生存天数的受试者"""
    known = {r.id: r for r in records if r.survival_days is not None}
    ids = [sid for sid in table.subject_ids if sid in known]
    if not ids:
        raise EvaluationError("特征表中没有带生存天数的受试者")
    dropped = table.n_subjects - len(ids)
    if dropped:
        logger.info(f"{dropped} 个受试者没有生存天数，不参与训练与评估")
    return table.select_subjects(ids), [known[sid] for sid in ids]


def cmd_extract(settings: PipelineConfig, progress: bool = True) -> Path:
    """提取全部受试者的特征表"""
    records = read_cohort_csv(Path(settings.data.cohort_csv))
    extractor = FeatureExtractor(settings)
    table, failures, _ = extractor.extract(records, workers=settings.workers, progress=progress)
    fingerprint = settings.extraction_fingerprint()
    path = _output(settings, FEATURES_FILE)
    write_feature_table(table, path, fingerprint=fingerprint)
    write_failures(failures, _output(settings, ERRORS_FILE), fingerprint=fingerprint)
    if failures:
        logger.warning(f"{len(failures)} 个受试者提取失败，详见 {ERRORS_FILE}")
    logger.info(f"特征表已保存: {path} ({table.n_subjects} × {table.n_features})")
    return path


def cmd_select(settings: PipelineConfig, table_path: Optional[Path] = None) -> Path:
    """在全部带标签受试者上做特征选择"""
    table, _ = load_table(settings, table_path)
    records = read_cohort_csv(Path(settings.data.cohort_csv))
    table, records = labelled(table, records)
    table = expand_clinical(table)
    y_days = evaluation.survival_targets(table, records)
    s = settings.selection
    result = run_selection(
        table,
        classes_of(y_days),
        y_days,
        method=s.method,
        k=s.k_features,
        c=s.c,
        direction=s.stepwise_direction,
        fixed_features=s.fixed_features,
        seed=settings.model.seed,
    )
    path = _output(settings, SELECTION_FILE)
    write_selection(result, path, fingerprint=settings.fingerprint())
    logger.info(f"选出 {len(result.selected)} 个特征 ({result.method.value}): {result.selected[:5]} ...")
    return path


def cmd_train(
    settings: PipelineConfig,
    table_path: Optional[Path] = None,
    selection_path: Optional[Path] = None,
    progress: bool = True
) -> Path:
    """训练模型；给出选择结果文件时使用其特征，否则在训练数据上重新选择"""
    table, table_fingerprint = load_table(settings, table_path)
    records = read_cohort_csv(Path(settings.data.cohort_csv))
    table, records = labelled(table, records)
    y_days = evaluation.survival_targets(table, records)
    if selection_path:
        selection_fingerprint = FileManager.read_fingerprint(Path(selection_path))
        if selection_fingerprint and selection_fingerprint != settings.fingerprint():
            raise FingerprintMismatchError(
                f"选择结果 {selection_path} 的指纹 {selection_fingerprint} 与当前配置 {settings.fingerprint()} 不一致"
            )
        selected = read_selection(Path(selection_path)).selected
        model = train_model(
            settings.model.kind, expand_clinical(table), y_days, selected, settings,
            workers=settings.workers, progress=progress,
        )
    else:
        model = evaluation.fit_pipeline(settings, table, y_days, workers=settings.workers).model
    model.fingerprint = settings.fingerprint()
    model.feature_fingerprint = table_fingerprint
    path = _output(settings, MODEL_FILE)
    save_model(model, path)
    return path


def cmd_predict(settings: PipelineConfig, model_path: Path, table_path: Optional[Path] = None) -> Path:
    """用已保存的模型预测（拒绝混用不同指纹的产物）"""
    model = load_model(Path(model_path))
    table, table_fingerprint = load_table(settings, table_path)
    if model.fingerprint and model.fingerprint != settings.fingerprint():
        raise FingerprintMismatchError(f"模型指纹 {model.fingerprint} 与当前配置 {settings.fingerprint()} 不一致")
    if model.feature_fingerprint and table_fingerprint and model.feature_fingerprint != table_fingerprint:
        raise FingerprintMismatchError(
            f"模型训练时的特征表指纹 {model.feature_fingerprint} 与输入特征表 {table_fingerprint} 不一致"
        )
    table = expand_clinical(table)
    days = predict_days(model, table)
    classes = predict_class(model, table)
    frame = pd.DataFrame({
        'subject_id': table.subject_ids,
        'predicted_days': days,
        'predicted_class': [c.label for c in classes],
    })
    path = _output(settings, PREDICTIONS_FILE)
    FileManager.write_csv(frame, path, fingerprint=settings.fingerprint())
    logger.info(f"预测结果已保存: {path} ({len(frame)} 个受试者)")
    return path


def cmd_cv(
    settings: PipelineConfig,
    table_path: Optional[Path] = None,
    models: Optional[Sequence[str]] = None,
    progress: bool = True
) -> List[Path]:
    """重复分层交叉验证；给出多个模型种类时输出比较表"""
    table, _ = load_table(settings, table_path)
    records = read_cohort_csv(Path(settings.data.cohort_csv))
    table, records = labelled(table, records)
    written = []
    if models:
        reports = evaluation.compare_models(settings, table, records, models, workers=settings.workers, progress=progress)
        for kind, report in reports.items():
            written += list(evaluation.write_cv_report(report, settings.output_dir, stem=f"cv_{kind}"))
        comparison = _output(settings, "cv_comparison.csv")
        FileManager.write_csv(evaluation.comparison_frame(reports), comparison, fingerprint=settings.fingerprint())
        written.append(comparison)
    else:
        report = evaluation.cross_validate(settings, table, records, workers=settings.workers, progress=progress)
        written += list(evaluation.write_cv_report(report, settings.output_dir))
    return written


def cmd_holdout(settings: PipelineConfig, table_path: Optional[Path] = None) -> Path:
    """随机留出集评估（可只在GTR受试者上评估）"""
    table, _ = load_table(settings, table_path)
    records = read_cohort_csv(Path(settings.data.cohort_csv))
    table, records = labelled(table, records)
    v = settings.evaluation
    train_ids, holdout_ids = evaluation.random_holdout_split(table.subject_ids, v.holdout_size, v.seed)
    if v.gtr_only:
        metrics = evaluation.evaluate_resection(settings, table, records, holdout_ids, workers=settings.workers)
    else:
        metrics = evaluation.holdout_evaluate(
            settings,
            table.select_subjects(train_ids),
            table.select_subjects(holdout_ids),
            records,
            workers=settings.workers,
        )
    summary = {
        'fingerprint': settings.fingerprint(),
        'model_kind': settings.model.kind,
        'gtr_only': v.gtr_only,
        'n_train': len(train_ids),
        'n_holdout': metrics.n_subjects,
        'accuracy': metrics.accuracy,
        'mse': metrics.mse,
        'spearman': metrics.spearman,
        'spearman_defined': metrics.spearman_defined,
        'holdout_ids': list(holdout_ids),
    }
    path = _output(settings, "holdout_summary.yaml")
    FileManager.write_yaml(summary, path)
    return path


def cmd_report(settings: PipelineConfig) -> List[Path]:
    """按生存期类别累计增强肿瘤出现次数并输出投影图"""
    records = [r for r in read_cohort_csv(Path(settings.data.cohort_csv)) if r.survival_days is not None]
    if not records:
        raise EvaluationError("队列中没有带生存天数的受试者")
    extractor = FeatureExtractor(settings)
    masks: Dict[SurvivalClass, List[np.ndarray]] = {c: [] for c in SurvivalClass}
    for record in records:
        masks[record.survival_class].append(subject_ce_mask(extractor, record.id))
    maps = evaluation.occurrence_projection(masks, mode=settings.report.projection)
    return evaluation.write_occurrence_maps(maps, Path(settings.output_dir) / "occurrence", fingerprint=settings.fingerprint())

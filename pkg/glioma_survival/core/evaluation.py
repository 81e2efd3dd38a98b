"""评估指标、重复分层交叉验证、留出集评估与增强肿瘤出现次数图"""

import copy
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from ..config.config import PipelineConfig
from ..exceptions.custom_exceptions import EvaluationError
from ..models.data_models import (
    FeatureTable,
    SubjectRecord,
    ResectionStatus,
    SurvivalClass,
    SelectionResult,
    TrainedModel,
    MetricTriple,
    FoldAssignment,
    FoldRecord,
    CVReport,
    OccurrenceMaps,
)
from ..utils.file import FileManager
from ..utils.image import ImageProcessor
from ..utils.logging import logger
from .predictors import classes_of, predict_class, predict_days, train_model
from .selection import expand_clinical, run_selection

SeedLike = Union[int, np.random.SeedSequence]

# 投影方向名 → 被压缩的体素轴
PROJECTION_AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
ALL_GROUP = "all"


def _check_lengths(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise EvaluationError(f"预测与真值长度不一致: {len(a)} != {len(b)}")
    if len(a) == 0:
        raise EvaluationError("预测为空")


def accuracy(pred: Sequence, truth: Sequence) -> float:
    """类别预测的准确率"""
    _check_lengths(pred, truth)
    matches = sum(int(p) == int(t) for p, t in zip(pred, truth))
    return matches / len(truth)


def mse(pred_days: Sequence[float], truth_days: Sequence[float]) -> float:
    """均方误差（天²）"""
    _check_lengths(pred_days, truth_days)
    diff = np.asarray(pred_days, dtype=np.float64) - np.asarray(truth_days, dtype=np.float64)
    return float(np.mean(diff * diff))


def spearman(pred_days: Sequence[float], truth_days: Sequence[float]) -> Tuple[float, bool]:
    """Spearman 秩相关（平均秩），任一侧秩方差为0时返回 (0, False)"""
    _check_lengths(pred_days, truth_days)
    if len(pred_days) < 2:
        raise EvaluationError("Spearman 系数至少需要2个样本")
    a = stats.rankdata(np.asarray(pred_days, dtype=np.float64))
    b = stats.rankdata(np.asarray(truth_days, dtype=np.float64))
    a = a - a.mean()
    b = b - b.mean()
    denominator = np.sqrt((a * a).sum() * (b * b).sum())
    if denominator == 0:
        logger.warning("秩方差为0，Spearman 系数未定义，记为0")
        return 0.0, False
    return float(np.clip((a * b).sum() / denominator, -1.0, 1.0)), True


def stratified_kfold(y_class: Sequence[int], k: int = 5, seed: SeedLike = 0) -> FoldAssignment:
    """类内随机打乱后轮转分配折号

    各类依次分配，每类从上一类结束处的折继续，保证每折每类数量与比例相差不超过1。
    """
    y = np.asarray(y_class, dtype=np.int64)
    if k < 2:
        raise EvaluationError(f"折数必须 ≥ 2: {k}")
    rng = np.random.default_rng(seed)
    folds = np.full(len(y), -1, dtype=np.int64)
    start = 0
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if len(members) < k:
            raise EvaluationError(f"类别 {SurvivalClass(int(c)).label} 只有 {len(members)} 个受试者，少于折数 {k}")
        members = rng.permutation(members)
        folds[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    return FoldAssignment(folds=folds, k=k)


@dataclass
class FittedPipeline:
    """在训练行上拟合的选择结果与模型"""
    selection: SelectionResult
    model: TrainedModel


def survival_targets(table: FeatureTable, records: Sequence[SubjectRecord]) -> np.ndarray:
    """按特征表受试者顺序取生存天数"""
    days = {r.id: r.survival_days for r in records}
    missing = [sid for sid in table.subject_ids if days.get(sid) is None]
    if missing:
        raise EvaluationError(f"以下受试者缺少生存天数: {missing[:5]}")
    return np.array([days[sid] for sid in table.subject_ids], dtype=np.float64)


def fit_pipeline(
    settings: PipelineConfig,
    table: FeatureTable,
    y_days: Sequence[float],
    workers: int = 1
) -> FittedPipeline:
    """特征选择 + 模型训练，统计量只使用给定的行"""
    table = expand_clinical(table)
    y_days = np.asarray(y_days, dtype=np.float64)
    s = settings.selection
    selection = run_selection(
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
    model = train_model(settings.model.kind, table, y_days, selection.selected, settings, workers=workers)
    return FittedPipeline(selection=selection, model=model)


def evaluate_model(model: TrainedModel, table: FeatureTable, y_days: Sequence[float]) -> MetricTriple:
    """模型在给定行上的准确率、MSE与Spearman（分类器先换算成天数）"""
    table = expand_clinical(table)
    y_days = np.asarray(y_days, dtype=np.float64)
    predicted_class = predict_class(model, table)
    predicted_days = predict_days(model, table)
    rho, defined = spearman(predicted_days, y_days)
    return MetricTriple(
        accuracy=accuracy(predicted_class, classes_of(y_days)),
        mse=mse(predicted_days, y_days),
        spearman=rho,
        spearman_defined=defined,
        n_subjects=len(y_days),
    )


def repetition_seed(seed: int, repetition: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(repetition)])


def cross_validate(
    settings: PipelineConfig,
    table: FeatureTable,
    records: Sequence[SubjectRecord],
    k: Optional[int] = None,
    repeats: Optional[int] = None,
    seed: Optional[int] = None,
    workers: int = 1,
    progress: bool = False
) -> CVReport:
    """重复分层 k 折交叉验证

    每一折只在训练行上拟合选择与标准化，在留出折上计算指标。
    (重复, 折) 任务并行执行，结果按键排序，与线程数无关。
    """
    v = settings.evaluation
    k = v.k_folds if k is None else k
    repeats = v.repeats if repeats is None else repeats
    seed = v.seed if seed is None else seed
    y_days = survival_targets(table, records)
    y_class = classes_of(y_days)

    assignments = [stratified_kfold(y_class, k, repetition_seed(seed, r)) for r in range(repeats)]

    def run_fold(repetition: int, fold: int) -> FoldRecord:
        assignment = assignments[repetition]
        train_rows = assignment.train_indices(fold)
        test_rows = assignment.test_indices(fold)
        train_ids = [table.subject_ids[i] for i in train_rows]
        test_ids = [table.subject_ids[i] for i in test_rows]
        fitted = fit_pipeline(settings, table.select_subjects(train_ids), y_days[train_rows])
        metrics = evaluate_model(fitted.model, table.select_subjects(test_ids), y_days[test_rows])
        return FoldRecord(
            repetition=repetition,
            fold=fold,
            accuracy=metrics.accuracy,
            mse=metrics.mse,
            spearman=metrics.spearman,
            spearman_defined=metrics.spearman_defined,
        )

    tasks = [(r, f) for r in range(repeats) for f in range(k)]
    records_by_key: Dict[Tuple[int, int], FoldRecord] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(run_fold, r, f): (r, f) for r, f in tasks}
        for future in tqdm(as_completed(futures), total=len(futures), desc="交叉验证",
                           disable=not progress):
            records_by_key[futures[future]] = future.result()

    report = CVReport(
        records=[records_by_key[key] for key in sorted(records_by_key)],
        fingerprint=settings.fingerprint(),
        model_kind=str(settings.model.kind),
    )
    logger.info(
        f"交叉验证完成 ({settings.model.kind}, {repeats}×{k}): "
        f"accuracy={report.mean('accuracy'):.3f}±{report.std('accuracy'):.3f}, "
        f"mse={report.mean('mse'):.0f}, spearman={report.mean('spearman'):.3f}"
    )
    return report


def random_holdout_split(
    subject_ids: Sequence[str],
    n_holdout: int = 33,
    seed: int = 0
) -> Tuple[List[str], List[str]]:
    """随机抽取 n_holdout 个受试者作为留出集，返回 (训练ID, 留出ID)（保持原顺序）"""
    subject_ids = list(subject_ids)
    if not 0 < n_holdout < len(subject_ids):
        raise EvaluationError(f"留出集大小 {n_holdout} 必须在 1 与 {len(subject_ids) - 1} 之间")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(subject_ids), size=n_holdout, replace=False).tolist())
    train = [sid for i, sid in enumerate(subject_ids) if i not in chosen]
    holdout = [sid for i, sid in enumerate(subject_ids) if i in chosen]
    return train, holdout


def holdout_evaluate(
    settings: PipelineConfig,
    train_table: FeatureTable,
    holdout_table: FeatureTable,
    records: Sequence[SubjectRecord],
    allow_overlap: bool = False,
    workers: int = 1
) -> MetricTriple:
    """在训练表上拟合，在留出表上计算指标"""
    if holdout_table.n_subjects == 0:
        raise EvaluationError("留出集为空")
    overlap = set(train_table.subject_ids) & set(holdout_table.subject_ids)
    if overlap and not allow_overlap:
        raise EvaluationError(f"训练集与留出集存在重叠受试者: {sorted(overlap)[:5]}")
    fitted = fit_pipeline(settings, train_table, survival_targets(train_table, records), workers=workers)
    metrics = evaluate_model(fitted.model, holdout_table, survival_targets(holdout_table, records))
    logger.info(
        f"留出集评估 (n={metrics.n_subjects}): accuracy={metrics.accuracy:.3f}, "
        f"mse={metrics.mse:.0f}, spearman={metrics.spearman:.3f}"
    )
    return metrics


def restrict_to_resection(
    records: Sequence[SubjectRecord],
    status: Union[str, ResectionStatus] = ResectionStatus.GTR
) -> List[SubjectRecord]:
    """只保留给定切除状态的受试者"""
    status = ResectionStatus(status)
    return [r for r in records if r.resection_status == status]


def evaluate_resection(
    settings: PipelineConfig,
    table: FeatureTable,
    records: Sequence[SubjectRecord],
    holdout_ids: Sequence[str],
    status: Union[str, ResectionStatus] = ResectionStatus.GTR,
    workers: int = 1
) -> MetricTriple:
    """留出集评估，但只在给定切除状态的留出受试者上计算指标"""
    kept = {r.id for r in restrict_to_resection(records, status)}
    holdout = [sid for sid in holdout_ids if sid in kept]
    if not holdout:
        raise EvaluationError(f"留出集中没有切除状态为 {ResectionStatus(status).value} 的受试者")
    train = [sid for sid in table.subject_ids if sid not in set(holdout_ids)]
    return holdout_evaluate(
        settings,
        table.select_subjects(train),
        table.select_subjects(holdout),
        records,
        workers=workers,
    )


def compare_models(
    settings: PipelineConfig,
    table: FeatureTable,
    records: Sequence[SubjectRecord],
    kinds: Sequence[str],
    workers: int = 1,
    progress: bool = False
) -> Dict[str, CVReport]:
    """相同折划分下逐个模型种类做交叉验证"""
    reports = {}
    for kind in kinds:
        variant = copy.deepcopy(settings)
        variant.model.kind = str(kind)
        reports[str(kind)] = cross_validate(variant, table, records, workers=workers, progress=progress)
    return reports


def comparison_frame(reports: Mapping[str, CVReport]) -> pd.DataFrame:
    """模型比较表（均值±标准差）"""
    rows = []
    for kind, report in reports.items():
        row = {'model': kind}
        for metric in ('accuracy', 'mse', 'spearman'):
            row[f'{metric}_mean'] = report.mean(metric)
            row[f'{metric}_std'] = report.std(metric)
        rows.append(row)
    return pd.DataFrame(rows)


def write_cv_report(report: CVReport, output_dir: Path, stem: str = "cv") -> Tuple[Path, Path]:
    """写出逐折记录CSV与YAML汇总"""
    output_dir = Path(output_dir)
    FileManager.ensure_dir(output_dir)
    frame = pd.DataFrame(
        [
            {
                'repetition': r.repetition,
                'fold': r.fold,
                'accuracy': r.accuracy,
                'mse': r.mse,
                'spearman': r.spearman,
                'spearman_defined': int(r.spearman_defined),
            }
            for r in report.records
        ],
        columns=['repetition', 'fold', 'accuracy', 'mse', 'spearman', 'spearman_defined'],
    )
    records_path = output_dir / f"{stem}_records.csv"
    summary_path = output_dir / f"{stem}_summary.yaml"
    FileManager.write_csv(frame, records_path, fingerprint=report.fingerprint)
    FileManager.write_yaml(report.summary(), summary_path)
    return records_path, summary_path


def occurrence_projection(
    masks_by_class: Mapping[Union[str, SurvivalClass], Sequence[np.ndarray]],
    mode: str = "max"
) -> OccurrenceMaps:
    """按类别累计二值增强肿瘤掩膜，并沿三个方向做最大值或求和投影"""
    if mode not in ("max", "sum"):
        raise EvaluationError(f"未知的投影方式: {mode}")
    shape = None
    for masks in masks_by_class.values():
        for mask in masks:
            if shape is None:
                shape = np.asarray(mask).shape
            elif np.asarray(mask).shape != shape:
                raise EvaluationError(f"掩膜不在同一网格上: {np.asarray(mask).shape} != {shape}")
    if shape is None:
        raise EvaluationError("没有可累计的掩膜")

    counts: Dict[str, np.ndarray] = {}
    for group, masks in masks_by_class.items():
        name = group.label if isinstance(group, SurvivalClass) else str(group)
        total = np.zeros(shape, dtype=np.int64)
        for mask in masks:
            total += np.asarray(mask, dtype=bool)
        counts[name] = total
    counts[ALL_GROUP] = np.sum([c for c in counts.values()], axis=0).astype(np.int64)

    reduce = np.max if mode == "max" else np.sum
    projections = {
        (group, direction): reduce(total, axis=axis)
        for group, total in counts.items()
        for direction, axis in PROJECTION_AXES.items()
    }
    return OccurrenceMaps(counts=counts, projections=projections, mode=mode)


def write_occurrence_maps(maps: OccurrenceMaps, output_dir: Path, fingerprint: Optional[str] = None) -> List[Path]:
    """每个 (类别, 方向) 写一张PGM与一个计数CSV；各方向共用所有类别的最大值作为灰度上限"""
    output_dir = Path(output_dir)
    FileManager.ensure_dir(output_dir)
    written = []
    for direction in PROJECTION_AXES:
        top = max(float(maps.projections[(group, direction)].max()) for group in maps.counts)
        for group in maps.counts:
            projection = maps.projections[(group, direction)]
            image_path = output_dir / f"occurrence_{group}_{direction}.pgm"
            ImageProcessor.save_pgm(ImageProcessor.to_grayscale(projection, max_value=top), image_path)
            csv_path = output_dir / f"occurrence_{group}_{direction}.csv"
            FileManager.write_csv(pd.DataFrame(projection), csv_path, fingerprint=fingerprint, header=False)
            written += [image_path, csv_path]
    return written

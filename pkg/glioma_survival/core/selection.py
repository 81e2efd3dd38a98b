"""特征标准化与三种特征选择方法"""

import re
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.exceptions import ConvergenceWarning
from sklearn.feature_selection import f_classif
from sklearn.svm import LinearSVC

from ..exceptions.custom_exceptions import SelectionError
from ..models.data_models import (
    FeatureTable,
    StandardizationStats,
    SelectionResult,
    SelectionMethod,
    COMPARTMENTS,
    SEQUENCES,
)
from ..utils.file import FileManager
from ..utils.logging import logger

# 逐步选择中 OLS 的岭扰动
RIDGE_JITTER = 1e-8

COMPARTMENT_LABELS = {"ET": "ET", "ED": "ED", "NCR": "NCR/NET"}
IMAGE_LABELS = {"T1": "T1", "T1c": "T1c", "T2": "T2", "FLAIR": "Flair"}

_SPECIAL_LABELS = {
    "Imc1": "Information Measure of Correlation 1",
    "Imc2": "Information Measure of Correlation 2",
    "Idm": "Inverse Difference Moment",
    "Idmn": "Inverse Difference Moment Normalized",
    "Id": "Inverse Difference",
    "Idn": "Inverse Difference Normalized",
    "MCC": "Maximal Correlation Coefficient",
    "10Percentile": "10th Percentile",
    "90Percentile": "90th Percentile",
    "Q3Q1Ratio": "Q3/Q1 Ratio",
}

# 参考特征表把该形状量归入强度类
_INTENSITY_ALIASES = {"Maximum2DDiameterSlice"}


def fit_standardization(table: FeatureTable) -> StandardizationStats:
    """在给定（训练）行上计算逐特征均值与总体标准差"""
    if table.n_subjects == 0:
        raise SelectionError("无法在空表上计算标准化统计量")
    return StandardizationStats(
        feature_names=list(table.feature_names),
        mean=table.values.mean(axis=0),
        std=table.values.std(axis=0),
    )


def standardize(table: FeatureTable, stats: StandardizationStats) -> Tuple[np.ndarray, List[str]]:
    """标准化并去除零方差特征，返回 (矩阵, 特征名)"""
    usable = stats.usable
    dropped = len(stats.feature_names) - len(usable)
    if dropped:
        logger.debug(f"去除 {dropped} 个零方差特征")
    index = [stats.feature_names.index(name) for name in usable]
    values = table.select_features(usable).values
    return (values - stats.mean[index]) / stats.std[index], usable


def expand_clinical(table: FeatureTable) -> FeatureTable:
    """把 ResectionStatus 编码替换为 GTR/STR 两个指示列（NA 为参考水平）"""
    if "ResectionStatus" not in table.feature_names:
        return table
    position = table.feature_names.index("ResectionStatus")
    codes = table.column("ResectionStatus")
    indicators = np.column_stack([(codes == 1).astype(np.float64), (codes == 2).astype(np.float64)])
    names = (
        table.feature_names[:position]
        + ["ResectionStatus_GTR", "ResectionStatus_STR"]
        + table.feature_names[position + 1:]
    )
    values = np.hstack([table.values[:, :position], indicators, table.values[:, position + 1:]])
    provenance = {name: table.provenance.get(name, "clinical") for name in names}
    return FeatureTable(subject_ids=table.subject_ids, feature_names=names, values=values, provenance=provenance)


def _ranked(names: Sequence[str], scores: np.ndarray, k: Optional[int]) -> List[str]:
    order = np.argsort(-scores, kind='stable')
    ranked = [names[i] for i in order]
    return ranked if k is None else ranked[:k]


def univariate_scores(table: FeatureTable, y: Sequence[int], k: Optional[int] = None) -> SelectionResult:
    """单因素方差分析 F 统计量，取前 k 个"""
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise SelectionError("单因素选择至少需要两个类别")
    if table.n_features == 0:
        return SelectionResult(selected=[], scores={}, method=SelectionMethod.UNIVARIATE)
    with warnings.catch_warnings(), np.errstate(divide='ignore', invalid='ignore'):
        warnings.simplefilter('ignore', RuntimeWarning)
        warnings.simplefilter('ignore', UserWarning)
        f_values, _ = f_classif(table.values, y)
    # 常数特征为 nan → 0；完全分离为 inf → 最大有限值
    f_values = np.nan_to_num(f_values, nan=0.0, posinf=np.finfo(np.float64).max, neginf=0.0)
    scores = dict(zip(table.feature_names, f_values.tolist()))
    return SelectionResult(
        selected=_ranked(table.feature_names, f_values, k),
        scores=scores,
        method=SelectionMethod.UNIVARIATE,
    )


def _rss(gram: np.ndarray, cross: np.ndarray, total: float, subset: List[int]) -> float:
    """中心化 OLS（带岭扰动）的残差平方和"""
    if not subset:
        return total
    g = gram[np.ix_(subset, subset)] + RIDGE_JITTER * np.eye(len(subset))
    b = cross[subset]
    beta = np.linalg.solve(g, b)
    return float(total - 2.0 * b @ beta + beta @ gram[np.ix_(subset, subset)] @ beta)


def stepwise_select(
    table: FeatureTable,
    y_days: Sequence[float],
    direction: str = "forward",
    k: int = 30
) -> SelectionResult:
    """线性模型的贪心逐步选择（前向逐个加入或后向逐个剔除）"""
    if direction not in ("forward", "backward"):
        raise SelectionError(f"未知的逐步选择方向: {direction}")
    y = np.asarray(y_days, dtype=np.float64)
    if k < 0:
        raise SelectionError(f"k 必须非负: {k}")
    if table.n_subjects <= k + 1:
        raise SelectionError(f"逐步选择需要受试者数 > k + 1 (n={table.n_subjects}, k={k})")
    names = table.feature_names
    k = min(k, len(names))
    x = table.values - table.values.mean(axis=0)
    yc = y - y.mean()
    gram = x.T @ x
    cross = x.T @ yc
    total = float(yc @ yc)
    history = []

    if direction == "forward":
        chosen: List[int] = []
        remaining = list(range(len(names)))
        for _ in range(k):
            rss = [_rss(gram, cross, total, chosen + [j]) for j in remaining]
            best = remaining[int(np.argmin(rss))]
            chosen.append(best)
            remaining.remove(best)
            history.append(f"+{names[best]} rss={min(rss):.6g}")
        selected = [names[i] for i in chosen]
        scores = {name: float(k - rank) for rank, name in enumerate(selected)}
    else:
        chosen = list(range(len(names)))
        while len(chosen) > k:
            rss = [_rss(gram, cross, total, [i for i in chosen if i != j]) for j in chosen]
            worst = chosen[int(np.argmin(rss))]
            chosen.remove(worst)
            history.append(f"-{names[worst]} rss={min(rss):.6g}")
        # 剩余特征按剔除后 RSS 的增量排序
        base = _rss(gram, cross, total, chosen)
        increase = np.array([_rss(gram, cross, total, [i for i in chosen if i != j]) - base for j in chosen])
        kept = [names[i] for i in chosen]
        selected = _ranked(kept, increase, None)
        scores = dict(zip(kept, increase.tolist()))

    return SelectionResult(selected=selected, scores=scores, method=SelectionMethod.STEPWISE, history=history)


def l1_svc_select(
    table: FeatureTable,
    y: Sequence[int],
    c: float = 0.05,
    k: int = 30,
    seed: int = 0
) -> SelectionResult:
    """稀疏（L1）线性SVC一对多训练，重要性为各类权重绝对值的最大值"""
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise SelectionError("模型选择至少需要两个类别")
    stats = fit_standardization(table)
    x, usable = standardize(table, stats)
    if not usable:
        raise SelectionError("所有特征均为零方差")
    model = LinearSVC(
        penalty='l1',
        loss='squared_hinge',
        dual=False,
        C=c,
        tol=1e-6,
        max_iter=10000,
        random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        model.fit(x, y)
    importance = np.abs(model.coef_).max(axis=0)
    nonzero = int(np.count_nonzero(importance))
    if nonzero == 0:
        raise SelectionError(f"稀疏SVC的权重全为0 (c={c})，请增大 c")
    if nonzero < k:
        logger.warning(f"非零权重特征只有 {nonzero} 个，少于请求的 {k} 个")
    scores = {name: 0.0 for name in table.feature_names}
    scores.update(dict(zip(usable, importance.tolist())))
    ranked = _ranked(usable, importance, min(k, nonzero))
    return SelectionResult(selected=ranked, scores=scores, method=SelectionMethod.MODEL_BASED_L1SVC)


def fixed_selection(table: FeatureTable, features: Sequence[str]) -> SelectionResult:
    """使用给定特征列表（如仅年龄的基线模型）"""
    missing = [f for f in features if f not in table.feature_names]
    if missing:
        raise SelectionError(f"特征表中缺少指定的特征: {missing}")
    return SelectionResult(
        selected=list(features),
        scores={f: float(len(features) - i) for i, f in enumerate(features)},
        method=SelectionMethod.FIXED,
    )


def run_selection(
    table: FeatureTable,
    y_class: Sequence[int],
    y_days: Sequence[float],
    method: str,
    k: int,
    c: float = 0.05,
    direction: str = "forward",
    fixed_features: Sequence[str] = (),
    seed: int = 0
) -> SelectionResult:
    """按配置的方法选择特征"""
    method = SelectionMethod(method)
    if method == SelectionMethod.FIXED:
        return fixed_selection(table, fixed_features)
    if method == SelectionMethod.UNIVARIATE:
        return univariate_scores(table, y_class, k)
    if method == SelectionMethod.STEPWISE:
        return stepwise_select(table, y_days, direction, k)
    return l1_svc_select(table, y_class, c=c, k=k, seed=seed)


def selection_overlap(results: Dict[str, SelectionResult]) -> pd.DataFrame:
    """各选择方法结果之间的 Jaccard 重合度"""
    labels = list(results)
    matrix = np.ones((len(labels), len(labels)))
    for a, first in enumerate(labels):
        for b, second in enumerate(labels):
            sa, sb = set(results[first].selected), set(results[second].selected)
            union = sa | sb
            matrix[a, b] = len(sa & sb) / len(union) if union else 1.0
    return pd.DataFrame(matrix, index=labels, columns=labels)


def _split_camel(name: str) -> str:
    if name in _SPECIAL_LABELS:
        return _SPECIAL_LABELS[name]
    return re.sub(r'(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])|(?<=[a-zA-Z])(?=[0-9])', ' ', name)


def describe_feature(name: str) -> Tuple[str, str, str, str]:
    """特征名 → (Feature, Cat., Comp., Img.)，与参考特征表的列一致"""
    if name == "Age":
        return "Age", "Clinical", "", ""
    if name.startswith("ResectionStatus"):
        suffix = name[len("ResectionStatus"):].lstrip("_")
        return ("Resection Status " + suffix).strip(), "Clinical", "", ""
    if name.startswith("atlas_"):
        region = re.sub(r'-(?=[A-Z])', ' ', name[len("atlas_"):].replace("_", " "))
        return region, "Atlas", "", ""
    parts = name.split("_")
    if parts[0] == "WT" and len(parts) >= 3 and parts[1] == "ratio":
        return f"Volume Ratio {'/'.join(parts[2:])}", "Shape", "", ""
    if parts[0] in COMPARTMENTS and len(parts) >= 3:
        comp = COMPARTMENT_LABELS[parts[0]]
        if parts[1] == "shape":
            category = "Intensity" if parts[2] in _INTENSITY_ALIASES else "Shape"
            return _split_camel(parts[2]), category, comp, ""
        if parts[1] == "rim":
            return f"Rim Width {_split_camel(parts[2])}", "Shape", comp, ""
        if parts[1] in SEQUENCES and len(parts) >= 4:
            return _split_camel(parts[3]), "Intensity", comp, IMAGE_LABELS[parts[1]]
    return name, "External", "", ""


def write_selection(result: SelectionResult, path, fingerprint: Optional[str] = None) -> None:
    """写出选择结果CSV（rank, feature, score, method 及参考表列）"""
    rows = []
    for rank, feature in enumerate(result.selected, start=1):
        label, category, comp, image = describe_feature(feature)
        rows.append({
            'rank': rank,
            'feature': feature,
            'score': result.scores.get(feature, 0.0),
            'method': result.method.value,
            'label': label,
            'category': category,
            'compartment': comp,
            'image': image,
        })
    frame = pd.DataFrame(rows, columns=['rank', 'feature', 'score', 'method', 'label', 'category', 'compartment', 'image'])
    FileManager.write_csv(frame, path, fingerprint=fingerprint)


def read_selection(path) -> SelectionResult:
    """读取选择结果CSV"""
    frame = FileManager.read_csv(path, dtype={'feature': str, 'method': str}, keep_default_na=False)
    missing = [c for c in ('rank', 'feature', 'score', 'method') if c not in frame.columns]
    if missing:
        raise SelectionError(f"选择结果文件缺少列 {path}: {missing}")
    frame = frame.sort_values('rank', kind='stable')
    methods = set(frame['method'])
    try:
        method = SelectionMethod(methods.pop()) if methods else SelectionMethod.FIXED
    except ValueError as e:
        raise SelectionError(f"未知的选择方法 {path}: {str(e)}")
    return SelectionResult(
        selected=frame['feature'].tolist(),
        scores=dict(zip(frame['feature'], frame['score'].astype(float))),
        method=method,
    )

"""特征模型的训练、预测与持久化"""

import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.multiclass import OneVsRestClassifier
from sklearn.svm import LinearSVC, LinearSVR
from tqdm import tqdm

from ..exceptions.custom_exceptions import ModelError, FeatureTableError, FileOperationError
from ..models.data_models import (
    FeatureTable,
    TrainedModel,
    ModelKind,
    SurvivalClass,
    EnsembleSpec,
    StandardizationStats,
)
from ..utils.file import FileManager
from ..utils.logging import logger
from .selection import fit_standardization

# 各类别的平均生存天数
CLASS_DAYS = {SurvivalClass.SHORT: 147.0, SurvivalClass.MID: 376.0, SurvivalClass.LONG: 626.0}

# 10个月与15个月，1个月 = 365.25/12 天
DAYS_PER_MONTH = 365.25 / 12.0
SHORT_LIMIT_DAYS = 10 * DAYS_PER_MONTH
LONG_LIMIT_DAYS = 15 * DAYS_PER_MONTH

MODEL_FORMAT = "glioma-survival-model"
MODEL_VERSION = 1

N_CLASSES = len(SurvivalClass)


def class_to_days(c: SurvivalClass) -> float:
    """类别 → 该类平均生存天数"""
    return CLASS_DAYS[SurvivalClass(c)]


def days_to_class(days: float) -> SurvivalClass:
    """生存天数 → 类别（short < 10个月 ≤ mid ≤ 15个月 < long）"""
    if not np.isfinite(days) or days < 0:
        raise ModelError(f"生存天数必须为非负数: {days}")
    if days < SHORT_LIMIT_DAYS:
        return SurvivalClass.SHORT
    if days <= LONG_LIMIT_DAYS:
        return SurvivalClass.MID
    return SurvivalClass.LONG


def classes_of(days: Sequence[float]) -> np.ndarray:
    return np.array([int(days_to_class(d)) for d in days], dtype=np.int64)


def design_matrix(model: TrainedModel, table: FeatureTable) -> np.ndarray:
    """按特征名取列并用训练时的统计量标准化（零方差特征不参与）"""
    try:
        subset = table.select_features(model.stats.usable)
    except FeatureTableError as e:
        raise ModelError(f"预测所需的特征缺失: {str(e)}")
    index = [model.stats.feature_names.index(name) for name in model.stats.usable]
    return (subset.values - model.stats.mean[index]) / model.stats.std[index]


def _prepare(table: FeatureTable, feature_names: Optional[Sequence[str]]) -> Tuple[List[str], StandardizationStats, np.ndarray]:
    names = list(feature_names) if feature_names is not None else list(table.feature_names)
    try:
        subset = table.select_features(names)
    except FeatureTableError as e:
        raise ModelError(f"训练所需的特征缺失: {str(e)}")
    if subset.n_subjects < 2:
        raise ModelError(f"训练至少需要2个受试者，实际 {subset.n_subjects}")
    stats = fit_standardization(subset)
    usable = stats.usable
    index = [names.index(name) for name in usable]
    x = (subset.values[:, index] - stats.mean[index]) / stats.std[index]
    return names, stats, x


def _check_classes(y: np.ndarray) -> None:
    present = set(np.unique(y).tolist())
    for c in SurvivalClass:
        if int(c) not in present:
            raise ModelError(f"训练数据中缺少类别: {c.label}")


def _model(kind: ModelKind, names, stats, parameters, **metadata) -> TrainedModel:
    return TrainedModel(kind=kind, feature_names=names, stats=stats, parameters=parameters, metadata=dict(metadata))


# ---------------------------------------------------------------- regressors

def train_linear_regression(table: FeatureTable, y_days: Sequence[float], feature_names=None) -> TrainedModel:
    """最小二乘线性回归（奇异设计取最小范数解）"""
    names, stats, x = _prepare(table, feature_names)
    y = np.asarray(y_days, dtype=np.float64)
    regression = LinearRegression().fit(x, y)
    return _model(ModelKind.LINEAR, names, stats, {
        'coef': np.asarray(regression.coef_, dtype=np.float64).reshape(-1),
        'intercept': float(regression.intercept_),
    })


def train_svr(
    table: FeatureTable,
    y_days: Sequence[float],
    c: float = 1.0,
    epsilon: float = 0.1,
    seed: int = 0,
    feature_names=None
) -> TrainedModel:
    """线性核 ε-不敏感 SVR（对偶坐标下降），目标先减去训练均值"""
    names, stats, x = _prepare(table, feature_names)
    y = np.asarray(y_days, dtype=np.float64)
    offset = float(y.mean())
    regression = LinearSVR(
        C=c,
        epsilon=epsilon,
        loss='epsilon_insensitive',
        dual=True,
        tol=1e-6,
        max_iter=100000,
        random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        regression.fit(x, y - offset)
    return _model(ModelKind.SVR, names, stats, {
        'coef': np.asarray(regression.coef_, dtype=np.float64).reshape(-1),
        'intercept': float(np.ravel(regression.intercept_)[0]) + offset,
    })


def _export_tree(tree, classifier: bool) -> Dict[str, np.ndarray]:
    """导出 sklearn 决策树为数组"""
    structure = tree.tree_
    if classifier:
        value = structure.value[:, 0, :].astype(np.float64)
        totals = value.sum(axis=1, keepdims=True)
        value = np.divide(value, totals, out=np.zeros_like(value), where=totals > 0)
    else:
        value = structure.value[:, 0, 0].astype(np.float64)
    return {
        'left': structure.children_left.astype(np.int64),
        'right': structure.children_right.astype(np.int64),
        'feature': structure.feature.astype(np.int64),
        'threshold': structure.threshold.astype(np.float64),
        'value': value,
    }


def _tree_predict(tree: Dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """逐层遍历决策树（输入按 float32 比较）"""
    x = x.astype(np.float32).astype(np.float64)
    node = np.zeros(len(x), dtype=np.int64)
    rows = np.arange(len(x))
    while True:
        left = tree['left'][node]
        active = left >= 0
        if not active.any():
            break
        go_left = x[rows, np.maximum(tree['feature'][node], 0)] <= tree['threshold'][node]
        node = np.where(active, np.where(go_left, left, tree['right'][node]), node)
    return tree['value'][node]


def train_rf_regression(
    table: FeatureTable,
    y_days: Sequence[float],
    n_trees: int = 50,
    seed: int = 0,
    feature_names=None
) -> TrainedModel:
    """随机森林回归：自助采样，每次分裂抽取 p/3 个特征，叶节点至少5个样本"""
    names, stats, x = _prepare(table, feature_names)
    forest = RandomForestRegressor(
        n_estimators=n_trees,
        max_features=1.0 / 3.0,
        min_samples_leaf=5,
        bootstrap=True,
        random_state=seed,
        n_jobs=1,
    ).fit(x, np.asarray(y_days, dtype=np.float64))
    return _model(ModelKind.RF_REG, names, stats, {
        'trees': [_export_tree(tree, classifier=False) for tree in forest.estimators_],
    }, seed=seed)


# --------------------------------------------------------------- classifiers

def _fit_svc_ovr(x: np.ndarray, y: np.ndarray, c: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """一对多铰链损失线性SVC（对偶坐标下降），返回 (coef, intercept)"""
    _check_classes(y)
    classifier = LinearSVC(
        C=c,
        loss='hinge',
        dual=True,
        tol=1e-6,
        max_iter=100000,
        random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        classifier.fit(x, y)
    return np.asarray(classifier.coef_, dtype=np.float64), np.asarray(classifier.intercept_, dtype=np.float64)


def train_logistic_ovr(
    table: FeatureTable,
    y_class: Sequence[int],
    l2: float = 1.0,
    feature_names=None
) -> TrainedModel:
    """一对多 L2 逻辑回归（牛顿-Cholesky）"""
    names, stats, x = _prepare(table, feature_names)
    y = np.asarray(y_class, dtype=np.int64)
    _check_classes(y)
    classifier = OneVsRestClassifier(
        LogisticRegression(C=1.0 / l2, solver='newton-cholesky', tol=1e-8, max_iter=1000)
    )
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        classifier.fit(x, y)
    coef = np.vstack([np.ravel(e.coef_) for e in classifier.estimators_])
    intercept = np.array([float(np.ravel(e.intercept_)[0]) for e in classifier.estimators_])
    return _model(ModelKind.LOGISTIC_OVR, names, stats, {'coef': coef, 'intercept': intercept})


def train_svc_ovr(
    table: FeatureTable,
    y_class: Sequence[int],
    c: float = 1.0,
    seed: int = 0,
    feature_names=None
) -> TrainedModel:
    """一对多线性SVC"""
    names, stats, x = _prepare(table, feature_names)
    coef, intercept = _fit_svc_ovr(x, np.asarray(y_class, dtype=np.int64), c, seed)
    return _model(ModelKind.SVC_OVR, names, stats, {'coef': coef, 'intercept': intercept})


def train_rf_classifier(
    table: FeatureTable,
    y_class: Sequence[int],
    n_trees: int = 50,
    seed: int = 0,
    feature_names=None
) -> TrainedModel:
    """随机森林分类：每次分裂抽取 √p 个特征，完全生长"""
    names, stats, x = _prepare(table, feature_names)
    y = np.asarray(y_class, dtype=np.int64)
    _check_classes(y)
    forest = RandomForestClassifier(
        n_estimators=n_trees,
        max_features='sqrt',
        min_samples_split=2,
        bootstrap=True,
        random_state=seed,
        n_jobs=1,
    ).fit(x, y)
    return _model(ModelKind.RF_CLF, names, stats, {
        'classes': np.asarray(forest.classes_, dtype=np.int64),
        'trees': [_export_tree(tree, classifier=True) for tree in forest.estimators_],
    }, seed=seed)


def member_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """集成成员的确定性种子 (master_seed, index)"""
    return np.random.SeedSequence([int(master_seed), int(index)])


def train_svc_ensemble(
    table: FeatureTable,
    y_class: Sequence[int],
    spec: EnsembleSpec,
    workers: int = 1,
    feature_names=None,
    progress: bool = False
) -> TrainedModel:
    """n_members 个一对多SVC，各自在不放回随机抽取的 subsample_fraction 训练数据上训练"""
    if spec.n_members < 1 or not (0 < spec.subsample_fraction < 1):
        raise ModelError(f"集成设置无效: {spec}")
    names, stats, x = _prepare(table, feature_names)
    y = np.asarray(y_class, dtype=np.int64)
    _check_classes(y)
    subset_size = max(2, int(np.floor(spec.subsample_fraction * len(y))))

    def train_member(index: int) -> Dict[str, np.ndarray]:
        sequence = member_seed(spec.master_seed, index)
        rng = np.random.default_rng(sequence)
        rows = np.sort(rng.choice(len(y), size=subset_size, replace=False))
        solver_seed = int(sequence.generate_state(1)[0] % (2 ** 31 - 1))
        try:
            coef, intercept = _fit_svc_ovr(x[rows], y[rows], spec.base_c, solver_seed)
        except ModelError as e:
            raise ModelError(f"集成成员 {index} 训练失败: {str(e)}")
        return {'coef': coef, 'intercept': intercept}

    members: List[Optional[Dict[str, np.ndarray]]] = [None] * spec.n_members
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(train_member, i): i for i in range(spec.n_members)}
        for future in tqdm(as_completed(futures), total=len(futures), desc="训练集成成员",
                           disable=not progress, leave=False):
            members[futures[future]] = future.result()

    return _model(ModelKind.SVC_ENSEMBLE, names, stats, {'members': members},
                  n_members=spec.n_members,
                  subsample_fraction=spec.subsample_fraction,
                  base_c=spec.base_c,
                  master_seed=spec.master_seed)


# ---------------------------------------------------------------- prediction

def decision_scores(model: TrainedModel, table: FeatureTable) -> np.ndarray:
    """线性分类器的三类决策分数 (n, 3)"""
    if model.kind not in (ModelKind.LOGISTIC_OVR, ModelKind.SVC_OVR):
        raise ModelError(f"{model.kind.value} 没有单一的线性决策分数")
    x = design_matrix(model, table)
    return x @ np.asarray(model.parameters['coef']).T + np.asarray(model.parameters['intercept'])


def ensemble_vote(member_scores: np.ndarray) -> np.ndarray:
    """多数投票，平票时取决策分数总和较大的类别

    Args:
        member_scores: 形状 (成员数, 受试者数, 3) 的决策分数

    Returns:
        每个受试者的类别编号
    """
    votes = member_scores.argmax(axis=2)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(N_CLASSES)], axis=1)
    totals = member_scores.sum(axis=0)
    tied = counts == counts.max(axis=1, keepdims=True)
    return np.where(tied, totals, -np.inf).argmax(axis=1)


def _predict_raw(model: TrainedModel, table: FeatureTable) -> np.ndarray:
    kind = model.kind
    x = design_matrix(model, table)
    params = model.parameters
    if kind in (ModelKind.LINEAR, ModelKind.SVR):
        return x @ np.asarray(params['coef']) + float(params['intercept'])
    if kind == ModelKind.RF_REG:
        return np.mean([_tree_predict(tree, x) for tree in params['trees']], axis=0)
    if kind in (ModelKind.LOGISTIC_OVR, ModelKind.SVC_OVR):
        return (x @ np.asarray(params['coef']).T + np.asarray(params['intercept'])).argmax(axis=1)
    if kind == ModelKind.RF_CLF:
        probabilities = np.mean([_tree_predict(tree, x) for tree in params['trees']], axis=0)
        return np.asarray(params['classes'])[probabilities.argmax(axis=1)]
    if kind == ModelKind.SVC_ENSEMBLE:
        scores = np.stack([
            x @ np.asarray(member['coef']).T + np.asarray(member['intercept'])
            for member in params['members']
        ])
        return ensemble_vote(scores)
    raise ModelError(f"未知的模型种类: {kind}")


def predict_days(model: TrainedModel, table: FeatureTable) -> np.ndarray:
    """预测生存天数：回归器直接输出（截断为非负），分类器输出类别平均天数"""
    raw = _predict_raw(model, table)
    if model.kind.is_regressor:
        return np.clip(raw.astype(np.float64), 0.0, None)
    return np.array([class_to_days(SurvivalClass(int(c))) for c in raw], dtype=np.float64)


def predict_class(model: TrainedModel, table: FeatureTable) -> List[SurvivalClass]:
    """预测生存期类别：分类器直接输出，回归器按天数阈值换算"""
    if model.kind.is_regressor:
        return [days_to_class(d) for d in predict_days(model, table)]
    return [SurvivalClass(int(c)) for c in _predict_raw(model, table)]


def train_model(
    kind: str,
    table: FeatureTable,
    y_days: Sequence[float],
    feature_names: Sequence[str],
    settings,
    workers: int = 1,
    progress: bool = False
) -> TrainedModel:
    """按配置训练指定种类的模型

    Args:
        kind: 模型种类
        table: 训练特征表
        y_days: 训练目标（天）
        feature_names: 模型使用的特征
        settings: PipelineConfig（读取 model 与 ensemble 小节）
        workers: 集成训练线程数
        progress: 是否显示进度条
    """
    kind = ModelKind(kind)
    y_days = np.asarray(y_days, dtype=np.float64)
    y_class = classes_of(y_days)
    m = settings.model
    if kind == ModelKind.LINEAR:
        return train_linear_regression(table, y_days, feature_names)
    if kind == ModelKind.SVR:
        return train_svr(table, y_days, m.svr_c, m.svr_epsilon, m.seed, feature_names)
    if kind == ModelKind.RF_REG:
        return train_rf_regression(table, y_days, m.n_trees, m.seed, feature_names)
    if kind == ModelKind.LOGISTIC_OVR:
        return train_logistic_ovr(table, y_class, m.logistic_l2, feature_names)
    if kind == ModelKind.SVC_OVR:
        return train_svc_ovr(table, y_class, m.svc_c, m.seed, feature_names)
    if kind == ModelKind.RF_CLF:
        return train_rf_classifier(table, y_class, m.n_trees, m.seed, feature_names)
    e = settings.ensemble
    spec = EnsembleSpec(
        n_members=e.n_members,
        subsample_fraction=e.subsample_fraction,
        base_c=e.base_c,
        master_seed=m.seed,
    )
    return train_svc_ensemble(table, y_class, spec, workers=workers, feature_names=feature_names, progress=progress)


# ----------------------------------------------------------- serialization

def _to_plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {'dtype': str(value.dtype), 'shape': list(value.shape), 'data': value.ravel().tolist()}
    if isinstance(value, dict):
        return {str(k): _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _from_plain(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {'dtype', 'shape', 'data'}:
            return np.array(value['data'], dtype=value['dtype']).reshape(value['shape'])
        return {k: _from_plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_plain(v) for v in value]
    return value


def save_model(model: TrainedModel, path: Path) -> None:
    """保存模型为带版本号的YAML文档（浮点数以往返精度的十进制表示）"""
    payload = {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'kind': model.kind.value,
        'fingerprint': model.fingerprint,
        'feature_fingerprint': model.feature_fingerprint,
        'feature_names': list(model.feature_names),
        'standardization': {
            'feature_names': list(model.stats.feature_names),
            'mean': _to_plain(np.asarray(model.stats.mean, dtype=np.float64)),
            'std': _to_plain(np.asarray(model.stats.std, dtype=np.float64)),
        },
        'parameters': _to_plain(model.parameters),
        'metadata': _to_plain(model.metadata),
    }
    FileManager.write_yaml(payload, path)
    logger.info(f"模型已保存: {path}")


def load_model(path: Path) -> TrainedModel:
    """读取模型文档"""
    try:
        payload = FileManager.read_yaml(path)
    except FileOperationError as e:
        raise ModelError(str(e))
    if payload.get('format') != MODEL_FORMAT:
        raise ModelError(f"不是模型文件: {path}")
    if payload.get('version') != MODEL_VERSION:
        raise ModelError(f"不支持的模型文件版本 {payload.get('version')}: {path}")
    try:
        standardization = payload['standardization']
        stats = StandardizationStats(
            feature_names=list(standardization['feature_names']),
            mean=_from_plain(standardization['mean']),
            std=_from_plain(standardization['std']),
        )
        return TrainedModel(
            kind=ModelKind(payload['kind']),
            feature_names=list(payload['feature_names']),
            stats=stats,
            parameters=_from_plain(payload['parameters']),
            fingerprint=payload.get('fingerprint'),
            feature_fingerprint=payload.get('feature_fingerprint'),
            metadata=_from_plain(payload.get('metadata') or {}),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ModelError(f"模型文件格式错误 {path}: {str(e)}")

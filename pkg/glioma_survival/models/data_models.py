"""数据模型定义"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import List, Optional, Dict, Any, Tuple, Sequence

import numpy as np

from ..exceptions.custom_exceptions import (
    VolumeIOError,
    FeatureTableError,
    RegistrationError,
    EvaluationError,
)

# 肿瘤子区域与MR序列（特征名中使用的简称）
COMPARTMENTS: Tuple[str, ...] = ("ET", "ED", "NCR")
SEQUENCES: Tuple[str, ...] = ("T1", "T1c", "T2", "FLAIR")

# BraTS 标签约定 {1: NCR/NET, 2: ED, 4: ET}
DEFAULT_LABEL_SEMANTICS: Dict[int, str] = {1: "NCR", 2: "ED", 4: "ET"}

PROVENANCE_TAGS = ("intensity", "shape", "rim", "atlas", "clinical", "external")
TEXTURE_FAMILIES = ("firstorder", "glcm", "glrlm", "glszm", "ngtdm", "gldm")
CLINICAL_FEATURES = ("Age", "ResectionStatus")


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_affine(affine: np.ndarray) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise VolumeIOError(f"仿射矩阵形状错误: {affine.shape}")
    if not np.allclose(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise VolumeIOError(f"仿射矩阵最后一行必须为 (0,0,0,1): {affine[3]}")
    return affine


class ResectionStatus(str, Enum):
    """切除状态"""
    GTR = "GTR"
    STR = "STR"
    NA = "NA"

    @property
    def code(self) -> int:
        """特征表中的数值编码（NA 为参考水平）"""
        return {"NA": 0, "GTR": 1, "STR": 2}[self.value]


class SurvivalClass(IntEnum):
    """生存期类别 short < mid < long"""
    SHORT = 0
    MID = 1
    LONG = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> 'SurvivalClass':
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise EvaluationError(f"未知的生存期类别: {label}")


class ModelKind(str, Enum):
    """模型种类"""
    LINEAR = "linear"
    LOGISTIC_OVR = "logistic_ovr"
    SVR = "svr"
    SVC_OVR = "svc_ovr"
    RF_REG = "rf_reg"
    RF_CLF = "rf_clf"
    SVC_ENSEMBLE = "svc_ensemble"

    @property
    def is_regressor(self) -> bool:
        return self in (ModelKind.LINEAR, ModelKind.SVR, ModelKind.RF_REG)


class SelectionMethod(str, Enum):
    """特征选择方法"""
    UNIVARIATE = "univariate"
    STEPWISE = "stepwise"
    MODEL_BASED_L1SVC = "model_based_l1svc"
    FIXED = "fixed"


@dataclass(frozen=True)
class Volume:
    """三维标量影像"""
    data: np.ndarray
    spacing: Tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise VolumeIOError(f"影像必须是三维的, 实际维度: {data.ndim}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeIOError(f"体素间距必须为3个正数: {self.spacing}")
        object.__setattr__(self, 'data', _readonly(data))
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'affine', _readonly(_check_affine(self.affine)))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> 'Volume':
        """相同网格上的新影像"""
        return Volume(data=data, spacing=self.spacing, affine=self.affine)


@dataclass(frozen=True)
class SegmentationMask:
    """带子区域语义的整数标签分割"""
    labels: np.ndarray
    spacing: Tuple[float, float, float]
    affine: np.ndarray
    label_semantics: Dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LABEL_SEMANTICS))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeIOError(f"分割必须是三维的, 实际维度: {labels.ndim}")
        labels = labels.astype(np.int16)
        unknown = sorted(set(np.unique(labels).tolist()) - {0} - set(self.label_semantics))
        if unknown:
            raise VolumeIOError(f"分割中存在未定义的标签: {unknown}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeIOError(f"体素间距必须为3个正数: {self.spacing}")
        object.__setattr__(self, 'labels', _readonly(labels))
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'affine', _readonly(_check_affine(self.affine)))
        object.__setattr__(self, 'label_semantics', {int(k): str(v) for k, v in self.label_semantics.items()})

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def compartment(self, name: str) -> np.ndarray:
        """返回某子区域的布尔掩膜"""
        codes = [code for code, comp in self.label_semantics.items() if comp == name]
        return np.isin(self.labels, codes)

    def tumor(self) -> np.ndarray:
        """整个肿瘤（所有非零标签）"""
        return self.labels > 0

    def matches(self, volume: Volume, atol: float = 1e-4) -> bool:
        """是否与影像处于同一网格"""
        return (
            self.dims == volume.dims
            and np.allclose(self.spacing, volume.spacing, atol=atol)
            and np.allclose(self.affine, volume.affine, atol=atol)
        )


@dataclass(frozen=True)
class SubjectRecord:
    """受试者临床记录"""
    id: str
    age: float
    resection_status: ResectionStatus = ResectionStatus.NA
    survival_days: Optional[float] = None

    @property
    def survival_class(self) -> Optional[SurvivalClass]:
        if self.survival_days is None:
            return None
        from ..core.predictors import days_to_class
        return days_to_class(self.survival_days)


@dataclass
class FeatureMap:
    """有序的特征名→特征值映射，附带告警标记"""
    entries: Dict[str, float] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> float:
        return self.entries[name]

    def names(self) -> List[str]:
        return list(self.entries)

    def add(self, name: str, value: float) -> None:
        if name in self.entries:
            raise FeatureTableError(f"重复的特征名: {name}")
        self.entries[name] = float(value)

    def update(self, other: 'FeatureMap') -> None:
        for name, value in other.entries.items():
            self.add(name, value)
        self.flags.extend(other.flags)


def infer_provenance(name: str) -> str:
    """根据特征命名规则推断特征来源"""
    parts = name.split("_")
    if name in CLINICAL_FEATURES or name.startswith("ResectionStatus_"):
        return "clinical"
    if name.startswith("atlas_"):
        return "atlas"
    if parts[0] == "WT" and len(parts) > 1 and parts[1] == "ratio":
        return "rim"
    if parts[0] in COMPARTMENTS and len(parts) >= 3:
        if parts[1] == "rim":
            return "rim"
        if parts[1] == "shape":
            return "shape"
        if parts[1] in SEQUENCES and len(parts) >= 4 and parts[2] in TEXTURE_FAMILIES:
            return "intensity"
    return "external"


@dataclass(frozen=True)
class FeatureTable:
    """受试者×特征矩阵"""
    subject_ids: List[str]
    feature_names: List[str]
    values: np.ndarray
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        subject_ids = [str(s) for s in self.subject_ids]
        feature_names = [str(f) for f in self.feature_names]
        values = np.asarray(self.values, dtype=np.float64).reshape(len(subject_ids), len(feature_names))
        if len(set(subject_ids)) != len(subject_ids):
            raise FeatureTableError("特征表中存在重复的受试者ID")
        if len(set(feature_names)) != len(feature_names):
            duplicates = sorted({f for f in feature_names if feature_names.count(f) > 1})
            raise FeatureTableError(f"特征表中存在重复的特征名: {duplicates[:5]}")
        if not np.all(np.isfinite(values)):
            raise FeatureTableError("特征表中不允许出现非有限值")
        provenance = {name: self.provenance.get(name, infer_provenance(name)) for name in feature_names}
        bad = {tag for tag in provenance.values() if tag not in PROVENANCE_TAGS}
        if bad:
            raise FeatureTableError(f"未知的特征来源标签: {sorted(bad)}")
        object.__setattr__(self, 'subject_ids', subject_ids)
        object.__setattr__(self, 'feature_names', feature_names)
        object.__setattr__(self, 'values', _readonly(values))
        object.__setattr__(self, 'provenance', provenance)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.feature_names.index(name)]
        except ValueError:
            raise FeatureTableError(f"特征表中缺少特征列: {name}")

    def select_features(self, names: Sequence[str]) -> 'FeatureTable':
        """按名称投影列（按给定顺序）"""
        index = {name: i for i, name in enumerate(self.feature_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise FeatureTableError(f"特征表中缺少特征列: {missing[:5]}")
        columns = [index[name] for name in names]
        return FeatureTable(
            subject_ids=self.subject_ids,
            feature_names=list(names),
            values=self.values[:, columns],
            provenance={name: self.provenance[name] for name in names},
        )

    def select_subjects(self, subject_ids: Sequence[str]) -> 'FeatureTable':
        """按受试者ID取行（按给定顺序）"""
        index = {sid: i for i, sid in enumerate(self.subject_ids)}
        missing = [sid for sid in subject_ids if sid not in index]
        if missing:
            raise FeatureTableError(f"特征表中缺少受试者: {missing[:5]}")
        rows = [index[sid] for sid in subject_ids]
        return FeatureTable(
            subject_ids=list(subject_ids),
            feature_names=self.feature_names,
            values=self.values[rows, :],
            provenance=self.provenance,
        )

    def equals(self, other: 'FeatureTable') -> bool:
        return (
            self.subject_ids == other.subject_ids
            and self.feature_names == other.feature_names
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class DiscretizedVolume:
    """离散化后的灰度级（掩膜外为0，掩膜内为 1..n_levels）"""
    bins: np.ndarray
    n_levels: int
    spacing: Tuple[float, float, float]

    @property
    def mask(self) -> np.ndarray:
        return self.bins > 0

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.bins.shape)


@dataclass(frozen=True)
class SurfaceEstimate:
    """网格体积、表面积与主轴长度"""
    volume_mm3: float
    surface_area_mm2: float
    principal_axis_lengths: Tuple[float, float, float]


@dataclass(frozen=True)
class AffineTransform:
    """受试者世界坐标 → 图谱世界坐标的仿射变换"""
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (4, 4) or not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise RegistrationError(f"仿射变换必须是最后一行为 (0,0,0,1) 的 4×4 矩阵")
        if abs(np.linalg.det(matrix[:3, :3])) < 1e-12:
            raise RegistrationError("仿射变换不可逆")
        object.__setattr__(self, 'matrix', _readonly(matrix))

    @classmethod
    def identity(cls) -> 'AffineTransform':
        return cls(np.eye(4))

    def inverse(self) -> 'AffineTransform':
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other: 'AffineTransform') -> 'AffineTransform':
        """先应用 other，再应用 self"""
        return AffineTransform(self.matrix @ other.matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.matrix[:3, :3].T + self.matrix[:3, 3]


@dataclass(frozen=True)
class RegistrationResult:
    """配准结果"""
    transform: AffineTransform
    objective: float
    converged: bool
    evaluations: int


@dataclass(frozen=True)
class AtlasDefinition:
    """带区域列表的标签图谱"""
    labels: np.ndarray
    spacing: Tuple[float, float, float]
    affine: np.ndarray
    regions: List[Tuple[int, str]]

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.int32)
        ids = [int(region_id) for region_id, _ in self.regions]
        if len(set(ids)) != len(ids):
            raise RegistrationError("图谱区域ID重复")
        present = set(np.unique(labels).tolist())
        absent = [region_id for region_id in ids if region_id not in present]
        if absent:
            raise RegistrationError(f"图谱标签中缺少区域: {absent[:5]}")
        object.__setattr__(self, 'labels', _readonly(labels))
        object.__setattr__(self, 'affine', _readonly(_check_affine(self.affine)))
        object.__setattr__(self, 'regions', [(int(i), str(n)) for i, n in self.regions])

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)


@dataclass(frozen=True)
class StandardizationStats:
    """训练行上的逐特征均值与标准差"""
    feature_names: List[str]
    mean: np.ndarray
    std: np.ndarray

    @property
    def usable(self) -> List[str]:
        """标准差为正的特征（零方差特征被排除）"""
        return [name for name, s in zip(self.feature_names, self.std) if s > 0]

    def transform(self, table: FeatureTable) -> np.ndarray:
        """按名称绑定列并标准化"""
        values = table.select_features(self.feature_names).values
        std = np.where(self.std > 0, self.std, 1.0)
        return (values - self.mean) / std


@dataclass
class SelectionResult:
    """特征选择结果（按重要性降序）"""
    selected: List[str]
    scores: Dict[str, float]
    method: SelectionMethod
    history: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class EnsembleSpec:
    """SVC 集成设置"""
    n_members: int = 100
    subsample_fraction: float = 0.8
    base_c: float = 1.0
    master_seed: int = 0


@dataclass
class TrainedModel:
    """任意种类模型的参数及训练时的标准化统计量"""
    kind: ModelKind
    feature_names: List[str]
    stats: StandardizationStats
    parameters: Dict[str, Any]
    fingerprint: Optional[str] = None
    feature_fingerprint: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class MetricTriple:
    """准确率 / MSE / Spearman"""
    accuracy: float
    mse: float
    spearman: float
    spearman_defined: bool = True
    n_subjects: int = 0


@dataclass(frozen=True)
class FoldAssignment:
    """每个受试者的折号"""
    folds: np.ndarray
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


@dataclass(frozen=True)
class FoldRecord:
    """一次 (重复, 折) 的评估记录"""
    repetition: int
    fold: int
    accuracy: float
    mse: float
    spearman: float
    spearman_defined: bool = True


@dataclass
class CVReport:
    """重复分层交叉验证报告"""
    records: List[FoldRecord]
    fingerprint: str
    model_kind: str = ""

    def _values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(np.mean(self._values(metric))) if self.records else float('nan')

    def std(self, metric: str) -> float:
        return float(np.std(self._values(metric))) if self.records else float('nan')

    def summary(self) -> Dict[str, Any]:
        return {
            'model_kind': self.model_kind,
            'fingerprint': self.fingerprint,
            'n_records': len(self.records),
            'repetitions': len({r.repetition for r in self.records}),
            'folds': len({r.fold for r in self.records}),
            'undefined_spearman': sum(1 for r in self.records if not r.spearman_defined),
            **{
                metric: {'mean': self.mean(metric), 'std': self.std(metric)}
                for metric in ('accuracy', 'mse', 'spearman')
            },
        }


@dataclass
class OccurrenceMaps:
    """按生存期类别累计的增强肿瘤出现次数及其投影"""
    counts: Dict[str, np.ndarray]
    projections: Dict[Tuple[str, str], np.ndarray]
    mode: str = "max"


@dataclass(frozen=True)
class SubjectFailure:
    """单个受试者的失败记录"""
    subject_id: str
    stage: str
    message: str


@dataclass
class ExtractionStats:
    """批量提取统计"""
    total_subjects: int
    processed_subjects: int
    failed_subjects: int
    start_time: float
    end_time: Optional[float] = None


@dataclass(frozen=True)
class PhantomSpec:
    """合成体模描述"""
    kind: str
    shape: Tuple[int, int, int] = (32, 32, 32)
    params: Dict[str, Any] = field(default_factory=dict)
    noise: float = 0.0
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

"""配置管理模块"""

import hashlib
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Optional, Dict, List, Any

import yaml
from dotenv import load_dotenv

from ..exceptions.custom_exceptions import ConfigError
from ..models.data_models import (
    DEFAULT_LABEL_SEMANTICS,
    SEQUENCES,
    COMPARTMENTS,
    ModelKind,
    SelectionMethod,
)

WORKERS_ENV = "GLIOMA_SURVIVAL_WORKERS"


@dataclass
class DataConfig:
    """数据路径配置"""
    root: str = "data"
    cohort_csv: str = ""
    # {root} {id} {sequence} 占位符
    image_pattern: str = "{root}/{id}/{id}_{sequence}.nii.gz"
    mask_pattern: str = "{root}/{id}/{id}_seg.nii.gz"
    # 特征名中的影像简称 → 文件名中的序列后缀
    sequences: Dict[str, str] = field(default_factory=lambda: {
        "T1": "t1", "T1c": "t1ce", "T2": "t2", "FLAIR": "flair",
    })
    label_semantics: Dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LABEL_SEMANTICS))
    external_features: List[str] = field(default_factory=list)


@dataclass
class AtlasConfig:
    """图谱与配准配置"""
    enabled: bool = True
    labels_path: str = ""
    regions_csv: str = ""
    template_path: str = ""
    registration_image: str = "T1"
    # 每个受试者的外部仿射矩阵（16个数，按行），存在时跳过内置配准
    affine_pattern: str = ""
    pyramid_levels: List[int] = field(default_factory=lambda: [4, 2, 1])
    max_evaluations: int = 200


@dataclass
class PreprocessingConfig:
    """预处理配置"""
    bin_width: float = 25.0
    log_sigma: float = 1.0
    min_mask_size: int = 8
    # brain: 非零脑区; tumor: 整个肿瘤
    normalization_region: str = "brain"
    # z-score 后的强度放大倍数
    intensity_scale: float = 100.0


@dataclass
class SelectionConfig:
    """特征选择配置"""
    method: str = SelectionMethod.MODEL_BASED_L1SVC.value
    k_features: int = 30
    c: float = 0.05
    stepwise_direction: str = "forward"
    # method 为 fixed 时使用的特征列表
    fixed_features: List[str] = field(default_factory=list)


@dataclass
class ModelConfig:
    """模型配置"""
    kind: str = ModelKind.SVC_ENSEMBLE.value
    svc_c: float = 1.0
    svr_c: float = 1.0
    svr_epsilon: float = 0.1
    logistic_l2: float = 1.0
    n_trees: int = 50
    seed: int = 0


@dataclass
class EnsembleConfig:
    """SVC 集成配置"""
    n_members: int = 100
    subsample_fraction: float = 0.8
    base_c: float = 1.0


@dataclass
class EvaluationConfig:
    """评估配置"""
    k_folds: int = 5
    repeats: int = 50
    seed: int = 0
    holdout_size: int = 33
    gtr_only: bool = False


@dataclass
class ReportConfig:
    """报告配置"""
    projection: str = "max"


SECTIONS = {
    'data': DataConfig,
    'atlas': AtlasConfig,
    'preprocessing': PreprocessingConfig,
    'selection': SelectionConfig,
    'model': ModelConfig,
    'ensemble': EnsembleConfig,
    'evaluation': EvaluationConfig,
    'report': ReportConfig,
}

# 不进入指纹的字段
_UNFINGERPRINTED = {
    'data': {'root', 'cohort_csv', 'image_pattern', 'mask_pattern', 'external_features'},
    'atlas': {'labels_path', 'regions_csv', 'template_path', 'affine_pattern'},
}

_EXTRACTION_SECTIONS = ('data', 'atlas', 'preprocessing')


def _build_section(cls, data: Optional[Dict[str, Any]], name: str):
    """由字典构造配置小节，未知键视为错误"""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"配置小节 {name} 必须是映射")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"配置小节 {name} 中存在未知键: {unknown}")
    section = cls(**data)
    if cls is DataConfig:
        section.label_semantics = {int(k): str(v) for k, v in section.label_semantics.items()}
    return section


def _digest(payload: Dict[str, Any]) -> str:
    text = yaml.safe_dump(payload, sort_keys=True, default_flow_style=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


@dataclass
class PipelineConfig:
    """流水线配置"""
    data: DataConfig = field(default_factory=DataConfig)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    preprocessing: PreprocessingConfig = field(default_factory=PreprocessingConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    output_dir: Path = Path("output")
    workers: int = 4
    log_level: str = "INFO"

    @classmethod
    def from_dict(cls, config_data: Optional[Dict[str, Any]]) -> 'PipelineConfig':
        """从字典构造配置"""
        config_data = dict(config_data or {})
        try:
            sections = {name: _build_section(section_cls, config_data.pop(name, None), name)
                        for name, section_cls in SECTIONS.items()}
            output_dir = Path(config_data.pop('output_dir', 'output'))
            workers = int(config_data.pop('workers', 4))
            log_level = str(config_data.pop('log_level', 'INFO'))
            if config_data:
                raise ConfigError(f"配置中存在未知键: {sorted(config_data)}")
            return cls(output_dir=output_dir, workers=workers, log_level=log_level, **sections)
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(f"解析配置失败: {str(e)}")

    @classmethod
    def from_yaml(cls, config_path: Path) -> 'PipelineConfig':
        """从YAML文件加载配置"""
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                config_data = yaml.safe_load(f)
        except Exception as e:
            raise ConfigError(f"加载配置文件失败: {str(e)}")
        config = cls.from_dict(config_data)
        # 相对路径以配置文件所在目录为基准
        config._resolve_paths(Path(config_path).parent)
        return config

    def _resolve_paths(self, base: Path) -> None:
        def resolve(value: str) -> str:
            if not value or Path(value).is_absolute():
                return value
            return str(base / value)

        self.data.root = resolve(self.data.root)
        self.data.cohort_csv = resolve(self.data.cohort_csv)
        self.data.external_features = [resolve(p) for p in self.data.external_features]
        self.atlas.labels_path = resolve(self.atlas.labels_path)
        self.atlas.regions_csv = resolve(self.atlas.regions_csv)
        self.atlas.template_path = resolve(self.atlas.template_path)
        if not self.output_dir.is_absolute():
            self.output_dir = base / self.output_dir

    def to_dict(self) -> Dict[str, Any]:
        result = {name: asdict(getattr(self, name)) for name in SECTIONS}
        result['output_dir'] = str(self.output_dir)
        result['workers'] = self.workers
        result['log_level'] = self.log_level
        return result

    def apply_env(self, env_file: Optional[Path] = None) -> None:
        """应用环境变量覆盖（可从 .env 文件读取）"""
        load_dotenv(dotenv_path=env_file, override=False)
        value = os.environ.get(WORKERS_ENV)
        if value:
            try:
                self.workers = int(value)
            except ValueError:
                raise ConfigError(f"环境变量 {WORKERS_ENV} 不是整数: {value}")

    def set_value(self, dotted_key: str, raw_value: str) -> None:
        """按 section.key 覆盖单个配置项，值按YAML标量解析"""
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as e:
            raise ConfigError(f"无法解析配置值 {raw_value}: {str(e)}")
        parts = dotted_key.split('.')
        if len(parts) == 1 and parts[0] in ('workers', 'log_level', 'output_dir'):
            if parts[0] == 'output_dir':
                self.output_dir = Path(str(value))
            else:
                setattr(self, parts[0], value)
            return
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"无效的配置键: {dotted_key}")
        section = getattr(self, parts[0])
        if parts[1] not in {f.name for f in fields(section)}:
            raise ConfigError(f"无效的配置键: {dotted_key}")
        setattr(section, parts[1], value)

    def validate(self, check_paths: bool = False) -> None:
        """检查配置不变量"""
        p = self.preprocessing
        if not (p.bin_width > 0 and p.log_sigma > 0 and p.min_mask_size >= 1 and p.intensity_scale > 0):
            raise ConfigError("预处理常数必须为正")
        if p.normalization_region not in ("brain", "tumor"):
            raise ConfigError(f"未知的归一化区域: {p.normalization_region}")
        if set(self.data.sequences) != set(SEQUENCES):
            raise ConfigError(f"影像序列必须为 {list(SEQUENCES)}")
        if set(self.data.label_semantics.values()) - set(COMPARTMENTS):
            raise ConfigError(f"标签语义只能映射到 {list(COMPARTMENTS)}")
        if self.atlas.registration_image not in SEQUENCES:
            raise ConfigError(f"未知的配准影像: {self.atlas.registration_image}")
        if self.atlas.max_evaluations < 1 or not self.atlas.pyramid_levels:
            raise ConfigError("配准迭代预算必须为正")
        s = self.selection
        try:
            SelectionMethod(s.method)
            ModelKind(self.model.kind)
        except ValueError as e:
            raise ConfigError(str(e))
        if s.k_features < 1 or s.c <= 0:
            raise ConfigError("k_features 必须 ≥ 1 且 c 必须为正")
        if s.stepwise_direction not in ("forward", "backward"):
            raise ConfigError(f"未知的逐步选择方向: {s.stepwise_direction}")
        if s.method == SelectionMethod.FIXED.value and not s.fixed_features:
            raise ConfigError("fixed 选择方法需要 fixed_features")
        m = self.model
        if min(m.svc_c, m.svr_c, m.logistic_l2) <= 0 or m.svr_epsilon < 0 or m.n_trees < 1:
            raise ConfigError("模型超参数必须为正")
        e = self.ensemble
        if e.n_members < 1 or not (0 < e.subsample_fraction < 1) or e.base_c <= 0:
            raise ConfigError("集成设置无效: 需要 n_members ≥ 1 且 0 < subsample_fraction < 1")
        v = self.evaluation
        if v.k_folds < 2 or v.repeats < 1 or v.holdout_size < 1:
            raise ConfigError("评估设置无效")
        if self.report.projection not in ("max", "sum"):
            raise ConfigError(f"未知的投影方式: {self.report.projection}")
        if self.workers < 1:
            raise ConfigError("workers 必须 ≥ 1")
        if check_paths:
            required = [self.data.cohort_csv]
            if self.atlas.enabled:
                required += [self.atlas.labels_path, self.atlas.regions_csv]
                if not self.atlas.affine_pattern:
                    required.append(self.atlas.template_path)
            missing = [p for p in required if not p or not Path(p).exists()]
            if missing:
                raise ConfigError(f"配置中引用的路径不存在: {missing}")

    def _fingerprint_payload(self, names) -> Dict[str, Any]:
        payload = {}
        for name in names:
            section = asdict(getattr(self, name))
            for key in _UNFINGERPRINTED.get(name, ()):
                section.pop(key, None)
            payload[name] = section
        return payload

    def extraction_fingerprint(self) -> str:
        """影响特征提取结果的配置哈希"""
        return _digest(self._fingerprint_payload(_EXTRACTION_SECTIONS))

    def fingerprint(self) -> str:
        """影响任何结果的配置哈希（路径、输出目录与线程数除外）"""
        return _digest(self._fingerprint_payload(SECTIONS))


class ConfigManager:
    """配置管理器"""
    _instance = None
    _config: Optional[PipelineConfig] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    @property
    def config(self) -> PipelineConfig:
        """获取配置"""
        if self._config is None:
            raise ConfigError("配置未初始化")
        return self._config

    def init_config(self, config_path: Optional[Path] = None) -> PipelineConfig:
        """初始化配置（无配置文件时使用默认值）"""
        if config_path is None:
            self._config = PipelineConfig()
        else:
            self._config = PipelineConfig.from_yaml(config_path)
        return self._config

    def set_config(self, config: PipelineConfig) -> None:
        self._config = config

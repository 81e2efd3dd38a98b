"""合成体模、带生存信号的合成队列与43区域体模图谱"""

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from ..exceptions.custom_exceptions import PhantomError
from ..models.data_models import (
    Volume,
    SegmentationMask,
    AtlasDefinition,
    FeatureTable,
    SubjectRecord,
    ResectionStatus,
    PhantomSpec,
    SEQUENCES,
)
from ..utils.file import FileManager
from .volume_io import encode_clinical, merge_feature_tables, write_volume, write_mask

ET_LABEL, ED_LABEL, NCR_LABEL = 4, 2, 1

PHANTOM_KINDS = ("ball", "shell", "cube", "checkerboard", "blob_cohort")

# 潜在严重程度三簇混合（短/中/长生存）的权重与中心
LATENT_WEIGHTS = (0.40, 0.26, 0.34)
LATENT_CENTERS = (-2.0, 0.0, 2.0)
LATENT_SPREAD = 0.4

# 潜变量 → 生存天数的分段线性节点，簇间间隙落在类别阈值上
DAY_KNOTS_Z = (-4.0, -1.0, 1.0, 4.0)
DAY_KNOTS = (30.0, 304.375, 456.5625, 1200.0)

ATLAS_BLOCK = 4

ATLAS_REGIONS = [
    "Left-Lateral-Ventricle", "Left-Inf-Lat-Vent", "Left-Cerebellum-White-Matter",
    "Left-Cerebellum-Cortex", "Left-Thalamus", "Left-Caudate", "Left-Putamen",
    "Left-Pallidum", "3rd-Ventricle", "4th-Ventricle", "Brain-Stem", "Left-Hippocampus",
    "Left-Amygdala", "CSF", "Left-Accumbens-area", "Left-VentralDC", "Left-vessel",
    "Left-choroid-plexus", "Right-Lateral-Ventricle", "Right-Inf-Lat-Vent",
    "Right-Cerebellum-White-Matter", "Right-Cerebellum-Cortex", "Right-Thalamus",
    "Right-Caudate", "Right-Putamen", "Right-Pallidum", "Right-Hippocampus",
    "Right-Amygdala", "Right-Accumbens-area", "Right-VentralDC", "Right-vessel",
    "Right-choroid-plexus", "5th-Ventricle", "WM-hypointensities",
    "non-WM-hypointensities", "Optic-Chiasm", "CC_Posterior", "CC_Mid_Posterior",
    "CC_Central", "CC_Mid_Anterior", "CC_Anterior", "Left-Cerebral-White-Matter",
    "Right-Cerebral-White-Matter",
]

# 各序列中 (背景脑组织, ED, ET, NCR) 的平均强度
SEQUENCE_INTENSITIES = {
    "T1": (400.0, 330.0, 420.0, 250.0),
    "T1c": (420.0, 360.0, 900.0, 260.0),
    "T2": (500.0, 900.0, 700.0, 1100.0),
    "FLAIR": (450.0, 950.0, 650.0, 500.0),
}


def _affine(spacing: Sequence[float]) -> np.ndarray:
    return np.diag([float(s) for s in spacing] + [1.0])


def _grid(shape: Sequence[int], center: Sequence[float]) -> np.ndarray:
    """到中心的体素距离"""
    axes = np.meshgrid(*[np.arange(n, dtype=np.float64) - c for n, c in zip(shape, center)], indexing='ij')
    return np.sqrt(sum(a * a for a in axes))


def _center(spec: PhantomSpec) -> np.ndarray:
    default = [(n - 1) / 2.0 for n in spec.shape]
    return np.asarray(spec.params.get('center', default), dtype=np.float64)


def _check_fits(spec: PhantomSpec, center: np.ndarray, extent: float) -> None:
    shape = np.asarray(spec.shape, dtype=np.float64)
    if np.any(center - extent < 0) or np.any(center + extent > shape - 1):
        raise PhantomError(f"{spec.kind} 体模超出网格 {tuple(spec.shape)}: 中心 {center.tolist()}, 半径 {extent}")


def _finish(spec: PhantomSpec, intensity: np.ndarray, labels: np.ndarray) -> Tuple[Volume, SegmentationMask]:
    rng = np.random.default_rng(spec.seed)
    if spec.noise > 0:
        intensity = intensity + rng.normal(0.0, spec.noise, size=intensity.shape)
    affine = _affine(spec.spacing)
    return (
        Volume(data=intensity, spacing=spec.spacing, affine=affine),
        SegmentationMask(labels=labels, spacing=spec.spacing, affine=affine),
    )


def make_phantom(spec: PhantomSpec) -> Tuple[Volume, SegmentationMask]:
    """按描述栅格化体模

    ball: 半径 radius 的实心球（ET）；shell: 外半径 outer、内半径 inner 的ET球壳包住NCR核心；
    cube: 边长 side 的立方体（ET）；checkerboard: 边长 period 的棋盘格强度，掩膜为整个网格（ET）；
    blob_cohort: 脑区椭球中带ED外层、ET环与NCR核心的肿瘤。
    """
    if spec.kind not in PHANTOM_KINDS:
        raise PhantomError(f"未知的体模种类: {spec.kind}")
    if len(spec.shape) != 3 or min(spec.shape) < 1:
        raise PhantomError(f"体模网格尺寸无效: {spec.shape}")
    shape = tuple(int(n) for n in spec.shape)
    p = spec.params
    center = _center(spec)
    labels = np.zeros(shape, dtype=np.int16)
    value = float(p.get('intensity', 100.0))

    if spec.kind == "ball":
        radius = float(p.get('radius', 10))
        _check_fits(spec, center, radius)
        labels[_grid(shape, center) <= radius] = ET_LABEL
        intensity = np.where(labels > 0, value, 0.0)
    elif spec.kind == "shell":
        outer, inner = float(p.get('outer', 10)), float(p.get('inner', 6))
        if not 0 < inner < outer:
            raise PhantomError(f"球壳半径必须满足 0 < inner < outer: ({outer}, {inner})")
        _check_fits(spec, center, outer)
        distance = _grid(shape, center)
        labels[distance <= outer] = ET_LABEL
        labels[distance <= inner] = NCR_LABEL
        intensity = np.where(labels == ET_LABEL, value, np.where(labels == NCR_LABEL, value / 2.0, 0.0))
    elif spec.kind == "cube":
        side = int(p.get('side', 8))
        start = np.asarray(p.get('start', [(n - side) // 2 for n in shape]), dtype=np.int64)
        if side < 1 or np.any(start < 0) or np.any(start + side > np.asarray(shape)):
            raise PhantomError(f"立方体超出网格 {shape}: 起点 {start.tolist()}, 边长 {side}")
        labels[tuple(slice(s, s + side) for s in start)] = ET_LABEL
        intensity = np.where(labels > 0, value, 0.0)
    elif spec.kind == "checkerboard":
        period = int(p.get('period', 1))
        if period < 1:
            raise PhantomError(f"棋盘格周期必须 ≥ 1: {period}")
        blocks = sum(np.indices(shape)[axis] // period for axis in range(3))
        intensity = np.where(blocks % 2 == 0, value, 2.0 * value)
        labels[:] = ET_LABEL
    else:
        return _blob_subject(spec, center)
    return _finish(spec, intensity.astype(np.float64), labels)


def _blob_subject(spec: PhantomSpec, center: np.ndarray) -> Tuple[Volume, SegmentationMask]:
    """单个受试者的T1样影像与三子区域分割"""
    shape = tuple(int(n) for n in spec.shape)
    p = spec.params
    ed = float(p.get('ed_radius', 7.0))
    et = float(p.get('et_radius', 5.0))
    ncr = float(p.get('ncr_radius', 2.5))
    if not 0 < ncr < et < ed:
        raise PhantomError(f"需要 0 < ncr_radius < et_radius < ed_radius: ({ncr}, {et}, {ed})")
    _check_fits(spec, center, ed)
    sequence = str(p.get('sequence', "T1"))
    if sequence not in SEQUENCE_INTENSITIES:
        raise PhantomError(f"未知的序列: {sequence}")

    half = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    axes = np.meshgrid(*[(np.arange(n) - c) / max(c, 1.0) for n, c in zip(shape, half)], indexing='ij')
    brain = sum(a * a for a in axes) <= 0.95 ** 2
    distance = _grid(shape, center)

    labels = np.zeros(shape, dtype=np.int16)
    labels[(distance <= ed) & brain] = ED_LABEL
    labels[(distance <= et) & brain] = ET_LABEL
    labels[(distance <= ncr) & brain] = NCR_LABEL

    background, ed_value, et_value, ncr_value = SEQUENCE_INTENSITIES[sequence]
    intensity = np.zeros(shape)
    intensity[brain] = background
    intensity[labels == ED_LABEL] = ed_value
    intensity[labels == ET_LABEL] = et_value
    intensity[labels == NCR_LABEL] = ncr_value
    rng = np.random.default_rng(spec.seed)
    noise = spec.noise if spec.noise > 0 else 0.05 * background
    intensity[brain] += rng.normal(0.0, noise, size=int(brain.sum()))
    # 脑区外保持为0（颅骨剥离）
    intensity[brain] = np.maximum(intensity[brain], 1.0)
    affine = _affine(spec.spacing)
    return (
        Volume(data=intensity, spacing=spec.spacing, affine=affine),
        SegmentationMask(labels=labels, spacing=spec.spacing, affine=affine),
    )


def latent_to_days(z: np.ndarray) -> np.ndarray:
    """潜变量 → 生存天数（严格单调，分段线性并向两端线性外推）"""
    z = np.asarray(z, dtype=np.float64)
    days = np.interp(z, DAY_KNOTS_Z, DAY_KNOTS)
    low_slope = (DAY_KNOTS[1] - DAY_KNOTS[0]) / (DAY_KNOTS_Z[1] - DAY_KNOTS_Z[0])
    high_slope = (DAY_KNOTS[3] - DAY_KNOTS[2]) / (DAY_KNOTS_Z[3] - DAY_KNOTS_Z[2])
    days = np.where(z < DAY_KNOTS_Z[0], DAY_KNOTS[0] + (z - DAY_KNOTS_Z[0]) * low_slope, days)
    days = np.where(z > DAY_KNOTS_Z[3], DAY_KNOTS[3] + (z - DAY_KNOTS_Z[3]) * high_slope, days)
    return np.maximum(days, 1.0)


def make_cohort(
    n: int = 163,
    n_features: int = 40,
    signal_features: int = 4,
    noise: float = 0.05,
    seed: int = 0,
    id_prefix: str = "Synth",
    balanced: bool = False
) -> Tuple[FeatureTable, List[SubjectRecord]]:
    """带植入信号的合成队列

    潜在严重程度 z 取自三簇混合；生存天数是 z（加噪声）的严格单调函数。
    signal_XX 特征为 z 的带噪仿射变换，noise_XXX 为无关特征；
    年龄与 z 负相关，另附 Age 与 ResectionStatus 两列临床特征。
    balanced 为真时三簇轮流分配（小队列中每类人数相差不超过1）。
    """
    if not 0 <= signal_features <= n_features:
        raise PhantomError(f"信号特征数 {signal_features} 必须在 0 与总特征数 {n_features} 之间")
    if n < 1:
        raise PhantomError(f"受试者数必须为正: {n}")
    rng = np.random.default_rng(seed)
    if balanced:
        cluster = rng.permutation(np.arange(n) % len(LATENT_WEIGHTS))
    else:
        cluster = rng.choice(len(LATENT_WEIGHTS), size=n, p=LATENT_WEIGHTS)
    z = np.asarray(LATENT_CENTERS)[cluster] + rng.normal(0.0, LATENT_SPREAD, size=n)

    days = latent_to_days(z + noise * rng.normal(size=n))

    columns = []
    names = []
    for j in range(signal_features):
        scale = rng.uniform(0.5, 5.0)
        offset = rng.uniform(-10.0, 10.0)
        columns.append(scale * (z + noise * rng.normal(size=n)) + offset)
        names.append(f"signal_{j:02d}")
    for j in range(n_features - signal_features):
        scale = rng.uniform(0.5, 5.0)
        offset = rng.uniform(-10.0, 10.0)
        columns.append(scale * rng.normal(size=n) + offset)
        names.append(f"noise_{j:03d}")

    age = np.clip(np.round(60.0 - 5.0 * z + rng.normal(0.0, 8.0, size=n), 1), 18.0, 95.0)
    statuses = rng.choice([ResectionStatus.GTR.value, ResectionStatus.STR.value, ResectionStatus.NA.value], size=n, p=[0.6, 0.1, 0.3])
    ids = [f"{id_prefix}_{i + 1:03d}" for i in range(n)]
    records = [
        SubjectRecord(id=sid, age=float(a), resection_status=ResectionStatus(s), survival_days=float(d))
        for sid, a, s, d in zip(ids, age, statuses, days)
    ]
    values = np.column_stack(columns) if columns else np.zeros((n, 0))
    clinical = encode_clinical(records)
    if not names:
        return clinical, records
    table = FeatureTable(subject_ids=ids, feature_names=names, values=values)
    return merge_feature_tables(table, clinical), records


def make_phantom_atlas(
    shape: Sequence[int] = (32, 32, 24),
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    n_regions: int = len(ATLAS_REGIONS)
) -> Tuple[AtlasDefinition, Volume]:
    """4³ 体素块按块编号循环分配区域标签的体模图谱及其模板影像"""
    shape = tuple(int(n) for n in shape)
    if not 1 <= n_regions <= len(ATLAS_REGIONS):
        raise PhantomError(f"区域数必须在 1 与 {len(ATLAS_REGIONS)} 之间: {n_regions}")
    blocks = [int(np.ceil(n / ATLAS_BLOCK)) for n in shape]
    if int(np.prod(blocks)) < n_regions:
        raise PhantomError(f"网格 {shape} 太小，无法容纳 {n_regions} 个区域")
    index = np.indices(shape) // ATLAS_BLOCK
    block_index = (index[0] * blocks[1] + index[1]) * blocks[2] + index[2]
    labels = (block_index % n_regions + 1).astype(np.int32)
    affine = _affine(spacing)
    atlas = AtlasDefinition(
        labels=labels,
        spacing=tuple(spacing),
        affine=affine,
        regions=[(i + 1, ATLAS_REGIONS[i]) for i in range(n_regions)],
    )
    # 模板：平滑的中心亮、向外渐暗的脑样影像
    half = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    axes = np.meshgrid(*[(np.arange(n) - c) / max(c, 1.0) for n, c in zip(shape, half)], indexing='ij')
    radius2 = sum(a * a for a in axes)
    template = np.where(radius2 <= 0.95 ** 2, 400.0 * (1.2 - radius2) + 30.0 * axes[0], 0.0)
    return atlas, Volume(data=template, spacing=tuple(spacing), affine=affine)


def tumor_radii(survival_days: float, rng: np.random.Generator) -> Tuple[float, float, float]:
    """由生存天数反推潜变量，得到 (NCR, ET, ED) 半径：越严重坏死核心与水肿越大"""
    z = float(np.interp(survival_days, DAY_KNOTS, DAY_KNOTS_Z))
    t = float(np.clip((z + 3.0) / 6.0, 0.0, 1.0))
    ncr = 2.0 + 2.5 * (1.0 - t) + float(rng.uniform(-0.15, 0.15))
    et = ncr + float(rng.uniform(1.8, 2.2))
    ed = et + float(rng.uniform(1.3, 1.7))
    return ncr, et, ed


def write_synthetic_cohort(
    root: Path,
    n: int = 12,
    seed: int = 0,
    shape: Sequence[int] = (32, 32, 24),
    spacing: Sequence[float] = (1.0, 1.0, 1.0)
) -> Dict[str, Dict[str, str]]:
    """写出可直接运行 extract 的合成队列

    每个受试者写出4个序列影像、分割与到图谱的单位仿射矩阵文本，子区域半径随生存天数变化；
    另写出挑战赛列名的队列CSV与体模图谱（标签、区域列表、模板）。

    Returns:
        data 与 atlas 小节的配置项，可与其它小节合并后传给 PipelineConfig.from_dict
    """
    root = Path(root)
    FileManager.ensure_dir(root)
    _, records = make_cohort(n=n, n_features=0, signal_features=0, seed=seed, balanced=True)
    rng = np.random.default_rng(seed + 1)
    half = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0

    for index, record in enumerate(records):
        subject_dir = root / record.id
        ncr, et, ed = tumor_radii(record.survival_days, rng)
        center = (half + rng.uniform(-1.5, 1.5, size=3)).tolist()
        mask = None
        for s_index, sequence in enumerate(SEQUENCES):
            spec = PhantomSpec(
                kind="blob_cohort",
                shape=tuple(shape),
                params={'ed_radius': ed, 'et_radius': et, 'ncr_radius': ncr,
                        'center': center, 'sequence': sequence},
                seed=seed * 1000 + index * len(SEQUENCES) + s_index,
                spacing=tuple(spacing),
            )
            volume, mask = make_phantom(spec)
            suffix = {"T1": "t1", "T1c": "t1ce", "T2": "t2", "FLAIR": "flair"}[sequence]
            write_volume(volume, subject_dir / f"{record.id}_{suffix}.nii.gz")
        write_mask(mask, subject_dir / f"{record.id}_seg.nii.gz")
        (subject_dir / f"{record.id}_to_atlas.txt").write_text(
            "\n".join(" ".join(f"{v:g}" for v in row) for row in np.eye(4)) + "\n", encoding='utf-8'
        )

    cohort = pd.DataFrame({
        'BraTS18ID': [r.id for r in records],
        'Age': [f"{r.age:.1f}" for r in records],
        'Survival': [f"{r.survival_days:.0f}" for r in records],
        'ResectionStatus': [r.resection_status.value for r in records],
    })
    cohort_path = root / "survival_data.csv"
    FileManager.write_csv(cohort, cohort_path, float_format=None)

    atlas, template = make_phantom_atlas(shape, spacing)
    atlas_dir = root / "atlas"
    labels_volume = Volume(data=atlas.labels.astype(np.float64), spacing=atlas.spacing, affine=atlas.affine)
    write_volume(labels_volume, atlas_dir / "labels.nii.gz", dtype=np.int16)
    write_volume(template, atlas_dir / "template.nii.gz")
    FileManager.write_csv(
        pd.DataFrame({'id': [i for i, _ in atlas.regions], 'name': [name for _, name in atlas.regions]}),
        atlas_dir / "regions.csv",
        float_format=None,
    )
    return {
        'data': {'root': str(root), 'cohort_csv': str(cohort_path)},
        'atlas': {
            'labels_path': str(atlas_dir / "labels.nii.gz"),
            'regions_csv': str(atlas_dir / "regions.csv"),
            'template_path': str(atlas_dir / "template.nii.gz"),
            'affine_pattern': "{root}/{id}/{id}_to_atlas.txt",
        },
    }

"""仿射配准到标签图谱与各解剖区域的增强肿瘤占比"""

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage, optimize
from scipy.spatial.transform import Rotation

from ..config.config import AtlasConfig
from ..exceptions.custom_exceptions import RegistrationError, VolumeIOError
from ..models.data_models import (
    Volume,
    SegmentationMask,
    AffineTransform,
    AtlasDefinition,
    RegistrationResult,
    FeatureMap,
)
from ..utils.logging import logger
from .volume_io import read_volume

# 平移(mm) / 欧拉角(rad) / 对数尺度 / 剪切 的初始步长
PARAMETER_STEPS = np.array([2.0] * 3 + [0.05] * 3 + [0.05] * 3 + [0.05] * 3)


def grid_spacing(affine: np.ndarray) -> Tuple[float, float, float]:
    """由仿射矩阵得到体素间距"""
    return tuple(float(s) for s in np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0)))


def grid_center(affine: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """网格中心的世界坐标"""
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return (np.asarray(affine) @ np.append(center, 1.0))[:3]


def parameters_to_transform(params: np.ndarray, center: np.ndarray) -> AffineTransform:
    """12参数（平移、欧拉角、对数尺度、剪切）绕 center 的仿射变换"""
    translation = params[0:3]
    rotation = Rotation.from_euler('xyz', params[3:6]).as_matrix()
    scale = np.diag(np.exp(params[6:9]))
    shear = np.eye(3)
    shear[0, 1], shear[0, 2], shear[1, 2] = params[9:12]
    linear = rotation @ shear @ scale
    matrix = np.eye(4)
    matrix[:3, :3] = linear
    matrix[:3, 3] = center - linear @ center + translation
    return AffineTransform(matrix)


def resample_volume(
    source: np.ndarray,
    source_affine: np.ndarray,
    transform: AffineTransform,
    target_affine: np.ndarray,
    target_shape: Sequence[int],
    order: int = 1
) -> np.ndarray:
    """把源网格数据重采样到目标网格

    Args:
        source: 源体素数据
        source_affine: 源网格 体素→世界
        transform: 源世界 → 目标世界
        target_affine: 目标网格 体素→世界
        target_shape: 目标网格尺寸
        order: 插值阶数（影像1，标签0）

    Returns:
        目标网格上的数组，越界处为0
    """
    voxel_map = np.linalg.inv(source_affine) @ np.linalg.inv(transform.matrix) @ np.asarray(target_affine)
    return ndimage.affine_transform(
        np.asarray(source),
        voxel_map[:3, :3],
        offset=voxel_map[:3, 3],
        output_shape=tuple(int(s) for s in target_shape),
        order=order,
        mode='constant',
        cval=0,
    )


def warp_mask(
    mask: SegmentationMask,
    transform: AffineTransform,
    target_affine: np.ndarray,
    target_shape: Sequence[int]
) -> SegmentationMask:
    """最近邻重采样分割到目标（图谱）网格"""
    labels = resample_volume(mask.labels.astype(np.int16), mask.affine, transform, target_affine, target_shape, order=0)
    return SegmentationMask(
        labels=labels,
        spacing=grid_spacing(target_affine),
        affine=target_affine,
        label_semantics=mask.label_semantics,
    )


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denominator = np.sqrt((a * a).sum() * (b * b).sum())
    if denominator <= 0:
        return 0.0
    return float((a * b).sum() / denominator)


def _pyramid_level(volume: Volume, factor: int) -> Tuple[np.ndarray, np.ndarray]:
    """高斯预滤波后按 factor 抽样，返回 (数据, 仿射)"""
    if factor <= 1:
        return np.asarray(volume.data), np.asarray(volume.affine)
    smoothed = ndimage.gaussian_filter(volume.data, sigma=factor / 2.0, mode='nearest')
    affine = np.asarray(volume.affine) @ np.diag([factor, factor, factor, 1.0])
    return smoothed[::factor, ::factor, ::factor], affine


def _center_of_mass(volume: Volume) -> np.ndarray:
    weights = np.clip(volume.data, 0.0, None)
    if weights.sum() <= 0:
        return grid_center(volume.affine, volume.dims)
    com = np.array(ndimage.center_of_mass(weights))
    return (np.asarray(volume.affine) @ np.append(com, 1.0))[:3]


def affine_register(
    moving: Volume,
    fixed: Volume,
    levels: Sequence[int] = (4, 2, 1),
    max_evaluations: int = 200
) -> RegistrationResult:
    """多分辨率 Powell 搜索使归一化互相关最大的12参数仿射（受试者世界 → 图谱世界）"""
    if np.ptp(moving.data) == 0 or np.ptp(fixed.data) == 0:
        raise RegistrationError("配准输入影像为常数")
    center = grid_center(fixed.affine, fixed.dims)
    params = np.zeros(12)
    # 以质心对齐初始化平移
    params[0:3] = _center_of_mass(fixed) - _center_of_mass(moving)

    converged = True
    evaluations = 0
    objective = 0.0
    for factor in levels:
        fixed_data, fixed_affine = _pyramid_level(fixed, factor)
        # 移动影像只平滑不抽样
        if factor > 1:
            moving_level = ndimage.gaussian_filter(moving.data, sigma=factor / 2.0, mode='nearest')
        else:
            moving_level = np.asarray(moving.data)
        fixed_flat = fixed_data.ravel()

        def cost(x: np.ndarray) -> float:
            transform = parameters_to_transform(x, center)
            warped = resample_volume(moving_level, moving.affine, transform, fixed_affine, fixed_data.shape)
            return -_ncc(fixed_flat, warped.ravel())

        result = optimize.minimize(
            cost,
            params,
            method='Powell',
            options={
                'maxfev': max_evaluations,
                'xtol': 1e-3,
                'ftol': 1e-7,
                'direc': np.diag(PARAMETER_STEPS),
            },
        )
        evaluations += int(result.nfev)
        if cost(result.x) <= cost(params):
            params = np.asarray(result.x, dtype=np.float64)
        objective = -float(cost(params))
        level_converged = bool(result.success) and result.nfev < max_evaluations
        converged = converged and level_converged
        logger.debug(f"配准层级 {factor}: NCC={objective:.4f}, 评估次数={result.nfev}")

    if not converged:
        logger.warning(f"配准在迭代预算内未收敛，返回当前最优结果 (NCC={objective:.4f})")
    return RegistrationResult(
        transform=parameters_to_transform(params, center),
        objective=objective,
        converged=converged,
        evaluations=evaluations,
    )


def load_atlas(labels_path: Path, regions_csv: Path) -> AtlasDefinition:
    """读取图谱标签影像与区域列表（id, name）"""
    labels_volume = read_volume(labels_path)
    data = labels_volume.data
    if not np.array_equal(data, np.round(data)):
        raise RegistrationError(f"图谱标签影像中存在非整数值: {labels_path}")
    try:
        regions = pd.read_csv(regions_csv, dtype={'id': int, 'name': str})
        pairs = list(zip(regions['id'].tolist(), regions['name'].str.strip().tolist()))
    except Exception as e:
        raise RegistrationError(f"读取图谱区域列表失败 {regions_csv}: {str(e)}")
    return AtlasDefinition(
        labels=data.astype(np.int32),
        spacing=labels_volume.spacing,
        affine=labels_volume.affine,
        regions=pairs,
    )


def read_affine_text(path: Path) -> AffineTransform:
    """读取16个数（按行排列）的仿射矩阵文本"""
    try:
        text = Path(path).read_text(encoding='utf-8')
        values = np.array(text.replace(',', ' ').split(), dtype=np.float64)
    except Exception as e:
        raise RegistrationError(f"读取仿射矩阵失败 {path}: {str(e)}")
    if values.size != 16:
        raise RegistrationError(f"仿射矩阵必须包含16个数，实际 {values.size}: {path}")
    return AffineTransform(values.reshape(4, 4))


def region_feature_name(region_name: str) -> str:
    return "atlas_" + "_".join(region_name.split())


def region_occupancy(ce_mask: np.ndarray, atlas: AtlasDefinition) -> FeatureMap:
    """每个区域被增强肿瘤占据的体积比例 |CE ∩ R| / |R|"""
    ce_mask = np.asarray(ce_mask, dtype=bool)
    if ce_mask.shape != atlas.dims:
        raise RegistrationError(f"增强肿瘤掩膜 {ce_mask.shape} 不在图谱网格 {atlas.dims} 上")
    labels = atlas.labels
    size = int(max(labels.max(), max(region_id for region_id, _ in atlas.regions))) + 1
    region_sizes = np.bincount(labels.ravel(), minlength=size)
    overlap = np.bincount(labels[ce_mask], minlength=size)
    feature_map = FeatureMap()
    for region_id, name in atlas.regions:
        feature_map.add(region_feature_name(name), overlap[region_id] / region_sizes[region_id])
    return feature_map


def atlas_features(
    registration_volume: Volume,
    mask: SegmentationMask,
    atlas: AtlasDefinition,
    template: Optional[Volume] = None,
    transform: Optional[AffineTransform] = None,
    settings: Optional[AtlasConfig] = None
) -> FeatureMap:
    """配准（或使用外部仿射）后计算图谱区域占比特征"""
    settings = settings or AtlasConfig()
    flags = []
    if transform is None:
        if template is None:
            raise RegistrationError("没有外部仿射矩阵时需要图谱模板影像")
        result = affine_register(
            registration_volume,
            template,
            levels=settings.pyramid_levels,
            max_evaluations=settings.max_evaluations,
        )
        transform = result.transform
        if not result.converged:
            flags.append(f"配准未收敛 (NCC={result.objective:.4f})")
    warped = warp_mask(mask, transform, atlas.affine, atlas.dims)
    feature_map = region_occupancy(warped.compartment("ET"), atlas)
    feature_map.flags.extend(flags)
    return feature_map


def load_template(path: Path) -> Volume:
    """读取图谱模板影像"""
    try:
        return read_volume(path)
    except VolumeIOError as e:
        raise RegistrationError(f"读取图谱模板失败: {str(e)}")

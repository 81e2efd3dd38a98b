"""影像归一化、LoG滤波、灰度离散化与掩膜检查"""

from typing import Sequence

import numpy as np
from scipy import ndimage

from ..exceptions.custom_exceptions import PreprocessingError, DegenerateImageError
from ..models.data_models import Volume, DiscretizedVolume

# 高斯核在每个轴上截断于 4σ
TRUNCATE_SIGMAS = 4.0


def brain_region(volume: Volume) -> np.ndarray:
    """颅骨剥离后影像的脑区（非零体素）"""
    return volume.data != 0


def zscore_normalize(volume: Volume, region: np.ndarray) -> Volume:
    """按区域内均值和总体标准差做 z-score 归一化，区域外使用同一变换"""
    region = np.asarray(region, dtype=bool)
    if region.shape != volume.dims:
        raise PreprocessingError(f"归一化区域形状 {region.shape} 与影像 {volume.dims} 不一致")
    if not region.any():
        raise PreprocessingError("归一化区域为空")
    values = volume.data[region]
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise DegenerateImageError("归一化区域内标准差为0")
    return volume.with_data((volume.data - mean) / std)


def gaussian_kernel_1d(sigma_voxels: float) -> np.ndarray:
    """截断于 4σ 的归一化一维高斯核"""
    radius = int(np.ceil(TRUNCATE_SIGMAS * sigma_voxels))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma_voxels) ** 2)
    return kernel / kernel.sum()


def _second_difference(spacing: float) -> np.ndarray:
    return np.array([1.0, -2.0, 1.0]) / (spacing * spacing)


def _check_sigma(sigma: float) -> None:
    if not np.isfinite(sigma) or sigma <= 0:
        raise PreprocessingError(f"LoG σ 必须为有限正数: {sigma}")


def log_filter(volume: Volume, sigma: float) -> Volume:
    """可分离高斯平滑（σ以mm计）后接离散拉普拉斯，镜像边界"""
    _check_sigma(sigma)
    smoothed = volume.data
    for axis, h in enumerate(volume.spacing):
        smoothed = ndimage.correlate1d(smoothed, gaussian_kernel_1d(sigma / h), axis=axis, mode='mirror')
    response = np.zeros_like(smoothed)
    for axis, h in enumerate(volume.spacing):
        response += ndimage.correlate1d(smoothed, _second_difference(h), axis=axis, mode='mirror')
    return volume.with_data(response)


def log_kernel(sigma: float, spacing: Sequence[float]) -> np.ndarray:
    """与 log_filter 等价的稠密三维核，系数和平移为0"""
    _check_sigma(sigma)
    gaussians = [gaussian_kernel_1d(sigma / h) for h in spacing]
    # 每轴补零到与二阶差分后的长度一致
    padded = [np.pad(g, 1) for g in gaussians]
    kernel = np.zeros(tuple(len(p) for p in padded))
    for axis, h in enumerate(spacing):
        factors = list(padded)
        factors[axis] = np.convolve(gaussians[axis], _second_difference(h))
        kernel += np.einsum('i,j,k->ijk', *factors)
    return kernel - kernel.mean()


def preprocess_image(volume: Volume, region: np.ndarray, sigma: float, scale: float = 1.0) -> Volume:
    """z-score（可乘以放大倍数）后接 LoG 滤波"""
    normalized = zscore_normalize(volume, region)
    if scale != 1.0:
        normalized = normalized.with_data(normalized.data * scale)
    return log_filter(normalized, sigma)


def discretize(volume: Volume, mask: np.ndarray, bin_width: float = 25.0) -> DiscretizedVolume:
    """以掩膜内最小值为锚点的固定宽度分箱"""
    mask = np.asarray(mask, dtype=bool)
    if not np.isfinite(bin_width) or bin_width <= 0:
        raise PreprocessingError(f"分箱宽度必须为正: {bin_width}")
    if mask.shape != volume.dims:
        raise PreprocessingError(f"掩膜形状 {mask.shape} 与影像 {volume.dims} 不一致")
    if not mask.any():
        raise PreprocessingError("离散化的掩膜为空")
    values = volume.data[mask]
    levels = np.floor((values - values.min()) / bin_width).astype(np.int64) + 1
    bins = np.zeros(volume.dims, dtype=np.int32)
    bins[mask] = levels
    return DiscretizedVolume(bins=bins, n_levels=int(levels.max()), spacing=volume.spacing)


def validate_mask(mask: np.ndarray, min_size: int = 8) -> bool:
    """掩膜体素数是否达到最小值"""
    return int(np.count_nonzero(mask)) >= min_size

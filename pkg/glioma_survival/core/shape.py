"""子区域形状特征、增强肿瘤环宽与体积比"""

from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from skimage import measure

from ..models.data_models import SegmentationMask, SurfaceEstimate, FeatureMap, COMPARTMENTS

SHAPE_NAMES = [
    "VoxelVolume", "MeshVolume", "SurfaceArea", "SurfaceVolumeRatio", "Sphericity",
    "Maximum3DDiameter", "Maximum2DDiameterSlice", "Maximum2DDiameterColumn",
    "Maximum2DDiameterRow", "MajorAxisLength", "MinorAxisLength", "LeastAxisLength",
    "Elongation", "Flatness", "MeshVoxelVolumeRatio",
]

RIM_NAMES = ["Mean", "Q1", "Median", "Q3", "Max", "IQR", "Q3Q1Ratio", "GeometricHeterogeneity"]

# (名称, 分子子区域, 分母子区域)；WT = ET+ED+NCR, TC = ET+NCR
RATIOS = [
    ("ET_ED", ("ET",), ("ED",)),
    ("ET_NCR", ("ET",), ("NCR",)),
    ("ED_NCR", ("ED",), ("NCR",)),
    ("ET_WT", ("ET",), ("ET", "ED", "NCR")),
    ("ED_WT", ("ED",), ("ET", "ED", "NCR")),
    ("NCR_WT", ("NCR",), ("ET", "ED", "NCR")),
    ("TC_WT", ("ET", "NCR"), ("ET", "ED", "NCR")),
]

# 二维最大直径所在平面的法向轴（体素索引顺序 x, y, z）
DIAMETER_PLANES = {"Slice": 2, "Column": 1, "Row": 0}


def shape_feature_names() -> list:
    """基本形状与自定义形状特征名（固定顺序）"""
    names = [f"{comp}_shape_{name}" for comp in COMPARTMENTS for name in SHAPE_NAMES]
    names += [f"ET_rim_{name}" for name in RIM_NAMES]
    names += [f"WT_ratio_{name}" for name, _, _ in RATIOS]
    return names


def sphericity(volume: float, area: float) -> float:
    """π^(1/3)·(6V)^(2/3)/A"""
    if area <= 0:
        return 0.0
    return float(np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area)


def voxel_face_area(mask: np.ndarray, spacing: Sequence[float]) -> float:
    """暴露的体素面面积之和"""
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    area = 0.0
    for axis in range(3):
        faces = np.count_nonzero(np.diff(padded.astype(np.int8), axis=axis))
        others = [spacing[a] for a in range(3) if a != axis]
        area += faces * others[0] * others[1]
    return float(area)


def _mesh(mask: np.ndarray, spacing: Sequence[float]) -> Tuple[float, float]:
    """二值掩膜在0.5等值面的移动立方体网格体积与面积"""
    padded = np.pad(np.asarray(mask, dtype=np.float32), 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, spacing=tuple(spacing))
    area = measure.mesh_surface_area(verts, faces)
    triangles = verts[faces]
    signed = np.einsum('ij,ij->i', triangles[:, 0], np.cross(triangles[:, 1], triangles[:, 2])).sum() / 6.0
    return float(abs(signed)), float(area)


def _max_distance(points: np.ndarray) -> float:
    """点集最大两两距离（先取凸包顶点）"""
    if len(points) < 2:
        return 0.0
    if len(points) > points.shape[1] + 1:
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            try:
                points = points[ConvexHull(points, qhull_options='QJ').vertices]
            except (QhullError, ValueError):
                pass
    return float(pdist(points).max())


def _principal_variances(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """体素坐标协方差的特征值（降序，总体协方差）"""
    coords = np.argwhere(mask) * np.asarray(spacing)
    if len(coords) < 2:
        return np.zeros(3)
    eigen = np.linalg.eigvalsh(np.cov(coords, rowvar=False, bias=True))
    return np.clip(eigen[::-1], 0.0, None)


def surface_estimate(mask: np.ndarray, spacing: Sequence[float]) -> SurfaceEstimate:
    """网格体积、网格面积与主轴长度"""
    volume, area = _mesh(mask, spacing)
    axes = 4.0 * np.sqrt(_principal_variances(mask, spacing))
    return SurfaceEstimate(
        volume_mm3=volume,
        surface_area_mm2=area,
        principal_axis_lengths=tuple(float(a) for a in axes),
    )


def basic_shape_features(mask: np.ndarray, spacing: Sequence[float], prefix: str = "") -> FeatureMap:
    """15个基本形状特征；空掩膜置0并记录"""
    mask = np.asarray(mask, dtype=bool)
    feature_map = FeatureMap()
    if not mask.any():
        for name in SHAPE_NAMES:
            feature_map.add(f"{prefix}{name}", 0.0)
        feature_map.flags.append(f"{prefix}: 掩膜为空，形状特征置0")
        return feature_map

    spacing = tuple(float(s) for s in spacing)
    voxel_volume = float(mask.sum() * np.prod(spacing))
    estimate = surface_estimate(mask, spacing)
    major, minor, least = estimate.principal_axis_lengths

    # 直径按表面体素中心之间的距离计算
    surface = mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3, 3)), border_value=0)
    coords = np.argwhere(surface)
    points = coords * np.asarray(spacing)
    diameters = {}
    for plane, axis in DIAMETER_PLANES.items():
        best = 0.0
        for value in np.unique(coords[:, axis]):
            in_plane = points[coords[:, axis] == value]
            best = max(best, _max_distance(np.delete(in_plane, axis, axis=1)))
        diameters[plane] = best

    values = {
        "VoxelVolume": voxel_volume,
        "MeshVolume": estimate.volume_mm3,
        "SurfaceArea": estimate.surface_area_mm2,
        "SurfaceVolumeRatio": estimate.surface_area_mm2 / estimate.volume_mm3 if estimate.volume_mm3 > 0 else 0.0,
        "Sphericity": sphericity(estimate.volume_mm3, estimate.surface_area_mm2),
        "Maximum3DDiameter": _max_distance(points),
        "Maximum2DDiameterSlice": diameters["Slice"],
        "Maximum2DDiameterColumn": diameters["Column"],
        "Maximum2DDiameterRow": diameters["Row"],
        "MajorAxisLength": major,
        "MinorAxisLength": minor,
        "LeastAxisLength": least,
        "Elongation": minor / major if major > 0 else 0.0,
        "Flatness": least / major if major > 0 else 0.0,
        "MeshVoxelVolumeRatio": estimate.volume_mm3 / voxel_volume,
    }
    for name in SHAPE_NAMES:
        feature_map.add(f"{prefix}{name}", values[name])
    return feature_map


def rim_widths(et_mask: np.ndarray, ncr_mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """每个ET体素的环宽：到外边界与到内（NCR侧）边界的距离之和

    距离为体素中心间的欧氏距离，每一侧减去半个平均体素间距；NCR为空时内侧项为0。
    """
    et_mask = np.asarray(et_mask, dtype=bool)
    ncr_mask = np.asarray(ncr_mask, dtype=bool)
    half = float(np.mean(spacing)) / 2.0
    padded_core = np.pad(et_mask | ncr_mask, 1)
    outer = ndimage.distance_transform_edt(padded_core, sampling=spacing)[1:-1, 1:-1, 1:-1]
    widths = outer[et_mask] - half
    if ncr_mask.any():
        inner = ndimage.distance_transform_edt(~ncr_mask, sampling=spacing)
        widths = widths + inner[et_mask] - half
    return widths


def rim_width_features(
    et_mask: np.ndarray,
    ncr_mask: np.ndarray,
    spacing: Sequence[float],
    prefix: str = "ET_rim_"
) -> FeatureMap:
    """8个环宽统计量"""
    feature_map = FeatureMap()
    et_mask = np.asarray(et_mask, dtype=bool)
    if not et_mask.any():
        for name in RIM_NAMES:
            feature_map.add(f"{prefix}{name}", 0.0)
        feature_map.flags.append("ET 为空，环宽特征置0")
        return feature_map
    if not np.any(ncr_mask):
        feature_map.flags.append("NCR 为空，内侧距离按0计（实性肿瘤）")

    widths = rim_widths(et_mask, ncr_mask, spacing)
    q1, median, q3 = np.percentile(widths, [25, 50, 75])
    mean = float(widths.mean())
    if q1 > 0:
        ratio = float(q3 / q1)
    else:
        ratio = 0.0
        feature_map.flags.append("环宽Q1为0，Q3/Q1 置0")
    values = {
        "Mean": mean,
        "Q1": float(q1),
        "Median": float(median),
        "Q3": float(q3),
        "Max": float(widths.max()),
        "IQR": float(q3 - q1),
        "Q3Q1Ratio": ratio,
        "GeometricHeterogeneity": float(widths.std() / mean) if mean > 0 else 0.0,
    }
    for name in RIM_NAMES:
        feature_map.add(f"{prefix}{name}", values[name])
    return feature_map


def volume_ratio_features(
    et_mask: np.ndarray,
    ed_mask: np.ndarray,
    ncr_mask: np.ndarray,
    prefix: str = "WT_ratio_"
) -> FeatureMap:
    """7个子区域体积比；分母为0时置0并记录"""
    counts = {
        "ET": int(np.count_nonzero(et_mask)),
        "ED": int(np.count_nonzero(ed_mask)),
        "NCR": int(np.count_nonzero(ncr_mask)),
    }
    feature_map = FeatureMap()
    for name, numerator, denominator in RATIOS:
        top = sum(counts[c] for c in numerator)
        bottom = sum(counts[c] for c in denominator)
        if bottom > 0:
            feature_map.add(f"{prefix}{name}", top / bottom)
        else:
            feature_map.add(f"{prefix}{name}", 0.0)
            feature_map.flags.append(f"{prefix}{name}: 分母为0，置0")
    return feature_map


def shape_feature_block(mask: SegmentationMask) -> FeatureMap:
    """3×15个基本形状特征与15个ET环宽/体积比特征"""
    feature_map = FeatureMap()
    for comp in COMPARTMENTS:
        feature_map.update(basic_shape_features(mask.compartment(comp), mask.spacing, prefix=f"{comp}_shape_"))
    et = mask.compartment("ET")
    ncr = mask.compartment("NCR")
    feature_map.update(rim_width_features(et, ncr, mask.spacing))
    feature_map.update(volume_ratio_features(et, mask.compartment("ED"), ncr))
    return feature_map

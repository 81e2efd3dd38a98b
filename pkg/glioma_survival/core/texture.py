"""一阶统计与五类三维纹理矩阵特征"""

import itertools
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from ..config.config import PreprocessingConfig
from ..exceptions.custom_exceptions import FeatureExtractionError
from ..models.data_models import (
    Volume,
    SegmentationMask,
    DiscretizedVolume,
    FeatureMap,
    COMPARTMENTS,
    SEQUENCES,
)
from . import preproc

# 距离为1的13个唯一方向（第一个非零分量为正）
DIRECTIONS: List[Tuple[int, int, int]] = [
    d for d in itertools.product((-1, 0, 1), repeat=3)
    if any(d) and d[np.flatnonzero(d)[0]] > 0
]

# 26邻域偏移
NEIGHBOR_OFFSETS: List[Tuple[int, int, int]] = [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)]

FIRSTORDER_NAMES = [
    "Energy", "TotalEnergy", "Entropy", "Minimum", "10Percentile", "90Percentile", "Maximum",
    "Mean", "Median", "InterquartileRange", "Range", "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation", "RootMeanSquared", "StandardDeviation", "Skewness",
    "Kurtosis", "Variance", "Uniformity",
]

GLCM_NAMES = [
    "Autocorrelation", "JointAverage", "ClusterProminence", "ClusterShade", "ClusterTendency",
    "Contrast", "Correlation", "DifferenceAverage", "DifferenceEntropy", "DifferenceVariance",
    "JointEnergy", "JointEntropy", "Imc1", "Imc2", "Idm", "MCC", "Idmn", "Id", "Idn",
    "InverseVariance", "MaximumProbability", "SumAverage", "SumEntropy", "SumSquares",
]

GLRLM_NAMES = [
    "ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "RunLengthNonUniformity",
    "RunLengthNonUniformityNormalized", "RunPercentage", "GrayLevelVariance", "RunVariance",
    "RunEntropy", "LowGrayLevelRunEmphasis", "HighGrayLevelRunEmphasis",
    "ShortRunLowGrayLevelEmphasis", "ShortRunHighGrayLevelEmphasis",
    "LongRunLowGrayLevelEmphasis", "LongRunHighGrayLevelEmphasis",
]

GLSZM_NAMES = [
    "SmallAreaEmphasis", "LargeAreaEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "SizeZoneNonUniformity",
    "SizeZoneNonUniformityNormalized", "ZonePercentage", "GrayLevelVariance", "ZoneVariance",
    "ZoneEntropy", "LowGrayLevelZoneEmphasis", "HighGrayLevelZoneEmphasis",
    "SmallAreaLowGrayLevelEmphasis", "SmallAreaHighGrayLevelEmphasis",
    "LargeAreaLowGrayLevelEmphasis", "LargeAreaHighGrayLevelEmphasis",
]

NGTDM_NAMES = ["Coarseness", "Contrast", "Busyness", "Complexity", "Strength"]

GLDM_NAMES = [
    "SmallDependenceEmphasis", "LargeDependenceEmphasis", "GrayLevelNonUniformity",
    "DependenceNonUniformity", "DependenceNonUniformityNormalized", "GrayLevelVariance",
    "DependenceVariance", "DependenceEntropy", "LowGrayLevelEmphasis", "HighGrayLevelEmphasis",
    "SmallDependenceLowGrayLevelEmphasis", "SmallDependenceHighGrayLevelEmphasis",
    "LargeDependenceLowGrayLevelEmphasis", "LargeDependenceHighGrayLevelEmphasis",
]

FAMILIES: Dict[str, List[str]] = {
    "firstorder": FIRSTORDER_NAMES,
    "glcm": GLCM_NAMES,
    "glrlm": GLRLM_NAMES,
    "glszm": GLSZM_NAMES,
    "ngtdm": NGTDM_NAMES,
    "gldm": GLDM_NAMES,
}

FEATURES_PER_BLOCK = sum(len(names) for names in FAMILIES.values())

# 分母为0时的粗糙度
COARSENESS_CAP = 1e6


def intensity_feature_names() -> List[str]:
    """全部强度特征名（固定顺序）"""
    return [
        f"{comp}_{image}_{family}_{name}"
        for comp in COMPARTMENTS
        for image in SEQUENCES
        for family, names in FAMILIES.items()
        for name in names
    ]


def _entropy(p: np.ndarray) -> float:
    """以2为底的熵，0·log0 记为0"""
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _to_map(values: Dict[str, float], names: List[str], prefix: str) -> FeatureMap:
    feature_map = FeatureMap()
    for name in names:
        feature_map.add(f"{prefix}{name}", values[name])
    return feature_map


def _shift_pair(arr: np.ndarray, offset) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (arr[p], arr[p + offset])，只包含两端都在网格内的体素对"""
    src, dst = [], []
    for d, n in zip(offset, arr.shape):
        if d > 0:
            src.append(slice(0, n - d))
            dst.append(slice(d, n))
        elif d < 0:
            src.append(slice(-d, n))
            dst.append(slice(0, n + d))
        else:
            src.append(slice(0, n))
            dst.append(slice(0, n))
    return arr[tuple(src)], arr[tuple(dst)]


def crop_to_mask(disc: DiscretizedVolume) -> DiscretizedVolume:
    """裁剪到掩膜的包围盒"""
    if not disc.mask.any():
        raise FeatureExtractionError("离散化影像的掩膜为空")
    slices = ndimage.find_objects(disc.mask.astype(np.int8))[0]
    return DiscretizedVolume(bins=disc.bins[slices], n_levels=disc.n_levels, spacing=disc.spacing)


# ---------------------------------------------------------------- first order

def first_order_features(
    volume: Volume,
    mask: np.ndarray,
    disc: DiscretizedVolume,
    prefix: str = ""
) -> FeatureMap:
    """19个一阶统计特征（熵与均匀度基于离散灰度）"""
    mask = np.asarray(mask, dtype=bool)
    x = volume.data[mask]
    if x.size == 0:
        raise FeatureExtractionError("一阶特征的掩膜为空")
    _, counts = np.unique(disc.bins[mask], return_counts=True)
    p = counts / counts.sum()

    mean = x.mean()
    centered = x - mean
    variance = float((centered ** 2).mean())
    p10, p25, median, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]
    energy = float((x ** 2).sum())
    if variance > 0:
        skewness = float((centered ** 3).mean() / variance ** 1.5)
        kurtosis = float((centered ** 4).mean() / variance ** 2)
    else:
        skewness = 0.0
        kurtosis = 0.0

    values = {
        "Energy": energy,
        "TotalEnergy": volume.voxel_volume * energy,
        "Entropy": _entropy(p),
        "Minimum": float(x.min()),
        "10Percentile": float(p10),
        "90Percentile": float(p90),
        "Maximum": float(x.max()),
        "Mean": float(mean),
        "Median": float(median),
        "InterquartileRange": float(p75 - p25),
        "Range": float(x.max() - x.min()),
        "MeanAbsoluteDeviation": float(np.abs(centered).mean()),
        "RobustMeanAbsoluteDeviation": float(np.abs(robust - robust.mean()).mean()),
        "RootMeanSquared": float(np.sqrt(energy / x.size)),
        "StandardDeviation": float(np.sqrt(variance)),
        "Skewness": skewness,
        "Kurtosis": kurtosis,
        "Variance": variance,
        "Uniformity": float((p ** 2).sum()),
    }
    return _to_map(values, FIRSTORDER_NAMES, prefix)


# ---------------------------------------------------------------------- GLCM

def glcm_matrices(disc: DiscretizedVolume) -> np.ndarray:
    """每个方向的对称共生计数矩阵，形状 (13, Ng, Ng)"""
    bins = crop_to_mask(disc).bins
    ng = disc.n_levels
    matrices = np.zeros((len(DIRECTIONS), ng, ng), dtype=np.int64)
    for index, offset in enumerate(DIRECTIONS):
        a, b = _shift_pair(bins, offset)
        valid = (a > 0) & (b > 0)
        codes = (a[valid].astype(np.int64) - 1) * ng + (b[valid] - 1)
        counts = np.bincount(codes, minlength=ng * ng).reshape(ng, ng)
        matrices[index] = counts + counts.T
    return matrices


def _glcm_direction(p: np.ndarray) -> Dict[str, float]:
    ng = p.shape[0]
    levels = np.arange(1, ng + 1, dtype=np.float64)
    i = levels[:, None]
    j = levels[None, :]
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    ux = float((levels * px).sum())
    uy = float((levels * py).sum())
    sigx = float(np.sqrt(((levels - ux) ** 2 * px).sum()))
    sigy = float(np.sqrt(((levels - uy) ** 2 * py).sum()))

    k_sum = np.arange(2, 2 * ng + 1, dtype=np.float64)
    p_sum = np.bincount((i + j - 2).astype(np.int64).ravel(), weights=p.ravel(), minlength=2 * ng - 1)
    k_diff = np.arange(ng, dtype=np.float64)
    p_diff = np.bincount(np.abs(i - j).astype(np.int64).ravel(), weights=p.ravel(), minlength=ng)

    cluster = i + j - ux - uy
    difference_average = float((k_diff * p_diff).sum())

    hx = _entropy(px)
    hy = _entropy(py)
    hxy = _entropy(p.ravel())
    pxpy = np.outer(px, py)
    nz = p > 0
    hxy1 = float(-(p[nz] * np.log2(pxpy[nz])).sum())
    hxy2 = _entropy(pxpy.ravel())

    if sigx * sigy > 0:
        correlation = ((p * i * j).sum() - ux * uy) / (sigx * sigy)
    else:
        correlation = 1.0
    imc1 = (hxy - hxy1) / max(hx, hy) if max(hx, hy) > 0 else 0.0
    imc2 = float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - hxy))))) if hxy2 > hxy else 0.0

    # MCC: Q 的第二大特征值的平方根
    occupied = px > 0
    if occupied.sum() < 2:
        mcc = 1.0
    else:
        sub = p[np.ix_(occupied, occupied)]
        q = (sub / px[occupied][:, None]) @ (sub / py[occupied][None, :]).T
        eigen = np.sort(np.real(np.linalg.eigvals(q)))[::-1]
        mcc = float(np.sqrt(np.clip(eigen[1], 0.0, 1.0)))

    nonzero_k = k_diff > 0
    return {
        "Autocorrelation": float((p * i * j).sum()),
        "JointAverage": ux,
        "ClusterProminence": float((cluster ** 4 * p).sum()),
        "ClusterShade": float((cluster ** 3 * p).sum()),
        "ClusterTendency": float((cluster ** 2 * p).sum()),
        "Contrast": float(((i - j) ** 2 * p).sum()),
        "Correlation": float(correlation),
        "DifferenceAverage": difference_average,
        "DifferenceEntropy": _entropy(p_diff),
        "DifferenceVariance": float(((k_diff - difference_average) ** 2 * p_diff).sum()),
        "JointEnergy": float((p ** 2).sum()),
        "JointEntropy": hxy,
        "Imc1": float(imc1),
        "Imc2": imc2,
        "Idm": float((p / (1.0 + (i - j) ** 2)).sum()),
        "MCC": mcc,
        "Idmn": float((p / (1.0 + (i - j) ** 2 / ng ** 2)).sum()),
        "Id": float((p / (1.0 + np.abs(i - j))).sum()),
        "Idn": float((p / (1.0 + np.abs(i - j) / ng)).sum()),
        "InverseVariance": float((p_diff[nonzero_k] / k_diff[nonzero_k] ** 2).sum()),
        "MaximumProbability": float(p.max()),
        "SumAverage": float((k_sum * p_sum).sum()),
        "SumEntropy": _entropy(p_sum),
        "SumSquares": float(((i - ux) ** 2 * p).sum()),
    }


def glcm_features(disc: DiscretizedVolume, prefix: str = "") -> FeatureMap:
    """24个GLCM特征，对有体素对的方向取平均"""
    per_direction = [
        _glcm_direction(counts / counts.sum())
        for counts in glcm_matrices(disc) if counts.sum() > 0
    ]
    if not per_direction:
        feature_map = _to_map(dict.fromkeys(GLCM_NAMES, 0.0), GLCM_NAMES, prefix)
        feature_map.flags.append(f"{prefix}glcm: 掩膜内没有相邻体素对")
        return feature_map
    values = {name: float(np.mean([d[name] for d in per_direction])) for name in GLCM_NAMES}
    return _to_map(values, GLCM_NAMES, prefix)


# -------------------------------------------- run / zone / dependence families

def _emphasis(matrix: np.ndarray, n_voxels: int) -> Dict[str, float]:
    """灰度×尺寸类矩阵（GLRLM/GLSZM/GLDM）的公共统计量"""
    total = matrix.sum()
    ng, ns = matrix.shape
    i = np.arange(1, ng + 1, dtype=np.float64)[:, None]
    j = np.arange(1, ns + 1, dtype=np.float64)[None, :]
    p = matrix / total
    by_gray = matrix.sum(axis=1)
    by_size = matrix.sum(axis=0)
    mu_i = (p * i).sum()
    mu_j = (p * j).sum()
    return {
        "SE": float((matrix / j ** 2).sum() / total),
        "LE": float((matrix * j ** 2).sum() / total),
        "GLN": float((by_gray ** 2).sum() / total),
        "GLNN": float((by_gray ** 2).sum() / total ** 2),
        "SN": float((by_size ** 2).sum() / total),
        "SNN": float((by_size ** 2).sum() / total ** 2),
        "P": float(total / n_voxels),
        "GLV": float((p * (i - mu_i) ** 2).sum()),
        "SV": float((p * (j - mu_j) ** 2).sum()),
        "E": _entropy(p.ravel()),
        "LGLE": float((matrix / i ** 2).sum() / total),
        "HGLE": float((matrix * i ** 2).sum() / total),
        "SLGLE": float((matrix / (i ** 2 * j ** 2)).sum() / total),
        "SHGLE": float((matrix * i ** 2 / j ** 2).sum() / total),
        "LLGLE": float((matrix * j ** 2 / i ** 2).sum() / total),
        "LHGLE": float((matrix * i ** 2 * j ** 2).sum() / total),
    }


_EMPHASIS_KEYS = ["SE", "LE", "GLN", "GLNN", "SN", "SNN", "P", "GLV", "SV", "E",
                  "LGLE", "HGLE", "SLGLE", "SHGLE", "LLGLE", "LHGLE"]


def _runs(bins: np.ndarray, offset) -> Tuple[np.ndarray, np.ndarray]:
    """沿某方向的所有游程 (灰度, 长度)"""
    coords = np.argwhere(bins > 0)
    gray = bins[tuple(coords.T)]
    direction = np.asarray(offset)
    axis = int(np.flatnonzero(direction)[0])
    t = coords[:, axis]
    # 每条直线由其与 axis=0 平面的交点标识
    origin = coords - t[:, None] * direction[None, :]
    order = np.lexsort((t, origin[:, 2], origin[:, 1], origin[:, 0]))
    origin, t, gray = origin[order], t[order], gray[order]
    continues = (
        np.all(origin[1:] == origin[:-1], axis=1)
        & (t[1:] == t[:-1] + 1)
        & (gray[1:] == gray[:-1])
    )
    starts = np.concatenate([[True], ~continues])
    lengths = np.bincount(np.cumsum(starts) - 1)
    return gray[starts], lengths


def glrlm_matrices(disc: DiscretizedVolume) -> np.ndarray:
    """每个方向的游程矩阵，形状 (13, Ng, Nr)，Nr 为包围盒最长边"""
    bins = crop_to_mask(disc).bins
    ng = disc.n_levels
    nr = max(bins.shape)
    matrices = np.zeros((len(DIRECTIONS), ng, nr), dtype=np.int64)
    for index, offset in enumerate(DIRECTIONS):
        gray, lengths = _runs(bins, offset)
        codes = (gray.astype(np.int64) - 1) * nr + (lengths - 1)
        matrices[index] = np.bincount(codes, minlength=ng * nr).reshape(ng, nr)
    return matrices


def glrlm_features(disc: DiscretizedVolume, prefix: str = "") -> FeatureMap:
    """16个GLRLM特征，13个方向取平均"""
    n_voxels = int(disc.mask.sum())
    per_direction = [_emphasis(m, n_voxels) for m in glrlm_matrices(disc)]
    values = {
        name: float(np.mean([d[key] for d in per_direction]))
        for name, key in zip(GLRLM_NAMES, _EMPHASIS_KEYS)
    }
    return _to_map(values, GLRLM_NAMES, prefix)


def glszm_matrix(disc: DiscretizedVolume) -> np.ndarray:
    """26连通区域尺寸矩阵，形状 (Ng, 最大区域尺寸)"""
    bins = crop_to_mask(disc).bins
    ng = disc.n_levels
    structure = np.ones((3, 3, 3), dtype=bool)
    zones = []
    for level in range(1, ng + 1):
        labeled, n_zones = ndimage.label(bins == level, structure=structure)
        if n_zones:
            sizes = np.bincount(labeled.ravel())[1:]
            zones.append((np.full(n_zones, level), sizes))
    gray = np.concatenate([g for g, _ in zones])
    sizes = np.concatenate([s for _, s in zones])
    ns = int(sizes.max())
    codes = (gray.astype(np.int64) - 1) * ns + (sizes - 1)
    return np.bincount(codes, minlength=ng * ns).reshape(ng, ns)


def glszm_features(disc: DiscretizedVolume, prefix: str = "") -> FeatureMap:
    """16个GLSZM特征"""
    values = _emphasis(glszm_matrix(disc), int(disc.mask.sum()))
    return _to_map({name: values[key] for name, key in zip(GLSZM_NAMES, _EMPHASIS_KEYS)}, GLSZM_NAMES, prefix)


def gldm_matrix(disc: DiscretizedVolume) -> np.ndarray:
    """依赖矩阵（距离1，α=0，依赖数含中心体素），形状 (Ng, 27)"""
    bins = crop_to_mask(disc).bins
    ng = disc.n_levels
    padded = np.pad(bins, 1)
    center = padded[1:-1, 1:-1, 1:-1]
    dependence = (center > 0).astype(np.int64)
    shape = center.shape
    for dz, dy, dx in NEIGHBOR_OFFSETS:
        neighbor = padded[1 + dz:1 + dz + shape[0], 1 + dy:1 + dy + shape[1], 1 + dx:1 + dx + shape[2]]
        dependence += (center > 0) & (neighbor == center)
    inside = center > 0
    codes = (center[inside].astype(np.int64) - 1) * 27 + (dependence[inside] - 1)
    return np.bincount(codes, minlength=ng * 27).reshape(ng, 27)


def gldm_features(disc: DiscretizedVolume, prefix: str = "") -> FeatureMap:
    """14个GLDM特征"""
    values = _emphasis(gldm_matrix(disc), int(disc.mask.sum()))
    keys = {
        "SmallDependenceEmphasis": "SE",
        "LargeDependenceEmphasis": "LE",
        "GrayLevelNonUniformity": "GLN",
        "DependenceNonUniformity": "SN",
        "DependenceNonUniformityNormalized": "SNN",
        "GrayLevelVariance": "GLV",
        "DependenceVariance": "SV",
        "DependenceEntropy": "E",
        "LowGrayLevelEmphasis": "LGLE",
        "HighGrayLevelEmphasis": "HGLE",
        "SmallDependenceLowGrayLevelEmphasis": "SLGLE",
        "SmallDependenceHighGrayLevelEmphasis": "SHGLE",
        "LargeDependenceLowGrayLevelEmphasis": "LLGLE",
        "LargeDependenceHighGrayLevelEmphasis": "LHGLE",
    }
    return _to_map({name: values[key] for name, key in keys.items()}, GLDM_NAMES, prefix)


# --------------------------------------------------------------------- NGTDM

def ngtdm_matrix(disc: DiscretizedVolume) -> Tuple[np.ndarray, np.ndarray]:
    """每个灰度的体素数 n_i 与灰度差之和 s_i（无邻居的体素计数但差为0）"""
    bins = crop_to_mask(disc).bins
    ng = disc.n_levels
    inside = bins > 0
    kernel = np.ones((3, 3, 3))
    kernel[1, 1, 1] = 0.0
    neighbor_sum = ndimage.convolve(bins.astype(np.float64), kernel, mode='constant', cval=0.0)
    neighbor_count = ndimage.convolve(inside.astype(np.float64), kernel, mode='constant', cval=0.0)
    gray = bins[inside]
    counts = neighbor_count[inside]
    average = np.divide(neighbor_sum[inside], counts, out=np.zeros_like(counts), where=counts > 0)
    difference = np.where(counts > 0, np.abs(gray - average), 0.0)
    n = np.bincount(gray - 1, minlength=ng).astype(np.int64)
    s = np.bincount(gray - 1, weights=difference, minlength=ng)
    return n, s


def ngtdm_features(disc: DiscretizedVolume, prefix: str = "") -> FeatureMap:
    """5个NGTDM特征"""
    n, s = ngtdm_matrix(disc)
    n_voxels = n.sum()
    occupied = n > 0
    levels = np.arange(1, len(n) + 1, dtype=np.float64)[occupied]
    p = n[occupied] / n_voxels
    s = s[occupied]
    n_gray = len(p)

    ps = (p * s).sum()
    coarseness = 1.0 / ps if ps > 0 else COARSENESS_CAP

    di = levels[:, None] - levels[None, :]
    pp = p[:, None] * p[None, :]
    if n_gray > 1:
        contrast = (pp * di ** 2).sum() / (n_gray * (n_gray - 1)) * s.sum() / n_voxels
    else:
        contrast = 0.0
    busy_denominator = np.abs((levels * p)[:, None] - (levels * p)[None, :]).sum()
    busyness = ps / busy_denominator if busy_denominator > 0 else 0.0
    ps_i = (p * s)[:, None] + (p * s)[None, :]
    complexity = (np.abs(di) * ps_i / (p[:, None] + p[None, :])).sum() / n_voxels
    strength = ((p[:, None] + p[None, :]) * di ** 2).sum() / s.sum() if s.sum() > 0 else 0.0

    values = {
        "Coarseness": float(coarseness),
        "Contrast": float(contrast),
        "Busyness": float(busyness),
        "Complexity": float(complexity),
        "Strength": float(strength),
    }
    return _to_map(values, NGTDM_NAMES, prefix)


# ---------------------------------------------------------- per-subject block

def texture_block(volume: Volume, mask: np.ndarray, bin_width: float, prefix: str = "") -> FeatureMap:
    """一个 (影像, 子区域) 对的94个特征"""
    disc = preproc.discretize(volume, mask, bin_width)
    feature_map = first_order_features(volume, mask, disc, prefix=f"{prefix}firstorder_")
    feature_map.update(glcm_features(disc, prefix=f"{prefix}glcm_"))
    feature_map.update(glrlm_features(disc, prefix=f"{prefix}glrlm_"))
    feature_map.update(glszm_features(disc, prefix=f"{prefix}glszm_"))
    feature_map.update(ngtdm_features(disc, prefix=f"{prefix}ngtdm_"))
    feature_map.update(gldm_features(disc, prefix=f"{prefix}gldm_"))
    return feature_map


def _zero_block(prefix: str) -> FeatureMap:
    feature_map = FeatureMap()
    for family, names in FAMILIES.items():
        for name in names:
            feature_map.add(f"{prefix}{family}_{name}", 0.0)
    return feature_map


def intensity_feature_block(
    volumes: Dict[str, Volume],
    mask: SegmentationMask,
    settings: Optional[PreprocessingConfig] = None
) -> FeatureMap:
    """4个MR影像 × 3个子区域的全部强度特征

    Args:
        volumes: 序列名（T1/T1c/T2/FLAIR）→ 原始影像
        mask: 与影像同网格的分割
        settings: 预处理设置，缺省使用默认值

    Returns:
        固定顺序的强度特征；体素数不足的子区域置0并记录
    """
    settings = settings or PreprocessingConfig()
    missing = [s for s in SEQUENCES if s not in volumes]
    if missing:
        raise FeatureExtractionError(f"缺少MR序列: {missing}")

    prepared = {}
    for sequence in SEQUENCES:
        volume = volumes[sequence]
        if not mask.matches(volume):
            raise FeatureExtractionError(f"{sequence} 影像与分割不在同一网格")
        if settings.normalization_region == "tumor":
            region = mask.tumor()
        else:
            region = preproc.brain_region(volume)
        prepared[sequence] = preproc.preprocess_image(
            volume, region, settings.log_sigma, settings.intensity_scale
        )

    feature_map = FeatureMap()
    for comp in COMPARTMENTS:
        comp_mask = mask.compartment(comp)
        valid = preproc.validate_mask(comp_mask, settings.min_mask_size)
        if not valid:
            feature_map.flags.append(
                f"{comp}: 子区域体素数 {int(comp_mask.sum())} 小于 {settings.min_mask_size}，强度特征置0"
            )
        for sequence in SEQUENCES:
            prefix = f"{comp}_{sequence}_"
            if valid:
                feature_map.update(texture_block(prepared[sequence], comp_mask, settings.bin_width, prefix))
            else:
                feature_map.update(_zero_block(prefix))
    return feature_map

"""影像、分割、队列数据与特征表的读写"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import nibabel as nib
import numpy as np
import pandas as pd

from ..exceptions.custom_exceptions import (
    VolumeIOError,
    CohortError,
    FeatureTableError,
    FileOperationError,
)
from ..models.data_models import (
    Volume,
    SegmentationMask,
    SubjectRecord,
    ResectionStatus,
    FeatureTable,
    FeatureMap,
    DEFAULT_LABEL_SEMANTICS,
)
from ..utils.file import FileManager
from ..utils.logging import logger

# (kind, itemsize): uint8 / int16 / int32 / float32 / float64
SUPPORTED_DTYPES = {('u', 1), ('i', 2), ('i', 4), ('f', 4), ('f', 8)}

SUBJECT_COLUMN = "subject_id"

# 规范列名 → 可接受的别名（不区分大小写）
COHORT_COLUMNS = {
    'id': ('id', 'brats18id', 'brats_id', 'subject_id'),
    'age': ('age',),
    'survival_days': ('survival_days', 'survival'),
    'resection_status': ('resection_status', 'resectionstatus', 'extent_of_resection'),
}

_MISSING_TOKENS = {'', 'na', 'nan', 'none'}


def _load_nifti(path: Path):
    """加载NIfTI-1文件并检查头信息"""
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"文件不存在: {path}")
    try:
        image = nib.load(str(path), mmap=False)
    except Exception as e:
        raise VolumeIOError(f"无法解析NIfTI文件 {path}: {str(e)}")
    header = image.header
    if not isinstance(header, nib.Nifti1Header) or isinstance(header, nib.Nifti2Header):
        raise VolumeIOError(f"不是NIfTI-1文件: {path}")
    magic = bytes(np.asarray(header['magic']).item())
    if magic.rstrip(b'\x00') != b'n+1':
        raise VolumeIOError(f"NIfTI魔数错误 {path}: {magic!r}")
    dtype = header.get_data_dtype()
    if (dtype.kind, dtype.itemsize) not in SUPPORTED_DTYPES:
        raise VolumeIOError(f"不支持的数据类型 {path}: {dtype}")
    if len(image.shape) != 3:
        raise VolumeIOError(f"影像维度必须为3 {path}: {image.shape}")
    return image


def _decode(image, path: Path) -> np.ndarray:
    try:
        # get_fdata 按 value = stored × slope + intercept 缩放
        return image.get_fdata(dtype=np.float64)
    except Exception as e:
        raise VolumeIOError(f"读取影像数据失败（文件可能被截断） {path}: {str(e)}")


def read_volume(path: Path) -> Volume:
    """读取三维影像"""
    image = _load_nifti(path)
    data = _decode(image, path)
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    return Volume(data=data, spacing=spacing, affine=image.affine)


def read_mask(path: Path, label_semantics: Optional[Dict[int, str]] = None) -> SegmentationMask:
    """读取肿瘤分割"""
    semantics = dict(DEFAULT_LABEL_SEMANTICS if label_semantics is None else label_semantics)
    image = _load_nifti(path)
    data = _decode(image, path)
    if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
        raise VolumeIOError(f"分割文件中存在非整数值: {path}")
    if data.size and data.min() < 0:
        raise VolumeIOError(f"分割文件中存在负标签: {path}")
    labels = data.astype(np.int64)
    unknown = sorted(set(np.unique(labels).tolist()) - {0} - set(semantics))
    if unknown:
        raise VolumeIOError(f"分割文件中存在未定义的标签 {path}: {unknown}")
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    return SegmentationMask(labels=labels, spacing=spacing, affine=image.affine, label_semantics=semantics)


def write_volume(volume: Volume, path: Path, dtype=np.float32) -> None:
    """写出NIfTI-1影像（.nii 或 .nii.gz）"""
    try:
        FileManager.ensure_dir(Path(path).parent)
        image = nib.Nifti1Image(volume.data.astype(dtype), volume.affine)
        image.header.set_zooms(volume.spacing)
        image.header.set_xyzt_units('mm')
        nib.save(image, str(path))
    except FileOperationError:
        raise
    except Exception as e:
        raise VolumeIOError(f"写入影像失败 {path}: {str(e)}")


def write_mask(mask: SegmentationMask, path: Path) -> None:
    """写出分割（int16）"""
    try:
        FileManager.ensure_dir(Path(path).parent)
        image = nib.Nifti1Image(mask.labels.astype(np.int16), mask.affine)
        image.header.set_zooms(mask.spacing)
        image.header.set_xyzt_units('mm')
        nib.save(image, str(path))
    except FileOperationError:
        raise
    except Exception as e:
        raise VolumeIOError(f"写入分割失败 {path}: {str(e)}")


def _canonical_columns(columns: Sequence[str], path: Path) -> Dict[str, str]:
    lookup = {c.strip().lower(): c for c in columns}
    mapping = {}
    for canonical, aliases in COHORT_COLUMNS.items():
        for alias in aliases:
            if alias in lookup:
                mapping[canonical] = lookup[alias]
                break
    missing = [c for c in ('id', 'age') if c not in mapping]
    if missing:
        raise CohortError(f"队列文件缺少必需列 {path}: {missing}")
    return mapping


def _parse_resection(value: str, subject_id: str) -> ResectionStatus:
    token = value.strip().upper()
    if token.lower() in _MISSING_TOKENS:
        return ResectionStatus.NA
    try:
        return ResectionStatus(token)
    except ValueError:
        raise CohortError(f"受试者 {subject_id} 的切除状态无法识别: {value}")


def read_cohort_csv(path: Path) -> List[SubjectRecord]:
    """读取队列临床数据"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except Exception as e:
        raise CohortError(f"读取队列文件失败 {path}: {str(e)}")
    columns = _canonical_columns(list(frame.columns), path)

    records = []
    seen = set()
    for _, row in frame.iterrows():
        subject_id = row[columns['id']].strip()
        if not subject_id:
            raise CohortError(f"队列文件中存在空的受试者ID: {path}")
        if subject_id in seen:
            raise CohortError(f"队列文件中受试者ID重复: {subject_id}")
        seen.add(subject_id)

        try:
            age = float(row[columns['age']])
        except ValueError:
            raise CohortError(f"受试者 {subject_id} 的年龄无法解析: {row[columns['age']]}")
        if not np.isfinite(age) or age <= 0:
            raise CohortError(f"受试者 {subject_id} 的年龄必须为正: {age}")

        survival = None
        if 'survival_days' in columns:
            raw = row[columns['survival_days']].strip()
            if raw.lower() not in _MISSING_TOKENS:
                try:
                    survival = float(raw)
                except ValueError:
                    raise CohortError(f"受试者 {subject_id} 的生存期无法解析: {raw}")
                if not np.isfinite(survival) or survival < 0:
                    raise CohortError(f"受试者 {subject_id} 的生存期必须为非负数: {raw}")

        status = ResectionStatus.NA
        if 'resection_status' in columns:
            status = _parse_resection(row[columns['resection_status']], subject_id)

        records.append(SubjectRecord(
            id=subject_id,
            age=age,
            resection_status=status,
            survival_days=survival,
        ))

    logger.info(f"读取队列 {path.name}: {len(records)} 个受试者")
    return records


def encode_clinical(records: Sequence[SubjectRecord]) -> FeatureTable:
    """临床特征列 Age 与 ResectionStatus（0=NA, 1=GTR, 2=STR）"""
    values = np.array([[r.age, r.resection_status.code] for r in records], dtype=np.float64)
    return FeatureTable(
        subject_ids=[r.id for r in records],
        feature_names=["Age", "ResectionStatus"],
        values=values.reshape(len(records), 2),
        provenance={"Age": "clinical", "ResectionStatus": "clinical"},
    )


def table_from_feature_maps(subject_ids: Sequence[str], maps: Sequence[FeatureMap]) -> FeatureTable:
    """由逐受试者特征映射组装特征表，非有限值置0并记录"""
    if not maps:
        return FeatureTable(subject_ids=[], feature_names=[], values=np.zeros((0, 0)))
    names = maps[0].names()
    rows = []
    for subject_id, feature_map in zip(subject_ids, maps):
        if feature_map.names() != names:
            raise FeatureTableError(f"受试者 {subject_id} 的特征名或顺序与其他受试者不一致")
        row = np.array([feature_map.entries[n] for n in names], dtype=np.float64)
        bad = ~np.isfinite(row)
        if bad.any():
            logger.warning(
                f"受试者 {subject_id} 有 {int(bad.sum())} 个非有限特征值被置为0: "
                f"{[names[i] for i in np.flatnonzero(bad)[:5]]}"
            )
            row[bad] = 0.0
        rows.append(row)
    return FeatureTable(subject_ids=list(subject_ids), feature_names=names, values=np.vstack(rows))


def merge_feature_tables(a: FeatureTable, b: FeatureTable) -> FeatureTable:
    """按列拼接两个特征表，保持 a 的受试者顺序"""
    if b.n_features == 0:
        return a
    if set(a.subject_ids) != set(b.subject_ids):
        only_a = sorted(set(a.subject_ids) - set(b.subject_ids))
        only_b = sorted(set(b.subject_ids) - set(a.subject_ids))
        raise FeatureTableError(f"两个特征表的受试者不一致: 仅在a中 {only_a[:5]}, 仅在b中 {only_b[:5]}")
    duplicates = sorted(set(a.feature_names) & set(b.feature_names))
    if duplicates:
        raise FeatureTableError(f"两个特征表中存在重复的特征名: {duplicates[:5]}")
    b_aligned = b.select_subjects(a.subject_ids)
    return FeatureTable(
        subject_ids=a.subject_ids,
        feature_names=a.feature_names + b_aligned.feature_names,
        values=np.hstack([a.values, b_aligned.values]),
        provenance={**a.provenance, **b_aligned.provenance},
    )


def write_feature_table(table: FeatureTable, path: Path, fingerprint: Optional[str] = None) -> None:
    """写出特征表CSV（首列为受试者ID，17位有效数字）"""
    frame = pd.DataFrame(table.values, columns=table.feature_names)
    frame.insert(0, SUBJECT_COLUMN, table.subject_ids)
    FileManager.write_csv(frame, path, fingerprint=fingerprint)


def read_feature_table(path: Path) -> FeatureTable:
    """读取特征表CSV"""
    try:
        raw = FileManager.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except FileOperationError as e:
        raise FeatureTableError(str(e))
    if raw.shape[0] == 0:
        raise FeatureTableError(f"特征表缺少表头: {path}")
    header = [str(h) for h in raw.iloc[0].tolist()]
    if header[0] != SUBJECT_COLUMN:
        raise FeatureTableError(f"特征表首列必须为 {SUBJECT_COLUMN}: {path}")
    feature_names = header[1:]
    body = raw.iloc[1:]
    try:
        values = body.iloc[:, 1:].to_numpy(dtype=str).astype(np.float64)
    except ValueError as e:
        raise FeatureTableError(f"特征表中存在非数值 {path}: {str(e)}")
    return FeatureTable(
        subject_ids=body.iloc[:, 0].tolist(),
        feature_names=feature_names,
        values=values.reshape(len(body), len(feature_names)),
    )

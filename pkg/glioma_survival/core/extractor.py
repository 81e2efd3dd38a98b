"""逐受试者特征提取模块"""

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..config.config import PipelineConfig
from ..exceptions.custom_exceptions import GliomaSurvivalError, FeatureExtractionError, FileOperationError
from ..models.data_models import (
    Volume,
    SegmentationMask,
    SubjectRecord,
    FeatureMap,
    FeatureTable,
    AffineTransform,
    SubjectFailure,
    ExtractionStats,
    SEQUENCES,
)
from ..utils.file import FileManager
from ..utils.logging import logger
from . import atlas as atlas_module
from .shape import shape_feature_block
from .texture import intensity_feature_block
from .volume_io import (
    read_volume,
    read_mask,
    read_feature_table,
    table_from_feature_maps,
    merge_feature_tables,
)


class SubjectExtractionError(FeatureExtractionError):
    """携带受试者失败记录的提取错误"""

    def __init__(self, subject_id: str, stage: str, message: str):
        super().__init__(f"{subject_id} ({stage}): {message}")
        self.failure = SubjectFailure(subject_id=subject_id, stage=stage, message=message)


class FeatureExtractor:
    """特征提取器"""

    def __init__(self, settings: PipelineConfig):
        """初始化特征提取器，图谱与模板只加载一次"""
        self.settings = settings
        self.atlas = None
        self.template = None
        a = settings.atlas
        if a.enabled:
            self.atlas = atlas_module.load_atlas(Path(a.labels_path), Path(a.regions_csv))
            if not a.affine_pattern:
                self.template = atlas_module.load_template(Path(a.template_path))

    def image_path(self, subject_id: str, sequence: str) -> Path:
        d = self.settings.data
        return FileManager.subject_path(d.image_pattern, d.root, subject_id, d.sequences[sequence])

    def mask_path(self, subject_id: str) -> Path:
        d = self.settings.data
        return FileManager.subject_path(d.mask_pattern, d.root, subject_id)

    def load_subject(self, subject_id: str) -> Tuple[Dict[str, Volume], SegmentationMask]:
        """读取4个序列影像与分割"""
        volumes = {sequence: read_volume(self.image_path(subject_id, sequence)) for sequence in SEQUENCES}
        mask = read_mask(self.mask_path(subject_id), self.settings.data.label_semantics)
        for sequence, volume in volumes.items():
            if not mask.matches(volume):
                raise FeatureExtractionError(f"{sequence} 影像与分割不在同一网格 ({volume.dims} vs {mask.dims})")
        return volumes, mask

    def atlas_transform(self, subject_id: str, volumes: Dict[str, Volume]) -> Tuple[AffineTransform, List[str]]:
        """外部仿射矩阵，或对配准影像做仿射配准"""
        a = self.settings.atlas
        if a.affine_pattern:
            path = FileManager.subject_path(a.affine_pattern, self.settings.data.root, subject_id)
            return atlas_module.read_affine_text(path), []
        result = atlas_module.affine_register(
            volumes[a.registration_image],
            self.template,
            levels=a.pyramid_levels,
            max_evaluations=a.max_evaluations,
        )
        flags = [] if result.converged else [f"配准未收敛 (NCC={result.objective:.4f})"]
        return result.transform, flags

    def extract_subject(self, record: SubjectRecord) -> FeatureMap:
        """单个受试者的全部特征（强度、形状、图谱、临床），固定顺序"""
        stage = "read"
        try:
            volumes, mask = self.load_subject(record.id)
            stage = "intensity"
            feature_map = intensity_feature_block(volumes, mask, self.settings.preprocessing)
            stage = "shape"
            feature_map.update(shape_feature_block(mask))
            if self.atlas is not None:
                stage = "atlas"
                transform, flags = self.atlas_transform(record.id, volumes)
                occupancy = atlas_module.atlas_features(
                    volumes[self.settings.atlas.registration_image],
                    mask,
                    self.atlas,
                    transform=transform,
                    settings=self.settings.atlas,
                )
                occupancy.flags.extend(flags)
                feature_map.update(occupancy)
            stage = "clinical"
            feature_map.add("Age", record.age)
            feature_map.add("ResectionStatus", record.resection_status.code)
            return feature_map
        except GliomaSurvivalError as e:
            raise SubjectExtractionError(record.id, stage, str(e))
        except Exception as e:
            raise SubjectExtractionError(record.id, stage, f"{type(e).__name__}: {str(e)}")

    def extract(
        self,
        records: Sequence[SubjectRecord],
        workers: int = 1,
        progress: bool = True
    ) -> Tuple[FeatureTable, List[SubjectFailure], ExtractionStats]:
        """批量提取，单个受试者失败不会中断批处理

        Returns:
            (特征表, 失败记录, 统计)，特征表按队列顺序只包含成功的受试者
        """
        stats = ExtractionStats(
            total_subjects=len(records),
            processed_subjects=0,
            failed_subjects=0,
            start_time=time.time(),
        )
        maps: Dict[str, FeatureMap] = {}
        failures: Dict[str, SubjectFailure] = {}

        def run(record: SubjectRecord) -> FeatureMap:
            started = time.time()
            feature_map = self.extract_subject(record)
            for flag in feature_map.flags:
                logger.warning(f"{record.id}: {flag}")
            logger.info(f"{record.id}: 提取 {len(feature_map)} 个特征，用时 {time.time() - started:.2f} 秒")
            return feature_map

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            futures = {executor.submit(run, record): record for record in records}
            for future in tqdm(as_completed(futures), total=len(futures), desc="提取特征", disable=not progress):
                record = futures[future]
                try:
                    maps[record.id] = future.result()
                    stats.processed_subjects += 1
                except SubjectExtractionError as e:
                    failures[record.id] = e.failure
                    stats.failed_subjects += 1
                    logger.error(f"{record.id}: {e.failure.stage} 阶段失败: {e.failure.message}")

        stats.end_time = time.time()
        if not maps:
            raise FeatureExtractionError(f"全部 {len(records)} 个受试者提取失败")

        ordered = [record.id for record in records if record.id in maps]
        table = table_from_feature_maps(ordered, [maps[sid] for sid in ordered])
        for external in self.settings.data.external_features:
            table = merge_external(table, Path(external))
        logger.info(
            f"提取完成: 成功 {stats.processed_subjects}, 失败 {stats.failed_subjects}, "
            f"{table.n_features} 列, 用时 {stats.end_time - stats.start_time:.1f} 秒"
        )
        return table, [failures[r.id] for r in records if r.id in failures], stats


def merge_external(table: FeatureTable, path: Path) -> FeatureTable:
    """按受试者ID拼接外部特征表（如深度特征）"""
    external = read_feature_table(path)
    missing = sorted(set(table.subject_ids) - set(external.subject_ids))
    if missing:
        raise FeatureExtractionError(f"外部特征表 {path} 缺少受试者: {missing[:5]}")
    external = external.select_subjects(table.subject_ids)
    provenance = {name: "external" for name in external.feature_names}
    external = FeatureTable(external.subject_ids, external.feature_names, external.values, provenance)
    return merge_feature_tables(table, external)


def write_failures(failures: Sequence[SubjectFailure], path: Path, fingerprint: Optional[str] = None) -> None:
    """写出失败记录CSV（subject_id, stage, message）"""
    frame = pd.DataFrame(
        [{'subject_id': f.subject_id, 'stage': f.stage, 'message': f.message} for f in failures],
        columns=['subject_id', 'stage', 'message'],
    )
    try:
        FileManager.write_csv(frame, path, fingerprint=fingerprint)
    except FileOperationError as e:
        raise FeatureExtractionError(str(e))


def subject_ce_mask(extractor: FeatureExtractor, subject_id: str) -> np.ndarray:
    """增强肿瘤掩膜；启用图谱时重采样到图谱网格"""
    if extractor.atlas is None:
        return read_mask(extractor.mask_path(subject_id), extractor.settings.data.label_semantics).compartment("ET")
    volumes, mask = extractor.load_subject(subject_id)
    transform, _ = extractor.atlas_transform(subject_id, volumes)
    warped = atlas_module.warp_mask(mask, transform, extractor.atlas.affine, extractor.atlas.dims)
    return warped.compartment("ET")

"""测试公共夹具"""

import gzip
from pathlib import Path
from typing import Dict

import nibabel as nib
import numpy as np
import pytest
import yaml

from glioma_survival.config.config import PipelineConfig
from glioma_survival.core.synthetic import make_cohort, write_synthetic_cohort
from glioma_survival.models.data_models import PhantomSpec

FIXTURES = Path(__file__).parent / "fixtures"

NIFTI_OFFSET = 352


@pytest.fixture(scope="session")
def phantom_specs() -> Dict[str, PhantomSpec]:
    """fixtures/phantoms.yaml 中的体模描述"""
    with open(FIXTURES / "phantoms.yaml", 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f)
    return {
        name: PhantomSpec(
            kind=item['kind'],
            shape=tuple(item['shape']),
            params=dict(item.get('params', {})),
            noise=float(item.get('noise', 0.0)),
            seed=int(item.get('seed', 0)),
        )
        for name, item in raw.items()
    }


@pytest.fixture
def write_nifti(tmp_path):
    """按字节写出单文件 NIfTI-1（头 + 4字节扩展标志 + 数据），缩放斜率/截距原样写入头"""

    def write(name, data, dtype=np.float32, slope=1.0, inter=0.0, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        header = nib.Nifti1Header()
        header.set_data_dtype(dtype)
        header.set_data_shape(data.shape)
        header.set_zooms(tuple(spacing)[:data.ndim] + (1.0,) * max(0, data.ndim - 3))
        header['scl_slope'] = slope
        header['scl_inter'] = inter
        header.set_data_offset(NIFTI_OFFSET)
        header.set_sform(np.diag(list(spacing) + [1.0]), code=1)
        stored = data.astype(np.dtype(dtype).newbyteorder(header.endianness))
        payload = header.binaryblock + b'\x00' * 4 + stored.tobytes(order='F')
        path = tmp_path / name
        if name.endswith('.gz'):
            with gzip.open(path, 'wb') as f:
                f.write(payload)
        else:
            path.write_bytes(payload)
        return path

    return write


@pytest.fixture(scope="session")
def cohort_table():
    """163 个受试者、40 个特征（4 个信号特征）的合成队列"""
    return make_cohort(n=163, n_features=40, signal_features=4, seed=7)


@pytest.fixture(scope="session")
def written_cohort(tmp_path_factory):
    """写到磁盘的 12 受试者合成 NIfTI 队列及其 data/atlas 配置小节"""
    root = tmp_path_factory.mktemp("cohort")
    sections = write_synthetic_cohort(root, n=12, seed=0)
    return root, sections


@pytest.fixture
def settings_for(tmp_path):
    """由配置小节构造流水线配置，输出到临时目录"""

    def build(sections: Dict = None, **overrides) -> PipelineConfig:
        payload = {name: dict(values) for name, values in (sections or {}).items()}
        for name, values in overrides.items():
            if isinstance(values, dict):
                payload.setdefault(name, {}).update(values)
            else:
                payload[name] = values
        payload.setdefault('output_dir', str(tmp_path / "output"))
        payload.setdefault('workers', 1)
        return PipelineConfig.from_dict(payload)

    return build

"""文件处理工具模块"""

from pathlib import Path
from typing import Optional, Any, Dict

import pandas as pd
import yaml

from ..exceptions.custom_exceptions import FileOperationError

FINGERPRINT_PREFIX = "# fingerprint="


class FileManager:
    """文件管理工具类"""

    @staticmethod
    def ensure_dir(dir_path: Path) -> None:
        """确保目录存在"""
        try:
            Path(dir_path).mkdir(parents=True, exist_ok=True)
        except Exception as e:
            raise FileOperationError(f"创建目录失败: {str(e)}")

    @staticmethod
    def subject_path(pattern: str, root: str, subject_id: str, sequence: str = "") -> Path:
        """由路径模板得到受试者文件路径"""
        try:
            return Path(pattern.format(root=root, id=subject_id, sequence=sequence))
        except (KeyError, IndexError) as e:
            raise FileOperationError(f"路径模板无效 {pattern}: {str(e)}")

    @staticmethod
    def read_fingerprint(file_path: Path) -> Optional[str]:
        """读取文件首行的配置指纹（没有则返回 None）"""
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                first = f.readline().rstrip('\n')
        except Exception as e:
            raise FileOperationError(f"读取文件失败 {file_path}: {str(e)}")
        if first.startswith(FINGERPRINT_PREFIX):
            return first[len(FINGERPRINT_PREFIX):].strip() or None
        return None

    @staticmethod
    def write_csv(
        frame: pd.DataFrame,
        file_path: Path,
        fingerprint: Optional[str] = None,
        float_format: Optional[str] = '%.17g',
        header: bool = True
    ) -> None:
        """写CSV文件，可在首行写入配置指纹

        Args:
            frame: 待写入的数据
            file_path: 输出路径
            fingerprint: 配置指纹
            float_format: 浮点格式（默认17位有效数字，可无损往返）
            header: 是否写表头
        """
        try:
            FileManager.ensure_dir(Path(file_path).parent)
            with open(file_path, 'w', encoding='utf-8', newline='') as f:
                if fingerprint:
                    f.write(f"{FINGERPRINT_PREFIX}{fingerprint}\n")
                frame.to_csv(f, index=False, header=header, float_format=float_format, lineterminator='\n')
        except FileOperationError:
            raise
        except Exception as e:
            raise FileOperationError(f"写入CSV失败 {file_path}: {str(e)}")

    @staticmethod
    def read_csv(file_path: Path, **kwargs) -> pd.DataFrame:
        """读CSV文件，跳过指纹行"""
        skip = 1 if FileManager.read_fingerprint(file_path) is not None else 0
        try:
            return pd.read_csv(file_path, skiprows=skip, **kwargs)
        except Exception as e:
            raise FileOperationError(f"读取CSV失败 {file_path}: {str(e)}")

    @staticmethod
    def write_yaml(payload: Dict[str, Any], file_path: Path) -> None:
        """写YAML文档"""
        try:
            FileManager.ensure_dir(Path(file_path).parent)
            with open(file_path, 'w', encoding='utf-8') as f:
                yaml.safe_dump(payload, f, sort_keys=False, allow_unicode=True)
        except Exception as e:
            raise FileOperationError(f"写入YAML失败 {file_path}: {str(e)}")

    @staticmethod
    def read_yaml(file_path: Path) -> Dict[str, Any]:
        """读YAML文档"""
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return yaml.safe_load(f) or {}
        except Exception as e:
            raise FileOperationError(f"读取YAML失败 {file_path}: {str(e)}")


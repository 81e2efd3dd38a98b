"""投影图像输出工具"""

from pathlib import Path

import numpy as np
from PIL import Image

from ..exceptions.custom_exceptions import FileOperationError


class ImageProcessor:
    """二维计数图 → 灰度图像"""

    @staticmethod
    def to_grayscale(counts: np.ndarray, max_value: float = None) -> Image.Image:
        """把二维计数线性映射到 0..255 的灰度图

        Args:
            counts: 二维计数数组
            max_value: 映射为255的计数，默认取数组最大值

        Returns:
            'L' 模式的PIL图片对象
        """
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 2:
            raise FileOperationError(f"投影图必须是二维的, 实际维度: {counts.ndim}")
        top = float(counts.max()) if max_value is None else float(max_value)
        if top > 0:
            scaled = np.round(np.clip(counts, 0.0, top) / top * 255.0)
        else:
            scaled = np.zeros_like(counts)
        # 行对应图像的 y 方向
        return Image.fromarray(np.ascontiguousarray(scaled.astype(np.uint8).T))

    @staticmethod
    def save_pgm(image: Image.Image, output_path: Path) -> None:
        """保存为二进制 PGM"""
        try:
            output_path = Path(output_path)
            output_path.parent.mkdir(parents=True, exist_ok=True)
            image.save(output_path, format='PPM')
        except Exception as e:
            raise FileOperationError(f"保存图片失败: {str(e)}")

    @staticmethod
    def load_image(image_path: Path) -> np.ndarray:
        """读取灰度图像为数组（与 to_grayscale 的转置对应）"""
        try:
            with Image.open(image_path) as image:
                return np.asarray(image.convert('L')).T.copy()
        except Exception as e:
            raise FileOperationError(f"加载图片失败: {str(e)}")

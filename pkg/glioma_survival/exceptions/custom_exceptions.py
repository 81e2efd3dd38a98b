"""自定义异常类定义"""

class GliomaSurvivalError(Exception):
    """基础异常类"""
    pass

class ConfigError(GliomaSurvivalError):
    """配置相关错误"""
    pass

class VolumeIOError(GliomaSurvivalError):
    """影像读写相关错误"""
    pass

class CohortError(GliomaSurvivalError):
    """队列临床数据相关错误"""
    pass

class FeatureTableError(GliomaSurvivalError):
    """特征表相关错误"""
    pass

class PreprocessingError(GliomaSurvivalError):
    """预处理相关错误"""
    pass

class DegenerateImageError(PreprocessingError):
    """区域内方差为零的退化图像"""
    pass

class FeatureExtractionError(GliomaSurvivalError):
    """特征提取相关错误"""
    pass

class RegistrationError(GliomaSurvivalError):
    """配准与图谱相关错误"""
    pass

class SelectionError(GliomaSurvivalError):
    """特征选择相关错误"""
    pass

class ModelError(GliomaSurvivalError):
    """模型训练与预测相关错误"""
    pass

class EvaluationError(GliomaSurvivalError):
    """评估相关错误"""
    pass

class PhantomError(GliomaSurvivalError):
    """合成数据生成相关错误"""
    pass

class FileOperationError(GliomaSurvivalError):
    """文件操作相关错误"""
    pass

class FingerprintMismatchError(GliomaSurvivalError):
    """不同配置指纹的产物被混用"""
    pass

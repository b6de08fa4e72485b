"""
异常定义

每个异常带 detail（诊断信息）与 exit_code，main 统一捕获后记录日志并以对应退出码退出。
退出码：0 成功，1 用法错误，2 数值失败，3 I/O 失败。
"""


class AdaptParseError(Exception):
    """所有业务异常的基类"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(AdaptParseError):
    """配置、参数或调用方式错误"""

    exit_code = 1


class ShapeError(UsageError):
    """张量维度不匹配，detail 中指出出错的维度"""


class NumericalError(AdaptParseError):
    """非有限损失/梯度、梯度检查失败"""

    exit_code = 2


class PurityError(NumericalError):
    """推理 OpTrace 中出现了不该参与推理的网络"""


class IsolationError(NumericalError):
    """某一步更新改动了不属于它的参数"""


class StorageError(AdaptParseError):
    """文件格式或文件缺失问题"""

    exit_code = 3

from typing import Optional


class TipPoolError(Exception):
    """项目内所有异常的基类"""


class ModelDomainError(TipPoolError, ValueError):
    """参数或定义域错误（例如 L<=0、a_1=0、非法的延迟类别）"""


class ConvergenceError(TipPoolError, RuntimeError):
    """
    求根失败
    :param message: 错误信息
    :param bracket: 最后一次使用的区间 (lo, hi)
    :param residual: 最后的残差（如果有）
    """

    def __init__(self, message: str, bracket: tuple[float, float], residual: Optional[float] = None) -> None:
        super().__init__(f"{message} (区间=[{bracket[0]:.6g}, {bracket[1]:.6g}])")
        self.bracket = bracket
        self.residual = residual


class SimulationInvariantError(TipPoolError, RuntimeError):
    """仿真过程中违反了无环性或守恒性"""


class QuarantineError(TipPoolError, ValueError):
    """隔离流水线的调用顺序或状态转换错误"""


class ConfigError(TipPoolError, ValueError):
    """
    配置错误
    :param key_path: 出错的配置键路径，例如 "fractions[0]"
    """

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"配置项 {key_path}: {message}")
        self.key_path = key_path

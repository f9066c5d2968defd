import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from src.api.Errors import ModelDomainError
from src.tipScripts.DelayModel import p_star

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    """
    自适应父消息数控制参数
    :param base_delay: 基础延迟 h
    :param quarantine: 隔离时间 d_Q
    :param k_max: 父消息数上限
    """
    base_delay: float
    quarantine: float
    k_max: int = 8

    def __post_init__(self) -> None:
        if not self.base_delay > 0:
            raise ModelDomainError(f"基础延迟必须为正, 当前 h={self.base_delay}")
        if self.quarantine < 0:
            raise ModelDomainError(f"隔离时间必须非负, 当前 d_Q={self.quarantine}")
        if int(self.k_max) != self.k_max or self.k_max < 2:
            raise ModelDomainError(f"k_max 必须为 >=2 的整数, 当前 k_max={self.k_max}")

    @property
    def default_window(self) -> float:
        """默认滑动窗口 10·(h + d_Q)"""
        return 10.0 * (self.base_delay + self.quarantine)


@dataclass
class FractionEstimator:
    """
    价值消息占比的滑动平均 p̄
    :param window: 窗口长度（秒）
    :param value_class: 视为价值消息的类别下标
    """
    window: float
    value_class: int = 1
    samples: deque = field(default_factory=deque)
    value_count: int = 0
    last_time: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.window > 0:
            raise ModelDomainError(f"滑动窗口必须为正, 当前 window={self.window}")

    @property
    def current_estimate(self) -> float:
        """窗口为空时为 0"""
        if not self.samples:
            return 0.0
        return self.value_count / len(self.samples)


def observe(estimator: FractionEstimator, class_index: int, t: float) -> FractionEstimator:
    """
    记录一条消息并淘汰窗口外的旧样本
    :param estimator: 估计器（原地更新并返回）
    :param class_index: 消息类别下标
    :param t: 观测时间，必须非递减
    :return: 更新后的估计器
    """
    if estimator.last_time is not None and t < estimator.last_time:
        raise ModelDomainError(f"观测时间必须非递减: {t} < {estimator.last_time}")
    estimator.last_time = t

    is_value = class_index == estimator.value_class
    estimator.samples.append((t, is_value))
    estimator.value_count += is_value

    horizon = t - estimator.window
    samples = estimator.samples
    while samples and samples[0][0] < horizon:
        _, was_value = samples.popleft()
        estimator.value_count -= was_value
    return estimator


def adaptive_k(p_bar: float, config: ControllerConfig) -> int:
    """
    自适应父消息数: 从 k=2 开始，当 p*(k) < p̄ 且 k < k_max 时递增
    :param p_bar: 价值消息占比估计
    :param config: 控制参数
    :return: 父消息数 k，2 <= k <= k_max
    """
    if not 0.0 <= p_bar <= 1.0:
        raise ModelDomainError(f"p̄ 必须在 [0,1] 内, 当前为 {p_bar}")
    k = 2
    while p_star(config.base_delay, config.quarantine, k) < p_bar and k < config.k_max:
        k += 1
    return k

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union, overload

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import bisect

from src.api.Errors import ConvergenceError, ModelDomainError

logger = logging.getLogger(__name__)

# 求根参数
MAX_BRACKET_EXPANSIONS = 60
RESIDUAL_TOLERANCE = 1e-9
FRACTION_SUM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DelayClass:
    """
    一个延迟类别
    :param delay: 从发出到进入 tip 池的延迟 d_i（秒）
    :param parent_count: 每条消息引用的父消息数 k_i
    :param fraction: 该类别在所有消息中的占比 p_i
    """
    delay: float
    parent_count: int
    fraction: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.delay) or self.delay < 0:
            raise ModelDomainError(f"延迟必须为非负有限值, 当前 delay={self.delay}")
        if int(self.parent_count) != self.parent_count or self.parent_count < 2:
            raise ModelDomainError(f"父消息数必须为 >=2 的整数, 当前 parent_count={self.parent_count}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ModelDomainError(f"占比必须在 [0,1] 内, 当前 fraction={self.fraction}")


@dataclass(frozen=True)
class ModelParams:
    """
    n 个延迟类别的模型参数
    :param rate: 总到达率 λ（消息/秒）
    :param classes: 按延迟非递减排列的类别
    """
    rate: float
    classes: tuple[DelayClass, ...]

    def __post_init__(self) -> None:
        # 允许传入 list
        object.__setattr__(self, "classes", tuple(self.classes))
        if not math.isfinite(self.rate) or self.rate <= 0:
            raise ModelDomainError(f"到达率必须为正, 当前 rate={self.rate}")
        if not self.classes:
            raise ModelDomainError("至少需要一个延迟类别")
        total = math.fsum(c.fraction for c in self.classes)
        if abs(total - 1.0) > FRACTION_SUM_TOLERANCE:
            raise ModelDomainError(f"各类别占比之和必须为 1, 当前为 {total!r}")
        delays = [c.delay for c in self.classes]
        if any(b < a for a, b in zip(delays, delays[1:])):
            raise ModelDomainError(f"类别必须按延迟非递减排列, 当前 delays={delays}")

    @property
    def delays(self) -> NDArray[np.float64]:
        return np.array([c.delay for c in self.classes], dtype=np.float64)

    @property
    def max_delay(self) -> float:
        return self.classes[-1].delay

    def without_empty_classes(self) -> "ModelParams":
        """去掉占比为 0 的类别（μ_i = 0，对结果没有贡献）"""
        active = tuple(c for c in self.classes if c.fraction > 0)
        if not active:
            raise ModelDomainError("没有占比大于 0 的类别")
        if len(active) == len(self.classes):
            return self
        return ModelParams(self.rate, active)


@dataclass(frozen=True)
class TwoClassParams:
    """
    数据消息 / 价值消息两类模型
    :param rate: 总到达率 λ
    :param base_delay: 网络与处理延迟 h
    :param quarantine: 价值消息的隔离时间 d_Q
    :param parent_count: 父消息数 k（两类相同）
    :param value_fraction: 价值消息占比 p
    """
    rate: float
    base_delay: float
    quarantine: float
    parent_count: int
    value_fraction: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.rate) or self.rate <= 0:
            raise ModelDomainError(f"到达率必须为正, 当前 rate={self.rate}")
        if not math.isfinite(self.base_delay) or self.base_delay <= 0:
            raise ModelDomainError(f"基础延迟必须为正, 当前 base_delay={self.base_delay}")
        if not math.isfinite(self.quarantine) or self.quarantine < 0:
            raise ModelDomainError(f"隔离时间必须非负, 当前 quarantine={self.quarantine}")
        if int(self.parent_count) != self.parent_count or self.parent_count < 2:
            raise ModelDomainError(f"父消息数必须为 >=2 的整数, 当前 parent_count={self.parent_count}")
        if not 0.0 <= self.value_fraction <= 1.0:
            raise ModelDomainError(f"价值消息占比必须在 [0,1] 内, 当前 value_fraction={self.value_fraction}")

    @property
    def value_delay(self) -> float:
        return self.base_delay + self.quarantine

    def with_fraction(self, value_fraction: float) -> "TwoClassParams":
        return replace(self, value_fraction=value_fraction)

    def with_parents(self, parent_count: int) -> "TwoClassParams":
        return replace(self, parent_count=parent_count)


def two_class_model(params: TwoClassParams) -> ModelParams:
    """
    两类参数映射到一般模型: [(h, k, 1-p), (h+d_Q, k, p)]
    :param params: 两类参数
    :return: 等价的 ModelParams（保留占比为 0 的类别）
    """
    k = params.parent_count
    p = params.value_fraction
    return ModelParams(params.rate, (
        DelayClass(params.base_delay, k, 1.0 - p),
        DelayClass(params.value_delay, k, p),
    ))


def _reference_rates(params: ModelParams, pool_size: float) -> NDArray[np.float64]:
    """每个类别对单个 tip 的引用速率 μ_i = p_i λ k_i / L"""
    if not math.isfinite(pool_size) or pool_size <= 0:
        raise ModelDomainError(f"tip 池大小必须为正, 当前 L={pool_size}")
    weights = np.array([c.fraction * c.parent_count for c in params.classes], dtype=np.float64)
    return weights * params.rate / pool_size


@overload
def removal_time_cdf(x: float, params: ModelParams, pool_size: float) -> float: ...

@overload
def removal_time_cdf(x: NDArray[np.float64], params: ModelParams, pool_size: float) -> NDArray[np.float64]: ...

def removal_time_cdf(x: Union[float, NDArray[np.float64]], params: ModelParams,
                     pool_size: float) -> Union[float, NDArray[np.float64]]:
    """
    tip 被移出 tip 池所需时间 T 的分布函数
    F_T(x) = 1 - Π_i [1 - F_{d_i+S_i}(x)]，其中 S_i ~ Exp(μ_i)
    :param x: 时间点（标量或数组）
    :param params: 模型参数
    :param pool_size: tip 池大小 L
    :return: F_T(x)，与 x 同形状
    """
    mu = _reference_rates(params, pool_size)
    points = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ModelDomainError("x 必须为有限值")

    # 每个类别只在 x > d_i 之后起作用
    excess = np.clip(points[..., np.newaxis] - params.delays, 0.0, None)
    survival = np.exp(-(excess * mu).sum(axis=-1))
    cdf = 1.0 - survival
    if cdf.ndim == 0:
        return float(cdf)
    return cdf


def expected_removal_time(params: ModelParams, pool_size: float) -> float:
    """
    E(T) 的闭式解
    E(T) = d_1 + 1/a_1 - Σ_{i>=2} exp(-d_i a_{i-1} + b_{i-1}) (1/a_{i-1} - 1/a_i)
    :param params: 模型参数
    :param pool_size: tip 池大小 L
    :return: 期望移出时间（秒）
    :raises: ModelDomainError 如果 a_1 = 0
    """
    mu = _reference_rates(params, pool_size)
    delays = params.delays
    if mu[0] <= 0:
        raise ModelDomainError("第一个类别的引用速率为 0 (a_1 = 0), E(T) 无定义")

    a = np.cumsum(mu)
    total = delays[0] + 1.0 / a[0]
    for i in range(1, len(mu)):
        # exp(-d_i a_{i-1} + b_{i-1}) 写成差值形式，避免大数相减
        survival = math.exp(-float(np.dot(mu[:i], delays[i] - delays[:i])))
        total -= survival * (1.0 / a[i - 1] - 1.0 / a[i])
    return float(total)


def pool_size_residual(pool_size: float, params: ModelParams) -> float:
    """Little 定律残差 λ·E(T) - L，模型解是它的根"""
    return params.rate * expected_removal_time(params, pool_size) - pool_size


def _find_root(func: Callable[[float], float], lo: float, hi: float, tolerance: float) -> float:
    """
    在保证变号的区间内二分求根
    lo 处残差必须为正、hi 处为负; 不满足时分别几何缩小 / 扩大区间
    """
    f_lo = func(lo)
    expansions = 0
    while f_lo <= 0:
        if f_lo == 0:
            return lo
        if expansions >= MAX_BRACKET_EXPANSIONS:
            raise ConvergenceError("区间下端无法得到正残差", (lo, hi), f_lo)
        lo *= 0.5
        f_lo = func(lo)
        expansions += 1

    f_hi = func(hi)
    expansions = 0
    while f_hi > 0:
        if expansions >= MAX_BRACKET_EXPANSIONS:
            raise ConvergenceError(f"扩展 {MAX_BRACKET_EXPANSIONS} 次后残差仍未变号", (lo, hi), f_hi)
        lo = hi
        hi *= 2.0
        f_hi = func(hi)
        expansions += 1
    if f_hi == 0:
        return hi

    root = bisect(func, lo, hi, xtol=tolerance * 1e-3, maxiter=500)
    residual = func(root)
    if abs(residual) > tolerance:
        raise ConvergenceError(f"残差 {residual:.3g} 超过容差 {tolerance:.3g}", (lo, hi), residual)
    logger.debug("求根完成 L=%.9g, 残差=%.3g", root, residual)
    return float(root)


def _bracket(rate: float, min_delay: float, max_delay: float,
             min_parents: int, max_parents: int) -> tuple[float, float]:
    lo = 0.5 * rate * min_delay * min_parents / (min_parents - 1)
    hi = 4.0 * rate * max_delay * max_parents / (max_parents - 1)
    if lo <= 0:
        # d_1 = 0 时从一个很小的正数开始
        lo = hi * 1e-12
    return lo, hi


def solve_pool_size(params: ModelParams) -> float:
    """
    解隐式方程 L = λ·E(T; L)
    :param params: 模型参数
    :return: 期望 tip 池大小 L*
    :raises: ConvergenceError 如果区间扩展后仍无法变号或残差检查失败
    """
    active = params.without_empty_classes()
    max_delay = active.max_delay
    if max_delay == 0:
        # 所有延迟为 0 时 tip 池退化为空
        return 0.0
    parents = [c.parent_count for c in active.classes]
    lo, hi = _bracket(active.rate, active.classes[0].delay, max_delay, min(parents), max(parents))
    tolerance = RESIDUAL_TOLERANCE * active.rate * max_delay
    return _find_root(lambda size: pool_size_residual(size, active), lo, hi, tolerance)


def solve_pool_size_two_class(params: TwoClassParams) -> float:
    """
    两类模型的隐式方程
    L = hλ + L/(k(1-p)) · [1 - p·exp(-(1-p)λk d_Q / L)]
    p = 1 时方程中的 1-p 为 0，改用单一类别 (h+d_Q, k, 1)
    :param params: 两类参数
    :return: 期望 tip 池大小
    """
    k = params.parent_count
    p = params.value_fraction
    if p >= 1.0:
        return solve_pool_size(ModelParams(params.rate, (DelayClass(params.value_delay, k, 1.0),)))

    rate = params.rate
    h = params.base_delay
    d_q = params.quarantine
    scale = k * (1.0 - p)

    def residual(size: float) -> float:
        return h * rate + size / scale * (1.0 - p * math.exp(-scale * rate * d_q / size)) - size

    lo, hi = _bracket(rate, h, params.value_delay, k, k)
    tolerance = RESIDUAL_TOLERANCE * rate * params.value_delay
    return _find_root(residual, lo, hi, tolerance)


def l_minus_constant(params: TwoClassParams) -> float:
    """常数近似 L⁻ = kλh/(k-1)"""
    k = params.parent_count
    return k * params.rate * params.base_delay / (k - 1)


def l_minus(params: TwoClassParams) -> float:
    """
    p≈0 附近的线性化
    L ≈ λhk/(k-1) + p·λhk/(k-1)²·[1 - exp(-d_Q(k-1)/h)]
    """
    k = params.parent_count
    h = params.base_delay
    slope = params.rate * h * k / (k - 1) ** 2 * (1.0 - math.exp(-params.quarantine * (k - 1) / h))
    return l_minus_constant(params) + params.value_fraction * slope


def l_plus(params: TwoClassParams) -> float:
    """
    p 较大时的线性化
    L⁺ = kλ(h + p d_Q)/(k-1) - kλ d_Q² (1-p) / (2(d_Q+h))
    """
    k = params.parent_count
    h = params.base_delay
    d_q = params.quarantine
    p = params.value_fraction
    return (k * params.rate * (h + p * d_q) / (k - 1)
            - k * params.rate * d_q ** 2 * (1.0 - p) / (2.0 * (d_q + h)))


def p_star(h: float, d_q: float, k: int) -> float:
    """
    临界价值消息占比 p* = d_Q(k-1) / (2h + (k+1)d_Q)
    :param h: 基础延迟
    :param d_q: 隔离时间
    :param k: 父消息数
    :return: p*，取值 [0,1)
    """
    if not h > 0:
        raise ModelDomainError(f"基础延迟必须为正, 当前 h={h}")
    if d_q < 0:
        raise ModelDomainError(f"隔离时间必须非负, 当前 d_Q={d_q}")
    if k < 2:
        raise ModelDomainError(f"父消息数必须 >=2, 当前 k={k}")
    return d_q * (k - 1) / (2.0 * h + (k + 1) * d_q)


def critical_intersection(params: TwoClassParams) -> float:
    """数值求 L⁻ 与 L⁺ 的交点（用于校验 p_star）"""
    def gap(p: float) -> float:
        trial = params.with_fraction(p)
        return l_plus(trial) - l_minus_constant(trial)

    if params.quarantine == 0:
        return 0.0
    # l_plus 关于 p 单调递增，且 gap(0) < 0 <= gap(1)
    return float(bisect(gap, 0.0, 1.0, xtol=1e-14, maxiter=200))


def removal_class_probabilities(params: ModelParams, pool_size: float) -> list[float]:
    """
    一个 tip 被各类别消息第一次移出的概率
    P_i = μ_i Σ_{m>=i} ∫_{d_m}^{d_{m+1}} S(x) dx，S 为 T 的生存函数
    :param params: 模型参数
    :param pool_size: tip 池大小 L
    :return: 与 params.classes 一一对应的概率列表，和为 1
    """
    mu = _reference_rates(params, pool_size)
    active = [i for i, rate in enumerate(mu) if rate > 0]
    if not active:
        raise ModelDomainError("没有占比大于 0 的类别")
    mu_active = mu[active]
    delays = params.delays[active]
    a = np.cumsum(mu_active)

    # 区间 [d_m, d_{m+1}) 上的生存函数积分
    interval_mass = np.empty(len(active))
    for m in range(len(active)):
        survival_at_start = math.exp(-float(np.dot(mu_active[:m + 1], delays[m] - delays[:m + 1])))
        if m + 1 < len(active):
            width = delays[m + 1] - delays[m]
            interval_mass[m] = survival_at_start * -math.expm1(-a[m] * width) / a[m]
        else:
            interval_mass[m] = survival_at_start / a[m]

    tail_mass = np.cumsum(interval_mass[::-1])[::-1]
    probabilities = [0.0] * len(params.classes)
    for position, index in enumerate(active):
        probabilities[index] = float(mu_active[position] * tail_mass[position])
    return probabilities


def value_removal_probability(params: TwoClassParams, pool_size: float) -> float:
    """tip 被价值消息移出的概率 P = p·exp(-(1-p)λk d_Q / L)"""
    if not math.isfinite(pool_size) or pool_size <= 0:
        raise ModelDomainError(f"tip 池大小必须为正, 当前 L={pool_size}")
    p = params.value_fraction
    return p * math.exp(-(1.0 - p) * params.rate * params.parent_count * params.quarantine / pool_size)


def class_fractions(classes: Sequence[DelayClass]) -> NDArray[np.float64]:
    return np.array([c.fraction for c in classes], dtype=np.float64)

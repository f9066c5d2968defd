import heapq
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import kstest

from src.api.Errors import ModelDomainError, SimulationInvariantError
from src.tipScripts.Controller import ControllerConfig, FractionEstimator, adaptive_k, observe
from src.tipScripts.DelayModel import ModelParams, class_fractions, removal_time_cdf
from src.tipScripts.Quarantine import QuarantinePipeline

logger = logging.getLogger(__name__)

GENESIS_ID = 0
UNIFORM_BATCH = 1 << 16

# 同一时刻的事件顺序: 隔离到达 -> 意见检查 -> 纳入检查 -> 显现
EVENT_ARRIVAL = 0
EVENT_OPINION = 1
EVENT_INCLUSION = 2
EVENT_REVEAL = 3


@dataclass(frozen=True)
class Message:
    """
    DAG 中的一条消息
    :param id: 序号（创世消息为 0）
    :param class_index: 延迟类别下标（创世消息为 -1）
    :param issue_time: 发出时间
    :param reveal_time: 进入 tip 池的时间
    :param parent_ids: 父消息序号
    """
    id: int
    class_index: int
    issue_time: float
    reveal_time: float
    parent_ids: tuple[int, ...]


class TipPool:
    """当前可见且尚未被引用的消息集合，支持 O(1) 增删和均匀抽样"""

    def __init__(self) -> None:
        self._members: list[int] = []
        self._index: dict[int, int] = {}
        self._ever_added: set[int] = set()

    def __len__(self) -> int:
        return len(self._members)

    def __contains__(self, message_id: int) -> bool:
        return message_id in self._index

    @property
    def members(self) -> frozenset[int]:
        return frozenset(self._members)

    def add(self, message_id: int) -> None:
        # 每个消息只能进入一次
        if message_id in self._ever_added:
            raise SimulationInvariantError(f"消息 {message_id} 重复进入 tip 池")
        self._ever_added.add(message_id)
        self._index[message_id] = len(self._members)
        self._members.append(message_id)

    def remove(self, message_id: int) -> bool:
        """移出一个 tip；已不在池中时不做任何事并返回 False"""
        position = self._index.pop(message_id, None)
        if position is None:
            return False
        last = self._members.pop()
        if last != message_id:
            self._members[position] = last
            self._index[last] = position
        return True

    def sample(self, count: int, uniforms: Iterator[float]) -> list[int]:
        """
        不放回地均匀抽取 count 个 tip
        :param count: 抽取数量，池不够大时返回全部
        :param uniforms: [0,1) 均匀随机数流
        :return: 被选中的消息序号
        """
        size = len(self._members)
        if count >= size:
            return list(self._members)
        chosen: list[int] = []
        while len(chosen) < count:
            position = int(next(uniforms) * size)
            if position not in chosen:
                chosen.append(position)
        return [self._members[position] for position in chosen]


@dataclass(frozen=True)
class SimConfig:
    """
    仿真配置
    :param params: 模型参数
    :param total_arrivals: 到达消息总数
    :param seed: 64 位无符号种子（PCG64）
    :param warmup_fraction: 丢弃的预热时间比例
    :param record_removal_times: 是否记录 tip 移出时间
    :param record_messages: 是否保留全部消息（仅用于小规模运行）
    :param controller: 自适应父消息数控制，None 表示固定 k
    :param estimator_window: p̄ 的滑动窗口，None 时取 10·(h+d_Q)
    :param quarantine: 非 None 时最后一个类别经隔离流水线进入 tip 池，值为 d_Q
    :param double_spend: 价值消息重复花费上一笔价值消息输出的比例
    """
    params: ModelParams
    total_arrivals: int
    seed: int = 42
    warmup_fraction: float = 0.2
    record_removal_times: bool = True
    record_messages: bool = False
    controller: Optional[ControllerConfig] = None
    estimator_window: Optional[float] = None
    quarantine: Optional[float] = None
    double_spend: float = 0.0

    def __post_init__(self) -> None:
        if int(self.total_arrivals) != self.total_arrivals or self.total_arrivals < 1:
            raise ModelDomainError(f"到达总数必须为正整数, 当前 total_arrivals={self.total_arrivals}")
        if not 0 <= self.seed < 2 ** 64:
            raise ModelDomainError(f"种子必须是 64 位无符号整数, 当前 seed={self.seed}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ModelDomainError(f"预热比例必须在 [0,1) 内, 当前 warmup_fraction={self.warmup_fraction}")
        if not 0.0 <= self.double_spend <= 1.0:
            raise ModelDomainError(f"重复花费比例必须在 [0,1] 内, 当前 double_spend={self.double_spend}")
        if self.quarantine is not None:
            if self.quarantine < 0 or self.quarantine > self.params.max_delay:
                raise ModelDomainError(
                    f"隔离时间必须在 [0, {self.params.max_delay}] 内, 当前 quarantine={self.quarantine}")
        elif self.double_spend > 0:
            raise ModelDomainError("重复花费只能在隔离流水线模式下使用")

    @property
    def value_class(self) -> int:
        return len(self.params.classes) - 1


@dataclass
class SimResult:
    """
    仿真结果（统计量只使用预热后的显现事件）
    :param mean_pool_size: tip 池平均大小
    :param pool_size_stddev: tip 池大小标准差
    :param series_times: 全部显现事件的时间
    :param series_sizes: 每次显现事件后的 tip 池大小
    :param removal_times: 预热后的 tip 移出时间
    :param arrivals_by_class: 各类别到达数
    :param removals_by_class: 预热后各类别作为移出者的次数
    """
    mean_pool_size: float
    pool_size_stddev: float
    series_times: NDArray[np.float64]
    series_sizes: NDArray[np.int64]
    removal_times: NDArray[np.float64]
    arrivals_by_class: list[int]
    removals_by_class: list[int]
    revealed_count: int
    removed_count: int
    final_pool_size: int
    rejected_count: int = 0
    k_histogram: dict[int, int] = field(default_factory=dict)
    messages: list[Message] = field(default_factory=list)

    @property
    def pool_size_series(self) -> list[tuple[float, int]]:
        return list(zip(self.series_times.tolist(), self.series_sizes.tolist()))

    @cached_property
    def sorted_removal_times(self) -> NDArray[np.float64]:
        return np.sort(self.removal_times)


def _uniform_stream(rng: np.random.Generator) -> Iterator[float]:
    """分批生成均匀随机数"""
    while True:
        yield from rng.random(UNIFORM_BATCH).tolist()


def derive_seed(seed: int, index: int) -> int:
    """由 (seed, index) 派生独立的 64 位种子"""
    state = np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def run_simulation(config: SimConfig) -> SimResult:
    """
    离散事件仿真 DAG 的生长
        1. 到达时间为速率 λ 的泊松过程，按 p_i 给每条消息分配类别
        2. 发出时从当前 tip 池中不放回地均匀选 min(k_i, |池|) 个父消息，池为空时选创世消息
        3. 显现时（发出 + d_i）加入 tip 池，并移出仍在池中的父消息
    :param config: 仿真配置
    :return: 仿真结果，相同配置与种子得到完全相同的结果
    """
    started = time.perf_counter()
    params = config.params
    classes = params.classes
    total = int(config.total_arrivals)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    arrival_times = np.cumsum(rng.exponential(1.0 / params.rate, total)).tolist()
    class_draws = rng.choice(len(classes), size=total, p=class_fractions(classes)).tolist()
    spend_draws = rng.random(total).tolist() if config.double_spend > 0 else None
    uniforms = _uniform_stream(rng)

    delays = [c.delay for c in classes]
    parent_counts = [c.parent_count for c in classes]
    value_class = config.value_class
    t_last = arrival_times[-1]
    warmup_end = config.warmup_fraction * t_last

    estimator = None
    if config.controller is not None:
        window = config.estimator_window or config.controller.default_window
        estimator = FractionEstimator(window=window, value_class=value_class)
    pipeline = None
    network_delay = 0.0
    if config.quarantine is not None:
        pipeline = QuarantinePipeline(config.quarantine, retain_settled=False, record_transcript=False,
                                      settled_memory=config.quarantine)
        network_delay = delays[value_class] - config.quarantine

    pool = TipPool()
    reveal_times = [math.nan] * (total + 1)
    class_of = [-1] * (total + 1)
    issue_times = [0.0] * (total + 1)
    pending_parents: dict[int, tuple[int, ...]] = {}
    conflict_keys: dict[int, int] = {}
    messages: dict[int, Message] = {}

    series_times = np.empty(total + 1, dtype=np.float64)
    series_sizes = np.empty(total + 1, dtype=np.int64)
    series_window = np.zeros(total + 1, dtype=bool)
    removal_times: list[float] = []
    fallback_removals: list[float] = []
    removals_by_class = [0] * len(classes)
    fallback_by_class = [0] * len(classes)
    arrivals_by_class = [0] * len(classes)
    k_histogram: Counter = Counter()
    counters = {"samples": 0, "revealed": 0, "removed": 0, "rejected": 0}
    events: list[tuple[float, int, int]] = []

    def reveal(message_id: int, t: float, parents: tuple[int, ...]) -> None:
        pool.add(message_id)
        reveal_times[message_id] = t
        counters["revealed"] += 1
        in_window = warmup_end <= t <= t_last
        remover = class_of[message_id]
        for parent in parents:
            if pool.remove(parent):
                counters["removed"] += 1
                if config.record_removal_times:
                    elapsed = t - reveal_times[parent]
                    if in_window:
                        removal_times.append(elapsed)
                        removals_by_class[remover] += 1
                    else:
                        fallback_removals.append(elapsed)
                        fallback_by_class[remover] += 1
        index = counters["samples"]
        series_times[index] = t
        series_sizes[index] = len(pool)
        series_window[index] = in_window
        counters["samples"] = index + 1
        if config.record_messages:
            messages[message_id] = Message(message_id, class_of[message_id], issue_times[message_id], t, parents)

    def process(t: float, kind: int, message_id: int) -> None:
        if kind == EVENT_REVEAL:
            reveal(message_id, t, pending_parents.pop(message_id))
        elif kind == EVENT_ARRIVAL:
            entry = pipeline.on_arrival(message_id, conflict_keys.pop(message_id), t)
            if entry.opinion == "Unknown":
                heapq.heappush(events, (entry.opinion_due, EVENT_OPINION, message_id))
            heapq.heappush(events, (entry.inclusion_due, EVENT_INCLUSION, message_id))
        elif kind == EVENT_OPINION:
            pipeline.on_opinion_due(message_id, t)
        else:
            if pipeline.on_inclusion_due(message_id, t) is None:
                counters["rejected"] += 1
                pending_parents.pop(message_id)
            else:
                reveal(message_id, t, pending_parents.pop(message_id))

    reveal(GENESIS_ID, 0.0, ())
    last_value_key: Optional[int] = None

    for message_id, (t, cls) in enumerate(zip(arrival_times, class_draws), start=1):
        # 同一时刻先显现后发出
        while events and events[0][0] <= t:
            process(*heapq.heappop(events))

        arrivals_by_class[cls] += 1
        class_of[message_id] = cls
        issue_times[message_id] = t
        if estimator is not None:
            k = adaptive_k(estimator.current_estimate, config.controller)
            observe(estimator, cls, t)
        else:
            k = parent_counts[cls]
        k_histogram[k] += 1

        parents = tuple(pool.sample(k, uniforms)) if len(pool) else (GENESIS_ID,)
        for parent in parents:
            if parent >= message_id or reveal_times[parent] > t:
                raise SimulationInvariantError(f"边 {message_id} -> {parent} 违反无环性")
        pending_parents[message_id] = parents

        if pipeline is not None and cls == value_class:
            key = message_id
            if spend_draws is not None and last_value_key is not None and spend_draws[message_id - 1] < config.double_spend:
                key = last_value_key
            last_value_key = key
            conflict_keys[message_id] = key
            heapq.heappush(events, (t + network_delay, EVENT_ARRIVAL, message_id))
        else:
            heapq.heappush(events, (t + delays[cls], EVENT_REVEAL, message_id))

    # 最后一次到达之后把剩余事件处理完
    while events:
        process(*heapq.heappop(events))

    if counters["revealed"] - counters["removed"] != len(pool):
        raise SimulationInvariantError(
            f"守恒性被破坏: 显现 {counters['revealed']} - 移出 {counters['removed']} != 池大小 {len(pool)}")

    count = counters["samples"]
    series_times = series_times[:count]
    series_sizes = series_sizes[:count]
    window_mask = series_window[:count]
    if not window_mask.any():
        # 规模过小的运行（窗口内没有显现事件）使用全部事件
        window_mask = np.ones(count, dtype=bool)
        removal_times = fallback_removals + removal_times
        removals_by_class = [a + b for a, b in zip(fallback_by_class, removals_by_class)]
    sizes = series_sizes[window_mask].astype(np.float64)

    result = SimResult(
        mean_pool_size=float(sizes.mean()),
        pool_size_stddev=float(sizes.std()),
        series_times=series_times,
        series_sizes=series_sizes,
        removal_times=np.asarray(removal_times, dtype=np.float64),
        arrivals_by_class=arrivals_by_class,
        removals_by_class=removals_by_class,
        revealed_count=counters["revealed"],
        removed_count=counters["removed"],
        final_pool_size=len(pool),
        rejected_count=counters["rejected"],
        k_histogram=dict(sorted(k_histogram.items())),
        messages=[messages[key] for key in sorted(messages)],
    )
    logger.info("仿真完成: %d 条到达, 种子 %d, 平均 tip 池 %.2f, 用时 %.1fs",
                total, config.seed, result.mean_pool_size, time.perf_counter() - started)
    return result


def empirical_removal_cdf(result: SimResult, x: float) -> float:
    """
    经验移出时间分布函数：记录值中 <= x 的比例
    :raises: ModelDomainError 如果没有记录移出时间
    """
    if result.removal_times.size == 0:
        raise ModelDomainError("没有记录任何移出时间")
    ordered = result.sorted_removal_times
    return float(np.searchsorted(ordered, x, side="right") / ordered.size)


def ks_distance(result: SimResult, params: ModelParams) -> float:
    """经验分布与解析分布（在仿真平均 L 处求值）之间的 KS 距离"""
    if result.removal_times.size == 0:
        raise ModelDomainError("没有记录任何移出时间")
    pool_size = result.mean_pool_size
    return float(kstest(result.removal_times, lambda x: removal_time_cdf(x, params, pool_size)).statistic)


def two_class_point(base: ModelParams, value_fraction: float) -> ModelParams:
    """把两类参数的价值消息占比替换为 value_fraction"""
    if len(base.classes) != 2:
        raise ModelDomainError(f"扫描需要恰好两个类别, 当前有 {len(base.classes)} 个")
    if not 0.0 <= value_fraction <= 1.0:
        raise ModelDomainError(f"价值消息占比必须在 [0,1] 内, 当前为 {value_fraction}")
    data, value = base.classes
    return ModelParams(base.rate, (replace(data, fraction=1.0 - value_fraction),
                                   replace(value, fraction=value_fraction)))


def sweep(base: SimConfig, fractions: Sequence[float], workers: int = 1) -> list[tuple[float, SimResult]]:
    """
    对每个价值消息占比各跑一次独立仿真
    :param base: 两类基础配置
    :param fractions: 价值消息占比列表
    :param workers: 并行进程数
    :return: 与输入顺序一致的 (p, 结果) 列表
    """
    if len(base.params.classes) != 2:
        raise ModelDomainError(f"扫描需要恰好两个类别, 当前有 {len(base.params.classes)} 个")
    configs = [
        replace(base, params=two_class_point(base.params, p), seed=derive_seed(base.seed, index))
        for index, p in enumerate(fractions)
    ]
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run_simulation, configs))
    else:
        results = []
        for p, config in zip(fractions, configs):
            logger.info("扫描点 p=%.3f", p)
            results.append(run_simulation(config))
    return list(zip(fractions, results))

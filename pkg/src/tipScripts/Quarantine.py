import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Optional, Protocol, Sequence

from src.api.Errors import QuarantineError
from src.api.Typing import Type_Opinion, Type_Outcome

logger = logging.getLogger(__name__)

# 同一时刻的检查顺序: 到达 -> 意见 -> 纳入
PRIORITY_ARRIVAL = 0
PRIORITY_OPINION = 1
PRIORITY_INCLUSION = 2


@dataclass(slots=True)
class QuarantineEntry:
    """
    隔离流水线中的一笔价值交易
    :param tx_id: 交易标识
    :param conflict_key: 被花费的输出标识（冲突集的键）
    :param arrival_time: 到达时间
    :param opinion: 初始意见
    :param opinion_due: 意见检查时间 = arrival_time + d_Q/2
    :param inclusion_due: 纳入检查时间 = opinion_due + d_Q/2
    :param outcome: 结果
    :param admitted_at: 进入 tip 池的时间（被拒绝时为 None）
    """
    tx_id: Hashable
    conflict_key: Hashable
    arrival_time: float
    opinion: Type_Opinion
    opinion_due: float
    inclusion_due: float
    outcome: Type_Outcome = "Pending"
    admitted_at: Optional[float] = None


class ConflictResolver(Protocol):
    """投票过滤器的替身: 从冲突集中至多选出一笔交易"""

    def __call__(self, conflict_set: Sequence[QuarantineEntry]) -> Optional[Hashable]: ...


def default_resolver(conflict_set: Sequence[QuarantineEntry]) -> Optional[Hashable]:
    """恰好有一笔交易被 Liked 时接纳它，否则全部拒绝"""
    liked = [entry.tx_id for entry in conflict_set if entry.opinion == "Liked"]
    if len(liked) == 1:
        return liked[0]
    return None


@dataclass
class _ConflictSet:
    first_tx: Hashable
    second_arrival: Optional[float] = None
    members: list = field(default_factory=list)
    admitted: Optional[Hashable] = None
    # members 在 retain_settled=False 时会被删减，tx_ids 保留全部成员用于遗忘
    tx_ids: list = field(default_factory=list)
    pending: int = 0
    settled_at: float = -math.inf


class QuarantinePipeline:
    """
    价值交易的定时状态机（单一写者，调用时间必须非递减）

    规则:
        1. 到达时若同一输出已有交易，则立即 Disliked
        2. d_Q/2 时若窗口内没有冲突交易到达则 Liked，否则 Disliked
        3. d_Q 时若窗口内没有冲突交易则直接进入 tip 池，否则交给冲突裁决器

    settled_memory 为 None 时冲突集永久保留，已被接纳的输出再被花费总会被拒绝；
    否则全部成员结算超过 settled_memory 秒的冲突集连同其条目被遗忘，之后同一输出的交易开启新的冲突集。
    """

    def __init__(self, quarantine: float, retain_settled: bool = True, record_transcript: bool = True,
                 settled_memory: Optional[float] = None) -> None:
        if not math.isfinite(quarantine) or quarantine < 0:
            raise QuarantineError(f"隔离时间必须非负, 当前 d_Q={quarantine}")
        if settled_memory is not None and not settled_memory >= 0:
            raise QuarantineError(f"遗忘时长必须非负, 当前 {settled_memory}")
        self.quarantine = quarantine
        self.retain_settled = retain_settled
        self.record_transcript = record_transcript
        self.settled_memory = settled_memory
        self.entries: dict[Hashable, QuarantineEntry] = {}
        self.transcript: list[tuple[float, Hashable, str]] = []
        self._sets: dict[Hashable, _ConflictSet] = {}
        self._seen: set = set()
        self._settled: deque[Hashable] = deque()
        self._clock = -math.inf
        self._direct_delay_sum = 0.0
        self._direct_count = 0

    def _tick(self, t: float) -> None:
        if t < self._clock:
            raise QuarantineError(f"时间倒退: {t} < {self._clock}")
        self._clock = t
        if self.settled_memory is not None:
            self._forget(t)

    def _forget(self, t: float) -> None:
        # 队列按结算时间有序；结算后又有新成员的冲突集会在再次结算时重新入队
        while self._settled:
            key = self._settled[0]
            conflict_set = self._sets.get(key)
            if conflict_set is not None and conflict_set.pending == 0:
                if conflict_set.settled_at + self.settled_memory >= t:
                    return
                for tx_id in conflict_set.tx_ids:
                    self._seen.discard(tx_id)
                    self.entries.pop(tx_id, None)
                del self._sets[key]
            self._settled.popleft()

    @property
    def tracked_sets(self) -> int:
        """仍在记录中的冲突集数量"""
        return len(self._sets)

    def _log(self, t: float, tx_id: Hashable, event: str) -> None:
        if self.record_transcript:
            self.transcript.append((t, tx_id, event))

    def _entry(self, tx_id: Hashable) -> QuarantineEntry:
        try:
            return self.entries[tx_id]
        except KeyError:
            raise QuarantineError(f"未知的交易 {tx_id!r}") from None

    def _settle(self, entry: QuarantineEntry, outcome: Type_Outcome, t: float) -> None:
        # 结果离开 Pending 后不再改变
        if entry.outcome != "Pending":
            raise QuarantineError(f"交易 {entry.tx_id!r} 已结算为 {entry.outcome}")
        entry.outcome = outcome
        if outcome != "Rejected":
            entry.admitted_at = t
        self._log(t, entry.tx_id, outcome)
        conflict_set = self._sets[entry.conflict_key]
        conflict_set.pending -= 1
        if conflict_set.pending == 0:
            conflict_set.settled_at = t
            if self.settled_memory is not None:
                self._settled.append(entry.conflict_key)

    def on_arrival(self, tx_id: Hashable, conflict_key: Hashable, t: float) -> QuarantineEntry:
        """
        交易到达
        :param tx_id: 交易标识，不能重复
        :param conflict_key: 被花费的输出
        :param t: 到达时间
        :return: 新建的条目（opinion 为 Unknown 或 Disliked）
        """
        if tx_id in self._seen:
            raise QuarantineError(f"重复的交易 {tx_id!r}")
        self._tick(t)
        self._seen.add(tx_id)

        half = self.quarantine / 2.0
        opinion_due = t + half
        conflict_set = self._sets.get(conflict_key)
        if conflict_set is None:
            conflict_set = _ConflictSet(first_tx=tx_id)
            self._sets[conflict_key] = conflict_set
            opinion: Type_Opinion = "Unknown"
        else:
            if conflict_set.second_arrival is None:
                conflict_set.second_arrival = t
            opinion = "Disliked"

        entry = QuarantineEntry(tx_id, conflict_key, t, opinion, opinion_due, opinion_due + half)
        self.entries[tx_id] = entry
        conflict_set.members.append(tx_id)
        conflict_set.tx_ids.append(tx_id)
        conflict_set.pending += 1
        self._log(t, tx_id, f"arrival {opinion}")
        return entry

    def on_opinion_due(self, tx_id: Hashable, t: float) -> QuarantineEntry:
        """d_Q/2 到期: 设定初始意见"""
        entry = self._entry(tx_id)
        if t != entry.opinion_due:
            raise QuarantineError(f"意见检查时间错误: {tx_id!r} 应在 {entry.opinion_due}, 实际 {t}")
        if entry.opinion != "Unknown":
            raise QuarantineError(f"交易 {tx_id!r} 的意见已是 {entry.opinion}")
        self._tick(t)

        conflict_set = self._sets[entry.conflict_key]
        conflicted = conflict_set.second_arrival is not None and conflict_set.second_arrival <= entry.opinion_due
        entry.opinion = "Disliked" if conflicted else "Liked"
        self._log(t, tx_id, f"opinion {entry.opinion}")
        return entry

    def on_inclusion_due(self, tx_id: Hashable, t: float,
                         resolver: ConflictResolver = default_resolver) -> Optional[Hashable]:
        """
        d_Q 到期: tip 纳入检查
        :param tx_id: 交易标识
        :param t: 当前时间，必须等于 inclusion_due
        :param resolver: 冲突裁决器
        :return: 此刻进入 tip 池的交易标识；被拒绝时为 None
        """
        entry = self._entry(tx_id)
        if t != entry.inclusion_due:
            raise QuarantineError(f"纳入检查时间错误: {tx_id!r} 应在 {entry.inclusion_due}, 实际 {t}")
        if entry.opinion == "Unknown":
            raise QuarantineError(f"交易 {tx_id!r} 的意见尚未设定")
        self._tick(t)

        conflict_set = self._sets[entry.conflict_key]
        conflicted = conflict_set.first_tx != tx_id or (
            conflict_set.second_arrival is not None and conflict_set.second_arrival <= entry.inclusion_due)

        if not conflicted:
            self._settle(entry, "AdmittedDirect", t)
            conflict_set.admitted = tx_id
            self._direct_delay_sum += t - entry.arrival_time
            self._direct_count += 1
            if not self.retain_settled:
                del self.entries[tx_id]
                conflict_set.members.remove(tx_id)
            return tx_id

        if conflict_set.admitted is not None:
            self._settle(entry, "Rejected", t)
            return None

        snapshot = tuple(replace(self.entries[member]) for member in conflict_set.members)
        winner = resolver(snapshot)
        if winner is not None and winner not in conflict_set.members:
            raise QuarantineError(f"裁决器返回了冲突集之外的交易 {winner!r}")
        if winner == tx_id:
            self._settle(entry, "AdmittedByResolver", t)
            conflict_set.admitted = tx_id
            return tx_id
        self._settle(entry, "Rejected", t)
        return None

    def effective_delay_check(self) -> float:
        """
        直接进入 tip 池的交易的平均滞留时间，对无冲突流量应恰好为 d_Q
        :raises: QuarantineError 如果还没有直接进入的交易
        """
        if self._direct_count == 0:
            raise QuarantineError("还没有直接进入 tip 池的交易")
        return self._direct_delay_sum / self._direct_count

    @property
    def direct_admissions(self) -> int:
        return self._direct_count

    def conflict_members(self, conflict_key: Hashable) -> list[QuarantineEntry]:
        """冲突集中仍保留的条目（按到达顺序）"""
        conflict_set = self._sets.get(conflict_key)
        if conflict_set is None:
            return []
        return [self.entries[member] for member in conflict_set.members]


def replay_timeline(pipeline: QuarantinePipeline, arrivals: Iterable[tuple[Hashable, Hashable, float]],
                    resolver: ConflictResolver = default_resolver) -> list[Hashable]:
    """
    按时间顺序驱动流水线直到所有检查完成
    :param pipeline: 流水线
    :param arrivals: (tx_id, conflict_key, 到达时间) 列表
    :param resolver: 冲突裁决器
    :return: 按进入顺序排列的被接纳交易
    """
    events: list[tuple[float, int, int, Hashable, Hashable]] = []
    for seq, (tx_id, conflict_key, t) in enumerate(arrivals):
        events.append((t, PRIORITY_ARRIVAL, seq, tx_id, conflict_key))
    heapq.heapify(events)

    admitted: list[Hashable] = []
    seq = len(events)
    while events:
        t, kind, _, tx_id, conflict_key = heapq.heappop(events)
        if kind == PRIORITY_ARRIVAL:
            entry = pipeline.on_arrival(tx_id, conflict_key, t)
            if entry.opinion == "Unknown":
                heapq.heappush(events, (entry.opinion_due, PRIORITY_OPINION, seq, tx_id, conflict_key))
            heapq.heappush(events, (entry.inclusion_due, PRIORITY_INCLUSION, seq + 1, tx_id, conflict_key))
            seq += 2
        elif kind == PRIORITY_OPINION:
            pipeline.on_opinion_due(tx_id, t)
        else:
            released = pipeline.on_inclusion_due(tx_id, t, resolver)
            if released is not None:
                admitted.append(released)
    logger.debug("时间线回放完成, 共接纳 %d 笔交易", len(admitted))
    return admitted

# exceedance_extractor.py
import math
from dataclasses import dataclass
from typing import List, Iterable, Tuple, Union

import numpy as np
from scipy import optimize

from cluster_laws import ClusterLaw, CensoredCycleLaw, censored_law
from exact_oracle import log_marginal_tail_x
from path_generator import (
    FINITE_MEAN, CENSORED, RegenerativePath, PathStream, XSource, x_chunks, horizon,
)
from utils import logger, write_csv

CLUSTER_RATE = "cluster-rate"
TAIL_RATE = "tail-rate"
FIXED_LEVEL = "fixed"
LEVEL_MODES = (CLUSTER_RATE, TAIL_RATE, FIXED_LEVEL)

CLUSTER_COLUMNS = ["rep", "method", "start", "size", "level"]
COUNT_COLUMNS = ["rep", "window", "count"]


class LevelError(Exception):
    """水平无法满足（例如 n 太小导致 u <= 0）"""


@dataclass(frozen=True)
class LevelSchedule:
    """水平选择方式

    cluster-rate: rate 为每条路径的期望簇数 ρ
    tail-rate:    rate 为 n P(X₀ > u_n) 的目标值 λ
    fixed:        rate 直接就是水平 u
    """
    mode: str
    rate: float

    def describe(self) -> dict:
        return {"mode": self.mode, "rate": self.rate}


@dataclass(frozen=True)
class ClusterRecord:
    """一个超越簇"""
    start: int
    size: int
    level: float
    method: str
    cycle_index: int = -1
    delayed: bool = False


@dataclass(frozen=True, eq=False)
class CountProcess:
    """把 [0,1] 等分为 windows 个窗口后的计数 N_n(A)"""
    n: int
    windows: int
    level: float
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(np.sum(self.counts))


def resolve_level(n: int, schedule: LevelSchedule,
                  law: Union[ClusterLaw, CensoredCycleLaw], construction: str) -> float:
    """根据水平方案求 u_n

    Args:
        n: 路径长度
        schedule: 水平方案
        law: 有限均值构造用 ClusterLaw，截断构造用 CensoredCycleLaw（或其基分布）
        construction: finite-mean 或 censored

    Returns:
        水平 u > 0
    """
    if schedule.mode == FIXED_LEVEL:
        u = float(schedule.rate)
        if u <= 0:
            raise LevelError(f"固定水平必须为正: u={u}")
        return u
    if n < 2:
        raise LevelError(f"路径长度太小: n={n}")
    if schedule.rate <= 0:
        raise LevelError(f"{schedule.mode} 的参数必须为正: {schedule.rate}")

    if construction == CENSORED and not isinstance(law, CensoredCycleLaw):
        law = censored_law(law)

    if schedule.mode == CLUSTER_RATE:
        c = law.nu if construction == CENSORED else (law.base if isinstance(law, CensoredCycleLaw) else law).mean
        u = math.log(n / (c * schedule.rate))
    elif schedule.mode == TAIL_RATE:
        target = math.log(schedule.rate / n)
        if construction == FINITE_MEAN:
            # 有限均值构造的边际是 Exp(1)
            u = -target
        elif target >= 0:
            u = 0.0
        else:
            def f(level: float) -> float:
                return log_marginal_tail_x(law, level) - target

            hi = max(-target, 1.0)
            while f(hi) > 0:
                hi *= 2.0
            u = optimize.brentq(f, 1e-12, hi, xtol=1e-13, rtol=1e-14)
    else:
        raise LevelError(f"未知的水平方案: {schedule.mode!r}")

    if u <= 0:
        raise LevelError(f"n={n} 太小，{schedule.mode}={schedule.rate} 得到的水平 u={u:.4f} <= 0")
    return u


def clusters_by_cycle(path: Union[RegenerativePath, PathStream], u: float) -> List[ClusterRecord]:
    """按再生周期提取簇：Y_k > u 的完整周期构成一个大小为 τ_k 的簇

    第一个（延迟）周期若完整也会给出，但标记 delayed=True；最后不完整的周期丢弃。
    """
    records = []
    cycle = 0
    start = 0
    for tau, y in path.cycle_batches():
        starts = start + np.cumsum(tau) - tau
        ends = starts + tau
        hits = np.flatnonzero((y > u) & (ends <= path.n))
        for i in hits.tolist():
            index = cycle + i
            records.append(ClusterRecord(int(starts[i]), int(tau[i]), float(u), "cycle", index, index == 0))
        cycle += len(tau)
        start += int(np.sum(tau))
    return records


def regular_clusters(records: Iterable[ClusterRecord]) -> List[ClusterRecord]:
    """去掉延迟周期给出的簇（簇大小分布只对 k >= 2 的周期精确成立）"""
    return [record for record in records if not record.delayed]


def clusters_by_runs(source: XSource, u: float, r: int = 1) -> List[ClusterRecord]:
    """游程去簇：相邻超越点间距大于 r 时开始新簇，簇大小为簇内超越次数

    Args:
        source: X 序列（数组、物化路径或路径流）
        u: 水平
        r: 游程间隔

    Returns:
        按时间排序的簇列表
    """
    if r < 1:
        raise ValueError(f"游程间隔必须 >= 1: r={r}")
    method = f"runs({r})"
    records = []
    open_start, open_last, open_size = -1, -1, 0

    for start, x in x_chunks(source):
        idx = start + np.flatnonzero(x > u)
        if not len(idx):
            continue
        breaks = np.flatnonzero(np.diff(idx) > r) + 1
        seg_first = np.concatenate([[0], breaks])
        seg_last = np.concatenate([breaks - 1, [len(idx) - 1]])
        for first, last in zip(seg_first.tolist(), seg_last.tolist()):
            size = last - first + 1
            if open_size and idx[first] - open_last <= r:
                open_size += size
            else:
                if open_size:
                    records.append(ClusterRecord(open_start, open_size, float(u), method))
                open_start, open_size = int(idx[first]), size
            open_last = int(idx[last])

    if open_size:
        records.append(ClusterRecord(open_start, open_size, float(u), method))
    return records


def count_process(source: XSource, u: float, m: int) -> CountProcess:
    """超越点过程在 m 个等宽窗口上的计数"""
    if m < 1:
        raise ValueError(f"窗口数必须 >= 1: m={m}")
    n = horizon(source)
    counts = np.zeros(m, dtype=np.int64)
    for start, x in x_chunks(source):
        idx = start + np.flatnonzero(x > u)
        counts += np.bincount(idx * m // n, minlength=m)
    return CountProcess(n, m, float(u), counts)


def cluster_count_process(records: Iterable[ClusterRecord], n: int, m: int, u: float) -> CountProcess:
    """簇到达（按簇起点）在 m 个窗口上的计数"""
    starts = np.array([record.start for record in records], dtype=np.int64)
    counts = np.bincount(starts * m // n, minlength=m) if len(starts) else np.zeros(m, dtype=np.int64)
    return CountProcess(n, m, float(u), counts)


def write_clusters_csv(rows: Iterable[Tuple[int, ClusterRecord]], output_path: str) -> str:
    return write_csv(output_path, CLUSTER_COLUMNS,
                     ((rep, c.method, c.start, c.size, c.level) for rep, c in rows))


def write_counts_csv(rows: Iterable[Tuple[int, CountProcess]], output_path: str) -> str:
    def expand():
        for rep, process in rows:
            for window, count in enumerate(process.counts.tolist()):
                yield rep, window, count

    return write_csv(output_path, COUNT_COLUMNS, expand())


def describe_level(n: int, schedule: LevelSchedule, u: float) -> dict:
    logger.debug(f"水平: n={n}, 方案={schedule.mode}, 参数={schedule.rate}, u={u:.6f}")
    return {"n": n, "schedule": schedule.describe(), "u": u}

# path_generator.py
from dataclasses import dataclass
from typing import Iterator, Tuple, Union

import numpy as np

from config import CHUNK_CYCLES
from cluster_laws import (
    ClusterLaw, CensoredCycleLaw, ConstructionError,
    censored_law, sample_zeta, sample_delay_finite, sample_cycle_joint,
    sample_initial_censored, sample_initial_arrays,
)
from utils import logger, write_csv

FINITE_MEAN = "finite-mean"
CENSORED = "censored"
CONSTRUCTIONS = (FINITE_MEAN, CENSORED)

AnyLaw = Union[ClusterLaw, CensoredCycleLaw]


def _resolve_law(law: AnyLaw, construction: str) -> AnyLaw:
    if construction == FINITE_MEAN:
        base = law.base if isinstance(law, CensoredCycleLaw) else law
        if not base.finite_mean:
            raise ConstructionError(f"{base.descriptor} 的均值为无穷，不能使用有限均值构造")
        return base
    if construction == CENSORED:
        return law if isinstance(law, CensoredCycleLaw) else censored_law(law)
    raise ConstructionError(f"未知的构造: {construction!r}，可选: {', '.join(CONSTRUCTIONS)}")


@dataclass(frozen=True, eq=False)
class RegenerativePath:
    """一条实现：周期长度 τ_k、高度 Y_k、部分和 S_k 以及 X_0..X_{n-1}

    只保留与 [0, n) 相交的周期，最后一个周期可能不完整。
    """
    construction: str
    tau: np.ndarray
    y: np.ndarray
    S: np.ndarray
    n: int

    @property
    def num_cycles(self) -> int:
        return len(self.tau)

    @property
    def starts(self) -> np.ndarray:
        """每个周期的起点 S_{k-1}"""
        return self.S - self.tau

    @property
    def complete_cycles(self) -> int:
        """完全落在 [0, n) 内的周期数"""
        return int(np.searchsorted(self.S, self.n, side='right'))

    @property
    def x(self) -> np.ndarray:
        return np.repeat(self.y, self.tau)[:self.n]

    @property
    def cycle_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_cycles), self.tau)[:self.n]

    def eta(self, k):
        """η(k) = min{r : S_r > k}（从 1 开始编号）"""
        return np.searchsorted(self.S, k, side='right') + 1

    def defect(self) -> np.ndarray:
        """γ(k) = k - S_{η(k)-1}"""
        k = np.arange(self.n)
        return k - self.starts[self.eta(k) - 1]

    def excess(self) -> np.ndarray:
        """χ(k) = S_{η(k)} - k"""
        k = np.arange(self.n)
        return self.S[self.eta(k) - 1] - k

    def cycle_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if self.num_cycles:
            yield self.tau, self.y


class PathStream:
    """惰性生成的路径，按批（每批 CHUNK_CYCLES 个周期）产生周期

    物化路径和流式读取共用同一批次序列，所以同一种子得到完全相同的值。
    只能遍历一次。
    """

    def __init__(self, law: AnyLaw, construction: str, n: int, rng: np.random.Generator,
                 chunk_cycles: int = CHUNK_CYCLES):
        """初始化路径流

        Args:
            law: 有限均值构造用 ClusterLaw，截断构造用 CensoredCycleLaw（或其基分布）
            construction: finite-mean 或 censored
            n: 时间范围 [0, n)
            rng: 随机数生成器
            chunk_cycles: 每批周期数
        """
        if n < 0:
            raise ValueError(f"时间范围必须非负: n={n}")
        self.construction = construction
        self.law = _resolve_law(law, construction)
        self.n = int(n)
        self.rng = rng
        self.chunk_cycles = int(chunk_cycles)
        self._consumed = False

    def _initial_cycle(self) -> Tuple[int, float]:
        if self.construction == FINITE_MEAN:
            tau = sample_delay_finite(self.law, self.rng)
            y = float(self.rng.exponential(1.0))
            return tau, y
        initial = sample_initial_censored(self.law, self.rng)
        return initial.chi, initial.v

    def _regular_cycles(self, remaining: int) -> Tuple[np.ndarray, np.ndarray]:
        # τ >= 1，剩余长度就是所需周期数的上界
        c = min(self.chunk_cycles, max(remaining, 16))
        if self.construction == FINITE_MEAN:
            tau = sample_zeta(self.law, self.rng, c)
            y = self.rng.exponential(1.0, c)
            return tau, y
        return sample_cycle_joint(self.law, self.rng, c)

    def cycle_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """按批产生 (τ, Y)，只保留起点在 [0, n) 内的周期"""
        if self._consumed:
            raise RuntimeError("PathStream 只能遍历一次")
        self._consumed = True
        if self.n == 0:
            return

        tau1, y1 = self._initial_cycle()
        yield np.array([tau1], dtype=np.int64), np.array([y1])
        covered = tau1
        while covered < self.n:
            tau, y = self._regular_cycles(self.n - covered)
            starts = covered + np.cumsum(tau) - tau
            keep = int(np.searchsorted(starts, self.n, side='left'))
            yield tau[:keep], y[:keep]
            covered += int(np.sum(tau[:keep]))

    def x_chunks(self) -> Iterator[Tuple[int, np.ndarray]]:
        """按批产生 (起始下标, X 片段)"""
        start = 0
        for tau, y in self.cycle_batches():
            x = np.repeat(y, tau)[:self.n - start]
            yield start, x
            start += len(x)

    def __iter__(self):
        return stream_x(self)


def _collect(stream: PathStream) -> RegenerativePath:
    taus, ys = [], []
    for tau, y in stream.cycle_batches():
        taus.append(tau)
        ys.append(y)
    tau = np.concatenate(taus) if taus else np.array([], dtype=np.int64)
    y = np.concatenate(ys) if ys else np.array([])
    path = RegenerativePath(stream.construction, tau, y, np.cumsum(tau), stream.n)
    logger.debug(f"生成路径 {stream.construction}: n={stream.n}, 周期数={path.num_cycles}")
    return path


def build_path_finite(G: ClusterLaw, n: int, rng: np.random.Generator,
                      chunk_cycles: int = CHUNK_CYCLES) -> RegenerativePath:
    """有限均值构造：τ₁ 取平稳延迟，τ_k ~ G (k>=2)，Y_k 独立同分布 Exp(1)"""
    return _collect(PathStream(G, FINITE_MEAN, n, rng, chunk_cycles))


def build_path_censored(law: CensoredCycleLaw, n: int, rng: np.random.Generator,
                        chunk_cycles: int = CHUNK_CYCLES) -> RegenerativePath:
    """截断构造：(τ₁, Y₁) 取初始向量 (χ, V)，之后 (τ_k, Y_k) 独立同分布"""
    return _collect(PathStream(law, CENSORED, n, rng, chunk_cycles))


def build_path(law: AnyLaw, construction: str, n: int, rng: np.random.Generator) -> RegenerativePath:
    if construction == FINITE_MEAN:
        return build_path_finite(_resolve_law(law, construction), n, rng)
    return build_path_censored(_resolve_law(law, construction), n, rng)


PathSource = Union[RegenerativePath, PathStream]
XSource = Union[np.ndarray, RegenerativePath, PathStream]


def stream_x(source: PathSource) -> Iterator[Tuple[int, float, int]]:
    """逐点产生 (k, X_k, 周期编号)，内存只与当前批次有关"""
    k = 0
    cycle = 0
    n = source.n
    for tau, y in source.cycle_batches():
        for length, height in zip(tau.tolist(), y.tolist()):
            for _ in range(length):
                if k >= n:
                    return
                yield k, height, cycle
                k += 1
            cycle += 1


def horizon(source: XSource) -> int:
    if isinstance(source, np.ndarray):
        return len(source)
    return source.n


def x_chunks(source: XSource) -> Iterator[Tuple[int, np.ndarray]]:
    """把数组、物化路径或路径流统一成 (起始下标, X 片段) 序列"""
    if isinstance(source, np.ndarray):
        if len(source):
            yield 0, source
    elif isinstance(source, RegenerativePath):
        if source.n:
            yield 0, source.x
    else:
        yield from source.x_chunks()


def sample_windows(law: AnyLaw, construction: str, length: int, count: int,
                   rng: np.random.Generator, batch: int = 50000) -> np.ndarray:
    """生成 count 条相互独立、长度为 length 的平稳路径片段 X_0..X_{length-1}

    每条片段最多需要 length 个周期（τ >= 1），按行向量化生成。

    Returns:
        形状为 (count, length) 的数组
    """
    law = _resolve_law(law, construction)
    out = np.empty((count, length))
    extra = max(length - 1, 0)
    for lo in range(0, count, batch):
        rows = min(batch, count - lo)
        if construction == FINITE_MEAN:
            tau1 = sample_delay_finite(law, rng, rows)
            y1 = rng.exponential(1.0, rows)
            tau_rest = sample_zeta(law, rng, rows * extra).reshape(rows, extra)
            y_rest = rng.exponential(1.0, rows * extra).reshape(rows, extra)
        else:
            _, tau1, y1 = sample_initial_arrays(law, rng, rows)
            tau_rest, y_rest = sample_cycle_joint(law, rng, rows * extra)
            tau_rest = tau_rest.reshape(rows, extra)
            y_rest = y_rest.reshape(rows, extra)
        taus = np.hstack([tau1[:, None], tau_rest])
        ys = np.hstack([y1[:, None], y_rest])
        # 每行的周期长度截断到总和恰为 length
        capped = np.minimum(np.cumsum(taus, axis=1), length)
        clipped = np.diff(capped, axis=1, prepend=0)
        out[lo:lo + rows] = np.repeat(ys.ravel(), clipped.ravel()).reshape(rows, length)
    return out


def write_path_csv(path: RegenerativePath, output_path: str) -> str:
    """导出 `k,x` 行，仅用于小规模调试"""
    x = path.x
    return write_csv(output_path, ["k", "x"], ((k, float(v)) for k, v in enumerate(x)))

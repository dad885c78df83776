# cluster_statistics.py
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from config import MIN_EXPECTED_CELL, MIN_DISPERSION_SAMPLES, MIN_GAPS
from cluster_laws import ClusterLaw
from exceedance_extractor import ClusterRecord, CountProcess
from path_generator import XSource, x_chunks
from utils import logger, write_csv, binomial_se

PMF_COLUMNS = ["size", "empirical", "target"]


class InsufficientDataError(Exception):
    """样本不足以进行统计检验"""


@dataclass(frozen=True)
class EmpiricalPmf:
    """簇大小的经验分布"""
    counts: Dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def max_size(self) -> int:
        return max(self.counts) if self.counts else 0

    def probability(self, k: int) -> float:
        total = self.total
        return self.counts.get(k, 0) / total if total else 0.0

    def probabilities(self, M: Optional[int] = None) -> np.ndarray:
        """k = 1..M 的经验概率"""
        M = self.max_size if M is None else M
        total = self.total
        out = np.zeros(M)
        for k, c in self.counts.items():
            if k <= M:
                out[k - 1] = c / total
        return out

    def std_errors(self, M: Optional[int] = None) -> np.ndarray:
        p = self.probabilities(M)
        return np.sqrt(p * (1.0 - p) / max(self.total, 1))

    def merge(self, other: "EmpiricalPmf") -> "EmpiricalPmf":
        return EmpiricalPmf(dict(Counter(self.counts) + Counter(other.counts)))

    def as_dict(self) -> Dict[int, float]:
        return {k: self.probability(k) for k in sorted(self.counts)}


PmfLike = Union[EmpiricalPmf, ClusterLaw, Mapping[int, float]]


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    cells: int


@dataclass(frozen=True)
class ExtremalIndexEstimate:
    """块方法得到的极值指数估计"""
    theta: float
    block_length: int
    level: float
    blocks: int
    exceeding_blocks: int
    exceedance_rate: float
    replications: int
    method: str = "blocks"


@dataclass(frozen=True)
class MaximaCheck:
    empirical: float
    standard_error: float
    predicted: float
    replications: int

    @property
    def bias(self) -> float:
        return self.empirical - self.predicted


def empirical_pmf(clusters: Iterable[Union[ClusterRecord, int]]) -> EmpiricalPmf:
    """统计簇大小的经验分布

    Args:
        clusters: ClusterRecord 或簇大小

    Returns:
        EmpiricalPmf
    """
    sizes = Counter(int(c.size) if isinstance(c, ClusterRecord) else int(c) for c in clusters)
    if not sizes:
        raise InsufficientDataError("没有簇，无法构造经验分布")
    if min(sizes) < 1:
        raise ValueError(f"簇大小必须 >= 1: {min(sizes)}")
    return EmpiricalPmf(dict(sizes))


def _support(p: PmfLike) -> int:
    if isinstance(p, EmpiricalPmf):
        return p.max_size
    if isinstance(p, ClusterLaw):
        return p.support_bound
    return max(p) if p else 0


def _masses(p: PmfLike, M: int) -> Tuple[np.ndarray, float, float]:
    """k = 1..M 的质量、M 之后的总质量、M 之后单点质量的上确界"""
    ks = np.arange(1, M + 1)
    if isinstance(p, ClusterLaw):
        return np.asarray(p.pmf(ks), dtype=float), float(p.tail(M + 1)), float(p.pmf(M + 1))
    if isinstance(p, EmpiricalPmf):
        masses = p.probabilities(M)
    else:
        masses = np.array([float(p.get(int(k), 0.0)) for k in ks])
    rest = max(1.0 - float(np.sum(masses)), 0.0)
    return masses, rest, rest


def tv_distance(p: PmfLike, target: PmfLike) -> float:
    """全变差距离 ½ Σ_k |p_k - q_k|，表外尾部质量计入"""
    M = max(_support(p), _support(target), 1)
    a, a_rest, _ = _masses(p, M)
    b, b_rest, _ = _masses(target, M)
    # 至多一方在 M 之后有质量时精确
    return 0.5 * (float(np.sum(np.abs(a - b))) + abs(a_rest - b_rest))


def sup_distance(p: PmfLike, target: PmfLike) -> float:
    """sup_k |p_k - q_k|"""
    M = max(_support(p), _support(target), 1)
    a, _, a_point = _masses(p, M)
    b, _, b_point = _masses(target, M)
    return float(max(np.max(np.abs(a - b)), abs(a_point - b_point)))


def chi_square_gof(p: EmpiricalPmf, target: PmfLike, min_expected: float = MIN_EXPECTED_CELL) -> ChiSquareResult:
    """卡方拟合优度检验，期望频数不足的相邻格子向右合并，尾部并入最后一格

    Args:
        p: 经验分布
        target: 目标分布
        min_expected: 每格最小期望频数

    Returns:
        ChiSquareResult
    """
    N = p.total
    if N == 0:
        raise InsufficientDataError("没有观测")
    M = max(_support(p), _support(target), 1)
    observed = p.probabilities(M) * N
    expected_masses, expected_rest, _ = _masses(target, M)
    expected = expected_masses * N

    cells_o: List[float] = []
    cells_e: List[float] = []
    acc_o = acc_e = 0.0
    for o, e in zip(observed.tolist(), expected.tolist()):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            cells_o.append(acc_o)
            cells_e.append(acc_e)
            acc_o = acc_e = 0.0
    acc_e += expected_rest * N
    if acc_o > 0 or acc_e > 0:
        if cells_e and acc_e < min_expected:
            cells_o[-1] += acc_o
            cells_e[-1] += acc_e
        else:
            cells_o.append(acc_o)
            cells_e.append(acc_e)

    if len(cells_e) < 2:
        raise InsufficientDataError(f"合并后只剩 {len(cells_e)} 个格子，卡方检验退化")

    o = np.array(cells_o)
    e = np.array(cells_e)
    if np.any(e <= 0):
        raise InsufficientDataError("存在期望频数为 0 的格子")
    statistic = float(np.sum((o - e) ** 2 / e))
    dof = len(e) - 1
    return ChiSquareResult(statistic, dof, float(stats.chi2.sf(statistic, dof)), len(e))


def dispersion_index(counts: Sequence[Union[int, CountProcess]]) -> float:
    """Var/Mean，泊松时约为 1，复合泊松时大于 1"""
    values = np.array([c.total if isinstance(c, CountProcess) else c for c in counts], dtype=float)
    if len(values) < MIN_DISPERSION_SAMPLES:
        raise InsufficientDataError(f"至少需要 {MIN_DISPERSION_SAMPLES} 个计数，当前 {len(values)}")
    mean = float(np.mean(values))
    if mean == 0:
        raise InsufficientDataError("计数均值为 0")
    return float(np.var(values, ddof=1)) / mean


def windowed_gap_cdf(s, rate: float):
    """长度为 1 的窗口内泊松点（期望 rate 个）的合并相邻间距的分布函数

    窗口截掉了长间距，密度 ∝ (1 - s) e^{-rate s}，s ∈ [0, 1]。
    """
    def mass(a):
        return -np.expm1(-rate * a) - (1.0 - (1.0 + rate * a) * np.exp(-rate * a)) / rate

    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    return mass(s) / mass(1.0)


def ks_exponential_gaps(starts: Sequence[Sequence[int]], normalization: float = 1.0,
                        rate: Optional[float] = None) -> Tuple[float, float]:
    """簇间距的 KS 检验

    Args:
        starts: 每次重复的簇起点序列
        normalization: 间距先除以的尺度（窗口长度 n）
        rate: 每个窗口的平均簇数；给出时与窗口截断后的间距分布比较，
            否则按样本均值标准化后与 Exp(1) 比较

    Returns:
        (KS 统计量, p 值)
    """
    gaps = [np.diff(np.sort(np.asarray(s, dtype=float))) / normalization for s in starts if len(s) > 1]
    gaps = np.concatenate(gaps) if gaps else np.array([])
    if len(gaps) < MIN_GAPS:
        raise InsufficientDataError(f"至少需要 {MIN_GAPS} 个间距，当前 {len(gaps)}")
    if rate is not None:
        if not rate > 0:
            raise InsufficientDataError(f"平均簇数必须为正: {rate}")
        result = stats.kstest(gaps, lambda s: windowed_gap_cdf(s, rate))
    else:
        result = stats.kstest(gaps / np.mean(gaps), 'expon')
    return float(result.statistic), float(result.pvalue)


def ks_marginal(x: np.ndarray, cdf) -> Tuple[float, float]:
    """样本与给定分布函数的 KS 检验"""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise InsufficientDataError("没有样本")
    result = stats.kstest(x, cdf)
    return float(result.statistic), float(result.pvalue)


@dataclass(frozen=True)
class BlockCounts:
    """一条或多条路径上的块统计量，可按重复合并"""
    block_length: int
    blocks: int = 0
    exceeding_blocks: int = 0
    exceedances: int = 0
    observations: int = 0
    replications: int = 0

    def merge(self, other: "BlockCounts") -> "BlockCounts":
        if other.block_length != self.block_length:
            raise ValueError(f"块长不一致: {self.block_length} != {other.block_length}")
        return BlockCounts(self.block_length,
                           self.blocks + other.blocks,
                           self.exceeding_blocks + other.exceeding_blocks,
                           self.exceedances + other.exceedances,
                           self.observations + other.observations,
                           self.replications + other.replications)


def block_counts(source: XSource, u: float, b: int) -> BlockCounts:
    """统计完整块数 B、有超越的块数 K 和超越次数；路径流按批读取"""
    if b < 1:
        raise ValueError(f"块长必须 >= 1: b={b}")
    B = K = exceed = observed = 0
    carry = np.array([])
    for _, x in x_chunks(source):
        data = np.concatenate([carry, x]) if carry.size else x
        full = len(data) // b * b
        blocks = data[:full].reshape(-1, b) > u
        B += blocks.shape[0]
        K += int(np.count_nonzero(blocks.any(axis=1)))
        exceed += int(np.count_nonzero(blocks))
        observed += full
        carry = data[full:]
    return BlockCounts(b, B, K, exceed, observed, 1)


def theta_from_blocks(counts: BlockCounts, u: float) -> ExtremalIndexEstimate:
    """θ̂ = ln(1 - K/B) / (b ln(1 - q̂))，截断到 [0, 1.05]"""
    B, K, b = counts.blocks, counts.exceeding_blocks, counts.block_length
    if B == 0:
        raise InsufficientDataError(f"没有完整的块: b={b}")
    if K == 0 or counts.exceedances == 0:
        raise InsufficientDataError(f"水平 u={u:.4f} 下没有超越")
    if K == B:
        raise InsufficientDataError(f"所有块都有超越，水平 u={u:.4f} 太低")

    q = counts.exceedances / counts.observations
    if q >= 1.0:
        raise InsufficientDataError(f"水平 u={u:.4f} 下全部超越")
    theta = math.log1p(-K / B) / (b * math.log1p(-q))
    theta = min(max(theta, 0.0), 1.05)
    logger.debug(f"块方法: b={b}, B={B}, K={K}, q={q:.3e}, θ={theta:.4f}")
    return ExtremalIndexEstimate(theta, b, float(u), B, K, q, counts.replications)


def extremal_index_blocks(sources: Union[XSource, Sequence[XSource]], u: float, b: int) -> ExtremalIndexEstimate:
    """块方法估计极值指数，只使用完整的块

    Args:
        sources: 一条或多条 X 序列
        u: 水平
        b: 块长

    Returns:
        ExtremalIndexEstimate
    """
    if not isinstance(sources, (list, tuple)):
        sources = [sources]
    total = BlockCounts(b)
    for source in sources:
        total = total.merge(block_counts(source, u, b))
    return theta_from_blocks(total, u)


def maxima_check(maxima: Sequence[float], u: float, lam: float, theta: float) -> MaximaCheck:
    """比较 P(M_n <= u_n) 的经验值与 exp(-θλ)"""
    maxima = np.asarray(maxima, dtype=float)
    R = len(maxima)
    if R == 0:
        raise InsufficientDataError("没有最大值样本")
    if R < 1000:
        logger.warning(f"最大值样本只有 {R} 个，标准误较大")
    empirical = float(np.mean(maxima <= u))
    return MaximaCheck(empirical, binomial_se(empirical, R), math.exp(-theta * lam), R)


def quantile_edges(x: np.ndarray, bins: int) -> np.ndarray:
    """按经验分位数划分的 bins 个格子边界（首尾扩展到 ±inf）"""
    inner = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    return np.concatenate([[-np.inf], np.unique(inner), [np.inf]])


def shift_invariance_tv(windows: np.ndarray, lag: int, bins: int = 20,
                        edges: Optional[np.ndarray] = None) -> float:
    """(X_0, X_1) 与 (X_lag, X_lag+1) 的二维直方图之间的全变差距离

    Args:
        windows: 形状 (count, length) 的独立路径片段，length > lag + 1
        lag: 平移量
        bins: 每维格子数
        edges: 格子边界，缺省时用 X_0 的经验分位数

    Returns:
        全变差距离
    """
    count, length = windows.shape
    if length <= lag + 1:
        raise ValueError(f"窗口长度 {length} 不足以检查平移 {lag}")
    if count == 0:
        raise InsufficientDataError("没有窗口样本")
    if edges is None:
        edges = quantile_edges(windows[:, 0], bins)
    h0, _, _ = np.histogram2d(windows[:, 0], windows[:, 1], bins=[edges, edges])
    h1, _, _ = np.histogram2d(windows[:, lag], windows[:, lag + 1], bins=[edges, edges])
    return 0.5 * float(np.sum(np.abs(h0 - h1))) / count


def write_pmf_csv(p: EmpiricalPmf, target: PmfLike, output_path: str) -> str:
    M = max(p.max_size, 1)
    target_masses, _, _ = _masses(target, M)
    empirical = p.probabilities(M)
    return write_csv(output_path, PMF_COLUMNS,
                     ((k, float(empirical[k - 1]), float(target_masses[k - 1])) for k in range(1, M + 1)))

# cluster_laws.py
import os
import math
import functools
from dataclasses import dataclass, replace
from typing import Dict, Tuple, Optional, Union, Mapping, Callable, Any

import numpy as np
from scipy import special

from config import (
    LAW_TABLE_MAX, CYCLE_TABLE_SIZE, ZETA_VALUE_CAP,
    PMF_SUM_TOL, CUSTOM_SUM_TOL,
)
from utils import logger


class LawError(Exception):
    """分布描述或分布表不合法"""


class ConstructionError(Exception):
    """构造与分布不匹配（例如有限均值构造遇到无穷均值）"""


# e - 1，用于 e^{-(j-1)} - e^{-j} = e^{-j}(e - 1)
_E_MINUS_ONE = math.expm1(1.0)
# 1 - e^{-1}
_ONE_MINUS_INV_E = -math.expm1(-1.0)

FAMILIES = ("delta", "geometric", "zeta", "custom")

_EMPTY = np.array([])


@dataclass(frozen=True, eq=False)
class ClusterLaw:
    """目标簇大小分布 G = {g_k}_{k>=1}

    tails[i] = ḡ_{i+1}，长度为 K+1（最后一项是表外的解析尾部）。
    构造后不可变，可在线程/进程之间共享。
    """
    family: str
    params: Tuple[float, ...]
    table: np.ndarray
    tails: np.ndarray
    mean: float
    period: int
    descriptor: str

    @property
    def support_bound(self) -> int:
        return len(self.table)

    @property
    def finite_mean(self) -> bool:
        return math.isfinite(self.mean)

    def pmf(self, k):
        """g_k，支持数组"""
        k = np.asarray(k)
        kf = k.astype(float)
        if self.family == "delta":
            out = (k == int(self.params[0])).astype(float)
        elif self.family == "geometric":
            p = self.params[0]
            out = np.where(kf >= 1, p * np.power(1.0 - p, np.maximum(kf - 1.0, 0.0)), 0.0)
        elif self.family == "zeta":
            s = self.params[0]
            out = np.where(kf >= 1, np.power(np.maximum(kf, 1.0), -s) / special.zeta(s), 0.0)
        else:
            idx = k.astype(np.int64)
            inside = (idx >= 1) & (idx <= self.support_bound)
            out = np.where(inside, self.table[np.clip(idx - 1, 0, self.support_bound - 1)], 0.0)
        return out if out.ndim else float(out)

    def tail(self, m):
        """ḡ_m = Σ_{i>=m} g_i，支持数组"""
        m = np.asarray(m)
        mf = m.astype(float)
        if self.family == "delta":
            out = (mf <= self.params[0]).astype(float)
        elif self.family == "geometric":
            out = np.power(1.0 - self.params[0], np.maximum(mf - 1.0, 0.0))
        elif self.family == "zeta":
            s = self.params[0]
            out = special.zeta(s, np.maximum(mf, 1.0)) / special.zeta(s)
        else:
            idx = np.clip(mf, 1, self.support_bound + 1).astype(np.int64)
            out = self.tails[idx - 1]
        out = np.where(mf <= 1, 1.0, out)
        return out if out.ndim else float(out)

    def excess_sum(self, m):
        """Σ_{j>=m} ḡ_j = E(ζ - m + 1)^+，支持数组；无穷均值时为 inf"""
        m = np.asarray(m)
        mf = np.maximum(m.astype(float), 1.0)
        if self.family == "delta":
            out = np.maximum(self.params[0] - mf + 1.0, 0.0)
        elif self.family == "geometric":
            p = self.params[0]
            out = np.power(1.0 - p, mf - 1.0) / p
        elif self.family == "zeta":
            s = self.params[0]
            if s <= 2.0:
                out = np.full(mf.shape, np.inf)
            else:
                out = (special.zeta(s - 1.0, mf) - (mf - 1.0) * special.zeta(s, mf)) / special.zeta(s)
                out = np.maximum(out, 0.0)
        else:
            cum = np.concatenate([np.cumsum(self.tails[::-1])[::-1], [0.0]])
            idx = np.clip(mf, 1, self.support_bound + 2).astype(np.int64)
            out = cum[idx - 1]
        return out if out.ndim else float(out)

    def truncated_mean(self, m):
        """E(ζ ∧ m) = Σ_{k<=m} ḡ_k，支持数组"""
        m = np.asarray(m).astype(np.int64)
        top = int(max(np.max(m), 1)) if m.size else 1
        cum = np.concatenate([[0.0], np.cumsum(self.tail(np.arange(1, top + 1)))])
        out = cum[np.clip(m, 0, top)]
        return out if out.ndim else float(out)

    def describe(self) -> Dict[str, Any]:
        """报告用的描述信息"""
        return {
            "descriptor": self.descriptor,
            "family": self.family,
            "params": list(self.params),
            "mean": self.mean,
            "period": self.period,
            "support_bound": self.support_bound,
        }


@dataclass(frozen=True, eq=False)
class CensoredCycleLaw:
    """截断周期长度 τ = ζ ∧ ⌈Y⌉ 的分布（无穷均值构造）"""
    base: ClusterLaw
    p_table: np.ndarray
    nu: float

    def p(self, j):
        """p_j = ḡ_j (e^{-(j-1)} - e^{-j}) + g_j e^{-j}，支持数组"""
        j = np.asarray(j)
        jf = j.astype(float)
        out = np.exp(-jf) * (self.base.tail(jf) * _E_MINUS_ONE + self.base.pmf(j))
        out = np.where(jf >= 1, out, 0.0)
        return out if out.ndim else float(out)

    def survival(self, j):
        """P(τ >= j) = ḡ_j e^{-(j-1)}"""
        jf = np.asarray(j).astype(float)
        out = np.where(jf <= 1, 1.0, self.base.tail(jf) * np.exp(-(jf - 1.0)))
        return out if out.ndim else float(out)

    def mixture_weight(self, j):
        """Y | τ=j 落在 (j-1, j] 分量的概率"""
        j = np.asarray(j)
        jf = j.astype(float)
        pj = self.p(j)
        num = np.exp(-jf) * self.base.tail(jf) * _E_MINUS_ONE
        out = np.divide(num, pj, out=np.zeros_like(num, dtype=float), where=np.asarray(pj) > 0)
        return out if out.ndim else float(out)

    def describe(self) -> Dict[str, Any]:
        return {"base": self.base.descriptor, "nu": self.nu, "table_size": len(self.p_table)}


@dataclass(frozen=True)
class InitialVector:
    """初始向量 (γ, χ, V)：缺陷、超出量（即 τ₁）和初始高度 Y₁"""
    gamma: int
    chi: int
    v: float


def parse_law_descriptor(descriptor: str) -> Tuple[str, str]:
    """拆分 `family:argument` 形式的分布描述"""
    if not isinstance(descriptor, str) or ':' not in descriptor:
        raise LawError(f"分布描述格式错误（应为 family:参数）: {descriptor!r}")
    family, argument = descriptor.split(':', 1)
    family = family.strip().lower()
    if family not in FAMILIES:
        raise LawError(f"未知的分布族: {family!r}，可选: {', '.join(FAMILIES)}")
    return family, argument.strip()


def load_custom_pmf(file_path: str) -> Dict[int, float]:
    """读取自定义分布表，每行 `k 概率`，k 升序

    Args:
        file_path: 分布表文件路径

    Returns:
        {k: g_k} 字典
    """
    if not os.path.exists(file_path):
        raise LawError(f"分布表文件不存在: {file_path}")

    masses: Dict[int, float] = {}
    previous = 0
    with open(file_path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.replace(',', ' ').split()
            if len(parts) != 2:
                raise LawError(f"{file_path}:{line_no}: 每行应为 `k 概率`: {raw.strip()}")
            try:
                k, prob = int(parts[0]), float(parts[1])
            except ValueError as e:
                raise LawError(f"{file_path}:{line_no}: 无法解析: {raw.strip()}") from e
            if k <= previous:
                raise LawError(f"{file_path}:{line_no}: k 必须为正且严格升序: {k}")
            masses[k] = prob
            previous = k
    return masses


def _from_table(masses: Mapping[int, float], descriptor: str) -> ClusterLaw:
    if not masses:
        raise LawError("分布表为空")
    if min(masses) < 1:
        raise LawError(f"支撑必须从 1 开始: k={min(masses)}")
    if any(prob < 0 for prob in masses.values()):
        raise LawError("分布表含有负概率")
    total = float(sum(masses.values()))
    if abs(total - 1.0) > CUSTOM_SUM_TOL:
        raise LawError(f"分布表概率和为 {total!r}，偏离 1 超过 {CUSTOM_SUM_TOL}")

    support = sorted(k for k, prob in masses.items() if prob > 0)
    if not support:
        raise LawError("分布表支撑为空")
    period = int(np.gcd.reduce(np.array(support, dtype=np.int64)))
    if period != 1:
        raise LawError(f"支撑的最大公约数为 {period}，分布必须是非周期的")

    K = max(support)
    table = np.zeros(K)
    for k in support:
        table[k - 1] = masses[k] / total
    tails = np.concatenate([np.cumsum(table[::-1])[::-1], [0.0]])
    mean = float(np.dot(np.arange(1, K + 1), table))
    return ClusterLaw("custom", (), table, tails, mean, period, descriptor)


def _builtin(family: str, value: float, descriptor: str) -> ClusterLaw:
    if family == "delta":
        if value != int(value) or value < 1:
            raise LawError(f"delta 的参数必须是正整数: {value}")
        k = int(value)
        K = int(value)
        if K != 1:
            # 平稳构造本身不依赖非周期性，只是 GX 的更新极限需要
            logger.warning(f"delta({K}) 是周期分布（周期 {K}），仍按退化分布接受")
        law = ClusterLaw("delta", (float(K),), _EMPTY, _EMPTY, float(K), K, descriptor)
    elif family == "geometric":
        if not 0.0 < value <= 1.0:
            raise LawError(f"geometric 的参数必须在 (0, 1] 内: {value}")
        if value == 1.0:
            K = 1
        else:
            K = int(min(LAW_TABLE_MAX, max(1, math.ceil(math.log(1e-17) / math.log1p(-value)))))
        law = ClusterLaw("geometric", (value,), _EMPTY, _EMPTY, 1.0 / value, 1, descriptor)
    elif family == "zeta":
        if not value > 1.0:
            raise LawError(f"zeta 的参数必须大于 1: {value}")
        K = min(LAW_TABLE_MAX, 4096)
        mean = float(special.zeta(value - 1.0) / special.zeta(value)) if value > 2.0 else math.inf
        law = ClusterLaw("zeta", (value,), _EMPTY, _EMPTY, mean, 1, descriptor)
    else:
        raise LawError(f"未知的分布族: {family}")

    # 解析族的 pmf/tail 不依赖表，先构造再填表
    table = np.asarray(law.pmf(np.arange(1, K + 1)), dtype=float)
    tails = np.asarray(law.tail(np.arange(1, K + 2)), dtype=float)
    return replace(law, table=table, tails=tails)


def _check_invariants(law: ClusterLaw) -> None:
    if np.any(law.table < 0):
        raise LawError(f"{law.descriptor}: 存在负概率")
    total = float(np.sum(law.table)) + float(law.tails[-1])
    if abs(total - 1.0) > PMF_SUM_TOL:
        raise LawError(f"{law.descriptor}: 表内概率与解析尾部之和为 {total!r}")
    if abs(float(law.tails[0]) - 1.0) > PMF_SUM_TOL:
        raise LawError(f"{law.descriptor}: ḡ_1 = {law.tails[0]!r} ≠ 1")


def make_cluster_law(source: Union[str, ClusterLaw, Mapping[int, float]]) -> ClusterLaw:
    """根据分布描述构造 ClusterLaw

    Args:
        source: `delta:k`、`geometric:p`、`zeta:s`、`custom:<路径>`，
              或者 {k: 概率} 字典，或者已构造的 ClusterLaw

    Returns:
        通过校验的 ClusterLaw
    """
    if isinstance(source, ClusterLaw):
        return source
    if isinstance(source, Mapping):
        law = _from_table({int(k): float(v) for k, v in source.items()}, "custom:<table>")
    else:
        family, argument = parse_law_descriptor(source)
        descriptor = f"{family}:{argument}"
        if family == "custom":
            law = _from_table(load_custom_pmf(argument), descriptor)
        else:
            try:
                value = float(argument)
            except ValueError as e:
                raise LawError(f"分布参数不是数字: {source!r}") from e
            law = _builtin(family, value, descriptor)

    _check_invariants(law)
    logger.info(f"构造分布 {law.descriptor}: 均值={law.mean}, 表长度={law.support_bound}")
    return law


def tail(G: ClusterLaw, m: int) -> float:
    """精确的尾部概率 ḡ_m"""
    return float(G.tail(int(m)))


def capped_pmf(G: ClusterLaw, j, v):
    """g_j(v) = P(ζ ∧ ⌈v⌉ = j)，j 与 v 可广播"""
    j = np.asarray(j)
    c = np.maximum(np.ceil(np.asarray(v, dtype=float)), 1.0)
    jf = j.astype(float)
    out = np.where(jf < c, G.pmf(j), np.where(jf == c, G.tail(c), 0.0))
    return out if np.ndim(out) else float(out)


def _inverse_survival(survival_table: np.ndarray, survival_fn: Callable[[np.ndarray], np.ndarray],
                      w: np.ndarray, cap: Optional[np.ndarray] = None) -> np.ndarray:
    """逆变换采样：w ∈ (0, 1]，返回 min{m >= 1 : P(X > m) < w}

    survival_table[i] = P(X > i + 1)。超出表的部分用解析尾部做倍增和二分，
    若给出 cap 则返回 min(X, cap)，只在 cap 超出表时才做解析搜索。
    """
    K = len(survival_table)
    values = np.searchsorted(-survival_table, -w, side='right').astype(np.int64) + 1
    beyond = values > K
    if cap is not None:
        cap = np.asarray(cap, dtype=np.int64)
        resolved = beyond & (cap <= K)
        values[resolved] = cap[resolved]
        beyond &= ~resolved
    if np.any(beyond):
        target = w[beyond]
        lo = np.full(target.shape, K, dtype=np.int64)  # P(X > lo) >= w
        hi = np.full(target.shape, 2 * max(K, 1), dtype=np.int64)
        pending = (survival_fn(hi.astype(float)) >= target) & (hi < ZETA_VALUE_CAP)
        while np.any(pending):
            lo[pending] = hi[pending]
            hi[pending] = np.minimum(hi[pending] * 2, ZETA_VALUE_CAP)
            pending = (survival_fn(hi.astype(float)) >= target) & (hi < ZETA_VALUE_CAP)
        while np.any(hi - lo > 1):
            mid = lo + (hi - lo) // 2
            above = survival_fn(mid.astype(float)) >= target
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        values[beyond] = hi
    if cap is not None:
        values = np.minimum(values, cap)
    return values


def _zeta_survival_table(G: ClusterLaw) -> np.ndarray:
    # P(ζ > m) = ḡ_{m+1}, m = 1..K
    return G.tails[1:]


def _zeta_from_uniform(G: ClusterLaw, w: np.ndarray, cap: Optional[np.ndarray] = None) -> np.ndarray:
    return _inverse_survival(_zeta_survival_table(G), lambda m: G.tail(m + 1.0), w, cap)


def sample_zeta(G: ClusterLaw, rng: np.random.Generator, size: Optional[int] = None):
    """按 G 抽取 ζ（逆变换采样）

    Args:
        G: 簇大小分布
        rng: 随机数生成器
        size: 样本量，None 时返回单个整数

    Returns:
        正整数或整数数组
    """
    w = 1.0 - rng.random(1 if size is None else size)
    values = _zeta_from_uniform(G, w)
    return int(values[0]) if size is None else values


def censored_law(G: ClusterLaw) -> CensoredCycleLaw:
    """构造截断周期长度分布 {p_j} 和均值 ν"""
    J = CYCLE_TABLE_SIZE
    js = np.arange(1, J + 1)
    stub = CensoredCycleLaw(G, np.array([]), 1.0)
    p_table = np.asarray(stub.p(js), dtype=float)
    # ν = Σ_j P(τ >= j) = Σ_j ḡ_j e^{-(j-1)}
    nu = float(np.sum(stub.survival(js)))
    law = CensoredCycleLaw(G, p_table, nu)
    logger.info(f"截断周期分布 {G.descriptor}: ν={nu:.12f}, p_1={p_table[0]:.12f}")
    return law


def sample_cycle_joint(law: CensoredCycleLaw, rng: np.random.Generator, size: Optional[int] = None):
    """抽取 (τ, Y) = (ζ ∧ ⌈Y⌉, Y)，ζ 与 Y 独立"""
    n = 1 if size is None else size
    w = 1.0 - rng.random(n)
    y = rng.exponential(1.0, n)
    ceil_y = np.maximum(np.ceil(y), 1.0).astype(np.int64)
    tau = _zeta_from_uniform(law.base, w, cap=ceil_y)
    if size is None:
        return int(tau[0]), float(y[0])
    return tau, y


def sample_y_given_tau(law: CensoredCycleLaw, j, rng: np.random.Generator, size: Optional[int] = None):
    """在 τ = j 条件下抽取 Y

    混合分布：以概率 ḡ_j(e^{-(j-1)} - e^{-j})/p_j 取截断在 (j-1, j] 的 Exp(1)，
    否则取 j + Exp(1)。j 为数组时逐元素抽取。
    """
    j = np.asarray(j, dtype=np.int64)
    if size is not None:
        j = np.broadcast_to(j, (size,))
    pj = np.asarray(law.p(j))
    if np.any(pj <= 0):
        bad = np.unique(np.atleast_1d(j)[np.atleast_1d(pj) <= 0])
        raise LawError(f"τ = {bad.tolist()} 在分布 {law.base.descriptor} 下概率为 0")

    shape = np.shape(j) or (1,)
    choice = rng.random(shape)
    w2 = 1.0 - rng.random(shape)
    jf = np.reshape(j, shape).astype(float)
    weight = np.reshape(law.mixture_weight(j), shape)
    inside = (jf - 1.0) - np.log1p(-w2 * _ONE_MINUS_INV_E)
    beyond = jf - np.log(w2)
    v = np.where(choice < weight, inside, beyond)
    if np.ndim(j) == 0:
        return float(v[0])
    return v


@functools.lru_cache(maxsize=32)
def _delay_survival_table(G: ClusterLaw) -> np.ndarray:
    # P(τ₁ > m) = Σ_{j>m} ḡ_j / μ, m = 1..K
    ms = np.arange(1, G.support_bound + 1, dtype=float)
    return np.asarray(G.excess_sum(ms + 1.0), dtype=float) / G.mean


def sample_delay_finite(G: ClusterLaw, rng: np.random.Generator, size: Optional[int] = None):
    """有限均值构造的延迟 τ₁：P(τ₁ = j) = ḡ_j / μ"""
    if not G.finite_mean:
        raise ConstructionError(f"{G.descriptor} 的均值为无穷，不能使用有限均值构造")
    w = 1.0 - rng.random(1 if size is None else size)
    values = _inverse_survival(_delay_survival_table(G), lambda m: G.excess_sum(m + 1.0) / G.mean, w)
    return int(values[0]) if size is None else values


@functools.lru_cache(maxsize=32)
def _size_biased_cdf(law: CensoredCycleLaw) -> np.ndarray:
    ms = np.arange(1, len(law.p_table) + 1)
    weights = ms * law.p_table
    cdf = np.cumsum(weights) / np.sum(weights)
    cdf[-1] = 1.0
    return cdf


def sample_initial_arrays(law: CensoredCycleLaw, rng: np.random.Generator, size: int):
    """批量抽取初始向量，返回 (gamma, chi, v) 三个数组"""
    u = rng.random(size)
    m = np.searchsorted(_size_biased_cdf(law), u, side='right').astype(np.int64) + 1
    gamma = rng.integers(0, m)
    chi = m - gamma
    v = sample_y_given_tau(law, m, rng)
    return gamma, chi, np.atleast_1d(v)


def sample_initial_censored(law: CensoredCycleLaw, rng: np.random.Generator) -> InitialVector:
    """抽取初始向量 (γ, χ, V)

    先按 m p_m / ν 抽总长 m，再在 m 个 (i, m-i) 组合中均匀分配，
    最后按 τ = m 的条件分布抽 V。于是 P(γ=i, χ=j) = p_{i+j}/ν。
    """
    gamma, chi, v = sample_initial_arrays(law, rng, 1)
    return InitialVector(int(gamma[0]), int(chi[0]), float(v[0]))

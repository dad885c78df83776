# exact_oracle.py
import math
from dataclasses import dataclass
from typing import List, Dict, Any, Optional, Tuple, Callable, Sequence

import numpy as np
from scipy import integrate

from config import (
    CLOSED_FORM_TOL, STATIONARITY_TOL, RENEWAL_TOL, RENEWAL_LIMIT_TOL,
    CYCLE_TABLE_SIZE,
)
from cluster_laws import ClusterLaw, CensoredCycleLaw, capped_pmf, censored_law
from utils import logger, write_csv

# 截断构造的 ν 上界 ∫ ⌈v⌉ e^{-v} dv = 1/(1 - e^{-1})
NU_UPPER_BOUND = 1.0 / -math.expm1(-1.0)

# 级数截断：e^{-SERIES_TERMS} 以下的项忽略
SERIES_TERMS = 60

ORACLE_COLUMNS = ["check", "param", "lhs", "rhs", "abs_error", "tolerance", "pass"]


class OracleError(Exception):
    """无法给出可证明的截断误差界"""


@dataclass(frozen=True, eq=False)
class LatticePmf:
    """{1..K} 上的质量表，tail_bound 是表外质量的上界"""
    masses: np.ndarray
    tail_bound: float

    @classmethod
    def from_function(cls, pmf: Callable[[np.ndarray], np.ndarray], K: int,
                      tail_bound: float) -> "LatticePmf":
        masses = np.asarray(pmf(np.arange(1, K + 1)), dtype=float)
        return cls(masses, max(float(tail_bound), 0.0))

    @property
    def size(self) -> int:
        return len(self.masses)

    @property
    def total(self) -> float:
        return float(np.sum(self.masses))

    def convolve(self, other: "LatticePmf", K: Optional[int] = None) -> "LatticePmf":
        """两个正整数随机变量之和的分布，截断到 {1..K}

        值 <= K 的质量只依赖两表中 < K 的部分，所以只要两表覆盖 {1..K-1}，
        截断不引入误差；被丢弃的质量计入 tail_bound。
        """
        K = K or max(self.size, other.size)
        full = np.concatenate([[0.0], np.convolve(self.masses, other.masses)])
        kept = full[:K]
        if len(kept) < K:
            kept = np.pad(kept, (0, K - len(kept)))
        dropped = float(np.sum(full[K:]))
        return LatticePmf(kept, self.tail_bound + other.tail_bound + dropped)


def cycle_lattice(law: CensoredCycleLaw, K: int) -> LatticePmf:
    """截断周期长度 {p_j} 的格点表，p_j <= e^{-(j-1)} 给出尾部界"""
    return LatticePmf.from_function(law.p, K, law.survival(K + 1))


def censored_delay_lattice(law: CensoredCycleLaw, K: int) -> LatticePmf:
    """延迟分布 P(τ₁ = j) = P(τ >= j)/ν"""
    tail = float(np.sum(law.survival(np.arange(K + 1, K + 1 + SERIES_TERMS)))) / law.nu
    return LatticePmf.from_function(lambda j: law.survival(j) / law.nu, K, tail)


def finite_cycle_lattice(G: ClusterLaw, K: int) -> LatticePmf:
    return LatticePmf.from_function(G.pmf, K, G.tail(K + 1))


def finite_delay_lattice(G: ClusterLaw, K: int) -> LatticePmf:
    """有限均值构造的延迟分布 P(τ₁ = j) = ḡ_j / μ"""
    return LatticePmf.from_function(lambda j: G.tail(j) / G.mean, K, G.excess_sum(K + 1) / G.mean)


def renewal_mass(cycle: LatticePmf, k_max: int, delay: Optional[LatticePmf] = None) -> np.ndarray:
    """更新质量 U(k) = Σ_{r>=1} P(S_r = k)，k = 1..k_max

    对卷积幂逐项求和；S_r >= r，所以 r <= k_max 就足够。

    Args:
        cycle: 周期长度分布
        k_max: 最大的 k
        delay: 延迟（第一个周期）分布，None 表示无延迟

    Returns:
        长度为 k_max 的数组，下标 0 对应 k = 1
    """
    for name, table in (("cycle", cycle), ("delay", delay)):
        if table is None:
            continue
        if table.size < k_max and table.tail_bound > RENEWAL_TOL:
            raise OracleError(f"{name} 表只覆盖到 {table.size} < {k_max}，尾部界 {table.tail_bound:.3e} 无法保证精度")

    first = delay or cycle
    masses = np.zeros(k_max)
    covered = min(first.size, k_max)
    masses[:covered] = first.masses[:covered]
    current = LatticePmf(masses, first.tail_bound + float(np.sum(first.masses[k_max:])))
    U = np.zeros(k_max)
    for _ in range(k_max):
        if not np.any(current.masses):
            break
        U += current.masses
        current = current.convolve(cycle, k_max)
    return U


def quad_p_j(G: ClusterLaw, j: int) -> float:
    """用数值积分计算 p_j = ∫_0^∞ g_j(v) e^{-v} dv（在两段光滑区间上分别积分）"""
    j = int(j)
    if G.tail(j) == 0.0:
        return 0.0

    def integrand(v: float) -> float:
        return float(capped_pmf(G, j, v)) * math.exp(-v)

    inside, _ = integrate.quad(integrand, j - 1, j, epsabs=0.0, epsrel=1e-13, limit=200)
    beyond, _ = integrate.quad(integrand, j, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return inside + beyond


def _exp_mass(lo, hi, shift=0.0):
    """e^{shift} ∫_lo^hi e^{-v} dv，lo >= hi 时为 0"""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = np.where(hi > lo, np.exp(-(lo - shift)) - np.exp(-(hi - shift)), 0.0)
    return out


def capped_integral(G: ClusterLaw, j, a, b, shift=0.0):
    """e^{shift} ∫_a^b g_j(v) e^{-v} dv，按 (j-1, j] 与 (j, ∞) 两段解析求值"""
    jf = np.asarray(j, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    inside = _exp_mass(np.maximum(a, jf - 1.0), np.minimum(b, jf), shift)
    beyond = _exp_mass(np.maximum(a, jf), b, shift)
    return G.tail(jf) * inside + G.pmf(np.asarray(j)) * beyond


def _scaled_marginal_tail(law: CensoredCycleLaw, u) -> np.ndarray:
    """ν e^{u} P(X > u)，u > 0

    级数部分只依赖 c = ⌈u⌉：R(c) = Σ_{m>c} E(ζ ∧ m)(e-1)e^{-(m-c)}
    对每个不同的 c 只算一次，内存为 O(len(u))。
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    c = np.maximum(np.ceil(u), 1.0)
    levels, inverse = np.unique(c, return_inverse=True)
    ms = levels[:, None] + np.arange(1, SERIES_TERMS + 1)[None, :]
    series = np.sum(law.base.truncated_mean(ms.astype(np.int64)) * np.exp(-(ms - levels[:, None])), axis=1)
    series *= math.expm1(1.0)
    first = law.base.truncated_mean(c.astype(np.int64)) * -np.expm1(u - c)
    return first + np.exp(u - c) * series[np.ravel(inverse)]


def y_given_tau_density(law: CensoredCycleLaw, j, v):
    """sample_y_given_tau 所用的条件密度 f(v | τ=j)

    以 mixture_weight(j) 取 (j-1, j] 上截断的 Exp(1)，其余为 j + Exp(1)。j 与 v 可广播。
    """
    j = np.asarray(j)
    jf = j.astype(float)
    v = np.asarray(v, dtype=float)
    weight = np.asarray(law.mixture_weight(j), dtype=float)
    inside = np.where((v > jf - 1.0) & (v <= jf), np.exp(-(v - (jf - 1.0))) / -math.expm1(-1.0), 0.0)
    beyond = np.where(v > jf, np.exp(-(v - jf)), 0.0)
    out = weight * inside + (1.0 - weight) * beyond
    return out if out.ndim else float(out)


def marginal_density_x(law: CensoredCycleLaw, v):
    """X_k 的边际密度 E(ζ ∧ ⌈v⌉) e^{-v} / ν"""
    v = np.asarray(v, dtype=float)
    m = np.maximum(np.ceil(v), 1.0).astype(np.int64)
    out = np.where(v > 0, law.base.truncated_mean(m) * np.exp(-v) / law.nu, 0.0)
    return out if out.ndim else float(out)


def marginal_tail_x(law: CensoredCycleLaw, u):
    """P(X_k > u)"""
    u = np.asarray(u, dtype=float)
    flat = np.atleast_1d(u)
    out = np.ones(flat.shape)
    positive = flat > 0
    if np.any(positive):
        scaled = _scaled_marginal_tail(law, flat[positive])
        out[positive] = np.exp(-flat[positive]) * scaled / law.nu
    out = np.clip(out, 0.0, 1.0)
    return out.reshape(u.shape) if u.ndim else float(out[0])


def marginal_cdf_x(law: CensoredCycleLaw, v):
    """P(X_k <= v)"""
    tail = marginal_tail_x(law, v)
    return 1.0 - tail


def log_marginal_tail_x(law: CensoredCycleLaw, u: float) -> float:
    """ln P(X_k > u)，高水平下不下溢"""
    if u <= 0:
        return 0.0
    return -u + math.log(float(_scaled_marginal_tail(law, u)[0])) - math.log(law.nu)


def finite_level_theta(law: CensoredCycleLaw, u: float) -> float:
    """水平 u 下的有限水平极值指数：簇到达率 / 超越率 = e^{-u} / (ν P(X > u))"""
    return 1.0 / float(_scaled_marginal_tail(law, u)[0])


def conditional_cluster_law(law: CensoredCycleLaw, u: float, j):
    """P(ξ = j | ξ > 0) = e^{u} ∫_u^∞ g_j(v) e^{-v} dv（正规周期，k >= 2）"""
    out = capped_integral(law.base, j, u, np.inf, shift=u)
    return out if np.ndim(out) else float(out)


def conditional_law_distance(law: CensoredCycleLaw, u: float) -> Dict[str, float]:
    """条件簇大小分布与 G 之间的 sup 距离和全变差距离（含表外尾部）"""
    G = law.base
    J = int(math.ceil(u)) + SERIES_TERMS
    js = np.arange(1, J + 1)
    cond = np.asarray(conditional_cluster_law(law, u, js))
    g = np.asarray(G.pmf(js))
    diff = np.abs(cond - g)
    cond_rest = max(1.0 - float(np.sum(cond)), 0.0)
    g_rest = float(G.tail(J + 1))
    return {
        "sup": float(max(np.max(diff), cond_rest, float(G.pmf(J + 1)))),
        "tv": 0.5 * (float(np.sum(diff)) + cond_rest + g_rest),
        "exact_prefix_error": float(np.max(diff[:int(math.floor(u))])) if u >= 1 else 0.0,
        "bound": float(G.tail(int(math.floor(u)) + 1)),
    }


def conditional_bin_masses(law: CensoredCycleLaw, m_values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """P(Y ∈ bin | τ = m)，按采样器的两分量混合计算，形状 (len(m), bins)"""
    m = np.asarray(m_values, dtype=float)[:, None]
    lo = edges[None, :-1]
    hi = edges[None, 1:]
    weight = np.asarray(law.mixture_weight(np.asarray(m_values)), dtype=float)[:, None]
    inside = _exp_mass(np.maximum(lo, m - 1.0), np.minimum(hi, m), m - 1.0) / -math.expm1(-1.0)
    beyond = _exp_mass(np.maximum(lo, m), hi, m)
    return weight * inside + (1.0 - weight) * beyond


class StationarityGrid:
    """平稳性恒等式的两侧，在 v 的分箱上逐箱比较"""

    def __init__(self, law: CensoredCycleLaw, l_max: int = 20, j_max: int = 10,
                 edges: Optional[np.ndarray] = None):
        self.law = law
        self.l_max = l_max
        self.j_max = j_max
        self.edges = np.linspace(0.0, 30.0, 301) if edges is None else np.asarray(edges, dtype=float)
        self.m_max = l_max + j_max + CYCLE_TABLE_SIZE
        ms = np.arange(1, self.m_max + 1)
        self._p = np.asarray(law.p(ms), dtype=float)
        # joint[m-1, b] = P(Y ∈ bin b, τ = m)
        self._joint = self._p[:, None] * conditional_bin_masses(law, ms, self.edges)
        K = max(l_max, 1)
        self._renewal = renewal_mass(cycle_lattice(law, K), K, censored_delay_lattice(law, K))

    def _initial_joint(self, m: int) -> np.ndarray:
        # P(Y₁ ∈ bin, τ₁ = m) = Σ_{i>=0} P(Y ∈ bin, τ = i + m) / ν
        return np.sum(self._joint[m - 1:], axis=0) / self.law.nu

    def lhs(self, l: int, j: int) -> np.ndarray:
        out = self._initial_joint(l + j)
        for i in range(l):
            out = out + self._renewal[l - i - 1] * self._joint[i + j - 1]
        return out

    def rhs(self, j: int) -> np.ndarray:
        # Σ_{i>=0} g_{i+j}(v) = ḡ_j 1{⌈v⌉ >= j}
        lo = np.maximum(self.edges[:-1], j - 1.0)
        return self.law.base.tail(j) * _exp_mass(lo, self.edges[1:]) / self.law.nu

    def max_error(self) -> Tuple[float, Tuple[int, int]]:
        worst, where = 0.0, (1, 1)
        for l in range(1, self.l_max + 1):
            for j in range(1, self.j_max + 1):
                err = float(np.max(np.abs(self.lhs(l, j) - self.rhs(j))))
                if err > worst:
                    worst, where = err, (l, j)
        return worst, where


def stationarity_identity(law: CensoredCycleLaw, l: int, j: int,
                          edges: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """检查 P(Y_{η(l)} ∈ dv, S_{η(l)} - l = j) = P(Y₁ ∈ dv, τ₁ = j)

    Returns:
        (左侧分箱表, 右侧分箱表, 最大绝对误差)
    """
    grid = StationarityGrid(law, max(l, 1), j, edges)
    lhs = grid.lhs(l, j)
    rhs = grid.rhs(j)
    return lhs, rhs, float(np.max(np.abs(lhs - rhs)))


def _row(check: str, param: str, lhs: float, rhs: float, tolerance: float,
         passed: Optional[bool] = None) -> Dict[str, Any]:
    error = abs(float(lhs) - float(rhs))
    return {
        "check": check,
        "param": param,
        "lhs": float(lhs),
        "rhs": float(rhs),
        "abs_error": error,
        "tolerance": tolerance,
        "pass": bool(error <= tolerance) if passed is None else bool(passed),
    }


class OracleChecker:
    """对一个分布运行全部无蒙特卡洛的恒等式检查"""

    def __init__(self, G: ClusterLaw, levels: Sequence[float] = (5.0, 10.0),
                 j_max: int = 50, renewal_k: int = 200, limit_k: int = 300):
        self.G = G
        self.law = censored_law(G)
        self.levels = tuple(levels)
        self.j_max = j_max
        self.renewal_k = renewal_k
        self.limit_k = limit_k
        self.rows: List[Dict[str, Any]] = []

    def check_cycle_law(self) -> None:
        """闭式 p_j 与数值积分、概率和、ν 的两种算法与上界"""
        law = self.law
        worst = (0.0, 1, 0.0, 0.0)
        for j in range(1, self.j_max + 1):
            closed = law.p(j)
            numeric = quad_p_j(self.G, j)
            if abs(closed - numeric) >= worst[0]:
                worst = (abs(closed - numeric), j, closed, numeric)
        self.rows.append(_row("p_closed_vs_quad", f"worst j={worst[1]} of 1..{self.j_max}",
                              worst[2], worst[3], CLOSED_FORM_TOL))

        self.rows.append(_row("p_sum", f"j<={len(law.p_table)}", float(np.sum(law.p_table)), 1.0, CLOSED_FORM_TOL))

        js = np.arange(1, len(law.p_table) + 1)
        self.rows.append(_row("nu_series", "sum j*p_j", law.nu, float(np.dot(js, law.p_table)), CLOSED_FORM_TOL))
        self.rows.append(_row("nu_upper_bound", "nu<=1/(1-e^-1)", law.nu, NU_UPPER_BOUND, 0.0,
                              passed=law.nu <= NU_UPPER_BOUND + 1e-15))

        tail_ratio = float(np.max(law.p_table * np.exp(js - 1.0)))
        self.rows.append(_row("p_tail_bound", "max p_j*e^(j-1)", tail_ratio, 1.0, 0.0,
                              passed=tail_ratio <= 1.0 + 1e-12))

    def check_conditional_y(self) -> None:
        """采样用的 Y | τ=j 混合密度：积分为 1、p_j 倍等于 g_j(v)e^{-v}、对 j 混合后还原 Exp(1)"""
        law = self.law
        norm_worst = (0.0, 1, 1.0)
        shape_worst = (0.0, 1)
        for j in range(1, 21):
            if law.p(j) <= 0:
                continue
            inside, _ = integrate.quad(lambda v: y_given_tau_density(law, j, v), j - 1, j,
                                       epsabs=0.0, epsrel=1e-13, limit=200)
            beyond, _ = integrate.quad(lambda v: y_given_tau_density(law, j, v), j, np.inf,
                                       epsabs=0.0, epsrel=1e-13, limit=200)
            total = inside + beyond
            if abs(total - 1.0) >= norm_worst[0]:
                norm_worst = (abs(total - 1.0), j, total)

            v = np.linspace(j - 1.0, j + 20.0, 421)[1:]
            target = np.asarray(capped_pmf(self.G, j, v), dtype=float) * np.exp(-v)
            err = float(np.max(np.abs(law.p(j) * y_given_tau_density(law, j, v) - target)))
            if err >= shape_worst[0]:
                shape_worst = (err, j)
        self.rows.append(_row("mixture_density_norm", f"worst j={norm_worst[1]} of 1..20",
                              norm_worst[2], 1.0, CLOSED_FORM_TOL))
        self.rows.append(_row("mixture_vs_capped", f"p_j f(v|j) vs g_j(v)e^-v, worst j={shape_worst[1]}",
                              shape_worst[0], 0.0, CLOSED_FORM_TOL))

        v = np.linspace(0.1, 30.0, 300)
        ms = np.arange(1, int(np.ceil(v.max())) + 1)
        p = np.asarray(law.p(ms))[:, None]
        mixed = np.sum(p * y_given_tau_density(law, ms[:, None], v[None, :]), axis=0)
        err = float(np.max(np.abs(mixed - np.exp(-v))))
        self.rows.append(_row("marginalization", "v in (0,30]", err, 0.0, CLOSED_FORM_TOL))

    def check_marginal(self) -> None:
        """边际密度积分为 1"""
        law = self.law
        total = 0.0
        for m in range(1, 80):
            piece, _ = integrate.quad(lambda v: marginal_density_x(law, v), m - 1, m, epsabs=1e-15, epsrel=1e-13)
            total += piece
        self.rows.append(_row("marginal_density_norm", "int_0^79", total, 1.0, CLOSED_FORM_TOL))

    def check_stationarity(self) -> None:
        grid = StationarityGrid(self.law)
        error, (l, j) = grid.max_error()
        self.rows.append(_row("stationarity_identity", f"l<=20,j<=10,300 bins; worst l={l},j={j}",
                              error, 0.0, STATIONARITY_TOL))

    def check_renewal(self) -> None:
        law = self.law
        K = self.renewal_k
        U = renewal_mass(cycle_lattice(law, K), K, censored_delay_lattice(law, K))
        self.rows.append(_row("delayed_renewal_censored", f"k=1..{K}",
                              float(U[np.argmax(np.abs(U - 1.0 / law.nu))]), 1.0 / law.nu, RENEWAL_TOL))

        L = self.limit_k
        U = renewal_mass(cycle_lattice(law, L), L)
        self.rows.append(_row("renewal_limit_censored", f"k={L}", float(U[-1]), 1.0 / law.nu, RENEWAL_LIMIT_TOL))

        if self.G.finite_mean:
            U = renewal_mass(finite_cycle_lattice(self.G, K), K, finite_delay_lattice(self.G, K))
            self.rows.append(_row("delayed_renewal_finite", f"k=1..{K}",
                                  float(U[np.argmax(np.abs(U - 1.0 / self.G.mean))]), 1.0 / self.G.mean,
                                  RENEWAL_TOL))

    def check_conditional_cluster_law(self) -> None:
        for u in self.levels:
            distance = conditional_law_distance(self.law, u)
            bound = distance["bound"]
            self.rows.append(_row("conditional_exact_below_level", f"u={u:g}, j<=floor(u)",
                                  distance["exact_prefix_error"], 0.0, 1e-12))
            self.rows.append(_row("conditional_sup_bound", f"u={u:g}", distance["sup"], bound, 0.0,
                                  passed=distance["sup"] <= bound + 1e-15))
            self.rows.append(_row("conditional_tv_bound", f"u={u:g}", distance["tv"], bound, 0.0,
                                  passed=distance["tv"] <= bound + 1e-15))

    def run(self) -> List[Dict[str, Any]]:
        """执行全部检查

        Returns:
            oracle.csv 的数据行
        """
        logger.info(f"开始精确数值检查: {self.G.descriptor}")
        self.rows = []
        self.check_cycle_law()
        self.check_conditional_y()
        self.check_marginal()
        self.check_stationarity()
        self.check_renewal()
        self.check_conditional_cluster_law()
        failed = [row["check"] for row in self.rows if not row["pass"]]
        logger.info(f"精确数值检查完成，共 {len(self.rows)} 项，失败 {len(failed)} 项 {failed}")
        return self.rows


def write_oracle_csv(rows: List[Dict[str, Any]], output_path: str) -> str:
    return write_csv(output_path, ORACLE_COLUMNS, ([row[c] for c in ORACLE_COLUMNS] for row in rows))

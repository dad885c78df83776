# experiment_runner.py
import os
import math
import functools
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

from config import (
    OUTPUT_DIR, DEFAULT_N, DEFAULT_RHO, DEFAULT_LAMBDA, DEFAULT_REPS, DEFAULT_SEED,
    DEFAULT_RUNS_GAP, DEFAULT_WINDOWS, DEFAULT_THREADS, MAXIMA_N, MAXIMA_REPS, WINDOW_SAMPLES,
    BLOCK_EXCEEDANCE_RATE, P_VALUE_FLOOR, TV_TOL, KS_MARGINAL_TOL, DISPERSION_BAND,
    SHIFT_TV_TOL, SHIFT_LAGS, SHIFT_BINS, MAXIMA_BIAS, THETA_REL_TOL, THETA_ZERO_THRESHOLD,
)
from cluster_laws import ClusterLaw, CensoredCycleLaw, LawError, make_cluster_law, censored_law
from path_generator import FINITE_MEAN, CENSORED, CONSTRUCTIONS, PathStream, build_path, sample_windows
from exceedance_extractor import (
    CLUSTER_RATE, TAIL_RATE, FIXED_LEVEL, LevelSchedule, ClusterRecord,
    describe_level, resolve_level, clusters_by_cycle, clusters_by_runs, regular_clusters, count_process,
    cluster_count_process, write_clusters_csv, write_counts_csv,
)
from cluster_statistics import (
    InsufficientDataError, EmpiricalPmf, BlockCounts, empirical_pmf, tv_distance, sup_distance,
    chi_square_gof, dispersion_index, ks_exponential_gaps, ks_marginal, block_counts,
    theta_from_blocks, maxima_check, shift_invariance_tv, quantile_edges, write_pmf_csv,
)
from exact_oracle import (
    SERIES_TERMS, OracleChecker, conditional_cluster_law, conditional_law_distance,
    marginal_cdf_x, finite_level_theta, write_oracle_csv,
)
from utils import logger, make_rng, ensure_dir, write_json

THEOREM1 = "theorem1"
COMPOUND_POISSON = "compound-poisson"
REMARK1 = "remark1"
REMARK2 = "remark2"
ORACLE = "oracle"
EXPERIMENTS = (THEOREM1, COMPOUND_POISSON, REMARK1, REMARK2, ORACLE)

# 阶段随机流编号：SeedSequence([seed, r, stage])
STAGE_WINDOWS = 1
STAGE_BLOCKS = 2
STAGE_MAXIMA = 3


class ConfigError(Exception):
    """配置错误，key 为出错的配置项"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    """一次实验的完整配置"""
    experiment: str
    law: str
    construction: str = CENSORED
    n: int = DEFAULT_N
    schedule_mode: str = CLUSTER_RATE
    rho: float = DEFAULT_RHO
    lam: float = DEFAULT_LAMBDA
    level: Optional[float] = None
    reps: int = DEFAULT_REPS
    seed: int = DEFAULT_SEED
    runs_gap: int = DEFAULT_RUNS_GAP
    block_len: Optional[int] = None
    windows: int = DEFAULT_WINDOWS
    out: str = OUTPUT_DIR
    threads: int = DEFAULT_THREADS
    maxima_n: int = MAXIMA_N
    maxima_reps: int = MAXIMA_REPS
    window_samples: int = WINDOW_SAMPLES

    @property
    def schedule(self) -> LevelSchedule:
        if self.schedule_mode == FIXED_LEVEL:
            return LevelSchedule(FIXED_LEVEL, self.level)
        if self.schedule_mode == TAIL_RATE:
            return LevelSchedule(TAIL_RATE, self.lam)
        return LevelSchedule(CLUSTER_RATE, self.rho)

    def validate(self) -> "ExperimentConfig":
        """检查取值范围，出错时抛出指明配置项的 ConfigError"""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"未知的实验 {self.experiment!r}，可选: {', '.join(EXPERIMENTS)}")
        if self.construction not in CONSTRUCTIONS:
            raise ConfigError("construction", f"未知的构造 {self.construction!r}，可选: {', '.join(CONSTRUCTIONS)}")
        for key in ("n", "reps", "runs_gap", "windows", "threads", "maxima_n", "maxima_reps", "window_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"必须为正整数: {getattr(self, key)}")
        for key in ("rho", "lam"):
            if not getattr(self, key) > 0:
                raise ConfigError("lambda" if key == "lam" else key, f"必须为正: {getattr(self, key)}")
        if self.level is not None and not self.level > 0:
            raise ConfigError("level", f"必须为正: {self.level}")
        if self.block_len is not None and self.block_len < 1:
            raise ConfigError("block_len", f"必须为正整数: {self.block_len}")
        if self.seed < 0:
            raise ConfigError("seed", f"必须非负: {self.seed}")
        try:
            G = cached_law(self.law)
        except (LawError, OSError) as e:
            raise ConfigError("law", str(e))
        if self.construction == FINITE_MEAN and not G.finite_mean:
            raise ConfigError("construction", f"{self.law} 的均值为无穷，不能使用 finite-mean 构造")
        return self

    def describe(self) -> Dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data


@dataclass(frozen=True)
class CheckResult:
    """一项通过/失败检查"""
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class ExperimentReport:
    """实验报告：检查结果、统计量与输出文件"""
    experiment: str
    config: Dict[str, Any]
    checks: List[CheckResult] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failing(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def check(self, name: str, value: float, threshold: float, passed: bool, detail: str = "") -> bool:
        self.checks.append(CheckResult(name, float(value), float(threshold), bool(passed), detail))
        logger.info(f"检查 {name}: {value:.6g} (阈值 {threshold:.6g}) -> {'通过' if passed else '失败'}"
                    + (f" [{detail}]" if detail else ""))
        return passed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "checks": [asdict(check) for check in self.checks],
            "results": self.results,
            "files": [os.path.basename(path) for path in self.files],
            "passed": self.passed,
            "failing": self.failing,
        }


@functools.lru_cache(maxsize=16)
def cached_law(descriptor: str) -> ClusterLaw:
    return make_cluster_law(descriptor)


@functools.lru_cache(maxsize=16)
def cached_censored(descriptor: str) -> CensoredCycleLaw:
    return censored_law(cached_law(descriptor))


def construction_law(config: ExperimentConfig):
    """按构造返回路径生成用的分布"""
    if config.construction == CENSORED:
        return cached_censored(config.law)
    return cached_law(config.law)


def fan_out(func: Callable, config: ExperimentConfig, tasks: Sequence[Tuple], desc: str) -> List[Any]:
    """并行执行 func(config, *task)，结果按任务顺序返回

    threads == 1 时顺序执行；结果顺序与完成顺序无关。
    """
    results: List[Any] = [None] * len(tasks)
    if config.threads <= 1 or len(tasks) <= 1:
        for i, task in enumerate(tqdm(tasks, desc=desc)):
            results[i] = func(config, *task)
        return results

    with ProcessPoolExecutor(max_workers=config.threads) as executor:
        futures = {executor.submit(func, config, *task): i for i, task in enumerate(tasks)}
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc):
            results[futures[future]] = future.result()
    return results


def _theorem1_rep(config: ExperimentConfig, rep: int, u: float) -> Dict[str, Any]:
    path = build_path(construction_law(config), config.construction, config.n, make_rng(config.seed, rep))
    return {
        "cycle": clusters_by_cycle(path, u),
        "runs": clusters_by_runs(path, u, config.runs_gap),
        "counts": count_process(path, u, config.windows),
    }


def _runs_rep(config: ExperimentConfig, rep: int, u: float) -> List[ClusterRecord]:
    stream = PathStream(construction_law(config), config.construction, config.n, make_rng(config.seed, rep))
    return clusters_by_runs(stream, u, config.runs_gap)


def _marginal_rep(config: ExperimentConfig, rep: int) -> np.ndarray:
    path = build_path(construction_law(config), config.construction, config.n, make_rng(config.seed, rep))
    return path.x


def _blocks_rep(config: ExperimentConfig, rep: int, stage: int, n: int, u: float, b: int) -> BlockCounts:
    stream = PathStream(construction_law(config), config.construction, n, make_rng(config.seed, rep, stage))
    return block_counts(stream, u, b)


def _maxima_rep(config: ExperimentConfig, rep: int) -> float:
    path = build_path(construction_law(config), config.construction, config.maxima_n,
                      make_rng(config.seed, rep, STAGE_MAXIMA))
    return float(np.max(path.x))


class ExperimentRunner:
    """按实验名称执行验证并写出报告和CSV"""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.G = cached_law(config.law)
        self.law = construction_law(config)
        self.out = ensure_dir(config.out)
        self.report = ExperimentReport(config.experiment, config.describe())
        self.report.results["law"] = self.G.describe()
        if config.construction == CENSORED:
            self.report.results["censored"] = self.law.describe()

    def _path(self, name: str) -> str:
        path = os.path.join(self.out, name)
        self.report.files.append(path)
        return path

    def _level(self, n: int, schedule: Optional[LevelSchedule] = None) -> float:
        return resolve_level(n, schedule or self.config.schedule, self.law, self.config.construction)

    def _theta_target(self, u: float) -> float:
        """有限均值构造 θ = 1/μ；截断构造用水平 u 下的精确有限水平值"""
        if self.config.construction == FINITE_MEAN:
            return 1.0 / self.G.mean
        return finite_level_theta(self.law, u)

    def _chi_square(self, name: str, pmf: EmpiricalPmf, target) -> None:
        try:
            result = chi_square_gof(pmf, target)
        except InsufficientDataError as e:
            logger.warning(f"卡方检验退化，按通过处理: {e}")
            self.report.check(name, 1.0, P_VALUE_FLOOR, True, f"degenerate: {e}")
            return
        self.report.results[name] = asdict(result)
        self.report.check(name, result.p_value, P_VALUE_FLOOR, result.p_value > P_VALUE_FLOOR,
                          f"statistic={result.statistic:.4f}, dof={result.dof}")

    def run_theorem1(self) -> None:
        """完整周期簇的大小分布与 G（或精确条件分布）比较"""
        config = self.config
        u = self._level(config.n)
        self.report.results["level"] = describe_level(config.n, config.schedule, u)
        outputs = fan_out(_theorem1_rep, config, [(rep, u) for rep in range(config.reps)], "theorem1")

        cycle = [(rep, c) for rep, out in enumerate(outputs) for c in regular_clusters(out["cycle"])]
        runs = [(rep, c) for rep, out in enumerate(outputs) for c in out["runs"]]
        write_clusters_csv(cycle + runs, self._path("clusters.csv"))
        write_counts_csv([(rep, out["counts"]) for rep, out in enumerate(outputs)], self._path("counts.csv"))

        if not cycle:
            self.report.check("cluster_count", 0, 1, False, "没有完整的正规周期簇")
            return
        pmf = empirical_pmf(c for _, c in cycle)
        self.report.results["clusters"] = pmf.total
        self.report.results["pmf"] = pmf.as_dict()

        if config.construction == FINITE_MEAN:
            target = self.G
            tv = tv_distance(pmf, self.G)
            self.report.check("tv_to_G", tv, TV_TOL, tv < TV_TOL)
            self._chi_square("chi_square_vs_G", pmf, self.G)
        else:
            J = int(math.ceil(u)) + SERIES_TERMS
            js = np.arange(1, J + 1)
            target = dict(zip(js.tolist(), np.asarray(conditional_cluster_law(self.law, u, js)).tolist()))
            distance = conditional_law_distance(self.law, u)
            bound = distance["bound"]
            se = float(np.max(pmf.std_errors()))
            sup = sup_distance(pmf, self.G)
            self.report.results["conditional_law"] = distance
            self.report.check("sup_to_G", sup, bound + 3 * se, sup <= bound + 3 * se,
                              f"bound={bound:.6g}, se={se:.3g}")
            self.report.check("oracle_sup_bound", distance["sup"], bound, distance["sup"] <= bound + 1e-15)
            self._chi_square("chi_square_vs_conditional", pmf, target)
        write_pmf_csv(pmf, target, self._path("pmf.csv"))

        if runs:
            runs_pmf = empirical_pmf(c for _, c in runs)
            self.report.results["runs"] = {
                "clusters": runs_pmf.total,
                "tv_runs_vs_cycle": tv_distance(runs_pmf, pmf),
                "mean_size_runs": float(np.mean([c.size for _, c in runs])),
                "mean_size_cycle": float(np.mean([c.size for _, c in cycle])),
            }

    def run_compound_poisson(self) -> None:
        """每次重复的簇计数离散指数与簇间距的指数性"""
        config = self.config
        u = self._level(config.n)
        self.report.results["level"] = describe_level(config.n, config.schedule, u)
        outputs = fan_out(_runs_rep, config, [(rep, u) for rep in range(config.reps)], "compound-poisson")

        write_clusters_csv([(rep, c) for rep, records in enumerate(outputs) for c in records],
                           self._path("clusters.csv"))
        processes = [cluster_count_process(records, config.n, config.windows, u) for records in outputs]
        write_counts_csv(list(enumerate(processes)), self._path("counts.csv"))

        totals = [process.total for process in processes]
        self.report.results["mean_clusters"] = float(np.mean(totals))
        try:
            d = dispersion_index(totals)
            low, high = DISPERSION_BAND
            self.report.check("dispersion_index", d, high, low <= d <= high, f"band=[{low}, {high}]")
        except InsufficientDataError as e:
            self.report.check("dispersion_index", float('nan'), DISPERSION_BAND[1], False, str(e))

        try:
            stat, p = ks_exponential_gaps([[c.start for c in records] for records in outputs], config.n,
                                          rate=float(np.mean(totals)))
            self.report.check("ks_gaps_exponential", p, P_VALUE_FLOOR, p > P_VALUE_FLOOR, f"D={stat:.4f}")
        except InsufficientDataError as e:
            self.report.check("ks_gaps_exponential", float('nan'), P_VALUE_FLOOR, False, str(e))

        sizes = [c.size for records in outputs for c in records]
        if sizes:
            pmf = empirical_pmf(sizes)
            self.report.results["pmf"] = pmf.as_dict()
            write_pmf_csv(pmf, self.G, self._path("pmf.csv"))

    def run_remark1(self) -> None:
        """边际分布与平移不变性"""
        config = self.config
        outputs = fan_out(_marginal_rep, config, [(rep,) for rep in range(config.reps)], "remark1")
        x = np.concatenate(outputs)
        cdf = stats.expon.cdf if config.construction == FINITE_MEAN else functools.partial(marginal_cdf_x, self.law)
        stat, p = ks_marginal(x, cdf)
        self.report.results["marginal_samples"] = len(x)
        self.report.check("ks_marginal", stat, KS_MARGINAL_TOL, stat < KS_MARGINAL_TOL, f"p={p:.4g}")

        length = max(SHIFT_LAGS) + 2
        windows = sample_windows(self.law, config.construction, length, config.window_samples,
                                 make_rng(config.seed, 0, STAGE_WINDOWS))
        edges = quantile_edges(windows[:, 0], SHIFT_BINS)
        for lag in SHIFT_LAGS:
            tv = shift_invariance_tv(windows, lag, SHIFT_BINS, edges)
            self.report.check(f"shift_tv_lag_{lag}", tv, SHIFT_TV_TOL, tv < SHIFT_TV_TOL)

    def run_remark2(self) -> None:
        """块方法极值指数和最大值分布"""
        config = self.config
        estimates = []
        for i, n in enumerate((config.n // 100, config.n // 10, config.n)):
            b = config.block_len or max(int(math.sqrt(n)), 1)
            u = self._level(b, LevelSchedule(TAIL_RATE, BLOCK_EXCEEDANCE_RATE))
            stage = STAGE_BLOCKS * 10 + i
            counts = fan_out(_blocks_rep, config, [(rep, stage, n, u, b) for rep in range(config.reps)],
                             f"remark2 n={n}")
            total = BlockCounts(b)
            for c in counts:
                total = total.merge(c)
            target = self._theta_target(u)
            entry = {"n": n, "block_length": b, "level": u, "theta_target": target}
            try:
                estimate = theta_from_blocks(total, u)
            except InsufficientDataError as e:
                self.report.check(f"theta_n_{n}", float('nan'), target, False, str(e))
                estimates.append(entry)
                continue
            entry.update(asdict(estimate))
            estimates.append(entry)
            tol = THETA_REL_TOL * target
            self.report.check(f"theta_n_{n}", estimate.theta, target,
                              abs(estimate.theta - target) <= tol, f"tol={tol:.4g}")
        self.report.results["theta"] = estimates

        if not self.G.finite_mean:
            thetas = [e.get("theta") for e in estimates]
            if all(t is not None for t in thetas):
                decreasing = thetas[0] > thetas[-1]
                self.report.check("theta_decreasing", thetas[-1], thetas[0], decreasing)
                self.report.results["below_zero_threshold"] = thetas[-1] < THETA_ZERO_THRESHOLD

        u = self._level(config.maxima_n, LevelSchedule(TAIL_RATE, config.lam))
        maxima = fan_out(_maxima_rep, config, [(rep,) for rep in range(config.maxima_reps)], "remark2 maxima")
        check = maxima_check(maxima, u, config.lam, self._theta_target(u))
        self.report.results["maxima"] = dict(asdict(check), level=u)
        limit = MAXIMA_BIAS + 3 * check.standard_error
        self.report.check("maxima", abs(check.bias), limit, abs(check.bias) < limit,
                          f"empirical={check.empirical:.4f}, predicted={check.predicted:.4f}")

    def run_oracle(self) -> None:
        """全部精确数值检查"""
        rows = OracleChecker(self.G).run()
        write_oracle_csv(rows, self._path("oracle.csv"))
        for row in rows:
            self.report.check(f"{row['check']}[{row['param']}]", row["abs_error"], row["tolerance"], row["pass"])

    def run(self) -> ExperimentReport:
        logger.info(f"开始实验 {self.config.experiment}: {self.config.law}, 构造={self.config.construction}")
        {
            THEOREM1: self.run_theorem1,
            COMPOUND_POISSON: self.run_compound_poisson,
            REMARK1: self.run_remark1,
            REMARK2: self.run_remark2,
            ORACLE: self.run_oracle,
        }[self.config.experiment]()
        report_path = os.path.join(self.out, "report.json")
        self.report.files.append(report_path)
        write_json(report_path, self.report.to_dict())
        logger.info(f"实验完成: {len(self.report.checks)} 项检查，失败 {len(self.report.failing)} 项")
        return self.report


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """执行实验并写出 report.json 及CSV

    Args:
        config: 实验配置

    Returns:
        ExperimentReport，exit_status 为 0 表示全部检查通过
    """
    return ExperimentRunner(config).run()

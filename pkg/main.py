# main.py
import sys
import argparse
from typing import Any, Dict, List, Optional

from cluster_laws import LawError, ConstructionError
from exceedance_extractor import CLUSTER_RATE, TAIL_RATE, FIXED_LEVEL, LEVEL_MODES, LevelError
from experiment_runner import (
    EXPERIMENTS, ConfigError, ExperimentConfig, cached_law, run_experiment,
)
from path_generator import FINITE_MEAN, CENSORED, CONSTRUCTIONS
from utils import logger, read_key_value_file

# 配置项 -> (ExperimentConfig 字段, 类型)
CONFIG_KEYS = {
    "experiment": ("experiment", str),
    "law": ("law", str),
    "construction": ("construction", str),
    "n": ("n", int),
    "schedule": ("schedule_mode", str),
    "rho": ("rho", float),
    "lambda": ("lam", float),
    "level": ("level", float),
    "reps": ("reps", int),
    "seed": ("seed", int),
    "runs_gap": ("runs_gap", int),
    "block_len": ("block_len", int),
    "windows": ("windows", int),
    "out": ("out", str),
    "threads": ("threads", int),
    "maxima_n": ("maxima_n", int),
    "maxima_reps": ("maxima_reps", int),
    "window_samples": ("window_samples", int),
}


def parse_arguments(argv: Optional[List[str]] = None):
    """解析命令行参数"""
    parser = argparse.ArgumentParser(description="cluster-sim - 再生平稳序列的超越簇大小分布模拟与验证")

    parser.add_argument("--config", "-c", type=str, default=None, help="key = value 形式的配置文件")
    parser.add_argument("--experiment", "-e", type=str, default=None, choices=EXPERIMENTS, help="实验名称")
    parser.add_argument("--law", "-l", type=str, default=None,
                        help="簇大小分布: delta:k, geometric:p, zeta:s, custom:<path>")
    parser.add_argument("--construction", type=str, default=None, choices=CONSTRUCTIONS,
                        help="构造方式，默认有限均值时用 finite-mean，否则用 censored")
    parser.add_argument("--n", type=str, default=None, help="路径长度")
    parser.add_argument("--schedule", type=str, default=None, choices=LEVEL_MODES, help="水平方案")
    parser.add_argument("--rho", type=str, default=None, help="每条路径期望簇数（cluster-rate）")
    parser.add_argument("--lambda", dest="lambda_", type=str, default=None, help="n P(X > u) 的目标值（tail-rate）")
    parser.add_argument("--level", type=str, default=None, help="固定水平 u")
    parser.add_argument("--reps", type=str, default=None, help="重复次数")
    parser.add_argument("--seed", type=str, default=None, help="基础种子")
    parser.add_argument("--runs-gap", type=str, default=None, help="游程去簇的间隔 r")
    parser.add_argument("--block-len", type=str, default=None, help="块方法的块长，默认 sqrt(n)")
    parser.add_argument("--windows", type=str, default=None, help="计数过程的窗口数")
    parser.add_argument("--out", "-o", type=str, default=None, help="输出目录")
    parser.add_argument("--threads", "-t", type=str, default=None, help="并行进程数")
    parser.add_argument("--maxima-n", type=str, default=None, help="最大值检查的路径长度")
    parser.add_argument("--maxima-reps", type=str, default=None, help="最大值检查的重复次数")
    parser.add_argument("--window-samples", type=str, default=None, help="平移不变性检查的窗口数")

    return parser.parse_args(argv)


def _convert(key: str, raw: Any, kind: type) -> Any:
    """把字符串转换为配置项类型，整数允许 1e6 这样的写法"""
    if not isinstance(raw, str):
        return raw
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"类型错误，需要 {kind.__name__}: {raw!r}")
    return raw


def parse_config(config_file: Optional[str] = None, argv: Optional[List[str]] = None) -> ExperimentConfig:
    """合并配置文件与命令行参数，命令行优先

    Args:
        config_file: 配置文件路径（也可以用 --config 给出）
        argv: 命令行参数列表

    Returns:
        校验后的 ExperimentConfig
    """
    args = parse_arguments(argv or [])
    config_file = args.config or config_file

    values: Dict[str, Any] = {}
    if config_file:
        try:
            raw = read_key_value_file(config_file)
        except (OSError, ValueError) as e:
            raise ConfigError("config", str(e))
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ConfigError(key, "未知的配置项")
            values[key] = value

    for key in CONFIG_KEYS:
        flag = getattr(args, "lambda_" if key == "lambda" else key, None)
        if flag is not None:
            values[key] = flag

    for key in ("experiment", "law"):
        if not values.get(key):
            raise ConfigError(key, "缺少必填配置项")

    fields = {CONFIG_KEYS[key][0]: _convert(key, value, CONFIG_KEYS[key][1]) for key, value in values.items()}

    if "schedule_mode" not in fields:
        if "level" in fields:
            fields["schedule_mode"] = FIXED_LEVEL
        elif "lam" in fields and "rho" not in fields:
            fields["schedule_mode"] = TAIL_RATE
        else:
            fields["schedule_mode"] = CLUSTER_RATE
    if fields["schedule_mode"] not in LEVEL_MODES:
        raise ConfigError("schedule", f"未知的水平方案 {fields['schedule_mode']!r}")
    if fields["schedule_mode"] == FIXED_LEVEL and fields.get("level") is None:
        raise ConfigError("level", "fixed 水平方案需要 level")

    if "construction" not in fields:
        try:
            finite = cached_law(fields["law"]).finite_mean
        except (LawError, OSError) as e:
            raise ConfigError("law", str(e))
        fields["construction"] = FINITE_MEAN if finite else CENSORED

    return ExperimentConfig(**fields).validate()


def main(argv: Optional[List[str]] = None):
    """主函数"""
    try:
        config = parse_config(argv=sys.argv[1:] if argv is None else argv)
    except (ConfigError, LawError, ConstructionError) as e:
        logger.error(f"配置错误: {e}")
        sys.exit(2)

    try:
        report = run_experiment(config)
    except (LawError, ConstructionError, LevelError) as e:
        logger.error(f"配置错误: {e}")
        sys.exit(2)
    except Exception as e:
        logger.error(f"执行过程中发生错误: {str(e)}")
        sys.exit(1)

    if not report.passed:
        logger.error(f"检查失败: {', '.join(report.failing)}")
        sys.exit(1)

    logger.info("全部检查通过")
    sys.exit(0)


if __name__ == "__main__":
    main()

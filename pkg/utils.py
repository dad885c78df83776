# utils.py
import os
import csv
import json
import math
import logging
from typing import List, Dict, Any, Iterable, Sequence

import numpy as np

from config import LOG_LEVEL, LOG_FILE

# 配置日志
_handlers: List[logging.Handler] = [logging.StreamHandler()]
if LOG_FILE:
    _handlers.append(logging.FileHandler(LOG_FILE))

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=_handlers
)

logger = logging.getLogger('cluster_sim')


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """根据基础种子和流编号构造随机数生成器

    第 r 次重复使用 SeedSequence([seed, r])，阶段专用的流再追加阶段编号。
    同一组 (seed, stream) 总是得到同一随机流，与执行顺序无关。

    Args:
        seed: 基础种子
        stream: 重复编号、阶段编号等

    Returns:
        numpy 随机数生成器
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))


def ensure_dir(path: str) -> str:
    """确保目录存在"""
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(output_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """写出CSV文件

    Args:
        output_path: 输出路径
        header: 列名
        rows: 数据行

    Returns:
        写出的文件路径
    """
    with open(output_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])

    logger.info(f"CSV已保存到: {output_path}")
    return output_path


def format_value(value: Any) -> Any:
    """统一浮点数的文本格式，保证输出可逐位复现"""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def to_jsonable(value: Any) -> Any:
    """把 numpy 类型和非有限浮点数转换为 JSON 可表示的值"""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def write_json(output_path: str, data: Dict[str, Any]) -> str:
    """保存JSON报告（键排序，不含时间戳）"""
    with open(output_path, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(data), f, ensure_ascii=False, indent=2, sort_keys=True)

    logger.info(f"报告已保存到: {output_path}")
    return output_path


def read_key_value_file(file_path: str) -> Dict[str, str]:
    """读取 `key = value` 形式的配置文件，忽略空行和 # 注释

    Args:
        file_path: 配置文件路径

    Returns:
        原始字符串键值对
    """
    values = {}
    with open(file_path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f"{file_path}:{line_no}: 缺少 '=': {raw.strip()}")
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()
    return values


def binomial_se(p: float, n: int) -> float:
    """二项比例的标准误"""
    if n <= 0:
        return float('nan')
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)



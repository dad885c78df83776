# config.py
import os
from dotenv import load_dotenv

# 加载.env文件中的环境变量
load_dotenv()

# 文件路径配置
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "output")  # 输出报告目录

# 日志配置
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LOG_FILE", "")  # 为空时不写日志文件

# 实验默认参数
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "1"))
DEFAULT_REPS = int(os.getenv("DEFAULT_REPS", "100"))
DEFAULT_N = int(os.getenv("DEFAULT_N", "100000"))
DEFAULT_RHO = float(os.getenv("DEFAULT_RHO", "5"))
DEFAULT_LAMBDA = float(os.getenv("DEFAULT_LAMBDA", "1"))
DEFAULT_RUNS_GAP = int(os.getenv("DEFAULT_RUNS_GAP", "1"))
DEFAULT_WINDOWS = int(os.getenv("DEFAULT_WINDOWS", "10"))
DEFAULT_THREADS = int(os.getenv("DEFAULT_THREADS", "1"))

# 路径生成：每批生成的周期数
CHUNK_CYCLES = int(os.getenv("CHUNK_CYCLES", "65536"))

# remark2 实验：最大值检查的路径长度与重复次数、每块期望超越数
MAXIMA_N = int(os.getenv("MAXIMA_N", "10000"))
MAXIMA_REPS = int(os.getenv("MAXIMA_REPS", "1000"))
BLOCK_EXCEEDANCE_RATE = float(os.getenv("BLOCK_EXCEEDANCE_RATE", "1.0"))

# remark1 实验：平移不变性检查使用的短窗口数
WINDOW_SAMPLES = int(os.getenv("WINDOW_SAMPLES", "500000"))

# 分布表配置
LAW_TABLE_MAX = 100000  # 解析族的显式表最大长度
CYCLE_TABLE_SIZE = 64  # p_j 表长度，e^{-63} 之后的质量可忽略
ZETA_VALUE_CAP = 2 ** 62  # 逆变换采样的上限（int64 安全）

# 数值容差
PMF_SUM_TOL = 1e-12
CUSTOM_SUM_TOL = 1e-9
CLOSED_FORM_TOL = 1e-10
STATIONARITY_TOL = 1e-8
RENEWAL_TOL = 1e-9
RENEWAL_LIMIT_TOL = 1e-6

# 统计检验阈值
P_VALUE_FLOOR = 1e-3
TV_TOL = 0.03
KS_MARGINAL_TOL = 0.005
DISPERSION_BAND = (0.9, 1.1)
SHIFT_TV_TOL = 0.01
SHIFT_LAGS = (1, 7, 50)
SHIFT_BINS = 5
MAXIMA_BIAS = 0.02
THETA_REL_TOL = 0.1
THETA_ZERO_THRESHOLD = 0.1
MIN_EXPECTED_CELL = 5
MIN_DISPERSION_SAMPLES = 30
MIN_GAPS = 50

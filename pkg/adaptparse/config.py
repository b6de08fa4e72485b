"""
adaptparse 配置文件 - 统一管理所有默认配置

其他模块从这里导入常量，不要在别处重复定义。
环境变量优先（支持项目根目录下的 .env 文件）。
"""
import os

from dotenv import load_dotenv

load_dotenv()

# ========== 运行环境 ==========
LOG_LEVEL = os.getenv("ADAPT_PARSE_LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# 覆盖配置文件中的 seed（见 get_seed_override）
SEED_ENV_VAR = "ADAPT_PARSE_SEED"

# ========== 张量引擎 ==========
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2
ADAM_EPS = 1e-8

# 梯度检查
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_EPSILON = 1e-3
GRADCHECK_MIN_COORDS = 50

# ========== 网络初始化 ==========
INIT_STD = 0.02
INIT_SCHEMES = ("normal", "he")

# ========== 训练默认值（桌面规模）==========
DEFAULT_SEED = 0
DEFAULT_ITERATIONS = 600
DEFAULT_K_C = 5
DEFAULT_BATCH_SIZE = 4
DEFAULT_LR_MAIN = 1e-2
DEFAULT_LR_FEATURE_ADV = 1e-3
DEFAULT_LR_LABEL_ADV = 1e-3
DEFAULT_ADAM_BETAS = (0.5, 0.999)
DEFAULT_SGD_MOMENTUM = 0.9
DEFAULT_SGD_WEIGHT_DECAY = 0.0005
DEFAULT_LOG_INTERVAL = 50

# ========== 数据集 ==========
DEFAULT_COUNTS = (500, 500, 100)  # 源域 / 目标域训练 / 目标域测试
MANIFEST_NAME = "manifest.tsv"
IMAGES_DIR = "images"
LABELS_DIR = "labels"
HELDOUT_DIR = "heldout_labels"

# ========== 运行目录 ==========
AUDIT_LOG_NAME = "audit.log"
METRICS_CSV_NAME = "metrics.csv"
RUN_MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT_NAME = "final.ckpt"

METRIC_CSV_HEADER = ["iter", "pixel_accuracy", "foreground_accuracy", "avg_precision", "avg_recall", "avg_f1"]

# ========== 可视化调色板（4 类）==========
PALETTE = [
    (0, 0, 0),        # 背景
    (230, 60, 60),    # 头部
    (60, 180, 75),    # 上身
    (70, 110, 230),   # 下身
]


def get_seed_override():
    """读取 ADAPT_PARSE_SEED，未设置返回 None"""
    value = os.getenv(SEED_ENV_VAR)
    if value is None or value.strip() == "":
        return None
    return int(value)

"""
eval 子命令 - 用 checkpoint 中的 E、L 评估一个带标签的数据集
"""
import logging
from pathlib import Path

from adaptparse.engine.tensor_io import atomic_write_text
from adaptparse.services.dataset_service import load_dataset
from adaptparse.services.eval_service import evaluate_dataset
from adaptparse.services.metric_service import report_to_csv_row, report_to_json, rows_to_csv
from adaptparse.services.train_service import load_networks

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="评估 checkpoint", allow_abbrev=False)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True, help="带标签的数据集目录")
    parser.add_argument("--out", help="报告输出目录；缺省只打印 JSON")
    parser.set_defaults(handler=run, accepts_overrides=False)


def run(args, overrides) -> int:
    nets, train_config = load_networks(args.checkpoint)
    dataset = load_dataset(args.data, image_hw=train_config.profile.input_hw)
    report = evaluate_dataset(nets["E"], nets["L"], dataset)

    document = report_to_json(report)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / REPORT_JSON, document)
        atomic_write_text(out / REPORT_CSV, rows_to_csv([report_to_csv_row(report)]))
        logger.info(f"报告已写入 {out}")
    print(document, end="")
    return 0

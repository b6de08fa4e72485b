"""
adaptparse - 命令行入口

子命令：gen-data / train / eval / infer / gradcheck / report
退出码：0 成功，1 用法错误，2 数值失败，3 I/O 失败
"""
import argparse
import logging
import sys
from typing import List, Optional

from adaptparse import __version__, config
from adaptparse.commands import evaluate, gen_data, gradcheck, infer, report, train
from adaptparse.errors import AdaptParseError, UsageError
from adaptparse.services.config_service import parse_override_args

logger = logging.getLogger(__name__)

COMMANDS = [gen_data, train, evaluate, infer, gradcheck, report]


class CommandParser(argparse.ArgumentParser):
    """用法错误抛 UsageError（退出码 1），不直接 sys.exit(2)；子命令解析器沿用该类"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(
        prog="adaptparse",
        description="桌面规模的对抗式跨域分割适配",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="日志级别（默认取 ADAPT_PARSE_LOG_LEVEL）")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=config.LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    command = "adaptparse"
    try:
        args, extra = parser.parse_known_args(argv)
        command = args.command

        _configure_logging(args.log_level)

        if extra and not args.accepts_overrides:
            raise UsageError(f"{args.command} 不接受参数 {extra}")
        overrides = parse_override_args(extra)
        return args.handler(args, overrides)
    except AdaptParseError as e:
        _configure_logging(config.LOG_LEVEL)
        logger.error(f"{command} 失败: {e.detail}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{command} I/O 失败: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())

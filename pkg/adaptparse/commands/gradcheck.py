"""
gradcheck 子命令 - 对五个网络逐一做 64 位有限差分梯度检查
"""
import logging

from adaptparse.config import GRADCHECK_MIN_COORDS, GRADCHECK_TOLERANCE
from adaptparse.errors import NumericalError
from adaptparse.profiles import get_all_profile_keys, get_profile
from adaptparse.services.gradcheck_service import check_all, format_reports

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gradcheck", help="整网梯度检查", allow_abbrev=False)
    parser.add_argument("--profile", default="desk", choices=get_all_profile_keys())
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    parser.add_argument("--min-coords", type=int, default=GRADCHECK_MIN_COORDS, help="每个参数张量抽查的坐标数")
    parser.add_argument("--inject-fault", action="store_true", help="把解析梯度放大 1%%，用于验证检查本身")
    parser.set_defaults(handler=run, accepts_overrides=False)


def run(args, overrides) -> int:
    profile = get_profile(args.profile)
    reports = check_all(
        profile, seed=args.seed, inject_fault=args.inject_fault,
        tolerance=args.tolerance, min_coords=args.min_coords,
    )
    print(format_reports(reports), end="")
    failed = [tag for tag, r in reports.items() if not r.passed]
    if failed:
        raise NumericalError(f"梯度检查未通过: {failed}")
    return 0

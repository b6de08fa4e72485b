"""
infer 子命令 - 对单张 TNSR 图像推理，输出 u8 类别图（可选 BMP 可视化）

--assert-purity：记录推理期间执行的全部原语，出现 C / A_f / A_l 的原语即失败。
"""
import logging

import numpy as np

from adaptparse.engine.tensor import trace_ops
from adaptparse.engine.tensor_io import atomic_write_bytes, tensor_read, tensor_write
from adaptparse.errors import PurityError, ShapeError
from adaptparse.services.eval_service import label_map_to_bmp, predict_labels
from adaptparse.services.train_service import load_networks

logger = logging.getLogger(__name__)

TRAINING_ONLY_TAGS = {"C", "A_f", "A_l"}


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", help="单张图像推理", allow_abbrev=False)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--image", required=True, help="f32 3×H×W 的 TNSR 文件")
    parser.add_argument("--out", required=True, help="输出类别图（u8 H×W TNSR）")
    parser.add_argument("--vis", help="可选的 BMP 可视化输出")
    parser.add_argument("--assert-purity", action="store_true", help="断言推理只经过 E 与 L")
    parser.set_defaults(handler=run, accepts_overrides=False)


def run(args, overrides) -> int:
    nets, train_config = load_networks(args.checkpoint)
    profile = train_config.profile
    E, L = nets["E"].eval(), nets["L"].eval()

    image = tensor_read(args.image).data
    expected = (3,) + tuple(profile.input_hw)
    if image.shape != expected:
        raise ShapeError(f"图像 dims {image.shape} 与 checkpoint 不符，expected dims {expected}")

    with trace_ops() as trace:
        labels = predict_labels(E, L, image[None].astype(np.float32))[0]
    stray = trace.tags() & TRAINING_ONLY_TAGS
    logger.info(f"推理执行 {len(trace)} 个原语，网络标签 {sorted(t for t in trace.tags() if t)}")
    if args.assert_purity and stray:
        raise PurityError(f"推理路径出现了不该参与的网络: {sorted(stray)}")

    tensor_write(labels, args.out)
    if args.vis:
        atomic_write_bytes(args.vis, label_map_to_bmp(labels, profile.num_classes))
    print(f"类别图已写入 {args.out}（{labels.shape[0]}×{labels.shape[1]}）")
    return 0

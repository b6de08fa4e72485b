"""
数据集目录读写

    manifest.tsv          每行 <id>\t<图像文件>\t<标签文件>\t<domain>，标签被扣留时第三列为空
    images/<id>.tsr       f32 3×H×W
    labels/<id>.tsr       u8 H×W
    heldout_labels/<id>.tsr  目标域训练集被扣留的标签（manifest 不引用，仅 target_only 模式读取）
"""
import logging
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from adaptparse import config
from adaptparse.engine.tensor_io import atomic_write_text, tensor_read, tensor_write
from adaptparse.errors import StorageError, UsageError
from adaptparse.models.schemas import DomainSample

logger = logging.getLogger(__name__)


class Dataset:
    """已加载到内存的数据集，迭代顺序即 manifest 顺序"""

    def __init__(self, root: Path, samples: List[DomainSample]):
        self.root = root
        self.samples = samples
        self.ids = [s.sample_id for s in samples]
        self.images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, 0, 0), np.float32)
        self.has_labels = bool(samples) and all(s.labels is not None for s in samples)
        self.labels: Optional[np.ndarray] = np.stack([s.labels for s in samples]) if self.has_labels else None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[DomainSample]:
        return iter(self.samples)

    def __repr__(self) -> str:
        return f"Dataset({self.root}, n={len(self)}, labels={self.has_labels})"

    @property
    def image_hw(self):
        return tuple(self.images.shape[2:])


def write_dataset(
    samples: Sequence[DomainSample],
    root: Union[str, Path],
    heldout: Optional[Sequence[DomainSample]] = None,
) -> Path:
    """
    写数据集目录；manifest 最后写，作为目录完整的标志

    Args:
        samples: 样本（labels 为 None 的样本在 manifest 中标签列为空）
        heldout: 需要另存到 heldout_labels/ 的样本标签
    """
    root = Path(root)
    lines = []
    for s in samples:
        image_file = f"{config.IMAGES_DIR}/{s.sample_id}.tsr"
        tensor_write(s.image.astype(np.float32), root / image_file)
        label_file = ""
        if s.labels is not None:
            label_file = f"{config.LABELS_DIR}/{s.sample_id}.tsr"
            tensor_write(s.labels.astype(np.uint8), root / label_file)
        lines.append(f"{s.sample_id}\t{image_file}\t{label_file}\t{s.domain}")
    for s in heldout or []:
        if s.labels is None:
            raise UsageError(f"heldout 样本 {s.sample_id} 没有标签")
        tensor_write(s.labels.astype(np.uint8), root / config.HELDOUT_DIR / f"{s.sample_id}.tsr")
    atomic_write_text(root / config.MANIFEST_NAME, "\n".join(lines) + "\n")
    logger.info(f"数据集已写入: {root}（{len(lines)} 个样本）")
    return root


def read_manifest(root: Path) -> List[List[str]]:
    path = root / config.MANIFEST_NAME
    if not path.exists():
        raise StorageError(f"manifest 不存在: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise StorageError(f"{path}:{lineno}: manifest 每行需要 4 列，收到 {len(fields)}")
        rows.append(fields)
    return rows


def _read_sample_file(root: Path, sample_id: str, rel: str) -> np.ndarray:
    path = root / rel
    if not path.exists():
        raise StorageError(f"missing sample {sample_id}: 文件 {path} 不存在")
    return tensor_read(path).data


def load_dataset(
    root: Union[str, Path],
    image_hw: Optional[Sequence[int]] = None,
    use_heldout: bool = False,
) -> Dataset:
    """
    读取数据集并校验形状

    Args:
        image_hw: 期望的 (H, W)；缺省取第一个样本的尺寸，所有样本必须一致
        use_heldout: 标签列为空时从 heldout_labels/ 读取（target_only 模式）
    """
    root = Path(root)
    rows = read_manifest(root)
    if not rows:
        raise StorageError(f"{root}: manifest 为空")
    expected = tuple(image_hw) if image_hw is not None else None
    samples: List[DomainSample] = []
    for sample_id, image_file, label_file, domain in rows:
        if domain not in ("source", "target"):
            raise StorageError(f"sample {sample_id}: 未知 domain {domain!r}")
        image = _read_sample_file(root, sample_id, image_file)
        if image.dtype != np.float32 or image.ndim != 3 or image.shape[0] != 3:
            raise StorageError(f"shape mismatch: sample {sample_id} 图像需为 f32 3×H×W，收到 {image.dtype} {image.shape}")
        if expected is None:
            expected = image.shape[1:]
        if image.shape[1:] != expected:
            raise StorageError(f"shape mismatch: sample {sample_id} 图像 {image.shape[1:]}，期望 {expected}")

        labels = None
        if label_file:
            labels = _read_sample_file(root, sample_id, label_file)
        elif use_heldout:
            labels = _read_sample_file(root, sample_id, f"{config.HELDOUT_DIR}/{sample_id}.tsr")
        if labels is not None and (labels.dtype != np.uint8 or labels.shape != expected):
            raise StorageError(
                f"shape mismatch: sample {sample_id} 标签需为 u8 {expected}，收到 {labels.dtype} {labels.shape}"
            )
        samples.append(DomainSample(sample_id=sample_id, image=image, labels=labels, domain=domain))

    logger.info(f"数据集已加载: {root}（{len(samples)} 个样本）")
    return Dataset(root, samples)

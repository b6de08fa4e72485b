"""
共享 fixture：桌面规模预设与一套很小的合成数据集
"""
import numpy as np
import pytest

from adaptparse.models.schemas import SceneParams, TrainConfig
from adaptparse.profiles import get_profile, get_shift
from adaptparse.services.dataset_service import load_dataset, write_dataset
from adaptparse.services.synth_service import generate_domain


@pytest.fixture
def desk_profile():
    return get_profile("desk")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dirs(tmp_path_factory):
    """6 个源域、6 个目标域训练、4 个目标域测试样本写到磁盘"""
    root = tmp_path_factory.mktemp("tiny")
    scene = SceneParams(seed=5)
    shift = get_shift("compound")

    source = generate_domain(scene, get_shift("identity"), 6, "source", start_index=0)
    target = generate_domain(scene, shift, 6, "target", start_index=100)
    test = generate_domain(scene, shift, 4, "target", start_index=200)

    write_dataset(source, root / "source")
    write_dataset([s.model_copy(update={"labels": None}) for s in target], root / "target", heldout=target)
    write_dataset(test, root / "test")
    return {"source": root / "source", "target": root / "target", "test": root / "test"}


@pytest.fixture(scope="session")
def tiny_data(tiny_dirs):
    return {name: load_dataset(path) for name, path in tiny_dirs.items()}


@pytest.fixture
def train_config(desk_profile):
    """审计测试用的短训练配置"""
    return TrainConfig(iterations=20, k_c=5, batch_size=2, seed=3, log_interval=0, profile=desk_profile)

import pytest

from xkd.data import SyntheticSpec, generate_synthetic
from xkd.engine import DistillConfig, train_teacher
from xkd.losses import LossConfig
from xkd.models import build_toy_teacher, freeze


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return generate_synthetic(SyntheticSpec(counts=(40, 10, 10), seed=3), root)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    return generate_synthetic(SyntheticSpec(), tmp_path_factory.mktemp("default"))


QUICKSTART_CFG = DistillConfig(loss=LossConfig(alpha=0.5, gamma=2.0, temperature=2.0), learning_rate=3e-3, seed=0)


@pytest.fixture(scope="session")
def quickstart_cfg():
    return QUICKSTART_CFG


@pytest.fixture(scope="session")
def teacher_and_trace(default_dataset):
    model, trace = train_teacher(build_toy_teacher(0), default_dataset.split("train", None), default_dataset.split("val", None), QUICKSTART_CFG)
    return freeze(model), trace


@pytest.fixture(scope="session")
def trained_teacher(teacher_and_trace):
    return teacher_and_trace[0]

import numpy as np
import pytest

from mucs.data import ToyDataSpec, build_toy_dataset
from mucs.diffusion.config import ArchConfig, LossConfig, TrainConfig, build_generation_schedule
from mucs.diffusion.sampling import generate
from mucs.diffusion.training import pretrain
from mucs.null_loss import estimate_null_loss
from mucs.rng import Stream

TINY_ARCH = ArchConfig(enc_channels=4, width=32, num_blocks=1, mlp_ratio=2, embed_dim=32)
TINY_TRAIN = TrainConfig(steps=40, batch_size=16, lr=2e-3, warmup=5, ema=0.9, seed=3)


@pytest.fixture(scope="session")
def tiny_data():
    return build_toy_dataset(ToyDataSpec(size=40, seed=1))


@pytest.fixture(scope="session")
def loss_cfg():
    return LossConfig()


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def tiny_pretrain(tiny_data, loss_cfg):
    return pretrain(tiny_data, TINY_ARCH, loss_cfg, TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_f1(tiny_pretrain):
    return tiny_pretrain.f1


@pytest.fixture(scope="session")
def short_schedule():
    return build_generation_schedule(num_steps=6)


@pytest.fixture(scope="session")
def tiny_item(tiny_f1, short_schedule):
    return generate(tiny_f1, 7, 2, short_schedule, 1.5, item_id="g7")


@pytest.fixture(scope="session")
def tiny_null(tiny_data, loss_cfg):
    return estimate_null_loss(tiny_data, TINY_ARCH, loss_cfg, Stream(0).child("null"), batch_size=20, num_batches=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def train_item(tiny_data, tiny_f1):
    """A training image posing as a generated item: its loss sits well below
    the null loss even for the barely trained fixture model."""
    from mucs.data import GeneratedItem
    return GeneratedItem("g-train0", np.array(tiny_data.x[0]), int(tiny_data.c[0]), 0, tiny_f1.digest(),
                         (0.002, 80.0, 7.0, 6), 1.5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

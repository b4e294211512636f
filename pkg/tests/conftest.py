import numpy as np
import pytest
import torch

from pseudoheat.detector import TrainConfig, train_detector
from pseudoheat.selftrain import AdaptationConfig
from pseudoheat.seeding import set_deterministic
from pseudoheat.synth import SOURCE_DOMAIN, TARGET_DOMAIN, generate_dataset, generate_patch


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(True, threads=1)
    yield


@pytest.fixture(scope="session")
def source_patches():
    return [generate_patch(SOURCE_DOMAIN, 500 + i, sample_id=f"src{i:02d}") for i in range(24)]


@pytest.fixture(scope="session")
def trained_detector(source_patches):
    """Full-size detector trained on 24 source patches (about a minute on CPU)."""
    return train_detector(None, source_patches, TrainConfig(epochs=60, batch_size=8, augment=True, seed=1))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(
        SOURCE_DOMAIN, TARGET_DOMAIN,
        {"labeled_source": 6, "unlabeled_target": 12, "test_source": 2, "test_target": 2},
        rng_seed=3, test_shape=(128, 128),
    )


def tiny_config(**kw) -> AdaptationConfig:
    """Network sizes and epochs cut down so a full loop takes seconds."""
    base = dict(
        th_u=3, max_iterations=2, T=3,
        detector=TrainConfig(epochs=2, batch_size=4, augment=True),
        discriminator=TrainConfig(epochs=2, batch_size=8, augment=True),
        detector_finetune_epochs=1, discriminator_finetune_epochs=1,
        detector_widths=(4, 4, 8, 8, 8), discriminator_widths=(4, 8, 8, 8),
        neg_per_pos=1, th_d=1.0,
    )
    base.update(kw)
    return AdaptationConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def state_dicts_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)

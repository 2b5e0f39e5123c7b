import numpy as np
import pytest

from genlora.backbone import ViTConfig, init_backbone
from genlora.config import RunConfig
from genlora.data import DatasetSpec, DEFAULT_GENERATORS, build_dataset

TINY = dict(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_vit():
    return ViTConfig(**TINY, warmup_epochs=0)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_vit):
    return init_backbone(tiny_vit, 0)


@pytest.fixture(scope="session")
def small_run():
    """A 16x16, 2-layer run that trains in seconds."""
    return RunConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2,
                     warmup_epochs=0, router_hidden=16, n_real_train=24, n_fake_train=24,
                     n_real_test=12, n_fake_test=12, stage1_epochs=2, stage2_epochs=2,
                     stage1_batch_size=16, stage2_batch_size=16, joint_epochs=2)


def dataset_for(run, names=("checker", "spectral", "blocky"), seed=None):
    gens = {n: DEFAULT_GENERATORS[n] for n in names}
    spec = DatasetSpec(gens, run.n_real_train, run.n_fake_train, run.n_real_test, run.n_fake_test,
                       run.image_size, run.channels)
    return build_dataset(spec, run.seed if seed is None else seed)


@pytest.fixture(scope="session")
def small_data(small_run):
    return dataset_for(small_run)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

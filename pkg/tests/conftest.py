import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsedit import CacheStore, PromptTokens, UNetConfig, generate_dense


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest useful pipeline config; keeps unit tests quick."""
    return UNetConfig(
        latent_h=32,
        latent_w=32,
        channels=(8, 16),
        blocks_per_level=1,
        groups=4,
        steps=6,
        t1=2,
        t2=3,
        text_dim=8,
        seed=7,
    )


OLD_IDS = (3, 5, 7, 11)
NEW_IDS = (3, 5, 9, 11)


@pytest.fixture(scope="session")
def tiny_generation(tiny_config):
    """One cached dense generation shared by read-only pipeline tests."""
    store = CacheStore(async_transfer=False)
    final = generate_dense(PromptTokens(OLD_IDS), tiny_config, store)
    yield store, final
    store.close()


def fresh_generation(config, ids=OLD_IDS, **store_kwargs):
    store = CacheStore(async_transfer=False, **store_kwargs)
    final = generate_dense(PromptTokens(ids), config, store)
    return store, final

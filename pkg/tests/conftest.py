import numpy as np
import pytest

from vlcabs.store import PairedBatch


def make_batch(rng, counts, L=4, D=8, dtype=np.float32):
    tokens = rng.normal(size=(len(counts), L + 1, D)).astype(dtype)
    sents = rng.normal(size=(sum(counts), D)).astype(dtype)
    return PairedBatch.from_arrays(tokens, sents, counts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_batch(rng):
    return make_batch(rng, (2, 1))


SMALL_SPEC = dict(grid_side=4, embed_dim=16, num_concepts=3, n_train=24, n_val=8, n_test=8,
                  concepts_per_image=(1, 2), region_size=(1, 2), patch_pixels=4, seed=5)


@pytest.fixture(scope="session")
def small_planted(tmp_path_factory):
    from vlcabs.synthetic import PlantSpec, generate

    return generate(PlantSpec(**SMALL_SPEC), tmp_path_factory.mktemp("planted"))

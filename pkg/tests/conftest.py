import numpy as np
import pytest

from dmmh.data import generate_synthetic, load_dataset
from dmmh.nn import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    """The desk-scale dataset used across model/CLI tests."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(out, classes=3, per_class=200, dims=(64, 32), sigma=0.15, seed=7)


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_manifest):
    return load_dataset(synthetic_manifest)


def brute_hamming(a, b):
    """Per-bit count on ±1 vectors."""
    return int(sum(1 for x, y in zip(a, b) if x != y))


def brute_rank(query_code, codes, ids):
    """Naive unpacked ranking: sort (distance, id) tuples."""
    pairs = [(brute_hamming(query_code, c), int(i)) for c, i in zip(codes, ids)]
    pairs.sort()
    return [(i, d) for d, i in pairs]


def random_codes(rng, n, k):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, k))

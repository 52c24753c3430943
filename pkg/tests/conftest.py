import numpy as np
import pytest

from fewshotlab.episodes import SyntheticSpec, generate_synthetic


def finite_diff(f, arrays, idx, eps=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[idx]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(arrays[idx])
    it = np.nditer(arrays[idx], flags=["multi_index"])
    for _ in it:
        mi = it.multi_index
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[idx][mi] += eps
        minus[idx][mi] -= eps
        grad[mi] = (f(*plus) - f(*minus)) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture(scope="session")
def small_universe():
    """10 small classes, quick to sample from."""
    spec = SyntheticSpec(num_classes=10, dim=4, examples_per_class=24,
                         mean_scale=1.0, noise_scale=0.3, seed=7)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def medium_universe():
    """Benchmark-shaped universe for trainer tests."""
    spec = SyntheticSpec(num_classes=34, dim=16, examples_per_class=40,
                         mean_scale=1.0, noise_scale=1.0, seed=11)
    return generate_synthetic(spec, split_counts=(20, 6, 8))

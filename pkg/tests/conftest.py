import numpy as np
import pytest
import torch

from paintlapse.core import Frame
from paintlapse.networks import FeatureExtractor, init_model_params


@pytest.fixture(scope="session")
def small_params():
    """Tiny model for fast shape/determinism checks."""
    return init_model_params(latent_dim=8, base_channels=8, image_size=32, seed=0)


@pytest.fixture(scope="session")
def extractor():
    return FeatureExtractor("seeded-random", seed=0)


@pytest.fixture(scope="session")
def extractor_double():
    return FeatureExtractor("seeded-random", seed=0).double()


def random_frame(rng: np.random.Generator, h: int = 8, w: int = 8) -> Frame:
    return Frame(rng.uniform(0.0, 1.0, size=(h, w, 3)))


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def central_difference_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Elementwise central finite differences of a scalar function."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad

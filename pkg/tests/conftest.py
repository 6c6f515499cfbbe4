import numpy as np
import pytest

from ipslt import autodiff as ad
from ipslt.model import ModelConfig, init_params

TINY = dict(d_model=8, n_heads=2, n_layers=1, d_ff=16, n_iter=2, vocab_size=8, frame_dim=3,
            window=2, stride=2, dropout=0.0, zero_init_cross=False)


def tiny_config(**overrides):
    values = dict(TINY)
    values.update(overrides)
    return ModelConfig(**values)


def fd_grad(f, x, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of numpy array x (in place)."""
    flat = x.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(x.shape)


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny):
    return init_params(tiny, np.random.default_rng(0))

import numpy as np
import pytest

from aftkit import EncoderConfig, init_model


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.fixture
def tiny_model():
    vision = EncoderConfig(input_dim=8, hidden_dims=[8], embed_dim=4)
    text = EncoderConfig(input_dim=6, hidden_dims=[6], embed_dim=4)
    return init_model(vision, text, tau=0.07, seed=0, vocab_size=12)

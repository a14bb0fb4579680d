import numpy as np
import pytest

from gmcodec import autograd as ag
from gmcodec.autograd import Tensor, backward
from gmcodec.model import CodecModel, ModelConfig


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def analytic_grad(build, x):
    """Gradient of scalar build(Tensor) w.r.t. x via the autodiff engine."""
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = build(t)
    backward(loss)
    return t.grad


def rel_err(a, b):
    denom = max(float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / denom


def assert_grad_matches(build, x, tol=1e-4, eps=1e-5):
    """Analytic gradient of build() must match central differences."""
    num = numeric_grad(lambda arr: float(build(Tensor(arr)).data), x, eps=eps)
    ana = analytic_grad(build, x)
    assert ana is not None, "no gradient produced"
    err = rel_err(ana, num)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(base_channels=8, latent_channels=2, downsample_factor=8,
                       residual_blocks_per_stage=1)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return CodecModel(tiny_config, seed=7)

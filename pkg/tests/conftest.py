import numpy as np
import pytest

from ssml import autodiff as ad
from ssml.data import synthetic_dataset


def gradcheck(build_loss, params, rtol=1e-4, atol=1e-6, h=1e-5):
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss()`` must rebuild the loss tensor from the current values of
    ``params`` (finite differencing perturbs them in place).
    """
    loss = build_loss()
    grads = ad.backward(loss, params)
    fd = ad.finite_diff_grad(lambda: build_loss().item(), params, h=h)
    for i, p in enumerate(params):
        np.testing.assert_allclose(
            grads[p].data, fd[p].data, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch for parameter {i} (shape {p.shape})")


@pytest.fixture(scope="session")
def small_rgb_dataset():
    """8 classes x 20 samples of 28x28 RGB; shared across tests for speed."""
    return synthetic_dataset(8, 20, 28, 28, 3, seed=11)


@pytest.fixture(autouse=True)
def nan_debug():
    """Catch silent NaN/Inf in every forward op during tests."""
    with ad.debug_nan_checks(True):
        yield

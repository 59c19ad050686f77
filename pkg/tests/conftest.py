"""Shared test helpers: finite-difference gradients and tiny fixtures."""

import numpy as np
import pytest
import torch


def fd_gradient(fn, x, h=1e-6):
    """Central-difference gradient of scalar fn() w.r.t. tensor x (float64).

    fn must read x by reference (it is perturbed in place).
    """
    assert x.dtype == torch.float64, "finite differences need float64"
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(fn())
            flat[i] = orig - h
            minus = float(fn())
            flat[i] = orig
            grad_flat[i] = (plus - minus) / (2 * h)
    return grad


def analytic_gradient(fn, x):
    """Autograd gradient of scalar fn() w.r.t. leaf tensor x."""
    if x.grad is not None:
        x.grad = None
    value = fn()
    value.backward()
    return x.grad.detach().clone()


def rel_error(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_gradient(fn, x, tol=1e-3, h=1e-6):
    """Assert autograd and central differences agree in relative error."""
    analytic = analytic_gradient(fn, x)
    numeric = fd_gradient(fn, x.detach(), h=h)
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"
    return err


@pytest.fixture(name="check_gradient")
def check_gradient_fixture():
    return check_gradient


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(tmp_path_factory):
    """One shared small synthetic corpus for data-hungry tests."""
    from tbattr.data import synthesize_dataset

    root = tmp_path_factory.mktemp("corpus")
    synthesize_dataset(str(root), seed=3, n_records=10, image_size=64)
    return str(root)

import numpy as np
import pytest
import torch

from mgcc.backbone import NetworkConfig, PerturbationSpec


def tiny_network_config(**overrides):
    """Smallest full network for double-precision gradient checks (8x8 inputs)."""
    defaults = dict(
        encoder_channels=(2, 3),
        bottleneck_channels=4,
        convmixer_length=2,
        convmixer_kernel=3,
        taps=(0, 1, 2),
        num_aux=2,
        msag_enabled=(True, True, True),
        perturbations=[PerturbationSpec("f-noise"), PerturbationSpec("dropout")],
    )
    defaults.update(overrides)
    return NetworkConfig(**defaults)


def desk_network_config(**overrides):
    """Small network for 64x64 toy training runs (8x8 bottleneck)."""
    defaults = dict(encoder_channels=(8, 16, 32), bottleneck_channels=64)
    defaults.update(overrides)
    return NetworkConfig(**defaults)


def finite_difference_grads(loss_fn, params, eps=1e-5):
    """Central finite differences of a scalar loss w.r.t. each parameter tensor."""
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = float(loss_fn())
                flat[i] = orig - eps
                minus = float(loss_fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * eps)
            grads.append(grad)
    return grads


def max_relative_error(analytic, numeric):
    """Elementwise |a-n| / max(|a|,|n|,1e-6), maximized over all tensors."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, 1e-6))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def gradcheck_module(module, loss_fn, eps=1e-5):
    """Compare autograd parameter gradients of loss_fn() against central differences."""
    params = [p for p in module.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    numeric = finite_difference_grads(loss_fn, params, eps)
    return max_relative_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from portraitnerf import compositing
from portraitnerf.compositing import (backend_name, render_weights,
                                      render_weights_cython,
                                      render_weights_torch)

HAS_CYTHON = compositing._compose_cy is not None

BACKENDS = [render_weights_torch]
if HAS_CYTHON:
    BACKENDS.append(render_weights_cython)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_sample_worked_case(backend):
    sigma = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    delta = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    w = backend(sigma, delta)[0]
    assert abs(w[0].item() - 0.632121) < 1e-6
    assert abs(w[1].item() - 0.232544) < 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_space_gives_zero_weights(backend):
    sigma = torch.zeros((3, 8), dtype=torch.float64)
    delta = torch.full((3, 8), 0.1, dtype=torch.float64)
    assert backend(sigma, delta).abs().max().item() == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_opaque_first_sample_dominates(backend):
    sigma = torch.tensor([[1e6, 1.0, 1.0]], dtype=torch.float64)
    delta = torch.ones((1, 3), dtype=torch.float64)
    w = backend(sigma, delta)[0]
    assert abs(w[0].item() - 1.0) < 1e-6
    assert w[1:].max().item() < 1e-6


@pytest.mark.skipif(not HAS_CYTHON, reason="compiled kernel unavailable")
@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_backends_agree_forward_and_backward(dtype):
    gen = torch.Generator().manual_seed(3)
    sigma = torch.rand((5, 16), generator=gen, dtype=dtype) * 4
    delta = torch.rand((5, 16), generator=gen, dtype=dtype) * 0.2 + 0.01
    grad_out = torch.randn((5, 16), generator=gen, dtype=dtype)
    tol = 1e-6 if dtype == torch.float32 else 1e-12

    results = []
    for backend in (render_weights_torch, render_weights_cython):
        s = sigma.clone().requires_grad_(True)
        w = backend(s, delta)
        (w * grad_out).sum().backward()
        results.append((w.detach(), s.grad))
    (w_a, g_a), (w_b, g_b) = results
    assert (w_a - w_b).abs().max().item() < tol
    assert (g_a - g_b).abs().max().item() < tol


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradient_matches_finite_differences(backend):
    gen = torch.Generator().manual_seed(11)
    sigma = (torch.rand((2, 12), generator=gen, dtype=torch.float64) * 3).requires_grad_(True)
    delta = torch.rand((2, 12), generator=gen, dtype=torch.float64) * 0.3 + 0.02
    coeff = torch.randn((2, 12), generator=gen, dtype=torch.float64)

    (backend(sigma, delta) * coeff).sum().backward()
    eps = 1e-6
    for idx in [(0, 0), (0, 5), (1, 3), (1, 11)]:
        base = sigma.data[idx].item()
        sigma.data[idx] = base + eps
        hi = (backend(sigma.detach(), delta) * coeff).sum().item()
        sigma.data[idx] = base - eps
        lo = (backend(sigma.detach(), delta) * coeff).sum().item()
        sigma.data[idx] = base
        fd = (hi - lo) / (2 * eps)
        assert abs(sigma.grad[idx].item() - fd) < 1e-6 * max(1.0, abs(fd))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=32),
       st.lists(st.floats(1e-3, 1.0), min_size=32, max_size=32))
def test_weight_properties(sigmas, deltas):
    n = len(sigmas)
    sigma = torch.tensor([sigmas], dtype=torch.float64)
    delta = torch.tensor([deltas[:n]], dtype=torch.float64)
    w = render_weights(sigma, delta)[0]
    assert (w >= 0).all()
    assert w.sum().item() <= 1.0 + 1e-12
    # Transmittance entering each sample is non-increasing.
    tau = sigma[0] * delta[0]
    trans = torch.exp(-(torch.cumsum(tau, 0) - tau))
    assert (trans[1:] <= trans[:-1] + 1e-12).all()


def test_total_weight_approaches_one_with_optical_depth():
    delta = torch.full((1, 64), 0.1, dtype=torch.float64)
    for scale, bound in [(1.0, 0.01), (10.0, 1e-20)]:
        sigma = torch.full((1, 64), scale, dtype=torch.float64)
        total = render_weights(sigma, delta).sum().item()
        assert 1.0 - total < max(bound, math.exp(-6.4 * scale) * 2)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        render_weights(torch.zeros(1, 4), torch.zeros(1, 5))


def test_backend_name_reports_selection():
    assert backend_name() in ("python", "cython")
    if HAS_CYTHON and not compositing._FORCE_PURE:
        assert backend_name() == "cython"


def test_dispatcher_matches_reference_backend():
    gen = torch.Generator().manual_seed(5)
    sigma = torch.rand((4, 32), generator=gen) * 2
    delta = torch.rand((4, 32), generator=gen) * 0.1 + 0.01
    a = render_weights(sigma, delta)
    b = render_weights_torch(sigma, delta)
    assert (a - b).abs().max().item() < 1e-6

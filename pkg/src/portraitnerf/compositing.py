"""Compositing-weight computation with a compiled core and a torch fallback.

The weight kernel is the innermost per-sample loop of rendering. A Cython
extension provides a single-pass forward and an analytic backward; when it is
unavailable (or ``PORTRAITNERF_PURE=1`` is set) a pure-torch implementation
built from cumsum is used instead. Both paths are differentiable with respect
to density and agree to floating-point roundoff; see
``benchmarks/bench_compositing.py`` for a speed comparison.
"""

from __future__ import annotations

import os

import torch
from torch import Tensor

try:
    from . import _compose_cy
except ImportError:  # pragma: no cover - depends on build environment
    _compose_cy = None

_FORCE_PURE = os.environ.get("PORTRAITNERF_PURE", "") not in ("", "0")


def backend_name() -> str:
    """Name of the backend selected at import time."""
    return "python" if (_compose_cy is None or _FORCE_PURE) else "cython"


def render_weights_torch(sigma: Tensor, delta: Tensor) -> Tensor:
    """Pure-torch weights; differentiable through autograd."""
    tau = sigma * delta
    # Exclusive prefix sum: transmittance before entering sample i.
    accum = torch.cumsum(tau, dim=-1) - tau
    trans = torch.exp(-accum)
    alpha = 1.0 - torch.exp(-tau)
    return trans * alpha


class _CompiledWeights(torch.autograd.Function):
    @staticmethod
    def forward(ctx, sigma: Tensor, delta: Tensor) -> Tensor:
        shape = sigma.shape
        sigma2 = sigma.detach().reshape(-1, shape[-1]).contiguous()
        delta2 = delta.detach().reshape(-1, shape[-1]).contiguous()
        w = torch.from_numpy(
            _compose_cy.weights_forward(sigma2.numpy(), delta2.numpy()))
        ctx.save_for_backward(w, delta2)
        ctx.in_shape = shape
        return w.reshape(shape)

    @staticmethod
    def backward(ctx, grad_w: Tensor):
        w2, delta2 = ctx.saved_tensors
        g2 = grad_w.reshape(-1, ctx.in_shape[-1]).contiguous()
        grad_sigma = torch.from_numpy(
            _compose_cy.weights_backward(w2.numpy(), delta2.numpy(),
                                         g2.numpy()))
        return grad_sigma.reshape(ctx.in_shape), None


def render_weights_cython(sigma: Tensor, delta: Tensor) -> Tensor:
    if _compose_cy is None:
        raise RuntimeError("compiled compositing kernel is not available")
    return _CompiledWeights.apply(sigma, delta)


def render_weights(sigma: Tensor, delta: Tensor) -> Tensor:
    """Compositing weights w_i = T_i (1 - exp(-sigma_i delta_i)) per sample.

    Dispatches to the compiled kernel when available. ``sigma`` and ``delta``
    share shape ``(..., n_samples)``; gradients flow to ``sigma`` only
    (sample placement is not trainable).
    """
    if sigma.shape != delta.shape:
        raise ValueError(f"sigma shape {tuple(sigma.shape)} != delta shape "
                         f"{tuple(delta.shape)}")
    if _compose_cy is not None and not _FORCE_PURE and sigma.device.type == "cpu":
        return render_weights_cython(sigma, delta)
    return render_weights_torch(sigma, delta)

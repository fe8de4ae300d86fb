# cython: boundscheck=False, wraparound=False, cdivision=True
"""Transmittance-quadrature weights: compiled forward and analytic backward.

For one ray with per-sample optical thickness tau_i = sigma_i * delta_i:

    T_i = exp(-sum_{j<i} tau_j)          (transmittance)
    w_i = T_i * (1 - exp(-tau_i))        (compositing weight)

Backward, given g_i = dL/dw_i:

    dL/dtau_j = g_j * T_{j+1} - suffix sum_{i>j} g_i * w_i
    dL/dsigma_j = delta_j * dL/dtau_j

where T_{j+1} = T_j * exp(-tau_j) = T_j - w_j, so the backward pass needs no
transcendentals: it runs off the weights saved from the forward pass.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

ctypedef fused real:
    float
    double


def weights_forward(real[:, ::1] sigma, real[:, ::1] delta):
    cdef Py_ssize_t n = sigma.shape[0]
    cdef Py_ssize_t s = sigma.shape[1]
    out_np = np.empty((n, s), dtype=np.asarray(sigma).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double trans, e
    for i in range(n):
        trans = 1.0
        for j in range(s):
            e = exp(-sigma[i, j] * delta[i, j])
            out[i, j] = <real> (trans * (1.0 - e))
            trans *= e
    return out_np


def weights_backward(real[:, ::1] w, real[:, ::1] delta,
                     real[:, ::1] grad_w):
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t s = w.shape[1]
    grad_sigma_np = np.empty((n, s), dtype=np.asarray(w).dtype)
    cdef real[:, ::1] grad_sigma = grad_sigma_np
    cdef Py_ssize_t i, j
    cdef double trans, suffix, gw
    for i in range(n):
        suffix = 0.0
        for j in range(s):
            suffix += grad_w[i, j] * w[i, j]
        trans = 1.0
        for j in range(s):
            gw = grad_w[i, j] * w[i, j]
            suffix -= gw
            trans -= w[i, j]
            grad_sigma[i, j] = <real> (
                (grad_w[i, j] * trans - suffix) * delta[i, j])
    return grad_sigma_np

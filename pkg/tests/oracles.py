"""Independent numerical oracles used by unit and acceptance tests.

These deliberately avoid the library's own discretization: the continuous
volume-rendering integral is evaluated by dense trapezoid quadrature, so the
product code's transmittance weights are checked against a different method.
"""

import numpy as np


def dense_feature_integral(sigma_fn, feature_fn, near, far, n_dense=10_000):
    """Trapezoid evaluation of integral T(t) sigma(t) f(t) dt over [near, far],
    with T(t) = exp(-integral of sigma from near to t). Returns (feature,
    opacity)."""
    t = np.linspace(near, far, n_dense)
    sig = sigma_fn(t)
    f = feature_fn(t)
    dt = t[1] - t[0]
    cum = np.concatenate([[0.0], np.cumsum((sig[1:] + sig[:-1]) * 0.5 * dt)])
    trans = np.exp(-cum)
    integrand = trans * sig * f
    feature = np.trapezoid(integrand, t)
    opacity = np.trapezoid(trans * sig, t)
    return feature, opacity


def random_smooth_profile(rng, near, far, n_terms=4, sigma_scale=3.0):
    """A strictly positive smooth density and a smooth scalar feature on
    [near, far], built from a few random sinusoids."""
    amp = rng.uniform(0.2, 1.0, size=n_terms)
    freq = rng.uniform(0.5, 3.0, size=n_terms) * np.pi / (far - near)
    phase = rng.uniform(0, 2 * np.pi, size=n_terms)
    famp = rng.uniform(-1.0, 1.0, size=n_terms)

    def sigma_fn(t):
        v = sum(a * np.sin(w * (t - near) + p)
                for a, w, p in zip(amp, freq, phase))
        return sigma_scale * np.log1p(np.exp(v))

    def feature_fn(t):
        return 0.5 + sum(a * np.sin(w * (t - near) + p)
                         for a, w, p in zip(famp, freq, phase)) / (2 * n_terms)

    return sigma_fn, feature_fn

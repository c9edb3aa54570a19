"""Shared independent oracles for the test suite."""

import numpy as np

from natgrad.core import make_rng
from natgrad.metric import sample_targets
from natgrad.model import Batch, forward, gradient


def expected_hessian_mc_fd(m, x, om, n_samples, chunks, seed, eps=1e-5):
    """Monte-Carlo mean and standard error of the curvature of the negative
    log-likelihood, with targets drawn from the model itself.

    Each draw's Hessian comes from central finite differences of the
    reverse-mode gradient; draws are stacked into repeated-input batches so
    one gradient call averages a whole chunk (the gradient of a stacked mean
    is the mean of per-draw gradients). Standard errors come from the chunk
    means.
    """
    assert n_samples % chunks == 0
    per_chunk = n_samples // chunks
    p = m.param_count
    theta = m.flatten()
    y = forward(m, x).outputs
    rng = make_rng(seed)
    chunk_means = np.empty((chunks, p, p))
    x_stack = np.tile(x, (per_chunk, 1))
    for c in range(chunks):
        t_stack = np.vstack([sample_targets(rng, y, om) for _ in range(per_chunk)])
        batch = Batch(x_stack, t_stack)
        h = np.empty((p, p))
        for j in range(p):
            e = np.zeros(p)
            e[j] = eps
            g_plus = gradient(m.with_params(theta + e), batch, om)
            g_minus = gradient(m.with_params(theta - e), batch, om)
            h[:, j] = (g_plus - g_minus) / (2.0 * eps)
        chunk_means[c] = 0.5 * (h + h.T)
    mean = chunk_means.mean(axis=0)
    stderr = chunk_means.std(axis=0, ddof=1) / np.sqrt(chunks)
    return mean, stderr

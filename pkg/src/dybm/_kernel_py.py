"""NumPy implementation of the per-step DyBM kernels.

This is the reference path and the fallback used when the compiled
``_kernel`` extension is unavailable.  Both modules expose the same
``run_sequence`` signature and mutate their array arguments in place.
"""

import numpy as np

PROB_FLOOR = 1e-12


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logits(bias, u, v, alpha, gamma, beta, unit_scale, edge_scale):
    """Pre-sigmoid activations z_j given the current trace state.

    ``unit_scale`` (N,) multiplies every history contribution of a
    pre-synaptic unit; ``edge_scale`` (N, N) multiplies every weight of a
    directed edge.  Both are all-ones for the unregularized model.
    """
    w = edge_scale * unit_scale[:, None]
    ltp = np.einsum("ijk,ijk->ij", u, alpha)
    ltd_queue = np.einsum("ijl,ijl->ij", v, beta)
    z = bias + np.sum(w * (ltp - ltd_queue), axis=0)
    # v[j, i] pairs with the post-synaptic trace of unit i when j fires now
    ltd_post = np.einsum("jil,il->ji", v, gamma)
    z = z - np.sum(edge_scale * unit_scale[None, :] * ltd_post, axis=1)
    return z


def nll_terms(p, x):
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(x * np.log(pc) + (1.0 - x) * np.log1p(-pc))


def gradients(p, x, alpha, gamma, beta, unit_scale, edge_scale):
    """Ascent direction of log P(x | history) for (bias, u, v)."""
    e = x - p
    w = edge_scale * unit_scale[:, None]
    g_bias = e.copy()
    g_u = (w * e[None, :])[:, :, None] * alpha
    g_v = -(w * e[None, :])[:, :, None] * beta
    # the v[i, j] LTD term enters z_i through gamma_j
    g_v -= (edge_scale * unit_scale[None, :] * e[:, None])[:, :, None] * gamma[None, :, :]
    return g_bias, g_u, g_v


def advance(x, delays, queue, alpha, gamma, beta, lam, mu, mu_pow):
    """Push ``x`` through every FIFO queue and decay the traces in place."""
    gamma += x[:, None]
    gamma *= mu[None, :]
    depth = queue.shape[2]
    head = np.take_along_axis(
        queue, np.maximum(delays - 2, 0)[:, :, None], axis=2
    )[:, :, 0]
    arriving = np.where(delays == 1, x[:, None], head)
    alpha += arriving[:, :, None]
    alpha *= lam[None, None, :]
    if depth > 1:
        queue[:, :, 1:] = queue[:, :, :-1].copy()
    queue[:, :, 0] = x[:, None]
    queue *= (np.arange(depth)[None, None, :] < (delays - 1)[:, :, None])
    beta[...] = queue @ mu_pow


def queue_decay_table(mu, depth):
    """mu_pow[m, l] = mu_l ** (m + 1), weight of the value pushed m+1 steps ago."""
    m = np.arange(1, depth + 1, dtype=np.float64)[:, None]
    return np.asarray(mu, dtype=np.float64)[None, :] ** m


def _adam(param, grad, m1, m2, step_size, b1, b2, eps_hat):
    # bias corrections folded into step_size and eps_hat
    m1 *= b1
    m1 += (1.0 - b1) * grad
    m2 *= b2
    m2 += (1.0 - b2) * (grad * grad)
    param += step_size * m1 / (np.sqrt(m2) + eps_hat)


def run_sequence(bias, u, v, delays, queue, alpha, gamma, beta, lam, mu,
                 seq, unit_scale, edge_scale, step_nll,
                 learn=False, adam=None, step=0,
                 lr=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Consume ``seq`` (T, N) one row at a time.

    Writes the per-step NLL into ``step_nll`` and, when ``learn`` is set,
    applies one Adam ascent step per row using the moment arrays in
    ``adam = (m_b, s_b, m_u, s_u, m_v, s_v)``.  Returns the updated Adam
    step counter.
    """
    mu_pow = queue_decay_table(mu, queue.shape[2])
    for t in range(seq.shape[0]):
        x = seq[t]
        z = logits(bias, u, v, alpha, gamma, beta, unit_scale, edge_scale)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(
                f"non-finite activation at step {t}: max |z| = {np.nanmax(np.abs(z))}"
            )
        p = sigmoid(z)
        step_nll[t] = np.sum(nll_terms(p, x))
        if learn:
            g_b, g_u, g_v = gradients(p, x, alpha, gamma, beta, unit_scale, edge_scale)
            step += 1
            bc1 = 1.0 - b1 ** step
            bc2 = 1.0 - b2 ** step
            step_size = lr * np.sqrt(bc2) / bc1
            eps_hat = eps * np.sqrt(bc2)
            m_b, s_b, m_u, s_u, m_v, s_v = adam
            _adam(bias, g_b, m_b, s_b, step_size, b1, b2, eps_hat)
            _adam(u, g_u, m_u, s_u, step_size, b1, b2, eps_hat)
            _adam(v, g_v, m_v, s_v, step_size, b1, b2, eps_hat)
        advance(x, delays, queue, alpha, gamma, beta, lam, mu, mu_pow)
    return step

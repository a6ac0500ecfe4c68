"""Independent reference computations used by the tests.

Nothing here touches the tape: gradients come from central differences of
forward values only, forward passes are re-derived with plain numpy.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays, step: float = 1e-5) -> list[np.ndarray]:
    """Numerical gradient of scalar ``f()`` w.r.t. arrays that ``f`` reads in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = float(f())
            arr[idx] = orig - step
            down = float(f())
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all components."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a), np.asarray(n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def np_mlp(weights, biases, activations, x):
    acts = {"tanh": np.tanh, "relu": lambda v: np.maximum(v, 0), "identity": lambda v: v}
    h = np.asarray(x, dtype=np.float64)
    for w, b, a in zip(weights, biases, activations):
        h = acts[a](h @ w + b)
    return h


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gaussian_product_bruteforce(means, stds, grid=None):
    """Product of 1-D Gaussian densities on a grid, renormalised; returns (mean, std) by moments."""
    means, stds = np.asarray(means, float), np.asarray(stds, float)
    if grid is None:
        lo = (means - 8 * stds).min()
        hi = (means + 8 * stds).max()
        grid = np.linspace(lo, hi, 400_001)
    log_density = np.zeros_like(grid)
    for m, s in zip(means, stds):
        log_density += -0.5 * ((grid - m) / s) ** 2
    density = np.exp(log_density - log_density.max())
    weights = density / np.trapezoid(density, grid)
    mean = np.trapezoid(grid * weights, grid)
    var = np.trapezoid((grid - mean) ** 2 * weights, grid)
    return mean, np.sqrt(var)


def gaussian_product_closed_form(means, stds):
    """Precision-weighted combination written out independently of the library."""
    means, stds = np.asarray(means, float), np.asarray(stds, float)
    precision = np.sum(1.0 / stds ** 2, axis=0)
    mean = np.sum(means / stds ** 2, axis=0) / precision
    return mean, 1.0 / np.sqrt(precision)


def np_mlp_params(net, x):
    return np_mlp([w.data for w in net.weights], [b.data for b in net.biases], net.activations, x)


def np_gnn_encode(p, context):
    """Embed, aggregate to latent nodes, one residual attention pass, aggregate, linear heads."""
    x = np_mlp_params(p.embedder, context)
    h = np_softmax(x @ p.affinity_in.data.T, axis=0).T @ x
    for _ in range(p.attention_iterations):
        q, k, v = h @ p.w_query.data, h @ p.w_key.data, h @ p.w_value.data
        h = h + np_softmax(q @ k.T / np.sqrt(h.shape[-1]), axis=-1) @ v
    summary = (np_softmax(h @ p.affinity_out.data.T, axis=0).T @ h)[0]
    mean = np_mlp_params(p.head_mean, summary[None])[0]
    log_std = np.clip(np_mlp_params(p.head_log_std, summary[None])[0], -20, 2)
    return mean, log_std


def np_squashed_sample(policy_net, action_dim, obs_z, noise):
    """tanh-Gaussian action and log-density, written with the textbook Jacobian term."""
    out = np_mlp_params(policy_net, obs_z)
    mu, log_std = out[:, :action_dim], np.clip(out[:, action_dim:], -20, 2)
    u = mu + np.exp(log_std) * noise
    a = np.tanh(u)
    logp = np.sum(-0.5 * noise ** 2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(1 - a ** 2), axis=1)
    return a, logp


def np_soft_td_loss(critic, policy_net, action_dim, alpha, obs, act, rew, next_obs, z, gamma, noise):
    """Twin-critic soft TD loss for flat batches with a single ``z`` row broadcast."""
    zs = np.tile(z, (obs.shape[0], 1))
    a_next, logp = np_squashed_sample(policy_net, action_dim, np.hstack([next_obs, zs]), noise)
    xn = np.hstack([next_obs, a_next, zs])
    t = np.minimum(np_mlp_params(critic.q1_target, xn)[:, 0], np_mlp_params(critic.q2_target, xn)[:, 0])
    y = rew + gamma * (t - alpha * logp)
    x = np.hstack([obs, act, zs])
    q1, q2 = np_mlp_params(critic.q1, x)[:, 0], np_mlp_params(critic.q2, x)[:, 0]
    return 0.5 * (np.mean((q1 - y) ** 2) + np.mean((q2 - y) ** 2))

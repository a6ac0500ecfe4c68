"""Task encoders mapping a set of transitions to a Gaussian belief over z.

Three variants share one interface, selected by ``EncoderParams.kind``:

``gnn``
    embed -> aggregate to ``d`` latent nodes -> self-attention over the latent
    nodes -> aggregate to one summary node -> Gaussian heads.
``ws``
    the same without the attention stage.
``gp``
    per-transition Gaussian factors combined by a precision-weighted product.

Contexts are arrays of shape ``(..., n, feat)`` where each row is the
concatenation ``(s, a, r, s')``; leading axes batch independent tasks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from caster import numerics as nx
from caster.numerics import MlpParams, Tensor

logger = logging.getLogger(__name__)

GP_MIN_STD = 1e-6


@dataclass
class GaussianBelief:
    """Diagonal Gaussian over the latent task variable (last axis is ``d_z``)."""

    mean: Tensor
    log_std: Tensor

    @classmethod
    def prior(cls, latent_dim: int, batch_shape: tuple = ()) -> "GaussianBelief":
        shape = tuple(batch_shape) + (latent_dim,)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def sample(self, noise: np.ndarray) -> Tensor:
        return nx.gaussian_sample_reparam(self.mean, self.log_std, noise)

    def detached(self) -> "GaussianBelief":
        return GaussianBelief(nx.detach(self.mean), nx.detach(self.log_std))


@dataclass
class EncoderParams:
    kind: str
    latent_dim: int
    embedder: MlpParams | None = None
    affinity_in: Tensor | None = None
    affinity_out: Tensor | None = None
    w_query: Tensor | None = None
    w_key: Tensor | None = None
    w_value: Tensor | None = None
    head_mean: MlpParams | None = None
    head_log_std: MlpParams | None = None
    factor_net: MlpParams | None = None
    attention_iterations: int = 1

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for part in (self.embedder, self.affinity_in, self.w_query, self.w_key, self.w_value,
                     self.affinity_out, self.head_mean, self.head_log_std, self.factor_net):
            if part is None:
                continue
            out.extend(part.tensors() if isinstance(part, MlpParams) else [part])
        return out


def context_features(obs, act, rew, next_obs) -> np.ndarray:
    """Node features ``(s, a, r, s')`` along the last axis."""
    rew = np.asarray(rew, dtype=np.float64)
    return np.concatenate([obs, act, rew[..., None], next_obs], axis=-1)


def feature_dim(state_dim: int, action_dim: int) -> int:
    return 2 * state_dim + action_dim + 1


def init_encoder(kind: str, feat_dim: int, rng: np.random.Generator, channels: int = 64,
                 latent_nodes: int = 8, latent_dim: int = 5, hidden: int = 64,
                 attention_iterations: int = 1, activation: str = "tanh") -> EncoderParams:
    if kind not in ("gnn", "ws", "gp"):
        raise ValueError(f"unknown encoder kind {kind!r}; expected gnn, ws or gp")
    if kind == "gp":
        net = nx.init_mlp([feat_dim, hidden, hidden, 2 * latent_dim], rng, activation)
        return EncoderParams(kind, latent_dim, factor_net=net)

    def vec(*shape, scale):
        return Tensor(rng.normal(0.0, scale, size=shape), True)

    params = EncoderParams(
        kind, latent_dim,
        embedder=nx.init_mlp([feat_dim, hidden, channels], rng, activation, output_activation=activation),
        affinity_in=vec(latent_nodes, channels, scale=1.0 / np.sqrt(channels)),
        affinity_out=vec(1, channels, scale=1.0 / np.sqrt(channels)),
        head_mean=nx.init_mlp([channels, latent_dim], rng),
        head_log_std=nx.init_mlp([channels, latent_dim], rng),
        attention_iterations=attention_iterations,
    )
    if kind == "gnn":
        scale = 1.0 / np.sqrt(channels)
        params.w_query = vec(channels, channels, scale=scale)
        params.w_key = vec(channels, channels, scale=scale)
        params.w_value = vec(channels, channels, scale=scale)
    return params


def aggregate(nodes, affinities) -> Tensor:
    """Softmax-weighted sums of ``nodes (..., n, c)``, one per affinity row ``(k, c)``."""
    nodes, affinities = nx.as_tensor(nodes), nx.as_tensor(affinities)
    if nodes.shape[-2] < 1:
        raise ValueError("aggregate needs at least one input node")
    logits = nx.matmul(nodes, nx.swapaxes(affinities, -1, -2))  # (..., n, k)
    weights = nx.softmax(logits, axis=-2)
    return nx.matmul(nx.swapaxes(weights, -1, -2), nodes)


def self_attend(latent, w_query, w_key, w_value, iterations: int = 1) -> Tensor:
    """Residual scaled dot-product attention among latent nodes ``(..., d, c)``."""
    h = nx.as_tensor(latent)
    scale = 1.0 / np.sqrt(h.shape[-1])
    for _ in range(iterations):
        q, k, v = nx.matmul(h, w_query), nx.matmul(h, w_key), nx.matmul(h, w_value)
        attn = nx.softmax(nx.matmul(q, nx.swapaxes(k, -1, -2)) * scale, axis=-1)
        h = h + nx.matmul(attn, v)
    return h


def _heads(params: EncoderParams, summary: Tensor) -> GaussianBelief:
    mean = nx.mlp_forward(params.head_mean, summary)
    log_std = nx.clip(nx.mlp_forward(params.head_log_std, summary), nx.LOG_STD_MIN, nx.LOG_STD_MAX)
    return GaussianBelief(mean, log_std)


def _check_context(context) -> Tensor:
    context = nx.as_tensor(context)
    if context.ndim < 2 or context.shape[-2] == 0:
        raise ValueError("empty context: substitute GaussianBelief.prior instead of encoding")
    return context


def _summarise(params: EncoderParams, context, attend: bool) -> Tensor:
    x = nx.mlp_forward(params.embedder, _check_context(context))
    h = aggregate(x, params.affinity_in)
    if attend:
        h = self_attend(h, params.w_query, params.w_key, params.w_value, params.attention_iterations)
    summary = aggregate(h, params.affinity_out)  # (..., 1, c)
    return nx.reshape(summary, summary.shape[:-2] + (summary.shape[-1],))


def encode(params: EncoderParams, context) -> GaussianBelief:
    return _heads(params, _summarise(params, context, attend=True))


def ws_encode(params: EncoderParams, context) -> GaussianBelief:
    return _heads(params, _summarise(params, context, attend=False))


def gaussian_product(means, stds) -> GaussianBelief:
    """Normalised product of Gaussian factors along axis ``-2``."""
    means, stds = nx.as_tensor(means), nx.as_tensor(stds)
    precision = 1.0 / nx.square(stds)
    total = nx.tsum(precision, axis=-2)
    mean = nx.tsum(means * precision, axis=-2) / total
    log_std = nx.clip(-0.5 * nx.log(total), nx.LOG_STD_MIN, nx.LOG_STD_MAX)
    return GaussianBelief(mean, log_std)


def gp_encode(params: EncoderParams, context) -> GaussianBelief:
    out = nx.mlp_forward(params.factor_net, _check_context(context))
    d = params.latent_dim
    means = out[..., :d]
    var = nx.softplus(out[..., d:])
    floor = GP_MIN_STD ** 2
    if np.any(var.data < floor):
        logger.info("clamped %d Gaussian factor variances to %.1e", int(np.sum(var.data < floor)), floor)
        var = nx.maximum(var, floor)
    return gaussian_product(means, nx.sqrt(var))


def infer(params: EncoderParams, context) -> GaussianBelief:
    """Dispatch on the encoder kind."""
    if params.kind == "gnn":
        return encode(params, context)
    if params.kind == "ws":
        return ws_encode(params, context)
    return gp_encode(params, context)


def kl_to_prior(belief: GaussianBelief) -> Tensor:
    """KL(belief || N(0, I)) summed over the last axis."""
    var = nx.exp(2.0 * belief.log_std)
    return 0.5 * nx.tsum(var + nx.square(belief.mean) - 1.0 - 2.0 * belief.log_std, axis=-1)

"""Task-conditioned soft actor-critic: squashed Gaussian policies, twin critics.

The latent task variable ``z`` is concatenated to the state (and action for
critics). Inside the losses ``z`` is whatever the caller passes: a constant
during policy/critic learning, a differentiable sample when the encoder is
being fitted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from caster import numerics as nx
from caster.numerics import AdamState, MlpParams, Tensor

ACTION_EPS = 1e-12
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class Batch:
    """Transitions with shared leading axes, e.g. ``(tasks, rows, dim)``."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    task: np.ndarray | None = None
    env_rew: np.ndarray | None = None  # set once rewards have been replaced

    def __len__(self) -> int:
        return int(np.prod(self.rew.shape))

    @property
    def source_rew(self) -> np.ndarray:
        """Environment rewards, even after ``with_rewards``."""
        return self.rew if self.env_rew is None else self.env_rew

    def with_rewards(self, rew: np.ndarray) -> "Batch":
        return Batch(self.obs, self.act, np.asarray(rew, dtype=np.float64).reshape(self.rew.shape),
                     self.next_obs, self.done, self.task, self.source_rew)


@dataclass
class PolicyParams:
    net: MlpParams
    action_dim: int

    def tensors(self) -> list[Tensor]:
        return self.net.tensors()

    def frozen(self) -> "PolicyParams":
        return PolicyParams(self.net.frozen(), self.action_dim)


@dataclass
class CriticParams:
    """Twin online critics and their Polyak-averaged targets."""

    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams

    def tensors(self) -> list[Tensor]:
        return self.q1.tensors() + self.q2.tensors()

    def target_tensors(self) -> list[Tensor]:
        return self.q1_target.tensors() + self.q2_target.tensors()

    def frozen(self) -> "CriticParams":
        return CriticParams(self.q1.frozen(), self.q2.frozen(), self.q1_target, self.q2_target)


@dataclass
class SacTemperature:
    log_alpha: Tensor
    target_entropy: float
    learnable: bool = True

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def tensors(self) -> list[Tensor]:
        return [self.log_alpha]


def init_policy(state_dim: int, latent_dim: int, action_dim: int, rng: np.random.Generator,
                hidden: tuple[int, ...] = (64, 64), activation: str = "tanh") -> PolicyParams:
    sizes = [state_dim + latent_dim, *hidden, 2 * action_dim]
    return PolicyParams(nx.init_mlp(sizes, rng, activation, output_scale=1e-3), action_dim)


def init_critic(state_dim: int, latent_dim: int, action_dim: int, rng: np.random.Generator,
                hidden: tuple[int, ...] = (64, 64), activation: str = "tanh") -> CriticParams:
    sizes = [state_dim + action_dim + latent_dim, *hidden, 1]
    q1 = nx.init_mlp(sizes, rng, activation)
    q2 = nx.init_mlp(sizes, rng, activation)
    return CriticParams(q1, q2, q1.clone().frozen(), q2.clone().frozen())


def init_temperature(action_dim: int, init_alpha: float = 1.0, target_entropy: float | None = None,
                     learnable: bool = True) -> SacTemperature:
    target = -float(action_dim) if target_entropy is None else float(target_entropy)
    return SacTemperature(Tensor(np.log(init_alpha), learnable), target, learnable)


def _with_latent(x, z) -> Tensor:
    """Concatenate ``z`` (broadcast over row axes) to ``x`` along the last axis."""
    x, z = nx.as_tensor(x), nx.as_tensor(z)
    while z.ndim < x.ndim:
        z = nx.reshape(z, z.shape[:-1] + (1, z.shape[-1]))
    z = nx.broadcast_to(z, x.shape[:-1] + (z.shape[-1],))
    return nx.concat([x, z], axis=-1)


def policy_distribution(params: PolicyParams, s, z) -> tuple[Tensor, Tensor]:
    out = nx.mlp_forward(params.net, _with_latent(s, z))
    d = params.action_dim
    return out[..., :d], nx.clip(out[..., d:], nx.LOG_STD_MIN, nx.LOG_STD_MAX)


def squash(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    """tanh-squashed reparameterised sample and its log-density on the box."""
    pre = mean + nx.exp(log_std) * noise
    log_normal = nx.tsum(-0.5 * np.square(noise) - log_std - _HALF_LOG_2PI, axis=-1)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    log_jac = nx.tsum(2.0 * (np.log(2.0) - pre - nx.softplus(-2.0 * pre)), axis=-1)
    action = nx.clip(nx.tanh(pre), -1.0 + ACTION_EPS, 1.0 - ACTION_EPS)
    return action, log_normal - log_jac


def policy_sample(params: PolicyParams, s, z, rng: np.random.Generator | None = None,
                  deterministic: bool = False, noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Action in the open box ``(-1, 1)`` and its log-probability."""
    mean, log_std = policy_distribution(params, s, z)
    if deterministic:
        noise = np.zeros(mean.shape)
    elif noise is None:
        noise = rng.standard_normal(mean.shape)
    return squash(mean, log_std, noise)


def q_value(critic: CriticParams, s, a, z, target: bool = False) -> tuple[Tensor, Tensor]:
    x = _with_latent(nx.concat([nx.as_tensor(s), nx.as_tensor(a)], axis=-1), z)
    n1, n2 = (critic.q1_target, critic.q2_target) if target else (critic.q1, critic.q2)
    q1, q2 = nx.mlp_forward(n1, x), nx.mlp_forward(n2, x)
    return nx.reshape(q1, q1.shape[:-1]), nx.reshape(q2, q2.shape[:-1])


def td_target(critic: CriticParams, policy: PolicyParams, temp: SacTemperature, batch: Batch, z,
              gamma: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Soft target ``r + gamma * (min target Q(s', a') - alpha log pi(a'|s'))``.

    Episodes end only by time limit, so the target always bootstraps.
    """
    z = nx.detach(z)
    a_next, logp_next = policy_sample(policy.frozen(), batch.next_obs, z, rng, noise=noise)
    t1, t2 = q_value(critic, batch.next_obs, a_next.data, z, target=True)
    soft_v = np.minimum(t1.data, t2.data) - temp.alpha * logp_next.data
    return batch.rew + gamma * soft_v


def sac_critic_loss(critic: CriticParams, policy: PolicyParams, temp: SacTemperature, batch: Batch, z,
                    gamma: float, rng: np.random.Generator | None = None,
                    noise: np.ndarray | None = None) -> Tensor:
    """Mean squared TD error over the batch and both twins."""
    y = td_target(critic, policy, temp, batch, z, gamma, rng, noise)
    q1, q2 = q_value(critic, batch.obs, batch.act, z)
    return 0.5 * (nx.mean(nx.square(q1 - y)) + nx.mean(nx.square(q2 - y)))


def actor_terms(critic: CriticParams, policy: PolicyParams, temp: SacTemperature, batch: Batch, z,
                rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    z = nx.detach(z)
    action, logp = policy_sample(policy, batch.obs, z, rng, noise=noise)
    q1, q2 = q_value(critic.frozen(), batch.obs, action, z)
    loss = nx.mean(temp.alpha * logp - nx.minimum(q1, q2))
    return loss, logp


def sac_actor_loss(critic: CriticParams, policy: PolicyParams, temp: SacTemperature, batch: Batch, z,
                   rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> Tensor:
    """``E[alpha log pi(a|s,z) - min Q(s,a,z)]`` with the critic held constant."""
    return actor_terms(critic, policy, temp, batch, z, rng, noise)[0]


def temperature_loss(temp: SacTemperature, log_probs) -> Tensor:
    gap = float(np.mean(np.asarray(log_probs))) + temp.target_entropy
    return -temp.log_alpha * gap


def temperature_update(temp: SacTemperature, opt: AdamState, log_probs) -> SacTemperature:
    """Raise alpha when entropy is below target, lower it when above."""
    if temp.learnable:
        grads = nx.grad(lambda: temperature_loss(temp, log_probs), [temp.log_alpha])
        nx.adam_step(opt, [temp.log_alpha], grads)
    return temp


def polyak_update(target: MlpParams | CriticParams, online, tau: float):
    """``target <- (1 - tau) target + tau online`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if isinstance(target, CriticParams):
        pairs = zip(target.target_tensors(), target.tensors())
    else:
        pairs = zip(nx.tensor_list(target), nx.tensor_list(online))
    for t, o in pairs:
        if t.shape != o.shape:
            raise nx.ShapeError(f"target shape {t.shape} does not match online shape {o.shape}")
        t.data *= 1.0 - tau
        t.data += tau * o.data
    return target


@dataclass
class SacAgent:
    """One policy with its critics, temperature and optimiser states."""

    policy: PolicyParams
    critic: CriticParams
    temperature: SacTemperature
    policy_opt: AdamState
    critic_opt: AdamState
    alpha_opt: AdamState

    def tensors(self) -> list[Tensor]:
        return (self.policy.tensors() + self.critic.tensors() + self.critic.target_tensors()
                + self.temperature.tensors())


def make_agent(state_dim: int, latent_dim: int, action_dim: int, rng: np.random.Generator,
               hidden: tuple[int, ...] = (64, 64), activation: str = "tanh", lr: float = 3e-4,
               alpha_lr: float | None = None, init_alpha: float = 1.0, target_entropy: float | None = None,
               learn_temperature: bool = True, optimizer: str = "adam") -> SacAgent:
    policy = init_policy(state_dim, latent_dim, action_dim, rng, hidden, activation)
    critic = init_critic(state_dim, latent_dim, action_dim, rng, hidden, activation)
    temp = init_temperature(action_dim, init_alpha, target_entropy, learn_temperature)
    return SacAgent(policy, critic, temp,
                    AdamState.for_params(policy, lr=lr, method=optimizer),
                    AdamState.for_params(critic, lr=lr, method=optimizer),
                    AdamState.for_params(temp, lr=lr if alpha_lr is None else alpha_lr, method=optimizer))


def sac_update(agent: SacAgent, batch: Batch, z, gamma: float, tau: float,
               rng: np.random.Generator | None = None,
               noise: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, float]:
    """One critic, policy and temperature step followed by the target update.

    Args:
        noise: optional ``(next_action_noise, action_noise)``, each shaped like
            ``batch.act``; drawn from ``rng`` when omitted.
    """
    if noise is None:
        noise = (rng.standard_normal(batch.act.shape), rng.standard_normal(batch.act.shape))
    next_noise, act_noise = noise
    critic_loss, critic_grads = nx.value_and_grad(
        lambda: sac_critic_loss(agent.critic, agent.policy, agent.temperature, batch, z, gamma, noise=next_noise),
        agent.critic)
    holder = {}

    def actor_loss():
        loss, logp = actor_terms(agent.critic, agent.policy, agent.temperature, batch, z, noise=act_noise)
        holder["logp"] = logp.data
        return loss

    policy_loss, policy_grads = nx.value_and_grad(actor_loss, agent.policy)
    nx.adam_step(agent.critic_opt, agent.critic, critic_grads)
    nx.adam_step(agent.policy_opt, agent.policy, policy_grads)
    temperature_update(agent.temperature, agent.alpha_opt, holder["logp"])
    polyak_update(agent.critic, agent.critic, tau)
    return {"critic_loss": critic_loss, "policy_loss": policy_loss,
            "alpha": agent.temperature.alpha, "entropy": -float(np.mean(holder["logp"]))}

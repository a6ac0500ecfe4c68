"""Vectorised episodes over many tasks and the explore-then-infer loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from caster import encoder as enc
from caster.agents import PolicyParams, policy_sample
from caster.encoder import EncoderParams, GaussianBelief
from caster.tasks import ACTION_HIGH, ACTION_LOW, get_family


@dataclass
class Model:
    """Everything meta-test needs: encoder plus the two policies."""

    family: str
    encoder: EncoderParams
    actor: PolicyParams
    explorer: PolicyParams | None
    explorer_kind: str
    latent_dim: int
    horizon: int = 20
    actor_z: str = "sample"


@dataclass
class Episodes:
    """One episode per task; arrays are ``(tasks, horizon, ...)``."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    @property
    def returns(self) -> np.ndarray:
        return self.rew.sum(axis=-1)

    def features(self) -> np.ndarray:
        return enc.context_features(self.obs, self.act, self.rew, self.next_obs)

    def task_slice(self, i: int) -> tuple[np.ndarray, ...]:
        return self.obs[i], self.act[i], self.rew[i], self.next_obs[i], self.done[i]


Behaviour = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def policy_behaviour(policy: PolicyParams, deterministic: bool = False) -> Behaviour:
    def act(obs, z, rng):
        action, _ = policy_sample(policy, obs, z, rng, deterministic=deterministic)
        return action.data
    return act


def uniform_behaviour(action_dim: int) -> Behaviour:
    def act(obs, z, rng):
        return rng.uniform(ACTION_LOW, ACTION_HIGH, size=obs.shape[:-1] + (action_dim,))
    return act


def explorer_behaviour(model: Model) -> Behaviour:
    """The exploration policy for each variant: learned, uniform, or the actor itself."""
    if model.explorer_kind == "rand":
        return uniform_behaviour(get_family(model.family).action_dim)
    if model.explorer_kind == "none":
        return policy_behaviour(model.actor)
    return policy_behaviour(model.explorer)


def run_episodes(family: str, params: np.ndarray, behaviour: Behaviour, z: np.ndarray, horizon: int,
                 rng: np.random.Generator) -> Episodes:
    fam = get_family(family)
    n = params.shape[0]
    obs = np.zeros((n, horizon, fam.state_dim))
    act = np.zeros((n, horizon, fam.action_dim))
    rew = np.zeros((n, horizon))
    nxt = np.zeros((n, horizon, fam.state_dim))
    done = np.zeros((n, horizon), dtype=bool)
    state = fam.initial_states(n)
    for t in range(horizon):
        a = np.clip(behaviour(state, z, rng), ACTION_LOW, ACTION_HIGH)
        s_next, r = fam.step_batch(params, state, a)
        obs[:, t], act[:, t], rew[:, t], nxt[:, t] = state, a, r, s_next
        state = s_next
    done[:, -1] = True
    return Episodes(obs, act, rew, nxt, done)


def belief_of(encoder: EncoderParams, context: np.ndarray) -> GaussianBelief:
    return enc.infer(encoder, context).detached()


def sample_z(belief: GaussianBelief, rng: np.random.Generator) -> np.ndarray:
    return belief.mean.data + belief.std * rng.standard_normal(belief.mean.shape)


def explore(model: Model, params: np.ndarray, episodes: int, rng: np.random.Generator,
            behaviour: Behaviour | None = None) -> tuple[list[Episodes], list[GaussianBelief]]:
    """Iterated posterior sampling: act under ``z ~ belief``, re-encode everything seen.

    Returns the episodes and ``episodes + 1`` beliefs, starting with the prior.
    """
    behaviour = behaviour or explorer_behaviour(model)
    belief = GaussianBelief.prior(model.latent_dim, (params.shape[0],))
    beliefs, collected = [belief], []
    context = None
    for _ in range(episodes):
        ep = run_episodes(model.family, params, behaviour, sample_z(belief, rng), model.horizon, rng)
        collected.append(ep)
        feats = ep.features()
        context = feats if context is None else np.concatenate([context, feats], axis=-2)
        belief = belief_of(model.encoder, context)
        beliefs.append(belief)
    return collected, beliefs


def actor_latent(model: Model, belief: GaussianBelief, rng: np.random.Generator) -> np.ndarray:
    return belief.mean.data.copy() if model.actor_z == "mean" else sample_z(belief, rng)

"""Meta-test adaptation and the evaluations built on it.

Adaptation with budget ``K``: the explorer runs ``K`` episodes, each under a
``z`` drawn from the belief formed from every explorer transition so far
(the first from the prior); the actor then runs one deterministic episode
with ``z`` from the final belief. Nothing here touches training buffers or
trainer state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from caster.encoder import GaussianBelief
from caster.rollout import (Episodes, Model, actor_latent, belief_of, explore, explorer_behaviour,
                            policy_behaviour, run_episodes)
from caster.tasks import ProtocolError, TaskSpec, task_params


@dataclass
class AdaptationTrace:
    task: TaskSpec
    belief_means: list[np.ndarray]
    belief_log_stds: list[np.ndarray]
    explorer_returns: list[float]
    explorer_rewards: list[np.ndarray]
    final_return: float
    final_rewards: np.ndarray
    final_state: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_beliefs(self) -> int:
        return len(self.belief_means)


def _actor_episode(model: Model, params: np.ndarray, belief: GaussianBelief, rng: np.random.Generator) -> Episodes:
    z = actor_latent(model, belief, rng)
    return run_episodes(model.family, params, policy_behaviour(model.actor, deterministic=True), z,
                        model.horizon, rng)


def adapt_batch(model: Model, tasks: list[TaskSpec], budget: int, rng: np.random.Generator) -> list[AdaptationTrace]:
    """Adapt to every task in ``tasks`` at once; one trace per task."""
    if budget < 0:
        raise ValueError("adaptation budget must be >= 0")
    params = task_params(tasks)
    episodes, beliefs = explore(model, params, budget, rng)
    final = _actor_episode(model, params, beliefs[-1], rng)
    traces = []
    for i, task in enumerate(tasks):
        traces.append(AdaptationTrace(
            task,
            [b.mean.data[i].copy() for b in beliefs],
            [b.log_std.data[i].copy() for b in beliefs],
            [float(ep.returns[i]) for ep in episodes],
            [ep.rew[i].copy() for ep in episodes],
            float(final.returns[i]),
            final.rew[i].copy(),
            final.next_obs[i, -1].copy(),
        ))
    return traces


def adapt(model: Model, task: TaskSpec, budget: int, rng: np.random.Generator) -> AdaptationTrace:
    return adapt_batch(model, [task], budget, rng)[0]


def efficiency_returns(model: Model, tasks: list[TaskSpec], max_budget: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Final actor return for every budget ``0..max_budget``: array ``(max_budget + 1, tasks)``.

    One explorer sequence is shared, so budget ``k`` sees exactly the first
    ``k`` episodes of it.
    """
    if max_budget < 1:
        raise ValueError("max_budget must be >= 1")
    params = task_params(tasks)
    _, beliefs = explore(model, params, max_budget, rng)
    return np.stack([_actor_episode(model, params, b, rng).returns for b in beliefs])


def return_from_context(model: Model, tasks: list[TaskSpec], context: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Actor return per task when the belief is formed from a given context ``(tasks, n, feat)``."""
    params = task_params(tasks)
    return _actor_episode(model, params, belief_of(model.encoder, context), rng).returns


def collect_heldout(model: Model, tasks: list[TaskSpec], episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Off-policy style store per task: explorer episodes, each under a fresh prior ``z``.

    Returns node features ``(tasks, episodes * horizon, feat)``.
    """
    params = task_params(tasks)
    behaviour = explorer_behaviour(model)
    feats = []
    for _ in range(episodes):
        z = rng.standard_normal((len(tasks), model.latent_dim))
        feats.append(run_episodes(model.family, params, behaviour, z, model.horizon, rng).features())
    return np.concatenate(feats, axis=-2)


def overfitting_returns(model: Model, tasks: list[TaskSpec], heldout: np.ndarray | None,
                        rng: np.random.Generator, episodes: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """``(off_policy, on_policy)`` returns per task with equal transition counts.

    Off-policy context: ``episodes * horizon`` transitions drawn uniformly from
    the held-out store. On-policy context: ``episodes`` fresh explorer rollouts.
    """
    if heldout is None:
        raise ProtocolError("overfitting evaluation needs a held-out buffer per test task")
    n = episodes * model.horizon
    idx = rng.integers(0, heldout.shape[-2], size=(len(tasks), n))
    context = np.take_along_axis(heldout, idx[..., None], axis=-2)
    off = return_from_context(model, tasks, context, rng)
    on = np.array([t.final_return for t in adapt_batch(model, tasks, episodes, rng)])
    return off, on


def reward_histogram(trace: AdaptationTrace, bins: int | np.ndarray = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per explorer episode reward counts over shared bin edges: ``(edges, counts[episodes, bins])``."""
    if not trace.explorer_rewards:
        raise ValueError("trace has no explorer episodes")
    rewards = np.stack(trace.explorer_rewards)
    if np.isscalar(bins):
        lo, hi = float(rewards.min()), float(rewards.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
    counts = np.stack([np.histogram(r, bins=edges)[0] for r in rewards])
    return edges, counts


def support_width(rewards: np.ndarray) -> float:
    rewards = np.asarray(rewards)
    return float(rewards.max() - rewards.min())

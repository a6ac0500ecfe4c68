"""Single-task SAC check: a fixed task with ``z`` pinned to zero."""

from __future__ import annotations

import numpy as np

from caster import agents as ag
from caster.buffer import ReplayBuffer, stack_batches
from caster.rollout import policy_behaviour, run_episodes
from caster.shaping import shaped_reward
from caster.tasks import TaskSpec, get_family


def single_task_sac(task: TaskSpec, env_steps: int = 20_000, seed: int = 0, latent_dim: int = 5,
                    batch_size: int = 128, updates_per_episode: int | None = None, horizon: int = 20,
                    gamma: float = 0.99, tau: float = 0.005, lr: float = 3e-4, hidden: tuple[int, ...] = (64, 64),
                    init_alpha: float = 1.0, warmup_episodes: int = 5, track_shaped_every: int = 0) -> dict:
    """Train SAC on one task and report the deterministic policy's final distance to goal.

    Args:
        track_shaped_every: when positive, record the mean shaped reward over
            the whole buffer every this many episodes (key ``shaped_trace``).
    """
    fam = get_family(task.family)
    rng = np.random.default_rng(seed)
    agent = ag.make_agent(fam.state_dim, latent_dim, fam.action_dim, rng, hidden, lr=lr, init_alpha=init_alpha)
    buffer = ReplayBuffer(env_steps + horizon, fam.state_dim, fam.action_dim, task.index)
    params = task.param_array[None]
    z = np.zeros((1, latent_dim))
    updates = horizon if updates_per_episode is None else updates_per_episode
    episodes = env_steps // horizon
    shaped_trace = []
    for episode in range(episodes):
        ep = run_episodes(task.family, params, policy_behaviour(agent.policy), z, horizon, rng)
        buffer.add(*ep.task_slice(0))
        if episode + 1 < warmup_episodes:
            continue
        for _ in range(updates):
            batch = stack_batches([buffer.sample(batch_size, rng)])
            ag.sac_update(agent, batch, z, gamma, tau, rng)
        if track_shaped_every and (episode + 1) % track_shaped_every == 0:
            shaped_trace.append(float(np.mean(shaped_reward(agent.critic, agent.policy, buffer.all(), z[0],
                                                            gamma=gamma))))
    final = run_episodes(task.family, params, policy_behaviour(agent.policy, deterministic=True), z, horizon, rng)
    return {
        "env_steps": episodes * horizon,
        "final_return": float(final.returns[0]),
        "final_distance": float(np.linalg.norm(final.next_obs[0, -1] - task.param_array)),
        "alpha": agent.temperature.alpha,
        "shaped_trace": shaped_trace,
    }

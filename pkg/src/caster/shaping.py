"""Information-gain proxy reward for the explorer.

A transition is worth exploring when the actor's critic, conditioned on the
current task hypothesis ``z``, explains it badly: the shaped reward is the
scaled absolute TD residual

    r_shaped = scale * |Q(s, a, z) - (r + gamma * Q_target(s', pi_det(s', z), z))|

Shaped rewards are computed at update time from the current critic and belief
and never written back into buffers.
"""

from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from caster import numerics as nx
from caster.agents import Batch, CriticParams, PolicyParams, policy_sample, q_value
from caster.encoder import GaussianBelief

logger = logging.getLogger(__name__)


def shaped_reward(critic: CriticParams, policy: PolicyParams, batch: Batch, z, scale: float = 1.0,
                  gamma: float = 0.99) -> np.ndarray:
    """Non-negative shaped reward per transition in ``batch``.

    ``z`` broadcasts over the batch rows. The greedy next action is the
    actor's deterministic action; both Q terms take the minimum over twins.
    """
    z = nx.detach(z)
    q1, q2 = q_value(critic.frozen(), batch.obs, batch.act, z)
    a_next, _ = policy_sample(policy.frozen(), batch.next_obs, z, deterministic=True)
    t1, t2 = q_value(critic, batch.next_obs, a_next.data, z, target=True)
    q = np.minimum(q1.data, q2.data)
    target = batch.source_rew + gamma * np.minimum(t1.data, t2.data)
    return scale * np.abs(q - target)


def relabel_explorer_batch(batch: Batch, beliefs: Mapping[int, GaussianBelief], critic: CriticParams,
                           policy: PolicyParams, scale: float = 1.0, gamma: float = 0.99,
                           rng: np.random.Generator | None = None) -> Batch:
    """Copy of a flat ``batch`` whose rewards are replaced by shaped rewards.

    Each row uses ``z`` from its task's belief: the mean when ``rng`` is None,
    otherwise one sample per task. Tasks without a belief fall back to the
    prior. The input batch is left untouched, and environment rewards are
    carried along so relabelling an already relabelled batch is a no-op.
    """
    if batch.task is None:
        raise ValueError("relabelling needs per-row task indices")
    latent_dim = next(iter(beliefs.values())).mean.shape[-1] if beliefs else None
    rows_z = None
    for task in np.unique(batch.task):
        belief = beliefs.get(int(task))
        if belief is None:
            if latent_dim is None:
                raise ValueError("no beliefs given and latent dimension unknown")
            logger.warning("no belief for task %d; using the prior", int(task))
            belief = GaussianBelief.prior(latent_dim)
        if rng is None:
            z = belief.mean.data
        else:
            z = belief.sample(rng.standard_normal(belief.mean.shape)).data
        if rows_z is None:
            rows_z = np.zeros(batch.rew.shape + (z.shape[-1],))
        rows_z[batch.task == task] = z
    return batch.with_rewards(shaped_reward(critic, policy, batch, rows_z, scale, gamma))

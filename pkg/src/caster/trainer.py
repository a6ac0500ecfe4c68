"""Alternating variational-EM meta-training.

The encoder parameters (theta) are fitted in E-steps: a context sampled from a
task's explorer buffer is encoded, ``z`` is drawn by reparameterisation, and
the actor critic's TD error on the task's actor buffer plus a KL penalty is
minimised through ``z``. Policies, critics and temperatures (phi) are fitted in
M-steps by soft actor-critic with ``z`` held constant; the explorer learns from
shaped rewards. Step ``k`` of training is an E-step when
``k mod (e + m) < e``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from caster import agents as ag
from caster import encoder as enc
from caster import numerics as nx
from caster.agents import Batch, SacAgent
from caster.buffer import ReplayBuffer, stack_batches
from caster.config import TrainConfig
from caster.encoder import EncoderParams
from caster.rollout import Model, explore, policy_behaviour, run_episodes, sample_z
from caster.shaping import shaped_reward
from caster.tasks import ProtocolError, TaskSpec, get_family, sample_tasks, task_params

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "env_steps", "episodes", "train_steps", "test_return", "test_return_std", "zero_shot_return",
    "e_loss", "m_loss", "kl", "shaped_reward", "actor_alpha", "explorer_alpha",
]


class PartitionViolation(ProtocolError):
    """An E-step touched phi or an M-step touched theta."""


class TrainingAborted(nx.NumericError):
    """A non-finite training quantity; ``snapshot`` holds the diagnostic state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def diagnostic_snapshot(state: TrainerState, out: dict) -> dict:
    """Step counters, the offending step's outputs and per-group parameter health."""
    def health(tensors):
        data = [t.data for t in tensors]
        return {"checksum": nx.checksum(tensors),
                "all_finite": bool(all(np.all(np.isfinite(d)) for d in data)),
                "max_abs": float(max((np.max(np.abs(d)) for d in data if d.size), default=0.0))}
    return {"train_step": state.step - 1, "env_steps": state.env_steps, "episodes": state.episodes,
            "outputs": {k: v for k, v in out.items()}, "theta": health(state.theta()), "phi": health(state.phi())}


def step_kind(step: int, e_steps: int, m_steps: int) -> str:
    return "E" if step % (e_steps + m_steps) < e_steps else "M"


def make_task_sets(config: TrainConfig) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Train and held-out test tasks from disjoint seed streams.

    With ``single_task`` every task reuses the first train task's parameters
    (indices stay distinct), so a belief carries no task information.
    """
    train_rng = np.random.default_rng(np.random.SeedSequence(config.task_seed, spawn_key=(0,)))
    test_rng = np.random.default_rng(np.random.SeedSequence(config.task_seed, spawn_key=(1,)))
    train = sample_tasks(config.family, config.num_train_tasks, train_rng)
    test = sample_tasks(config.family, config.num_test_tasks, test_rng, start_index=config.num_train_tasks)
    if config.single_task:
        train = [replace(t, params=train[0].params) for t in train]
        test = [replace(t, params=train[0].params) for t in test]
    return train, test


@dataclass
class TrainerState:
    config: TrainConfig
    encoder: EncoderParams
    encoder_opt: nx.AdamState
    actor: SacAgent
    explorer: SacAgent | None
    train_tasks: list[TaskSpec]
    test_tasks: list[TaskSpec]
    actor_buffers: list[ReplayBuffer]
    explorer_buffers: list[ReplayBuffer]
    rng: np.random.Generator
    step: int = 0
    episodes: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def env_steps(self) -> int:
        return self.episodes * self.config.horizon

    def theta(self) -> list[nx.Tensor]:
        return self.encoder.tensors()

    def phi(self) -> list[nx.Tensor]:
        out = self.actor.tensors()
        if self.explorer is not None:
            out += self.explorer.tensors()
        return out

    def model(self) -> Model:
        cfg = self.config
        return Model(cfg.family, self.encoder, self.actor.policy,
                     None if self.explorer is None else self.explorer.policy,
                     cfg.explorer, cfg.latent_dim, cfg.horizon, cfg.actor_z)


def build_networks(config: TrainConfig, rng: np.random.Generator) -> tuple[EncoderParams, SacAgent, SacAgent | None]:
    """Freshly initialised encoder, actor and (for ``explorer = rs``) explorer."""
    fam = get_family(config.family)
    feat = enc.feature_dim(fam.state_dim, fam.action_dim)
    encoder = enc.init_encoder(config.encoder, feat, rng, config.channels, config.latent_nodes,
                               config.latent_dim, config.hidden, config.attention_iterations, config.activation)

    def agent(init_alpha, target_entropy):
        return ag.make_agent(fam.state_dim, config.latent_dim, fam.action_dim, rng, config.hidden_sizes,
                             config.activation, config.lr, init_alpha=init_alpha,
                             target_entropy=target_entropy, learn_temperature=config.learn_temperature,
                             optimizer=config.optimizer)

    actor = agent(config.init_alpha, config.target_entropy)
    explorer = agent(config.explorer_init_alpha, config.explorer_target_entropy) if config.explorer == "rs" else None
    return encoder, actor, explorer


def init_state(config: TrainConfig) -> TrainerState:
    fam = get_family(config.family)
    init_rng, run_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    encoder, actor, explorer = build_networks(config, init_rng)
    train, test = make_task_sets(config)

    def buffers(role):
        return [ReplayBuffer(config.buffer_capacity, fam.state_dim, fam.action_dim, t.index, role) for t in train]

    return TrainerState(config, encoder,
                        nx.AdamState.for_params(encoder, lr=config.encoder_lr, method=config.optimizer),
                        actor, explorer, train, test, buffers("actor"), buffers("explorer"), run_rng)


def collect_episodes(state: TrainerState, task_ids, explorer_episodes: int, actor_episodes: int) -> int:
    """Roll out explorer then actor episodes on the given training tasks.

    Explorer episodes follow the posterior-sampling loop and go to the explorer
    buffers; actor episodes are conditioned on ``z`` from the resulting belief
    and go to the actor buffers. Returns the number of episodes collected.
    """
    cfg = state.config
    task_ids = list(task_ids)
    params = task_params([state.train_tasks[i] for i in task_ids])
    model = state.model()
    collected = 0
    if explorer_episodes > 0:
        episodes, beliefs = explore(model, params, explorer_episodes, state.rng)
        for ep in episodes:
            for j, i in enumerate(task_ids):
                state.explorer_buffers[i].add(*ep.task_slice(j))
        collected += explorer_episodes
        final = beliefs[-1]
    else:
        final = enc.GaussianBelief.prior(cfg.latent_dim, (len(task_ids),))
    for _ in range(actor_episodes):
        ep = run_episodes(cfg.family, params, policy_behaviour(state.actor.policy), sample_z(final, state.rng),
                          cfg.horizon, state.rng)
        for j, i in enumerate(task_ids):
            state.actor_buffers[i].add(*ep.task_slice(j))
        collected += 1
    state.episodes += collected * len(task_ids)
    return collected * len(task_ids)


def _ready(state: TrainerState, task_ids) -> list[int]:
    ready = [i for i in task_ids if len(state.actor_buffers[i]) and len(state.explorer_buffers[i])]
    if len(ready) < len(task_ids):
        logger.warning("skipping %d tasks with empty buffers", len(task_ids) - len(ready))
    if not ready:
        raise ProtocolError("every task in the meta-batch has an empty buffer")
    return ready


def sample_context(state: TrainerState, task_ids) -> np.ndarray:
    cfg = state.config
    recent = cfg.recent_window if cfg.recent_context else None
    rows = [state.explorer_buffers[i].sample(cfg.context_size, state.rng, recent) for i in task_ids]
    return np.stack([enc.context_features(b.obs, b.act, b.rew, b.next_obs) for b in rows])


def sample_rl_batch(buffers: list[ReplayBuffer], task_ids, n: int, rng: np.random.Generator) -> Batch:
    return stack_batches([buffers[i].sample(n, rng) for i in task_ids])


def e_objective(encoder: EncoderParams, actor: SacAgent, context, batch: Batch, z_noise: np.ndarray,
                next_noise: np.ndarray, gamma: float, kl_weight: float) -> tuple[nx.Tensor, dict[str, float]]:
    """E-step loss: actor-critic TD error through a reparameterised ``z`` plus weighted KL.

    Only the encoder can receive gradient; critic and policy are frozen views.
    """
    belief = enc.infer(encoder, context)
    z = belief.sample(z_noise)
    td = ag.sac_critic_loss(actor.critic.frozen(), actor.policy.frozen(), actor.temperature, batch, z, gamma,
                            noise=next_noise)
    kl = nx.mean(enc.kl_to_prior(belief))
    return td + kl_weight * kl, {"e_td": td.item(), "kl": kl.item()}


def e_step(state: TrainerState, task_ids) -> dict[str, float]:
    """Fit the encoder on a meta-batch; touches theta only."""
    cfg = state.config
    task_ids = _ready(state, task_ids)
    context = sample_context(state, task_ids)
    batch = sample_rl_batch(state.actor_buffers, task_ids, cfg.batch_size, state.rng)
    z_noise = state.rng.standard_normal((len(task_ids), cfg.latent_dim))
    next_noise = state.rng.standard_normal(batch.act.shape)
    parts = {}

    def loss():
        value, info = e_objective(state.encoder, state.actor, context, batch, z_noise, next_noise,
                                  cfg.gamma, cfg.kl_weight)
        parts.update(info)
        return value

    value, grads = nx.value_and_grad(loss, state.encoder)
    nx.adam_step(state.encoder_opt, state.encoder, grads)
    return {"e_loss": value, **parts}


def task_latents(state: TrainerState, context: np.ndarray) -> np.ndarray:
    """One ``z`` per task from the current encoder, outside any tape."""
    belief = enc.infer(state.encoder, context)
    return belief.mean.data + np.exp(belief.log_std.data) * state.rng.standard_normal(belief.mean.shape)


def m_objective(actor: SacAgent, explorer: SacAgent | None, actor_batch: Batch, explorer_batch: Batch | None,
                z: np.ndarray, gamma: float, reward_scale: float,
                actor_noise: np.ndarray, explorer_noise: np.ndarray | None = None) -> float:
    """M-step TD objective: actor critic loss on environment rewards plus explorer
    critic loss on shaped rewards, both evaluated before any update."""
    total = ag.sac_critic_loss(actor.critic, actor.policy, actor.temperature, actor_batch, z, gamma,
                               noise=actor_noise).item()
    if explorer is not None:
        shaped = shaped_reward(actor.critic, actor.policy, explorer_batch, z, reward_scale, gamma)
        total += ag.sac_critic_loss(explorer.critic, explorer.policy, explorer.temperature,
                                    explorer_batch.with_rewards(shaped), z, gamma, noise=explorer_noise).item()
    return total


def m_step(state: TrainerState, task_ids) -> dict[str, float]:
    """SAC updates for the actor (environment reward) and explorer (shaped reward); touches phi only."""
    cfg = state.config
    task_ids = _ready(state, task_ids)
    z = task_latents(state, sample_context(state, task_ids))
    actor_batch = sample_rl_batch(state.actor_buffers, task_ids, cfg.batch_size, state.rng)
    actor_noise = (state.rng.standard_normal(actor_batch.act.shape), state.rng.standard_normal(actor_batch.act.shape))
    out = {}
    explorer_batch = explorer_noise = None
    if state.explorer is not None:
        explorer_batch = sample_rl_batch(state.explorer_buffers, task_ids, cfg.batch_size, state.rng)
        explorer_noise = (state.rng.standard_normal(explorer_batch.act.shape),
                          state.rng.standard_normal(explorer_batch.act.shape))
        # shaped rewards come from the actor critic as it stands before this step's update
        explorer_batch = explorer_batch.with_rewards(
            shaped_reward(state.actor.critic, state.actor.policy, explorer_batch, z, cfg.reward_scale, cfg.gamma))
        out["shaped_reward"] = float(explorer_batch.rew.mean())
    actor_stats = ag.sac_update(state.actor, actor_batch, z, cfg.gamma, cfg.tau, noise=actor_noise)
    out["m_loss"] = actor_stats["critic_loss"]
    out["actor_alpha"] = actor_stats["alpha"]
    if state.explorer is not None:
        explorer_stats = ag.sac_update(state.explorer, explorer_batch, z, cfg.gamma, cfg.tau, noise=explorer_noise)
        out["m_loss"] += explorer_stats["critic_loss"]
        out["explorer_alpha"] = explorer_stats["alpha"]
    return out


def train_step(state: TrainerState) -> dict[str, float]:
    """Sample a meta-batch and run the E- or M-step due at the current step."""
    cfg = state.config
    task_ids = sorted(state.rng.choice(len(state.train_tasks), cfg.meta_batch, replace=False).tolist())
    kind = step_kind(state.step, cfg.e_steps, cfg.m_steps)
    if cfg.debug:
        before = nx.checksum(state.theta()), nx.checksum(state.phi())
        with nx.debug_mode():
            out = e_step(state, task_ids) if kind == "E" else m_step(state, task_ids)
        after = nx.checksum(state.theta()), nx.checksum(state.phi())
        frozen = 1 if kind == "E" else 0
        if before[frozen] != after[frozen]:
            raise PartitionViolation(f"{kind}-step {state.step} changed {'phi' if frozen else 'theta'}")
        state.stats["partition_checks"] = state.stats.get("partition_checks", 0) + 1
    else:
        out = e_step(state, task_ids) if kind == "E" else m_step(state, task_ids)
    out["kind"] = kind
    state.step += 1
    return out


def _mean(rows: list[dict], key: str) -> float:
    vals = [r[key] for r in rows if key in r]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_progress(state: TrainerState, index: int) -> dict[str, float]:
    """Test-task returns after ``eval_episodes`` adaptation episodes, and zero-shot.

    Uses its own random stream so evaluation never perturbs training.
    """
    from caster.harness.adaptation import adapt_batch

    cfg = state.config
    rng = np.random.default_rng([cfg.seed, 1_000_003, index])
    traces = adapt_batch(state.model(), state.test_tasks, cfg.eval_episodes, rng)
    zero = adapt_batch(state.model(), state.test_tasks, 0, rng)
    returns = np.array([t.final_return for t in traces])
    return {"test_return": float(returns.mean()), "test_return_std": float(returns.std()),
            "zero_shot_return": float(np.mean([t.final_return for t in zero]))}


def meta_train(config: TrainConfig, on_row: Callable[[dict], None] | None = None,
               state: TrainerState | None = None,
               on_checkpoint: Callable[[TrainerState], None] | None = None) -> tuple[TrainerState, list[dict]]:
    """Run the full loop until ``total_env_steps``; returns the state and metric rows.

    Args:
        on_row: called with each metrics row as soon as it is produced.
        state: resume from an existing state instead of initialising one.
        on_checkpoint: called whenever another ``checkpoint_every`` env steps
            have passed (never when ``checkpoint_every`` is 0).

    Raises:
        TrainingAborted: a loss or statistic became non-finite.
    """
    cfg = config
    state = state or init_state(cfg)
    everyone = list(range(len(state.train_tasks)))
    collect_episodes(state, everyone, cfg.initial_explorer_episodes, cfg.initial_actor_episodes)
    rows: list[dict] = []
    window: list[dict] = []
    next_eval = 0
    next_checkpoint = cfg.checkpoint_every
    n_eval = 0

    def emit():
        nonlocal n_eval
        row = {"env_steps": state.env_steps, "episodes": state.episodes, "train_steps": state.step}
        row.update(evaluate_progress(state, n_eval))
        for key in ("e_loss", "m_loss", "kl", "shaped_reward", "actor_alpha", "explorer_alpha"):
            row[key] = _mean(window, key)
        window.clear()
        rows.append(row)
        n_eval += 1
        if on_row is not None:
            on_row(row)
        logger.info("env_steps=%d test_return=%.3f zero_shot=%.3f", row["env_steps"], row["test_return"],
                    row["zero_shot_return"])

    while state.env_steps < cfg.total_env_steps:
        chosen = sorted(state.rng.choice(len(state.train_tasks), cfg.tasks_per_iteration, replace=False).tolist())
        collect_episodes(state, chosen, cfg.explorer_episodes, cfg.actor_episodes)
        for _ in range(cfg.train_steps_per_iteration):
            out = train_step(state)
            for key, value in out.items():
                if isinstance(value, float) and not np.isfinite(value):
                    raise TrainingAborted(f"non-finite {key} at train step {state.step - 1}",
                                          diagnostic_snapshot(state, out))
            window.append(out)
        if state.env_steps >= next_eval:
            emit()
            while next_eval <= state.env_steps:
                next_eval += cfg.eval_every
        if on_checkpoint is not None and cfg.checkpoint_every and state.env_steps >= next_checkpoint:
            on_checkpoint(state)
            while next_checkpoint <= state.env_steps:
                next_checkpoint += cfg.checkpoint_every
    if not rows or rows[-1]["env_steps"] != state.env_steps:
        emit()
    return state, rows

"""Synthetic task families: each task is a small MDP with hidden parameters.

Three families cover the two ways tasks can differ:

* ``point-robot``: 2-D navigation to a goal on the unit circle (reward varies).
* ``velocity-match``: 1-D damped cart that should hold a target velocity
  (reward varies).
* ``rand-params-mass``: 1-D cart with random mass and friction, rewarded for
  velocity (dynamics vary).

The environment is pure: :func:`step` maps ``(task, state, action)`` to the
next state without hidden mutable state. Batched kernels (``*_batch``) step
many tasks of one family at once and are what rollouts use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

HORIZON = 20
ACTION_LOW, ACTION_HIGH = -1.0, 1.0
POINT_BOUND = 1.5
MASS_DT = 0.1


class ConfigError(ValueError):
    """Unknown family or invalid configuration value."""


class ProtocolError(RuntimeError):
    """An operation was invoked out of the order its contract allows."""


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: tuple[float, ...]
    index: int = 0

    @property
    def param_array(self) -> np.ndarray:
        return np.asarray(self.params, dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    state: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


def _point_sample(rng: np.random.Generator) -> tuple[float, ...]:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return (float(np.cos(angle)), float(np.sin(angle)))


def _point_step(params: np.ndarray, states: np.ndarray, actions: np.ndarray):
    nxt = np.clip(states + 0.1 * actions, -POINT_BOUND, POINT_BOUND)
    reward = -np.linalg.norm(nxt - params, axis=-1)
    return nxt, reward


def _velocity_sample(rng: np.random.Generator) -> tuple[float, ...]:
    return (float(rng.uniform(0.0, 1.0)),)


def _velocity_step(params: np.ndarray, states: np.ndarray, actions: np.ndarray):
    a = actions[..., 0]
    v = 0.9 * states[..., 1] + 0.1 * a
    x = states[..., 0] + v
    reward = -np.abs(v - params[..., 0]) - 0.01 * a * a
    return np.stack([x, v], axis=-1), reward


def _mass_sample(rng: np.random.Generator) -> tuple[float, ...]:
    return (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.05, 0.5)))


def _mass_step(params: np.ndarray, states: np.ndarray, actions: np.ndarray):
    mass, friction = params[..., 0], params[..., 1]
    v = states[..., 1] + (actions[..., 0] - friction * states[..., 1]) / mass * MASS_DT
    x = states[..., 0] + v * MASS_DT
    return np.stack([x, v], axis=-1), v.copy()


@dataclass(frozen=True)
class Family:
    name: str
    state_dim: int
    action_dim: int
    sampler: Callable[[np.random.Generator], tuple[float, ...]]
    kernel: Callable
    varies: str  # "reward" or "transition"

    def initial_states(self, n: int) -> np.ndarray:
        return np.zeros((n, self.state_dim))

    def step_batch(self, params: np.ndarray, states: np.ndarray, actions: np.ndarray):
        """Vectorised step over a leading task axis; actions are clipped to the box."""
        clipped = np.clip(actions, ACTION_LOW, ACTION_HIGH)
        if logger.isEnabledFor(logging.DEBUG) and np.any(clipped != actions):
            logger.debug("clipped %d action components to the box", int(np.sum(clipped != actions)))
        return self.kernel(params, states, clipped)


FAMILIES: dict[str, Family] = {
    "point-robot": Family("point-robot", 2, 2, _point_sample, _point_step, "reward"),
    "velocity-match": Family("velocity-match", 2, 1, _velocity_sample, _velocity_step, "reward"),
    "rand-params-mass": Family("rand-params-mass", 2, 1, _mass_sample, _mass_step, "transition"),
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown task family {name!r}; expected one of {sorted(FAMILIES)}") from None


def sample_task(family: str, rng: np.random.Generator, index: int = 0) -> TaskSpec:
    return TaskSpec(family, get_family(family).sampler(rng), index)


def sample_tasks(family: str, n: int, rng: np.random.Generator, start_index: int = 0) -> list[TaskSpec]:
    return [sample_task(family, rng, start_index + i) for i in range(n)]


def reset(task: TaskSpec, rng: np.random.Generator | None = None) -> EnvState:
    # Initial state is deterministic for every family; rng kept for interface symmetry.
    return EnvState(get_family(task.family).initial_states(1)[0], 0)


def step(task: TaskSpec, state: EnvState, action, horizon: int = HORIZON) -> tuple[EnvState, float, bool]:
    if state.t >= horizon:
        raise ProtocolError(f"episode already finished at step {state.t} (horizon {horizon})")
    fam = get_family(task.family)
    action = np.asarray(action, dtype=np.float64).reshape(fam.action_dim)
    nxt, reward = fam.step_batch(task.param_array[None], state.state[None], action[None])
    t = state.t + 1
    return EnvState(nxt[0], t), float(reward[0]), t >= horizon


def task_params(tasks: list[TaskSpec]) -> np.ndarray:
    return np.stack([t.param_array for t in tasks])

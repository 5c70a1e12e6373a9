"""Deterministic multi-task point-reach environment with scripted experts.

A point mass in the plane must reach one of K goals spaced evenly on the unit
circle. Dynamics are a clipped velocity integrator, so every rollout is exactly
reproducible from its action sequence. The scripted expert is a clipped
proportional controller; suboptimal data corrupts expert actions with Gaussian
noise before clipping, which keeps the visited states realistic while degrading
the actions.

Policies observe (position, goal) as a 4-vector. `mask_goal` zeroes the goal
half of each state for the no-goal-conditioning ablation, which turns the K
tasks into genuinely conflicting demonstrations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Trajectory


@dataclass(frozen=True)
class EnvSpec:
    num_tasks: int = 8
    dt: float = 0.1
    gain: float = 5.0
    action_clip: float = 1.0
    success_radius: float = 0.1
    max_steps: int = 50
    start_low: float = -1.0
    start_high: float = 1.0

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def goal(self, task_id: int) -> np.ndarray:
        angle = 2.0 * math.pi * task_id / self.num_tasks
        return np.array([math.cos(angle), math.sin(angle)])

    def goals(self) -> np.ndarray:
        return np.stack([self.goal(k) for k in range(self.num_tasks)])


@dataclass(frozen=True)
class RolloutResult:
    success: bool
    steps_taken: int
    final_distance: float


def env_step(pos: np.ndarray, action: np.ndarray, spec: EnvSpec) -> np.ndarray:
    """pos + dt * clip(action), clipped per coordinate."""
    a = np.clip(np.asarray(action, dtype=float), -spec.action_clip, spec.action_clip)
    return np.asarray(pos, dtype=float) + spec.dt * a


def expert_action(pos: np.ndarray, goal: np.ndarray, spec: EnvSpec) -> np.ndarray:
    """Clipped proportional controller toward the goal."""
    return np.clip(spec.gain * (np.asarray(goal) - np.asarray(pos)),
                   -spec.action_clip, spec.action_clip)


def observation(pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    return np.concatenate([pos, goal])


def mask_goal_states(states: np.ndarray) -> np.ndarray:
    """Zero the goal half of (pos, goal) observations."""
    out = np.array(states, dtype=float)
    out[:, 2:] = 0.0
    return out


def mask_goal(trajs: list[Trajectory]) -> list[Trajectory]:
    """Copies of `trajs` with goal observations zeroed (no-goal ablation)."""
    return [
        Trajectory(t.traj_id, t.task_id, t.source_tag, mask_goal_states(t.states), t.actions.copy())
        for t in trajs
    ]


def run_episode(policy_fn, spec: EnvSpec, task_id: int, start: np.ndarray,
                record: bool = False):
    """Roll `policy_fn` from `start` until success or max_steps.

    Success is checked before each action, so a start inside the success radius
    succeeds in zero steps. Returns (RolloutResult, states, actions); the state
    and action lists are empty unless `record` is set.
    """
    goal = spec.goal(task_id)
    pos = np.asarray(start, dtype=float)
    states, actions = [], []
    for t in range(spec.max_steps):
        dist = float(np.linalg.norm(goal - pos))
        if dist < spec.success_radius:
            return RolloutResult(True, t, dist), states, actions
        a = np.asarray(policy_fn(observation(pos, goal)), dtype=float)
        if record:
            states.append(observation(pos, goal))
            actions.append(np.clip(a, -spec.action_clip, spec.action_clip))
        pos = env_step(pos, a, spec)
    dist = float(np.linalg.norm(goal - pos))
    return RolloutResult(dist < spec.success_radius, spec.max_steps, dist), states, actions


def _record_trajectory(spec: EnvSpec, task_id: int, traj_id: int, source_tag: str,
                       policy_fn, rng: np.random.Generator) -> Trajectory:
    # Redraw starts that are already successful so trajectories are never empty.
    while True:
        start = rng.uniform(spec.start_low, spec.start_high, size=2)
        if np.linalg.norm(spec.goal(task_id) - start) >= spec.success_radius:
            break
    _, states, actions = run_episode(policy_fn, spec, task_id, start, record=True)
    return Trajectory(traj_id, task_id, source_tag, np.stack(states), np.stack(actions))


def generate_prior(spec: EnvSpec, n_expert_per_task: int, n_noisy_per_task: int,
                   noise_sigma: float = 0.5, seed: int = 0) -> list[Trajectory]:
    """Scripted-expert and noise-corrupted demonstrations for every task.

    Noisy trajectories perturb each expert action with N(0, noise_sigma^2)
    noise before clipping; they visit similar states with degraded actions.
    Every trajectory's randomness derives from (seed, task, index, source), so
    the dataset is reproducible element by element.
    """
    if n_expert_per_task < 0 or n_noisy_per_task < 0:
        raise ValueError("trajectory counts must be >= 0")
    trajs: list[Trajectory] = []
    for task in range(spec.num_tasks):
        goal = spec.goal(task)
        for j in range(n_expert_per_task):
            rng = np.random.default_rng([seed, task, j, 0])
            fn = lambda obs: expert_action(obs[:2], goal, spec)
            trajs.append(_record_trajectory(spec, task, len(trajs), "expert", fn, rng))
        for j in range(n_noisy_per_task):
            rng = np.random.default_rng([seed, task, j, 1])

            def noisy_fn(obs, _rng=rng):
                raw = spec.gain * (goal - obs[:2]) + _rng.normal(0.0, noise_sigma, size=2)
                return np.clip(raw, -spec.action_clip, spec.action_clip)

            trajs.append(_record_trajectory(spec, task, len(trajs), "suboptimal", noisy_fn, rng))
    return trajs


def generate_target(spec: EnvSpec, task_id: int, n_demos: int, seed: int = 0) -> list[Trajectory]:
    """Expert demonstrations for one task, tagged as target data."""
    trajs = []
    goal = spec.goal(task_id)
    for j in range(n_demos):
        rng = np.random.default_rng([seed, task_id, j, 2])
        fn = lambda obs: expert_action(obs[:2], goal, spec)
        trajs.append(_record_trajectory(spec, task_id, j, "target", fn, rng))
    return trajs


def replay_states(traj: Trajectory, spec: EnvSpec) -> np.ndarray:
    """Positions obtained by replaying the stored actions from the stored start."""
    pos = traj.states[0, :2].copy()
    out = [pos.copy()]
    for a in traj.actions[:-1]:
        pos = env_step(pos, a, spec)
        out.append(pos.copy())
    return np.stack(out)


def replay_success(traj: Trajectory, spec: EnvSpec) -> bool:
    """Whether replaying the stored actions reaches the goal within max_steps."""
    goal = spec.goal(traj.task_id)
    pos = traj.states[0, :2].copy()
    for t in range(spec.max_steps):
        if np.linalg.norm(goal - pos) < spec.success_radius:
            return True
        if t < len(traj.actions):
            pos = env_step(pos, traj.actions[t], spec)
        # After the recorded actions run out the point stays put.
    return bool(np.linalg.norm(goal - pos) < spec.success_radius)


def rollout_success_rate(policy_fn, spec: EnvSpec, task_id: int,
                         n_rollouts: int, seed: int) -> float:
    """Fraction of seeded random-start episodes that reach the goal.

    Episode i draws its start from default_rng([seed, i]), so serial and
    parallel evaluation produce identical results.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    successes = 0
    for i in range(n_rollouts):
        rng = np.random.default_rng([seed, i])
        start = rng.uniform(spec.start_low, spec.start_high, size=2)
        result, _, _ = run_episode(policy_fn, spec, task_id, start)
        successes += int(result.success)
    return successes / n_rollouts

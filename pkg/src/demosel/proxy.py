"""Rollout-free differentiable stand-in for task success.

The proxy value of a policy is the negative mean behavior-cloning loss over
the held-out target demonstrations, normalized by the total pair count so
targets of different lengths stay comparable. Optionally, pairs near the goal
are up-weighted to emphasize the part of the task that decides success.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as P
from .dataset import Trajectory, stack_pairs


@dataclass(frozen=True)
class StateWeights:
    """Per-pair weights: uniform, or `weight` for pairs within `radius` of the goal.

    The goal defaults to the goal half of the stored observation; pass an
    explicit `goal` when observations have it masked out.
    """

    rule: str = "uniform"    # uniform | near_goal
    radius: float = 0.2
    weight: float = 2.0
    goal: tuple[float, float] | None = None

    def __post_init__(self):
        if self.rule not in ("uniform", "near_goal"):
            raise ValueError(f"unknown weighting rule {self.rule!r}")
        if self.rule == "near_goal" and (self.radius <= 0 or self.weight <= 0):
            raise ValueError("near_goal weighting needs positive radius and weight")

    def pair_weights(self, states: np.ndarray) -> np.ndarray:
        if self.rule == "uniform":
            return np.ones(len(states))
        goal = np.asarray(self.goal, dtype=float) if self.goal is not None else states[:, 2:4]
        dist = np.linalg.norm(states[:, :2] - goal, axis=1)
        return np.where(dist < self.radius, self.weight, 1.0)


UNIFORM = StateWeights()


def _target_arrays(target_eval: list[Trajectory], weights: StateWeights):
    if not target_eval:
        raise ValueError("target_eval must be non-empty")
    states, actions = stack_pairs(target_eval)
    return states, actions, weights.pair_weights(states)


def proxy_metric(params, config: P.PolicyConfig, target_eval: list[Trajectory],
                 loss: str = "nll", weights: StateWeights = UNIFORM) -> float:
    """-(1/n) * sum_i w_i * loss(policy(s_i), a_i) over all target pairs. Higher is better."""
    states, actions, w = _target_arrays(target_eval, weights)
    value = -P.batch_loss(params, config, states, actions, w, loss)
    if not np.isfinite(value):
        raise ValueError("non-finite proxy value")
    return value


def grad_proxy(params, config: P.PolicyConfig, target_eval: list[Trajectory],
               loss: str = "nll", weights: StateWeights = UNIFORM) -> np.ndarray:
    """Exact gradient of proxy_metric with respect to the policy parameters."""
    states, actions, w = _target_arrays(target_eval, weights)
    g = -P.grad_loss_arrays(params, config, states, actions, w, loss)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite proxy gradient")
    return g

"""Weighted behavior-cloning training with an exactly replayable tape.

The learning algorithm maps (data, per-cluster weights z, config) to final
policy parameters. Batch losses are (1/|B|) * sum_i z_{c(i)} * loss_i, which is
linear in z for fixed batch membership; both estimators rely on that linearity.

Binary masks exclude zero-weight clusters from the sampling pool entirely
(subset training); continuous masks keep every pair and weight its loss.

Every stochastic choice derives from (seed, step), so a run is reproducible
bit for bit and the recorded tape supports exact replay and the reverse
(adjoint) pass of the metagradient estimator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import policy as P
from .dataset import Cluster, SubsetMask, Trajectory, pair_cluster_ids, stack_pairs
from .errors import TrainingDivergedError, TrainingSetupError

OPTIMIZERS = ("gd_full_batch", "sgd", "adam")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class CotrainConfig:
    """Final-policy co-training: draw each batch element from the target set
    with probability alpha, otherwise from the (weighted) prior pool."""

    target_set: list[Trajectory]
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class TrainConfig:
    policy: P.PolicyConfig
    steps: int
    learning_rate: float
    batch_size: int = 0           # ignored for gd_full_batch
    optimizer: str = "gd_full_batch"
    loss: str = "nll"
    seed: int = 0
    cotrain: CotrainConfig | None = None
    checkpoint_stride: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in P.LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.optimizer != "gd_full_batch" and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 for sampled-batch optimizers")
        if self.checkpoint_stride < 1:
            raise ValueError("checkpoint_stride must be >= 1")


class TrainingTape:
    """Deterministic record of one training run.

    Stores the config, the initial parameters, the resolved training pools,
    per-step batch membership, and parameter checkpoints (every
    `checkpoint_stride` steps; intermediate steps are recomputed on demand).
    Batch indices >= n_pool refer to the co-training target pool.
    """

    def __init__(self, config, initial_params, pool_states, pool_actions,
                 pool_weights, pool_cluster_ids, target_states, target_actions,
                 batches, n_clusters):
        self.config = config
        self.initial_params = initial_params
        self.pool_states = pool_states
        self.pool_actions = pool_actions
        self.pool_weights = pool_weights
        self.pool_cluster_ids = pool_cluster_ids
        self.target_states = target_states
        self.target_actions = target_actions
        self.batches = batches
        self.n_clusters = n_clusters
        self.checkpoints: dict[int, tuple] = {}
        self.final_params: np.ndarray | None = None

    @property
    def n_pool(self) -> int:
        return len(self.pool_states)

    @property
    def steps(self) -> int:
        return len(self.batches)

    def batch_arrays(self, t: int):
        """(states, actions, weights, cluster_ids) of the step-t batch."""
        idx = self.batches[t]
        from_target = idx >= self.n_pool
        if not np.any(from_target):
            return (self.pool_states[idx], self.pool_actions[idx],
                    self.pool_weights[idx], self.pool_cluster_ids[idx])
        states = np.empty((len(idx), self.pool_states.shape[1] if self.n_pool
                           else self.target_states.shape[1]))
        actions = np.empty((len(idx), self.pool_actions.shape[1] if self.n_pool
                            else self.target_actions.shape[1]))
        weights = np.ones(len(idx))
        cids = np.full(len(idx), -1, dtype=np.int64)
        prior = ~from_target
        if np.any(prior):
            p_idx = idx[prior]
            states[prior] = self.pool_states[p_idx]
            actions[prior] = self.pool_actions[p_idx]
            weights[prior] = self.pool_weights[p_idx]
            cids[prior] = self.pool_cluster_ids[p_idx]
        t_idx = idx[from_target] - self.n_pool
        states[from_target] = self.target_states[t_idx]
        actions[from_target] = self.target_actions[t_idx]
        return states, actions, weights, cids

    def params_at(self, t: int) -> np.ndarray:
        """Parameters before step t (t == steps gives the final parameters)."""
        if t in self.checkpoints:
            return self.checkpoints[t][0]
        base = max(s for s in self.checkpoints if s <= t)
        theta, opt_state = self.checkpoints[base]
        theta = theta.copy()
        opt_state = _copy_opt_state(opt_state)
        for s in range(base, t):
            theta, opt_state = _apply_step(self, theta, opt_state, s)
        return theta


def _copy_opt_state(state):
    if state is None:
        return None
    m, v, t = state
    return m.copy(), v.copy(), t


def _apply_step(tape: TrainingTape, theta, opt_state, t):
    cfg = tape.config
    bs, ba, bw, _ = tape.batch_arrays(t)
    loss, g = P.loss_and_grad_arrays(theta, cfg.policy, bs, ba, bw, cfg.loss)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise TrainingDivergedError(t)
    if cfg.optimizer == "adam":
        m, v, step = opt_state
        step += 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        opt_state = (m, v, step)
    else:
        theta = theta - cfg.learning_rate * g
    if not np.all(np.isfinite(theta)):
        raise TrainingDivergedError(t)
    return theta, opt_state


def _build_pool(clusters, prior, mask, extra):
    states, actions = stack_pairs(prior)
    cids = pair_cluster_ids(prior, clusters)
    if mask.kind == "binary":
        keep = mask.weights[cids] == 1.0
        states, actions, cids = states[keep], actions[keep], cids[keep]
        weights = np.ones(len(states))
    else:
        weights = mask.weights[cids].copy()
    if extra:
        ex_states, ex_actions = stack_pairs(extra)
        states = np.concatenate([states, ex_states])
        actions = np.concatenate([actions, ex_actions])
        weights = np.concatenate([weights, np.ones(len(ex_states))])
        cids = np.concatenate([cids, np.full(len(ex_states), -1, dtype=np.int64)])
    return states, actions, weights, cids


def _sample_batches(config: TrainConfig, n_pool: int, n_target: int):
    """Per-step batch membership; target rows are encoded as n_pool + j."""
    if config.optimizer == "gd_full_batch":
        if config.cotrain is not None:
            raise TrainingSetupError("co-training requires a sampled-batch optimizer")
        if n_pool == 0:
            raise TrainingSetupError("nothing to train on: the training pool is empty")
        full = np.arange(n_pool, dtype=np.int64)
        return [full] * config.steps

    b = config.batch_size
    alpha = config.cotrain.alpha if config.cotrain is not None else None
    if config.cotrain is None and n_pool == 0:
        raise TrainingSetupError("nothing to train on: the training pool is empty")
    if config.cotrain is not None and n_pool == 0 and alpha < 1.0:
        raise TrainingSetupError("empty prior pool: co-training needs alpha = 1.0")
    batches = []
    for t in range(config.steps):
        if config.cotrain is None:
            idx = np.random.default_rng([config.seed, 1, t, 1]).integers(0, n_pool, size=b)
        else:
            u = np.random.default_rng([config.seed, 1, t, 0]).random(b)
            take_target = u < alpha
            idx = np.empty(b, dtype=np.int64)
            if n_pool > 0:
                prior_idx = np.random.default_rng([config.seed, 1, t, 1]).integers(
                    0, n_pool, size=b)
                idx[~take_target] = prior_idx[~take_target]
            target_idx = np.random.default_rng([config.seed, 1, t, 2]).integers(
                0, n_target, size=b)
            idx[take_target] = n_pool + target_idx[take_target]
        batches.append(idx)
    return batches


def train(clusters: list[Cluster], prior: list[Trajectory], mask: SubsetMask,
          config: TrainConfig, extra: list[Trajectory] | None = None):
    """Run weighted behavior cloning; returns (final_params, tape).

    `extra` trajectories are always included in the prior pool with weight 1
    and no cluster attribution (used to mix target data into estimation runs).
    """
    if len(mask) != len(clusters):
        raise TrainingSetupError(
            f"mask length {len(mask)} does not match cluster count {len(clusters)}")
    if mask.kind == "binary" and not np.any(mask.weights) and not extra and config.cotrain is None:
        raise TrainingSetupError("nothing to train on: all-zero binary mask")

    pool_states, pool_actions, pool_weights, pool_cids = _build_pool(
        clusters, prior, mask, extra)
    if len(pool_states) and pool_states.shape[1] != config.policy.input_dim:
        raise TrainingSetupError(
            f"state dim {pool_states.shape[1]} does not match policy input_dim "
            f"{config.policy.input_dim}")

    if config.cotrain is not None:
        t_states, t_actions = stack_pairs(config.cotrain.target_set)
    else:
        t_states = t_actions = None

    batches = _sample_batches(config, len(pool_states),
                              0 if t_states is None else len(t_states))
    theta = P.init_params(config.policy, [config.seed, 0])
    tape = TrainingTape(config, theta.copy(), pool_states, pool_actions,
                        pool_weights, pool_cids, t_states, t_actions,
                        batches, len(clusters))

    opt_state = None
    if config.optimizer == "adam":
        opt_state = (np.zeros_like(theta), np.zeros_like(theta), 0)
    for t in range(config.steps):
        if t % config.checkpoint_stride == 0:
            tape.checkpoints[t] = (theta.copy(), _copy_opt_state(opt_state))
        theta, opt_state = _apply_step(tape, theta, opt_state, t)
    tape.checkpoints[config.steps] = (theta.copy(), _copy_opt_state(opt_state))
    tape.final_params = theta.copy()
    return theta, tape


def replay(tape: TrainingTape) -> np.ndarray:
    """Re-run the recorded schedule from the initial parameters."""
    theta = tape.initial_params.copy()
    opt_state = None
    if tape.config.optimizer == "adam":
        opt_state = (np.zeros_like(theta), np.zeros_like(theta), 0)
    for t in range(tape.steps):
        theta, opt_state = _apply_step(tape, theta, opt_state, t)
    return theta


# ---------------------------------------------------------------------------
# Tape serialization
# ---------------------------------------------------------------------------

def _policy_config_dict(cfg: P.PolicyConfig) -> dict:
    return {"input_dim": cfg.input_dim, "output_dim": cfg.output_dim,
            "hidden": list(cfg.hidden), "activation": cfg.activation, "head": cfg.head}


def save_tape(tape: TrainingTape, path) -> None:
    cfg = tape.config
    meta = {
        "policy": _policy_config_dict(cfg.policy),
        "steps": cfg.steps, "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size, "optimizer": cfg.optimizer,
        "loss": cfg.loss, "seed": cfg.seed,
        "checkpoint_stride": cfg.checkpoint_stride,
        "cotrain_alpha": None if cfg.cotrain is None else cfg.cotrain.alpha,
        "n_clusters": tape.n_clusters,
    }
    arrays = {
        "initial_params": tape.initial_params,
        "pool_states": tape.pool_states, "pool_actions": tape.pool_actions,
        "pool_weights": tape.pool_weights, "pool_cluster_ids": tape.pool_cluster_ids,
        "batch_lengths": np.array([len(b) for b in tape.batches], dtype=np.int64),
        "batch_indices": (np.concatenate(tape.batches) if tape.batches
                          else np.zeros(0, dtype=np.int64)),
        "final_params": tape.final_params,
    }
    if tape.target_states is not None:
        arrays["target_states"] = tape.target_states
        arrays["target_actions"] = tape.target_actions
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_tape(path) -> TrainingTape:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        pcfg = P.PolicyConfig(
            input_dim=meta["policy"]["input_dim"], output_dim=meta["policy"]["output_dim"],
            hidden=tuple(meta["policy"]["hidden"]), activation=meta["policy"]["activation"],
            head=meta["policy"]["head"])
        target_states = z["target_states"] if "target_states" in z else None
        target_actions = z["target_actions"] if "target_actions" in z else None
        cotrain = None
        if meta["cotrain_alpha"] is not None:
            # The target pool is stored as raw arrays; rebuild a config shell.
            cotrain = CotrainConfig(target_set=[], alpha=meta["cotrain_alpha"])
        cfg = TrainConfig(policy=pcfg, steps=meta["steps"],
                          learning_rate=meta["learning_rate"],
                          batch_size=meta["batch_size"], optimizer=meta["optimizer"],
                          loss=meta["loss"], seed=meta["seed"], cotrain=cotrain,
                          checkpoint_stride=meta["checkpoint_stride"])
        lengths = z["batch_lengths"]
        flat = z["batch_indices"]
        batches, off = [], 0
        for n in lengths:
            batches.append(flat[off:off + n])
            off += n
        tape = TrainingTape(cfg, z["initial_params"], z["pool_states"], z["pool_actions"],
                            z["pool_weights"], z["pool_cluster_ids"],
                            target_states, target_actions, batches, meta["n_clusters"])
        tape.final_params = z["final_params"]
        tape.checkpoints[0] = (tape.initial_params.copy(),
                               (np.zeros_like(tape.initial_params),
                                np.zeros_like(tape.initial_params), 0)
                               if cfg.optimizer == "adam" else None)
        return tape

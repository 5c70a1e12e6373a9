"""Datamodel estimators: subset regression and the training metagradient.

Both produce a linear datamodel: one coefficient per cluster plus an optional
offset, predicting the outcome of training on any cluster subset as
offset + sum of included coefficients.

The regression estimator retrains on many Bernoulli subsets and solves the
normal equations for the coefficients. The metagradient estimator trains once
with all-ones continuous weights and differentiates the outcome with respect
to the per-cluster weights exactly, by propagating an adjoint backward through
the recorded training tape:

    adjoint_T = d outcome / d theta_T
    adjoint_t = adjoint_{t+1} - lr * H(theta_t, batch_t) @ adjoint_{t+1}
    coef_j   += -(lr / |batch_t|) * sum_{i in batch_t, cluster(i)=j}
                    grad(loss_i(theta_t)) . adjoint_{t+1}

which is the exact gradient for plain (full-batch or stochastic) gradient
descent. Adam carries extra optimizer state through the reverse pass and is
rejected here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import policy as P
from . import proxy as proxy_mod
from . import toyenv
from .dataset import Cluster, SubsetMask, TargetSplit, Trajectory, sample_bernoulli_mask
from .errors import EstimationError, TrainingDivergedError, UnsupportedOptimizerError
from .trainer import TrainConfig, TrainingTape, train

log = logging.getLogger(__name__)


@dataclass
class Datamodel:
    tau: np.ndarray
    offset: float = 0.0
    estimator: str = "regression"          # regression | metagradient
    target: str = "proxy_loss"             # proxy_loss | rollout_success
    provenance: dict = field(default_factory=dict)


@dataclass
class SubsetOutcome:
    mask: SubsetMask
    outcome: float


@dataclass(frozen=True)
class ProxyTarget:
    """Score a trained policy by the proxy metric on held-out target demos."""

    trajectories: tuple
    loss: str = "nll"
    weights: proxy_mod.StateWeights = proxy_mod.UNIFORM
    kind: str = "proxy_loss"

    def evaluate(self, params, policy_config) -> float:
        return proxy_mod.proxy_metric(params, policy_config, list(self.trajectories),
                                      self.loss, self.weights)


@dataclass(frozen=True)
class RolloutTarget:
    """Score a trained policy by rollout success rate in the toy environment."""

    spec: toyenv.EnvSpec
    task_id: int
    n_rollouts: int = 20
    seed: int = 0
    goal_conditioned: bool = True
    kind: str = "rollout_success"

    def evaluate(self, params, policy_config) -> float:
        fn = P.make_policy_fn(params, policy_config, self.goal_conditioned)
        return toyenv.rollout_success_rate(fn, self.spec, self.task_id,
                                           self.n_rollouts, self.seed)


def collect_outcomes(clusters: list[Cluster], prior: list[Trajectory],
                     n_subsets: int, p: float, train_config: TrainConfig,
                     target, seed: int,
                     extra: list[Trajectory] | None = None) -> list[SubsetOutcome]:
    """Train on Bernoulli(p) cluster subsets and evaluate each trained policy.

    Subset j draws its mask from (seed, j) and trainings share the same train
    seed, so the whole collection is deterministic and order-independent.
    Diverged or empty subsets are skipped with a warning; callers can recover
    the skip count as n_subsets - len(result).
    """
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    outcomes = []
    for j in range(n_subsets):
        mask = sample_bernoulli_mask(len(clusters), p, [seed, j])
        try:
            params, _ = train(clusters, prior, mask, train_config, extra=extra)
        except TrainingDivergedError as e:
            log.warning("subset %d skipped: diverged at step %d", j, e.step)
            continue
        outcomes.append(SubsetOutcome(mask, float(target.evaluate(params, train_config.policy))))
    return outcomes


def regression_estimate(outcomes: list[SubsetOutcome], ridge_lambda: float | None = None,
                        fit_offset: bool = True) -> Datamodel:
    """Least-squares fit of outcomes onto subset membership (exact normal equations).

    ridge_lambda=None uses the default 1e-3 * mean diagonal of X^T X; pass 0
    for a plain solve (requires a non-degenerate design).
    """
    if len(outcomes) < 2:
        raise EstimationError("need at least 2 subset outcomes to regress")
    x = np.stack([o.mask.weights for o in outcomes])
    y = np.array([o.outcome for o in outcomes])
    n = x.shape[1]
    xtx = x.T @ x
    if ridge_lambda is None:
        ridge_lambda = 1e-3 * float(np.trace(xtx)) / n
    if ridge_lambda < 0:
        raise EstimationError("ridge_lambda must be >= 0")
    if fit_offset:
        design = np.hstack([x, np.ones((len(x), 1))])
    else:
        design = x
    a = design.T @ design
    pen = np.full(a.shape[0], ridge_lambda)
    if fit_offset:
        pen[-1] = 0.0  # never shrink the intercept
    a = a + np.diag(pen)
    b = design.T @ y
    try:
        coef = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"singular regression system (try ridge_lambda > 0): {e}") from e
    tau = coef[:n]
    offset = float(coef[n]) if fit_offset else 0.0
    return Datamodel(tau=tau, offset=offset, estimator="regression",
                     provenance={"n_outcomes": len(outcomes),
                                 "ridge_lambda": float(ridge_lambda),
                                 "fit_offset": bool(fit_offset)})


def metagradient_estimate(clusters: list[Cluster], prior: list[Trajectory],
                          split: TargetSplit, train_config: TrainConfig,
                          proxy_loss: str = "nll",
                          proxy_weights: proxy_mod.StateWeights = proxy_mod.UNIFORM,
                          mix_estimation_half: bool = False) -> Datamodel:
    """Exact gradient of the proxy outcome with respect to per-cluster weights.

    Trains once at all-ones weights (optionally mixing the estimation half of
    the target into the pool), then runs the reverse pass described in the
    module docstring. The offset makes predictions affine around the all-ones
    point: predict(all-ones) equals the realized proxy value.
    """
    if train_config.optimizer not in ("gd_full_batch", "sgd"):
        raise UnsupportedOptimizerError(
            f"metagradient estimation supports gd_full_batch or sgd, "
            f"not {train_config.optimizer!r} (its reverse pass carries extra state)")
    if train_config.cotrain is not None:
        raise UnsupportedOptimizerError(
            "co-training is not supported inside metagradient estimation; "
            "use mix_estimation_half to include target data")
    mask = SubsetMask.all_ones(len(clusters))
    extra = split.estimation_half if mix_estimation_half else None
    params, tape = train(clusters, prior, mask, train_config, extra=extra)
    value = proxy_mod.proxy_metric(params, train_config.policy,
                                   split.evaluation_half, proxy_loss, proxy_weights)
    adjoint = proxy_mod.grad_proxy(params, train_config.policy,
                                   split.evaluation_half, proxy_loss, proxy_weights)
    tau = _reverse_pass(tape, adjoint)
    offset = float(value - np.sum(tau))
    return Datamodel(tau=tau, offset=offset, estimator="metagradient",
                     provenance={"steps": train_config.steps,
                                 "optimizer": train_config.optimizer,
                                 "train_seed": train_config.seed,
                                 "proxy_loss": proxy_loss,
                                 "mix_estimation_half": bool(mix_estimation_half),
                                 "proxy_value_all_ones": float(value)})


def _reverse_pass(tape: TrainingTape, adjoint: np.ndarray) -> np.ndarray:
    cfg = tape.config
    lr = cfg.learning_rate
    tau = np.zeros(tape.n_clusters)
    lam = adjoint
    for t in range(tape.steps - 1, -1, -1):
        theta_t = tape.params_at(t)
        bs, ba, bw, cids = tape.batch_arrays(t)
        if not np.all(np.isfinite(lam)):
            raise EstimationError(f"non-finite adjoint at step {t}")
        # Direct dependence of step t on the cluster weights.
        q = P.per_pair_loss_tangents(theta_t, cfg.policy, bs, ba, cfg.loss, lam)
        attributed = cids >= 0
        np.add.at(tau, cids[attributed], -(lr / len(bs)) * q[attributed])
        # Pull the adjoint back through the parameter update.
        if t > 0:
            hv = P.hvp_loss_arrays(theta_t, cfg.policy, bs, ba, bw, cfg.loss, lam)
            lam = lam - lr * hv
    return tau


def predict(dm: Datamodel, mask: SubsetMask) -> float:
    """offset + sum of coefficients of the included clusters."""
    if mask.kind != "binary":
        raise ValueError("prediction is defined for binary masks")
    if len(mask) != len(dm.tau):
        raise ValueError(f"mask length {len(mask)} does not match datamodel size {len(dm.tau)}")
    return float(dm.offset + dm.tau @ mask.weights)


def evaluate_datamodel(dm: Datamodel, heldout: list[SubsetOutcome]) -> dict:
    """Pearson/Spearman/MSE of datamodel predictions against held-out outcomes.

    Correlations are reported as None when either side has zero variance.
    """
    if len(heldout) < 3:
        raise EstimationError("need at least 3 held-out outcomes to evaluate")
    preds = np.array([predict(dm, o.mask) for o in heldout])
    actual = np.array([o.outcome for o in heldout])
    mse = float(np.mean((preds - actual) ** 2))
    if np.var(actual) == 0.0 or np.var(preds) == 0.0:
        return {"pearson": None, "spearman": None, "mse": mse}
    pearson = float(stats.pearsonr(preds, actual).statistic)
    spearman = float(stats.spearmanr(preds, actual).statistic)
    return {"pearson": pearson, "spearman": spearman, "mse": mse}

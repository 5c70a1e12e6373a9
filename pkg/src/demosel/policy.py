"""MLP policy with a diagonal-Gaussian head and exact derivatives.

Parameters live in one flat float64 vector (weights, biases, then the learned
state-independent log-std). Gradients are computed by a hand-written reverse
pass; Hessian-vector products run the same reverse pass over dual numbers
(forward-over-reverse), so they are exact rather than finite-difference
approximations. Exactness of both is what the differentiation-through-training
estimator relies on.

Loss kinds:
  nll  0.5*(a-mu)^T Sigma^-1 (a-mu) + 0.5*log det(2*pi*Sigma), Sigma = diag(sigma^2)
  l1   sum_d |a_d - mu_d|

The L1 subgradient at an exact tie is 0, so training tapes stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.5
LOG_2PI = math.log(2.0 * math.pi)

LOSS_KINDS = ("nll", "l1")
HEADS = ("gaussian_learned_logstd", "mean_only")


@dataclass(frozen=True)
class PolicyConfig:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    head: str = "gaussian_learned_logstd"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unsupported head {self.head!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        n = sum(din * dout + dout for din, dout in self.layer_dims)
        if self.head == "gaussian_learned_logstd":
            n += self.output_dim
        return n


def init_params(config: PolicyConfig, seed) -> np.ndarray:
    """Uniform[-1/sqrt(fan_in), 1/sqrt(fan_in)] layer init; log-std starts at -0.5."""
    rng = np.random.default_rng(seed)
    parts = []
    for din, dout in config.layer_dims:
        bound = 1.0 / math.sqrt(din)
        parts.append(rng.uniform(-bound, bound, size=din * dout))
        parts.append(rng.uniform(-bound, bound, size=dout))
    if config.head == "gaussian_learned_logstd":
        parts.append(np.full(config.output_dim, LOG_STD_INIT))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Dual numbers: arrays carrying a directional derivative alongside the value.
# Running the gradient code over Dual(theta, v) yields grad (value part) and
# the Hessian-vector product H @ v (tangent part) in one pass.
# ---------------------------------------------------------------------------

class Dual:
    __slots__ = ("val", "tan")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def T(self):
        return Dual(self.val.T, self.tan.T)

    def reshape(self, *shape):
        return Dual(self.val.reshape(*shape), self.tan.reshape(*shape))

    def __getitem__(self, key):
        return Dual(self.val[key], self.tan[key])

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        return Dual(self.val + other, self.tan + np.zeros_like(np.asarray(other, dtype=float)))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.tan * other.val + self.val * other.tan)
        return Dual(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val @ other.val, self.tan @ other.val + self.val @ other.tan)
        return Dual(self.val @ other, self.tan @ other)

    def __rmatmul__(self, other):
        return Dual(other @ self.val, other @ self.tan)


def _val(x):
    return x.val if isinstance(x, Dual) else x


def _tanh(x):
    if isinstance(x, Dual):
        y = np.tanh(x.val)
        return Dual(y, (1.0 - y * y) * x.tan)
    return np.tanh(x)


def _exp(x):
    if isinstance(x, Dual):
        y = np.exp(x.val)
        return Dual(y, y * x.tan)
    return np.exp(x)


def _sign(x):
    # Derivative is zero almost everywhere; the tangent is dropped.
    if isinstance(x, Dual):
        return np.sign(x.val)
    return np.sign(x)


def _abs(x):
    if isinstance(x, Dual):
        return Dual(np.abs(x.val), np.sign(x.val) * x.tan)
    return np.abs(x)


def _clip(x, lo, hi):
    if isinstance(x, Dual):
        inside = (x.val > lo) & (x.val < hi)
        return Dual(np.clip(x.val, lo, hi), x.tan * inside)
    return np.clip(x, lo, hi)


def _sum(x, axis=None):
    if isinstance(x, Dual):
        return Dual(np.sum(x.val, axis=axis), np.sum(x.tan, axis=axis))
    return np.sum(x, axis=axis)


def _zeros_like(x):
    if isinstance(x, Dual):
        return Dual(np.zeros_like(x.val), np.zeros_like(x.tan))
    return np.zeros_like(x)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def split_params(params, config: PolicyConfig):
    """Flat vector -> (weight matrices, bias vectors, log_std or None)."""
    ws, bs = [], []
    off = 0
    for din, dout in config.layer_dims:
        ws.append(params[off:off + din * dout].reshape(din, dout))
        off += din * dout
        bs.append(params[off:off + dout])
        off += dout
    log_std = None
    if config.head == "gaussian_learned_logstd":
        log_std = params[off:off + config.output_dim]
        off += config.output_dim
    return ws, bs, log_std


def _flatten_parts(ws, bs, g_log_std, config: PolicyConfig) -> np.ndarray:
    parts = []
    for w, b in zip(ws, bs):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    if config.head == "gaussian_learned_logstd":
        parts.append(np.ravel(g_log_std))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Forward pass and losses
# ---------------------------------------------------------------------------

def _forward_cached(ws, bs, states):
    """Hidden activations (post-tanh) plus the mean output, for reuse in backprop."""
    hs = [states]
    h = states
    for w, b in zip(ws[:-1], bs[:-1]):
        h = _tanh(h @ w + b)
        hs.append(h)
    mean = h @ ws[-1] + bs[-1]
    return hs, mean


def forward(params: np.ndarray, config: PolicyConfig, state: np.ndarray):
    """Mean and clamped log-std for one state."""
    state = np.asarray(state, dtype=float)
    if state.shape != (config.input_dim,):
        raise ValueError(f"state has shape {state.shape}, expected ({config.input_dim},)")
    ws, bs, log_std = split_params(np.asarray(params, dtype=float), config)
    _, mean = _forward_cached(ws, bs, state[None, :])
    if log_std is None:
        return mean[0], None
    return mean[0], np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def forward_mean_batch(params: np.ndarray, config: PolicyConfig, states: np.ndarray) -> np.ndarray:
    ws, bs, _ = split_params(np.asarray(params, dtype=float), config)
    _, mean = _forward_cached(ws, bs, np.asarray(states, dtype=float))
    return mean


def make_policy_fn(params: np.ndarray, config: PolicyConfig, goal_conditioned: bool = True):
    """State -> mean action callable for rollouts; optionally zero the goal dims."""
    params = np.asarray(params, dtype=float)

    def fn(state):
        s = np.asarray(state, dtype=float)
        if not goal_conditioned:
            s = s.copy()
            s[2:] = 0.0
        mean, _ = forward(params, config, s)
        return mean

    return fn


def _per_pair_losses(params, config: PolicyConfig, states, actions, kind: str):
    """Vector of per-pair losses; works over plain arrays or Duals."""
    ws, bs, log_std = split_params(params, config)
    _, mean = _forward_cached(ws, bs, states)
    if kind == "l1":
        return _sum(_abs(actions - mean), axis=1)
    if kind == "nll":
        if log_std is None:
            raise ValueError("nll loss requires the gaussian head")
        rho = _clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = _exp(-2.0 * rho)
        resid = mean - actions
        quad = 0.5 * _sum((resid * resid) * inv_var, axis=1)
        # log det term is shared across the batch
        logdet = _sum(rho) + 0.5 * config.output_dim * LOG_2PI
        return quad + logdet
    raise ValueError(f"unknown loss kind {kind!r}")


def _loss_and_grads(params, config: PolicyConfig, states, actions, weights, kind: str):
    """Weighted mean loss and its gradient parts; generic over Dual parameters.

    L = (1/n) * sum_i weights[i] * loss(pair_i). `weights` is a plain array.
    """
    n = states.shape[0]
    ws, bs, log_std = split_params(params, config)
    hs, mean = _forward_cached(ws, bs, states)
    scale = np.asarray(weights, dtype=float) / n

    if kind == "l1":
        resid = actions - mean
        per = _sum(_abs(resid), axis=1)
        d_mean = _sign(mean - actions)            # zero tangent: sign' = 0 a.e.
        g_log_std = None
        if log_std is not None:
            g_log_std = _zeros_like(log_std)
    elif kind == "nll":
        if log_std is None:
            raise ValueError("nll loss requires the gaussian head")
        rho = _clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = _exp(-2.0 * rho)
        resid = mean - actions
        per = 0.5 * _sum((resid * resid) * inv_var, axis=1) + _sum(rho) \
            + 0.5 * config.output_dim * LOG_2PI
        d_mean = resid * inv_var
        # d per_i / d rho_d = 1 - resid^2 * inv_var; clamp gates the gradient
        gate = ((_val(log_std) > LOG_STD_MIN) & (_val(log_std) < LOG_STD_MAX)).astype(float)
        g_log_std = _sum((1.0 - (resid * resid) * inv_var) * scale[:, None], axis=0) * gate
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    loss = _sum(per * scale)

    # Reverse pass through the trunk.
    delta = d_mean * scale[:, None]
    g_ws = [None] * len(ws)
    g_bs = [None] * len(bs)
    for layer in range(len(ws) - 1, -1, -1):
        h_in = hs[layer]
        g_ws[layer] = h_in.T @ delta
        g_bs[layer] = _sum(delta, axis=0)
        if layer > 0:
            back = delta @ ws[layer].T
            h = hs[layer]  # tanh output of this layer's input side
            delta = back * (1.0 - h * h)
    return loss, g_ws, g_bs, g_log_std


def batch_loss(params: np.ndarray, config: PolicyConfig, states, actions, weights, kind: str) -> float:
    """Weighted mean loss (1/n) * sum_i w_i * loss_i over a batch of arrays."""
    per = _per_pair_losses(np.asarray(params, dtype=float), config,
                           np.asarray(states, dtype=float), np.asarray(actions, dtype=float), kind)
    w = np.asarray(weights, dtype=float)
    return float(np.sum(per * w) / len(per))


def grad_loss_arrays(params, config, states, actions, weights, kind) -> np.ndarray:
    """Exact gradient of the weighted mean loss as a flat vector."""
    _, g_ws, g_bs, g_ls = _loss_and_grads(
        np.asarray(params, dtype=float), config,
        np.asarray(states, dtype=float), np.asarray(actions, dtype=float),
        np.asarray(weights, dtype=float), kind)
    return _flatten_parts(g_ws, g_bs, g_ls, config)


def loss_and_grad_arrays(params, config, states, actions, weights, kind):
    loss, g_ws, g_bs, g_ls = _loss_and_grads(
        np.asarray(params, dtype=float), config,
        np.asarray(states, dtype=float), np.asarray(actions, dtype=float),
        np.asarray(weights, dtype=float), kind)
    return float(loss), _flatten_parts(g_ws, g_bs, g_ls, config)


def _tan_part(g):
    return g.tan if isinstance(g, Dual) else np.zeros_like(g)


def hvp_loss_arrays(params, config, states, actions, weights, kind, v) -> np.ndarray:
    """Exact Hessian-vector product of the weighted mean loss."""
    params = np.asarray(params, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != params.shape:
        raise ValueError(f"v has shape {v.shape}, expected {params.shape}")
    dual = Dual(params, v)
    _, g_ws, g_bs, g_ls = _loss_and_grads(
        dual, config, np.asarray(states, dtype=float), np.asarray(actions, dtype=float),
        np.asarray(weights, dtype=float), kind)
    tan_ls = _tan_part(g_ls) if config.head == "gaussian_learned_logstd" else None
    return _flatten_parts([_tan_part(g) for g in g_ws],
                          [_tan_part(g) for g in g_bs], tan_ls, config)


def per_pair_loss_tangents(params, config, states, actions, kind, v) -> np.ndarray:
    """Directional derivatives grad(loss_i) . v for every pair, in one pass."""
    params = np.asarray(params, dtype=float)
    dual = Dual(params, np.asarray(v, dtype=float))
    per = _per_pair_losses(dual, config, np.asarray(states, dtype=float),
                           np.asarray(actions, dtype=float), kind)
    return per.tan


# ---------------------------------------------------------------------------
# Pair-level wrappers
# ---------------------------------------------------------------------------

def bc_loss(params, config: PolicyConfig, pair, kind: str) -> float:
    """Behavior-cloning loss of one state-action pair."""
    params = np.asarray(params, dtype=float)
    if not np.all(np.isfinite(params)):
        raise ValueError("non-finite parameters")
    per = _per_pair_losses(params, config, pair.state[None, :], pair.action[None, :], kind)
    return float(per[0])


def grad_loss(params, config: PolicyConfig, batch, kind: str) -> np.ndarray:
    """Gradient of (1/n) sum_i w_i * loss(pair_i) for batch = [(pair, weight), ...]."""
    if not batch:
        raise ValueError("batch must be non-empty")
    states = np.stack([p.state for p, _ in batch])
    actions = np.stack([p.action for p, _ in batch])
    weights = np.array([w for _, w in batch], dtype=float)
    g = grad_loss_arrays(params, config, states, actions, weights, kind)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite values in gradient")
    return g


def hvp_loss(params, config: PolicyConfig, batch, kind: str, v) -> np.ndarray:
    """Hessian-vector product of the weighted mean loss over `batch`."""
    if not batch:
        raise ValueError("batch must be non-empty")
    states = np.stack([p.state for p, _ in batch])
    actions = np.stack([p.action for p, _ in batch])
    weights = np.array([w for _, w in batch], dtype=float)
    return hvp_loss_arrays(params, config, states, actions, weights, kind, v)


def save_params(params: np.ndarray, config: PolicyConfig, path) -> None:
    import json
    rec = {
        "config": {
            "input_dim": config.input_dim,
            "output_dim": config.output_dim,
            "hidden": list(config.hidden),
            "activation": config.activation,
            "head": config.head,
        },
        "params": [float(x) for x in np.asarray(params, dtype=float)],
    }
    with open(path, "w") as f:
        json.dump(rec, f)
        f.write("\n")


def load_params(path) -> tuple[np.ndarray, PolicyConfig]:
    import json
    with open(path) as f:
        rec = json.load(f)
    cfg = PolicyConfig(
        input_dim=rec["config"]["input_dim"],
        output_dim=rec["config"]["output_dim"],
        hidden=tuple(rec["config"]["hidden"]),
        activation=rec["config"]["activation"],
        head=rec["config"]["head"],
    )
    params = np.asarray(rec["params"], dtype=float)
    if params.shape != (cfg.n_params,):
        raise ValueError("parameter vector does not match its config")
    return params, cfg

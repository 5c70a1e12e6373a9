"""Demonstration data model: trajectories, clusters, subset masks, file formats.

Trajectories are stored as one JSON record per line so files diff cleanly and
stream. JSON renders floats with Python's shortest round-trip repr, so a
save/load cycle reproduces every value bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataFormatError

SOURCE_TAGS = ("expert", "suboptimal", "target")


@dataclass(frozen=True)
class StateActionPair:
    state: np.ndarray
    action: np.ndarray
    task_id: int
    traj_id: int
    step_idx: int


@dataclass
class Trajectory:
    traj_id: int
    task_id: int
    source_tag: str
    states: np.ndarray   # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DataFormatError("states and actions must be 2-D arrays")
        if len(self.states) != len(self.actions):
            raise DataFormatError("states and actions must have equal length")
        if len(self.states) == 0:
            raise DataFormatError("trajectory must contain at least one pair")
        if self.source_tag not in SOURCE_TAGS:
            raise DataFormatError(f"unknown source_tag {self.source_tag!r}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def pairs(self) -> list[StateActionPair]:
        return [
            StateActionPair(self.states[i], self.actions[i], self.task_id, self.traj_id, i)
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class Granularity:
    """Unit of attribution: whole trajectory, fixed-horizon span, or single pair."""

    kind: str                  # trajectory | subtrajectory | pair
    horizon: int | None = None

    def __post_init__(self):
        if self.kind not in ("trajectory", "subtrajectory", "pair"):
            raise ValueError(f"unknown granularity kind {self.kind!r}")
        if self.kind == "subtrajectory":
            if self.horizon is None or self.horizon <= 0:
                raise ValueError("subtrajectory granularity requires horizon >= 1")
        elif self.horizon is not None:
            raise ValueError(f"{self.kind} granularity takes no horizon")

    @classmethod
    def trajectory(cls) -> "Granularity":
        return cls("trajectory")

    @classmethod
    def subtrajectory(cls, horizon: int) -> "Granularity":
        return cls("subtrajectory", horizon)

    @classmethod
    def pair(cls) -> "Granularity":
        return cls("pair")

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        """Parse "trajectory", "pair", or "subtrajectory:H"."""
        if text == "trajectory":
            return cls.trajectory()
        if text == "pair":
            return cls.pair()
        if text.startswith("subtrajectory:"):
            return cls.subtrajectory(int(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse granularity {text!r}")

    def __str__(self) -> str:
        if self.kind == "subtrajectory":
            return f"subtrajectory:{self.horizon}"
        return self.kind


@dataclass(frozen=True)
class Cluster:
    """A contiguous span of one trajectory; the unit scored and selected."""

    cluster_id: int
    granularity: Granularity
    traj_id: int
    start: int
    length: int


def make_clusters(dataset: list[Trajectory], granularity: Granularity) -> list[Cluster]:
    """Partition every pair of `dataset` into clusters.

    Clusters are ordered by (traj_id asc, start asc) so cluster ids are stable
    across runs. Sub-trajectory spans are consecutive length-H windows with one
    final shorter remainder span (never dropped, never merged).
    """
    if not dataset:
        raise ValueError("cannot cluster an empty dataset")
    clusters: list[Cluster] = []
    for traj in sorted(dataset, key=lambda t: t.traj_id):
        n = len(traj)
        if granularity.kind == "trajectory":
            spans = [(0, n)]
        elif granularity.kind == "pair":
            spans = [(i, 1) for i in range(n)]
        else:
            h = granularity.horizon
            spans = [(s, min(h, n - s)) for s in range(0, n, h)]
        for start, length in spans:
            clusters.append(Cluster(len(clusters), granularity, traj.traj_id, start, length))
    return clusters


def pair_cluster_ids(dataset: list[Trajectory], clusters: list[Cluster]) -> np.ndarray:
    """Cluster id of every pair, in flattened dataset order.

    Raises DataFormatError if the clusters do not exactly cover the dataset.
    """
    spans: dict[int, list[Cluster]] = {}
    for c in clusters:
        spans.setdefault(c.traj_id, []).append(c)
    out = []
    for traj in dataset:
        ids = np.full(len(traj), -1, dtype=np.int64)
        for c in spans.get(traj.traj_id, []):
            if c.start + c.length > len(traj):
                raise DataFormatError(
                    f"cluster {c.cluster_id} overruns trajectory {traj.traj_id}"
                )
            if np.any(ids[c.start:c.start + c.length] >= 0):
                raise DataFormatError(
                    f"cluster {c.cluster_id} overlaps another cluster in trajectory {traj.traj_id}"
                )
            ids[c.start:c.start + c.length] = c.cluster_id
        if np.any(ids < 0):
            raise DataFormatError(f"trajectory {traj.traj_id} has pairs not covered by any cluster")
        out.append(ids)
    return np.concatenate(out)


def stack_pairs(dataset: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """All (state, action) rows of `dataset` in trajectory order."""
    states = np.concatenate([t.states for t in dataset], axis=0)
    actions = np.concatenate([t.actions for t in dataset], axis=0)
    return states, actions


@dataclass
class SubsetMask:
    """Per-cluster weight vector z; binary for subset training, continuous for weighting."""

    weights: np.ndarray
    kind: str = "binary"  # binary | continuous

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 1:
            raise ValueError("mask weights must be a 1-D vector")
        if self.kind not in ("binary", "continuous"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "binary":
            if not np.all((self.weights == 0.0) | (self.weights == 1.0)):
                raise ValueError("binary mask entries must be exactly 0 or 1")
        # Continuous weights are nominally in [0, 1] but may step slightly
        # outside it, e.g. for finite-difference probes around all-ones.
        elif not np.all(np.isfinite(self.weights)):
            raise ValueError("continuous mask entries must be finite")

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def all_ones(cls, n: int, kind: str = "continuous") -> "SubsetMask":
        return cls(np.ones(n), kind)


def sample_bernoulli_mask(n: int, p: float, seed) -> SubsetMask:
    """Binary mask with i.i.d. Bernoulli(p) entries; deterministic per (n, p, seed)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"inclusion probability must lie strictly in (0, 1), got {p}")
    rng = np.random.default_rng(seed)
    return SubsetMask((rng.random(n) < p).astype(float), "binary")


@dataclass
class TargetSplit:
    """Disjoint halves of the target demos: one to estimate with, one to evaluate on."""

    estimation_half: list[Trajectory]
    evaluation_half: list[Trajectory]
    seed: int


def split_target(target: list[Trajectory], seed: int) -> TargetSplit:
    """Deterministically split the target demos into halves of size ceil/floor(n/2)."""
    n = len(target)
    if n < 2:
        raise ValueError(f"need at least 2 target trajectories to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    k = math.ceil(n / 2)
    est_idx = sorted(perm[:k].tolist())
    ev_idx = sorted(perm[k:].tolist())
    return TargetSplit([target[i] for i in est_idx], [target[i] for i in ev_idx], seed)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_trajectories(trajs: list[Trajectory], path) -> None:
    with open(path, "w") as f:
        for t in trajs:
            rec = {
                "traj_id": t.traj_id,
                "task_id": t.task_id,
                "source_tag": t.source_tag,
                "states": [[float(x) for x in row] for row in t.states],
                "actions": [[float(x) for x in row] for row in t.actions],
            }
            f.write(json.dumps(rec) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    """Parse a trajectory file, validating constant state/action dimensions."""
    trajs: list[Trajectory] = []
    state_dim = action_dim = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                traj = Trajectory(
                    traj_id=int(rec["traj_id"]),
                    task_id=int(rec["task_id"]),
                    source_tag=rec["source_tag"],
                    states=np.asarray(rec["states"], dtype=float),
                    actions=np.asarray(rec["actions"], dtype=float),
                )
            except DataFormatError as e:
                raise DataFormatError(f"line {lineno}: {e}") from e
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
                raise DataFormatError(f"line {lineno}: malformed trajectory record ({e})") from e
            if state_dim is None:
                state_dim, action_dim = traj.states.shape[1], traj.actions.shape[1]
            elif (traj.states.shape[1], traj.actions.shape[1]) != (state_dim, action_dim):
                raise DataFormatError(
                    f"line {lineno}: state/action dimension "
                    f"({traj.states.shape[1]}, {traj.actions.shape[1]}) does not match "
                    f"({state_dim}, {action_dim}) from earlier records"
                )
            trajs.append(traj)
    return trajs


def save_mask(mask: SubsetMask, path) -> None:
    with open(path, "w") as f:
        json.dump({"kind": mask.kind, "weights": [float(w) for w in mask.weights]}, f)
        f.write("\n")


def load_mask(path) -> SubsetMask:
    with open(path) as f:
        try:
            rec = json.load(f)
            return SubsetMask(np.asarray(rec["weights"], dtype=float), rec["kind"])
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
            raise DataFormatError(f"malformed mask file ({e})") from e

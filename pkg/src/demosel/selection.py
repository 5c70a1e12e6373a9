"""Turning cluster scores into curated datasets, plus similarity baselines.

Similarity baselines slide a fixed-length window over prior and target
trajectories and rank prior windows by their closest target window. SR
compares states only, AR actions only, BR the concatenation. Trajectories
shorter than the window contribute one truncated window; two windows of
unequal length are compared over their common prefix with a per-step
normalization so short windows are not favored by having fewer terms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import Cluster, Trajectory, pair_cluster_ids
from .errors import SelectionError


@dataclass
class ScoreTable:
    """Per-cluster scores with estimator provenance; index is the cluster id."""

    scores: np.ndarray
    estimator: str = ""
    target: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)

    def __len__(self) -> int:
        return len(self.scores)

    def ranking(self) -> list[int]:
        """Cluster ids ordered by (score desc, cluster_id asc)."""
        return sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))

    def save(self, path) -> None:
        order = self.ranking()
        rank_of = {cid: r + 1 for r, cid in enumerate(order)}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["cluster_id", "tau", "rank", "estimator", "target"])
            for cid in range(len(self.scores)):
                w.writerow([cid, repr(float(self.scores[cid])), rank_of[cid],
                            self.estimator, self.target])

    @classmethod
    def load(cls, path) -> "ScoreTable":
        rows = []
        estimator = target = ""
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for row in reader:
                rows.append((int(row["cluster_id"]), float(row["tau"])))
                estimator, target = row["estimator"], row["target"]
        rows.sort()
        if [cid for cid, _ in rows] != list(range(len(rows))):
            raise SelectionError(f"score file {path} does not cover dense cluster ids")
        return cls(np.array([s for _, s in rows]), estimator, target)


@dataclass(frozen=True)
class SelectionConfig:
    fraction: float = 0.10
    require_positive: bool = False

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")


def selection_size(n: int, fraction: float) -> int:
    return max(1, math.floor(fraction * n))


def select_top_fraction(scores: ScoreTable, cfg: SelectionConfig) -> list[int]:
    """Top max(1, floor(fraction * N)) cluster ids by (score desc, id asc)."""
    s = scores.scores
    if len(s) < 1:
        raise SelectionError("empty score table")
    if np.any(np.isnan(s)):
        raise SelectionError("scores contain NaN")
    order = scores.ranking()
    k = selection_size(len(s), cfg.fraction)
    if cfg.require_positive:
        order = [i for i in order if s[i] > 0.0]
        if not order:
            raise SelectionError("no cluster has a positive score")
    return order[:k]


def random_select(n: int, fraction: float, seed) -> list[int]:
    """Uniform selection without replacement of max(1, floor(fraction * n)) ids."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = selection_size(n, fraction)
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=k, replace=False).tolist())


@dataclass(frozen=True)
class SimilarityConfig:
    mode: str = "BR"      # SR | AR | BR
    window: int = 50

    def __post_init__(self):
        if self.mode not in ("SR", "AR", "BR"):
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def _window_features(traj: Trajectory, mode: str, window: int):
    """(start, feature matrix (len, d)) for every stride-1 window of one trajectory."""
    if mode == "SR":
        base = traj.states
    elif mode == "AR":
        base = traj.actions
    else:
        base = np.hstack([traj.states, traj.actions])
    n = len(base)
    if n <= window:
        return [(0, base)]
    return [(s, base[s:s + window]) for s in range(n - window + 1)]


def _min_dist_to_targets(feat: np.ndarray, targets_by_len: dict[int, np.ndarray]) -> float:
    """Smallest per-step-normalized prefix distance from `feat` to any target window."""
    best = math.inf
    for tlen, tmat in targets_by_len.items():
        m = min(len(feat), tlen)
        d = feat.shape[1]
        flat = feat[:m].reshape(1, m * d)
        tflat = tmat[:, :m * d]
        dist = cdist(flat, tflat).min() / math.sqrt(m)
        best = min(best, float(dist))
    return best


def similarity_scores(prior: list[Trajectory], clusters: list[Cluster],
                      target: list[Trajectory], cfg: SimilarityConfig) -> ScoreTable:
    """Score each cluster by its best-matching window against the target windows.

    A window's score is minus its distance to the closest target window; a
    cluster's score is the max over windows starting inside its span.
    """
    if not target:
        raise SelectionError("similarity scoring needs a non-empty target set")
    targets_by_len: dict[int, list[np.ndarray]] = {}
    for t in target:
        for _, feat in _window_features(t, cfg.mode, cfg.window):
            targets_by_len.setdefault(len(feat), []).append(feat.reshape(-1))
    target_mats = {ln: np.stack(fs) for ln, fs in targets_by_len.items()}

    span_of = {}
    for c in clusters:
        span_of.setdefault(c.traj_id, []).append(c)
    scores = np.full(len(clusters), -math.inf)
    for traj in prior:
        cs = sorted(span_of.get(traj.traj_id, []), key=lambda c: c.start)
        if not cs:
            continue
        starts = np.array([c.start for c in cs])
        for start, feat in _window_features(traj, cfg.mode, cfg.window):
            score = -_min_dist_to_targets(feat, target_mats)
            owner = cs[int(np.searchsorted(starts, start, side="right")) - 1]
            if score > scores[owner.cluster_id]:
                scores[owner.cluster_id] = score
    return ScoreTable(scores, estimator=cfg.mode.lower(), target="similarity")


def aggregate_scores(pair_scores: np.ndarray, dataset: list[Trajectory],
                     clusters: list[Cluster], rule: str = "sum") -> ScoreTable:
    """Cluster scores as the sum or mean of member-pair scores."""
    if rule not in ("sum", "mean"):
        raise ValueError(f"unknown aggregation rule {rule!r}")
    pair_scores = np.asarray(pair_scores, dtype=float)
    cids = pair_cluster_ids(dataset, clusters)
    if len(pair_scores) != len(cids):
        raise SelectionError(
            f"pair scores cover {len(pair_scores)} pairs but the dataset has {len(cids)}")
    sums = np.zeros(len(clusters))
    counts = np.zeros(len(clusters))
    np.add.at(sums, cids, pair_scores)
    np.add.at(counts, cids, 1.0)
    scores = sums / counts if rule == "mean" else sums
    return ScoreTable(scores, estimator=f"aggregate_{rule}", target="pairs")

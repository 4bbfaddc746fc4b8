"""Fast competition adaptation: a Bayesian tracker of the in-range-rate landscape.

Requests are clustered once (k-means on pretrain features); each
(cluster, coupon) cell holds a Beta posterior over the in-range rate.
Every slot the realized in-range tallies update the cells through
Beta-Binomial conjugacy over a sliding window anchored on the initial prior,
so stale observations fall out instead of accumulating forever.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    """Nearest-centroid assignment (Euclidean, ties to the lower cluster id).

    Distances are taken in the standardized feature space frozen at fit time,
    so no single raw scale (e.g. trip miles) dominates the metric.
    """

    centroids: np.ndarray  # (S, D), standardized coordinates
    feat_mean: np.ndarray
    feat_std: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def _standardize(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.centroids.shape[1]:
            raise ValueError("feature dimension does not match the centroids")
        return (features - self.feat_mean) / self.feat_std

    def assign(self, features: np.ndarray) -> np.ndarray:
        xs = self._standardize(features)
        d2 = ((xs[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def kmeans_fit(features: np.ndarray, s: int, rng: np.random.Generator) -> ClusterModel:
    """Lloyd iterations with k-means++ seeding drawn from the given stream."""
    raw = np.atleast_2d(np.asarray(features, dtype=float))
    n = raw.shape[0]
    if np.unique(raw, axis=0).shape[0] < s:
        raise ValueError(f"need at least {s} distinct points to fit {s} clusters")
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    x = (raw - mean) / std

    centroids = np.empty((s, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, s):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[c] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[c]) ** 2).sum(axis=1))

    for _ in range(100):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        new_centroids = centroids.copy()
        for c in range(s):
            members = x[labels == c]
            if members.size:
                new_centroids[c] = members.mean(axis=0)
            else:
                new_centroids[c] = x[np.argmax(dist.min(axis=1))]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < 1e-6:
            break
    return ClusterModel(centroids=centroids, feat_mean=mean, feat_std=std)


class BetaTracker:
    """Per-(cluster, coupon) Beta parameters over a sliding slot window.

    The tallies of the last ``window`` slots are summed onto the
    campaign-start prior (never chained, so observations leaving the window
    are not double counted). A cell with no observations anywhere in the
    window sits exactly at its prior: absent evidence, the posterior is the
    prior.
    """

    def __init__(self, prior_alpha: np.ndarray, prior_beta: np.ndarray, window: int):
        prior_alpha = np.asarray(prior_alpha, dtype=float)
        prior_beta = np.asarray(prior_beta, dtype=float)
        if prior_alpha.shape != prior_beta.shape or prior_alpha.ndim != 2:
            raise ValueError("priors must be matching (clusters, coupons) matrices")
        if (prior_alpha <= 0).any() or (prior_beta <= 0).any():
            raise ValueError("Beta parameters must be strictly positive")
        if window < 1:
            raise ValueError("window length must be >= 1")
        self.prior_alpha = prior_alpha
        self.prior_beta = prior_beta
        self.window = window
        self._slots: deque = deque(maxlen=window)  # (n_in, n) matrices
        self.alpha = prior_alpha.copy()
        self.beta = prior_beta.copy()

    @property
    def shape(self) -> tuple[int, int]:
        return self.prior_alpha.shape

    def copy(self) -> "BetaTracker":
        dup = BetaTracker(self.prior_alpha, self.prior_beta, self.window)
        dup._slots.extend((n_in.copy(), n.copy()) for n_in, n in self._slots)
        dup.alpha = self.alpha.copy()
        dup.beta = self.beta.copy()
        return dup

    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def snapshot_rows(self, slot: int) -> list[tuple]:
        s, h = self.shape
        return [
            (slot, c, j, float(self.alpha[c, j]), float(self.beta[c, j]))
            for c in range(s)
            for j in range(h)
        ]


def posterior_update(tracker: BetaTracker, n_in: np.ndarray, n: np.ndarray) -> BetaTracker:
    """Fold one slot of (in-range, total) tallies into the tracker."""
    n_in = np.asarray(n_in, dtype=float)
    n = np.asarray(n, dtype=float)
    if n_in.shape != tracker.shape or n.shape != tracker.shape:
        raise ValueError("tallies must match the tracker's (clusters, coupons) shape")
    if (n_in < 0).any() or (n < 0).any() or (n_in > n).any():
        raise ValueError("tallies need 0 <= N_in <= N per cell")
    tracker._slots.append((n_in.copy(), n.copy()))
    wins = np.zeros(tracker.shape)
    totals = np.zeros(tracker.shape)
    for slot_in, slot_n in tracker._slots:
        wins += slot_in
        totals += slot_n
    tracker.alpha = tracker.prior_alpha + wins
    tracker.beta = tracker.prior_beta + (totals - wins)
    return tracker


def init_priors(
    cluster_model: ClusterModel,
    beta_param_model,
    pretrain_features: np.ndarray,
    coupons,
    window: int = 24,
) -> BetaTracker:
    """Average the Beta-parameter model over each cluster to seed the tracker."""
    coupons = np.asarray(coupons, dtype=float)
    x = np.atleast_2d(np.asarray(pretrain_features, dtype=float))
    labels = cluster_model.assign(x)
    s, h = cluster_model.n_clusters, coupons.size
    alpha = np.empty((s, h))
    beta = np.empty((s, h))
    g_alpha, g_beta = beta_param_model.predict_matrix(x, coupons)
    for c in range(s):
        members = labels == c
        if members.any():
            alpha[c] = g_alpha[members].mean(axis=0)
            beta[c] = g_beta[members].mean(axis=0)
        else:
            logger.warning("cluster %d has no pretrain samples; using the global mean", c)
            alpha[c] = g_alpha.mean(axis=0)
            beta[c] = g_beta.mean(axis=0)
    return BetaTracker(alpha, beta, window)


def refine_w(
    tracker: BetaTracker, cluster_ids: np.ndarray, alpha_ori: np.ndarray, beta_ori: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample refined parameters: model output plus the cluster's tracked cell."""
    cluster_ids = np.asarray(cluster_ids, dtype=int)
    if cluster_ids.size and (cluster_ids.min() < 0 or cluster_ids.max() >= tracker.shape[0]):
        raise ValueError("unknown cluster id")
    return alpha_ori + tracker.alpha[cluster_ids], beta_ori + tracker.beta[cluster_ids]


def sample_w(alpha: np.ndarray, beta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw in-range rates from Beta(alpha, beta)."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if (alpha <= 0).any() or (beta <= 0).any():
        raise ValueError("Beta parameters must be strictly positive")
    return rng.beta(alpha, beta)


def summarize_for_state(tracker: BetaTracker) -> tuple[np.ndarray, np.ndarray]:
    """Cluster-averaged (alpha, beta) per coupon, appended to the RL state."""
    return tracker.alpha.mean(axis=0), tracker.beta.mean(axis=0)


def write_tracker_csv(rows: list[tuple], path: str | Path) -> None:
    """Tracker trace rows (slot, cluster, coupon, alpha, beta) as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "cluster", "coupon", "alpha", "beta"])
        for slot, c, j, a, b in rows:
            writer.writerow([slot, c, j, format(a, ".10g"), format(b, ".10g")])

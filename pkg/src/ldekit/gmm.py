"""Diagonal-covariance Gaussian mixtures: EM training, per-utterance
occupancy statistics, and centered-mean supervector encoding.

This is the classical baseline the learnable encoder imitates: a
background mixture is fit on pooled frames, each utterance is summarized
by posterior-weighted zeroth/first-order statistics against it, and the
per-component centered means are concatenated into one long vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ndcore import DimensionError, Rng, log_sum_exp_rows, softmax_rows

log = logging.getLogger(__name__)

UNSEEN_FLOOR = 1e-30
EMPTY_COMPONENT_FLOOR = 1e-6
# variance floor as a fraction of the global per-dimension variance
VAR_FLOOR_FRACTION = 1e-3


@dataclass
class GmmModel:
    """Mixture weights (C,), means (C x D), diagonal variances (C x D)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape:
            raise DimensionError("means and variances must have equal shapes")
        if self.weights.shape != (self.means.shape[0],):
            raise DimensionError("one weight per component required")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class BaumWelchStats:
    """Zeroth-order counts n (C,) and centered first-order sums f (C x D)."""

    n: np.ndarray
    f: np.ndarray


@dataclass
class Supervector:
    """Concatenated per-component centered means, plus a unit-norm copy."""

    v: np.ndarray
    normalized: np.ndarray
    unseen: list = field(default_factory=list)


def _check_sequence(model: GmmModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.dim:
        raise DimensionError(
            f"expected a {model.dim} x L feature sequence, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("feature sequence has no frames")
    return x


def log_densities(model: GmmModel, frames: np.ndarray) -> np.ndarray:
    """Per-frame, per-component log of weight * diagonal Gaussian density.

    frames: L x D. Returns L x C.
    """
    inv_var = 1.0 / model.variances
    log_norm = -0.5 * (model.dim * np.log(2.0 * np.pi)
                       + np.log(model.variances).sum(axis=1))
    # ||(x - mu) / sigma||^2 expanded to avoid the L x C x D intermediate
    sq = (frames ** 2) @ inv_var.T
    cross = frames @ (model.means * inv_var).T
    const = ((model.means ** 2) * inv_var).sum(axis=1)
    mahal = sq - 2.0 * cross + const[None, :]
    return np.log(model.weights)[None, :] + log_norm[None, :] - 0.5 * mahal


def posteriors(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Occupancy probabilities, L x C, each row summing to 1.

    Computed in the log domain with max-shifted normalization.
    """
    x = _check_sequence(model, x)
    return softmax_rows(log_densities(model, x.T))


def accumulate_stats(model: GmmModel, x: np.ndarray) -> BaumWelchStats:
    """Posterior-weighted counts and centered first-order sums.

    n_c = sum_t P(c | x_t); f_c = sum_t P(c | x_t) (x_t - mu_c).
    """
    x = _check_sequence(model, x)
    post = posteriors(model, x)
    n = post.sum(axis=0)
    f = post.T @ x.T - n[:, None] * model.means
    return BaumWelchStats(n=n, f=f)


def supervector(stats: BaumWelchStats) -> Supervector:
    """Per-component centered means f_c / n_c concatenated in order.

    Components whose count underflows are flagged unseen and contribute
    zeros.
    """
    n = np.asarray(stats.n, dtype=np.float64)
    f = np.asarray(stats.f, dtype=np.float64)
    unseen = np.flatnonzero(n < UNSEEN_FLOOR)
    centered = f / np.maximum(n, UNSEEN_FLOOR)[:, None]
    centered[unseen] = 0.0
    v = centered.reshape(-1)
    norm = np.linalg.norm(v)
    normalized = v / norm if norm > UNSEEN_FLOOR else v.copy()
    return Supervector(v=v, normalized=normalized, unseen=list(unseen))


def total_log_likelihood(model: GmmModel, frames: np.ndarray) -> float:
    return float(log_sum_exp_rows(log_densities(model, frames)).sum())


def _kmeans(frames: np.ndarray, num_components: int, iters: int,
            rng: Rng) -> np.ndarray:
    """Plain Lloyd iterations from seeded distinct-frame init."""
    n = frames.shape[0]
    centers = frames[rng.choice(n, num_components, replace=False)].copy()
    for _ in range(iters):
        d2 = ((frames[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        for c in range(num_components):
            members = frames[assign == c]
            if len(members) == 0:
                # re-seed an empty cluster at the point farthest from its center
                centers[c] = frames[np.argmax(d2[:, c])]
            else:
                centers[c] = members.mean(axis=0)
    return centers


def em_fit(frames: np.ndarray, num_components: int, iters: int,
           rng: Rng) -> tuple[GmmModel, list[float]]:
    """Fit a diagonal mixture by EM; returns the model and the
    log-likelihood history (one entry per iteration, evaluated before
    that iteration's update, so the sequence is non-decreasing).

    Init is 10 seeded k-means iterations; variances then come from
    cluster scatter and weights from cluster sizes. Components that lose
    all posterior mass are re-seeded near the highest-variance component.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] < 1:
        raise DimensionError("expected pooled frames as an N x D array")
    n_frames, dim = frames.shape
    if n_frames < num_components * 10:
        raise ValueError(
            f"need at least {num_components * 10} frames to fit "
            f"{num_components} components, got {n_frames}")

    global_var = frames.var(axis=0)
    var_floor = np.maximum(VAR_FLOOR_FRACTION * global_var, 1e-12)

    centers = _kmeans(frames, num_components, 10, rng)
    d2 = ((frames[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    counts = np.bincount(assign, minlength=num_components).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    weights = counts / counts.sum()
    variances = np.empty((num_components, dim))
    for c in range(num_components):
        members = frames[assign == c]
        scatter = members.var(axis=0) if len(members) > 1 else global_var
        variances[c] = np.maximum(scatter, var_floor)
    model = GmmModel(weights=weights, means=centers, variances=variances)

    ll_history = []
    for it in range(iters):
        logdens = log_densities(model, frames)
        ll_history.append(float(log_sum_exp_rows(logdens).sum()))
        post = softmax_rows(logdens)
        n = post.sum(axis=0)

        empty = np.flatnonzero(n < EMPTY_COMPONENT_FLOOR)
        if len(empty) > 0:
            donor = int(np.argmax(model.variances.sum(axis=1)))
            for c in empty:
                log.warning("re-seeding empty component %d near component %d "
                            "(iteration %d)", c, donor, it)
                jitter = rng.normal((dim,)) * np.sqrt(model.variances[donor])
                model.means[c] = model.means[donor] + 0.1 * jitter
                model.variances[c] = model.variances[donor].copy()
                n[c] = EMPTY_COMPONENT_FLOOR
            # recompute responsibilities against the repaired model
            post = softmax_rows(log_densities(model, frames))
            n = np.maximum(post.sum(axis=0), EMPTY_COMPONENT_FLOOR)

        weights = n / n.sum()
        means = (post.T @ frames) / n[:, None]
        sq = (post.T @ (frames ** 2)) / n[:, None]
        variances = np.maximum(sq - means ** 2, var_floor)
        model = GmmModel(weights=weights, means=means, variances=variances)
    return model, ll_history


def gmm_classify(models: list[GmmModel], x: np.ndarray) -> np.ndarray:
    """Average per-frame log-likelihood of the sequence under each model."""
    dims = {m.dim for m in models}
    if len(dims) != 1:
        raise DimensionError("all models must share the feature dimension")
    x = _check_sequence(models[0], x)
    frames = x.T
    return np.array([total_log_likelihood(m, frames) / frames.shape[0]
                     for m in models])


def log_posterior_scores(scores: np.ndarray) -> np.ndarray:
    """Uniform-prior log-posteriors from per-class log-likelihood scores.

    Average log-likelihoods drift with utterance content, so raw scores
    are not comparable across utterances; the log-sum-exp shift removes
    the common offset while preserving the per-utterance ranking.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise DimensionError("need at least one class score")
    return scores - log_sum_exp_rows(scores[None, :])[0]

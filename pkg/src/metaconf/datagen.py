"""Seeded synthetic benchmarks with label imbalance and input shift.

Inputs come from a Gaussian mixture with well separated components. A
frozen random linear map plays the task model: its prediction is the true
target plus noise whose scale varies by region, so correctness is hard in
designated clusters and near the map's zero level set. The global noise
scale is calibrated by bisection until the training set's realized
correct-label rate hits the requested target, which makes the label
imbalance controllable. Shift variants hold one mixture component out of
training and let it dominate the test set, or displace the test inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, describe, load_dataset, save_dataset  # noqa: F401
from .errors import ConfigError
from .seeding import substream

SHIFT_KINDS = ("none", "held_out_cluster", "covariate_shift")

HARD_REGION_MULTIPLIER = 4.0
HELD_OUT_TEST_FRACTION = 0.6
CALIBRATION_TOLERANCE = 0.01
CALIBRATION_MAX_STEPS = 60

# task-map geometry: every cluster center is pinned to a chosen value of
# the map, so the zero level set (where relative error blows up) passes
# close to the held-out cluster, far from the noisy training cluster, and
# at a moderate distance from the easy ones. Closeness to the level set is
# a property of the inputs, not of cluster identity, so it transfers.
MAP_WEIGHT_NORM = 2.0
HARD_TRAIN_MARGIN = 10.0
HELD_OUT_MARGIN = 1.2
EASY_MARGIN = 6.0


@dataclass(frozen=True)
class BenchmarkConfig:
    input_dim: int = 8
    n_train: int = 10_000
    n_test: int = 2_000
    n_input_clusters: int = 4
    cluster_separation: float = 12.0
    target_correct_rate: float = 0.99
    shift_kind: str = "held_out_cluster"
    mode: str = "regression"
    seed: int = 0
    noise_scale_min: float = 0.0   # 0 means automatic
    noise_scale_max: float = 0.0   # 0 means automatic

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.n_train < 2 or self.n_test < 2:
            raise ConfigError("n_train and n_test must be >= 2")
        if not 0.0 < self.target_correct_rate < 1.0:
            raise ConfigError("target_correct_rate must be in (0, 1)")
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigError(
                f"unknown shift_kind {self.shift_kind!r}, expected one of {SHIFT_KINDS}"
            )
        if self.mode not in ("regression", "classification"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        min_clusters = 2 if self.shift_kind == "held_out_cluster" else 1
        if self.n_input_clusters < min_clusters:
            raise ConfigError(
                f"shift_kind {self.shift_kind!r} needs at least {min_clusters} clusters"
            )
        if self.cluster_separation <= 0:
            raise ConfigError("cluster_separation must be positive")
        if self.noise_scale_min < 0 or self.noise_scale_max < 0:
            raise ConfigError("noise scale bounds must be nonnegative")
        if self.noise_scale_max and self.noise_scale_min > self.noise_scale_max:
            raise ConfigError("noise_scale_min exceeds noise_scale_max")


def _cluster_centers(rng, k, d, separation):
    """Pairwise-separated mixture centers; orthogonal construction when the
    dimension allows it, rescaled random directions otherwise."""
    if k == 1:
        return np.zeros((1, d))
    if k <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, k)))
        return (separation / np.sqrt(2.0)) * q.T
    dirs = rng.normal(size=(k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pair = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
    pair[np.diag_indices(k)] = np.inf
    closest = pair.min()
    if closest <= 0:
        raise ConfigError("cluster centers collapsed; try another seed")
    return dirs * (separation / closest)


def _flip_thresholds(margins, multipliers, noise_draws, mode):
    """Per-sample noise scale at which the task prediction turns incorrect.

    Regression flips when |noise| reaches a quarter of |target|; the
    classification map flips when the noisy logit changes sign.
    """
    denom = multipliers * np.abs(noise_draws)
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == "regression":
            s = 0.25 * np.abs(margins) / denom
            s[denom == 0.0] = np.inf
        else:
            s = np.abs(margins) / denom
            s[denom == 0.0] = np.inf
            # noise pushing further from the boundary never flips the sign
            s[np.sign(noise_draws) == np.sign(margins)] = np.inf
    return s


def _calibrate_noise_scale(flip_at, config: BenchmarkConfig) -> float:
    """Bisect the global noise scale until the train correct rate lands
    within tolerance of the target. The rate is the fraction of samples
    whose flip threshold exceeds the scale, a nonincreasing step function."""
    target = config.target_correct_rate
    tol = CALIBRATION_TOLERANCE

    def rate(s):
        return float(np.mean(flip_at > s))

    lo = config.noise_scale_min if config.noise_scale_min > 0 else 1e-12
    if config.noise_scale_max > 0:
        hi = config.noise_scale_max
    else:
        hi = 1.0
        for _ in range(CALIBRATION_MAX_STEPS):
            if rate(hi) < target:
                break
            hi *= 2.0
    if rate(lo) < target - tol or rate(hi) > target + tol:
        raise ConfigError(
            f"cannot calibrate noise to correct rate {target} within "
            f"scale bounds [{lo}, {hi}]"
        )
    best_s, best_gap = lo, abs(rate(lo) - target)
    for _ in range(CALIBRATION_MAX_STEPS):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        gap = abs(r - target)
        if gap < best_gap:
            best_s, best_gap = mid, gap
        if r > target:
            lo = mid
        else:
            hi = mid
    if best_gap > tol:
        raise ConfigError(
            f"noise calibration did not reach correct rate {target} "
            f"after {CALIBRATION_MAX_STEPS} bisection steps (off by {best_gap:.4f})"
        )
    return best_s


def _task_map(rng, centers, hard_train, held_out):
    """Random linear map with pinned values at every cluster center.

    Targets: HELD_OUT_MARGIN at a held-out cluster, HARD_TRAIN_MARGIN at
    the noisy training cluster, alternating +/- EASY_MARGIN elsewhere. The
    minimum-norm solution is padded with a null-space component so the
    within-cluster spread of map values reaches MAP_WEIGHT_NORM.
    """
    k, d = centers.shape
    targets = np.empty(k)
    sign = 1.0
    for j in range(k):
        if j == hard_train:
            targets[j] = HARD_TRAIN_MARGIN
        elif held_out is not None and j == held_out:
            targets[j] = HELD_OUT_MARGIN
        else:
            targets[j] = sign * EASY_MARGIN
            sign = -sign
    w, *_ = np.linalg.lstsq(centers, targets, rcond=None)
    if k < d and np.linalg.norm(w) < MAP_WEIGHT_NORM:
        null = rng.normal(size=d)
        null -= centers.T @ np.linalg.lstsq(centers.T, null, rcond=None)[0]
        norm = np.linalg.norm(null)
        if norm > 1e-9:
            pad = np.sqrt(MAP_WEIGHT_NORM**2 - np.linalg.norm(w) ** 2)
            w = w + null * (pad / norm)
    return w, 0.0


def generate(config: BenchmarkConfig):
    """Build (train set, test set, metadata) for one benchmark config."""
    rng = substream(config.seed, "datagen")
    k, d = config.n_input_clusters, config.input_dim
    centers = _cluster_centers(rng, k, d, config.cluster_separation)

    held_out = None
    train_clusters = np.arange(k)
    if config.shift_kind == "held_out_cluster":
        held_out = int(rng.integers(k))
        train_clusters = np.array([c for c in range(k) if c != held_out])

    # one training cluster gets concentrated noise; the held-out cluster is
    # difficult through its position near the map's zero level set instead,
    # so its errors stay predictable from the inputs alone
    multipliers = np.ones(k)
    hard_train = int(train_clusters[rng.integers(len(train_clusters))])
    multipliers[hard_train] = HARD_REGION_MULTIPLIER

    w_map, b_map = _task_map(rng, centers, hard_train, held_out)

    def draw_inputs(n, cluster_pool, weights=None):
        ids = cluster_pool[rng.choice(len(cluster_pool), size=n, p=weights)]
        x = centers[ids] + rng.normal(size=(n, d))
        return x, ids

    x_train, id_train = draw_inputs(config.n_train, train_clusters)
    if config.shift_kind == "held_out_cluster":
        pool = np.arange(k)
        weights = np.full(k, (1.0 - HELD_OUT_TEST_FRACTION) / (k - 1))
        weights[held_out] = HELD_OUT_TEST_FRACTION
        x_test, id_test = draw_inputs(config.n_test, pool, weights)
    else:
        x_test, id_test = draw_inputs(config.n_test, train_clusters)
        if config.shift_kind == "covariate_shift":
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            x_test = x_test + 0.5 * config.cluster_separation * direction

    eta_train = rng.normal(size=config.n_train)
    eta_test = rng.normal(size=config.n_test)

    margins_train = x_train @ w_map + b_map
    margins_test = x_test @ w_map + b_map

    flip_train = _flip_thresholds(
        margins_train, multipliers[id_train], eta_train, config.mode
    )
    scale = _calibrate_noise_scale(flip_train, config)

    def finalize(x, ids, margins, eta):
        noise = scale * multipliers[ids] * eta
        if config.mode == "regression":
            gt = margins
            pred = margins + noise
        else:
            gt = (margins > 0).astype(np.float64)
            pred = ((margins + noise) > 0).astype(np.float64)
        return Dataset(
            inputs=x, task_pred=pred, ground_truth=gt,
            mode=config.mode, cluster_ids=ids,
        )

    train_set = finalize(x_train, id_train, margins_train, eta_train)
    test_set = finalize(x_test, id_test, margins_test, eta_test)

    metadata = {
        "noise_scale": float(scale),
        "multipliers": [float(m) for m in multipliers],
        "hard_train_cluster": hard_train,
        "held_out_cluster": held_out,
        "target_correct_rate": config.target_correct_rate,
        "realized_train_rate": float(train_set.correctness().mean()),
        "realized_test_rate": float(test_set.correctness().mean()),
        "map_weights": [float(v) for v in w_map],
        "map_bias": b_map,
    }
    return train_set, test_set, metadata

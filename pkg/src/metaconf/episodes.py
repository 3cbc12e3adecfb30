"""Construction of paired batches with intentionally different distributions.

Each training iteration consumes one episode: a small training batch and a
testing batch whose distributions are deliberately mismatched. Label
episodes skew the fraction of correct-prediction labels in the testing
batch; input episodes draw the two batches from different clusters of the
estimator's per-layer activation statistics. All sampling goes through an
explicit numpy Generator, so episode streams are reproducible and
independent builds can run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .data import Dataset
from .errors import ConfigError

KMEANS_MAX_ITER = 100


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class LabelProvenance:
    kind: str  # "label"
    sampled_percentage: float
    target_positive: int
    realized_positive: int
    batch_size: int

    @property
    def realized_fraction(self) -> float:
        return self.realized_positive / self.batch_size


@dataclass(frozen=True)
class InputProvenance:
    kind: str  # "input"
    train_cluster: int
    test_cluster: int
    vtr_with_replacement: bool = False
    vte_with_replacement: bool = False


@dataclass(frozen=True)
class EpisodePair:
    """Indices of one paired (training batch, testing batch) draw."""

    vtr: np.ndarray
    vte: np.ndarray
    provenance: LabelProvenance | InputProvenance

    def __post_init__(self):
        if len(self.vtr) == 0 or len(self.vte) == 0:
            raise ConfigError("episode batches must be nonempty")
        if isinstance(self.provenance, InputProvenance):
            if self.provenance.train_cluster == self.provenance.test_cluster:
                raise ConfigError("input episode must use two different clusters")


@dataclass
class EpochPools:
    """Per-epoch sample pools the episode builders draw from."""

    label_half: np.ndarray             # indices of the correctness-label half
    input_half: np.ndarray             # indices of the input half
    label_vtr_pool: np.ndarray         # subset of label_half feeding training batches
    label_vte_pool: np.ndarray         # subset of label_half feeding testing batches
    input_cluster_ids: np.ndarray | None = None  # cluster id per input_half entry
    train_cluster: int | None = None   # cluster selected for training batches


def epoch_split(n_samples: int, batch_size: int, rng: np.random.Generator):
    """Random partition of sample indices into two halves (sizes differ by <= 1)."""
    if n_samples < 2 * batch_size:
        raise ConfigError(
            f"dataset of {n_samples} samples cannot feed two halves of batch size {batch_size}"
        )
    perm = rng.permutation(n_samples)
    cut = (n_samples + 1) // 2
    return perm[:cut], perm[cut:]


def split_correctness_pools(
    dataset: Dataset,
    label_half: np.ndarray,
    fraction: float,
    rng: np.random.Generator,
):
    """Split the label half into a training pool and a testing pool.

    The testing pool's correctness labels are forced into the dataset cache
    here, since every label episode needs them.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"pool fraction must be in (0, 1), got {fraction}")
    if len(label_half) == 0:
        raise ConfigError("label half is empty")
    n_first = round_half_up(fraction * len(label_half))
    if n_first == 0 or n_first == len(label_half):
        raise ConfigError(
            f"fraction {fraction} leaves an empty pool for {len(label_half)} samples"
        )
    perm = rng.permutation(len(label_half))
    vtr_pool = label_half[perm[:n_first]]
    vte_pool = label_half[perm[n_first:]]
    dataset.correctness()
    return vtr_pool, vte_pool


def build_label_episode(
    dataset: Dataset,
    vtr_pool: np.ndarray,
    vte_pool: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> EpisodePair:
    """Training batch from the first pool; testing batch with a freshly drawn
    correct-label percentage from the second pool.

    The percentage is uniform on [0, 1]; the testing batch gets
    round(p * batch_size) correct samples and the rest incorrect, drawn
    without replacement within each class. If one class pool runs out the
    shortfall comes from the other class and the realized fraction is
    recorded in the provenance.
    """
    if batch_size > len(vtr_pool):
        raise ConfigError(
            f"batch size {batch_size} exceeds training pool of {len(vtr_pool)}"
        )
    if batch_size > len(vte_pool):
        raise ConfigError(
            f"batch size {batch_size} exceeds testing pool of {len(vte_pool)}"
        )
    vtr = rng.choice(vtr_pool, size=batch_size, replace=False)

    p = float(rng.uniform(0.0, 1.0))
    target_pos = round_half_up(p * batch_size)

    labels = dataset.correctness()[vte_pool]
    pos_pool = vte_pool[labels == 1]
    neg_pool = vte_pool[labels == 0]
    n_pos = min(target_pos, len(pos_pool))
    n_neg = min(batch_size - n_pos, len(neg_pool))
    n_pos = min(n_pos + (batch_size - n_pos - n_neg), len(pos_pool))
    if n_pos + n_neg != batch_size:
        raise ConfigError("testing pool too small to fill a batch")
    parts = []
    if n_pos:
        parts.append(rng.choice(pos_pool, size=n_pos, replace=False))
    if n_neg:
        parts.append(rng.choice(neg_pool, size=n_neg, replace=False))
    vte = np.concatenate(parts)

    return EpisodePair(
        vtr=vtr,
        vte=vte,
        provenance=LabelProvenance(
            kind="label",
            sampled_percentage=p,
            target_positive=target_pos,
            realized_positive=n_pos,
            batch_size=batch_size,
        ),
    )


def kmeans(
    vectors: np.ndarray,
    n_clusters: int,
    rng: np.random.Generator,
    max_iter: int = KMEANS_MAX_ITER,
    n_init: int = 4,
):
    """Lloyd's algorithm with distance-squared-weighted (k-means++) seeding.

    Runs ``n_init`` independent seedings and keeps the one with the lowest
    within-cluster sum of squares. Each run sweeps until assignments stop
    changing or ``max_iter`` iterations; a cluster that empties out is
    re-seeded on the point farthest from its assigned centroid. On return
    every point is assigned to its nearest centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("kmeans expects a 2-d array of vectors")
    n = x.shape[0]
    if n_clusters < 1:
        raise ConfigError(f"cluster count must be >= 1, got {n_clusters}")
    if n < n_clusters:
        raise ConfigError(f"{n} vectors cannot form {n_clusters} clusters")

    best = None
    for _ in range(max(1, n_init)):
        assignments, centroids = _kmeans_once(x, n_clusters, rng, max_iter)
        cost = float(
            np.sum((x - centroids[assignments]) ** 2)
        )
        if best is None or cost < best[0]:
            best = (cost, assignments, centroids)
    return best[1], best[2]


def _kmeans_once(x, n_clusters, rng, max_iter):
    n = x.shape[0]
    centroids = np.empty((n_clusters, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for k in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[k] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[k]) ** 2, axis=1))

    assignments = None
    for _ in range(max_iter):
        dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            return assignments, centroids
        assignments = new_assign
        for k in range(n_clusters):
            members = assignments == k
            if members.any():
                centroids[k] = x[members].mean(axis=0)
            else:
                own = dists[np.arange(n), assignments]
                far = int(np.argmax(own))
                centroids[k] = x[far]
                assignments[far] = k

    # iteration cap hit: make the returned pair consistent (nearest-centroid)
    dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(dists, axis=1), centroids


def cluster_input_pool(
    dataset: Dataset,
    input_half: np.ndarray,
    params: np.ndarray,
    arch: model.Architecture,
    n_clusters: int,
    rng: np.random.Generator,
):
    """Cluster the input half by the estimator's current activation statistics
    and pick one cluster to feed training batches this epoch."""
    if len(input_half) < n_clusters:
        raise ConfigError(
            f"input half of {len(input_half)} cannot form {n_clusters} clusters"
        )
    stats = model.feature_stats(params, arch, dataset.inputs[input_half])
    assignments, _ = kmeans(stats, n_clusters, rng)
    nonempty = np.unique(assignments)
    train_cluster = int(rng.choice(nonempty))
    return assignments, train_cluster


def build_input_episode(
    dataset: Dataset,
    pools: EpochPools,
    batch_size: int,
    rng: np.random.Generator,
) -> EpisodePair:
    """Training batch from the selected cluster, testing batch from a different
    one. A cluster smaller than the batch is sampled with replacement and the
    fallback is recorded in the provenance."""
    if pools.input_cluster_ids is None or pools.train_cluster is None:
        raise ConfigError("epoch pools carry no clustering")
    assignments = pools.input_cluster_ids
    members = pools.input_half[assignments == pools.train_cluster]
    if len(members) == 0:
        raise ConfigError("selected training cluster is empty")

    other_ids = [
        int(c) for c in np.unique(assignments) if int(c) != pools.train_cluster
    ]
    if not other_ids:
        raise ConfigError("no nonempty cluster left for the testing batch")
    test_cluster = int(other_ids[rng.integers(len(other_ids))])
    test_members = pools.input_half[assignments == test_cluster]

    vtr_replace = len(members) < batch_size
    vte_replace = len(test_members) < batch_size
    vtr = rng.choice(members, size=batch_size, replace=vtr_replace)
    vte = rng.choice(test_members, size=batch_size, replace=vte_replace)

    return EpisodePair(
        vtr=vtr,
        vte=vte,
        provenance=InputProvenance(
            kind="input",
            train_cluster=pools.train_cluster,
            test_cluster=test_cluster,
            vtr_with_replacement=vtr_replace,
            vte_with_replacement=vte_replace,
        ),
    )


def build_epoch_pools(
    dataset: Dataset,
    params: np.ndarray,
    arch: model.Architecture,
    batch_size: int,
    c1_fraction: float,
    n_clusters: int,
    rng: np.random.Generator,
    need_label: bool = True,
    need_input: bool = True,
) -> EpochPools:
    """Epoch setup: split the dataset in half, then prepare the label pools
    and the input clustering as required by the variant."""
    label_half, input_half = epoch_split(len(dataset), batch_size, rng)
    pools = EpochPools(
        label_half=label_half,
        input_half=input_half,
        label_vtr_pool=label_half,
        label_vte_pool=label_half,
    )
    if need_label:
        vtr_pool, vte_pool = split_correctness_pools(
            dataset, label_half, c1_fraction, rng
        )
        if len(vtr_pool) < batch_size or len(vte_pool) < batch_size:
            raise ConfigError(
                f"label pools of {len(vtr_pool)}/{len(vte_pool)} cannot feed "
                f"batch size {batch_size}"
            )
        pools.label_vtr_pool = vtr_pool
        pools.label_vte_pool = vte_pool
    if need_input:
        assignments, train_cluster = cluster_input_pool(
            dataset, input_half, params, arch, n_clusters, rng
        )
        pools.input_cluster_ids = assignments
        pools.train_cluster = train_cluster
    return pools

import numpy as np

from metaconf.data import Dataset


def make_regression_dataset(n, d=3, correct_rate=0.7, seed=0, clusters=2):
    """Small regression dataset with a controllable correct-label rate and
    optional blob structure in the inputs."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(clusters, d)) * 4.0
    ids = rng.integers(0, clusters, size=n)
    inputs = centers[ids] + rng.normal(size=(n, d))
    gt = inputs @ rng.normal(size=d) + 5.0
    pred = gt.copy()
    n_wrong = n - int(round(correct_rate * n))
    wrong = rng.choice(n, size=n_wrong, replace=False)
    pred[wrong] = gt[wrong] * 2.0 + 1.0  # relative difference far above 0.25
    return Dataset(
        inputs=inputs, task_pred=pred, ground_truth=gt, cluster_ids=ids
    )

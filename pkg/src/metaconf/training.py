"""Training loop: one simulated update, feedback from a mismatched batch,
then an actual update through both.

Each iteration takes a single simulated gradient step on the episode's
training batch (the estimator itself is not touched), evaluates the stepped
parameters on the episode's testing batch, and then updates the real
parameters with the gradient of

    total(phi) = loss_tr(phi) + loss_te(phi - alpha * grad loss_tr(phi))

including, by default, the curvature term that comes from differentiating
through the inner step. Ablation variants swap this update for plain joint
training, and simple reweighting/resampling baselines share the loop.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import episodes, model
from .data import Dataset
from .errors import ConfigError
from .seeding import substream

VARIANTS = ("full", "label_only", "input_only", "joint", "reweight", "resample", "plain")
EPISODIC_VARIANTS = ("full", "label_only", "input_only", "joint")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5e-4          # simulated-step learning rate
    beta: float = 1e-4           # actual-update learning rate
    epochs: int = 5
    iterations: int = 50         # per epoch
    batch_size: int = 32
    c1_fraction: float = 0.6
    n_clusters: int = 6
    variant: str = "full"
    seed: int = 0
    second_order: bool = True
    clip_norm: float = 0.0       # 0 disables clipping

    def __post_init__(self):
        # alpha/beta of exactly 0 are allowed: they reduce the update to
        # joint training and a no-op respectively, which tests rely on
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.epochs < 1 or self.iterations < 1:
            raise ConfigError("epochs and iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if not 0.0 < self.c1_fraction < 1.0:
            raise ConfigError("c1_fraction must be in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    step: int
    kind: str
    loss_vtr: float
    loss_vte: float | None
    grad_norm: float
    provenance: dict | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def serialize_history(records: list[IterationRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def virtual_train(params, arch, x, y, alpha):
    """One simulated gradient step. Returns stepped parameters and the loss;
    the input vector is never mutated."""
    loss, grad = model.loss_and_grad(params, arch, x, y)
    return params - alpha * grad, loss


def virtual_test(params_stepped, arch, x, y):
    return model.batch_loss(params_stepped, arch, x, y)


def _compose_meta_gradient(phi, tr_loss_and_grad, te_loss_and_grad, tr_hvp, alpha, second_order):
    """Gradient of loss_tr(phi) + loss_te(phi - alpha * grad_tr(phi)).

    The exact total derivative is
        grad_tr(phi) + (I - alpha * H_tr(phi)) @ grad_te(phi')
    and the first-order variant simply drops the Hessian term.
    """
    loss_tr, g_tr = tr_loss_and_grad(phi)
    phi_p = phi - alpha * g_tr
    loss_te, g_te = te_loss_and_grad(phi_p)
    g = g_tr + g_te
    if second_order and alpha != 0.0:
        g = g - alpha * tr_hvp(phi, g_te)
    return g, loss_tr, loss_te


def meta_gradient(params, arch, vtr, vte, alpha, second_order=True):
    """Update direction for one episode; vtr/vte are (inputs, labels) pairs.

    Returns (gradient, training loss, testing loss at the stepped params).
    """
    if second_order and not arch.is_smooth:
        raise ConfigError(
            f"second-order training needs a twice differentiable activation, "
            f"got {arch.activation!r}"
        )
    x_tr, y_tr = vtr
    x_te, y_te = vte
    return _compose_meta_gradient(
        params,
        lambda p: model.loss_and_grad(p, arch, x_tr, y_tr),
        lambda p: model.loss_and_grad(p, arch, x_te, y_te),
        lambda p, v: model.hessian_vector_product(p, arch, x_tr, y_tr, v),
        alpha,
        second_order,
    )


def _episode_batches(dataset: Dataset, episode: episodes.EpisodePair):
    labels = dataset.correctness().astype(np.float64)
    vtr = (dataset.inputs[episode.vtr], labels[episode.vtr])
    vte = (dataset.inputs[episode.vte], labels[episode.vte])
    return vtr, vte


def _clip(g, clip_norm):
    if clip_norm > 0:
        norm = float(np.linalg.norm(g))
        if norm > clip_norm:
            return g * (clip_norm / norm)
    return g


def meta_step(params, arch, dataset, episode, config: TrainConfig):
    """One actual update of the parameters from one episode."""
    vtr, vte = _episode_batches(dataset, episode)
    g, loss_tr, loss_te = meta_gradient(
        params, arch, vtr, vte, config.alpha, config.second_order
    )
    g = _clip(g, config.clip_norm)
    new_params = params - config.beta * g
    return new_params, (loss_tr, loss_te, float(np.linalg.norm(g)))


def joint_step(params, arch, dataset, episode, config: TrainConfig):
    """Ablation update: both batch losses evaluated at the current
    parameters, no simulated step anywhere."""
    vtr, vte = _episode_batches(dataset, episode)
    loss_tr, g_tr = model.loss_and_grad(params, arch, *vtr)
    loss_te, g_te = model.loss_and_grad(params, arch, *vte)
    g = _clip(g_tr + g_te, config.clip_norm)
    return params - config.beta * g, (loss_tr, loss_te, float(np.linalg.norm(g)))


def _validate_pools(dataset: Dataset, config: TrainConfig, arch) -> None:
    n = len(dataset)
    variant = config.variant
    b = config.batch_size
    if variant not in EPISODIC_VARIANTS:
        if n < b:
            raise ConfigError(f"dataset of {n} cannot feed batch size {b}")
        return
    if n < 2 * b:
        raise ConfigError(
            f"dataset of {n} samples cannot feed two halves of batch size {b}"
        )
    label_half = (n + 1) // 2
    input_half = n - label_half
    need_label = variant in ("full", "label_only", "joint")
    need_input = variant in ("full", "input_only", "joint")
    if need_label:
        n1 = episodes.round_half_up(config.c1_fraction * label_half)
        n2 = label_half - n1
        if n1 < b or n2 < b:
            raise ConfigError(
                f"label pools of {n1}/{n2} cannot feed batch size {b}; "
                "grow the dataset or shrink the batch"
            )
    if need_input and input_half < config.n_clusters:
        raise ConfigError(
            f"input half of {input_half} cannot form {config.n_clusters} clusters"
        )


def _episode_kind(variant: str, step: int) -> str:
    if variant == "label_only":
        return "label"
    if variant == "input_only":
        return "input"
    return "label" if step % 2 == 1 else "input"


def _baseline_batch(dataset, config, rng):
    n = len(dataset)
    if config.variant == "resample":
        labels = dataset.correctness()
        pos = np.nonzero(labels == 1)[0]
        neg = np.nonzero(labels == 0)[0]
        if len(pos) == 0 or len(neg) == 0:
            return rng.choice(n, size=config.batch_size, replace=False)
        n_pos = (config.batch_size + 1) // 2
        n_neg = config.batch_size - n_pos
        return np.concatenate([
            rng.choice(pos, size=n_pos, replace=len(pos) < n_pos),
            rng.choice(neg, size=n_neg, replace=len(neg) < n_neg),
        ])
    return rng.choice(n, size=config.batch_size, replace=False)


def _inverse_frequency_weights(dataset: Dataset) -> np.ndarray:
    labels = dataset.correctness()
    n = labels.size
    weights = np.ones(n)
    for cls in (0, 1):
        count = int((labels == cls).sum())
        if count:
            weights[labels == cls] = n / (2.0 * count)
    return weights


def train(dataset: Dataset, config: TrainConfig, arch: model.Architecture | None = None):
    """Run the full loop and return (final parameters, history records)."""
    if arch is None:
        arch = model.Architecture(input_dim=dataset.input_dim)
    if arch.input_dim != dataset.input_dim:
        raise ConfigError(
            f"architecture expects {arch.input_dim} features, "
            f"dataset has {dataset.input_dim}"
        )
    if config.second_order and config.variant in EPISODIC_VARIANTS and not arch.is_smooth:
        raise ConfigError(
            "second-order training needs a twice differentiable activation"
        )
    _validate_pools(dataset, config, arch)

    params = model.init_params(arch, substream(config.seed, "init"))
    rng_split = substream(config.seed, "split")
    rng_episode = substream(config.seed, "episode")
    history: list[IterationRecord] = []

    if config.variant in EPISODIC_VARIANTS:
        need_label = config.variant in ("full", "label_only", "joint")
        need_input = config.variant in ("full", "input_only", "joint")
        iteration = 0
        for epoch in range(1, config.epochs + 1):
            pools = episodes.build_epoch_pools(
                dataset, params, arch, config.batch_size, config.c1_fraction,
                config.n_clusters, rng_split, need_label=need_label,
                need_input=need_input,
            )
            for step in range(1, config.iterations + 1):
                iteration += 1
                kind = _episode_kind(config.variant, step)
                if kind == "label":
                    episode = episodes.build_label_episode(
                        dataset, pools.label_vtr_pool, pools.label_vte_pool,
                        config.batch_size, rng_episode,
                    )
                else:
                    episode = episodes.build_input_episode(
                        dataset, pools, config.batch_size, rng_episode
                    )
                step_fn = joint_step if config.variant == "joint" else meta_step
                params, (l_tr, l_te, g_norm) = step_fn(
                    params, arch, dataset, episode, config
                )
                history.append(IterationRecord(
                    iteration=iteration, epoch=epoch, step=step, kind=kind,
                    loss_vtr=l_tr, loss_vte=l_te, grad_norm=g_norm,
                    provenance=asdict(episode.provenance),
                ))
        return params, history

    # baselines: plain minibatch descent, optionally reweighted or resampled
    weights = _inverse_frequency_weights(dataset) if config.variant == "reweight" else None
    labels = dataset.correctness().astype(np.float64)
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        for step in range(1, config.iterations + 1):
            iteration += 1
            batch = _baseline_batch(dataset, config, rng_episode)
            w = weights[batch] if weights is not None else None
            loss, g = model.loss_and_grad(
                params, arch, dataset.inputs[batch], labels[batch], sample_weights=w
            )
            g = _clip(g, config.clip_norm)
            params = params - config.beta * g
            history.append(IterationRecord(
                iteration=iteration, epoch=epoch, step=step, kind="batch",
                loss_vtr=loss, loss_vte=None, grad_norm=float(np.linalg.norm(g)),
                provenance=None,
            ))
    return params, history


# -- gradient validation ------------------------------------------------------

def finite_difference_error(objective, grad, params, step=1e-5, max_coords=500, rng=None):
    """Largest deviation between ``grad`` and a central finite difference of
    ``objective``, relative to the largest finite-difference component.

    Per-coordinate ratios are ill-conditioned near zero components, so the
    error is normalized by the gradient scale instead. Nets with more than
    ``max_coords`` parameters are probed along random directions.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.size <= max_coords:
        fd = np.empty_like(params)
        for i in range(params.size):
            e = np.zeros_like(params)
            e[i] = step
            fd[i] = (objective(params + e) - objective(params - e)) / (2 * step)
        diff = np.max(np.abs(grad - fd))
        scale = max(np.max(np.abs(fd)), 1e-12)
        return float(diff / scale)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _ in range(32):
        v = rng.normal(size=params.size)
        v /= np.linalg.norm(v)
        fd = (objective(params + step * v) - objective(params - step * v)) / (2 * step)
        an = float(np.dot(grad, v))
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-12))
    return float(worst)


def grad_check(params, arch, dataset, episode, alpha, step=1e-5, second_order=True):
    """Compare the episode update direction against finite differences of the
    two-batch objective. Returns the max relative error."""
    vtr, vte = _episode_batches(dataset, episode)
    return grad_check_batches(params, arch, vtr, vte, alpha, step, second_order)


def grad_check_batches(params, arch, vtr, vte, alpha, step=1e-5, second_order=True):
    x_tr, y_tr = vtr
    x_te, y_te = vte

    def objective(p):
        stepped, _ = virtual_train(p, arch, x_tr, y_tr, alpha)
        return model.batch_loss(p, arch, x_tr, y_tr) + virtual_test(
            stepped, arch, x_te, y_te
        )

    g, _, _ = meta_gradient(params, arch, vtr, vte, alpha, second_order)
    return finite_difference_error(objective, g, params, step=step)


def grad_check_quadratic(a, b, alpha, phi):
    """Exercise the update composition on quadratic losses 0.5*a*phi^2 and
    0.5*b*phi^2, where the exact answer is a*phi + b*(1 - alpha*a)^2 * phi."""
    phi_vec = np.array([float(phi)])

    def tr(p):
        return 0.5 * a * float(p[0]) ** 2, a * p

    def te(p):
        return 0.5 * b * float(p[0]) ** 2, b * p

    g, _, _ = _compose_meta_gradient(
        phi_vec, tr, te, lambda p, v: a * v, alpha, second_order=True
    )
    expected = a * phi + b * (1 - alpha * a) ** 2 * phi
    return abs(float(g[0]) - expected) / max(abs(expected), 1e-12)

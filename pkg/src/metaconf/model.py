"""Confidence estimator network and its derivatives.

A small fully-connected net maps an input vector to a score in (0, 1).
Parameters live in one flat float64 vector; ``layout`` describes which
slice belongs to which layer, and ``pack``/``unpack`` round-trip exactly.
Everything here is a pure function of its arguments, so results are
bit-reproducible within a process and safe to call from multiple threads.

Besides the forward pass and the loss gradient, this module exposes an
exact Hessian-vector product (forward-over-reverse), which the trainer
needs to differentiate through a simulated inner update. Activations must
be twice differentiable for that product to exist; relu is accepted by
the net itself but rejected by the second-order training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

ACTIVATIONS = ("tanh", "sigmoid", "relu")
SMOOTH_ACTIVATIONS = ("tanh", "sigmoid")

CHECKPOINT_MAGIC = "metaconf-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Dense net shape: hidden layers plus a single sigmoid output unit."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if len(self.hidden_dims) < 1:
            raise ConfigError("at least one hidden layer is required")
        if any(int(h) < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, 1)

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_dims)

    @property
    def is_smooth(self) -> bool:
        return self.activation in SMOOTH_ACTIVATIONS


@dataclass(frozen=True)
class ParamSlice:
    """One named block of the flat parameter vector."""

    name: str
    shape: tuple[int, ...]
    start: int
    stop: int


def layout(arch: Architecture) -> tuple[ParamSlice, ...]:
    """Slice map of the flat vector: W then b for each layer, in order."""
    slices = []
    offset = 0
    dims = arch.layer_dims
    for l in range(1, len(dims)):
        w_shape = (dims[l], dims[l - 1])
        w_size = dims[l] * dims[l - 1]
        slices.append(ParamSlice(f"W{l}", w_shape, offset, offset + w_size))
        offset += w_size
        slices.append(ParamSlice(f"b{l}", (dims[l],), offset, offset + dims[l]))
        offset += dims[l]
    return tuple(slices)


def param_count(arch: Architecture) -> int:
    dims = arch.layer_dims
    return sum(dims[l] * dims[l - 1] + dims[l] for l in range(1, len(dims)))


def unpack(arch: Architecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flat vector -> [(W, b), ...]. Returned arrays are views into ``params``."""
    params = _check_params(arch, params)
    pairs = []
    slices = layout(arch)
    for i in range(0, len(slices), 2):
        w_sl, b_sl = slices[i], slices[i + 1]
        w = params[w_sl.start:w_sl.stop].reshape(w_sl.shape)
        b = params[b_sl.start:b_sl.stop]
        pairs.append((w, b))
    return pairs


def pack(arch: Architecture, pairs: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """[(W, b), ...] -> flat vector. Inverse of ``unpack``."""
    flat = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in pairs])
    return np.asarray(flat, dtype=np.float64)


def init_params(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer, W then b."""
    dims = arch.layer_dims
    blocks = []
    for l in range(1, len(dims)):
        bound = 1.0 / np.sqrt(dims[l - 1])
        blocks.append(rng.uniform(-bound, bound, size=dims[l] * dims[l - 1]))
        blocks.append(rng.uniform(-bound, bound, size=dims[l]))
    return np.concatenate(blocks)


# -- activations: value, first and second derivative (as functions of the value) --

def _act(arch: Architecture, z: np.ndarray) -> np.ndarray:
    if arch.activation == "tanh":
        return np.tanh(z)
    if arch.activation == "sigmoid":
        return _sigmoid(z)
    return np.maximum(z, 0.0)


def _act_d1(arch: Architecture, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if arch.activation == "tanh":
        return 1.0 - a * a
    if arch.activation == "sigmoid":
        return a * (1.0 - a)
    return (z > 0.0).astype(np.float64)


def _act_d2(arch: Architecture, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if arch.activation == "tanh":
        return -2.0 * a * (1.0 - a * a)
    if arch.activation == "sigmoid":
        d1 = a * (1.0 - a)
        return d1 * (1.0 - 2.0 * a)
    if not arch.is_smooth:
        raise ConfigError(
            f"activation {arch.activation!r} has no second derivative; "
            "use a smooth activation for second-order training"
        )
    raise AssertionError("unreachable")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_params(arch: Architecture, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != param_count(arch):
        raise DimensionError(
            f"parameter vector has length {params.size}, "
            f"architecture needs {param_count(arch)}"
        )
    return params


def _check_inputs(arch: Architecture, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimensionError(
            f"input has {x.shape[-1] if x.ndim else 0} features, "
            f"architecture expects {arch.input_dim}"
        )
    return x, single


def _forward_pass(params, arch, x):
    """Returns (activations, preactivations, logits); activations[0] is the input."""
    pairs = unpack(arch, params)
    acts = [x]
    zs = []
    a = x
    for w, b in pairs[:-1]:
        z = a @ w.T + b
        a = _act(arch, z)
        zs.append(z)
        acts.append(a)
    w_out, b_out = pairs[-1]
    logits = a @ w_out.T + b_out  # (B, 1)
    return acts, zs, logits[:, 0]


# smallest/largest doubles strictly inside (0, 1); keeps the score contract
# even when the sigmoid saturates
_SCORE_LO = np.nextafter(0.0, 1.0)
_SCORE_HI = np.nextafter(1.0, 0.0)


def forward(params: np.ndarray, arch: Architecture, x: np.ndarray):
    """Confidence score in (0, 1) for one input (1-d) or a batch (2-d)."""
    x, single = _check_inputs(arch, x)
    _, _, logits = _forward_pass(params, arch, x)
    scores = np.clip(_sigmoid(logits), _SCORE_LO, _SCORE_HI)
    return float(scores[0]) if single else scores


def hidden_activations(params: np.ndarray, arch: Architecture, x: np.ndarray) -> list[np.ndarray]:
    x, single = _check_inputs(arch, x)
    acts, _, _ = _forward_pass(params, arch, x)
    hidden = acts[1:]
    return [h[0] for h in hidden] if single else hidden


def feature_stats(params: np.ndarray, arch: Architecture, x: np.ndarray) -> np.ndarray:
    """Per hidden layer: mean and population std of that layer's activations.

    Output length is 2 * n_hidden; entry 2k is layer k's mean, entry 2k+1 its
    std. For a batch input the result is (B, 2 * n_hidden).
    """
    x, single = _check_inputs(arch, x)
    acts, _, _ = _forward_pass(params, arch, x)
    cols = []
    for h in acts[1:]:
        cols.append(h.mean(axis=1))
        cols.append(h.std(axis=1))  # ddof=0
    stats = np.stack(cols, axis=1)
    return stats[0] if single else stats


def bce_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross entropy of scores in (0, 1) against labels in {0, 1}."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.size == 0:
        raise DimensionError("empty batch")
    if scores.size != labels.size:
        raise DimensionError(f"{scores.size} scores vs {labels.size} labels")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be 0 or 1")
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise ValueError("scores must lie strictly inside (0, 1)")
    per = -(labels * np.log(scores) + (1.0 - labels) * np.log1p(-scores))
    return float(per.mean())


def _check_batch(arch, x, y):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    if x.shape[1] != arch.input_dim:
        raise DimensionError(
            f"batch has {x.shape[1]} features, architecture expects {arch.input_dim}"
        )
    if y.size != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs vs {y.size} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return x, y


def _bce_logits(logits: np.ndarray, y: np.ndarray) -> float:
    # log(1 + exp(-|z|)) + max(z, 0) - z*y, numerically stable
    per = np.log1p(np.exp(-np.abs(logits))) + np.maximum(logits, 0.0) - logits * y
    return float(per.mean())


def batch_loss(params: np.ndarray, arch: Architecture, x: np.ndarray, y: np.ndarray) -> float:
    """Mean BCE of the net on a batch, computed from logits for stability."""
    x, y = _check_batch(arch, x, y)
    _, _, logits = _forward_pass(params, arch, x)
    loss = _bce_logits(logits, y)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite")
    return loss


def loss_and_grad(
    params: np.ndarray,
    arch: Architecture,
    x: np.ndarray,
    y: np.ndarray,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Batch-mean BCE and its exact gradient w.r.t. the flat parameters.

    ``sample_weights`` rescales each sample's contribution (still averaged
    over the batch); None means uniform weight 1.
    """
    x, y = _check_batch(arch, x, y)
    n = x.shape[0]
    if sample_weights is None:
        w_s = np.ones(n)
    else:
        w_s = np.asarray(sample_weights, dtype=np.float64).ravel()
        if w_s.size != n:
            raise DimensionError(f"{n} inputs vs {w_s.size} sample weights")

    pairs = unpack(arch, params)
    acts, zs, logits = _forward_pass(params, arch, x)
    s = _sigmoid(logits)

    per = np.log1p(np.exp(-np.abs(logits))) + np.maximum(logits, 0.0) - logits * y
    loss = float((w_s * per).mean())

    # e_l holds dL/dz_l; output layer first, then backprop through hidden layers
    e_out = (w_s * (s - y) / n)[:, None]  # (B, 1)
    grads = [None] * len(pairs)
    a_prev = acts[-1]
    grads[-1] = (e_out.T @ a_prev, e_out.sum(axis=0))

    e = e_out
    w_next = pairs[-1][0]
    for l in range(arch.n_hidden - 1, -1, -1):
        d1 = _act_d1(arch, zs[l], acts[l + 1])
        e = (e @ w_next) * d1
        grads[l] = (e.T @ acts[l], e.sum(axis=0))
        w_next = pairs[l][0]

    grad = pack(arch, grads)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError("loss or gradient is not finite")
    return loss, grad


def hessian_vector_product(
    params: np.ndarray,
    arch: Architecture,
    x: np.ndarray,
    y: np.ndarray,
    vec: np.ndarray,
) -> np.ndarray:
    """Exact H @ vec for the batch-mean BCE, via forward-over-reverse.

    Pushes the directional derivative through both the forward pass and the
    backward pass, so no finite differencing is involved. Needs a twice
    differentiable activation.
    """
    if not arch.is_smooth:
        raise ConfigError(
            f"activation {arch.activation!r} is not twice differentiable"
        )
    x, y = _check_batch(arch, x, y)
    vec = _check_params(arch, vec)
    n = x.shape[0]

    pairs = unpack(arch, params)
    vpairs = unpack(arch, vec)
    acts, zs, logits = _forward_pass(params, arch, x)
    s = _sigmoid(logits)

    # forward sweep of the direction: r_a[l] = R{activation of layer l}
    r_a = [np.zeros_like(x)]
    r_z = []
    d1s = []
    d2s = []
    for l in range(arch.n_hidden):
        w, b = pairs[l]
        vw, vb = vpairs[l]
        rz = acts[l] @ vw.T + r_a[l] @ w.T + vb
        d1 = _act_d1(arch, zs[l], acts[l + 1])
        d2 = _act_d2(arch, zs[l], acts[l + 1])
        r_z.append(rz)
        d1s.append(d1)
        d2s.append(d2)
        r_a.append(d1 * rz)
    w_out, b_out = pairs[-1]
    vw_out, vb_out = vpairs[-1]
    r_logits = (acts[-1] @ vw_out.T + r_a[-1] @ w_out.T + vb_out)[:, 0]

    # reverse sweep: e = dL/dz per layer and its directional derivative r_e
    e_out = ((s - y) / n)[:, None]
    r_e_out = (s * (1.0 - s) * r_logits / n)[:, None]

    hv = [None] * len(pairs)
    hv[-1] = (r_e_out.T @ acts[-1] + e_out.T @ r_a[-1], r_e_out.sum(axis=0))

    e = e_out
    r_e = r_e_out
    w_next, v_next = w_out, vw_out
    for l in range(arch.n_hidden - 1, -1, -1):
        back = e @ w_next
        r_back = r_e @ w_next + e @ v_next
        e_l = back * d1s[l]
        r_e_l = r_back * d1s[l] + back * d2s[l] * r_z[l]
        hv[l] = (r_e_l.T @ acts[l] + e_l.T @ r_a[l], r_e_l.sum(axis=0))
        e, r_e = e_l, r_e_l
        w_next, v_next = pairs[l][0], vpairs[l][0]

    out = pack(arch, hv)
    if not np.all(np.isfinite(out)):
        raise NumericalError("Hessian-vector product is not finite")
    return out


# -- checkpoint file: versioned text header plus one value per line --

def save_checkpoint(path, arch: Architecture, params: np.ndarray) -> None:
    params = _check_params(arch, params)
    lines = [
        f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
        f"input_dim={arch.input_dim}",
        "hidden_dims=" + ",".join(str(h) for h in arch.hidden_dims),
        f"activation={arch.activation}",
        f"n_params={params.size}",
    ]
    lines.extend(repr(float(v)) for v in params)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[Architecture, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint file")
    version = lines[0].split("v")[-1]
    if version != str(CHECKPOINT_VERSION):
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    for line in lines[1:5]:
        key, _, value = line.partition("=")
        header[key] = value
    try:
        arch = Architecture(
            input_dim=int(header["input_dim"]),
            hidden_dims=tuple(int(h) for h in header["hidden_dims"].split(",")),
            activation=header["activation"],
        )
        n_params = int(header["n_params"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing checkpoint header field {exc}") from exc
    values = lines[5:]
    if len(values) != n_params or n_params != param_count(arch):
        raise ConfigError(
            f"{path}: expected {param_count(arch)} parameters, file lists {len(values)}"
        )
    params = np.array([float(v) for v in values], dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise ConfigError(f"{path}: checkpoint contains non-finite values")
    return arch, params

"""Run configuration: sectioned key = value text, strictly validated.

Three sections, all optional, every key defaulted: [data] controls the
synthetic benchmark, [model] the estimator shape, [train] the training
loop. Unknown sections or keys are hard errors so a typo cannot silently
fall back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass

from .datagen import BenchmarkConfig
from .errors import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "tanh"


@dataclass(frozen=True)
class RunConfig:
    data: BenchmarkConfig
    model: ModelConfig
    train: TrainConfig

    def snapshot(self) -> dict:
        out = {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": asdict(self.train),
        }
        out["model"]["hidden_dims"] = list(self.model.hidden_dims)
        return out


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(",") if part.strip())


_SECTION_FIELDS = {
    "data": {
        "input_dim": int,
        "n_train": int,
        "n_test": int,
        "n_input_clusters": int,
        "cluster_separation": float,
        "target_correct_rate": float,
        "shift_kind": str,
        "mode": str,
        "seed": int,
        "noise_scale_min": float,
        "noise_scale_max": float,
    },
    "model": {
        "hidden_dims": _parse_int_tuple,
        "activation": str,
    },
    "train": {
        "alpha": float,
        "beta": float,
        "epochs": int,
        "iterations": int,
        "batch_size": int,
        "c1_fraction": float,
        "n_clusters": int,
        "variant": str,
        "seed": int,
        "second_order": _parse_bool,
        "clip_norm": float,
    },
}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    kwargs: dict[str, dict] = {"data": {}, "model": {}, "train": {}}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(
                f"unknown config section [{section}]; "
                f"expected one of {sorted(_SECTION_FIELDS)}"
            )
        fields = _SECTION_FIELDS[section]
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]; "
                    f"expected one of {sorted(fields)}"
                )
            try:
                kwargs[section][key] = fields[key](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r} ({exc})"
                ) from exc

    return RunConfig(
        data=BenchmarkConfig(**kwargs["data"]),
        model=ModelConfig(**kwargs["model"]),
        train=TrainConfig(**kwargs["train"]),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def default_config() -> RunConfig:
    return RunConfig(data=BenchmarkConfig(), model=ModelConfig(), train=TrainConfig())

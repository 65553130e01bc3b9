"""Run configuration: one JSON file drives prepare/train/eval/sample-episodes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .pipeline import PreprocessConfig
from .preprocess import AugSpec, ClaheConfig
from .sampler import EpisodeSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    name: str = "run"
    top_k: int = 10
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugSpec = AugSpec()
    train: TrainConfig = TrainConfig()
    eval_episodes: int = 1000
    output_dir: str = "runs"
    base_dir: str = field(default=".", compare=False)

    @property
    def spec(self) -> EpisodeSpec:
        return self.train.spec

    @property
    def metric(self) -> str:
        return self.train.metric

    @property
    def temperature(self) -> float:
        return self.train.temperature

    def manifest_path(self) -> Path:
        return (Path(self.base_dir) / self.manifest).resolve()

    def run_dir(self) -> Path:
        return (Path(self.base_dir) / self.output_dir / self.name).resolve()

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _build(cls, data, path: str):
    """Instantiate dataclass ``cls`` from a dict, naming the offending field on error."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known or key == "base_dir":
            raise ConfigError(f"unknown config field '{where}'")
        default = known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"config field '{where}' must be a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


_TYPES = {
    "top_k": int, "split_seed": int, "eval_episodes": int, "name": str, "manifest": str, "output_dir": str,
    "train.epochs": int, "train.episodes_per_epoch": int, "train.val_episodes": int, "train.seed": int,
    "train.decay_every": int, "train.embed_dim": int, "train.metric": str,
    "train.lr0": float, "train.temperature": float, "train.dropout_prob": float,
    "train.spec.n_way": int, "train.spec.k_shot": int, "train.spec.n_query": int,
    "preprocess.work_size": int, "preprocess.downsample": int, "preprocess.clahe_enabled": bool,
    "preprocess.clahe.tiles_x": int, "preprocess.clahe.tiles_y": int, "preprocess.clahe.clip_limit": float,
}


def _check_types(data: dict, prefix: str = "") -> None:
    for key, value in data.items():
        where = f"{prefix}{key}"
        if isinstance(value, dict):
            _check_types(value, where + ".")
            continue
        want = _TYPES.get(where)
        if want is None:
            continue
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"config field '{where}' must be {want.__name__}, got {value!r}")


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    if "manifest" not in data:
        raise ConfigError("missing required config field 'manifest'")
    _check_types(data)
    cfg = _build(RunConfig, data, "")
    cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)}, "base_dir": str(base_dir)})
    if len(cfg.ratios) != 3:
        raise ConfigError("config field 'ratios' must have three entries")
    if cfg.top_k < 1 or cfg.eval_episodes < 1:
        raise ConfigError("config fields 'top_k' and 'eval_episodes' must be positive")
    if cfg.spec.n_way > cfg.top_k:
        raise ConfigError(f"config field 'train.spec.n_way' ({cfg.spec.n_way}) exceeds top_k ({cfg.top_k})")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = config_from_dict(data, path.parent)
    if check_paths and not cfg.manifest_path().is_file():
        raise ConfigError(f"config field 'manifest': file not found: {cfg.manifest_path()}")
    return cfg


__all__ = ["ClaheConfig", "ConfigError", "RunConfig", "config_from_dict", "load_config"]

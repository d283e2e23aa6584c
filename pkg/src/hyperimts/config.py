"""Line-based ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown or repeated keys are
errors.  :func:`format_run_config` writes the canonical form, which parses
back to an equal :class:`RunConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    def __init__(self, line_no: int | None, msg: str):
        super().__init__(f"line {line_no}: {msg}" if line_no else msg)
        self.line_no = line_no


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    split_seed: int = 0
    normalize: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_RUN_KEYS = ("dataset", "split_seed", "normalize")
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_opt_float(s: str) -> float | None:
    return None if s.lower() in ("auto", "none") else float(s)


def _parse_opt_int(s: str) -> int | None:
    return None if s.lower() in ("all", "none") else int(s)


def _parse_ints(s: str) -> tuple[int, ...]:
    out = tuple(int(x) for x in s.replace(",", " ").split())
    if not out:
        raise ValueError("empty list")
    return out


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


_PARSERS = {
    "dataset": str,
    "split_seed": int,
    "normalize": _parse_bool,
    "p_obs": int,
    "p_time": int,
    "p_var": int,
    "heads": int,
    "layers": int,
    "delta_init": float,
    "time_scale": _parse_opt_float,
    "ablation": str,
    "seed": int,
    "mask_attention": _parse_bool,
    "query_residual": _parse_bool,
    "alpha_zero": _parse_bool,
    "lr0": float,
    "lr_decay": float,
    "lr_hold": int,
    "max_epochs": int,
    "patience": int,
    "seeds": _parse_ints,
    "batch_size": int,
    "split_time": float,
    "horizon": _parse_opt_int,
    "betas": _parse_floats,
    "eps": float,
    "denormalized_metrics": _parse_bool,
}


def parse_run_config(text: str) -> RunConfig:
    values: dict[str, tuple[int, object]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(line_no, f"expected key = value, got {raw.strip()!r}")
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in _PARSERS or key not in _RUN_KEYS + _MODEL_KEYS + _TRAIN_KEYS:
            raise ConfigFileError(line_no, f"unknown key {key!r}")
        if key in values:
            raise ConfigFileError(line_no, f"duplicate key {key!r} (first set on line {values[key][0]})")
        try:
            values[key] = (line_no, _PARSERS[key](val))
        except ValueError as exc:
            raise ConfigFileError(line_no, f"bad value for {key}: {exc}") from None

    def pick(keys):
        return {k: v for k, (_, v) in values.items() if k in keys}

    try:
        model = ModelConfig(**pick(_MODEL_KEYS))
    except ValueError as exc:
        raise ConfigFileError(_first_line(values, _MODEL_KEYS), str(exc)) from None
    try:
        train = TrainConfig(**pick(_TRAIN_KEYS))
    except ValueError as exc:
        raise ConfigFileError(_first_line(values, _TRAIN_KEYS), str(exc)) from None
    return RunConfig(model=model, train=train, **pick(_RUN_KEYS))


def _first_line(values, keys) -> int | None:
    lines = [ln for k, (ln, _) in values.items() if k in keys]
    return min(lines) if lines else None


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_run_config(cfg: RunConfig) -> str:
    lines = ["# run"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _RUN_KEYS]
    lines.append("# model")
    lines += [f"{k} = {_fmt(getattr(cfg.model, k))}" for k in _MODEL_KEYS]
    lines.append("# training")
    lines += [f"{k} = {_fmt(getattr(cfg.train, k))}" for k in _TRAIN_KEYS]
    return "\n".join(lines) + "\n"

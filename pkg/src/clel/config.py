"""Run configuration and its flat ``key = value`` text form.

Keys use dotted namespaces (``sgld.step_count = 60``). Blank lines and lines
starting with ``#`` are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

from .energy_model import PROJECTORS, VARIANTS
from .errors import ConfigError
from .nets import ACTIVATIONS, SPECTRAL_MODES
from .objectives import LossConfig
from .sgld import SGLDConfig


@dataclass
class ModelConfig:
    d_z: int = 128
    hidden: tuple = (128, 128)
    activation: str = "swish"
    spectral: str = "conv"
    projector: str = "mlp"
    variant: str = "norm-direction"
    compose_squared: bool = True


@dataclass
class EncoderConfig:
    hidden: tuple = (128, 128)
    jitter: float = 0.06
    max_degrees: float = 10.0


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999


@dataclass
class SGDConfig:
    lr: float = 3e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class BufferConfig:
    capacity: int = 10000
    reinit_prob: float = 0.001


@dataclass
class TrainConfig:
    total_iters: int = 5000
    warmup_iters: int = 2000
    batch_size: int = 64
    ema_decay: float = 0.995
    checkpoint_every: int = 1000
    max_retries: int = 3


@dataclass
class EvalConfig:
    n_samples: int = 5000
    n_permutations: int = 200
    ood_kind: str = "uniform"


def _default_sgld():
    return SGLDConfig(step_count=60, grad_coeff=0.01, noise_scale=0.03, clamp_lo=-3.0, clamp_hi=3.0,
                      aug_period=60, eval_step_count=600, aug_strength=0.5)


@dataclass
class RunConfig:
    """Every hyperparameter of a run; the text snapshot of this suffices to re-run."""

    seed: int = 0
    dataset: str = "gauss8"
    data_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sgld: SGLDConfig = field(default_factory=_default_sgld)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    ebm_opt: AdamConfig = field(default_factory=AdamConfig)
    enc_opt: SGDConfig = field(default_factory=SGDConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.warmup_iters > t.total_iters and t.total_iters > 0:
            raise ConfigError("train.warmup_iters must not exceed train.total_iters")
        if t.batch_size < 1 or t.total_iters < 0 or t.warmup_iters < 0:
            raise ConfigError("train sizes must be positive")
        for name, rate in (("ebm_opt.lr", self.ebm_opt.lr), ("enc_opt.lr", self.enc_opt.lr)):
            if rate < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= t.ema_decay <= 1.0:
            raise ConfigError("train.ema_decay must lie in [0, 1]")
        for key, value, allowed in (("model.spectral", self.model.spectral, SPECTRAL_MODES),
                                    ("model.projector", self.model.projector, PROJECTORS),
                                    ("model.variant", self.model.variant, VARIANTS),
                                    ("model.activation", self.model.activation, ACTIVATIONS)):
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {value!r}")
        # re-run dataclass checks on nested configs
        LossConfig(**dataclasses.asdict(self.loss))
        SGLDConfig(**dataclasses.asdict(self.sgld))
        return self


# -- flat text form -------------------------------------------------------------------

def _is_dc(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = get_origin(tp)
    if origin is Optional or (origin is not None and type(None) in get_args(tp)):
        if text.lower() == "none":
            return None
        tp = next(a for a in get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is tuple:
            return tuple(int(s) for s in text.split(",") if s.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _field_types(cls):
    return get_type_hints(cls)


def set_key(cfg: RunConfig, key: str, value: str) -> None:
    """Assign one dotted key from its text form, rejecting unknown keys."""
    parts = key.strip().split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key: {key}")
        obj = getattr(obj, p)
    name = parts[-1]
    types = _field_types(type(obj))
    if name not in types or _is_dc(types[name]):
        raise ConfigError(f"unknown config key: {key}")
    setattr(obj, name, _parse(value, types[name], key))


def parse_lines(lines, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        parse_lines(text.splitlines(), cfg)
    parse_lines(overrides, cfg)
    return cfg.validate()


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg).items())


def loads(text: str) -> RunConfig:
    return parse_lines(text.splitlines()).validate()


def write_snapshot(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path

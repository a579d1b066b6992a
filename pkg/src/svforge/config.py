"""Run configuration: dataclass sections with a line-oriented ``dotted.key = value`` text format.

Example::

    seed = 7
    data.n_speakers = 20
    train.stage1.epochs = 12   # frozen-encoder stage
    train.stage3.frame_range = 250,300
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .encoder import ConformerConfig
from .frontend import ConfigError
from .pruning import PruneConfig
from .training import StageConfig, desk_stage_configs

STAGE_KEYS = {"stage1": "freeze", "stage2": "joint", "stage3": "lmft"}


@dataclass
class DataConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 15
    train_utts: int = 8
    dev_utts: int = 3
    min_dur: float = 2.0
    max_dur: float = 4.0
    test_trials: int = 400
    dev_trials: int = 200

    def __post_init__(self):
        if self.train_utts < 1 or self.dev_utts < 0:
            raise ConfigError("data.train_utts must be >= 1 and data.dev_utts >= 0")
        if self.train_utts + self.dev_utts + 2 > self.utts_per_speaker:
            raise ConfigError("data.utts_per_speaker must leave at least two test utterances per speaker")
        if not 0 < self.min_dur <= self.max_dur:
            raise ConfigError("need 0 < data.min_dur <= data.max_dur")


@dataclass
class HeadConfig:
    kind: str = "adapter_mfa"
    adapter_dim: int = 128
    embed_dim: int = 256
    attention: str = "channel"
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.kind not in ("weighted", "mfa", "adapter_mfa", "lora_adapter_mfa"):
            raise ConfigError(f"unknown head.kind {self.kind!r}")
        if self.attention not in ("shared", "channel"):
            raise ConfigError("head.attention must be 'shared' or 'channel'")


@dataclass
class PruneSection(PruneConfig):
    # longer than the toy default: the multiplier oscillation needs ~1000 extra steps to settle
    steps: int = 3000
    refine_epochs: int = 2


@dataclass
class EvalConfig:
    asnorm: bool = True
    top_k: int = 300
    qmf: bool = True
    qmf_input: str = "normalized"
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if self.qmf_input not in ("raw", "normalized"):
            raise ConfigError("eval.qmf_input must be 'raw' or 'normalized'")


def _stage_defaults():
    d = desk_stage_configs()
    return {k: d[v] for k, v in STAGE_KEYS.items()}


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: _stage_defaults()["stage1"])
    stage2: StageConfig = field(default_factory=lambda: _stage_defaults()["stage2"])
    stage3: StageConfig = field(default_factory=lambda: _stage_defaults()["stage3"])

    def stage(self, name: str) -> StageConfig:
        for k, v in STAGE_KEYS.items():
            if v == name:
                return getattr(self, k)
        raise ConfigError(f"unknown stage {name!r}")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneSection = field(default_factory=PruneSection)
    eval: EvalConfig = field(default_factory=EvalConfig)


# -- flattening -----------------------------------------------------------------------------

_FIXED = {"train.stage1.stage", "train.stage2.stage", "train.stage3.stage"}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    hints = _hints(type(obj))
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        elif key not in _FIXED:
            out[key] = (val, hints[f.name])
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _base_type(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0]
    return tp


def parse_value(text: str, tp, key: str = "?"):
    tp = _base_type(tp)
    s = text.strip()
    try:
        if tp is bool:
            low = s.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(s)
        if tp is int:
            return int(s)
        if tp is float:
            return float(s)
        if tp is tuple or typing.get_origin(tp) is tuple:
            return tuple(int(x) for x in s.split(","))
        return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {s!r} as {getattr(tp, '__name__', tp)}") from None


def _set(obj, parts: list[str], raw: str, full: str):
    name = parts[0]
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {full!r}")
    cur = getattr(obj, name)
    if len(parts) > 1:
        if not dataclasses.is_dataclass(cur):
            raise ConfigError(f"unknown config key {full!r}")
        _set(cur, parts[1:], raw, full)
        return
    if dataclasses.is_dataclass(cur) or full in _FIXED:
        raise ConfigError(f"{full!r} is not a settable value")
    setattr(obj, name, parse_value(raw, _hints(type(obj))[name], full))


def _revalidate(obj):
    """Rebuild every dataclass so __post_init__ checks see the final values."""
    kw = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        kw[f.name] = _revalidate(v) if dataclasses.is_dataclass(v) else v
    try:
        return type(obj)(**kw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, value-text)`` pairs and re-validate."""
    for key, raw in pairs:
        _set(cfg, key.split("."), raw, key)
    return _revalidate(cfg)


def parse_lines(lines) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    return apply_overrides(base or RunConfig(), parse_lines(text.splitlines()))


def load(path: str) -> RunConfig:
    try:
        with open(path) as f:
            return loads(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, (v, _) in flatten(cfg).items())


def parse_set(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()

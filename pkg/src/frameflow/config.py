"""One nested config object for a whole run, with strict JSON (de)serialization.

Unknown keys are rejected rather than ignored: a typo in an override or a
stale config file should fail loudly, not silently train the wrong model.
Every artifact a run writes embeds `config_hash(cfg)` so results remain
traceable to the exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import Aggregator
from .data import DataSettings
from .dropping import DropRouter
from .encoders import EgocentricEncoder, GeneralEncoder, TOKENS_PER_FRAME
from .engine import EngineSettings
from .errors import ConfigError
from .metrics import MetricsSettings
from .model import ToyLM
from .sequence import Vocab
from .train import TrainSettings


@dataclass
class ModelSettings:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int | None = None  # None picks 4 * d_model
    vocab_size: int = 64
    enc_width: int = 64
    rope_base: float = 10000.0
    seed: int = 0


@dataclass
class AggregationSettings:
    variant: str = "adaptive_routing"
    mode_general: int = 10
    mode_ego: int = 10
    d_hidden: int | None = None
    nonlinearity: str = "sigmoid"
    per_frame_scalar: bool = False
    seed: int = 0


@dataclass
class DroppingSettings:
    beta: float = 0.0
    policy: str = "none"
    selection: str = "per_frame"
    scale_by_r: bool = True
    random_dropping: bool = False
    seed: int = 0


@dataclass
class SlowPathSettings:
    enabled: bool = True
    fine_grained: bool = False
    use_box: bool = True
    box_jitter: bool = False
    jitter_seed: int = 0
    max_response_len: int = 32


@dataclass
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    aggregation: AggregationSettings = field(default_factory=AggregationSettings)
    dropping: DroppingSettings = field(default_factory=DroppingSettings)
    slow_path: SlowPathSettings = field(default_factory=SlowPathSettings)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, factory in _SECTIONS.items():
        cls = type(factory())
        body = data.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        defaults = factory()
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - known
        if bad:
            raise ConfigError(f"unknown config key(s) in {name!r}: {sorted(bad)}")
        # ints written where a float lives would destabilize the config hash
        body = {k: float(v) if (isinstance(getattr(defaults, k), float)
                                and isinstance(v, int)
                                and not isinstance(v, bool)) else v
                for k, v in body.items()}
        sections[name] = cls(**body)
    return RunConfig(**sections)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n")


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _coerce(dotted: str, raw: str, current):
    """Parse an override value against the type of the field it replaces."""
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw  # bare strings stay strings
    if current is None:
        return val
    if isinstance(current, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{dotted} expects true/false, got {raw!r}")
        return val
    if isinstance(current, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{dotted} expects an integer, got {raw!r}")
        return val
    if isinstance(current, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{dotted} expects a number, got {raw!r}")
        return float(val)
    if isinstance(current, str):
        if not isinstance(val, str):
            raise ConfigError(f"{dotted} expects a string, got {raw!r}")
        return val
    return val


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """`section.key=value` assignments on a deep copy of the config."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(
                f"override key {dotted!r} must be section.field")
        section, name = parts
        if section not in data:
            raise ConfigError(f"unknown config section {section!r}")
        if name not in data[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        data[section][name] = _coerce(dotted, raw, data[section][name])
    return config_from_dict(data)


# ---------------- factories ----------------

def build_vocab(cfg: RunConfig) -> Vocab:
    return Vocab(cfg.model.vocab_size)


def build_model(cfg: RunConfig) -> ToyLM:
    agg = Aggregator(cfg.aggregation.variant,
                     (cfg.aggregation.mode_general, cfg.aggregation.mode_ego),
                     d_model=cfg.model.d_model,
                     tokens_per_frame=TOKENS_PER_FRAME,
                     d_hidden=cfg.aggregation.d_hidden,
                     seed=cfg.aggregation.seed,
                     nonlinearity=cfg.aggregation.nonlinearity,
                     per_frame_scalar=cfg.aggregation.per_frame_scalar)
    router = DropRouter(cfg.model.d_model, cfg.model.n_layers,
                        beta=cfg.dropping.beta, policy=cfg.dropping.policy,
                        selection=cfg.dropping.selection,
                        scale_by_r=cfg.dropping.scale_by_r,
                        random_dropping=cfg.dropping.random_dropping,
                        seed=cfg.dropping.seed)
    return ToyLM(build_vocab(cfg), agg, router, d_model=cfg.model.d_model,
                 n_layers=cfg.model.n_layers, n_heads=cfg.model.n_heads,
                 d_ff=cfg.model.d_ff, enc_width=cfg.model.enc_width,
                 rope_base=cfg.model.rope_base, seed=cfg.model.seed)


def build_encoders(cfg: RunConfig) -> tuple[GeneralEncoder, EgocentricEncoder]:
    # both draw from one seed; their weight streams are keyed apart internally
    return (GeneralEncoder(width=cfg.model.enc_width, seed=cfg.model.seed),
            EgocentricEncoder(width=cfg.model.enc_width, seed=cfg.model.seed))


def engine_settings(cfg: RunConfig) -> EngineSettings:
    sp = cfg.slow_path
    return EngineSettings(use_slow_path=sp.enabled, fine_grained=sp.fine_grained,
                          use_box=sp.use_box, box_jitter=sp.box_jitter,
                          jitter_seed=sp.jitter_seed,
                          max_response_len=sp.max_response_len)

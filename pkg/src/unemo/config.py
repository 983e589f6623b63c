"""Model/training configuration and the flat ``key = value`` run-config format."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .graphworld import WorldSpec

VARIANTS = ("MWM", "VisWM", "Cond2Vis", "TopoState", "none")
SUPERVISION = ("a1", "a2", "both")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    landmark_count: int = 16
    d_model: int = 64
    z_dim: int = 16
    s_dim: int = 32
    mwm_layers: int = 3
    feedback_layers: int = 2
    v_max: int = 16
    max_tokens: int = 40
    dtype: str = "float64"

    @property
    def vocab_size(self) -> int:
        return 8 + self.landmark_count + 2

    @property
    def basis_dim(self) -> int:
        # appearance + view from here + surroundings + (visited, current, adjacent) flags
        return 3 * self.feature_dim + 3


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    beta: float = 0.5
    aux_weight: float = 1.0
    lr: float = 1e-3
    phases: int = 4
    batches_per_phase: int = 5000
    mwm_active_fraction: float = 0.10
    supervision: str = "a2"
    variant: str = "MWM"
    feedback: bool = True
    seed: int = 0
    step_cap: int = 15
    success_threshold: float = 3.0
    grad_clip: float = 5.0
    probe_weight: float = 0.5
    mwm_label: str = "lookahead"
    mwm_retrain_batches: int = 50
    mwm_retrain_reinit: bool = False
    stop_in_lookahead: bool = True
    val_episodes: int = 40

    def validate(self) -> None:
        if not 0.0 <= self.mwm_active_fraction <= 1.0:
            raise ConfigError("mwm_active_fraction must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.supervision not in SUPERVISION:
            raise ConfigError(f"supervision must be one of {SUPERVISION}, got {self.supervision!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mwm_label not in ("lookahead", "expert"):
            raise ConfigError("mwm_label must be 'lookahead' or 'expert'")
        if self.phases < 0 or self.batches_per_phase < 1:
            raise ConfigError("phases must be >= 0 and batches_per_phase >= 1")

    @property
    def uses_world_model(self) -> bool:
        return self.variant in ("MWM", "VisWM")

    @property
    def feeds_back(self) -> bool:
        return self.feedback and self.uses_world_model


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI run needs; serialized as flat ``key = value`` lines."""

    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus_dir: str = "corpus"
    ae_checkpoint: str = "ae.ckpt"
    train_worlds: int = 300
    val_worlds: int = 50
    episodes_per_world: int = 16
    ae_epochs: int = 30
    ae_lr: float = 2e-3
    ae_corpus_size: int = 4000
    sweep_seeds: int = 5

    def digest(self) -> bytes:
        return hashlib.sha256(serialize(self).encode("utf-8")).digest()


# flat key=value ---------------------------------------------------------------
# Keys are prefixed by section: world.*, model.*, train.*; top-level keys are bare.
_ALIASES = {"train.lambda": "train.lam"}


def _coerce(raw: str, typ, key: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(typ, str)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sections():
    return {"world": WorldSpec, "model": ModelConfig, "train": TrainConfig}


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for sub in fields(val):
                key = f"{f.name}.{sub.name}"
                if key == "train.lam":
                    key = "train.lambda"
                lines.append(f"{key} = {_fmt(getattr(val, sub.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(val)}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    """Parse flat config text; unknown keys raise :class:`ConfigError`."""
    sections = _sections()
    sub_values: dict[str, dict] = {k: {} for k in sections}
    top: dict = {}
    top_types = {f.name: f.type for f in fields(RunConfig) if f.name not in sections}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            types = {f.name: f.type for f in fields(sections[sec])}
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            sub_values[sec][name] = _coerce(raw, types[name], key)
        else:
            if key not in top_types:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, top_types[key], key)
    built = {sec: cls(**sub_values[sec]) for sec, cls in sections.items()}
    cfg = RunConfig(**built, **top)
    cfg.train.validate()
    cfg.world.validate()
    return cfg


def load(path, env: dict | None = None) -> RunConfig:
    """Read a config file; ``UNEMO_SEED`` in the environment overrides train.seed."""
    cfg = parse(Path(path).read_text(encoding="utf-8"))
    env = os.environ if env is None else env
    if env.get("UNEMO_SEED"):
        seed = _coerce(env["UNEMO_SEED"], int, "UNEMO_SEED")
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def model_config_for(spec: WorldSpec, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    return dataclasses.replace(base, feature_dim=spec.feature_dim, landmark_count=spec.landmark_count)

"""Experiment configuration: YAML schema, env/flag overrides, ablation matrix.

Precedence: dataclass defaults < config file < EVSEG_* environment variables
< command-line overrides.  Unknown keys are rejected up front.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, is_dataclass
from pathlib import Path

import yaml

from .backbones import ModelConfig
from .branches import FREEZE_POLICIES
from .data import SynthesisOptions
from .distill import REWEIGHT_KINDS, LossWeights
from .errors import ConfigError
from .reconstruct import KINDS as RECONSTRUCTOR_KINDS
from .serialization import canonical_json

ENV_PREFIX = "EVSEG_"


@dataclass(frozen=True)
class ReconstructorOptions:
    kind: str = "integrator"
    decay: float = 0.0
    gain: float = 1.0
    bins: int = 5
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in RECONSTRUCTOR_KINDS:
            raise ConfigError(f"reconstructor.kind must be one of {RECONSTRUCTOR_KINDS}")
        if self.bins < 1:
            raise ConfigError("reconstructor.bins must be >= 1")


@dataclass(frozen=True)
class LossOptions:
    lambda_m: float = 5.0
    lambda_c: float = 2.0
    lambda_reg: float = 0.1
    hard_targets: bool = False
    positional_matching: bool = False
    iou_match_threshold: float = 0.25

    def __post_init__(self):
        for name in ("lambda_m", "lambda_c", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_m, self.lambda_c, self.lambda_reg)


@dataclass(frozen=True)
class ReweightOptions:
    kind: str = "dissimilarity-network"

    def __post_init__(self):
        if self.kind not in REWEIGHT_KINDS:
            raise ConfigError(f"reweight.kind must be one of {REWEIGHT_KINDS}")


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 1e-5
    # The trust network trains jointly with the distillation objective but on
    # a slower timescale, so it cannot silence regions faster than the event
    # branch can learn them.  None means learning_rate / 20.
    dn_learning_rate: float | None = None
    batch_size: int = 4
    steps: int = 200
    optimizer: str = "adam"
    freeze_policy: str = "both"
    grad_clip: float = 10.0
    checkpoint_every: int = 100

    def effective_dn_learning_rate(self) -> float:
        return self.learning_rate / 20.0 if self.dn_learning_rate is None else self.dn_learning_rate

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.dn_learning_rate is not None and self.dn_learning_rate <= 0:
            raise ConfigError("train.dn_learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.optimizer != "adam":
            raise ConfigError("train.optimizer must be 'adam'")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"train.freeze_policy must be one of {FREEZE_POLICIES}")


@dataclass(frozen=True)
class FoundationOptions:
    steps: int = 300
    learning_rate: float = 2e-3
    batch_size: int = 4
    width: int = 64
    height: int = 64
    cache_dir: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("foundation.steps must be >= 0")


@dataclass(frozen=True)
class PromptOptions:
    templates: tuple = ("a photo of a {}",)
    file: str | None = None

    def __post_init__(self):
        if not self.templates and not self.file:
            raise ConfigError("prompts.templates must not be empty")
        for tpl in self.templates:
            if "{}" not in tpl:
                raise ConfigError(f"prompt template {tpl!r} has no {{}} placeholder")


@dataclass(frozen=True)
class EvalOptions:
    vocab_file: str | None = None
    merge_file: str | None = None
    ignore_label: str | None = None
    overlays: bool = False


_SECTIONS = {
    "model": ModelConfig,
    "synthesize": SynthesisOptions,
    "reconstructor": ReconstructorOptions,
    "loss": LossOptions,
    "reweight": ReweightOptions,
    "train": TrainOptions,
    "foundation": FoundationOptions,
    "prompts": PromptOptions,
    "eval": EvalOptions,
}

_TOP_SCALARS = {"seed": int, "out_dir": str, "data_dir": str}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    data_dir: str = "data/toy"
    model: ModelConfig = ModelConfig()
    synthesize: SynthesisOptions = SynthesisOptions()
    reconstructor: ReconstructorOptions = ReconstructorOptions()
    loss: LossOptions = LossOptions()
    reweight: ReweightOptions = ReweightOptions()
    train: TrainOptions = TrainOptions()
    foundation: FoundationOptions = FoundationOptions()
    prompts: PromptOptions = PromptOptions()
    eval: EvalOptions = EvalOptions()

    def as_dict(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir, "data_dir": self.data_dir}
        for name in _SECTIONS:
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(getattr(self, name)).items()}
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.as_dict()).encode()).hexdigest()

    def templates(self) -> list:
        from .backbones import load_templates
        if self.prompts.file:
            return load_templates(self.prompts.file)
        return list(self.prompts.templates)


def _coerce(section: str, name: str, value, default):
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{section}.{name} must be a boolean")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{section}.{name} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{name} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{name} must be a list")
        return tuple(value)
    if isinstance(default, str) or default is None:
        return value
    return value


def _build_section(section: str, dc_type, data) -> object:
    if data is None:
        return dc_type()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    proto = dc_type()
    known = {f.name for f in fields(dc_type)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(section, key, value, getattr(proto, key))
    try:
        return dc_type(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - set(_TOP_SCALARS))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    kwargs = {}
    for name, typ in _TOP_SCALARS.items():
        if name in data:
            try:
                kwargs[name] = typ(data[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name!r}: {exc}") from exc
    for name, dc_type in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, dc_type, data[name])
    return ExperimentConfig(**kwargs)


def load_config(path=None, overrides: dict | None = None, env: dict | None = None) -> ExperimentConfig:
    """Build a config from a YAML file plus environment and explicit overrides."""
    data = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        data = raw
    env = os.environ if env is None else env
    for key, raw_value in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
        _apply_dotted(data, dotted, yaml.safe_load(raw_value))
    for dotted, value in (overrides or {}).items():
        _apply_dotted(data, dotted, value)
    return config_from_dict(data)


def _apply_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) == 1:
        data[parts[0]] = value
        return
    if len(parts) != 2:
        raise ConfigError(f"override key {dotted!r} must be 'key' or 'section.key'")
    section, key = parts
    node = data.setdefault(section, {})
    if not isinstance(node, dict):
        raise ConfigError(f"cannot override non-mapping section {section!r}")
    node[key] = value


def parse_override(text: str):
    """Parse a --set key=value argument; the value is YAML-typed."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def ablation_rows() -> list:
    """Named config deltas covering every reweighting / loss-weight /
    fine-tuning / reconstructor / prompt variant.  Each row is reachable by
    configuration alone."""
    return [
        ("baseline_no_training", {"train.steps": 0}),
        ("distill_plain", {"reweight.kind": "none"}),
        ("distill_reweight_cosine", {"reweight.kind": "cosine-similarity"}),
        ("distill_reweight_feature", {"reweight.kind": "feature-difference"}),
        ("distill_reweight_network", {"reweight.kind": "dissimilarity-network"}),
        ("loss_c5_m5", {"loss.lambda_c": 5.0, "loss.lambda_m": 5.0}),
        ("loss_c5_m2", {"loss.lambda_c": 5.0, "loss.lambda_m": 2.0}),
        ("loss_c2_m5", {"loss.lambda_c": 2.0, "loss.lambda_m": 5.0}),
        ("finetune_projector_only", {"train.freeze_policy": "mlp_only"}),
        ("finetune_mask_generator_only", {"train.freeze_policy": "mask_generator_only"}),
        ("finetune_both", {"train.freeze_policy": "both"}),
        ("reconstructor_integrator", {"reconstructor.kind": "integrator"}),
        ("reconstructor_recurrent", {"reconstructor.kind": "recurrent"}),
        ("prompts_name_only", {"prompts.templates": ["{}"]}),
        ("prompts_descriptive", {"prompts.templates": ["a photo of a {}"]}),
    ]

"""
Run configuration: one dataclass per pipeline stage, layered as
dataclass defaults <- settings.HOI_DEFAULTS <- JSON config file.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from django.conf import settings

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Custom exception for configuration errors"""

    def __init__(self, message: str, key: str = ''):
        super().__init__(message)
        self.key = key


@dataclass
class KinematicsConfig:
    count: int = 200
    objects: List[str] = field(default_factory=lambda: ['cube', 'sphere', 'cylinder', 'capsule', 'hinged_box'])
    scripts: List[str] = field(default_factory=lambda: ['approach', 'grasp', 'lift', 'rotate', 'pass', 'open_lid'])
    length_range: List[int] = field(default_factory=lambda: [48, 96])
    actions_per_sequence: List[int] = field(default_factory=lambda: [1, 1])
    noise: float = 0.01
    contact_threshold: float = 0.02
    heldout_fraction: float = 0.1
    fps: int = 30
    sample_count: int = 600
    point_count: int = 512

    def validate(self):
        _check(self.count >= 1, 'kinematics.count', "count must be at least 1")
        _check(len(self.objects) > 0, 'kinematics.objects', "at least one object is required")
        _check(len(self.scripts) > 0, 'kinematics.scripts', "at least one script is required")
        _check(len(self.length_range) == 2 and 1 <= self.length_range[0] <= self.length_range[1],
               'kinematics.length_range', "length_range must be [min, max] with 1 <= min <= max")
        _check(len(self.actions_per_sequence) == 2
               and 1 <= self.actions_per_sequence[0] <= self.actions_per_sequence[1],
               'kinematics.actions_per_sequence', "actions_per_sequence must be [min, max] with min >= 1")
        _check(self.noise >= 0, 'kinematics.noise', "noise must be nonnegative")
        _check(self.contact_threshold > 0, 'kinematics.contact_threshold', "contact_threshold must be positive")
        _check(0 <= self.heldout_fraction < 1, 'kinematics.heldout_fraction', "heldout_fraction must be in [0, 1)")


@dataclass
class GeometryConfig:
    lambda_pen: float = 0.2
    beta_c: float = 0.5
    gamma_r: float = 1.0
    phi_approach: float = 0.02
    tau_contact: float = 0.005

    def validate(self):
        for name in ('lambda_pen', 'beta_c', 'gamma_r'):
            _check(getattr(self, name) >= 0, f'geometry.{name}', f"{name} must be nonnegative")
        _check(0 < self.tau_contact <= self.phi_approach, 'geometry.tau_contact',
               "tau_contact must be positive and not exceed phi_approach")


@dataclass
class TokenizerConfig:
    epochs: int = 2000
    batch_size: int = 32
    codebook_size: int = 512
    latent_dim: int = 64
    hidden: int = 128
    window: int = 4
    handedness_dim: int = 8
    alpha: float = 0.5
    mask_prob: float = 0.15
    learning_rate: float = 2e-4
    ema_decay: float = 0.99
    max_grad_norm: float = 1.0
    quantizer_mode: str = 'decomposed'
    stage_order: List[str] = field(default_factory=lambda: ['o', 'l', 'r'])
    geo_losses: bool = True
    checkpoint_every: int = 0
    log_every: int = 10

    def validate(self):
        _check(self.epochs >= 1, 'tokenizer.epochs', "epochs must be at least 1")
        _check(self.batch_size >= 1, 'tokenizer.batch_size', "batch_size must be at least 1")
        _check(self.codebook_size >= 2, 'tokenizer.codebook_size', "codebook_size must be at least 2")
        _check(self.window >= 1, 'tokenizer.window', "window must be at least 1")
        _check(self.alpha >= 0, 'tokenizer.alpha', "alpha must be nonnegative")
        _check(0 <= self.mask_prob < 1, 'tokenizer.mask_prob', "mask_prob must be in [0, 1)")
        _check(0 < self.ema_decay < 1, 'tokenizer.ema_decay', "ema_decay must be in (0, 1)")
        _check(self.quantizer_mode in ('decomposed', 'independent'), 'tokenizer.quantizer_mode',
               "quantizer_mode must be 'decomposed' or 'independent'")
        _check(sorted(self.stage_order) == ['l', 'o', 'r'], 'tokenizer.stage_order',
               "stage_order must be a permutation of o, l, r")


@dataclass
class CodecConfig:
    prediction_fraction: float = 0.2
    interpolation_ratio: float = 0.5
    span_noise: float = 0.15
    mean_span_length: float = 3.0
    sentinels: int = 100

    def validate(self):
        _check(0 < self.prediction_fraction < 1, 'codec.prediction_fraction',
               "prediction_fraction must be in (0, 1)")
        _check(0 <= self.interpolation_ratio < 1, 'codec.interpolation_ratio',
               "interpolation_ratio must be in [0, 1)")
        _check(0 < self.span_noise < 1, 'codec.span_noise', "span_noise must be in (0, 1)")
        _check(self.mean_span_length >= 1, 'codec.mean_span_length', "mean_span_length must be at least 1")


@dataclass
class LMConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    ffn_width: int = 512
    context: int = 512
    learning_rate: float = 2e-4
    tune_epochs: int = 100
    pretrain_steps: int = 2000
    batch_size: int = 8
    pretrain_mix: float = 0.5
    sampling: str = 'greedy'
    top_k: int = 5
    max_grad_norm: float = 1.0
    log_every: int = 10

    def validate(self):
        _check(self.heads >= 1 and self.width % self.heads == 0, 'lm.heads',
               "width must be divisible by heads")
        _check(self.context >= 8, 'lm.context', "context must be at least 8 tokens")
        _check(self.tune_epochs >= 0, 'lm.tune_epochs', "tune_epochs must be nonnegative")
        _check(self.batch_size >= 1, 'lm.batch_size', "batch_size must be at least 1")
        _check(0 <= self.pretrain_mix <= 1, 'lm.pretrain_mix', "pretrain_mix must be in [0, 1]")
        _check(self.sampling in ('greedy', 'top_k'), 'lm.sampling', "sampling must be 'greedy' or 'top_k'")
        _check(self.top_k >= 1, 'lm.top_k', "top_k must be at least 1")


@dataclass
class EvalConfig:
    matcher_epochs: int = 65
    matcher_learning_rate: float = 1e-3
    matcher_batch: int = 32
    matcher_hidden: int = 64
    embed_dim: int = 64
    temperature: float = 0.1
    r_precision_batch: int = 32
    diversity_pairs: int = 100
    mmodality_samples: int = 3
    repeats: int = 1

    def validate(self):
        _check(self.matcher_epochs >= 1, 'eval.matcher_epochs', "matcher_epochs must be at least 1")
        _check(self.r_precision_batch >= 2, 'eval.r_precision_batch', "r_precision_batch must be at least 2")
        _check(self.diversity_pairs >= 1, 'eval.diversity_pairs', "diversity_pairs must be at least 1")
        _check(self.repeats >= 1, 'eval.repeats', "repeats must be at least 1")


@dataclass
class RunConfig:
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: Optional[str] = None
    workers: int = 1

    def validate(self) -> 'RunConfig':
        for section in SECTIONS:
            getattr(self, section).validate()
        _check(self.workers >= 1, 'workers', "workers must be at least 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        """Canonical echo: sorted keys, fixed indentation, no run-specific paths."""
        data = self.to_dict()
        data.pop('out', None)
        return json.dumps(data, sort_keys=True, indent=2) + '\n'


SECTIONS = ('kinematics', 'geometry', 'tokenizer', 'codec', 'lm', 'eval')


def _check(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{key}: {message}", key=key)


def _merge(target, values: Dict[str, Any], prefix: str) -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{dotted}'", key=dotted)
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' must be a mapping", key=dotted)
            _merge(current, value, f"{dotted}.")
            continue
        setattr(target, key, _coerce(current, value, dotted))


def _coerce(current, value, dotted: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{dotted}' must be true or false", key=dotted)
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"'{dotted}' must be an integer", key=dotted)
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{dotted}' must be a number", key=dotted)
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{dotted}' must be a list", key=dotted)
        return list(value)
    return value


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from settings defaults, an optional JSON file and
    optional overrides (already-parsed command-line flags).

    Raises:
        ConfigError: unknown key, wrong type, invalid value or unreadable file
    """
    config = RunConfig()
    _merge(config, getattr(settings, 'HOI_DEFAULTS', {}), '')

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", key=str(path))
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}", key=str(path))
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object", key=str(path))
        _merge(config, data, '')
        logger.info(f"Loaded run config from {path}")

    if overrides:
        _merge(config, {k: v for k, v in overrides.items() if v is not None}, '')

    return config.validate()


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """RunConfig from an already-parsed mapping (e.g. a config echo), no settings layer."""
    config = RunConfig()
    _merge(config, data, '')
    return config.validate()

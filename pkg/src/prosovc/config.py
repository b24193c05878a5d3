"""Run configuration: one versioned document covering every component.

The config is a tree of dataclasses with every default stated explicitly.
Loading is strict: unknown keys are rejected, values are type-checked.
Runs are identified by a short hash of the canonical config JSON plus the
seed, so a run directory is reproducible from its config alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class FrameConfig:
    """Framing and spectral analysis geometry."""

    sample_rate: int = 16000
    frame_length_ms: float = 50.0
    frame_shift_ms: float = 12.5
    n_mels: int = 128
    mel_fmin: float = 40.0
    mel_fmax: float = 4000.0
    mel_filter_width: float = 1.0
    f0_min: float = 70.0
    f0_max: float = 420.0

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))

    def validate(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.frame_length <= 0 or self.frame_shift <= 0:
            raise ConfigError("frame geometry must be positive")
        if not (0 < self.f0_min < self.f0_max < self.sample_rate / 4):
            raise ConfigError("require 0 < f0_min < f0_max < sample_rate/4")
        if not (0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2):
            raise ConfigError("mel band edges out of range")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.mel_filter_width < 1.0:
            raise ConfigError("mel_filter_width must be >= 1")


@dataclass
class CorpusConfig:
    """Synthetic multi-speaker corpus layout.

    ``n_speakers`` counts all speakers including the adaptation target;
    speakers other than ``target_speaker_id`` form the pretraining set.
    """

    n_speakers: int = 5
    target_speaker_id: int = 4
    utterances_per_speaker: int = 50
    test_utterances_per_speaker: int = 8
    min_frames: int = 80
    max_frames: int = 240
    n_phone_classes: int = 12
    n_unvoiced_classes: int = 3
    d_bn: int = 64
    bn_smoothing_frames: int = 5
    style_boost: float = 1.5
    base_f0_low: float = 120.0
    base_f0_high: float = 300.0
    store_waveforms: bool = True

    def validate(self):
        if self.n_speakers < 2:
            raise ConfigError("need at least one pretrain speaker plus a target")
        if not (0 <= self.target_speaker_id < self.n_speakers):
            raise ConfigError("target_speaker_id out of range")
        if self.utterances_per_speaker < 1:
            raise ConfigError("utterances_per_speaker must be >= 1")
        if not (1 <= self.min_frames <= self.max_frames):
            raise ConfigError("invalid frame-count range")
        if self.n_unvoiced_classes >= self.n_phone_classes:
            raise ConfigError("need at least one voiced phone class")
        if self.d_bn < self.n_phone_classes:
            raise ConfigError("d_bn must be >= n_phone_classes for the orthogonal map")
        if self.bn_smoothing_frames < 1 or self.bn_smoothing_frames % 2 == 0:
            raise ConfigError("bn_smoothing_frames must be odd and >= 1")
        if not (100.0 <= self.base_f0_low <= self.base_f0_high <= 320.0):
            raise ConfigError("speaker base f0 range must lie in [100, 320] Hz")


@dataclass
class ModelConfig:
    """Network dimensions for all model components."""

    d_model: int = 256
    n_blocks: int = 6
    n_heads: int = 2
    ffn_dim: int = 512
    dropout: float = 0.1
    summary_kernel: int = 3
    d_z: int = 16
    d_r: int = 16
    vae_channels: int = 32
    vae_rnn_dim: int = 64
    refenc_channels: int = 32
    refenc_rnn_dim: int = 64
    classifier_hidden: int = 32
    d_spk: int = 32
    decoder_prenet_dim: int = 128
    decoder_prenet_dropout: float = 0.5
    decoder_rnn_dim: int = 256
    explicit_repeat: int = 1
    postnet_channels: int = 128
    postnet_kernel: int = 5
    postnet_layers: int = 5
    logvar_min: float = -8.0
    logvar_max: float = 4.0
    mel_floor: float = -10.0
    use_prosody_module: bool = True

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_blocks < 1:
            raise ConfigError("need at least one self-attention block")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.postnet_kernel % 2 == 0 or self.summary_kernel % 2 == 0:
            raise ConfigError("conv kernels must be odd for same-padding")
        if self.logvar_min >= self.logvar_max:
            raise ConfigError("logvar clamp range is empty")


@dataclass
class TrainConfig:
    """Optimization schedule and alternation settings."""

    adv_weight: float = 0.1
    kl_weight_max: float = 1e-3
    kl_ramp_frac: float = 0.2
    lr0: float = 2e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 500
    d_steps: int = 5
    g_steps: int = 5
    d_lr_scale: float = 1.0
    batch_size: int = 8
    pretrain_steps: int = 2000
    adapt_steps: int = 500
    adapt_val_fraction: float = 0.1
    teacher_noise: float = 0.2
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    num_threads: int = 1

    def validate(self):
        if self.adv_weight < 0:
            raise ConfigError("adv_weight must be >= 0")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.d_steps < 1 or self.g_steps < 1:
            raise ConfigError("alternation step counts must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 <= self.adapt_val_fraction < 1.0):
            raise ConfigError("adapt_val_fraction must be in [0, 1)")
        if self.kl_ramp_frac < 0:
            raise ConfigError("kl_ramp_frac must be >= 0")


@dataclass
class EvalConfig:
    """Objective evaluation settings."""

    coefficients: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    n_f0_candidates: int = 240
    n_harmonics: int = 8
    voicing_contrast: float = 1.4
    energy_floor: float = 1e-6
    probe_folds: int = 5
    probe_hidden: int = 32
    probe_epochs: int = 400
    probe_lr: float = 1e-2

    def validate(self):
        if len(self.coefficients) < 1 or any(c <= 0 for c in self.coefficients):
            raise ConfigError("sweep coefficients must be positive")
        if self.probe_folds < 2:
            raise ConfigError("probe needs >= 2 folds")
        if self.n_harmonics < 1 or self.n_f0_candidates < 8:
            raise ConfigError("f0 search grid too small")


@dataclass
class RunConfig:
    """Top-level run document: one seed plus all component configs."""

    version: int = 1
    seed: int = 7
    frame: FrameConfig = field(default_factory=FrameConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.version != 1:
            raise ConfigError(f"unsupported config version {self.version}")
        for section in (self.frame, self.corpus, self.model, self.training, self.eval):
            section.validate()
        return self


_SECTIONS = ("frame", "corpus", "model", "training", "eval")


def _from_mapping(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or name in _SECTIONS:
            kwargs[name] = _from_mapping(_section_type(name), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, cls(**{}).__getattribute__(name), f"{path}{name}")
    return cls(**kwargs)


def _section_type(name: str):
    return {
        "frame": FrameConfig,
        "corpus": CorpusConfig,
        "model": ModelConfig,
        "training": TrainConfig,
        "eval": EvalConfig,
    }[name]


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [float(v) for v in value]
    return value


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a RunConfig from a plain mapping (strict keys)."""
    return _from_mapping(RunConfig, data, "").validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``dotted.path=value`` overrides and re-validate."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"unknown config path {dotted!r}")
            node = node[key]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node[leaf] = raw
    return config_from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    """Short stable identifier of the config content (seed excluded)."""
    data = config_to_dict(cfg)
    data.pop("seed", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:10]


def run_dir_name(cfg: RunConfig) -> str:
    return f"{config_hash(cfg)}-s{cfg.seed}"


def iter_flat_items(cfg: RunConfig):
    """Yield (dotted_key, default_value) pairs for every config key."""
    def walk(prefix, obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                yield from walk(f"{prefix}{f.name}.", value)
            else:
                yield f"{prefix}{f.name}", value

    yield from walk("", cfg)

"""Flat training configuration with presets, file loading, and overrides.

A config file is plain key-value text: one `key = value` per line, `#`
comments allowed.  Every key can also be overridden on the command line
as `--key=value`.  VAEMO_SEED in the environment takes precedence over
the configured seed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import CorpusConfig
from .errors import ConfigError, ParseError
from .stage1 import Stage1Config
from .stage2 import Stage2Config

ENV_SEED = "VAEMO_SEED"

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    data_dir: str = "data"
    run_dir: str = "runs/default"

    # architecture
    embed_dim: int = 128
    num_heads: int = 8
    depth_f: int = 4
    depth_g: int = 2
    mlp_ratio: int = 4
    decoder_dim: int = 256
    decoder_depth: int = 2
    decoder_heads: int = 8
    audio_frames: int = 64
    mel_bins: int = 32
    video_frames: int = 16
    video_height: int = 32
    video_width: int = 32
    text_dim: int = 256
    adapter_hidden: int = 0  # 0 resolves to 4 * embed_dim

    # first-stage objectives
    mask_ratio_audio: float = 0.8
    mask_ratio_video: float = 0.9
    lambda_contrast: float = 0.01
    tau: float = 0.07
    symmetric_contrast: bool = True

    # second-stage objectives
    alpha: float = 0.6
    beta: float = 0.4
    stage2_symmetric: bool = False
    subset_fraction: float = 0.10
    trainable_policy: str = "layer_norm_only"

    # optimization
    batch_size: int = 16
    stage1_epochs: int = 10
    stage1_lr: float = 1.2e-3
    stage1_weight_decay: float = 0.05
    stage2_epochs: int = 10
    stage2_lr: float = 1e-4
    stage2_weight_decay: float = 0.0
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 0.01
    pretrain_beta1: float = 0.9
    pretrain_beta2: float = 0.95
    finetune_beta1: float = 0.9
    finetune_beta2: float = 0.999
    warmup_fraction: float = 0.05
    adam_eps: float = 1e-8
    joint_caption_weight: float = 0.0

    # corpus
    n_samples: int = 400
    n_classes: int = 4
    n_folds: int = 5
    caption_passes: int = 3
    caption_confusion: float = 0.0
    caption_coverage: float = 1.0
    noise_scale: float = 1.0
    class_overlap: float = 0.0

    # evaluation
    task: str = "categorical"
    test_fold: int = 0

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            depth_f=self.depth_f,
            depth_g=self.depth_g,
            mlp_ratio=self.mlp_ratio,
            audio_frames=self.audio_frames,
            mel_bins=self.mel_bins,
            video_frames=self.video_frames,
            video_height=self.video_height,
            video_width=self.video_width,
            decoder_dim=self.decoder_dim,
            decoder_depth=self.decoder_depth,
            decoder_heads=self.decoder_heads,
            text_dim=self.text_dim,
            adapter_hidden=self.adapter_hidden,
        )

    def stage1(self) -> Stage1Config:
        return Stage1Config(
            mask_ratio_audio=self.mask_ratio_audio,
            mask_ratio_video=self.mask_ratio_video,
            lambda_contrast=self.lambda_contrast,
            tau=self.tau,
            symmetric_contrast=self.symmetric_contrast,
        )

    def stage2(self) -> Stage2Config:
        return Stage2Config(
            alpha=self.alpha,
            beta=self.beta,
            tau=self.tau,
            subset_fraction=self.subset_fraction,
            trainable_policy=self.trainable_policy,
            symmetric=self.stage2_symmetric,
        )

    def corpus(self) -> CorpusConfig:
        return CorpusConfig(
            n_samples=self.n_samples,
            n_classes=self.n_classes,
            n_folds=self.n_folds,
            audio_frames=self.audio_frames,
            mel_bins=self.mel_bins,
            video_frames=self.video_frames,
            video_height=self.video_height,
            video_width=self.video_width,
            caption_passes=self.caption_passes,
            caption_confusion=self.caption_confusion,
            caption_coverage=self.caption_coverage,
            text_dim=self.text_dim,
            noise_scale=self.noise_scale,
            class_overlap=self.class_overlap,
        )


# Paper-scale architecture: D=512, 10 shared + 2 fusion layers, 8 heads,
# 4s x 128-mel audio, 16 x 160x160 video, 100 pre-training epochs.
_PAPER_OVERRIDES = {
    "embed_dim": 512,
    "depth_f": 10,
    "depth_g": 2,
    "num_heads": 8,
    "audio_frames": 256,
    "mel_bins": 128,
    "video_frames": 16,
    "video_height": 160,
    "video_width": 160,
    "decoder_dim": 256,
    "decoder_depth": 2,
    "text_dim": 4096,
    "stage1_epochs": 100,
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def preset_config(name: str) -> TrainConfig:
    if name == "desk":
        return TrainConfig()
    if name == "paper":
        return dataclasses.replace(TrainConfig(), preset="paper", **_PAPER_OVERRIDES)
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def _coerce(key: str, raw: str) -> object:
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key!r}: {exc}") from None


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Reads `key = value` lines, ignoring blanks and # comments."""
    out: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    """Parses --key=value strings (leading dashes optional)."""
    out: dict[str, object] = {}
    for pair in pairs:
        body = pair.lstrip("-")
        if "=" not in body:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, raw = body.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def resolve_config(
    config_file: str | Path | None = None,
    overrides: list[str] | None = None,
    env: dict[str, str] | None = None,
) -> TrainConfig:
    """Preset -> config file -> --key=value overrides -> VAEMO_SEED."""
    env = os.environ if env is None else env
    file_values = parse_config_file(config_file) if config_file else {}
    cli_values = parse_overrides(overrides or [])

    preset = cli_values.get("preset", file_values.get("preset", "desk"))
    cfg = preset_config(str(preset))
    merged = {**file_values, **cli_values}
    merged.pop("preset", None)
    if merged:
        cfg = dataclasses.replace(cfg, **merged)

    if ENV_SEED in env:
        try:
            seed = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}") from None
        cfg = dataclasses.replace(cfg, seed=seed)

    cfg.backbone()  # validate architecture eagerly
    return cfg

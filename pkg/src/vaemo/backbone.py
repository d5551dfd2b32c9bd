"""Shared transformer over audio and video tokens.

Both modalities pass through the same encoder stack f (shared weights,
modality embeddings added at tokenization), then their token sequences
are concatenated and fused by a second stack g.  Blocks are pre-norm:
x + attn(LN(x)) followed by x + mlp(LN(x)), with a final LayerNorm per
stack.  Sequence representations are mean pools over tokens; there is
no class token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .autodiff import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    tensor_mean,
    transpose,
)
from .errors import ConfigError, ShapeError
from .params import ParamStore, trunc_normal
from .tokenizer import (
    AUDIO_PATCH_DIM,
    VIDEO_PATCH_DIM,
    audio_token_count,
    tokenize,
    video_token_count,
)

LN_EPS = 1e-5
INIT_STD = 0.02

# Parameters outside the representation network proper.
REPR_EXCLUDE_PREFIXES = ("decoder.", "adapter.", "head.")


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 128
    num_heads: int = 8
    depth_f: int = 4
    depth_g: int = 2
    mlp_ratio: int = 4
    audio_frames: int = 64
    mel_bins: int = 32
    video_frames: int = 16
    video_height: int = 32
    video_width: int = 32
    decoder_dim: int = 256
    decoder_depth: int = 2
    decoder_heads: int = 8
    text_dim: int = 256
    adapter_hidden: int = 0  # 0 resolves to 4 * embed_dim

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}"
            )
        if self.depth_f < 1:
            raise ConfigError(f"depth_f must be at least 1, got {self.depth_f}")
        if self.depth_g < 0:
            raise ConfigError(f"depth_g must be non-negative, got {self.depth_g}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be at least 1, got {self.mlp_ratio}")
        if self.decoder_dim <= 0 or self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} must be a positive multiple of decoder_heads {self.decoder_heads}"
            )
        # Raises ParameterError on bad divisibility before any params exist.
        audio_token_count(self.audio_frames, self.mel_bins)
        video_token_count(self.video_frames, self.video_height, self.video_width)

    @property
    def adapter_width(self) -> int:
        return self.adapter_hidden if self.adapter_hidden > 0 else 4 * self.embed_dim

    @property
    def audio_tokens(self) -> int:
        return audio_token_count(self.audio_frames, self.mel_bins)

    @property
    def video_tokens(self) -> int:
        return video_token_count(self.video_frames, self.video_height, self.video_width)


@dataclass
class ReprOutput:
    """Per-modality encodings, fused encodings, and pooled vectors."""

    e_audio: Tensor
    e_video: Tensor
    fused: Tensor
    z_audio: Tensor
    z_video: Tensor
    z_fused: Tensor


def _add_linear(store: ParamStore, rng, name: str, d_in: int, d_out: int) -> None:
    store.add(f"{name}.weight", trunc_normal(rng, (d_in, d_out), INIT_STD), kind="weight")
    store.add(f"{name}.bias", np.zeros(d_out), kind="bias")


def _add_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.gamma", np.ones(dim), kind="layer_norm")
    store.add(f"{name}.beta", np.zeros(dim), kind="layer_norm")


def _add_blocks(store: ParamStore, rng, base: str, depth: int, dim: int, mlp_ratio: int) -> None:
    hidden = dim * mlp_ratio
    for i in range(depth):
        prefix = f"{base}.block{i}"
        _add_norm(store, f"{prefix}.norm1", dim)
        _add_linear(store, rng, f"{prefix}.attn.wq", dim, dim)
        _add_linear(store, rng, f"{prefix}.attn.wk", dim, dim)
        _add_linear(store, rng, f"{prefix}.attn.wv", dim, dim)
        _add_linear(store, rng, f"{prefix}.attn.out", dim, dim)
        _add_norm(store, f"{prefix}.norm2", dim)
        _add_linear(store, rng, f"{prefix}.mlp.fc1", dim, hidden)
        _add_linear(store, rng, f"{prefix}.mlp.fc2", hidden, dim)
    _add_norm(store, f"{base}.norm", dim)


def build_params(
    cfg: BackboneConfig,
    seed: int,
    include_decoder: bool = False,
    include_adapters: bool = False,
    head_classes: int = 0,
    dtype=np.float32,
) -> ParamStore:
    """Construct all parameters; the build order is frozen for determinism."""
    rng = seeding.stream(seed, seeding.INIT)
    store = ParamStore(dtype=dtype)
    d = cfg.embed_dim

    _add_linear(store, rng, "tokenizer.audio", AUDIO_PATCH_DIM, d)
    _add_linear(store, rng, "tokenizer.video", VIDEO_PATCH_DIM, d)
    store.add("pos_embed.audio", trunc_normal(rng, (cfg.audio_tokens, d), INIT_STD), kind="embedding")
    store.add("pos_embed.video", trunc_normal(rng, (cfg.video_tokens, d), INIT_STD), kind="embedding")
    store.add("modality_embed.audio", trunc_normal(rng, (d,), INIT_STD), kind="embedding")
    store.add("modality_embed.video", trunc_normal(rng, (d,), INIT_STD), kind="embedding")

    _add_blocks(store, rng, "encoder", cfg.depth_f, d, cfg.mlp_ratio)
    if cfg.depth_g > 0:
        _add_blocks(store, rng, "fusion", cfg.depth_g, d, cfg.mlp_ratio)

    if include_decoder:
        dd = cfg.decoder_dim
        _add_linear(store, rng, "decoder.embed", d, dd)
        store.add("decoder.mask_token", trunc_normal(rng, (dd,), INIT_STD), kind="embedding")
        store.add(
            "decoder.pos_embed.audio", trunc_normal(rng, (cfg.audio_tokens, dd), INIT_STD), kind="embedding"
        )
        store.add(
            "decoder.pos_embed.video", trunc_normal(rng, (cfg.video_tokens, dd), INIT_STD), kind="embedding"
        )
        _add_blocks(store, rng, "decoder", cfg.decoder_depth, dd, cfg.mlp_ratio)
        _add_linear(store, rng, "decoder.head.audio", dd, AUDIO_PATCH_DIM)
        _add_linear(store, rng, "decoder.head.video", dd, VIDEO_PATCH_DIM)

    if include_adapters:
        for modality in ("audio", "video"):
            _add_linear(store, rng, f"adapter.{modality}.fc1", cfg.text_dim, cfg.adapter_width)
            _add_linear(store, rng, f"adapter.{modality}.fc2", cfg.adapter_width, d)
            _add_norm(store, f"adapter.{modality}.norm", d)

    if head_classes > 0:
        _add_linear(store, rng, "head.cls", d, head_classes)

    return store


def attention(x: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention over [B, N, D]."""
    b, n, d = x.shape
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)

    def project(name: str) -> Tensor:
        out = add(matmul(x, store[f"{prefix}.{name}.weight"]), store[f"{prefix}.{name}.bias"])
        return transpose(reshape(out, (b, n, heads, hd)), (0, 2, 1, 3))

    q = project("wq")
    k = project("wk")
    v = project("wv")
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    weights = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return add(matmul(ctx, store[f"{prefix}.out.weight"]), store[f"{prefix}.out.bias"])


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = gelu(add(matmul(x, store[f"{prefix}.fc1.weight"]), store[f"{prefix}.fc1.bias"]))
    return add(matmul(h, store[f"{prefix}.fc2.weight"]), store[f"{prefix}.fc2.bias"])


def block_forward(x: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    h = layer_norm(x, store[f"{prefix}.norm1.gamma"], store[f"{prefix}.norm1.beta"], LN_EPS)
    x = add(x, attention(h, store, f"{prefix}.attn", heads))
    h = layer_norm(x, store[f"{prefix}.norm2.gamma"], store[f"{prefix}.norm2.beta"], LN_EPS)
    return add(x, mlp(h, store, f"{prefix}.mlp"))


def encode(x: Tensor, store: ParamStore, base: str, depth: int, heads: int) -> Tensor:
    """Run a block stack plus its final LayerNorm."""
    if x.ndim != 3:
        raise ShapeError(f"encoder input must be [B, N, D], got shape {x.shape}")
    for i in range(depth):
        x = block_forward(x, store, f"{base}.block{i}", heads)
    return layer_norm(x, store[f"{base}.norm.gamma"], store[f"{base}.norm.beta"], LN_EPS)


def fuse(e_audio: Tensor, e_video: Tensor, store: ParamStore, cfg: BackboneConfig) -> Tensor:
    """Concatenate modality encodings along tokens and run the fusion stack.

    With depth_g == 0 the fusion step is the bare concatenation, which
    keeps cross-modal mixing out of the picture for diagnostics.
    """
    joined = concat([e_audio, e_video], axis=1)
    if cfg.depth_g == 0:
        return joined
    return encode(joined, store, "fusion", cfg.depth_g, cfg.num_heads)


def mean_pool(x: Tensor) -> Tensor:
    return tensor_mean(x, axis=1)


def forward_repr(
    audio_patches: np.ndarray, video_patches: np.ndarray, store: ParamStore, cfg: BackboneConfig
) -> ReprOutput:
    """Full unmasked forward pass from patches to pooled representations."""
    tok_a = tokenize(audio_patches, "audio", store)
    tok_v = tokenize(video_patches, "video", store)
    e_audio = encode(tok_a.tokens, store, "encoder", cfg.depth_f, cfg.num_heads)
    e_video = encode(tok_v.tokens, store, "encoder", cfg.depth_f, cfg.num_heads)
    fused = fuse(e_audio, e_video, store, cfg)
    return ReprOutput(
        e_audio=e_audio,
        e_video=e_video,
        fused=fused,
        z_audio=mean_pool(e_audio),
        z_video=mean_pool(e_video),
        z_fused=mean_pool(fused),
    )


def count_params(store: ParamStore, scope: str = "repr") -> int:
    """Trainable scalar count; 'repr' excludes decoder, adapters, and heads."""
    if scope == "all":
        return store.count()
    if scope == "repr":
        return store.count(lambda n: not n.startswith(REPR_EXCLUDE_PREFIXES))
    return store.count(lambda n: n.startswith(scope))

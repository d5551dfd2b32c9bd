"""Stage 2: text knowledge injection with LayerNorm-only tuning.

Caption embeddings pass through per-modality adapters (dense, GELU,
dense, LayerNorm) into the model space; audio-to-text and video-to-text
InfoNCE terms are combined as alpha * L_AT + beta * L_VT.  Only the
representation network's LayerNorm affines and the adapter parameters
train; everything else stays frozen, which the checkpoint records as a
policy tag.  There is no masking and no reconstruction here, and the
pooled anchors z_A, z_V come from the encoder stack f, not the fusion
stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import REPR_EXCLUDE_PREFIXES, BackboneConfig, encode, mean_pool
from .errors import ConfigError, DataError, ShapeError
from .params import ParamStore
from .stage1 import info_nce
from .tokenizer import tokenize

POLICIES = ("layer_norm_only", "all_frozen")

MODALITY_CODES = {"audio": "A", "video": "V"}


@dataclass(frozen=True)
class Stage2Config:
    alpha: float = 0.6
    beta: float = 0.4
    tau: float = 0.07
    subset_fraction: float = 0.10
    trainable_policy: str = "layer_norm_only"
    symmetric: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(
                f"loss weights must be non-negative with a positive sum, got alpha={self.alpha}, beta={self.beta}"
            )
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.trainable_policy not in POLICIES:
            raise ConfigError(
                f"unknown trainable policy {self.trainable_policy!r}; expected one of {POLICIES}"
            )


@dataclass
class Stage2Losses:
    l_at: float
    l_vt: float
    total: float


def adapt(vectors, store: ParamStore, modality: str) -> Tensor:
    """Map caption embeddings [B, D_text] (or a single [D_text]) into model space."""
    x = vectors if isinstance(vectors, Tensor) else Tensor(np.asarray(vectors, dtype=np.float32))
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ShapeError(f"adapter input must be [B, D_text], got shape {x.shape}")
    w1 = store[f"adapter.{modality}.fc1.weight"]
    if x.shape[1] != w1.shape[0]:
        raise ConfigError(
            f"caption embedding width {x.shape[1]} does not match adapter input {w1.shape[0]}"
        )
    h = ad.gelu(ad.add(ad.matmul(x, w1), store[f"adapter.{modality}.fc1.bias"]))
    y = ad.add(ad.matmul(h, store[f"adapter.{modality}.fc2.weight"]), store[f"adapter.{modality}.fc2.bias"])
    out = ad.layer_norm(y, store[f"adapter.{modality}.norm.gamma"], store[f"adapter.{modality}.norm.beta"])
    return ad.reshape(out, (out.shape[1],)) if single else out


def dual_path_loss(z_a: Tensor, z_v: Tensor, c_a: Tensor, c_v: Tensor, cfg: Stage2Config) -> dict:
    """alpha * InfoNCE(z_A, C_A) + beta * InfoNCE(z_V, C_V), modality anchors."""

    def path(z, c):
        loss = info_nce(z, c, cfg.tau)
        if cfg.symmetric:
            loss = (loss + info_nce(c, z, cfg.tau)) * 0.5
        return loss

    l_at = path(z_a, c_a)
    l_vt = path(z_v, c_v)
    total = l_at * cfg.alpha + l_vt * cfg.beta
    return {"l_at": l_at, "l_vt": l_vt, "total": total}


def trainable_mask(store: ParamStore, policy: str) -> tuple[list[str], list[str]]:
    """Partition parameter names into (trainable, frozen) under a policy."""
    if policy == "all_frozen":
        return [], store.names()
    if policy != "layer_norm_only":
        raise ConfigError(f"unknown trainable policy {policy!r}; expected one of {POLICIES}")
    trainable = []
    frozen = []
    for name, _ in store.items():
        if name.startswith("adapter."):
            trainable.append(name)
        elif store.kind(name) == "layer_norm" and not name.startswith(REPR_EXCLUDE_PREFIXES):
            trainable.append(name)
        else:
            frozen.append(name)
    return trainable, frozen


def gather_caption_vectors(
    sample_ids: list[str], embeddings: dict[str, np.ndarray], modality: str
) -> np.ndarray:
    """Stack caption vectors for a batch; a missing one names its sample."""
    code = MODALITY_CODES[modality]
    rows = []
    for sid in sample_ids:
        key = f"{sid}/{code}"
        if key not in embeddings:
            raise DataError(f"no usable caption embedding for sample {sid!r} modality {code}")
        rows.append(embeddings[key])
    return np.stack(rows).astype(np.float32)


def stage2_forward(
    audio_patches: np.ndarray,
    video_patches: np.ndarray,
    cap_a: np.ndarray,
    cap_v: np.ndarray,
    store: ParamStore,
    bcfg: BackboneConfig,
    cfg: Stage2Config,
) -> dict:
    """Unmasked encoder pass, caption adaptation, and the dual-path loss."""
    tok_a = tokenize(audio_patches, "audio", store)
    tok_v = tokenize(video_patches, "video", store)
    z_a = mean_pool(encode(tok_a.tokens, store, "encoder", bcfg.depth_f, bcfg.num_heads))
    z_v = mean_pool(encode(tok_v.tokens, store, "encoder", bcfg.depth_f, bcfg.num_heads))
    c_a = adapt(cap_a, store, "audio")
    c_v = adapt(cap_v, store, "video")
    return dual_path_loss(z_a, z_v, c_a, c_v, cfg)

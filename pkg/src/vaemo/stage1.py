"""Stage 1: high-ratio masked reconstruction plus audio-visual InfoNCE.

Each modality keeps a small random fraction of its tokens (20% audio,
10% video by default); visible tokens of both modalities run through
the shared encoder and fusion stacks, a shallow decoder fills masked
slots with a learned token and predicts raw patches, and the loss is
masked-position MSE plus a temperature-scaled contrastive term over
mean-pooled visible encodings.  The contrastive features come from the
same masked pass; there is no second unmasked forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig, encode, fuse, mean_pool
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .params import ParamStore
from .tokenizer import AUDIO_PATCH_DIM, VIDEO_PATCH_DIM, tokenize

PATCH_DIMS = {"audio": AUDIO_PATCH_DIM, "video": VIDEO_PATCH_DIM}


@dataclass(frozen=True)
class Stage1Config:
    mask_ratio_audio: float = 0.8
    mask_ratio_video: float = 0.9
    lambda_contrast: float = 0.01
    tau: float = 0.07
    symmetric_contrast: bool = True


@dataclass
class MaskPlan:
    """Disjoint visible/masked index sets per sample, plus the inverse order."""

    visible_idx: np.ndarray  # [B, n_visible]
    masked_idx: np.ndarray  # [B, n_masked]
    ids_restore: np.ndarray  # [B, N]; restores shuffled order to original
    n_tokens: int

    @property
    def n_visible(self) -> int:
        return self.visible_idx.shape[1]

    @property
    def n_masked(self) -> int:
        return self.masked_idx.shape[1]


@dataclass
class Stage1Losses:
    recon_a: float
    recon_v: float
    contrast_av: float
    total: float
    lambda_c: float


def mask_count(n_tokens: int, ratio: float) -> int:
    """Half-up round of ratio * n_tokens."""
    return int(np.floor(ratio * n_tokens + 0.5))


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskPlan:
    """Uniform random masking without replacement, one draw per sample."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_tokens < 2:
        raise ParameterError(f"need at least 2 tokens to mask, got {n_tokens}")
    n_masked = mask_count(n_tokens, ratio)
    if n_masked == 0 or n_masked == n_tokens:
        raise ParameterError(
            f"ratio {ratio} over {n_tokens} tokens leaves no {'masked' if n_masked == 0 else 'visible'} tokens"
        )
    noise = rng.random((batch, n_tokens))
    ids_shuffle = np.argsort(noise, axis=1)
    ids_restore = np.argsort(ids_shuffle, axis=1)
    n_keep = n_tokens - n_masked
    return MaskPlan(
        visible_idx=ids_shuffle[:, :n_keep],
        masked_idx=ids_shuffle[:, n_keep:],
        ids_restore=ids_restore,
        n_tokens=n_tokens,
    )


def reconstruct(
    visible_encodings: Tensor,
    plan: MaskPlan,
    store: ParamStore,
    modality: str,
    depth: int = 2,
    heads: int = 8,
) -> Tensor:
    """Decode masked-position patches from fused visible encodings.

    Mask tokens are inserted at masked slots, the decoder's own position
    table is added, and only masked positions are projected back to the
    raw patch dimension.
    """
    b, n_vis, _ = visible_encodings.shape
    if n_vis != plan.n_visible:
        raise ContractError(
            f"visible encodings carry {n_vis} tokens but the mask plan has {plan.n_visible}"
        )
    x = ad.add(
        ad.matmul(visible_encodings, store["decoder.embed.weight"]), store["decoder.embed.bias"]
    )
    dd = x.shape[-1]
    mask_token = ad.broadcast_to(
        ad.reshape(store["decoder.mask_token"], (1, 1, dd)), (b, plan.n_masked, dd)
    )
    full = ad.concat([x, mask_token], axis=1)
    # Shuffled order is [visible..., masked...]; ids_restore undoes it.
    full = ad.take_per_row(full, plan.ids_restore)
    full = ad.add(full, store[f"decoder.pos_embed.{modality}"])
    decoded = encode(full, store, "decoder", depth, heads)
    masked = ad.take_per_row(decoded, plan.masked_idx)
    return ad.add(
        ad.matmul(masked, store[f"decoder.head.{modality}.weight"]),
        store[f"decoder.head.{modality}.bias"],
    )


def recon_loss(pred: Tensor, target_patches: np.ndarray, plan: MaskPlan) -> Tensor:
    """MSE over masked positions only."""
    if plan.n_masked == 0:
        raise ContractError("mask plan has no masked positions")
    if pred.shape[1] != plan.n_masked:
        raise ShapeError(
            f"predictions cover {pred.shape[1]} positions but the plan masks {plan.n_masked}"
        )
    target = np.take_along_axis(target_patches, plan.masked_idx[..., None], axis=1)
    return ad.mse(pred, Tensor(np.asarray(target, dtype=pred.data.dtype)))


def info_nce(anchors: Tensor, positives: Tensor, tau: float) -> Tensor:
    """One-directional InfoNCE: anchors against all positives in batch.

    mean over i of -log( exp(sim(a_i, p_i)/tau) / sum_j exp(sim(a_i, p_j)/tau) )
    with cosine similarity on L2-normalized rows.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if anchors.ndim != 2 or anchors.shape != positives.shape:
        raise ShapeError(
            f"info_nce expects matching [N, D] inputs, got {anchors.shape} and {positives.shape}"
        )
    n = anchors.shape[0]
    if n < 2:
        raise ParameterError(f"info_nce needs at least 2 rows for negatives, got {n}")
    for name, t in (("anchors", anchors), ("positives", positives)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.any(norms < 1e-8):
            raise NumericError(f"zero-norm row in info_nce {name}")
    a = ad.l2_normalize(anchors)
    p = ad.l2_normalize(positives)
    sims = ad.matmul(a, ad.transpose(p, (1, 0))) / tau
    pulled = ad.pick(sims, np.arange(n))
    return ad.tensor_mean(ad.log_sum_exp(sims, axis=1) - pulled)


def contrastive_loss(z_a: Tensor, z_v: Tensor, tau: float, symmetric: bool) -> Tensor:
    if symmetric:
        return (info_nce(z_a, z_v, tau) + info_nce(z_v, z_a, tau)) * 0.5
    return info_nce(z_a, z_v, tau)


@dataclass
class Stage1Forward:
    losses_t: dict  # name -> Tensor, including "total"
    plan_a: MaskPlan
    plan_v: MaskPlan
    z_audio: Tensor
    z_video: Tensor


def stage1_forward(
    audio_patches: np.ndarray,
    video_patches: np.ndarray,
    store: ParamStore,
    bcfg: BackboneConfig,
    s1: Stage1Config,
    rng: np.random.Generator,
) -> Stage1Forward:
    """Masked forward pass producing all Stage-1 loss terms as tensors."""
    b = audio_patches.shape[0]
    if video_patches.shape[0] != b:
        raise ShapeError(
            f"audio batch {b} does not match video batch {video_patches.shape[0]}"
        )
    use_contrast = s1.lambda_contrast != 0.0
    if b < 2 and use_contrast:
        raise ParameterError("contrastive term requires in-batch negatives; batch size must be >= 2")

    tok_a = tokenize(audio_patches, "audio", store)
    tok_v = tokenize(video_patches, "video", store)
    plan_a = sample_mask(tok_a.count, s1.mask_ratio_audio, rng, batch=b)
    plan_v = sample_mask(tok_v.count, s1.mask_ratio_video, rng, batch=b)

    vis_a = ad.take_per_row(tok_a.tokens, plan_a.visible_idx)
    vis_v = ad.take_per_row(tok_v.tokens, plan_v.visible_idx)
    e_a = encode(vis_a, store, "encoder", bcfg.depth_f, bcfg.num_heads)
    e_v = encode(vis_v, store, "encoder", bcfg.depth_f, bcfg.num_heads)
    fused = fuse(e_a, e_v, store, bcfg)
    g_a = ad.narrow(fused, 1, 0, plan_a.n_visible)
    g_v = ad.narrow(fused, 1, plan_a.n_visible, plan_v.n_visible)

    pred_a = reconstruct(g_a, plan_a, store, "audio", bcfg.decoder_depth, bcfg.decoder_heads)
    pred_v = reconstruct(g_v, plan_v, store, "video", bcfg.decoder_depth, bcfg.decoder_heads)
    recon_a = recon_loss(pred_a, audio_patches, plan_a)
    recon_v = recon_loss(pred_v, video_patches, plan_v)

    z_a = mean_pool(e_a)
    z_v = mean_pool(e_v)
    if use_contrast:
        contrast = contrastive_loss(z_a, z_v, s1.tau, s1.symmetric_contrast)
        total = recon_a + recon_v + contrast * s1.lambda_contrast
    else:
        contrast = Tensor(np.zeros((), dtype=recon_a.data.dtype))
        total = recon_a + recon_v
    return Stage1Forward(
        losses_t={"recon_a": recon_a, "recon_v": recon_v, "contrast_av": contrast, "total": total},
        plan_a=plan_a,
        plan_v=plan_v,
        z_audio=z_a,
        z_video=z_v,
    )


def losses_from_forward(fwd: Stage1Forward, lambda_c: float) -> Stage1Losses:
    vals = {name: float(t.data) for name, t in fwd.losses_t.items()}
    for name, v in vals.items():
        if not np.isfinite(v):
            raise NumericError(f"stage-1 loss term {name} is non-finite")
    return Stage1Losses(
        recon_a=vals["recon_a"],
        recon_v=vals["recon_v"],
        contrast_av=vals["contrast_av"],
        total=vals["total"],
        lambda_c=lambda_c,
    )

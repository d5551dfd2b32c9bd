"""Patch tokenization for log-mel audio and RGB video clips.

Audio spectrograms [T, F] split into 16x16 patches; video clips
[T, H, W, 3] split into 2x16x16 spatio-temporal tubes.  Both are
flattened row-major and linearly projected into the shared embedding
space, then tagged with learned position and modality embeddings.
Token counts follow directly: (T/16)(F/16) for audio and
(T/2)(H/16)(W/16) for video.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul
from .errors import ParameterError, ShapeError
from .params import ParamStore

AUDIO_PATCH_T = 16
AUDIO_PATCH_F = 16
AUDIO_PATCH_DIM = AUDIO_PATCH_T * AUDIO_PATCH_F  # 256

VIDEO_TUBE_T = 2
VIDEO_PATCH_HW = 16
VIDEO_CHANNELS = 3
VIDEO_PATCH_DIM = VIDEO_TUBE_T * VIDEO_PATCH_HW * VIDEO_PATCH_HW * VIDEO_CHANNELS  # 1536

MODALITIES = ("audio", "video")


@dataclass(frozen=True)
class AudioInput:
    """A batch of log-mel spectrograms, shape [B, T, F]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"audio input must be [B, T, F], got shape {self.data.shape}")


@dataclass(frozen=True)
class VideoInput:
    """A batch of RGB clips, shape [B, T, H, W, 3]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"video input must be [B, T, H, W, C], got shape {self.data.shape}")
        if self.data.shape[-1] != VIDEO_CHANNELS:
            raise ParameterError(
                f"video input must have {VIDEO_CHANNELS} channels, got {self.data.shape[-1]}"
            )


@dataclass
class TokenSequence:
    """Projected tokens [B, N, D] for one modality."""

    tokens: Tensor
    modality: str
    count: int


def _require_divisible(value: int, divisor: int, what: str) -> None:
    if value % divisor != 0:
        raise ParameterError(f"{what} {value} is not divisible by {divisor}")


def audio_token_count(t: int, f: int) -> int:
    _require_divisible(t, AUDIO_PATCH_T, "audio frame count")
    _require_divisible(f, AUDIO_PATCH_F, "audio mel-bin count")
    return (t // AUDIO_PATCH_T) * (f // AUDIO_PATCH_F)


def video_token_count(t: int, h: int, w: int) -> int:
    _require_divisible(t, VIDEO_TUBE_T, "video frame count")
    _require_divisible(h, VIDEO_PATCH_HW, "video height")
    _require_divisible(w, VIDEO_PATCH_HW, "video width")
    return (t // VIDEO_TUBE_T) * (h // VIDEO_PATCH_HW) * (w // VIDEO_PATCH_HW)


def patchify_audio(audio: AudioInput) -> np.ndarray:
    """[B, T, F] -> [B, N, 256] with patches rastered time-major."""
    x = audio.data
    b, t, f = x.shape
    n = audio_token_count(t, f)
    nt, nf = t // AUDIO_PATCH_T, f // AUDIO_PATCH_F
    x = x.reshape(b, nt, AUDIO_PATCH_T, nf, AUDIO_PATCH_F)
    x = x.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, n, AUDIO_PATCH_DIM))


def unpatchify_audio(patches: np.ndarray, t: int, f: int) -> np.ndarray:
    """Inverse of patchify_audio for the given spectrogram shape."""
    b, n, d = patches.shape
    if d != AUDIO_PATCH_DIM or n != audio_token_count(t, f):
        raise ShapeError(f"patch array {patches.shape} does not match audio shape ({t}, {f})")
    nt, nf = t // AUDIO_PATCH_T, f // AUDIO_PATCH_F
    x = patches.reshape(b, nt, nf, AUDIO_PATCH_T, AUDIO_PATCH_F)
    x = x.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, t, f))


def patchify_video(video: VideoInput) -> np.ndarray:
    """[B, T, H, W, 3] -> [B, N, 1536], tubes rastered (t, h, w)."""
    x = video.data
    b, t, h, w, c = x.shape
    n = video_token_count(t, h, w)
    nt, nh, nw = t // VIDEO_TUBE_T, h // VIDEO_PATCH_HW, w // VIDEO_PATCH_HW
    x = x.reshape(b, nt, VIDEO_TUBE_T, nh, VIDEO_PATCH_HW, nw, VIDEO_PATCH_HW, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(x.reshape(b, n, VIDEO_PATCH_DIM))


def unpatchify_video(patches: np.ndarray, t: int, h: int, w: int) -> np.ndarray:
    """Inverse of patchify_video for the given clip shape."""
    b, n, d = patches.shape
    if d != VIDEO_PATCH_DIM or n != video_token_count(t, h, w):
        raise ShapeError(
            f"patch array {patches.shape} does not match video shape ({t}, {h}, {w})"
        )
    nt, nh, nw = t // VIDEO_TUBE_T, h // VIDEO_PATCH_HW, w // VIDEO_PATCH_HW
    x = patches.reshape(b, nt, nh, nw, VIDEO_TUBE_T, VIDEO_PATCH_HW, VIDEO_PATCH_HW, VIDEO_CHANNELS)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return np.ascontiguousarray(x.reshape(b, t, h, w, VIDEO_CHANNELS))


def tokenize(patches: np.ndarray, modality: str, store: ParamStore) -> TokenSequence:
    """Project patches and add position + modality embeddings."""
    if modality not in MODALITIES:
        raise ParameterError(f"unknown modality {modality!r}")
    if patches.ndim != 3:
        raise ShapeError(f"patches must be [B, N, P], got shape {patches.shape}")
    weight = store[f"tokenizer.{modality}.weight"]
    bias = store[f"tokenizer.{modality}.bias"]
    pos = store[f"pos_embed.{modality}"]
    mod = store[f"modality_embed.{modality}"]
    if patches.shape[2] != weight.shape[0]:
        raise ShapeError(
            f"{modality} patch dim {patches.shape[2]} does not match projection input {weight.shape[0]}"
        )
    if patches.shape[1] != pos.shape[0]:
        raise ShapeError(
            f"{modality} token count {patches.shape[1]} does not match position table {pos.shape[0]}"
        )
    tokens = add(add(add(matmul(Tensor(patches), weight), bias), pos), mod)
    return TokenSequence(tokens=tokens, modality=modality, count=patches.shape[1])

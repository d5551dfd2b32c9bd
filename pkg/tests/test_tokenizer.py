"""Token arithmetic and patch round-trip checks."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaemo import tokenizer as tk
from vaemo.backbone import BackboneConfig, build_params
from vaemo.errors import ParameterError, ShapeError


def test_audio_token_count_formula():
    assert tk.audio_token_count(64, 32) == 8
    assert tk.audio_token_count(256, 128) == 128


def test_video_token_count_formula():
    assert tk.video_token_count(16, 32, 32) == 32
    assert tk.video_token_count(16, 160, 160) == 800


@pytest.mark.parametrize(
    "t, f, fragment",
    [(60, 32, "frame count 60"), (64, 30, "mel-bin count 30")],
)
def test_audio_divisibility_error_names_dimension(t, f, fragment):
    with pytest.raises(ParameterError) as exc:
        tk.audio_token_count(t, f)
    assert fragment in str(exc.value)


@pytest.mark.parametrize(
    "t, h, w, fragment",
    [(15, 32, 32, "frame count 15"), (16, 30, 32, "height 30"), (16, 32, 40, "width 40")],
)
def test_video_divisibility_error_names_dimension(t, h, w, fragment):
    with pytest.raises(ParameterError) as exc:
        tk.video_token_count(t, h, w)
    assert fragment in str(exc.value)


def test_audio_patch_raster_order():
    t, f = 32, 32
    x = (np.arange(t)[:, None] * 1000.0 + np.arange(f)[None, :]).astype(np.float32)
    patches = tk.patchify_audio(tk.AudioInput(x[None]))
    assert patches.shape == (1, 4, 256)
    # patch 0 covers rows 0..15, cols 0..15, flattened time-major
    assert patches[0, 0, 0] == 0.0
    assert patches[0, 0, 1] == 1.0
    assert patches[0, 0, 16] == 1000.0
    # patch 1 is the next frequency block at the same times
    assert patches[0, 1, 0] == 16.0
    # patch 2 starts the second time block
    assert patches[0, 2, 0] == 16000.0


def test_video_tube_raster_order():
    t, h, w = 4, 32, 16
    x = np.zeros((t, h, w, 3), dtype=np.float32)
    x[2, 0, 0, 0] = 7.0  # second time block, first spatial tube, channel 0
    patches = tk.patchify_video(tk.VideoInput(x[None]))
    assert patches.shape == (1, 2 * 2 * 1, 1536)
    assert patches[0, 2, 0] == 7.0
    assert patches[0, 0, 0] == 0.0


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_audio_patchify_roundtrip(nt, nf, seed):
    t, f = 16 * nt, 16 * nf
    x = np.random.default_rng(seed).normal(size=(2, t, f)).astype(np.float32)
    patches = tk.patchify_audio(tk.AudioInput(x))
    assert patches.shape == (2, nt * nf, 256)
    back = tk.unpatchify_audio(patches, t, f)
    assert np.array_equal(back, x)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=2),
    st.integers(min_value=1, max_value=2),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_video_patchify_roundtrip(nt, nh, nw, seed):
    t, h, w = 2 * nt, 16 * nh, 16 * nw
    x = np.random.default_rng(seed).normal(size=(2, t, h, w, 3)).astype(np.float32)
    patches = tk.patchify_video(tk.VideoInput(x))
    assert patches.shape == (2, nt * nh * nw, 1536)
    back = tk.unpatchify_video(patches, t, h, w)
    assert np.array_equal(back, x)


def test_video_channel_validation():
    with pytest.raises(ParameterError):
        tk.VideoInput(np.zeros((1, 2, 16, 16, 4), dtype=np.float32))


def test_tokenize_shapes_and_pos_table_check():
    cfg = BackboneConfig()
    store = build_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    audio = rng.normal(size=(3, cfg.audio_frames, cfg.mel_bins)).astype(np.float32)
    patches = tk.patchify_audio(tk.AudioInput(audio))
    seq = tk.tokenize(patches, "audio", store)
    assert seq.tokens.shape == (3, cfg.audio_tokens, cfg.embed_dim)
    assert seq.count == cfg.audio_tokens

    with pytest.raises(ShapeError):
        tk.tokenize(patches[:, :4, :], "audio", store)
    with pytest.raises(ParameterError):
        tk.tokenize(patches, "text", store)


def test_tokenize_applies_position_and_modality_embeddings():
    cfg = BackboneConfig()
    store = build_params(cfg, seed=0)
    zeros = np.zeros((1, cfg.audio_tokens, 256), dtype=np.float32)
    seq = tk.tokenize(zeros, "audio", store)
    expected = store["pos_embed.audio"].data + store["modality_embed.audio"].data
    np.testing.assert_array_equal(seq.tokens.data[0], expected)

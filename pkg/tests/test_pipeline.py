"""Training-loop behavior: descent, determinism, resume, and the freeze policy."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from vaemo.backbone import build_params
from vaemo.checkpoint import load_checkpoint
from vaemo.config import preset_config
from vaemo.data import load_corpus, synth_corpus
from vaemo.errors import ConfigError, DataError
from vaemo.pipeline import (
    STAGE1_FINAL,
    STAGE1_LOG,
    STAGE2_LOG,
    evaluate_folds,
    export_embeddings,
    finetune_run,
    train_stage1,
    train_stage2,
)
from vaemo.stage2 import trainable_mask


def tiny_cfg(**kw):
    base = dict(
        n_samples=24,
        n_classes=4,
        n_folds=3,
        embed_dim=32,
        depth_f=1,
        depth_g=1,
        decoder_dim=32,
        decoder_depth=1,
        mel_bins=16,
        video_frames=4,
        text_dim=64,
        batch_size=8,
        stage1_epochs=2,
        stage2_epochs=2,
        finetune_epochs=1,
        subset_fraction=1.0,
    )
    base.update(kw)
    return dataclasses.replace(preset_config("desk"), **base)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe_corpus")
    synth_corpus(root, tiny_cfg().corpus(), master_seed=0)
    return load_corpus(root)


@pytest.fixture(scope="module")
def stage1_run(corpus, tmp_path_factory):
    run = tmp_path_factory.mktemp("pipe_s1")
    cfg = tiny_cfg(stage1_epochs=4)
    final = train_stage1(corpus, cfg, run)
    return cfg, run, final


def _log_rows(path):
    lines = path.read_text().strip().splitlines()
    return lines[0], lines[1:]


# ------------------------------------------------------------ stage 1


def test_stage1_loss_decreases(stage1_run):
    _, run, _ = stage1_run
    header, rows = _log_rows(run / STAGE1_LOG)
    assert header.startswith("step,recon_audio")
    totals = [float(r.split(",")[5]) for r in rows]
    spe = len(totals) // 4
    assert np.mean(totals[-spe:]) < np.mean(totals[:spe])


def test_single_batch_overfits(tmp_path):
    cfg = tiny_cfg(
        n_samples=8,
        n_folds=2,
        lambda_contrast=0.0,
        stage1_epochs=30,
        stage1_lr=3e-3,
    )
    root = tmp_path / "data"
    synth_corpus(root, cfg.corpus(), master_seed=3)
    corpus = load_corpus(root)
    train_stage1(corpus, cfg, tmp_path / "run")
    _, rows = _log_rows(tmp_path / "run" / STAGE1_LOG)
    first = float(rows[0].split(",")[5])
    last = float(rows[-1].split(",")[5])
    assert last < 0.5 * first


def test_stage1_final_drops_decoder_and_moments(stage1_run):
    _, _, final = stage1_run
    arrays, meta, opt = load_checkpoint(final)
    assert opt is None
    assert not any(name.startswith("decoder.") for name in arrays)
    assert meta["stage"] == 1
    assert meta["trainable_policy"] == "all"


def test_stage1_epoch_checkpoint_resumes(stage1_run):
    _, run, _ = stage1_run
    arrays, meta, opt = load_checkpoint(run / "stage1_epoch0001.ckpt")
    assert opt is not None and opt.step > 0
    assert meta["epoch"] == 1
    assert any(name.startswith("decoder.") for name in arrays)


def test_identical_runs_are_bit_identical(corpus, stage1_run, tmp_path):
    cfg, run, final = stage1_run
    rerun = tmp_path / "rerun"
    refinal = train_stage1(corpus, cfg, rerun)
    assert refinal.read_bytes() == final.read_bytes()
    assert (rerun / STAGE1_LOG).read_text() == (run / STAGE1_LOG).read_text()


def test_resume_reproduces_unbroken_run(corpus, stage1_run, tmp_path):
    cfg, run, final = stage1_run
    resumed = tmp_path / "resumed"
    refinal = train_stage1(corpus, cfg, resumed, resume_from=run / "stage1_epoch0001.ckpt")
    assert refinal.read_bytes() == final.read_bytes()
    assert (resumed / "stage1_epoch0003.ckpt").read_bytes() == (
        run / "stage1_epoch0003.ckpt"
    ).read_bytes()
    # the resumed log holds exactly the epochs after the breakpoint
    _, full_rows = _log_rows(run / STAGE1_LOG)
    resumed_rows = (resumed / STAGE1_LOG).read_text().strip().splitlines()
    assert resumed_rows == full_rows[len(full_rows) // 2 :]


def test_resume_requires_optimizer_state(corpus, stage1_run, tmp_path):
    cfg, _, final = stage1_run
    with pytest.raises(DataError, match="optimizer state"):
        train_stage1(corpus, cfg, tmp_path / "r", resume_from=final)


def test_resume_rejects_config_mismatch(corpus, stage1_run, tmp_path):
    cfg, run, _ = stage1_run
    other = dataclasses.replace(cfg, embed_dim=64)
    with pytest.raises(ConfigError, match="hash"):
        train_stage1(corpus, other, tmp_path / "r", resume_from=run / "stage1_epoch0001.ckpt")


def test_joint_caption_arm_trains_adapters(corpus, tmp_path):
    cfg = tiny_cfg(stage1_epochs=1, joint_caption_weight=0.5)
    final = train_stage1(corpus, cfg, tmp_path / "run")
    _, rows = _log_rows(tmp_path / "run" / STAGE1_LOG)
    joints = [float(r.split(",")[4]) for r in rows]
    assert all(j > 0.0 for j in joints)
    arrays, _, _ = load_checkpoint(final)
    assert any(name.startswith("adapter.") for name in arrays)


# ------------------------------------------------------------ stage 2


@pytest.fixture(scope="module")
def stage2_run(corpus, stage1_run, tmp_path_factory):
    cfg, _, s1_final = stage1_run
    run = tmp_path_factory.mktemp("pipe_s2")
    cfg2 = dataclasses.replace(cfg, stage2_epochs=4, stage2_lr=1e-3, batch_size=16)
    final = train_stage2(corpus, cfg2, run, s1_final)
    return cfg2, run, final


def test_stage2_loss_decreases(stage2_run):
    _, run, _ = stage2_run
    header, rows = _log_rows(run / STAGE2_LOG)
    assert header == "step,loss_audio_text,loss_video_text,total,lr"
    totals = [float(r.split(",")[3]) for r in rows]
    assert totals[-1] < totals[0]


def test_stage2_freeze_policy_is_bit_exact(stage1_run, stage2_run):
    cfg, _, s1_final = stage1_run
    cfg2, _, s2_final = stage2_run
    before, _, _ = load_checkpoint(s1_final)
    after, meta, _ = load_checkpoint(s2_final)
    assert meta["trainable_policy"] == "layer_norm_only"

    store = build_params(cfg2.backbone(), cfg2.seed, include_adapters=True)
    trainable, frozen = trainable_mask(store, "layer_norm_only")
    changed = 0
    for name, array in before.items():
        if name in frozen:
            assert np.array_equal(after[name], array), name
        else:
            changed += int(not np.array_equal(after[name], array))
    assert changed > 0
    assert any(name.startswith("adapter.") for name in after)


def test_stage2_two_runs_identical(corpus, stage1_run, stage2_run, tmp_path):
    _, _, s1_final = stage1_run
    cfg2, run, final = stage2_run
    rerun = tmp_path / "rerun"
    refinal = train_stage2(corpus, cfg2, rerun, s1_final)
    assert refinal.read_bytes() == final.read_bytes()
    assert (rerun / STAGE2_LOG).read_text() == (run / STAGE2_LOG).read_text()


def test_stage2_subset_size_recorded(stage2_run):
    cfg2, _, final = stage2_run
    _, meta, _ = load_checkpoint(final)
    assert meta["subset_size"] == 24  # subset_fraction 1.0 over a fully captioned corpus


def test_stage2_subset_fraction_shrinks_pool(corpus, stage1_run, tmp_path):
    cfg, _, s1_final = stage1_run
    cfg2 = dataclasses.replace(cfg, subset_fraction=0.25, stage2_epochs=1, batch_size=2)
    final = train_stage2(corpus, cfg2, tmp_path / "run", s1_final)
    _, meta, _ = load_checkpoint(final)
    assert meta["subset_size"] == 6


def test_stage2_rejects_config_mismatch(corpus, stage1_run, tmp_path):
    cfg, _, s1_final = stage1_run
    other = dataclasses.replace(cfg, depth_f=2)
    with pytest.raises(ConfigError, match="hash"):
        train_stage2(corpus, other, tmp_path / "run", s1_final)


# ------------------------------------------------------------ fine-tuning and evaluation


def test_finetune_returns_test_fold_predictions(corpus, stage1_run):
    cfg, _, s1_final = stage1_run
    result = finetune_run(corpus, cfg, s1_final, test_fold=0)
    folds = corpus.folds()
    assert result.fold == 0
    assert len(result.sample_ids) == int((folds == 0).sum())
    assert result.labels.shape == result.preds.shape
    assert set(np.unique(result.preds)).issubset(set(range(4)))


def test_finetune_rejects_missing_fold(corpus, stage1_run):
    cfg, _, s1_final = stage1_run
    with pytest.raises(DataError, match="empty"):
        finetune_run(corpus, cfg, s1_final, test_fold=99)


def test_evaluate_writes_report_and_predictions(corpus, stage1_run, tmp_path):
    cfg, _, s1_final = stage1_run
    report = evaluate_folds(corpus, cfg, s1_final, tmp_path, folds=[0, 1])
    assert report.task == "categorical"
    assert 0.0 <= report.uar <= 1.0
    assert len(report.per_fold) == 2
    lines = (tmp_path / "predictions.csv").read_text().strip().splitlines()
    folds = corpus.folds()
    assert len(lines) == 1 + int(((folds == 0) | (folds == 1)).sum())


def test_export_embeddings_contents(corpus, stage1_run, tmp_path):
    from vaemo.arrayio import read_arrays

    cfg, _, s1_final = stage1_run
    out = export_embeddings(corpus, cfg, s1_final, tmp_path / "emb.vaem")
    arrays = read_arrays(out)
    assert arrays["z_fused"].shape == (24, 32)
    assert arrays["z_audio"].shape == (24, 32)
    assert arrays["z_video"].shape == (24, 32)
    assert np.array_equal(arrays["fold"], corpus.folds().astype(np.float32))
    assert np.array_equal(arrays["label"], corpus.class_labels().astype(np.float32))


def test_export_is_deterministic(corpus, stage1_run, tmp_path):
    cfg, _, s1_final = stage1_run
    a = export_embeddings(corpus, cfg, s1_final, tmp_path / "a.vaem")
    b = export_embeddings(corpus, cfg, s1_final, tmp_path / "b.vaem")
    assert a.read_bytes() == b.read_bytes()

"""Training loops for both stages, fine-tuning, evaluation, and export.

Every loop is a pure function of (corpus bytes, config, seed): batch
order comes from the batching stream, mask draws from a per-(epoch,
step) stream, and optimizer state is carried in checkpoints, so an
interrupted run resumed from its last epoch checkpoint reproduces the
unbroken run bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import seeding
from .arrayio import write_arrays
from .autodiff import no_grad, take
from .backbone import BackboneConfig, build_params, forward_repr
from .captions import usable_embeddings
from .checkpoint import config_hash, load_checkpoint, require_config_match, save_checkpoint
from .config import TrainConfig
from .data import Corpus, batch_iter
from .errors import DataError
from .evaluate import (
    EvalReport,
    FoldResult,
    aggregate_folds,
    head_logits,
    predict_classes,
    task_loss,
)
from .optim import AdamWState, adamw_step, cosine_lr, decay_exempt
from .params import ParamStore
from .stage1 import losses_from_forward, stage1_forward
from .stage2 import (
    adapt,
    dual_path_loss,
    gather_caption_vectors,
    stage2_forward,
    trainable_mask,
)
from .tokenizer import AudioInput, VideoInput, patchify_audio, patchify_video

STAGE1_LOG = "stage1_log.csv"
STAGE2_LOG = "stage2_log.csv"
FINETUNE_LOG = "finetune_log.csv"
STAGE1_FINAL = "stage1_final.ckpt"
STAGE2_FINAL = "stage2_final.ckpt"
REPORT_FILE = "eval_report.json"
PREDICTIONS_FILE = "predictions.csv"


def corpus_patches(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Patchify the whole corpus once; slicing then replaces re-rastering."""
    audio = patchify_audio(AudioInput(corpus.audio))
    video = patchify_video(VideoInput(corpus.video))
    return audio, video


def _epoch_batches(pool, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    # full batches keep the in-batch negative count constant; a corpus
    # smaller than one batch falls back to a single short batch
    batches = batch_iter(pool, cfg.batch_size, cfg.seed, epoch=epoch, drop_last=True)
    if not batches:
        batches = batch_iter(pool, cfg.batch_size, cfg.seed, epoch=epoch)
    return batches


def _grads_for(params: dict, store: ParamStore) -> dict[str, np.ndarray]:
    # parameters a step never touched (optimizer-owned but absent from
    # this graph) contribute a zero gradient rather than an error
    return {
        name: t.grad if t.grad is not None else np.zeros_like(t.data)
        for name, t in params.items()
    }


def _append_log(path: Path, header: str, rows: list[str], fresh: bool) -> None:
    with open(path, "a" if not fresh else "w", encoding="utf-8") as fh:
        if fresh:
            fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _caption_map(corpus: Corpus) -> dict[str, np.ndarray]:
    return usable_embeddings(corpus.root / "captions.jsonl")


def train_stage1(
    corpus: Corpus,
    cfg: TrainConfig,
    run_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Path:
    """Masked-reconstruction pre-training; returns the final checkpoint path.

    Epoch checkpoints keep the decoder and optimizer moments for resuming;
    the final checkpoint drops both, leaving only what later stages load.
    With joint_caption_weight > 0 the dual-path caption loss joins the
    Stage-1 objective and the adapters train alongside everything else.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bcfg = cfg.backbone()
    s1 = cfg.stage1()
    joint = cfg.joint_caption_weight > 0.0
    store = build_params(bcfg, cfg.seed, include_decoder=True, include_adapters=joint)

    embeddings: dict[str, np.ndarray] = {}
    if joint:
        embeddings = _caption_map(corpus)
        covered = sum(
            1
            for sid in corpus.sample_ids
            if f"{sid}/A" in embeddings and f"{sid}/V" in embeddings
        )
        if covered < 2:
            raise DataError(
                f"joint training needs at least 2 captioned samples, found {covered}"
            )

    state = AdamWState()
    start_epoch = 0
    if resume_from is not None:
        arrays, meta, opt = load_checkpoint(resume_from)
        require_config_match(meta, bcfg, resume_from)
        if opt is None:
            raise DataError(f"{resume_from}: checkpoint has no optimizer state to resume from")
        store.load_arrays(arrays)
        state = opt
        start_epoch = int(meta["epoch"]) + 1

    audio_patches, video_patches = corpus_patches(corpus)
    steps_per_epoch = len(_epoch_batches(corpus.n, cfg, 0))
    total_steps = cfg.stage1_epochs * steps_per_epoch
    no_decay = decay_exempt(store)
    params = dict(store.items())
    meta_base = {
        "stage": 1,
        "seed": cfg.seed,
        "config_hash": config_hash(bcfg),
        "trainable_policy": "all",
    }

    log_path = run_dir / STAGE1_LOG
    header = "step,recon_audio,recon_video,contrast,joint,total,lr"
    for epoch in range(start_epoch, cfg.stage1_epochs):
        rows = []
        for step, batch in enumerate(_epoch_batches(corpus.n, cfg, epoch)):
            rng = seeding.stream(cfg.seed, seeding.MASK, epoch, step)
            fwd = stage1_forward(
                audio_patches[batch], video_patches[batch], store, bcfg, s1, rng
            )
            total = fwd.losses_t["total"]
            joint_val = 0.0
            if joint:
                sids = [corpus.sample_ids[i] for i in batch]
                cap_rows = [
                    r
                    for r, sid in enumerate(sids)
                    if f"{sid}/A" in embeddings and f"{sid}/V" in embeddings
                ]
                # the caption term covers only captioned batch members; a
                # contrastive loss needs at least one in-batch negative
                if len(cap_rows) >= 2:
                    kept = [sids[r] for r in cap_rows]
                    c_a = adapt(gather_caption_vectors(kept, embeddings, "audio"), store, "audio")
                    c_v = adapt(gather_caption_vectors(kept, embeddings, "video"), store, "video")
                    dp = dual_path_loss(
                        take(fwd.z_audio, cap_rows, axis=0),
                        take(fwd.z_video, cap_rows, axis=0),
                        c_a,
                        c_v,
                        cfg.stage2(),
                    )
                    total = total + dp["total"] * cfg.joint_caption_weight
                    joint_val = float(dp["total"].data)
            store.zero_grad()
            total.backward()
            losses = losses_from_forward(fwd, s1.lambda_contrast)

            global_step = state.step
            lr = cosine_lr(global_step, total_steps, cfg.stage1_lr, cfg.warmup_fraction)
            adamw_step(
                params,
                _grads_for(params, store),
                state,
                lr,
                beta1=cfg.pretrain_beta1,
                beta2=cfg.pretrain_beta2,
                eps=cfg.adam_eps,
                weight_decay=cfg.stage1_weight_decay,
                no_decay=no_decay,
            )
            rows.append(
                f"{global_step},{losses.recon_a!r},{losses.recon_v!r},"
                f"{losses.contrast_av!r},{joint_val!r},{float(total.data)!r},{lr!r}"
            )
        _append_log(log_path, header, rows, fresh=(epoch == start_epoch == 0))
        save_checkpoint(
            run_dir / f"stage1_epoch{epoch:04d}.ckpt",
            store.arrays(),
            {**meta_base, "epoch": epoch},
            opt_state=state,
        )

    final = run_dir / STAGE1_FINAL
    kept = {k: v for k, v in store.arrays().items() if not k.startswith("decoder.")}
    save_checkpoint(final, kept, {**meta_base, "epoch": cfg.stage1_epochs - 1})
    return final


def _load_repr_arrays(store: ParamStore, ckpt_path: str | Path, bcfg: BackboneConfig) -> dict:
    arrays, meta, _ = load_checkpoint(ckpt_path)
    require_config_match(meta, bcfg, ckpt_path)
    filtered = {k: v for k, v in arrays.items() if not k.startswith("decoder.")}
    store.load_arrays(
        filtered,
        ignore_prefixes=("adapter.", "head."),
        allow_missing_prefixes=("adapter.", "head."),
    )
    return meta


def train_stage2(
    corpus: Corpus,
    cfg: TrainConfig,
    run_dir: str | Path,
    stage1_ckpt: str | Path,
) -> Path:
    """Inject caption knowledge on a random subset under the freeze policy."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bcfg = cfg.backbone()
    s2 = cfg.stage2()
    store = build_params(bcfg, cfg.seed, include_adapters=True)
    _load_repr_arrays(store, stage1_ckpt, bcfg)

    embeddings = _caption_map(corpus)
    usable_idx = np.array(
        [
            i
            for i, sid in enumerate(corpus.sample_ids)
            if f"{sid}/A" in embeddings and f"{sid}/V" in embeddings
        ],
        dtype=np.int64,
    )
    if usable_idx.size < 2:
        raise DataError(
            f"caption injection needs at least 2 captioned samples, found {usable_idx.size}"
        )
    n_subset = max(2, int(round(s2.subset_fraction * usable_idx.size)))
    order = seeding.stream(cfg.seed, seeding.SUBSET).permutation(usable_idx.size)
    subset = np.sort(usable_idx[order[:n_subset]])

    trainable, _ = trainable_mask(store, s2.trainable_policy)
    params = {name: store[name] for name in trainable}
    no_decay = decay_exempt(store).intersection(trainable)
    audio_patches, video_patches = corpus_patches(corpus)
    steps_per_epoch = len(_epoch_batches(subset, cfg, 0))
    total_steps = max(cfg.stage2_epochs * steps_per_epoch, 1)

    state = AdamWState()
    log_rows = []
    for epoch in range(cfg.stage2_epochs):
        for batch in _epoch_batches(subset, cfg, epoch):
            sids = [corpus.sample_ids[i] for i in batch]
            cap_a = gather_caption_vectors(sids, embeddings, "audio")
            cap_v = gather_caption_vectors(sids, embeddings, "video")
            store.zero_grad()
            out = stage2_forward(
                audio_patches[batch], video_patches[batch], cap_a, cap_v, store, bcfg, s2
            )
            out["total"].backward()
            global_step = state.step
            lr = cosine_lr(global_step, total_steps, cfg.stage2_lr, cfg.warmup_fraction)
            adamw_step(
                params,
                _grads_for(params, store),
                state,
                lr,
                beta1=cfg.pretrain_beta1,
                beta2=cfg.pretrain_beta2,
                eps=cfg.adam_eps,
                weight_decay=cfg.stage2_weight_decay,
                no_decay=no_decay,
            )
            log_rows.append(
                f"{global_step},{float(out['l_at'].data)!r},{float(out['l_vt'].data)!r},"
                f"{float(out['total'].data)!r},{lr!r}"
            )
    _append_log(run_dir / STAGE2_LOG, "step,loss_audio_text,loss_video_text,total,lr", log_rows, fresh=True)

    final = run_dir / STAGE2_FINAL
    save_checkpoint(
        final,
        store.arrays(),
        {
            "stage": 2,
            "epoch": cfg.stage2_epochs - 1,
            "seed": cfg.seed,
            "config_hash": config_hash(bcfg),
            "trainable_policy": s2.trainable_policy,
            "subset_size": int(subset.size),
        },
    )
    return final


def finetune_run(
    corpus: Corpus,
    cfg: TrainConfig,
    init_ckpt: str | Path,
    test_fold: int,
    run_dir: str | Path | None = None,
) -> FoldResult:
    """Supervised fine-tuning with one fold held out; returns its predictions."""
    bcfg = cfg.backbone()
    head_dim = cfg.n_classes if cfg.task == "categorical" else 3
    store = build_params(bcfg, cfg.seed, head_classes=head_dim)
    _load_repr_arrays(store, init_ckpt, bcfg)

    folds = corpus.folds()
    if cfg.task == "categorical":
        targets = corpus.class_labels()
    else:
        targets = corpus.vad_targets()
    train_idx = np.flatnonzero(folds != test_fold)
    test_idx = np.flatnonzero(folds == test_fold)
    if train_idx.size == 0 or test_idx.size == 0:
        raise DataError(f"fold {test_fold} leaves an empty train or test split")

    audio_patches, video_patches = corpus_patches(corpus)
    params = dict(store.items())
    no_decay = decay_exempt(store)
    steps_per_epoch = len(batch_iter(train_idx, cfg.batch_size, cfg.seed, epoch=0))
    total_steps = cfg.finetune_epochs * steps_per_epoch
    state = AdamWState()
    log_rows = []
    for epoch in range(cfg.finetune_epochs):
        for batch in batch_iter(train_idx, cfg.batch_size, cfg.seed, epoch=epoch):
            rep = forward_repr(audio_patches[batch], video_patches[batch], store, bcfg)
            outputs = head_logits(rep.z_fused, store)
            loss = task_loss(outputs, targets[batch], cfg.task)
            store.zero_grad()
            loss.backward()
            global_step = state.step
            lr = cosine_lr(global_step, total_steps, cfg.finetune_lr, cfg.warmup_fraction)
            adamw_step(
                params,
                _grads_for(params, store),
                state,
                lr,
                beta1=cfg.finetune_beta1,
                beta2=cfg.finetune_beta2,
                eps=cfg.adam_eps,
                weight_decay=cfg.finetune_weight_decay,
                no_decay=no_decay,
            )
            log_rows.append(f"{test_fold},{global_step},{float(loss.data)!r},{lr!r}")
    if run_dir is not None:
        log_path = Path(run_dir) / FINETUNE_LOG
        _append_log(log_path, "fold,step,loss,lr", log_rows, fresh=not log_path.exists())

    outputs = []
    with no_grad():
        for start in range(0, test_idx.size, cfg.batch_size):
            batch = test_idx[start : start + cfg.batch_size]
            rep = forward_repr(audio_patches[batch], video_patches[batch], store, bcfg)
            outputs.append(head_logits(rep.z_fused, store).numpy())
    raw = np.concatenate(outputs, axis=0)
    preds = predict_classes(raw) if cfg.task == "categorical" else raw
    return FoldResult(
        fold=test_fold,
        sample_ids=[corpus.sample_ids[i] for i in test_idx],
        labels=targets[test_idx],
        preds=preds,
        task=cfg.task,
    )


def evaluate_folds(
    corpus: Corpus,
    cfg: TrainConfig,
    init_ckpt: str | Path,
    run_dir: str | Path,
    folds: list[int] | None = None,
) -> EvalReport:
    """Fine-tune once per fold, pool all predictions, compute metrics once."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if folds is None:
        folds = sorted(int(f) for f in np.unique(corpus.folds()))
    results = [finetune_run(corpus, cfg, init_ckpt, fold, run_dir=run_dir) for fold in folds]
    report = aggregate_folds(results)

    (run_dir / REPORT_FILE).write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    lines = ["sample_id,fold,label,prediction"]
    for fr in results:
        for sid, label, pred in zip(fr.sample_ids, fr.labels, fr.preds):
            if cfg.task == "categorical":
                lines.append(f"{sid},{fr.fold},{int(label)},{int(pred)}")
            else:
                lines.append(
                    f"{sid},{fr.fold},"
                    + ";".join(repr(float(x)) for x in np.atleast_1d(label))
                    + ","
                    + ";".join(repr(float(x)) for x in np.atleast_1d(pred))
                )
    (run_dir / PREDICTIONS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report


def export_embeddings(
    corpus: Corpus, cfg: TrainConfig, init_ckpt: str | Path, out_path: str | Path
) -> Path:
    """Write pooled representations for every sample to an array container."""
    bcfg = cfg.backbone()
    store = build_params(bcfg, cfg.seed)
    _load_repr_arrays(store, init_ckpt, bcfg)
    audio_patches, video_patches = corpus_patches(corpus)
    z_fused, z_audio, z_video = [], [], []
    with no_grad():
        for start in range(0, corpus.n, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            rep = forward_repr(audio_patches[sl], video_patches[sl], store, bcfg)
            z_fused.append(rep.z_fused.numpy())
            z_audio.append(rep.z_audio.numpy())
            z_video.append(rep.z_video.numpy())
    arrays = {
        "z_fused": np.concatenate(z_fused, axis=0),
        "z_audio": np.concatenate(z_audio, axis=0),
        "z_video": np.concatenate(z_video, axis=0),
        "fold": corpus.folds().astype(np.float32),
    }
    try:
        arrays["label"] = corpus.class_labels().astype(np.float32)
    except DataError:
        pass
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_arrays(out_path, arrays)
    return out_path

"""Synthetic paired corpus with controllable latent emotion factors.

Every sample draws a class index (balanced round-robin) and a
valence/arousal/dominance triple, then renders both modalities as
deterministic functions of that latent: audio gets a class-specific
mel-band energy signature with arousal-scaled amplitude, video gets a
class-specific moving blob trajectory with valence-scaled intensity.
The class is recoverable from either modality alone, which is what the
linear-probe oracle checks.

Corpus layout on disk: manifest.jsonl, arrays/<sample_id>.vaem (entries
"audio" and "video"), captions.jsonl, caption_embeddings.vaem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .arrayio import read_arrays, write_arrays
from .captions import CLASS_NAMES, StubClient, caption_corpus, coverage_subset
from .errors import ConfigError, DataError, ParameterError, ParseError
from .tokenizer import audio_token_count, video_token_count


@dataclass(frozen=True)
class CorpusConfig:
    n_samples: int = 400
    n_classes: int = 4
    n_folds: int = 5
    audio_frames: int = 64
    mel_bins: int = 32
    video_frames: int = 16
    video_height: int = 32
    video_width: int = 32
    caption_passes: int = 3
    caption_confusion: float = 0.0  # per-pass chance a caption names the pair partner
    caption_coverage: float = 1.0  # fraction of samples that get captions at all
    text_dim: int = 256
    noise_scale: float = 1.0  # multiplies both additive noise floors
    class_overlap: float = 0.0  # 1.0 collapses class pairs onto shared signatures

    def __post_init__(self):
        if self.noise_scale <= 0.0:
            raise ConfigError(f"noise_scale must be positive, got {self.noise_scale}")
        if not 0.0 <= self.class_overlap <= 1.0:
            raise ConfigError(f"class_overlap must lie in [0, 1], got {self.class_overlap}")
        if not 0.0 <= self.caption_confusion <= 1.0:
            raise ConfigError(
                f"caption_confusion must lie in [0, 1], got {self.caption_confusion}"
            )
        if not 0.0 < self.caption_coverage <= 1.0:
            raise ConfigError(
                f"caption_coverage must lie in (0, 1], got {self.caption_coverage}"
            )
        if self.n_classes < 2 or self.n_classes > len(CLASS_NAMES):
            raise ConfigError(
                f"n_classes must lie in [2, {len(CLASS_NAMES)}], got {self.n_classes}"
            )
        if self.n_samples < self.n_classes:
            raise ConfigError(
                f"need at least one sample per class: n={self.n_samples}, K={self.n_classes}"
            )
        if self.n_folds < 1 or self.n_folds > self.n_samples:
            raise ConfigError(f"fold count {self.n_folds} invalid for {self.n_samples} samples")
        audio_token_count(self.audio_frames, self.mel_bins)
        video_token_count(self.video_frames, self.video_height, self.video_width)


@dataclass
class SyntheticSample:
    sample_id: str
    class_index: int
    valence: float
    arousal: float
    dominance: float
    audio: np.ndarray  # [T, F]
    video: np.ndarray  # [T, H, W, 3]


def generate_sample(index: int, cfg: CorpusConfig, master_seed: int) -> SyntheticSample:
    """Render one sample; a pure function of (master_seed, index)."""
    rng = seeding.stream(master_seed, seeding.CORPUS, index)
    k = cfg.n_classes
    c = index % k
    valence, arousal, dominance = rng.uniform(-1.0, 1.0, size=3)

    # class_overlap slides each class's primary signature (band center,
    # trajectory angle, tint) toward its pair's midpoint; at 1.0 the pair
    # shares one signature and only the temporal wobble rate tells its
    # members apart.  At 0.0 every expression below reduces bit-exactly
    # to the per-class value.
    pair_base = (c // 2) * 2
    if pair_base + 1 < k:
        c_eff = (1.0 - cfg.class_overlap) * c + cfg.class_overlap * (pair_base + 0.5)
        pair_tint = np.zeros(3, dtype=np.float32)
        pair_tint[pair_base % 3] += 0.15
        pair_tint[(pair_base + 1) % 3] += 0.15
    else:
        c_eff = float(c)
        pair_tint = np.zeros(3, dtype=np.float32)
        pair_tint[c % 3] = 0.3

    t = np.arange(cfg.audio_frames, dtype=np.float32)[:, None]
    f = np.arange(cfg.mel_bins, dtype=np.float32)[None, :]
    center = cfg.mel_bins * (c_eff + 0.5) / k
    width = max(cfg.mel_bins / (2.5 * k), 1.0)
    band = np.exp(-0.5 * ((f - center) / width) ** 2)
    rate = 1.5 + 0.8 * c
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wobble = 0.6 + 0.4 * np.sin(2.0 * np.pi * rate * t / cfg.audio_frames + phase)
    amplitude = 1.0 + 0.5 * arousal
    audio = amplitude * band * wobble + 0.25 * cfg.noise_scale * rng.standard_normal(
        (cfg.audio_frames, cfg.mel_bins)
    )
    if cfg.class_overlap > 0.0 and pair_base + 1 < k:
        # faint time-constant bump at a per-class position: the only
        # within-pair evidence once the primary signatures have merged
        cue_center = cfg.mel_bins * (c + 0.25) / k
        cue = np.exp(-0.5 * ((f - cue_center) / (0.5 * width)) ** 2)
        audio = audio + 0.3 * cfg.class_overlap * cue

    th, tw = cfg.video_height, cfg.video_width
    frames = np.arange(cfg.video_frames, dtype=np.float32)
    angle = 2.0 * np.pi * c_eff / k
    progress = frames / max(cfg.video_frames - 1, 1)
    cx = tw * (0.3 + 0.4 * progress * np.cos(angle) + 0.2)
    cy = th * (0.3 + 0.4 * progress * np.sin(angle) + 0.2)
    ys = np.arange(th, dtype=np.float32)[None, :, None]
    xs = np.arange(tw, dtype=np.float32)[None, None, :]
    sigma = 0.12 * min(th, tw)
    blob = np.exp(
        -((xs - cx[:, None, None]) ** 2 + (ys - cy[:, None, None]) ** 2) / (2.0 * sigma**2)
    )
    intensity = 1.0 + 0.4 * valence
    tint = np.zeros(3, dtype=np.float32)
    tint[c % 3] = 0.3
    tint = (1.0 - cfg.class_overlap) * tint + cfg.class_overlap * pair_tint
    video = intensity * blob[..., None] * (0.7 + tint) + 0.1 * cfg.noise_scale * rng.standard_normal(
        (cfg.video_frames, th, tw, 3)
    )
    video = np.clip(video, -1.0, 1.0)

    return SyntheticSample(
        sample_id=f"s{index:05d}",
        class_index=int(c),
        valence=float(valence),
        arousal=float(arousal),
        dominance=float(dominance),
        audio=audio.astype(np.float32),
        video=video.astype(np.float32),
    )


def _fold_assignment(n: int, classes: np.ndarray, n_folds: int, master_seed: int) -> np.ndarray:
    """Stratified folds: shuffle within class, deal round-robin."""
    rng = seeding.stream(master_seed, seeding.SPLIT)
    folds = np.zeros(n, dtype=np.int64)
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        members = members[rng.permutation(len(members))]
        for position, sample in enumerate(members):
            folds[sample] = position % n_folds
    return folds


def synth_corpus(out_dir: str | Path, cfg: CorpusConfig, master_seed: int) -> list[dict]:
    """Generate arrays, manifest, and stub captions; returns manifest rows."""
    out_dir = Path(out_dir)
    (out_dir / "arrays").mkdir(parents=True, exist_ok=True)
    samples = [generate_sample(i, cfg, master_seed) for i in range(cfg.n_samples)]
    classes = np.array([s.class_index for s in samples])
    folds = _fold_assignment(cfg.n_samples, classes, cfg.n_folds, master_seed)

    rows = []
    latents = {}
    for sample, fold in zip(samples, folds):
        rel = f"arrays/{sample.sample_id}.vaem"
        write_arrays(out_dir / rel, {"audio": sample.audio, "video": sample.video})
        label = {
            "class_index": sample.class_index,
            "class_name": CLASS_NAMES[sample.class_index],
            "valence": sample.valence,
            "arousal": sample.arousal,
            "dominance": sample.dominance,
        }
        rows.append(
            {
                "sample_id": sample.sample_id,
                "audio_path": rel,
                "video_path": rel,
                "label": label,
                "fold": int(fold),
            }
        )
        latents[sample.sample_id] = label
    write_manifest(out_dir / "manifest.jsonl", rows)
    client = StubClient(latents, confusion_rate=cfg.caption_confusion, n_classes=cfg.n_classes)
    caption_corpus(
        client,
        coverage_subset([s.sample_id for s in samples], cfg.caption_coverage, master_seed),
        out_dir,
        passes=cfg.caption_passes,
        d_text=cfg.text_dim,
    )
    return rows


# ------------------------------------------------------------ manifest IO

_ROW_FIELDS = ("sample_id", "audio_path", "video_path", "fold")


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    lines = [
        json.dumps(row, sort_keys=True, ensure_ascii=False, separators=(",", ":")) for row in rows
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist; run synth-data first")
    rows = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed manifest row: {exc}") from None
        missing = [k for k in _ROW_FIELDS if k not in row]
        if missing:
            raise ParseError(f"{path}:{lineno}: manifest row missing fields {missing}")
        if row["sample_id"] in seen:
            raise DataError(f"{path}:{lineno}: duplicate sample_id {row['sample_id']!r}")
        seen.add(row["sample_id"])
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: manifest is empty")
    folds = sorted({row["fold"] for row in rows})
    if folds != list(range(len(folds))):
        raise DataError(f"{path}: fold indices {folds} are not contiguous from 0")
    return rows


@dataclass
class Corpus:
    """Manifest plus eagerly loaded arrays, aligned by row order."""

    root: Path
    rows: list[dict]
    audio: np.ndarray  # [n, T, F]
    video: np.ndarray  # [n, T, H, W, 3]
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.sample_ids:
            self.sample_ids = [row["sample_id"] for row in self.rows]

    @property
    def n(self) -> int:
        return len(self.rows)

    def folds(self) -> np.ndarray:
        return np.array([row["fold"] for row in self.rows], dtype=np.int64)

    def class_labels(self) -> np.ndarray:
        labels = []
        for row in self.rows:
            label = row.get("label") or {}
            if "class_index" not in label:
                raise DataError(f"sample {row['sample_id']!r} has no class label")
            labels.append(int(label["class_index"]))
        return np.array(labels, dtype=np.int64)

    def vad_targets(self) -> np.ndarray:
        targets = []
        for row in self.rows:
            label = row.get("label") or {}
            if not all(k in label for k in ("valence", "arousal", "dominance")):
                raise DataError(f"sample {row['sample_id']!r} has no dimensional label")
            targets.append([label["valence"], label["arousal"], label["dominance"]])
        return np.array(targets, dtype=np.float32)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    rows = load_manifest(root / "manifest.jsonl")
    audio_list = []
    video_list = []
    for row in rows:
        audio_path = root / row["audio_path"]
        video_path = root / row["video_path"]
        for p in {audio_path, video_path}:
            if not p.is_file():
                raise DataError(f"sample {row['sample_id']!r}: array file {p} does not exist")
        arrays = read_arrays(audio_path)
        if audio_path != video_path:
            arrays.update(read_arrays(video_path))
        for entry in ("audio", "video"):
            if entry not in arrays:
                raise DataError(f"sample {row['sample_id']!r}: missing {entry!r} array")
        audio_list.append(arrays["audio"])
        video_list.append(arrays["video"])
    return Corpus(root=root, rows=rows, audio=np.stack(audio_list), video=np.stack(video_list))


def batch_iter(
    n_or_indices, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = False
) -> list[np.ndarray]:
    """Deterministic shuffled batches; order is a pure function of (seed, epoch)."""
    if isinstance(n_or_indices, (int, np.integer)):
        indices = np.arange(int(n_or_indices))
    else:
        indices = np.asarray(n_or_indices, dtype=np.int64)
    if indices.size == 0:
        raise DataError("cannot iterate over an empty sample set")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be at least 1, got {batch_size}")
    order = seeding.stream(seed, seeding.BATCH, epoch).permutation(indices.size)
    shuffled = indices[order]
    batches = [shuffled[i : i + batch_size] for i in range(0, indices.size, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches

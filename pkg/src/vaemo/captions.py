"""Caption generation: staged prompts, voting, filtering, persistence.

The prompt walks a model through three ordered stages (observable
features, then emotional state with arousal and valence, then change
over time).  Multiple passes per input are reduced by strict-majority
voting on an extracted emotion label, the winner is kept only if it
clears a relevance filter, and surviving captions are embedded for
stage-two training.  Clients are pluggable: a deterministic stub that
verbalizes synthetic latents, a fixture-replay client, and a live HTTP
client that records fixtures.

Store format: JSON Lines, one record per line, keys sorted, with fields
sample_id, modality ("A"|"V"), candidates, votes, winner, filtered,
reason, embedding_ref.
"""

from __future__ import annotations

import hashlib
import json
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .errors import DataError, ParameterError, ParseError, TransportError

MODALITY_CODES = {"audio": "A", "video": "V"}
CODE_TO_MODALITY = {"A": "audio", "V": "video"}

# Emotion classes the synthetic corpus can draw from, in class-index order.
CLASS_NAMES = ("happy", "sad", "angry", "calm", "fearful", "surprised", "disgusted", "neutral")

# Keyword lexicon keyed by class label; extraction requires a unique hit.
CLASS_LEXICON: dict[str, tuple[str, ...]] = {
    "happy": ("happy", "joyful", "cheerful", "delighted", "amusement", "upbeat"),
    "sad": ("sad", "sorrowful", "downcast", "mournful", "dejected", "gloomy"),
    "angry": ("angry", "irritated", "furious", "hostile", "seething", "stern"),
    "calm": ("calm", "serene", "composed", "relaxed", "placid", "unhurried"),
    "fearful": ("fearful", "anxious", "nervous", "worried", "apprehensive"),
    "surprised": ("surprised", "astonished", "startled", "amazed"),
    "disgusted": ("disgusted", "repulsed", "revolted", "contemptuous"),
    "neutral": ("neutral", "flat", "impassive", "indifferent"),
}

# General affect vocabulary for the relevance filter, beyond class words.
AFFECT_TERMS = (
    "emotion",
    "emotional",
    "arousal",
    "valence",
    "intensity",
    "assertiveness",
    "amusement",
    "demeanor",
    "mood",
    "affect",
    "tense",
    "agitation",
)


def default_affect_lexicon() -> frozenset[str]:
    words = set(AFFECT_TERMS)
    for terms in CLASS_LEXICON.values():
        words.update(terms)
    return frozenset(words)


DEFAULT_AFFECT_LEXICON = default_affect_lexicon()

_WORD_RE = re.compile(r"[a-z']+")


def _words(text: str) -> set[str]:
    return set(_WORD_RE.findall(text.lower()))


@dataclass(frozen=True)
class CotPrompt:
    """Three ordered reasoning stages rendered into one instruction text."""

    modality: str  # "audio" | "video"
    stages: tuple[str, str, str]
    text: str
    sample_id: str


@dataclass
class CaptionRecord:
    sample_id: str
    modality: str  # "A" | "V"
    candidates: list[str]
    votes: list[str | None]
    winner: str | None
    filtered: bool
    reason: str | None
    embedding_ref: str | None

    def key(self) -> str:
        return f"{self.sample_id}/{self.modality}"


@dataclass(frozen=True)
class CaptionEmbedding:
    sample_id: str
    modality: str  # "A" | "V"
    vector: np.ndarray
    source: str  # "stub" | "fixture"


_OBSERVABLE = {
    "video": (
        "Describe the observable physical characteristics of the person: "
        "facial action units, overall posture, and body movements."
    ),
    "audio": (
        "Describe the observable acoustic properties of the voice: pitch "
        "movement, loudness, tempo, and voice quality."
    ),
}
_STATE = (
    "Assess the emotional state these features convey, including its "
    "intensity (arousal) and valence."
)
_CHANGE = "Analyze how the overall emotional expression changes over time."


def build_cot_prompt(modality: str, sample_meta: dict) -> CotPrompt:
    """Deterministic three-stage prompt for one sample and modality."""
    if modality not in MODALITY_CODES:
        raise ParameterError(f"unknown modality {modality!r}")
    sample_id = str(sample_meta.get("sample_id", ""))
    stages = (_OBSERVABLE[modality], _STATE, _CHANGE)
    lines = [
        f"You are describing the {modality} track of clip {sample_id}.",
        "Work through the following stages in order, and ground every "
        "statement in observable features.",
    ]
    lines += [f"{i + 1}. {stage}" for i, stage in enumerate(stages)]
    return CotPrompt(modality=modality, stages=stages, text="\n".join(lines), sample_id=sample_id)


class StubClient:
    """Derives captions deterministically from synthetic latent emotions.

    confusion_rate imitates annotator error: per pass, with that
    probability, the caption describes the other class of the sample's
    pair (classes 2c and 2c+1 are the confusable ones).  The draw is a
    hash of (sample, modality, pass), so stores stay reproducible and
    the three voting passes err independently.
    """

    mode = "stub"

    def __init__(
        self,
        latents: dict[str, dict],
        lexicon: frozenset[str] = DEFAULT_AFFECT_LEXICON,
        confusion_rate: float = 0.0,
        n_classes: int | None = None,
    ):
        if not 0.0 <= confusion_rate <= 1.0:
            raise ParameterError(f"confusion_rate must lie in [0, 1], got {confusion_rate}")
        self.latents = latents
        self.lexicon = lexicon
        self.confusion_rate = confusion_rate
        if n_classes is None:
            n_classes = 1 + max(
                (int(v["class_index"]) for v in latents.values()), default=len(CLASS_NAMES) - 1
            )
        self.n_classes = n_classes

    def complete(self, prompt: CotPrompt, pass_index: int) -> str:
        if prompt.sample_id not in self.latents:
            raise DataError(f"stub client has no latent for sample {prompt.sample_id!r}")
        latent = self.latents[prompt.sample_id]
        if self.confusion_rate > 0.0:
            latent = self._maybe_confuse(prompt, pass_index, latent)
        return stub_caption(prompt.modality, latent, pass_index)

    def _maybe_confuse(self, prompt: CotPrompt, pass_index: int, latent: dict) -> dict:
        key = f"{prompt.sample_id}/{prompt.modality}/{pass_index}".encode("utf-8")
        draw = int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2.0**64
        if draw >= self.confusion_rate:
            return latent
        partner = int(latent["class_index"]) ^ 1
        if partner >= self.n_classes:
            return latent
        confused = dict(latent)
        confused["class_index"] = partner
        return confused

    def judge_relevance(self, caption: str) -> tuple[bool, str | None]:
        return lexicon_relevance(caption, self.lexicon)


def stub_caption(modality: str, latent: dict, pass_index: int) -> str:
    """Fixed phrasing per (class, arousal band, valence band, pass)."""
    class_index = int(latent["class_index"])
    if class_index >= len(CLASS_NAMES):
        raise DataError(f"class index {class_index} has no name; at most {len(CLASS_NAMES)} classes")
    label = CLASS_NAMES[class_index]
    keywords = CLASS_LEXICON[label]
    arousal = float(latent["arousal"])
    valence = float(latent["valence"])
    arousal_phrase = (
        "high arousal" if arousal > 0.33 else "low arousal" if arousal < -0.33 else "moderate arousal"
    )
    valence_phrase = (
        "positive valence" if valence > 0.33 else "negative valence" if valence < -0.33 else "mixed valence"
    )
    surface = {
        "audio": "The voice carries",
        "video": "The face and posture show",
    }[modality]
    detail = {
        "audio": "steady pacing and clear articulation",
        "video": "visible action units and deliberate movements",
    }[modality]
    variants = (
        f"{surface} a {label} tone with {arousal_phrase} and {valence_phrase}, read from {detail}.",
        f"Overall the expression stays {keywords[pass_index % len(keywords)]}; "
        f"{arousal_phrase} with {valence_phrase} throughout.",
        f"A {label} demeanor dominates, {detail} suggesting {arousal_phrase} and {valence_phrase}.",
    )
    return variants[pass_index % len(variants)]


class ReplayClient:
    """Returns fixture files verbatim: <sample_id>/<modality>/<pass_index>.txt."""

    mode = "replay"

    def __init__(self, fixture_dir: str | Path, lexicon: frozenset[str] = DEFAULT_AFFECT_LEXICON):
        self.fixture_dir = Path(fixture_dir)
        self.lexicon = lexicon

    def complete(self, prompt: CotPrompt, pass_index: int) -> str:
        code = MODALITY_CODES[prompt.modality]
        path = self.fixture_dir / prompt.sample_id / code / f"{pass_index}.txt"
        if not path.is_file():
            raise DataError(f"missing caption fixture {path}")
        return path.read_text(encoding="utf-8")

    def judge_relevance(self, caption: str) -> tuple[bool, str | None]:
        return lexicon_relevance(caption, self.lexicon)


class LiveClient:
    """POSTs prompts to an HTTP endpoint; optionally records replay fixtures."""

    mode = "live"

    def __init__(
        self,
        endpoint: str,
        record_dir: str | Path | None = None,
        retries: int = 2,
        timeout: float = 10.0,
    ):
        self.endpoint = endpoint
        self.record_dir = Path(record_dir) if record_dir else None
        self.retries = retries
        self.timeout = timeout

    def _post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
                last = exc
        raise TransportError(f"caption endpoint {self.endpoint} failed: {last}")

    def complete(self, prompt: CotPrompt, pass_index: int) -> str:
        reply = self._post(
            {
                "task": "caption",
                "sample_id": prompt.sample_id,
                "modality": MODALITY_CODES[prompt.modality],
                "pass_index": pass_index,
                "prompt": prompt.text,
            }
        )
        if "caption" not in reply:
            raise TransportError(f"caption endpoint reply missing 'caption' field: {reply}")
        caption = str(reply["caption"])
        if self.record_dir is not None:
            code = MODALITY_CODES[prompt.modality]
            path = self.record_dir / prompt.sample_id / code / f"{pass_index}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(caption, encoding="utf-8")
        return caption

    def judge_relevance(self, caption: str) -> tuple[bool, str | None]:
        reply = self._post({"task": "relevance", "caption": caption})
        kept = bool(reply.get("keep", False))
        return kept, None if kept else str(reply.get("reason", "discarded by endpoint"))


def generate(client, prompt: CotPrompt, passes: int) -> list[str]:
    if passes < 1:
        raise ParameterError(f"pass count must be at least 1, got {passes}")
    return [client.complete(prompt, i) for i in range(passes)]


def extract_label(caption: str, class_lexicon: dict[str, tuple[str, ...]] = CLASS_LEXICON) -> str | None:
    """Keyword-vote a caption's emotion label; ambiguity yields None."""
    words = _words(caption)
    hits = [label for label, terms in class_lexicon.items() if words.intersection(terms)]
    return hits[0] if len(hits) == 1 else None


def majority_vote(candidates: list[str], label_extractor=extract_label):
    """Strict-majority label; earliest matching candidate wins.

    Returns (winner or None, per-candidate labels, reason or None).
    """
    if not candidates:
        raise ParameterError("majority_vote needs at least one candidate")
    votes = [label_extractor(c) for c in candidates]
    extracted = [v for v in votes if v is not None]
    if not extracted:
        return None, votes, "no label extracted from any candidate"
    counts: dict[str, int] = {}
    for v in extracted:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts, key=lambda label: counts[label])
    if counts[top] * 2 <= len(candidates):
        return None, votes, "no strict majority label"
    winner_index = votes.index(top)
    return candidates[winner_index], votes, None


def lexicon_relevance(caption: str, lexicon: frozenset[str]) -> tuple[bool, str | None]:
    if not caption.strip():
        return False, "empty caption"
    if _words(caption).intersection(lexicon):
        return True, None
    return False, "no affect terms"


def filter_relevance(client, caption: str) -> tuple[bool, str | None]:
    """Binary keep/discard verdict with a reason when discarded."""
    if not caption.strip():
        return False, "empty caption"
    return client.judge_relevance(caption)


# ------------------------------------------------------------ store IO

_RECORD_FIELDS = (
    "sample_id",
    "modality",
    "candidates",
    "votes",
    "winner",
    "filtered",
    "reason",
    "embedding_ref",
)


def write_caption_store(path: str | Path, records: list[CaptionRecord]) -> None:
    seen: set[str] = set()
    lines = []
    for record in records:
        if record.modality not in CODE_TO_MODALITY:
            raise DataError(f"record {record.sample_id!r} has invalid modality {record.modality!r}")
        key = record.key()
        if key in seen:
            raise DataError(f"duplicate caption record for key {key!r}")
        seen.add(key)
        lines.append(json.dumps(asdict(record), sort_keys=True, ensure_ascii=False, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_caption_store(path: str | Path) -> list[CaptionRecord]:
    records: list[CaptionRecord] = []
    seen: set[str] = set()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"caption store {path} does not exist; run gen-captions first")
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed caption record: {exc}") from None
        missing = [f for f in _RECORD_FIELDS if f not in raw]
        if missing:
            raise ParseError(f"{path}:{lineno}: caption record is missing fields {missing}")
        record = CaptionRecord(**{f: raw[f] for f in _RECORD_FIELDS})
        key = record.key()
        if key in seen:
            raise DataError(f"{path}:{lineno}: duplicate caption record for key {key!r}")
        seen.add(key)
        records.append(record)
    return records


# ------------------------------------------------------------ embeddings

_PROJECTION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _projection(n_features: int, d_text: int) -> np.ndarray:
    key = (n_features, d_text)
    if key not in _PROJECTION_CACHE:
        rng = seeding.stream(seeding.PROJECTION_BASE, seeding.PROJECTION, n_features, d_text)
        _PROJECTION_CACHE[key] = rng.standard_normal((n_features, d_text)).astype(np.float32)
    return _PROJECTION_CACHE[key]


def embed_caption(
    caption: str, d_text: int = 256, lexicon: frozenset[str] = DEFAULT_AFFECT_LEXICON
) -> np.ndarray:
    """Bag-of-affect-words counts under a fixed random projection, unit norm."""
    vocabulary = sorted(lexicon)
    words = _WORD_RE.findall(caption.lower())
    features = np.zeros(len(vocabulary) + 1, dtype=np.float32)
    features[0] = 1.0  # bias keeps the embedding nonzero for any caption
    index = {word: i + 1 for i, word in enumerate(vocabulary)}
    for word in words:
        if word in index:
            features[index[word]] += 1.0
    vec = features @ _projection(features.size, d_text)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


# ------------------------------------------------------------ pipeline

EMBEDDINGS_FILE = "caption_embeddings.vaem"


def caption_sample(
    client,
    sample_id: str,
    modality: str,
    passes: int,
    d_text: int,
) -> tuple[CaptionRecord, np.ndarray | None]:
    """Run generate -> vote -> filter for one (sample, modality)."""
    prompt = build_cot_prompt(modality, {"sample_id": sample_id})
    candidates = generate(client, prompt, passes)
    winner, votes, vote_reason = majority_vote(candidates)
    code = MODALITY_CODES[modality]
    if winner is None:
        record = CaptionRecord(
            sample_id=sample_id,
            modality=code,
            candidates=candidates,
            votes=votes,
            winner=None,
            filtered=True,
            reason=vote_reason or "inconsistent",
            embedding_ref=None,
        )
        return record, None
    kept, filter_reason = filter_relevance(client, winner)
    if not kept:
        record = CaptionRecord(
            sample_id=sample_id,
            modality=code,
            candidates=candidates,
            votes=votes,
            winner=winner,
            filtered=True,
            reason=filter_reason or "discarded",
            embedding_ref=None,
        )
        return record, None
    vector = embed_caption(winner, d_text=d_text)
    record = CaptionRecord(
        sample_id=sample_id,
        modality=code,
        candidates=candidates,
        votes=votes,
        winner=winner,
        filtered=False,
        reason=None,
        embedding_ref=f"{EMBEDDINGS_FILE}#{sample_id}/{code}",
    )
    return record, vector


def coverage_subset(sample_ids: list[str], fraction: float, seed: int) -> list[str]:
    """Caption budget: deterministic order-preserving subset of the ids."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"caption coverage must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(sample_ids)
    n = max(2, int(np.floor(fraction * len(sample_ids) + 0.5)))
    order = seeding.stream(seed, seeding.COVERAGE).permutation(len(sample_ids))
    return [sample_ids[i] for i in sorted(order[:n].tolist())]


def caption_corpus(
    client,
    sample_ids: list[str],
    out_dir: str | Path,
    passes: int = 3,
    d_text: int = 256,
) -> tuple[list[CaptionRecord], dict[str, np.ndarray]]:
    """Caption every sample in both modalities; write store + embeddings."""
    from .arrayio import write_arrays  # local import avoids a cycle at module load

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[CaptionRecord] = []
    vectors: dict[str, np.ndarray] = {}
    for sample_id in sample_ids:
        for modality in ("audio", "video"):
            record, vector = caption_sample(client, sample_id, modality, passes, d_text)
            records.append(record)
            if vector is not None:
                vectors[f"{sample_id}/{record.modality}"] = vector
    write_caption_store(out_dir / "captions.jsonl", records)
    write_arrays(out_dir / EMBEDDINGS_FILE, vectors)
    return records, vectors


def usable_embeddings(store_path: str | Path) -> dict[str, np.ndarray]:
    """Embeddings for records with filtered=false and a winner, by key."""
    from .arrayio import read_arrays

    store_path = Path(store_path)
    records = load_caption_store(store_path)
    refs = {}
    for record in records:
        if record.filtered or record.winner is None or record.embedding_ref is None:
            continue
        file_part, _, name = record.embedding_ref.partition("#")
        refs[record.key()] = (store_path.parent / file_part, name)
    arrays_by_file: dict[Path, dict[str, np.ndarray]] = {}
    out: dict[str, np.ndarray] = {}
    for key, (file_path, name) in refs.items():
        if file_path not in arrays_by_file:
            arrays_by_file[file_path] = read_arrays(file_path)
        if name not in arrays_by_file[file_path]:
            raise DataError(f"caption embedding {name!r} missing from {file_path}")
        out[key] = arrays_by_file[file_path][name]
    return out

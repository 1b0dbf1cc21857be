"""Episodic dataset synthesis.

Queries are 30 s background clips with 1-3 non-overlapping events overlaid at
a controlled event-to-background ratio (EBR); supports are trimmed event
clips. A procedural corpus of parameterized generators (tones, chirps, noise
bursts, AM tones) makes the pipeline self-contained for testing.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .features import AudioClip, AudioError, SAMPLE_RATE, read_wav, write_wav

log = logging.getLogger(__name__)

QUERY_SECONDS = 30
QUERY_SAMPLES = QUERY_SECONDS * SAMPLE_RATE
EBR_CHOICES_DB = (-12, -6, 0, 6, 12)
PLACEMENT_RETRIES = 100
MANIFEST_SCHEMA_VERSION = 1


class SynthesisError(ValueError):
    """Raised on synthesis contract violations."""


@dataclass(frozen=True)
class SourceClip:
    class_id: str
    audio: AudioClip
    origin: str = ""

    def __post_init__(self):
        if not self.class_id:
            raise SynthesisError("class_id must be non-empty")
        if self.audio.sample_rate != SAMPLE_RATE:
            raise SynthesisError("source clips must be 16 kHz")


@dataclass(frozen=True)
class EventAnnotation:
    class_id: str
    start_s: float
    end_s: float
    ebr_db: float

    def __post_init__(self):
        if not (0.0 <= self.start_s < self.end_s <= QUERY_SECONDS):
            raise SynthesisError("annotation outside query bounds")


@dataclass
class QueryClip:
    audio: AudioClip
    annotations: list[EventAnnotation]
    background_id: str

    def __post_init__(self):
        if len(self.audio.samples) != QUERY_SAMPLES:
            raise SynthesisError("query clip must be exactly 30 s")
        if not 1 <= len(self.annotations) <= 3:
            raise SynthesisError("query must carry 1-3 annotations")


@dataclass
class Episode:
    episode_id: str
    classes: list[str]
    support: dict[str, list[AudioClip]]
    queries: list[QueryClip]
    split: str


@dataclass
class SynthConfig:
    n_way: int = 5
    k_shot: int = 5
    queries_per_episode: int = 8
    episodes: dict = field(
        default_factory=lambda: {"train": 25000, "val": 5000, "test": 5000}
    )
    class_split_sizes: tuple[int, int, int] | None = None
    background_split_sizes: tuple[int, int, int] = (822, 150, 150)
    ebr_choices_db: tuple = EBR_CHOICES_DB
    event_crop: str = "support"  # "support" -> [1,5] s, "vox" -> [2,5] s
    max_events: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ebr_choices_db"] = list(self.ebr_choices_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("class_split_sizes") is not None:
            d["class_split_sizes"] = tuple(d["class_split_sizes"])
        d["background_split_sizes"] = tuple(d["background_split_sizes"])
        d["ebr_choices_db"] = tuple(d["ebr_choices_db"])
        return cls(**d)


def _uniform_crop(clip: AudioClip, min_s: float, max_s: float, rng: np.random.Generator) -> AudioClip:
    n = len(clip.samples)
    length = int(round(rng.uniform(min_s, max_s) * clip.sample_rate))
    length = min(length, n)
    start = int(rng.integers(0, n - length + 1))
    return clip.slice_samples(start, start + length)


def crop_support(clip: AudioClip, rng: np.random.Generator) -> AudioClip:
    """Uniform random crop of clips over 5 s into [1, 5] s; shorter pass through."""
    if clip.duration_s < 1.0:
        raise SynthesisError("support clip too short")
    if clip.duration_s <= 5.0:
        return clip
    return _uniform_crop(clip, 1.0, 5.0, rng)


def crop_vox_event(clip: AudioClip, rng: np.random.Generator) -> AudioClip:
    """Uniform random crop of clips over 5 s into [2, 5] s; shorter pass through."""
    if clip.duration_s < 2.0:
        raise SynthesisError("event clip too short")
    if clip.duration_s <= 5.0:
        return clip
    return _uniform_crop(clip, 2.0, 5.0, rng)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def ebr_gain(event_rms: float, bg_rms: float, ebr_db: float) -> float:
    """Gain putting the event's RMS ebr_db above the covered background RMS."""
    if event_rms <= 0.0 or bg_rms <= 0.0:
        raise SynthesisError("degenerate signal")
    return 10.0 ** (ebr_db / 20.0) * bg_rms / event_rms


def synthesize_query(
    background: AudioClip,
    events: list[tuple[SourceClip, float]],
    rng: np.random.Generator,
    background_id: str = "",
) -> QueryClip:
    """Overlay 1-3 events on a 30 s background crop at the requested EBRs.

    Placement is sequential rejection sampling; events never overlap and lie
    fully inside the clip. If mixing exceeds [-1, 1] the whole mix is rescaled
    (annotated EBRs refer to the pre-rescale signal).
    """
    if not 1 <= len(events) <= 3:
        raise SynthesisError("query must carry 1-3 events")
    if len(background.samples) < QUERY_SAMPLES:
        raise SynthesisError("background shorter than 30 s")
    offset = int(rng.integers(0, len(background.samples) - QUERY_SAMPLES + 1))
    mix = background.samples[offset : offset + QUERY_SAMPLES].copy()

    placed: list[tuple[int, int]] = []
    annotations: list[EventAnnotation] = []
    for source, ebr_db in events:
        ev = source.audio.samples
        if len(ev) > QUERY_SAMPLES:
            raise SynthesisError("event longer than query")
        start = None
        for _ in range(PLACEMENT_RETRIES):
            cand = int(rng.integers(0, QUERY_SAMPLES - len(ev) + 1))
            if all(cand + len(ev) <= s or cand >= e for s, e in placed):
                start = cand
                break
        if start is None:
            raise SynthesisError("placement infeasible")
        segment = mix[start : start + len(ev)]
        g = ebr_gain(_rms(ev), _rms(segment), ebr_db)
        mix[start : start + len(ev)] += g * ev
        placed.append((start, start + len(ev)))
        annotations.append(
            EventAnnotation(
                class_id=source.class_id,
                start_s=start / SAMPLE_RATE,
                end_s=(start + len(ev)) / SAMPLE_RATE,
                ebr_db=ebr_db,
            )
        )

    peak = float(np.max(np.abs(mix)))
    if peak > 1.0:
        mix /= peak
    annotations.sort(key=lambda a: a.start_s)
    return QueryClip(AudioClip(mix, SAMPLE_RATE), annotations, background_id)


# ---------------------------------------------------------------------------
# Procedural corpus


def _class_frequency(class_index: int, num_classes: int) -> float:
    lo, hi = 300.0, 6000.0
    if num_classes == 1:
        return lo
    return float(lo * (hi / lo) ** (class_index / (num_classes - 1)))


def _render_event(kind: int, freq: float, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if kind == 0:  # pure tone
        x = np.sin(2 * np.pi * freq * t)
    elif kind == 1:  # linear chirp freq -> 1.5 freq
        x = np.sin(2 * np.pi * (freq * t + 0.25 * freq * t**2 / duration_s))
    elif kind == 2:  # band-passed noise burst
        sos = butter(4, [freq * 0.8, min(freq * 1.25, 7900.0)], btype="band", fs=SAMPLE_RATE, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
        x /= max(np.max(np.abs(x)), 1e-9)
    else:  # amplitude-modulated tone
        x = np.sin(2 * np.pi * freq * t) * (0.55 + 0.45 * np.sin(2 * np.pi * 4.0 * t))
    # short fades avoid boundary clicks
    fade = min(160, n // 4)
    env = np.ones(n)
    env[:fade] = np.linspace(0, 1, fade)
    env[-fade:] = np.linspace(1, 0, fade)
    return 0.5 * x * env


def procedural_corpus(
    num_classes: int, clips_per_class: int, rng_seed: int
) -> list[SourceClip]:
    """Deterministic synthetic event corpus; one generator family per class."""
    if num_classes < 1:
        raise SynthesisError("num_classes must be >= 1")
    clips = []
    for c in range(num_classes):
        freq = _class_frequency(c, num_classes)
        kind = c % 4
        class_id = f"proc{c:03d}"
        for i in range(clips_per_class):
            rng = np.random.default_rng([rng_seed, c, i])
            duration = rng.uniform(1.0, 5.0)
            x = _render_event(kind, freq, duration, rng)
            clips.append(SourceClip(class_id, AudioClip(x, SAMPLE_RATE), origin=f"procedural/{class_id}/{i}"))
    return clips


def procedural_backgrounds(num: int, rng_seed: int, duration_s: float = 35.0) -> list[tuple[str, AudioClip]]:
    """Pink-ish filtered-noise backgrounds, deterministic per seed."""
    out = []
    # classic pink-noise approximation filter
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    n = int(round(duration_s * SAMPLE_RATE))
    for i in range(num):
        rng = np.random.default_rng([rng_seed, 7919, i])
        x = lfilter(b, a, rng.standard_normal(n))
        x = 0.1 * x / max(float(np.max(np.abs(x))), 1e-9)
        out.append((f"bg{i:04d}", AudioClip(x, SAMPLE_RATE)))
    return out


# ---------------------------------------------------------------------------
# Corpus ingestion


def ingest_corpus(root_path, layout: str = "flat") -> list[SourceClip]:
    """Load a WAV corpus into 16 kHz mono SourceClips.

    Layouts: "flat" (class/file.wav), "esc50" (fold-id-take-target.wav in one
    directory), "voxceleb" (speaker/session/file.wav, class = speaker).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise SynthesisError("corpus not found")
    paths = sorted(root.rglob("*.wav"))
    clips: list[SourceClip] = []
    for p in paths:
        rel = p.relative_to(root)
        if layout == "flat":
            if len(rel.parts) < 2:
                continue
            class_id = rel.parts[0]
        elif layout == "esc50":
            parts = p.stem.split("-")
            if len(parts) < 4:
                continue
            class_id = parts[-1]
        elif layout == "voxceleb":
            if len(rel.parts) < 2:
                continue
            class_id = rel.parts[0]
        else:
            raise SynthesisError(f"unknown layout: {layout}")
        try:
            audio = read_wav(p)
        except Exception as exc:  # noqa: BLE001 - skip-and-warn contract
            log.warning("skipping unreadable file %s: %s", p, exc)
            continue
        clips.append(SourceClip(class_id, audio, origin=str(rel)))
    if not clips:
        raise SynthesisError("empty corpus")
    return clips


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class Corpora:
    """Event clips grouped by class plus per-split background pools."""

    events: list[SourceClip]
    backgrounds: list[tuple[str, AudioClip]]

    def classes(self) -> list[str]:
        return sorted({c.class_id for c in self.events})

    def by_class(self) -> dict[str, list[SourceClip]]:
        out: dict[str, list[SourceClip]] = {}
        for c in self.events:
            out.setdefault(c.class_id, []).append(c)
        return out


SPLITS = ("train", "val", "test")


def _split_pool(items: list, sizes, rng: np.random.Generator) -> dict[str, list]:
    if sizes is None:
        n = len(items)
        n_train = max(1, int(round(n * 0.6)))
        n_val = max(1, (n - n_train) // 2)
        sizes = (n_train, n_val, n - n_train - n_val)
    if sum(sizes) > len(items):
        raise SynthesisError("pool smaller than requested split sizes")
    perm = rng.permutation(len(items))
    out, at = {}, 0
    for split, size in zip(SPLITS, sizes):
        out[split] = [items[i] for i in perm[at : at + size]]
        at += size
    return out


def _episode_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def _crop_event(clip: AudioClip, mode: str, rng: np.random.Generator) -> AudioClip:
    return crop_vox_event(clip, rng) if mode == "vox" else crop_support(clip, rng)


def generate_episode(
    config: SynthConfig,
    by_class: dict[str, list[SourceClip]],
    class_pool: list[str],
    backgrounds: list[tuple[str, AudioClip]],
    split: str,
    index: int,
    seed: int,
) -> Episode:
    """One deterministic episode from (seed, split, index)."""
    rng = _episode_rng(seed, split, index)
    if len(class_pool) < config.n_way:
        raise SynthesisError("class pool smaller than n_way")
    if not backgrounds:
        raise SynthesisError("empty background pool")
    classes = [class_pool[i] for i in rng.choice(len(class_pool), size=config.n_way, replace=False)]

    support: dict[str, list[AudioClip]] = {}
    support_used: dict[str, set[int]] = {}
    for class_id in classes:
        pool = by_class[class_id]
        replace = len(pool) < config.k_shot
        picks = rng.choice(len(pool), size=config.k_shot, replace=replace)
        support_used[class_id] = set(int(i) for i in picks)
        support[class_id] = [crop_support(pool[int(i)].audio, rng) for i in picks]

    queries = []
    for _ in range(config.queries_per_episode):
        bg_id, bg = backgrounds[int(rng.integers(0, len(backgrounds)))]
        num_events = int(rng.integers(1, config.max_events + 1))
        events = []
        for _ in range(num_events):
            class_id = classes[int(rng.integers(0, len(classes)))]
            pool = by_class[class_id]
            # keep query events disjoint from this episode's support clips
            avail = [i for i in range(len(pool)) if i not in support_used[class_id]]
            if not avail:
                avail = list(range(len(pool)))
            src = pool[avail[int(rng.integers(0, len(avail)))]]
            cropped = _crop_event(src.audio, config.event_crop, rng)
            ebr = float(config.ebr_choices_db[int(rng.integers(0, len(config.ebr_choices_db)))])
            events.append((SourceClip(class_id, cropped, src.origin), ebr))
        queries.append(synthesize_query(bg, events, rng, background_id=bg_id))

    return Episode(
        episode_id=f"{split}-{index:06d}",
        classes=classes,
        support=support,
        queries=queries,
        split=split,
    )


def generate_dataset(
    config: SynthConfig,
    corpora: Corpora,
    rng_seed: int,
    out_dir,
) -> dict:
    """Generate all splits to `out_dir` and return the manifest dict.

    Audio lands under <split>/<episode_id>/ as 16 kHz mono WAVs; the manifest
    (manifest.json) records paths, annotations, splits, seed, and config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_rng = np.random.default_rng([rng_seed, 104729])
    class_splits = _split_pool(corpora.classes(), config.class_split_sizes, split_rng)
    bg_sizes = config.background_split_sizes
    if sum(bg_sizes) > len(corpora.backgrounds):
        bg_sizes = None
    bg_splits = _split_pool(corpora.backgrounds, bg_sizes, split_rng)
    by_class = corpora.by_class()

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": rng_seed,
        "config": config.to_dict(),
        "splits": {},
    }
    for split in SPLITS:
        count = config.episodes.get(split, 0)
        episodes = []
        for index in range(count):
            ep = generate_episode(
                config, by_class, class_splits[split], bg_splits[split], split, index, rng_seed
            )
            ep_dir = out / split / ep.episode_id
            ep_dir.mkdir(parents=True, exist_ok=True)
            support_entry = {}
            for class_id, clips in ep.support.items():
                paths = []
                for i, clip in enumerate(clips):
                    rel = f"{split}/{ep.episode_id}/support_{class_id}_{i}.wav"
                    write_wav(out / rel, clip)
                    paths.append(rel)
                support_entry[class_id] = paths
            query_entries = []
            for j, q in enumerate(ep.queries):
                rel = f"{split}/{ep.episode_id}/query_{j}.wav"
                write_wav(out / rel, q.audio)
                query_entries.append(
                    {
                        "path": rel,
                        "background_id": q.background_id,
                        "annotations": [
                            {
                                "class_id": a.class_id,
                                "start_s": a.start_s,
                                "end_s": a.end_s,
                                "ebr_db": a.ebr_db,
                            }
                            for a in q.annotations
                        ],
                    }
                )
            episodes.append(
                {
                    "episode_id": ep.episode_id,
                    "classes": ep.classes,
                    "support": support_entry,
                    "queries": query_entries,
                }
            )
        manifest["splits"][split] = {
            "class_ids": class_splits[split],
            "background_ids": [bid for bid, _ in bg_splits[split]],
            "episodes": episodes,
        }

    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise SynthesisError("unsupported manifest schema version")
    return manifest

"""Synthetic region/city/speaker corpus, city-disjoint splits and on-disk formats.

A corpus lives in one directory::

    manifest.txt      #F=<feature_dim>, then id|region|city|speaker|sentence_id|path|T
    splits.txt        city|split
    features/*.slv1   one frame matrix per utterance

Feature files are ``SLV1`` + uint32 T + uint32 F (little endian) followed by
T*F float32 values, frame-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"SLV1"
MANIFEST_NAME = "manifest.txt"
SPLITS_NAME = "splits.txt"
SPLITS = ("train", "val", "test")
MIN_CITIES_PER_REGION = 3

# Acronyms of the Italian administrative regions, used as synthetic region names.
REGION_ACRONYMS = (
    "abr", "bas", "cal", "cam", "eml", "fvg", "laz", "lig", "lom", "mar",
    "mol", "pie", "pug", "sar", "sic", "tos", "tre", "umb", "vda", "ven",
)


class DatasetError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    region: str
    city: str
    speaker: str
    sentence_id: int
    frames: np.ndarray  # (T, F)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    region: str
    city: str
    speaker: str
    sentence_id: int
    path: str
    n_frames: int


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    feature_dim: int
    splits: dict[str, str] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self._index = {e.id: e for e in self.entries}
        if len(self._index) != len(self.entries):
            raise DatasetError("duplicate utterance ids in manifest")

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, utt_id: str) -> ManifestEntry:
        try:
            return self._index[utt_id]
        except KeyError:
            raise DatasetError(f"unknown utterance: {utt_id!r}") from None

    @property
    def regions(self) -> list[str]:
        return sorted({e.region for e in self.entries})

    def cities_by_region(self) -> dict[str, list[str]]:
        out: dict[str, set[str]] = {}
        for e in self.entries:
            out.setdefault(e.region, set()).add(e.city)
        return {r: sorted(c) for r, c in sorted(out.items())}

    def split_ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        if not self.splits:
            raise DatasetError("manifest has no split assignment")
        return [e.id for e in self.entries if self.splits.get(e.city) == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


@dataclass(frozen=True)
class SyntheticConfig:
    n_regions: int = 17
    cities_per_region: int = 3
    speakers_per_city: int = 1
    sentences: int = 10
    repeats: int = 5
    latent_dim: int = 16
    feature_dim: int = 32
    frames_mean: int = 20
    frames_jitter: int = 5
    sigma_region: float = 1.0
    sigma_city: float = 0.3
    sigma_speaker: float = 0.1
    sigma_sentence: float = 0.5
    sigma_noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "n_regions": self.n_regions,
            "speakers_per_city": self.speakers_per_city,
            "sentences": self.sentences,
            "repeats": self.repeats,
            "latent_dim": self.latent_dim,
            "feature_dim": self.feature_dim,
            "frames_mean": self.frames_mean,
        }
        for name, v in counts.items():
            if v < 1:
                raise DatasetError(f"{name} must be >= 1, got {v}")
        if self.cities_per_region < MIN_CITIES_PER_REGION:
            raise DatasetError(
                f"cities_per_region must be >= {MIN_CITIES_PER_REGION}, got {self.cities_per_region}"
            )
        if self.frames_jitter < 0:
            raise DatasetError("frames_jitter must be >= 0")
        for name in ("sigma_region", "sigma_city", "sigma_speaker", "sigma_sentence", "sigma_noise"):
            if not getattr(self, name) >= 0:
                raise DatasetError(f"{name} must be >= 0")


def region_names(n: int) -> list[str]:
    if n <= len(REGION_ACRONYMS):
        return list(REGION_ACRONYMS[:n])
    return [f"r{i:03d}" for i in range(n)]


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DatasetError(f"frames must be 2-D, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise DatasetError(f"non-finite values in features for {path}")
    t, f = frames.shape
    data = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, f))
        fh.write(data.tobytes(order="C"))


def read_features(path: str | Path, feature_dim: int | None = None) -> np.ndarray:
    """Read a feature file as a float32 (T, F) array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 12:
        raise DatasetError(f"bad feature file header: {path}")
    t, f = struct.unpack("<II", raw[4:12])
    if feature_dim is not None and f != feature_dim:
        raise DatasetError(f"dimension mismatch in {path}: file has F={f}, manifest F={feature_dim}")
    if len(raw) != 12 + 4 * t * f:
        raise DatasetError(f"truncated feature file: {path}")
    frames = np.frombuffer(raw, dtype="<f4", offset=12).reshape(t, f).astype(np.float32)
    if not np.all(np.isfinite(frames)):
        raise DatasetError(f"NaN or inf in features: {path}")
    return frames


# ---------------------------------------------------------------------------
# Manifest files
# ---------------------------------------------------------------------------


def write_manifest(manifest: CorpusManifest, directory: str | Path) -> None:
    directory = Path(directory)
    lines = [f"#F={manifest.feature_dim}"]
    for e in manifest.entries:
        for v in (e.id, e.region, e.city, e.speaker, e.path):
            if "|" in v or "\n" in v:
                raise DatasetError(f"field contains a delimiter: {v!r}")
        lines.append(f"{e.id}|{e.region}|{e.city}|{e.speaker}|{e.sentence_id}|{e.path}|{e.n_frames}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if manifest.splits:
        split_lines = [f"{city}|{manifest.splits[city]}" for city in sorted(manifest.splits)]
        (directory / SPLITS_NAME).write_text("\n".join(split_lines) + "\n", encoding="utf-8")


def read_manifest(directory: str | Path) -> CorpusManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#F="):
        raise DatasetError(f"manifest header missing in {path}")
    feature_dim = int(lines[0][3:])
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 7:
            raise DatasetError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        uid, region, city, speaker, sent, fpath, t = parts
        entries.append(ManifestEntry(uid, region, city, speaker, int(sent), fpath, int(t)))
    splits: dict[str, str] = {}
    split_path = directory / SPLITS_NAME
    if split_path.exists():
        for line in split_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                city, split = line.split("|")
                if split not in SPLITS:
                    raise DatasetError(f"unknown split {split!r} for city {city!r}")
                splits[city] = split
    return CorpusManifest(entries, feature_dim, splits, root=directory)


def load_batch(manifest: CorpusManifest, ids: Iterable[str]) -> list[Utterance]:
    out = []
    for uid in ids:
        e = manifest.entry(uid)
        frames = read_features(manifest.resolve(e), manifest.feature_dim)
        if frames.shape[0] != e.n_frames:
            raise DatasetError(f"frame count mismatch for {uid}: manifest T={e.n_frames}, file T={frames.shape[0]}")
        out.append(Utterance(e.id, e.region, e.city, e.speaker, e.sentence_id, frames))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

# Stream tags for counter-based seeding; each draw site gets its own stream.
_S_MIXING, _S_REGION, _S_CITY, _S_SPEAKER, _S_SENTENCE, _S_UTT = range(6)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def synthesize(cfg: SyntheticConfig) -> list[Utterance]:
    """Sample the corpus in memory; frames are float32 so they match what is written."""
    cfg.validate()
    d, f = cfg.latent_dim, cfg.feature_dim
    mixing = _rng(cfg.seed, _S_MIXING).normal(0.0, 1.0 / math.sqrt(d), size=(f, d))
    sentence_patterns = _rng(cfg.seed, _S_SENTENCE).normal(0.0, cfg.sigma_sentence, size=(cfg.sentences, d))

    utterances = []
    idx = 0
    for ri, region in enumerate(region_names(cfg.n_regions)):
        r = _rng(cfg.seed, _S_REGION, ri).normal(0.0, cfg.sigma_region, size=d)
        for ci in range(cfg.cities_per_region):
            city = f"{region}{ci:02d}"
            c = r + _rng(cfg.seed, _S_CITY, ri, ci).normal(0.0, cfg.sigma_city, size=d)
            for si in range(cfg.speakers_per_city):
                speaker = f"{city}s{si}"
                s = _rng(cfg.seed, _S_SPEAKER, ri, ci, si).normal(0.0, cfg.sigma_speaker, size=d)
                for k in range(cfg.sentences):
                    mean = mixing @ (c + s + sentence_patterns[k])
                    for rep in range(cfg.repeats):
                        rng = _rng(cfg.seed, _S_UTT, idx)
                        t = int(rng.integers(cfg.frames_mean - cfg.frames_jitter,
                                             cfg.frames_mean + cfg.frames_jitter + 1))
                        t = max(t, 1)
                        frames = mean + rng.normal(0.0, cfg.sigma_noise, size=(t, f))
                        utterances.append(Utterance(
                            id=f"{speaker}-{k:03d}-{rep:02d}",
                            region=region,
                            city=city,
                            speaker=speaker,
                            sentence_id=k,
                            frames=frames.astype(np.float32),
                        ))
                        idx += 1
    return utterances


def manifest_from_utterances(utterances: Sequence[Utterance], feature_dim: int,
                             root: Path | None = None) -> CorpusManifest:
    entries = [
        ManifestEntry(u.id, u.region, u.city, u.speaker, u.sentence_id,
                      f"features/{u.id}.slv1", u.n_frames)
        for u in utterances
    ]
    return CorpusManifest(entries, feature_dim, root=root)


def generate_corpus(cfg: SyntheticConfig, out_dir: str | Path) -> CorpusManifest:
    """Sample a corpus and write its manifest and feature files under ``out_dir``."""
    out_dir = Path(out_dir)
    utterances = synthesize(cfg)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifest = manifest_from_utterances(utterances, cfg.feature_dim, root=out_dir)
    for u, e in zip(utterances, manifest.entries):
        write_features(out_dir / e.path, u.frames)
    write_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def build_splits(manifest: CorpusManifest, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> CorpusManifest:
    """Assign whole cities to train/val/test.

    Regions with fewer than three cities are dropped. Each surviving region
    first gives one random city to each of val, test and train; any further
    cities go, largest first, to whichever split is furthest below its
    sample target.
    """
    fractions = tuple(float(x) for x in fractions)
    if len(fractions) != 3 or any(x <= 0 for x in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three positive numbers summing to 1, got {fractions}")

    by_region = {r: c for r, c in manifest.cities_by_region().items() if len(c) >= MIN_CITIES_PER_REGION}
    if not by_region:
        raise DatasetError("no region has at least 3 cities")
    kept = [e for e in manifest.entries if e.region in by_region]
    city_size: dict[str, int] = {}
    for e in kept:
        city_size[e.city] = city_size.get(e.city, 0) + 1

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    remaining: list[str] = []
    for region, cities in by_region.items():
        order = [cities[i] for i in rng.permutation(len(cities))]
        assignment[order[0]] = "val"
        assignment[order[1]] = "test"
        assignment[order[2]] = "train"
        remaining.extend(order[3:])

    total = float(len(kept))
    targets = {s: fr * total for s, fr in zip(SPLITS, fractions)}
    filled = {s: 0 for s in SPLITS}
    for city, split in assignment.items():
        filled[split] += city_size[city]

    remaining = [remaining[i] for i in rng.permutation(len(remaining))]
    remaining.sort(key=lambda c: -city_size[c])  # stable: shuffled order breaks ties
    for city in remaining:
        split = max(SPLITS, key=lambda s: (targets[s] - filled[s]) / targets[s])
        assignment[city] = split
        filled[split] += city_size[city]

    return replace_manifest(manifest, kept, assignment)


def replace_manifest(manifest: CorpusManifest, entries: list[ManifestEntry],
                     splits: dict[str, str]) -> CorpusManifest:
    return CorpusManifest(list(entries), manifest.feature_dim, dict(sorted(splits.items())), manifest.root)


def check_splits(manifest: CorpusManifest) -> None:
    """Raise DatasetError unless the split assignment satisfies all constraints."""
    by_region = manifest.cities_by_region()
    all_cities = {c for cs in by_region.values() for c in cs}
    if set(manifest.splits) != all_cities:
        raise DatasetError("split assignment does not cover exactly the corpus cities")
    for region, cities in by_region.items():
        if len(cities) < MIN_CITIES_PER_REGION:
            raise DatasetError(f"region {region} has fewer than {MIN_CITIES_PER_REGION} cities")
        present = {manifest.splits[c] for c in cities}
        missing = set(SPLITS) - present
        if missing:
            raise DatasetError(f"region {region} has no city in split(s) {sorted(missing)}")


def split_summary(manifest: CorpusManifest) -> dict[str, tuple[int, int]]:
    """(n_samples, n_cities) per split."""
    out = {}
    for s in SPLITS:
        cities = {c for c, sp in manifest.splits.items() if sp == s}
        n = sum(1 for e in manifest.entries if e.city in cities)
        out[s] = (n, len(cities))
    return out

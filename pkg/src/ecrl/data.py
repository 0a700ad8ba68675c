"""Synthetic video-feature/query datasets with planted target segments.

Each clip-feature row inside the annotated segment is an activity prototype
plus noise; rows outside come from background prototypes. The query is a
fixed token phrase per activity prototype, so it identifies the segment.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"ECRLFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIII")


class FeatureFormatError(ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ManifestError(ValueError):
    pass


class DataConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


@dataclass
class FeatureSequence:
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def D(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class SegmentAnnotation:
    tau_s: int
    tau_e: int

    def validate(self, T):
        if not 0 <= self.tau_s <= self.tau_e < T:
            raise ValueError(f"annotation ({self.tau_s}, {self.tau_e}) invalid for T={T}")
        return self

    @property
    def length(self):
        return self.tau_e - self.tau_s + 1


@dataclass
class QueryTokens:
    tokens: tuple

    def validate(self, vocab_size, n_max):
        if not 1 <= len(self.tokens) <= n_max:
            raise ValueError(f"query length {len(self.tokens)} outside [1, {n_max}]")
        if any(not 0 <= t < vocab_size for t in self.tokens):
            raise ValueError(f"token id outside vocabulary of size {vocab_size}")
        return self


@dataclass
class SyntheticConfig:
    T: int = 48
    D: int = 32
    vocab_size: int = 64
    n_max: int = 8
    n_prototypes: int = 8
    n_background: int = 4
    seg_frac_min: float = 0.15
    seg_frac_max: float = 0.5
    noise_scale: float = 0.2
    signal_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.T < 4:
            raise DataConfigError("T", "must be >= 4")
        if self.D < 2:
            raise DataConfigError("D", "must be >= 2")
        if not 0 < self.seg_frac_min <= self.seg_frac_max < 1:
            raise DataConfigError("seg_frac_min", "segment-length range must lie inside (0, 1)")
        if self.noise_scale < 0:
            raise DataConfigError("noise_scale", "must be >= 0")
        if self.signal_scale <= 0:
            raise DataConfigError("signal_scale", "must be > 0")
        if self.vocab_size < self.n_prototypes:
            raise DataConfigError("vocab_size", "needs at least one distinct token per prototype")
        if self.n_max < 1:
            raise DataConfigError("n_max", "must be >= 1")
        if self.n_prototypes < 1 or self.n_background < 1:
            raise DataConfigError("n_prototypes", "need at least one activity and one background prototype")
        return self


@dataclass
class PrototypeBank:
    activity: np.ndarray
    background: np.ndarray
    phrases: list

    def prototype_of(self, tokens):
        """Recover the activity id a token phrase encodes."""
        try:
            return self.phrases.index(tuple(tokens))
        except ValueError:
            raise KeyError(f"tokens {tokens} encode no prototype") from None


def prototype_bank(cfg):
    rng = np.random.default_rng([cfg.seed, 0])
    activity = rng.standard_normal((cfg.n_prototypes, cfg.D))
    background = rng.standard_normal((cfg.n_background, cfg.D))
    # distinct leading tokens make the phrase table injective
    heads = rng.permutation(cfg.vocab_size)[:cfg.n_prototypes]
    phrases = []
    for k, head in enumerate(heads):
        n = 1 + int(rng.integers(0, cfg.n_max))
        tail = rng.integers(0, cfg.vocab_size, size=n - 1)
        phrases.append((int(head),) + tuple(int(t) for t in tail))
    return PrototypeBank(activity, background, phrases)


def generate_synthetic_pair(cfg, rng, bank=None, prototype=None):
    """Draw one (features, query, annotation) triple.

    Returns ``(FeatureSequence, QueryTokens, SegmentAnnotation, prototype_id)``.
    """
    bank = bank or prototype_bank(cfg)
    T = cfg.T
    k = int(rng.integers(cfg.n_prototypes)) if prototype is None else prototype
    frac = rng.uniform(cfg.seg_frac_min, cfg.seg_frac_max)
    length = int(np.clip(round(frac * T), 1, T))
    tau_s = int(rng.integers(0, T - length + 1))
    tau_e = tau_s + length - 1
    left_bg, right_bg = rng.integers(cfg.n_background, size=2)
    base = np.empty((T, cfg.D))
    base[:tau_s] = bank.background[left_bg]
    base[tau_s:tau_e + 1] = bank.activity[k]
    base[tau_e + 1:] = bank.background[right_bg]
    frames = cfg.signal_scale * base + cfg.noise_scale * rng.standard_normal((T, cfg.D))
    return (FeatureSequence(frames), QueryTokens(bank.phrases[k]),
            SegmentAnnotation(tau_s, tau_e), k)


# feature files


def write_features(path, fs):
    frames = np.ascontiguousarray(fs.frames, dtype="<f4")
    if not np.all(np.isfinite(frames)):
        raise ValueError("refusing to write non-finite features")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def _read_header(buf, path):
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header, need {_HEADER.size} bytes", len(buf))
    magic, version, T, D = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}, expected {FEATURE_VERSION}", 8)
    return T, D


def read_feature_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh.read(_HEADER.size), path)


def read_features(path):
    buf = Path(path).read_bytes()
    T, D = _read_header(buf, path)
    need = _HEADER.size + 4 * T * D
    if len(buf) != need:
        raise FeatureFormatError(
            f"{path}: payload size mismatch, expected {need} bytes for T={T}, D={D}, got {len(buf)}",
            min(len(buf), need))
    frames = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(T, D)
    if not np.all(np.isfinite(frames)):
        raise FeatureFormatError(f"{path}: non-finite feature values", _HEADER.size)
    return FeatureSequence(frames.astype(np.float32))


# manifests


@dataclass
class ManifestRecord:
    sample_id: str
    path: str
    tokens: tuple
    tau_s: int
    tau_e: int
    T: int

    @property
    def annotation(self):
        return SegmentAnnotation(self.tau_s, self.tau_e)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    split: str = "train"
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        return self.root / record.path

    def load(self, record):
        return read_features(self.resolve(record))

    def by_id(self, sample_id):
        for rec in self.records:
            if rec.sample_id == sample_id:
                return rec
        raise KeyError(sample_id)


def format_record(rec):
    toks = " ".join(str(t) for t in rec.tokens)
    return f"{rec.sample_id}\t{rec.path}\t{toks}\t{rec.tau_s}\t{rec.tau_e}\t{rec.T}"


def write_manifest(path, manifest):
    lines = [f"# split={manifest.split}", "# id\tpath\ttokens\ttau_s\ttau_e\tT"]
    lines += [format_record(r) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, check_files=True):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    split = "train"
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# split="):
                split = line[len("# split="):].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        try:
            tokens = tuple(int(t) for t in parts[2].split())
            rec = ManifestRecord(parts[0], parts[1], tokens, int(parts[3]), int(parts[4]), int(parts[5]))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        idx = len(records)
        if not tokens:
            raise ManifestError(f"{path}:{lineno}: record {idx} has an empty query")
        try:
            rec.annotation.validate(rec.T)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: record {idx}: {exc}") from None
        if check_files:
            fpath = path.parent / rec.path
            if not fpath.is_file():
                raise ManifestError(f"{path}:{lineno}: record {idx}: missing feature file {fpath}")
            T, _ = read_feature_header(fpath)
            if T != rec.T:
                raise ManifestError(f"{path}:{lineno}: record {idx}: file has T={T}, manifest says {rec.T}")
        records.append(rec)
    if not records:
        warnings.warn(f"{path}: manifest has no records", stacklevel=2)
    return DatasetManifest(records, split, path.parent)


def split_counts(n, fracs):
    fracs = np.asarray(fracs, dtype=float)
    if np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise DataConfigError("split_fracs", f"must be nonnegative and sum to 1, got {tuple(fracs)}")
    raw = fracs * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:n - counts.sum()]] += 1
    return [int(c) for c in counts]


SPLITS = ("train", "val", "test")


def generate_dataset(cfg, n_samples, out_dir, split_fracs=(0.8, 0.1, 0.1)):
    """Write ``n_samples`` feature files plus one manifest per split.

    Returns a dict mapping split name to :class:`DatasetManifest`.
    """
    cfg.validate()
    counts = split_counts(n_samples, split_fracs)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    bank = prototype_bank(cfg)
    manifests = {}
    idx = 0
    for split, count in zip(SPLITS, counts):
        records = []
        for _ in range(count):
            rng = np.random.default_rng([cfg.seed, 1, idx])
            fs, query, ann, _ = generate_synthetic_pair(cfg, rng, bank)
            sid = f"s{idx:05d}"
            rel = f"features/{sid}.feat"
            write_features(out_dir / rel, fs)
            records.append(ManifestRecord(sid, rel, query.tokens, ann.tau_s, ann.tau_e, fs.T))
            idx += 1
        manifest = DatasetManifest(records, split, out_dir)
        write_manifest(out_dir / f"{split}.tsv", manifest)
        manifests[split] = manifest
    log.info("wrote %d samples to %s (%s)", n_samples, out_dir, counts)
    return manifests

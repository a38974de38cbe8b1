"""Synthetic class-structured video-text corpora and their JSONL file format.

Each semantic class owns one video feature prototype and one caption
template; samples within a class perturb both by an amount controlled by
``intra_class_noise``, so cross-instance semantic sharing exists by
construction and is measurable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PAD = 0
BOS = 1
EOS = 2
UNK = 3
NUM_SPECIAL_TOKENS = 4

CORPUS_FORMAT_VERSION = 1

# fraction of template tokens resampled per unit of intra_class_noise;
# kept well below 0.5 so captions stay class-informative at high noise
_CAPTION_FLIP_RATE = 0.2


class CorpusConfigError(ValueError):
    """A corpus spec violates its invariants."""


class CorpusFormatError(ValueError):
    """A corpus file is malformed or inconsistent with its header."""


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of a synthetic paired corpus."""

    num_classes: int
    samples_per_class: int
    video_len: int = 8
    caption_len_max: int = 12
    feature_dim: int = 32
    vocab_size: int = 64
    intra_class_noise: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("num_classes", "samples_per_class", "video_len",
                     "caption_len_max", "feature_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise CorpusConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < NUM_SPECIAL_TOKENS:
            raise CorpusConfigError(
                f"vocab_size must be >= {NUM_SPECIAL_TOKENS} to reserve special tokens, "
                f"got {self.vocab_size}")
        if self.caption_len_max < 2:
            raise CorpusConfigError("caption_len_max must be >= 2 (BOS and EOS)")
        if not np.isfinite(self.intra_class_noise) or self.intra_class_noise < 0:
            raise CorpusConfigError(
                f"intra_class_noise must be a non-negative scalar, got {self.intra_class_noise!r}")

    @property
    def total_samples(self):
        return self.num_classes * self.samples_per_class

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "samples_per_class": self.samples_per_class,
            "video_len": self.video_len,
            "caption_len_max": self.caption_len_max,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "intra_class_noise": self.intra_class_noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise CorpusConfigError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CorpusHeader:
    """First record of a corpus file; fixes all dimensions."""

    feature_dim: int
    video_len: int
    caption_len_max: int
    vocab_size: int
    num_classes: int
    version: int = CORPUS_FORMAT_VERSION

    def to_dict(self):
        return {
            "version": self.version,
            "feature_dim": self.feature_dim,
            "video_len": self.video_len,
            "caption_len_max": self.caption_len_max,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
        }


@dataclass(eq=False)
class CorpusSample:
    """One paired instance: video feature sequence plus caption token sequence."""

    id: str
    class_id: int
    video_features: np.ndarray  # (video_len, feature_dim) float64
    caption_tokens: list[int]   # length caption_len_max, PAD-padded past true_len
    caption_true_len: int

    def __eq__(self, other):
        if not isinstance(other, CorpusSample):
            return NotImplemented
        return (self.id == other.id
                and self.class_id == other.class_id
                and self.caption_tokens == other.caption_tokens
                and self.caption_true_len == other.caption_true_len
                and np.array_equal(self.video_features, other.video_features))


@dataclass
class Corpus:
    header: CorpusHeader
    samples: list[CorpusSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.header == other.header and self.samples == other.samples


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically generate a corpus from a spec.

    Same-class samples share a feature prototype (plus Gaussian noise scaled
    by ``intra_class_noise``) and a caption template (with a bounded fraction
    of non-special tokens resampled). The RNG stream is consumed identically
    for every noise level, so intra-class feature distances scale exactly
    linearly with the noise parameter for a fixed seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    flip_prob = min(1.0, spec.intra_class_noise) * _CAPTION_FLIP_RATE
    max_content = spec.caption_len_max - 2
    has_content = max_content > 0 and spec.vocab_size > NUM_SPECIAL_TOKENS

    samples = []
    for c in range(spec.num_classes):
        prototype = rng.normal(size=(spec.video_len, spec.feature_dim))
        if has_content:
            length = int(rng.integers(max(1, (max_content + 1) // 2), max_content + 1))
            template = rng.integers(NUM_SPECIAL_TOKENS, spec.vocab_size, size=length)
        else:
            template = np.empty(0, dtype=np.int64)
        for k in range(spec.samples_per_class):
            features = prototype + spec.intra_class_noise * rng.normal(size=prototype.shape)
            tokens = template.copy()
            if len(tokens):
                # draws are made unconditionally to keep the stream aligned across noise levels
                flips = rng.random(len(tokens)) < flip_prob
                replacements = rng.integers(NUM_SPECIAL_TOKENS, spec.vocab_size, size=len(tokens))
                tokens = np.where(flips, replacements, tokens)
            caption = [BOS, *(int(t) for t in tokens), EOS]
            true_len = len(caption)
            caption += [PAD] * (spec.caption_len_max - true_len)
            samples.append(CorpusSample(
                id=f"c{c:04d}s{k:04d}",
                class_id=c,
                video_features=features,
                caption_tokens=caption,
                caption_true_len=true_len,
            ))
    header = CorpusHeader(
        feature_dim=spec.feature_dim,
        video_len=spec.video_len,
        caption_len_max=spec.caption_len_max,
        vocab_size=spec.vocab_size,
        num_classes=spec.num_classes,
    )
    return Corpus(header=header, samples=samples)


def _dumps(obj):
    # compact separators and fixed key order keep files byte-stable
    return json.dumps(obj, separators=(",", ":"))


def write_corpus(corpus: Corpus, path):
    """Write a corpus as JSON Lines: header object first, one sample per line."""
    header = corpus.header
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps(header.to_dict()) + "\n")
        for s in corpus.samples:
            record = {
                "id": s.id,
                "class_id": s.class_id,
                "video_features": s.video_features.reshape(-1).tolist(),
                "caption_tokens": list(s.caption_tokens),
                "caption_true_len": s.caption_true_len,
            }
            f.write(_dumps(record) + "\n")


def _require(record, key, lineno, kind):
    if key not in record:
        raise CorpusFormatError(f"line {lineno}: missing field '{key}'")
    value = record[key]
    if kind is int and not isinstance(value, int):
        raise CorpusFormatError(f"line {lineno}: field '{key}' must be an integer")
    if kind is list and not isinstance(value, list):
        raise CorpusFormatError(f"line {lineno}: field '{key}' must be an array")
    if kind is str and not isinstance(value, str):
        raise CorpusFormatError(f"line {lineno}: field '{key}' must be a string")
    return value


def read_corpus(path) -> Corpus:
    """Read a corpus file, validating every record against the header."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorpusFormatError("line 1: empty file, expected header record")
    try:
        raw_header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"line 1: header is not valid JSON: {e}") from e
    if not isinstance(raw_header, dict):
        raise CorpusFormatError("line 1: header must be a JSON object")
    version = _require(raw_header, "version", 1, int)
    if version != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(
            f"line 1: unsupported corpus format version {version}, "
            f"expected {CORPUS_FORMAT_VERSION}")
    header = CorpusHeader(
        feature_dim=_require(raw_header, "feature_dim", 1, int),
        video_len=_require(raw_header, "video_len", 1, int),
        caption_len_max=_require(raw_header, "caption_len_max", 1, int),
        vocab_size=_require(raw_header, "vocab_size", 1, int),
        num_classes=_require(raw_header, "num_classes", 1, int),
    )

    samples = []
    expected_feat = header.video_len * header.feature_dim
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"line {lineno}: record is not valid JSON: {e}") from e
        sid = _require(record, "id", lineno, str)
        class_id = _require(record, "class_id", lineno, int)
        flat = _require(record, "video_features", lineno, list)
        tokens = _require(record, "caption_tokens", lineno, list)
        true_len = _require(record, "caption_true_len", lineno, int)

        if len(flat) != expected_feat:
            raise CorpusFormatError(
                f"line {lineno}: field 'video_features' has {len(flat)} values, "
                f"header requires {expected_feat}")
        features = np.asarray(flat, dtype=np.float64).reshape(
            header.video_len, header.feature_dim)
        if not np.isfinite(features).all():
            raise CorpusFormatError(
                f"line {lineno}: field 'video_features' contains non-finite values")
        if len(tokens) > header.caption_len_max:
            raise CorpusFormatError(
                f"line {lineno}: field 'caption_tokens' longer than header caption_len_max")
        for t in tokens:
            if not isinstance(t, int) or not (0 <= t < header.vocab_size):
                raise CorpusFormatError(
                    f"line {lineno}: field 'caption_tokens' has invalid token id {t!r} "
                    f"(vocab_size {header.vocab_size})")
        if not (2 <= true_len <= len(tokens)):
            raise CorpusFormatError(
                f"line {lineno}: field 'caption_true_len' out of range ({true_len})")
        if tokens[0] != BOS:
            raise CorpusFormatError(f"line {lineno}: field 'caption_tokens' must start with BOS")
        if tokens[true_len - 1] != EOS:
            raise CorpusFormatError(
                f"line {lineno}: field 'caption_tokens' must have EOS at caption_true_len-1")
        if any(t != PAD for t in tokens[true_len:]):
            raise CorpusFormatError(
                f"line {lineno}: field 'caption_tokens' must be PAD past caption_true_len")
        if not (0 <= class_id < header.num_classes):
            raise CorpusFormatError(
                f"line {lineno}: field 'class_id' out of range ({class_id})")
        samples.append(CorpusSample(
            id=sid, class_id=class_id, video_features=features,
            caption_tokens=tokens, caption_true_len=true_len))
    return Corpus(header=header, samples=samples)

"""Synthetic corpora and their on-disk formats.

The in-domain generative story: every content token owns a fixed random
motif of `motif_frames` feature frames; an utterance is the concatenation of
its reference tokens' motifs plus i.i.d. Gaussian noise.

Out-of-domain utterances are the domain-shift analog: their motif bank is
disjoint from the in-domain one (in-domain motifs reassigned by a fixed
permutation, perturbed by fresh Gaussian structure, and shifted by a
constant bias), they are normally paired with a heavier noise level, and
their token sequences can be made repetition-heavy via `repeat_prob` (the
analog of hesitation-laden spontaneous speech versus read text). Keeping the
out-of-domain frames near the in-domain manifold matters: inputs that are
pure noise make a trained recognizer reject with an early end-of-sequence
instead of exhibiting the runaway repetition this package studies.

On disk a corpus is a JSON-lines manifest plus one little-endian float32
feature file per utterance (16-byte header: 8-byte magic, uint32 T, uint32 d).
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from echotrap.errors import ConfigurationError, DataError, ManifestParseError
from echotrap.util import substream
from echotrap.vocab import TokenVocab, build_vocab

FEATURE_MAGIC = b"ECHOFEAT"
IN_DOMAIN = "in_domain"
OUT_OF_DOMAIN = "out_of_domain"


@dataclass(frozen=True)
class FeatureSequence:
    """A (T, d) float32 frame matrix with its frame period, the decoder input."""

    frames: np.ndarray
    frame_period_ms: float
    utterance_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty 2-d matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if not self.frame_period_ms > 0:
            raise ValueError(f"frame period must be positive, got {self.frame_period_ms}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n_frames * self.frame_period_ms / 1000.0


@dataclass(frozen=True)
class Utterance:
    features: FeatureSequence
    reference_tokens: tuple[int, ...]
    reference_text: str

    @property
    def utterance_id(self) -> str:
        return self.features.utterance_id


@dataclass(frozen=True)
class CorpusSpec:
    """Everything needed to synthesize a corpus deterministically."""

    n_utterances: int
    duration_range: tuple[float, float] = (0.16, 0.48)
    vocab_size: int = 32
    domain: str = IN_DOMAIN
    noise_level: float = 0.05
    seed: int = 0
    feature_dim: int = 8
    motif_frames: int = 4
    frame_period_ms: float = 10.0
    repeat_prob: float = 0.0
    ood_bias: float = 0.4
    ood_perturbation: float = 0.6

    def validate(self):
        if self.n_utterances < 1:
            raise ConfigurationError(f"n_utterances must be positive, got {self.n_utterances}")
        lo, hi = self.duration_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"invalid duration range {self.duration_range}")
        if self.vocab_size < 3:
            raise ConfigurationError("vocabulary needs BOS, EOS and at least one content token")
        if self.noise_level < 0:
            raise ConfigurationError(f"noise level must be nonnegative, got {self.noise_level}")
        if self.feature_dim < 1 or self.motif_frames < 1:
            raise ConfigurationError("feature_dim and motif_frames must be positive")
        if self.frame_period_ms <= 0:
            raise ConfigurationError("frame period must be positive")
        if not 0.0 <= self.repeat_prob <= 1.0:
            raise ConfigurationError(f"repeat_prob must be in [0, 1], got {self.repeat_prob}")
        if self.ood_perturbation < 0:
            raise ConfigurationError("ood_perturbation must be nonnegative")
        if self.domain not in (IN_DOMAIN, OUT_OF_DOMAIN):
            raise ConfigurationError(f"unknown domain {self.domain!r}")

    def token_count_bounds(self) -> tuple[int, int]:
        """Inclusive range of reference lengths that fit the duration range."""
        span_s = self.motif_frames * self.frame_period_ms / 1000.0
        lo, hi = self.duration_range
        n_min = max(1, math.ceil(lo / span_s - 1e-9))
        n_max = math.floor(hi / span_s + 1e-9)
        if n_max < n_min:
            raise ConfigurationError(
                f"duration range {self.duration_range} cannot fit a whole number of "
                f"{span_s:.3f}s tokens"
            )
        return n_min, n_max


def token_motifs(spec: CorpusSpec) -> np.ndarray:
    """(V, motif_frames, feature_dim) motif bank for the spec's domain.

    BOS/EOS rows are zero. The out-of-domain bank reassigns the in-domain
    motifs through a fixed random permutation, adds fresh Gaussian structure
    scaled by `ood_perturbation`, and shifts every frame by `ood_bias`; it
    shares no motif with the in-domain bank but stays near its manifold.
    """
    spec.validate()
    n_content = spec.vocab_size - 2
    shape = (n_content, spec.motif_frames, spec.feature_dim)
    base = substream(spec.seed, "motifs:in").standard_normal(shape)
    motifs = np.zeros((spec.vocab_size, spec.motif_frames, spec.feature_dim))
    if spec.domain == IN_DOMAIN:
        motifs[2:] = base
    else:
        perm = substream(spec.seed, "motifs:perm").permutation(n_content)
        fresh = substream(spec.seed, "motifs:ood").standard_normal(shape)
        motifs[2:] = base[perm] + spec.ood_perturbation * fresh + spec.ood_bias
    return motifs.astype(np.float32)


def _draw_tokens(rng, n_tokens: int, vocab_size: int, repeat_prob: float) -> list[int]:
    """Sticky token draw: repeat the previous token with prob repeat_prob."""
    tokens = [int(rng.integers(2, vocab_size))]
    while len(tokens) < n_tokens:
        if rng.random() < repeat_prob:
            tokens.append(tokens[-1])
        else:
            tokens.append(int(rng.integers(2, vocab_size)))
    return tokens


def generate_corpus(spec: CorpusSpec, vocab: TokenVocab | None = None) -> list[Utterance]:
    """Deterministic synthetic corpus; a pure function of the spec."""
    spec.validate()
    if vocab is None:
        vocab = build_vocab(spec.vocab_size)
    n_min, n_max = spec.token_count_bounds()
    motifs = token_motifs(spec).astype(np.float64)
    rng = substream(spec.seed, f"corpus:{spec.domain}")
    prefix = "in" if spec.domain == IN_DOMAIN else "ood"
    utterances = []
    for i in range(spec.n_utterances):
        n_tokens = int(rng.integers(n_min, n_max + 1))
        tokens = _draw_tokens(rng, n_tokens, spec.vocab_size, spec.repeat_prob)
        frames = motifs[tokens].reshape(-1, spec.feature_dim)
        if spec.noise_level > 0:
            frames = frames + spec.noise_level * rng.standard_normal(frames.shape)
        features = FeatureSequence(
            frames=frames.astype(np.float32),
            frame_period_ms=spec.frame_period_ms,
            utterance_id=f"{prefix}-{spec.seed}-{i:05d}",
        )
        tokens = tuple(tokens)
        utterances.append(
            Utterance(
                features=features,
                reference_tokens=tokens,
                reference_text=vocab.detokenize(tokens),
            )
        )
    return utterances


def stack_frames(features: FeatureSequence, stack: int) -> FeatureSequence:
    """Concatenate `stack` consecutive frames (zero-padding the last group).

    Output has ceil(T / stack) frames of dimension stack * d and the frame
    period multiplied by stack, so total duration is preserved up to the
    padding of the final group.
    """
    if stack < 1:
        raise ConfigurationError(f"stack must be a positive integer, got {stack}")
    if stack == 1:
        return features
    n_frames, dim = features.frames.shape
    n_out = -(-n_frames // stack)
    padded = np.zeros((n_out * stack, dim), dtype=np.float32)
    padded[:n_frames] = features.frames
    return FeatureSequence(
        frames=padded.reshape(n_out, stack * dim),
        frame_period_ms=features.frame_period_ms * stack,
        utterance_id=features.utterance_id,
    )


def write_features(features: FeatureSequence, path) -> None:
    path = Path(path)
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<II", frames.shape[0], frames.shape[1])
    path.write_bytes(header + frames.tobytes())


def read_features(path, frame_period_ms: float, utterance_id: str) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file for {utterance_id}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != FEATURE_MAGIC:
        raise DataError(f"feature file for {utterance_id} has a bad header: {path}")
    n_frames, dim = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    expected = n_frames * dim * 4
    if len(body) != expected:
        raise DataError(
            f"feature file for {utterance_id} is truncated: "
            f"expected {expected} payload bytes, found {len(body)}"
        )
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, dim)
    return FeatureSequence(
        frames=frames.copy(),
        frame_period_ms=frame_period_ms,
        utterance_id=utterance_id,
    )


def features_to_csv(features: FeatureSequence, path) -> None:
    """Plain-text export of a feature matrix for manual inspection."""
    with open(path, "w") as fh:
        for row in features.frames:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def write_manifest(corpus, manifest_path, feature_dir_name: str = "features") -> Path:
    """Write a JSON-lines manifest plus one binary feature file per utterance.

    Feature paths in the manifest are relative to the manifest's directory,
    so a corpus directory can be moved wholesale.
    """
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    feature_dir = manifest_path.parent / feature_dir_name
    feature_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w") as fh:
        fh.write(json.dumps({"format": "echotrap-manifest", "version": 1}) + "\n")
        for utt in corpus:
            rel = f"{feature_dir_name}/{utt.utterance_id}.feat"
            write_features(utt.features, manifest_path.parent / rel)
            record = {
                "utterance_id": utt.utterance_id,
                "feature_path": rel,
                "duration_seconds": utt.features.duration_seconds,
                "frame_period_ms": utt.features.frame_period_ms,
                "reference_text": utt.reference_text,
                "reference_tokens": list(utt.reference_tokens),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    utterances = []
    with open(manifest_path) as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_number) from exc
            if line_number == 1 and record.get("format") == "echotrap-manifest":
                continue
            try:
                features = read_features(
                    manifest_path.parent / record["feature_path"],
                    frame_period_ms=record["frame_period_ms"],
                    utterance_id=record["utterance_id"],
                )
                utterances.append(
                    Utterance(
                        features=features,
                        reference_tokens=tuple(int(t) for t in record["reference_tokens"]),
                        reference_text=record["reference_text"],
                    )
                )
            except KeyError as exc:
                raise ManifestParseError(f"missing field {exc}", line_number) from exc
    return utterances


def split_corpus(corpus, sizes):
    """Split a corpus into consecutive chunks of the given sizes."""
    if sum(sizes) > len(corpus):
        raise ConfigurationError(
            f"cannot split {len(corpus)} utterances into chunks of {sizes}"
        )
    out, start = [], 0
    for size in sizes:
        out.append(corpus[start : start + size])
        start += size
    return out

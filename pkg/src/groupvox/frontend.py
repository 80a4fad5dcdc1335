"""Speech-input pathway: feature frames, k-frame stacking and the linear projector.

The synthetic extractor emits one deterministic ``feature_dim`` frame per
audio token and zero-pads to ``max_frames``, standing in for a real encoder.
Anything exposing ``extract(audio_tokens) -> FeatureSequence`` can replace it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .vocab import JointVocabulary

FEATURE_MAGIC = b"GVXF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # (N, d) float64
    rate_hz: float = 50.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise FrontendError("frames must be an N x d matrix")
        if not np.all(np.isfinite(frames)):
            raise FrontendError("frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.rate_hz


@dataclass(frozen=True)
class StackedFeatures:
    frames: np.ndarray  # (N // k, k * d)
    k: int


def stack_frames(features: FeatureSequence, k: int) -> StackedFeatures:
    """Concatenate every ``k`` consecutive frames; leftover frames are dropped."""
    if k < 1:
        raise FrontendError(f"stack factor must be >= 1, got {k}")
    n, d = features.frames.shape
    if n < k:
        raise FrontendError(f"need at least k={k} frames, got {n}")
    n_out = n // k
    # row-major reshape puts frames i*k .. i*k+k-1 side by side
    stacked = features.frames[: n_out * k].reshape(n_out, k * d).copy()
    return StackedFeatures(frames=stacked, k=k)


def project(stacked: StackedFeatures | np.ndarray, weight, bias=None) -> np.ndarray:
    """Apply the linear projector row-wise: ``x @ weight + bias``.

    ``weight`` has shape ``(k*d, model_dim)``.
    """
    x = stacked.frames if isinstance(stacked, StackedFeatures) else np.asarray(stacked, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise FrontendError(f"projector expects input width {w.shape[0]}, got {x.shape[-1]}")
    out = x @ w
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (w.shape[1],):
            raise FrontendError(f"bias shape {b.shape} does not match model dim {w.shape[1]}")
        out = out + b
    return out


class SyntheticFrontend:
    """Seeded per-audio-token frame table with zero padding to ``max_frames``."""

    def __init__(self, vocab: JointVocabulary, feature_dim: int = 8, max_frames: int = 60,
                 seed: int = 0, rate_hz: float = 50.0):
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.max_frames = max_frames
        self.seed = seed
        self.rate_hz = rate_hz
        rng = np.random.default_rng(seed + 7919)
        table = rng.standard_normal((vocab.audio_size, feature_dim))
        # a zero row would be indistinguishable from padding
        table[np.all(table == 0, axis=1)] = 1.0
        self.table = table

    def extract(self, audio_tokens) -> FeatureSequence:
        toks = np.asarray(list(audio_tokens), dtype=np.int64)
        if toks.size and (toks.min() < self.vocab.text_size or toks.max() >= self.vocab.joint_size):
            raise FrontendError("audio token out of range")
        if toks.size > self.max_frames:
            raise FrontendError(f"{toks.size} audio tokens exceed max_frames={self.max_frames}")
        frames = np.zeros((self.max_frames, self.feature_dim))
        frames[: toks.size] = self.table[toks - self.vocab.text_size]
        return FeatureSequence(frames, rate_hz=self.rate_hz)

    def invert(self, frames: np.ndarray) -> list[int]:
        """Map frames back to audio ids by exact table lookup, stopping at padding."""
        lookup = {row.tobytes(): i + self.vocab.text_size for i, row in enumerate(self.table)}
        out = []
        for row in np.asarray(frames, dtype=np.float64):
            if not row.any():
                break
            out.append(lookup[row.tobytes()])
        return out


def synth_features(user_audio_tokens, frontend: SyntheticFrontend) -> FeatureSequence:
    return frontend.extract(user_audio_tokens)


def write_features(path, features: FeatureSequence) -> None:
    n, d = features.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, float(features.rate_hz)))
        fh.write(features.frames.astype("<f8").tobytes(order="C"))


def read_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FrontendError("feature file truncated")
    magic, version, n, d, rate = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FrontendError("bad feature file magic")
    if version != FEATURE_VERSION:
        raise FrontendError(f"unsupported feature file version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * d:
        raise FrontendError("feature file body length does not match header")
    frames = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    return FeatureSequence(frames, rate_hz=rate)

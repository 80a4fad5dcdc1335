"""Joint text/audio vocabulary, audio grouping and the toy text->audio codec.

Text ids live in ``[0, text_size)`` and audio ids in
``[text_size, text_size + audio_size)``. Special tokens sit at the start of
each range so that content ids are contiguous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

TEXT_SPECIALS = ("TEXT_PAD", "TEXT_EOS", "SYS", "HIST", "INPUT", "ANSWER")
AUDIO_SPECIALS = ("AUDIO_PAD", "AUDIO_EOA")


class VocabError(ValueError):
    """Invalid argument or malformed input for vocabulary/codec operations."""


@dataclass(frozen=True)
class JointVocabulary:
    text_size: int = 64
    audio_size: int = 256

    def __post_init__(self):
        if self.text_size <= len(TEXT_SPECIALS):
            raise VocabError(f"text_size must exceed {len(TEXT_SPECIALS)}")
        if self.audio_size <= len(AUDIO_SPECIALS):
            raise VocabError(f"audio_size must exceed {len(AUDIO_SPECIALS)}")

    @property
    def joint_size(self) -> int:
        return self.text_size + self.audio_size

    @property
    def specials(self) -> dict[str, int]:
        ids = {name: i for i, name in enumerate(TEXT_SPECIALS)}
        ids.update({name: self.text_size + i for i, name in enumerate(AUDIO_SPECIALS)})
        return ids

    # fixed ids, spelled out for readability at call sites
    @property
    def TEXT_PAD(self) -> int:
        return 0

    @property
    def TEXT_EOS(self) -> int:
        return 1

    @property
    def SYS(self) -> int:
        return 2

    @property
    def HIST(self) -> int:
        return 3

    @property
    def INPUT(self) -> int:
        return 4

    @property
    def ANSWER(self) -> int:
        return 5

    @property
    def AUDIO_PAD(self) -> int:
        return self.text_size

    @property
    def AUDIO_EOA(self) -> int:
        return self.text_size + 1

    @property
    def first_text_content(self) -> int:
        return len(TEXT_SPECIALS)

    @property
    def first_audio_content(self) -> int:
        return self.text_size + len(AUDIO_SPECIALS)

    def content_text_ids(self) -> range:
        return range(self.first_text_content, self.text_size)

    def content_audio_ids(self) -> range:
        return range(self.first_audio_content, self.joint_size)

    def is_text(self, token: int) -> bool:
        return 0 <= token < self.text_size

    def is_audio(self, token: int) -> bool:
        return self.text_size <= token < self.joint_size

    def classify(self, token: int) -> str:
        if self.is_text(token):
            return "text"
        if self.is_audio(token):
            return "audio"
        raise VocabError(f"token id {token} outside joint vocabulary of size {self.joint_size}")


@dataclass(frozen=True)
class GroupedAudio:
    groups: tuple[tuple[int, ...], ...]
    group_size: int
    original_length: int

    @property
    def num_groups(self) -> int:
        return len(self.groups)


def group(tokens, G: int, vocab: JointVocabulary | None = None, pad: int | None = None) -> GroupedAudio:
    """Split an audio-token sequence into consecutive groups of ``G``.

    The tail is padded with ``AUDIO_PAD`` rather than truncated, so that
    ``ungroup(group(x, G)) == x`` for every input.
    """
    if G < 1:
        raise VocabError(f"group size must be >= 1, got {G}")
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise VocabError("cannot group an empty token sequence")
    if pad is None:
        pad = (vocab or JointVocabulary()).AUDIO_PAD
    n_groups = math.ceil(len(tokens) / G)
    padded = tokens + [pad] * (n_groups * G - len(tokens))
    groups = tuple(tuple(padded[i * G:(i + 1) * G]) for i in range(n_groups))
    return GroupedAudio(groups=groups, group_size=G, original_length=len(tokens))


def ungroup(grouped: GroupedAudio) -> list[int]:
    G = grouped.group_size
    if G < 1 or any(len(g) != G for g in grouped.groups):
        raise VocabError("malformed GroupedAudio: groups must all have group_size entries")
    if not 0 <= grouped.original_length <= G * len(grouped.groups):
        raise VocabError(
            f"original_length {grouped.original_length} inconsistent with "
            f"{len(grouped.groups)} groups of {G}"
        )
    flat = [t for g in grouped.groups for t in g]
    return flat[:grouped.original_length]


@dataclass(frozen=True)
class CodecResult:
    """Output of :meth:`ToyCodec.decode`.

    ``unmatched`` counts audio tokens that could not be assigned to a table
    row; a nonzero value means part of the input was undecodable.
    """

    tokens: list[int]
    unmatched: int = 0

    @property
    def clean(self) -> bool:
        return self.unmatched == 0


@dataclass(frozen=True)
class ToyCodec:
    """Deterministic, injective text-token -> audio-token expansion.

    Every content text token maps to a fixed row of ``rate`` audio content
    ids drawn from a seeded generator. Colliding rows are resampled, so the
    table is injective and decoding is unambiguous.
    """

    vocab: JointVocabulary = field(default_factory=JointVocabulary)
    rate: int = 15
    seed: int = 0
    table: dict[int, tuple[int, ...]] = field(init=False, repr=False, compare=False)
    _inverse: dict[tuple[int, ...], int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.rate < 1:
            raise VocabError("codec rate must be >= 1")
        rng = np.random.default_rng(self.seed)
        lo, hi = self.vocab.first_audio_content, self.vocab.joint_size
        n_rows = len(self.vocab.content_text_ids())
        if (hi - lo) ** self.rate < n_rows:
            raise VocabError("audio codebook too small for an injective codec table")
        table: dict[int, tuple[int, ...]] = {}
        seen: set[tuple[int, ...]] = set()
        for t in self.vocab.content_text_ids():
            row = tuple(int(x) for x in rng.integers(lo, hi, size=self.rate))
            while row in seen:
                row = tuple(int(x) for x in rng.integers(lo, hi, size=self.rate))
            seen.add(row)
            table[t] = row
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "_inverse", {row: t for t, row in table.items()})

    def encode(self, text_tokens) -> list[int]:
        out: list[int] = []
        for t in text_tokens:
            t = int(t)
            if t not in self.table:
                raise VocabError(f"text token {t} is special or out of range; cannot encode")
            out.extend(self.table[t])
        return out

    def decode(self, audio_tokens) -> CodecResult:
        """Greedy left-to-right match of table rows.

        Trailing pad/EOA tokens are stripped first. When no row matches at the
        current position one token is skipped and matching resumes, so a
        corrupted block costs exactly one text token.
        """
        toks = [int(t) for t in audio_tokens]
        tail = (self.vocab.AUDIO_PAD, self.vocab.AUDIO_EOA)
        while toks and toks[-1] in tail:
            toks.pop()
        R = self.rate
        out: list[int] = []
        unmatched = 0
        i = 0
        while i < len(toks):
            hit = self._inverse.get(tuple(toks[i:i + R])) if i + R <= len(toks) else None
            if hit is None:
                unmatched += 1
                i += 1
            else:
                out.append(hit)
                i += R
        return CodecResult(out, unmatched)

    # JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return vocab_to_dict(self.vocab, codec_rate=self.rate, codec_seed=self.seed)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ToyCodec":
        return codec_from_dict(json.loads(Path(path).read_text()))


def toy_encode(text_tokens, codec: ToyCodec) -> list[int]:
    return codec.encode(text_tokens)


def toy_decode(audio_tokens, codec: ToyCodec) -> CodecResult:
    return codec.decode(audio_tokens)


def vocab_to_dict(vocab: JointVocabulary, codec_rate: int = 15, codec_seed: int = 0) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "text_size": vocab.text_size,
        "audio_size": vocab.audio_size,
        "specials": vocab.specials,
        "codec_rate": codec_rate,
        "codec_seed": codec_seed,
    }


def codec_from_dict(d: dict) -> ToyCodec:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise VocabError(f"unsupported vocabulary schema version {d.get('schema_version')!r}")
    vocab = JointVocabulary(text_size=int(d["text_size"]), audio_size=int(d["audio_size"]))
    if d.get("specials", vocab.specials) != vocab.specials:
        raise VocabError("special token ids in file do not match the fixed layout")
    return ToyCodec(vocab=vocab, rate=int(d["codec_rate"]), seed=int(d["codec_seed"]))

"""Synthetic dialogue corpora, train/validation split and batch collation.

Records hold text tokens only; audio is derived with the toy codec whenever
a batch is built.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .frontend import SyntheticFrontend, stack_frames
from .model import DTYPE, ModelConfig
from .template import DEFAULT_SYSTEM, prompt_layout
from .vocab import JointVocabulary, ToyCodec, group

log = logging.getLogger(__name__)

CORPUS_SCHEMA = 1
TASKS = ("echo", "transform", "multi-turn-carry")
MODES = ("s2s", "asr", "tts")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Turn:
    user: tuple[int, ...]
    assistant: tuple[int, ...]


@dataclass(frozen=True)
class DialogueRecord:
    id: str
    task: str
    turns: tuple[Turn, ...]

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": CORPUS_SCHEMA,
            "id": self.id,
            "task": self.task,
            "turns": [{"user": list(t.user), "assistant": list(t.assistant)} for t in self.turns],
        })

    @classmethod
    def from_json(cls, line: str) -> "DialogueRecord":
        d = json.loads(line)
        if d.get("schema_version") != CORPUS_SCHEMA:
            raise DataError(f"unsupported corpus schema {d.get('schema_version')!r}")
        turns = tuple(Turn(tuple(t["user"]), tuple(t["assistant"])) for t in d["turns"])
        return cls(d["id"], d["task"], turns)


def gen_corpus(n_records: int, mix: dict[str, float], vocab: JointVocabulary, seed: int = 0,
               min_len: int = 1, max_len: int = 4) -> list[DialogueRecord]:
    """Generate ``n_records`` dialogues with task families drawn from ``mix``.

    echo: answer repeats the user tokens. transform: answer is the user
    tokens reversed. multi-turn-carry: two rounds, and the second answer
    starts with the first token the user said in round one, followed by an
    echo of the second question.
    """
    unknown = set(mix) - set(TASKS)
    if unknown:
        raise DataError(f"unknown task families {sorted(unknown)}")
    probs = np.array([mix.get(t, 0.0) for t in TASKS], dtype=np.float64)
    if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"task mix must be non-negative and sum to 1, got {mix}")
    if not 1 <= min_len <= max_len:
        raise DataError("need 1 <= min_len <= max_len")
    if "multi-turn-carry" in mix and mix["multi-turn-carry"] > 0 and max_len < 2:
        raise DataError("multi-turn-carry needs max_len >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = vocab.first_text_content, vocab.text_size

    def utter(a, b):
        return tuple(int(x) for x in rng.integers(lo, hi, size=int(rng.integers(a, b + 1))))

    records = []
    for i in range(n_records):
        task = TASKS[int(rng.choice(len(TASKS), p=probs))]
        if task == "echo":
            u = utter(min_len, max_len)
            turns = (Turn(u, u),)
        elif task == "transform":
            u = utter(min_len, max_len)
            turns = (Turn(u, u[::-1]),)
        else:
            u1 = utter(min_len, max_len)
            u2 = utter(min_len, max(min_len, max_len - 1))[: max_len - 1]
            turns = (Turn(u1, u1), Turn(u2, (u1[0],) + u2))
        records.append(DialogueRecord(f"r{i:06d}", task, turns))
    return records


def corpus_stats(records: Sequence[DialogueRecord]) -> dict:
    turns = [len(r.turns) for r in records]
    answers = [len(t.assistant) for r in records for t in r.turns]
    tasks = {t: sum(r.task == t for r in records) for t in TASKS}
    return {
        "records": len(records),
        "mean_turns": float(np.mean(turns)) if turns else 0.0,
        "mean_answer_len": float(np.mean(answers)) if answers else 0.0,
        "tasks": tasks,
    }


def write_corpus(path, records: Iterable[DialogueRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_corpus(path) -> list[DialogueRecord]:
    return [DialogueRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def split(records: Sequence[DialogueRecord], val_fraction: float = 0.01, seed: int = 0):
    """Deterministic disjoint split; returns ``(train, val)`` in original order."""
    if not 0 < val_fraction < 1:
        raise DataError("val_fraction must be in (0, 1)")
    n = len(records)
    n_val = max(1, round(n * val_fraction))
    if n - n_val < 1:
        raise DataError(f"{n} records are too few for a non-empty train/validation split")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


# collation ----------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One training example: a single round with its textual history."""

    id: str
    history: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    user: tuple[int, ...]
    answer: tuple[int, ...]


def expand(records: Iterable[DialogueRecord | Sample]) -> list[Sample]:
    out = []
    for r in records:
        if isinstance(r, Sample):
            out.append(r)
            continue
        hist = []
        for k, t in enumerate(r.turns):
            out.append(Sample(f"{r.id}/{k}", tuple(hist), t.user, t.assistant))
            hist.append((t.user, t.assistant))
    return out


@dataclass
class Encoded:
    kind: np.ndarray       # (S,)
    text: np.ndarray       # (S,)
    audio: np.ndarray      # (S, G) joint ids
    feats: np.ndarray      # (S, F)
    text_tgt: np.ndarray   # (S,)
    text_mask: np.ndarray  # (S,)
    audio_tgt: np.ndarray  # (S, G) ids relative to the audio range
    audio_mask: np.ndarray # (S, G)
    prompt_len: int
    text_len: int          # answer + EOS
    audio_len: int         # audio tokens + EOA
    groups: int            # T'


@dataclass
class Batch:
    kind: torch.Tensor
    text: torch.Tensor
    audio: torch.Tensor
    feats: torch.Tensor
    text_tgt: torch.Tensor
    text_mask: torch.Tensor
    audio_tgt: torch.Tensor
    audio_mask: torch.Tensor
    prompt_len: list[int]
    text_len: list[int]
    audio_len: list[int]
    groups: list[int]
    ids: list[str] = field(default_factory=list)
    mode: str = "s2s"

    def __len__(self):
        return self.kind.shape[0]


class Collator:
    """Turns samples into padded tensors following the prompt template.

    Targets at position ``prompt_len - 1 + i`` are text token ``i`` (answer,
    then EOS, then unmasked pads) and audio group ``i``.
    """

    def __init__(self, cfg: ModelConfig, system: Sequence[int] = DEFAULT_SYSTEM,
                 mode: str = "s2s", on_overflow: str = "error"):
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.vocab = cfg.vocab
        self.codec = ToyCodec(cfg.vocab, rate=cfg.codec_rate, seed=cfg.codec_seed)
        self.frontend = SyntheticFrontend(cfg.vocab, cfg.feature_dim, cfg.max_frames, cfg.frontend_seed)
        self.system = tuple(system)
        self.mode = mode
        self.on_overflow = on_overflow
        self._memo: dict[Sample, Encoded] = {}

    def speech(self, user_text) -> np.ndarray:
        feats = self.frontend.extract(self.codec.encode(user_text))
        return stack_frames(feats, self.cfg.stack_k).frames

    def encode(self, s: Sample) -> Encoded | None:
        hit = self._memo.get(s)
        if hit is not None:
            return hit
        V, G, cfg = self.vocab, self.cfg.group_size, self.cfg
        answer = s.user if self.mode == "asr" else s.answer
        if self.mode == "tts":
            layout = prompt_layout(V, self.system, s.history, input_text=s.answer)
            speech = None
        else:
            speech = self.speech(s.user)
            layout = prompt_layout(V, self.system, s.history, n_speech=speech.shape[0])
        audio_seq = self.codec.encode(answer) + [V.AUDIO_EOA]
        grouped = group(audio_seq, G, V)
        Tp = grouped.num_groups
        text_seq = list(answer) + [V.TEXT_EOS]
        if len(text_seq) > Tp:
            raise DataError(f"sample {s.id}: text stream longer than audio groups")
        text_stream = text_seq + [V.TEXT_PAD] * (Tp - len(text_seq))
        P0 = len(layout)
        S = P0 + Tp - 1
        if S > cfg.max_positions:
            if self.on_overflow == "skip":
                log.warning("skipping sample %s: %d positions > %d", s.id, S, cfg.max_positions)
                return None
            raise DataError(f"sample {s.id} needs {S} positions > max_positions={cfg.max_positions}")

        kind = np.ones(S, dtype=np.int64)
        text = np.zeros(S, dtype=np.int64)
        audio = np.full((S, G), V.AUDIO_PAD, dtype=np.int64)
        feats = np.zeros((S, cfg.stacked_dim))
        j = 0
        for p, tok in enumerate(layout):
            if tok is None:
                kind[p] = 0
                feats[p] = speech[j]
                j += 1
            else:
                text[p] = tok
        for i in range(Tp - 1):
            kind[P0 + i] = 2
            text[P0 + i] = text_stream[i]
            audio[P0 + i] = grouped.groups[i]

        text_tgt = np.zeros(S, dtype=np.int64)
        text_mask = np.zeros(S)
        audio_tgt = np.zeros((S, G), dtype=np.int64)
        audio_mask = np.zeros((S, G))
        flat_mask = np.zeros(Tp * G)
        flat_mask[: len(audio_seq)] = 1.0
        for i in range(Tp):
            p = P0 - 1 + i
            text_tgt[p] = text_stream[i]
            text_mask[p] = 1.0 if i < len(text_seq) else 0.0
            audio_tgt[p] = np.asarray(grouped.groups[i]) - V.text_size
            audio_mask[p] = flat_mask[i * G:(i + 1) * G]
        if self.mode == "asr":
            audio_mask[:] = 0.0
        elif self.mode == "tts":
            text_mask[:] = 0.0
        enc = Encoded(kind, text, audio, feats, text_tgt, text_mask, audio_tgt, audio_mask,
                      P0, len(text_seq), len(audio_seq), Tp)
        self._memo[s] = enc
        return enc

    def __call__(self, items) -> Batch:
        samples = expand(items)
        encs, ids = [], []
        for s in samples:
            e = self.encode(s)
            if e is not None:
                encs.append(e)
                ids.append(s.id)
        if not encs:
            raise DataError("no samples left to collate")
        B = len(encs)
        S = max(len(e.kind) for e in encs)
        G, F = self.cfg.group_size, self.cfg.stacked_dim
        V = self.vocab

        kind = np.ones((B, S), dtype=np.int64)
        text = np.full((B, S), V.TEXT_PAD, dtype=np.int64)
        audio = np.full((B, S, G), V.AUDIO_PAD, dtype=np.int64)
        feats = np.zeros((B, S, F))
        text_tgt = np.zeros((B, S), dtype=np.int64)
        text_mask = np.zeros((B, S))
        audio_tgt = np.zeros((B, S, G), dtype=np.int64)
        audio_mask = np.zeros((B, S, G))
        for b, e in enumerate(encs):
            n = len(e.kind)
            kind[b, :n] = e.kind
            text[b, :n] = e.text
            audio[b, :n] = e.audio
            feats[b, :n] = e.feats
            text_tgt[b, :n] = e.text_tgt
            text_mask[b, :n] = e.text_mask
            audio_tgt[b, :n] = e.audio_tgt
            audio_mask[b, :n] = e.audio_mask
        t = torch.from_numpy
        return Batch(
            kind=t(kind), text=t(text), audio=t(audio), feats=t(feats).to(DTYPE),
            text_tgt=t(text_tgt), text_mask=t(text_mask).to(DTYPE),
            audio_tgt=t(audio_tgt), audio_mask=t(audio_mask).to(DTYPE),
            prompt_len=[e.prompt_len for e in encs], text_len=[e.text_len for e in encs],
            audio_len=[e.audio_len for e in encs], groups=[e.groups for e in encs],
            ids=ids, mode=self.mode,
        )

    def decollate(self, batch: Batch) -> list[Sample]:
        """Recover the token content of every sample in an s2s batch."""
        V = self.vocab
        out = []
        for b in range(len(batch)):
            P0, Tp = batch.prompt_len[b], batch.groups[b]
            prompt = batch.text[b, :P0].tolist()
            kinds = batch.kind[b, :P0].tolist()
            frames = batch.feats[b, :P0][batch.kind[b, :P0] == 0].numpy()
            flat = frames.reshape(-1, self.cfg.feature_dim)
            user = tuple(self.codec.decode(self.frontend.invert(flat)).tokens)
            # history: tokens between SYS+system and INPUT
            hist_toks = [tok for tok, k in zip(prompt, kinds) if k == 1]
            hist_toks = hist_toks[1 + len(self.system): hist_toks.index(V.INPUT)]
            history = _parse_history(hist_toks, V)
            rows = range(P0 - 1, P0 - 1 + Tp)
            tt = batch.text_tgt[b, list(rows)].tolist()
            answer = tuple(tt[: tt.index(V.TEXT_EOS)])
            flat_audio = (batch.audio_tgt[b, list(rows)] + V.text_size).reshape(-1).tolist()
            audio = flat_audio[: flat_audio.index(V.AUDIO_EOA)]
            if self.codec.encode(answer) != audio:
                raise DataError(f"sample {batch.ids[b]}: audio targets do not match text")
            out.append(Sample(batch.ids[b], history, user, answer))
        return out


def _parse_history(tokens: list[int], V: JointVocabulary):
    rounds = []
    i = 0
    while i < len(tokens):
        if tokens[i] != V.HIST:
            raise DataError("malformed history region")
        e1 = tokens.index(V.TEXT_EOS, i + 1)
        e2 = tokens.index(V.TEXT_EOS, e1 + 1)
        rounds.append((tuple(tokens[i + 1:e1]), tuple(tokens[e1 + 1:e2])))
        i = e2 + 1
    return tuple(rounds)

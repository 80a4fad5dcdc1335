"""Multi-round dialogue with text-only history and prefix key/value reuse.

Completed rounds are stored as text (the user's transcription and the
assistant's text stream). The system prompt plus that history forms a prefix
that is identical from one round to the next, so its cache entries are kept
and only the new history block, the speech input and the answer are computed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .decoding import DecodeConfig, TokenStreamPair, decode
from .frontend import SyntheticFrontend, stack_frames
from .model import CapacityError, GroupLM, KVCache, PromptText, SpeechFeature, StepInput
from .template import DEFAULT_SYSTEM, prefix_layout, prompt_layout
from .vocab import ToyCodec


class TurnRejected(ValueError):
    pass


@dataclass
class TurnResult:
    round: int
    user_text: list[int]
    reply: TokenStreamPair
    reuse_len: int
    prompt_len: int

    def transcript(self) -> dict:
        return {"round": self.round, "user_text": self.user_text,
                "assistant_text": self.reply.text, "reuse_len": self.reuse_len,
                "steps": self.reply.steps}


def _key(inp: StepInput):
    if isinstance(inp, PromptText):
        return inp.token
    if isinstance(inp, SpeechFeature):
        return ("speech", np.asarray(inp.vector).tobytes())
    return ("step", inp.text, inp.audio)


@dataclass
class DialogueSession:
    model: GroupLM
    system: tuple[int, ...] = DEFAULT_SYSTEM
    decode_cfg: DecodeConfig = field(default_factory=DecodeConfig)
    use_cache: bool = True
    history: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    prefix_cache: KVCache | None = None
    prefix_tokens: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.model.cfg
        self.system = tuple(self.system)
        self.codec = ToyCodec(cfg.vocab, rate=cfg.codec_rate, seed=cfg.codec_seed)
        self.frontend = SyntheticFrontend(cfg.vocab, cfg.feature_dim, cfg.max_frames, cfg.frontend_seed)

    @property
    def round_index(self) -> int:
        return len(self.history)

    def set_system(self, system: Sequence[int]) -> None:
        self.system = tuple(system)
        self.invalidate()

    def invalidate(self) -> None:
        self.prefix_cache = None
        self.prefix_tokens = []

    # prompt assembly --------------------------------------------------------

    def speech_inputs(self, user_audio) -> list[SpeechFeature]:
        stacked = stack_frames(self.frontend.extract(user_audio), self.model.cfg.stack_k)
        return [SpeechFeature(v) for v in self.model.project_speech(stacked.frames)]

    def build_prompt(self, user_audio) -> list[StepInput]:
        speech = self.speech_inputs(user_audio)
        layout = prompt_layout(self.model.cfg.vocab, self.system, self.history, n_speech=len(speech))
        it = iter(speech)
        prompt = [next(it) if tok is None else PromptText(tok) for tok in layout]
        limit = self.model.cfg.max_positions
        if len(prompt) > limit:
            raise CapacityError(
                f"round {self.round_index}: prompt of {len(prompt)} positions exceeds max_positions={limit}")
        return prompt

    def history_region(self, prompt: Sequence[StepInput]) -> list[int]:
        """Token ids between the system prompt and ``[INPUT]``."""
        V = self.model.cfg.vocab
        start = 1 + len(self.system)
        toks = []
        for inp in prompt[start:]:
            if isinstance(inp, PromptText) and inp.token == V.INPUT:
                break
            toks.append(_key(inp))
        return toks

    def prefix_reuse_len(self, prompt: Sequence[StepInput]) -> int:
        if self.prefix_cache is None:
            return 0
        n = 0
        for a, b in zip(self.prefix_tokens, prompt):
            if a != _key(b):
                break
            n += 1
        return min(n, self.prefix_cache.cached_len, len(prompt) - 1)

    # turns -----------------------------------------------------------------

    def run_turn(self, user_audio) -> TurnResult:
        user_audio = list(user_audio)
        if not user_audio:
            raise TurnRejected("empty user input")
        heard = self.codec.decode(user_audio)
        if not heard.clean or not heard.tokens:
            raise TurnRejected(f"user audio undecodable ({heard.unmatched} unmatched tokens)")

        prompt = self.build_prompt(user_audio)
        reuse = self.prefix_reuse_len(prompt) if self.use_cache else 0
        cache = self.prefix_cache.truncate(reuse) if reuse else None
        reply = decode(prompt, self.model, self.decode_cfg, cache=cache, use_cache=self.use_cache)

        rnd = self.round_index
        self.history.append((tuple(heard.tokens), tuple(reply.text)))
        if self.use_cache:
            self._extend_prefix(cache)
        return TurnResult(rnd, list(heard.tokens), reply, reuse, len(prompt))

    def _extend_prefix(self, cache: KVCache | None) -> None:
        tokens = prefix_layout(self.model.cfg.vocab, self.system, self.history)
        have = 0 if cache is None else cache.cached_len
        todo = [PromptText(t) for t in tokens[have:]]
        if todo:
            with torch.no_grad():
                _, cache = self.model(todo, cache)
        self.prefix_cache = cache
        self.prefix_tokens = list(tokens)


def write_transcript(path, results: Sequence[TurnResult]) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.transcript()) + "\n")

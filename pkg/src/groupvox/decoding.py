"""Parallel greedy decoding, streaming packets and the toy vocoder."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .model import CapacityError, GroupLM, KVCache, ResponseStep, StepInput

WAVE_MAGIC = b"GVXW"
WAVE_VERSION = 1


@dataclass(frozen=True)
class DecodeConfig:
    repetition_penalty: float = 1.2
    max_response_steps: int = 64
    chunk_size: int = 30
    apply_penalty_to: str = "both"  # text | audio | both

    def __post_init__(self):
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.apply_penalty_to not in ("text", "audio", "both"):
            raise ValueError(f"unknown apply_penalty_to {self.apply_penalty_to!r}")


@dataclass
class TokenStreamPair:
    text: list[int] = field(default_factory=list)
    audio: list[int] = field(default_factory=list)  # joint ids, EOA excluded
    steps: int = 0
    truncated: bool = False


@dataclass(frozen=True)
class AudioPacket:
    tokens: tuple[int, ...]
    emitted_at_step: int
    packet_index: int

    def trace(self) -> dict:
        return {"packet_index": self.packet_index, "emitted_at_step": self.emitted_at_step,
                "n_tokens": len(self.tokens)}


class DecodeCapacityError(CapacityError):
    def __init__(self, msg, partial: TokenStreamPair):
        super().__init__(msg)
        self.partial = partial


def apply_repetition_penalty(logits: torch.Tensor, history: Sequence[int], gamma: float) -> torch.Tensor:
    """Divide positive / multiply non-positive logits of already-seen ids by ``gamma``."""
    out = logits.clone()
    if gamma == 1 or not history:
        return out
    idx = torch.as_tensor(sorted(set(int(h) for h in history)), dtype=torch.long)
    seen = out[..., idx]
    out[..., idx] = torch.where(seen > 0, seen / gamma, seen * gamma)
    return out


def first_packet_steps(chunk_size: int, G: int) -> int:
    if chunk_size < 1 or G < 1:
        raise ValueError("chunk_size and G must both be >= 1")
    return math.ceil(chunk_size / G)


@dataclass(frozen=True)
class _Step:
    index: int              # 1-based
    text: int | None        # emitted text token, None once text has ended
    audio: tuple[int, ...]  # joint ids, truncated at EOA
    eoa: bool


def _generate(model: GroupLM, prompt: Sequence[StepInput], cfg: DecodeConfig,
              cache: KVCache | None = None, use_cache: bool = True,
              pair: TokenStreamPair | None = None) -> Iterator[_Step]:
    V = model.cfg.vocab
    pair = pair if pair is not None else TokenStreamPair()
    if cfg.max_response_steps <= 0:
        pair.truncated = True
        return
    pen_text = cfg.apply_penalty_to in ("text", "both")
    pen_audio = cfg.apply_penalty_to in ("audio", "both")
    gamma = cfg.repetition_penalty

    seq = list(prompt)
    with torch.no_grad():
        try:
            if use_cache:
                if cache is not None and cache.cached_len >= len(seq):
                    cache = cache.truncate(len(seq) - 1)
                c = 0 if cache is None else cache.cached_len
                logits, cache = model(seq[c:], cache)
            else:
                logits, _ = model(seq)
        except CapacityError as exc:
            raise DecodeCapacityError(str(exc), pair) from exc

        text_hist: list[int] = []
        audio_hist: list[int] = []
        text_done = False
        # prompt markers and the audio pad are never valid outputs
        text_block = torch.tensor([V.SYS, V.HIST, V.INPUT, V.ANSWER])
        pad_col = V.AUDIO_PAD - V.text_size
        for s in range(1, cfg.max_response_steps + 1):
            lt = logits.text[-1].clone()
            lt[text_block] = float("-inf")
            lg = logits.group[-1].clone()
            lg[:, pad_col] = float("-inf")
            if text_done:
                emitted, fed = None, V.TEXT_PAD
            else:
                if pen_text:
                    lt = apply_repetition_penalty(lt, text_hist, gamma)
                tok = int(lt.argmax())
                fed = tok
                if tok in (V.TEXT_EOS, V.TEXT_PAD):
                    text_done, emitted = True, None
                else:
                    emitted = tok
                    text_hist.append(tok)
            if pen_audio:
                lg = apply_repetition_penalty(lg, audio_hist, gamma)
            cols = [int(a) + V.text_size for a in lg.argmax(-1)]
            audio_hist.extend(a - V.text_size for a in cols)
            eoa = V.AUDIO_EOA in cols
            kept = tuple(cols[: cols.index(V.AUDIO_EOA)] if eoa else cols)

            if emitted is not None:
                pair.text.append(emitted)
            pair.audio.extend(kept)
            pair.steps = s
            yield _Step(s, emitted, kept, eoa)
            if eoa:
                return
            if s == cfg.max_response_steps:
                pair.truncated = True
                return
            step_in = ResponseStep(fed, tuple(cols))
            seq.append(step_in)
            try:
                if use_cache:
                    logits, cache = model([step_in], cache)
                else:
                    logits, _ = model(seq)
            except CapacityError as exc:
                pair.truncated = True
                raise DecodeCapacityError(str(exc), pair) from exc


def decode(prompt: Sequence[StepInput], model: GroupLM, cfg: DecodeConfig = DecodeConfig(),
           cache: KVCache | None = None, use_cache: bool = True) -> TokenStreamPair:
    """Greedy parallel decoding of one text token and one audio group per step.

    After the text stream ends it is fed ``TEXT_PAD`` while audio continues;
    decoding stops at the first ``AUDIO_EOA`` or after ``max_response_steps``.
    ``cache`` may already cover a prefix of ``prompt``.
    """
    pair = TokenStreamPair()
    for _ in _generate(model, prompt, cfg, cache, use_cache, pair):
        pass
    return pair


@dataclass
class StreamResult:
    packets: list[AudioPacket]
    pair: TokenStreamPair


def stream_decode(prompt: Sequence[StepInput], model: GroupLM, cfg: DecodeConfig = DecodeConfig(),
                  cache: KVCache | None = None, use_cache: bool = True,
                  on_packet: Callable[[AudioPacket], None] | None = None) -> StreamResult:
    """Like :func:`decode` but cuts the audio stream into ``chunk_size`` packets as it grows."""
    pair = TokenStreamPair()
    packets: list[AudioPacket] = []
    buf: list[int] = []
    last = 0

    def emit(tokens, step):
        pkt = AudioPacket(tuple(tokens), step, len(packets))
        packets.append(pkt)
        if on_packet is not None:
            on_packet(pkt)

    for st in _generate(model, prompt, cfg, cache, use_cache, pair):
        last = st.index
        buf.extend(st.audio)
        while len(buf) >= cfg.chunk_size:
            emit(buf[: cfg.chunk_size], st.index)
            buf = buf[cfg.chunk_size:]
    if buf:
        emit(buf, last)
    return StreamResult(packets, pair)


def write_packet_trace(path, packets: Sequence[AudioPacket]) -> None:
    with open(path, "w") as fh:
        for p in packets:
            fh.write(json.dumps(p.trace()) + "\n")


# toy vocoder ----------------------------------------------------------------

class ToyVocoder:
    """Token -> sinusoid segment; the speaker sets amplitude, phase and offset.

    Each audio id owns one DFT bin of a ``samples_per_token`` segment, so the
    token is recoverable from the spectrum whatever the speaker.
    """

    def __init__(self, text_size: int, audio_size: int, samples_per_token: int | None = None,
                 sample_rate: int = 16000):
        self.text_size = text_size
        self.audio_size = audio_size
        self.samples_per_token = samples_per_token or 2 * audio_size + 2
        if self.samples_per_token <= 2 * audio_size:
            raise ValueError("samples_per_token must exceed 2 * audio_size")
        self.sample_rate = sample_rate

    def _speaker(self, speaker_id: int):
        rng = np.random.default_rng(1_000_003 + int(speaker_id))
        return rng.uniform(0.3, 0.8), rng.uniform(0, 2 * np.pi), rng.uniform(-0.1, 0.1)

    def synthesize(self, audio_tokens, speaker_id: int = 0) -> np.ndarray:
        toks = np.asarray(list(audio_tokens), dtype=np.int64)
        if toks.size == 0:
            return np.zeros(0)
        if toks.min() < self.text_size or toks.max() >= self.text_size + self.audio_size:
            raise ValueError("audio token out of range")
        amp, phase, offset = self._speaker(speaker_id)
        N = self.samples_per_token
        n = np.arange(N)
        bins = toks - self.text_size + 1
        seg = amp * np.sin(2 * np.pi * bins[:, None] * n[None, :] / N + phase) + offset
        return seg.reshape(-1)

    def analyze(self, waveform) -> list[int]:
        w = np.asarray(waveform, dtype=np.float64)
        N = self.samples_per_token
        if w.size % N:
            raise ValueError("waveform length is not a whole number of token segments")
        spec = np.abs(np.fft.rfft(w.reshape(-1, N), axis=1))[:, 1: self.audio_size + 1]
        return (spec.argmax(axis=1) + self.text_size).tolist()


def toy_vocoder(audio_tokens, speaker_prompt_id: int, vocoder: ToyVocoder) -> np.ndarray:
    return vocoder.synthesize(audio_tokens, speaker_prompt_id)


def write_waveform(path, samples, sample_rate: int) -> None:
    """Header (magic, version, rate, n) then little-endian int16 samples."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767), -32768, 32767).astype("<i2")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", WAVE_MAGIC, WAVE_VERSION, sample_rate, pcm.size))
        fh.write(pcm.tobytes())


def read_waveform(path) -> tuple[np.ndarray, int]:
    raw = open(path, "rb").read()
    magic, version, rate, n = struct.unpack_from("<4sIII", raw)
    if magic != WAVE_MAGIC or version != WAVE_VERSION:
        raise ValueError("not a toy waveform file")
    pcm = np.frombuffer(raw, dtype="<i2", count=n, offset=16)
    return pcm.astype(np.float64) / 32767, rate

"""Decoder-only transformer over the joint vocabulary with grouped audio heads.

Each position carries one of three inputs (speech feature, prompt text token,
or a response step holding a text token plus an audio group). A response step
is embedded as the text embedding plus the mean of its audio embeddings.

The shared head produces logits over the whole joint vocabulary; the audio
slice (or, optionally, the final hidden state) is mapped by a second linear
layer to ``G`` rows of audio logits, one per grouped token.

All parameters are float64. The single-sequence inference path evaluates each
position with fixed-shape kernels, so cached and cacheless passes agree
bitwise; the batched training path uses ordinary matrix products and matches
it to rounding error.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import JointVocabulary

DTYPE = torch.float64
LITERAL = "literal-logit-map"
HIDDEN = "hidden-state-head"

CKPT_MAGIC = b"GVXC"
CKPT_VERSION = 1


class CapacityError(RuntimeError):
    """Sequence would exceed ``max_positions``."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    model_dim: int = 128
    heads: int = 4
    max_positions: int = 128
    group_size: int = 3
    vocab: JointVocabulary = field(default_factory=JointVocabulary)
    group_head_mode: str = LITERAL
    init_seed: int = 0
    ffn_mult: int = 4
    # frontend, kept here so a checkpoint is self-describing
    feature_dim: int = 8
    stack_k: int = 5
    max_frames: int = 60
    frontend_seed: int = 0
    codec_rate: int = 15
    codec_seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.group_head_mode not in (LITERAL, HIDDEN):
            raise ValueError(f"unknown group_head_mode {self.group_head_mode!r}")
        if self.max_frames < self.stack_k:
            raise ValueError("max_frames must be at least stack_k")

    @property
    def speech_positions(self) -> int:
        return self.max_frames // self.stack_k

    @property
    def stacked_dim(self) -> int:
        return self.stack_k * self.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = {"text_size": self.vocab.text_size, "audio_size": self.vocab.audio_size}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = JointVocabulary(**d["vocab"])
        return cls(**d)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embeddings ``Vj*D + P*D``; projector ``F*D + D``; each layer
    ``(4 + 2f)*D^2 + (9 + f)*D`` (two layer norms, qkv, output, two-layer FFN
    of width ``f*D``); final norm ``2D``; joint head ``D*Vj + Vj``; group head
    ``In*G*Va + G*Va`` with ``In = Va`` (literal) or ``D`` (hidden).
    """
    D, f = cfg.model_dim, cfg.ffn_mult
    Vj, Va, G = cfg.vocab.joint_size, cfg.vocab.audio_size, cfg.group_size
    per_layer = (4 + 2 * f) * D * D + (9 + f) * D
    group_in = Va if cfg.group_head_mode == LITERAL else D
    return (Vj * D + cfg.max_positions * D
            + cfg.stacked_dim * D + D
            + cfg.layers * per_layer
            + 2 * D
            + D * Vj + Vj
            + group_in * G * Va + G * Va)


# step inputs ------------------------------------------------------------

@dataclass(frozen=True)
class SpeechFeature:
    vector: np.ndarray  # already projected to model_dim

    def __eq__(self, other):
        return isinstance(other, SpeechFeature) and np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash(np.asarray(self.vector, dtype=np.float64).tobytes())


@dataclass(frozen=True)
class PromptText:
    token: int


@dataclass(frozen=True)
class ResponseStep:
    text: int
    audio: tuple[int, ...]


StepInput = Union[SpeechFeature, PromptText, ResponseStep]


@dataclass
class StepLogits:
    joint: torch.Tensor   # (n, Vj)
    group: torch.Tensor   # (n, G, Va)
    text_size: int

    @property
    def text(self) -> torch.Tensor:
        return self.joint[..., : self.text_size]

    @property
    def audio(self) -> torch.Tensor:
        return self.joint[..., self.text_size:]


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys/values of shape ``(B, H, cached_len, head_dim)``.

    Owned by one decoding session; ``forward`` returns a new cache rather than
    mutating this one.
    """

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]

    @property
    def cached_len(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[-2]

    def truncate(self, n: int) -> "KVCache":
        if n > self.cached_len:
            raise ValueError("cannot truncate a cache to more positions than it holds")
        return KVCache(tuple(k[..., :n, :] for k in self.keys),
                       tuple(v[..., :n, :] for v in self.values))


# model ------------------------------------------------------------------

class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.model_dim
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(D, dtype=DTYPE)
        self.qkv = nn.Linear(D, 3 * D, dtype=DTYPE)
        self.out = nn.Linear(D, D, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(D, dtype=DTYPE)
        self.fc = nn.Linear(D, cfg.ffn_mult * D, dtype=DTYPE)
        self.fc2 = nn.Linear(cfg.ffn_mult * D, D, dtype=DTYPE)

    def forward(self, x, past=None, return_attn=False, exact=False):
        B, n, D = x.shape
        H = self.heads
        hd = D // H
        rows = _per_row if exact else (lambda f, t: f(t))
        q, k, v = rows(lambda t: self.qkv(self.ln1(t)), x).split(D, dim=-1)
        q = q.view(B, n, H, hd).transpose(1, 2)
        k = k.view(B, n, H, hd).transpose(1, 2)
        v = v.view(B, n, H, hd).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        c = k.shape[2] - n
        if exact:
            # query i only ever sees keys 0..c+i, so its arithmetic is the
            # same whether the prefix came from a cache or not
            ys, attn = [], []
            for i in range(n):
                L = c + i + 1
                a = torch.softmax((q[:, :, i:i + 1] @ k[:, :, :L].transpose(-2, -1)) / math.sqrt(hd), dim=-1)
                ys.append(a @ v[:, :, :L])
                if return_attn:
                    attn.append(F.pad(a, (0, k.shape[2] - L)))
            y = torch.cat(ys, dim=2)
            attn = torch.cat(attn, dim=2) if return_attn else None
        else:
            scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
            qpos = torch.arange(c, c + n).unsqueeze(1)
            kpos = torch.arange(k.shape[2]).unsqueeze(0)
            attn = torch.softmax(scores.masked_fill(kpos > qpos, float("-inf")), dim=-1)
            y = attn @ v
        y = y.transpose(1, 2).reshape(B, n, D)
        x = x + rows(self.out, y)
        x = x + rows(lambda t: self.fc2(F.gelu(self.fc(self.ln2(t)))), x)
        return x, (k, v), (attn if return_attn else None)


def _per_row(f, x):
    """Apply ``f`` to each position separately (fixed shapes, fixed reduction order)."""
    return torch.cat([f(x[:, i:i + 1]) for i in range(x.shape[1])], dim=1)


class GroupLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        V = cfg.vocab
        D = cfg.model_dim
        G = cfg.group_size
        self.tok_emb = nn.Embedding(V.joint_size, D, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_positions, D, dtype=DTYPE)
        self.projector = nn.Linear(cfg.stacked_dim, D, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(D, dtype=DTYPE)
        self.head = nn.Linear(D, V.joint_size, dtype=DTYPE)
        group_in = V.audio_size if cfg.group_head_mode == LITERAL else D
        self.group_proj = nn.Linear(group_in, G * V.audio_size, dtype=DTYPE)

    # embeddings ---------------------------------------------------------

    def project_speech(self, stacked) -> np.ndarray:
        """Stacked frames ``(N', k*d)`` -> projected vectors ``(N', D)``."""
        x = torch.as_tensor(np.asarray(stacked, dtype=np.float64))
        with torch.no_grad():
            return self.projector(x).numpy().copy()

    def embed_steps(self, inputs: Sequence[StepInput], start: int = 0) -> torch.Tensor:
        """Embed a list of step inputs placed at absolute positions ``start..``."""
        cfg = self.cfg
        V = cfg.vocab
        rows = []
        for inp in inputs:
            if isinstance(inp, SpeechFeature):
                vec = torch.as_tensor(np.asarray(inp.vector, dtype=np.float64))
                if vec.shape != (cfg.model_dim,):
                    raise ValueError(f"speech feature must have shape ({cfg.model_dim},)")
                rows.append(vec)
            elif isinstance(inp, PromptText):
                _check_text(inp.token, V)
                rows.append(self.tok_emb.weight[inp.token])
            elif isinstance(inp, ResponseStep):
                _check_text(inp.text, V)
                if len(inp.audio) != cfg.group_size:
                    raise ValueError(f"response step needs {cfg.group_size} audio ids")
                for a in inp.audio:
                    if not V.is_audio(a):
                        raise ValueError(f"audio id {a} outside audio range")
                audio = self.tok_emb.weight[list(inp.audio)].sum(0) / cfg.group_size
                rows.append(self.tok_emb.weight[inp.text] + audio)
            else:
                raise TypeError(f"unknown step input {inp!r}")
        x = torch.stack(rows) if rows else torch.zeros(0, cfg.model_dim, dtype=DTYPE)
        pos = torch.arange(start, start + len(inputs))
        return x + self.pos_emb(pos)

    def embed_batch(self, kind, text, audio, feats) -> torch.Tensor:
        """Batched embedding used for training.

        ``kind`` is 0 for speech, 1 for prompt text, 2 for response steps;
        ``feats`` holds stacked (unprojected) frames at speech positions.
        """
        G = self.cfg.group_size
        tok = self.tok_emb(text)
        aud = self.tok_emb(audio).sum(-2) / G
        resp = (kind == 2).unsqueeze(-1).to(DTYPE)
        x = tok + resp * aud
        x = torch.where((kind == 0).unsqueeze(-1), self.projector(feats), x)
        pos = torch.arange(kind.shape[1])
        return x + self.pos_emb(pos)

    # core ---------------------------------------------------------------

    def run_blocks(self, x, cache: KVCache | None = None, return_attn=False, exact=False):
        n = x.shape[1]
        c = 0 if cache is None else cache.cached_len
        if c + n > self.cfg.max_positions:
            raise CapacityError(f"{c + n} positions exceed max_positions={self.cfg.max_positions}")
        keys, values, attns = [], [], []
        for i, blk in enumerate(self.blocks):
            past = None if cache is None else (cache.keys[i], cache.values[i])
            x, (k, v), a = blk(x, past, return_attn, exact)
            keys.append(k)
            values.append(v)
            attns.append(a)
        h = _per_row(self.ln_f, x) if exact else self.ln_f(x)
        return h, KVCache(tuple(keys), tuple(values)), attns

    def logits(self, h, exact=False) -> tuple[torch.Tensor, torch.Tensor]:
        if exact:
            pairs = [self.logits(h[i:i + 1]) for i in range(h.shape[0])]
            return torch.cat([p[0] for p in pairs]), torch.cat([p[1] for p in pairs])
        joint = self.head(h)
        return joint, self.group_head(joint, h)

    def group_head(self, joint, h) -> torch.Tensor:
        """Map to ``(..., G, Va)`` grouped audio logits."""
        V = self.cfg.vocab
        src = joint[..., V.text_size:] if self.cfg.group_head_mode == LITERAL else h
        out = self.group_proj(src)
        return out.view(*out.shape[:-1], self.cfg.group_size, V.audio_size)

    def forward(self, inputs: Sequence[StepInput], cache: KVCache | None = None):
        """Incremental forward for a single sequence.

        Returns logits for the new positions only, plus the extended cache.
        Every position is computed with the same tensor shapes whether or not
        its prefix came from a cache, which makes the two paths agree bitwise.
        """
        start = 0 if cache is None else cache.cached_len
        if start + len(inputs) > self.cfg.max_positions:
            raise CapacityError(
                f"{start + len(inputs)} positions exceed max_positions={self.cfg.max_positions}")
        x = self.embed_steps(inputs, start).unsqueeze(0)
        h, new_cache, _ = self.run_blocks(x, cache, exact=True)
        joint, grp = self.logits(h[0], exact=True)
        return StepLogits(joint, grp, self.cfg.vocab.text_size), new_cache

    def forward_batch(self, kind, text, audio, feats, hidden_hook=None):
        x = self.embed_batch(kind, text, audio, feats)
        h, _, _ = self.run_blocks(x)
        if hidden_hook is not None:
            h = hidden_hook(h)
        return self.logits(h)


def _check_text(token: int, V: JointVocabulary) -> None:
    if not V.is_text(token):
        raise ValueError(f"text id {token} outside text range [0, {V.text_size})")


def init_params(cfg: ModelConfig) -> GroupLM:
    """Build a model with deterministic scaled-normal init (std 0.02)."""
    model = GroupLM(cfg)
    gen = torch.Generator().manual_seed(cfg.init_seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)
        for m in model.modules():
            if isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Linear):
                m.bias.zero_()
    return model


# checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: GroupLM, step: int = 0, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, named f64 blobs, sha256."""
    header = json.dumps({"config": model.cfg.to_dict(), "step": int(step), "extra": extra or {}},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Returns ``(model, config, step, extra)``.

    ``expect`` guards against loading into a different architecture.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 8 + 32 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file or truncated header")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CKPT_VERSION}")
    off = 12
    header = json.loads(body[off:off + hlen])
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    if expect is not None and expect != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in vars(expect).items() if getattr(cfg, k) != v}
        raise CheckpointError(f"checkpoint config does not match expected architecture: {diff}")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        state[name] = torch.tensor(arr, dtype=DTYPE)
    model = GroupLM(cfg)
    model.load_state_dict(state)
    return model, cfg, header["step"], header["extra"]

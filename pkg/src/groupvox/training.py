"""Single-stage training: weighted two-stream loss, AdamW, warmup + linear decay."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Batch, Collator, DialogueRecord, expand, split
from .model import GroupLM, ModelConfig, init_params, save_checkpoint

log = logging.getLogger(__name__)


class InvalidBatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 100_000
    batch_size: int = 24
    lambda_text: float = 1.0
    lambda_audio: float = 1.0
    mode: str = "s2s"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    validate_every: int = 3000
    val_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.lambda_text < 0 or self.lambda_audio < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("s2s", "asr", "tts"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# loss ---------------------------------------------------------------------

def compute_loss(batch: Batch, model: GroupLM, lambda_text: float = 1.0, lambda_audio: float = 1.0,
                 mode: str | None = None, hidden_hook=None) -> dict:
    """Weighted cross-entropy over the text slice and the grouped audio logits.

    Each stream is averaged over its unmasked targets. ``mode="asr"`` drops
    the audio term and ``mode="tts"`` the text term (both then read 0.0).
    """
    mode = mode or batch.mode
    V = model.cfg.vocab
    joint, grp = model.forward_batch(batch.kind, batch.text, batch.audio, batch.feats,
                                     hidden_hook=hidden_hook)
    zero = joint.new_zeros(())
    out = {}

    if mode == "tts":
        out["loss_text"], out["acc_text"] = zero, float("nan")
    else:
        n = batch.text_mask.sum()
        if n == 0:
            raise InvalidBatch("no unmasked text targets")
        logp = torch.log_softmax(joint[..., : V.text_size], dim=-1)
        nll = -logp.gather(-1, batch.text_tgt.unsqueeze(-1)).squeeze(-1)
        out["loss_text"] = (nll * batch.text_mask).sum() / n
        hit = (joint[..., : V.text_size].argmax(-1) == batch.text_tgt).to(joint.dtype)
        out["acc_text"] = float((hit * batch.text_mask).sum() / n)

    if mode == "asr":
        out["loss_audio"], out["acc_audio"] = zero, float("nan")
    else:
        n = batch.audio_mask.sum()
        if n == 0:
            raise InvalidBatch("no unmasked audio targets")
        logp = torch.log_softmax(grp, dim=-1)
        nll = -logp.gather(-1, batch.audio_tgt.unsqueeze(-1)).squeeze(-1)
        out["loss_audio"] = (nll * batch.audio_mask).sum() / n
        hit = (grp.argmax(-1) == batch.audio_tgt).to(grp.dtype)
        out["acc_audio"] = float((hit * batch.audio_mask).sum() / n)

    out["loss_total"] = lambda_text * out["loss_text"] + lambda_audio * out["loss_audio"]
    return out


# schedule / optimizer ------------------------------------------------------

def lr_schedule(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if step <= 0 or step > total_steps:
        return 0.0
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
                   lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                   decay_mask: Sequence[bool] | None = None) -> AdamState:
    """One AdamW update, in place on ``params``.

    Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
    adaptive step and never touches the moment estimates.
    """
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; step aborted")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    decay_mask = decay_mask if decay_mask is not None else [True] * len(params)
    with torch.no_grad():
        for p, g, m, v, dec in zip(params, grads, state.m, state.v, decay_mask):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if dec and weight_decay:
                p.mul_(1 - lr * weight_decay)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


class AdamW:
    """Thin stateful wrapper; biases, norms and 1-d tensors are not decayed."""

    def __init__(self, model: torch.nn.Module, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.decay = [p.ndim >= 2 and "ln" not in n for n, p in named]
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        for n, g in zip(self.names, grads):
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in {n}; step aborted")
        optimizer_step(self.params, grads, self.state, lr, self.betas, self.eps,
                       self.weight_decay, self.decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# gradient check -------------------------------------------------------------

class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return g * ctx.factor, None


def grad_check(model: GroupLM, batch: Batch, eps: float = 1e-3, n_coords: int = 200,
               seed: int = 0, lambda_text=1.0, lambda_audio=1.0, params: Sequence[str] | None = None,
               corrupt: float | None = None, order: int = 4, floor: float = 1e-12) -> float:
    """Max relative error between autograd and central finite differences.

    Coordinates are sampled uniformly among those with a nonzero analytic
    gradient (``|g| > 1e-12``) in the named parameters. ``order`` selects the
    2-point ``(f(+e) - f(-e)) / 2e`` or 4-point
    ``(-f(+2e) + 8f(+e) - 8f(-e) + f(-2e)) / 12e`` stencil. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``corrupt`` scales the gradient that
    flows back through the final hidden state (negative control).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    hook = (lambda h: _ScaleGrad.apply(h, corrupt)) if corrupt is not None else None
    named = dict(model.named_parameters())
    names = list(params) if params is not None else list(named)

    model.zero_grad()
    loss = compute_loss(batch, model, lambda_text, lambda_audio, hidden_hook=hook)["loss_total"]
    loss.backward()
    candidates = []
    for n in names:
        g = named[n].grad
        if g is None:
            continue
        for idx in torch.nonzero(g.reshape(-1).abs() > 1e-12).reshape(-1).tolist():
            candidates.append((n, idx))
    if not candidates:
        raise ValueError("no parameter receives gradient from this batch")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)

    def loss_at(flat, idx, value):
        flat[idx] = value
        return float(compute_loss(batch, model, lambda_text, lambda_audio)["loss_total"])

    worst = 0.0
    with torch.no_grad():
        for i in sorted(pick.tolist()):
            n, idx = candidates[i]
            flat = named[n].view(-1)
            a = float(named[n].grad.reshape(-1)[idx])
            orig = float(flat[idx])
            if order == 2:
                num = (loss_at(flat, idx, orig + eps) - loss_at(flat, idx, orig - eps)) / (2 * eps)
            else:
                num = (-loss_at(flat, idx, orig + 2 * eps) + 8 * loss_at(flat, idx, orig + eps)
                       - 8 * loss_at(flat, idx, orig - eps) + loss_at(flat, idx, orig - 2 * eps)) / (12 * eps)
            flat[idx] = orig
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    model.zero_grad()
    return worst


# training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    model: GroupLM
    best_val_loss: float
    best_step: int
    metrics: list[dict]
    checkpoint: Path | None


def evaluate_loss(model: GroupLM, collate: Collator, samples, cfg: TrainConfig, chunk: int = 64) -> dict:
    tot = {"loss_text": 0.0, "loss_audio": 0.0, "loss_total": 0.0}
    weight = 0
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            out = compute_loss(collate(part), model, cfg.lambda_text, cfg.lambda_audio, mode=cfg.mode)
            for k in tot:
                tot[k] += float(out[k]) * len(part)
            weight += len(part)
    return {k: v / weight for k, v in tot.items()}


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, corpus: Sequence[DialogueRecord],
          out_dir=None, on_step: Callable[[dict], None] | None = None, system=None) -> TrainResult:
    """Train from scratch, validating every ``validate_every`` steps.

    The checkpoint with the lowest validation loss is kept (and written to
    ``out_dir/ckpt/best.ckpt`` when ``out_dir`` is given). Metrics are appended
    to ``out_dir/metrics.jsonl``.
    """
    cfg = train_cfg
    train_recs, val_recs = split(corpus, cfg.val_fraction, cfg.seed)
    kw = {} if system is None else {"system": system}
    collate = Collator(model_cfg, mode=cfg.mode, **kw)
    train_samples = expand(train_recs)
    val_samples = expand(val_recs)
    model = init_params(model_cfg)
    opt = AdamW(model, (cfg.beta1, cfg.beta2), cfg.epsilon, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    ckpt_path = metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "ckpt" / "best.ckpt"
        metrics_fh = open(out_dir / "metrics.jsonl", "w")

    best = (math.inf, 0, copy.deepcopy(model.state_dict()))
    metrics: list[dict] = []
    try:
        for step in range(1, cfg.total_steps + 1):
            idx = rng.choice(len(train_samples), size=min(cfg.batch_size, len(train_samples)),
                             replace=False)
            batch = collate([train_samples[i] for i in idx])
            out = compute_loss(batch, model, cfg.lambda_text, cfg.lambda_audio, mode=cfg.mode)
            if not torch.isfinite(out["loss_total"]):
                raise TrainingDiverged(f"non-finite loss at step {step}",
                                       ckpt_path if best[0] < math.inf else None)
            opt.zero_grad()
            out["loss_total"].backward()
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
            try:
                opt.step(lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), ckpt_path if best[0] < math.inf else None) from exc
            rec = {
                "step": step, "lr": lr,
                "loss_text": out["loss_text"].item(), "loss_audio": out["loss_audio"].item(),
                "loss_total": out["loss_total"].item(),
                "acc_text": out["acc_text"], "acc_audio": out["acc_audio"],
            }
            if step % cfg.validate_every == 0 or step == cfg.total_steps:
                model.eval()
                val = evaluate_loss(model, collate, val_samples, cfg)
                rec["val_loss"] = val["loss_total"]
                if val["loss_total"] < best[0]:
                    best = (val["loss_total"], step, copy.deepcopy(model.state_dict()))
                    if ckpt_path is not None:
                        save_checkpoint(ckpt_path, model, step, {"val_loss": val["loss_total"],
                                                                 "train_config": cfg.to_dict()})
                model.train()
            metrics.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, best[0], best[1], metrics, ckpt_path)

"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``);
the lines are also collected into a summary section at the end of any pytest run.
The two training criteria take a few minutes together.
"""

import itertools
import math
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from groupvox.data import Collator, Sample, gen_corpus, split
from groupvox.decoding import DecodeConfig, decode, first_packet_steps
from groupvox.metrics import asr_wer, repeat_dataset_score, repeat_sample_score, wer
from groupvox.model import ModelConfig, init_params
from groupvox.session import DialogueSession
from groupvox.training import TrainConfig, compute_loss, grad_check, train
from groupvox.vocab import JointVocabulary, VocabError, group, ungroup

from oracles import brute_distance, loss_oracle

RESULTS: list[str] = []


@contextmanager
def criterion(n, title, limit_s):
    t0 = time.perf_counter()
    try:
        yield
        took = time.perf_counter() - t0
        assert took < limit_s, f"took {took:.1f}s, limit {limit_s}s"
    except BaseException as exc:
        line = f"FAIL  [{n:2d}] {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS  [{n:2d}] {title} ({took:.1f}s)"
    RESULTS.append(line)
    print(line)


TINY_V = JointVocabulary(32, 48)


def tiny_cfg(**kw):
    base = dict(layers=2, model_dim=16, heads=2, max_positions=96, group_size=3, vocab=TINY_V,
                init_seed=1, codec_rate=4, max_frames=20)
    return ModelConfig(**{**base, **kw})


def tiny_batch(cfg):
    return Collator(cfg)([
        Sample("a", (), (6, 7, 8), (6, 7, 8)),
        Sample("b", (((9,), (9,)),), (10, 11), (11, 10)),
        Sample("c", (), (12,), (12,)),
    ])


def test_01_grouping_law():
    with criterion(1, "group/ungroup identity and T/G group count", 1.0):
        V = JointVocabulary()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            T = int(rng.integers(1, 81))
            toks = rng.integers(V.first_audio_content, V.joint_size, T).tolist()
            for G in range(1, 6):
                g = group(toks, G, V)
                assert ungroup(g) == toks
                assert g.num_groups == math.ceil(T / G)
                if T % G == 0:
                    assert g.num_groups == T // G
        with pytest.raises(VocabError):
            group([], 3, V)


def test_02_loss_oracle():
    with criterion(2, "loss matches naive oracle; uniform ln|V|; lambda-linear", 10.0):
        cfg = tiny_cfg()
        model, batch = init_params(cfg), tiny_batch(cfg)
        out = compute_loss(batch, model, 0.7, 1.3)
        ref = loss_oracle(batch, model, 0.7, 1.3)
        for k, r in zip(("loss_text", "loss_audio", "loss_total"), ref):
            assert abs(out[k].item() - r) < 1e-10, k

        with torch.no_grad():
            for p in (model.head.weight, model.head.bias, model.group_proj.weight, model.group_proj.bias):
                p.zero_()
        flat = compute_loss(batch, model)
        assert abs(flat["loss_text"].item() - math.log(TINY_V.text_size)) < 1e-12
        assert abs(flat["loss_audio"].item() - math.log(TINY_V.audio_size)) < 1e-12

        model = init_params(cfg)
        for lt, la in [(0.0, 1.0), (1.0, 0.0), (0.3, 2.5), (4.0, 0.125)]:
            o = compute_loss(batch, model, lt, la)
            assert o["loss_total"].item() == lt * o["loss_text"].item() + la * o["loss_audio"].item()


def test_03_gradient_check():
    with criterion(3, "gradient check < 1e-5 on 200 coords; corrupted control > 1e-2", 120.0):
        cfg = tiny_cfg()
        model, batch = init_params(cfg), tiny_batch(cfg)
        err = grad_check(model, batch, n_coords=200)
        bad = grad_check(model, batch, n_coords=200, corrupt=1.5)
        print(f"      max rel err {err:.2e}, corrupted {bad:.2e}")
        assert err < 1e-5
        assert bad > 1e-2


def test_04_cache_equivalence():
    with criterion(4, "cached decode == full recompute (100 prompts, 3-round session)", 120.0):
        model = init_params(tiny_cfg(model_dim=32, max_positions=128, init_seed=7))
        dcfg = DecodeConfig(max_response_steps=12)
        s = DialogueSession(model, decode_cfg=dcfg)
        rng = np.random.default_rng(4)
        for _ in range(100):
            user = rng.integers(TINY_V.first_text_content, TINY_V.text_size, int(rng.integers(1, 5))).tolist()
            prompt = s.build_prompt(s.codec.encode(user))
            assert decode(prompt, model, dcfg) == decode(prompt, model, dcfg, use_cache=False)

        cached = DialogueSession(model, decode_cfg=dcfg)
        plain = DialogueSession(model, decode_cfg=dcfg, use_cache=False)
        for rnd, user in enumerate([[6, 7, 8], [9, 10], [11, 12, 13, 14]]):
            a = cached.run_turn(cached.codec.encode(user))
            b = plain.run_turn(plain.codec.encode(user))
            assert a.reply == b.reply
            assert (a.reuse_len > 0) == (rnd > 0)


def test_05_latency_law():
    with criterion(5, "first packet after ceil(chunk/G) steps; (30, 3) -> 10", 1.0):
        assert first_packet_steps(30, 3) == 10
        for chunk in range(1, 121):
            for G in range(1, 9):
                assert first_packet_steps(chunk, G) == -(-chunk // G)


def test_06_metric_fidelity():
    with criterion(6, "WER vs recursive oracle; repeat scores", 30.0):
        seqs = [s for n in range(7) for s in itertools.product(("a", "b"), repeat=n)]
        for ref in seqs:
            for hyp in seqs:
                assert wer(ref, hyp) == brute_distance(ref, hyp) / max(1, len(ref))
        assert [repeat_sample_score(w) for w in (0, 0.2, 0.5, 0.6)] == pytest.approx([100, 80, 50, 0], abs=1e-12)
        assert repeat_dataset_score([0.2, 0.8]) == pytest.approx(40, abs=1e-12)


@pytest.mark.slow
def test_07_toy_training_asr_wer():
    # step budget frozen after the first calibrated run
    with criterion(7, "echo training reaches held-out ASR-WER <= 5%", 1800.0):
        V = JointVocabulary(64, 256)
        recs = gen_corpus(5000, {"echo": 1.0}, V, seed=0)
        mcfg = ModelConfig(layers=2, model_dim=128, heads=4, vocab=V, codec_rate=15, group_size=3)
        tcfg = TrainConfig(peak_lr=1e-3, warmup_steps=100, total_steps=1500, batch_size=24,
                           validate_every=300, seed=0)
        res = train(tcfg, mcfg, recs)
        _, val = split(recs, tcfg.val_fraction, tcfg.seed)
        s = DialogueSession(res.model)
        scores = []
        for rec in val:
            s.history.clear()
            s.invalidate()
            reply = s.run_turn(s.codec.encode(rec.turns[0].user)).reply
            scores.append(asr_wer(reply.audio, reply.text, s.codec))
        mean = float(np.mean(scores))
        print(f"      held-out ASR-WER {mean:.4f} over {len(val)} records")
        assert len(val) >= 50
        assert mean <= 0.05


@pytest.mark.slow
def test_08_group_size_step_scaling():
    with criterion(8, "decode steps per response == ceil(T/G) for G = 1..5", 600.0):
        V = JointVocabulary(32, 48)
        R = 6
        recs = gen_corpus(1000, {"echo": 1.0}, V, seed=0, max_len=3)
        _, probe = split(recs, 0.05, 1)
        for G in range(1, 6):
            mcfg = ModelConfig(layers=2, model_dim=48, heads=2, vocab=V, codec_rate=R, max_frames=30,
                               group_size=G, max_positions=64)
            tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=20, total_steps=2500, batch_size=16, validate_every=625)
            s = DialogueSession(train(tcfg, mcfg, recs).model)
            bad = 0
            for rec in probe:
                s.history.clear()
                s.invalidate()
                reply = s.run_turn(s.codec.encode(rec.turns[0].user)).reply
                T = R * len(rec.turns[0].assistant) + 1  # audio plus EOA
                bad += reply.truncated or reply.steps != math.ceil(T / G)
            print(f"      G={G}: {bad} of {len(probe)} responses off the ceil(T/G) law")
            assert bad == 0


def test_09_history_text_only():
    with criterion(9, "history region is text-only; growth independent of audio length", 60.0):
        rng = np.random.default_rng(9)
        script = [rng.integers(TINY_V.first_text_content, TINY_V.text_size, int(rng.integers(1, 4))).tolist()
                  for _ in range(4)]
        audio = {}
        for G in (1, 3, 5):
            model = init_params(tiny_cfg(layers=1, group_size=G, max_positions=160, init_seed=G))
            s = DialogueSession(model, decode_cfg=DecodeConfig(max_response_steps=10))
            probe = s.codec.encode([6])
            prev = len(s.history_region(s.build_prompt(probe)))
            audio[G] = []
            for user in script:
                reply = s.run_turn(s.codec.encode(user)).reply
                region = s.history_region(s.build_prompt(probe))
                assert not any(TINY_V.is_audio(t) for t in region if isinstance(t, int))
                assert all(isinstance(t, int) for t in region)
                assert len(region) - prev == len(user) + len(reply.text) + 3
                prev = len(region)
                audio[G].append(len(reply.audio))
        # the audio streams really did differ in length
        assert len({tuple(v) for v in audio.values()}) > 1


def test_10_pretraining_modes():
    with criterion(10, "asr mode logs L_audio == 0; tts mode logs L_text == 0", 300.0):
        recs = gen_corpus(200, {"echo": 1.0}, TINY_V, seed=2, max_len=3)
        for mode, zero, live in (("asr", "loss_audio", "loss_text"), ("tts", "loss_text", "loss_audio")):
            tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=5, total_steps=40, batch_size=8,
                               validate_every=10, mode=mode)
            res = train(tcfg, tiny_cfg(layers=1), recs)
            assert len(res.metrics) == 40
            assert all(m[zero] == 0.0 for m in res.metrics)
            assert all(m[live] > 0 for m in res.metrics)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))

import json

import pytest

from groupvox.decoding import DecodeConfig
from groupvox.model import CapacityError, ModelConfig, PromptText, SpeechFeature, init_params
from groupvox.session import DialogueSession, TurnRejected, write_transcript
from groupvox.template import prefix_layout
from groupvox.vocab import JointVocabulary

SV = JointVocabulary(32, 48)
SCRIPT = [[6, 7, 8], [9, 10], [11]]


@pytest.fixture(scope="module")
def model():
    return init_params(ModelConfig(layers=2, model_dim=16, heads=2, vocab=SV, group_size=3, max_positions=128,
                                   codec_rate=4, max_frames=20, init_seed=11))


def session(model, **kw):
    kw.setdefault("decode_cfg", DecodeConfig(max_response_steps=12))
    return DialogueSession(model, **kw)


def keys(prompt):
    return [p.token if isinstance(p, PromptText) else "speech" for p in prompt]


def test_round_zero_prompt(model):
    s = session(model)
    prompt = s.build_prompt(s.codec.encode([6, 7]))
    n_speech = model.cfg.speech_positions
    assert keys(prompt) == [SV.SYS, 6, 7, SV.INPUT] + ["speech"] * n_speech + [SV.ANSWER]
    assert all(isinstance(p, SpeechFeature) for p in prompt[4:4 + n_speech])


def test_identical_sessions_identical_prompts(model):
    a, b = session(model), session(model)
    pa, pb = a.build_prompt(a.codec.encode([6])), b.build_prompt(b.codec.encode([6]))
    assert pa == pb


def test_history_is_verbatim_text(model):
    s = session(model)
    results = [s.run_turn(s.codec.encode(u)) for u in SCRIPT[:2]]
    prompt = s.build_prompt(s.codec.encode(SCRIPT[2]))
    expect = [SV.SYS, *s.system]
    for u, r in zip(SCRIPT, results):
        expect += [SV.HIST, *u, SV.TEXT_EOS, *r.reply.text, SV.TEXT_EOS]
    assert keys(prompt)[: len(expect)] == expect
    assert keys(prompt)[len(expect)] == SV.INPUT
    region = s.history_region(prompt)
    assert region == expect[1 + len(s.system):]
    assert not any(SV.is_audio(t) for t in region)
    assert s.round_index == 2 and [h[0] for h in s.history] == [tuple(u) for u in SCRIPT[:2]]


def test_cached_session_matches_uncached(model):
    cached, plain = session(model), session(model, use_cache=False)
    for u in SCRIPT:
        a = cached.run_turn(cached.codec.encode(u))
        b = plain.run_turn(plain.codec.encode(u))
        assert a.reply == b.reply
        assert b.reuse_len == 0


def test_reuse_after_invalidation_is_identical(model):
    s1, s2 = session(model), session(model)
    for u in SCRIPT[:2]:
        s1.run_turn(s1.codec.encode(u))
        s2.run_turn(s2.codec.encode(u))
    s2.invalidate()
    a, b = s1.run_turn(s1.codec.encode(SCRIPT[2])), s2.run_turn(s2.codec.encode(SCRIPT[2]))
    assert a.reply == b.reply and a.reuse_len > 0 and b.reuse_len == 0


def test_reuse_length_grows(model):
    s = session(model)
    out = [s.run_turn(s.codec.encode(u)) for u in SCRIPT]
    assert out[0].reuse_len == 0
    assert out[0].reuse_len < out[1].reuse_len < out[2].reuse_len
    for prev, cur in zip(out, out[1:]):
        tail = 2 + model.cfg.speech_positions
        assert cur.reuse_len >= prev.prompt_len - tail
    # the reused prefix is exactly system + completed history
    assert out[2].reuse_len == len(prefix_layout(SV, s.system, s.history[:2]))


def test_prefix_reuse_len_edge_cases(model):
    s = session(model)
    prompt = s.build_prompt(s.codec.encode([6]))
    assert s.prefix_reuse_len(prompt) == 0
    s.run_turn(s.codec.encode([6]))
    assert s.prefix_reuse_len(s.build_prompt(s.codec.encode([7]))) > 0
    s.invalidate()
    assert s.prefix_reuse_len(s.build_prompt(s.codec.encode([7]))) == 0


def test_set_system_clears_cache(model):
    s = session(model)
    s.run_turn(s.codec.encode([6]))
    assert s.prefix_cache is not None
    s.set_system([8, 9, 10])
    assert s.prefix_cache is None
    r = s.run_turn(s.codec.encode([7]))
    assert r.reuse_len == 0
    assert s.prefix_tokens[:4] == [SV.SYS, 8, 9, 10]


def test_context_growth_independent_of_audio_length():
    V = JointVocabulary(32, 48)
    audio_totals = {}
    for G in (1, 3):
        cfg = ModelConfig(layers=1, model_dim=16, heads=2, vocab=V, group_size=G, max_positions=128,
                          codec_rate=4, max_frames=20)
        s = DialogueSession(init_params(cfg), decode_cfg=DecodeConfig(max_response_steps=10))
        lengths = [len(s.history_region(s.build_prompt(s.codec.encode([6]))))]
        audio_totals[G] = 0
        for u in SCRIPT:
            r = s.run_turn(s.codec.encode(u))
            lengths.append(len(s.history_region(s.build_prompt(s.codec.encode([6])))))
            assert lengths[-1] - lengths[-2] == len(u) + len(r.reply.text) + 3
            audio_totals[G] += len(r.reply.audio)
    assert audio_totals[3] > audio_totals[1]


def test_rejected_turns_leave_session_unchanged(model):
    s = session(model)
    s.run_turn(s.codec.encode([6]))
    snapshot = (list(s.history), s.prefix_cache, list(s.prefix_tokens))
    with pytest.raises(TurnRejected):
        s.run_turn([])
    bad = s.codec.encode([7])
    bad[0] = bad[0] + 1 if bad[0] + 1 < SV.joint_size else SV.first_audio_content
    with pytest.raises(TurnRejected):
        s.run_turn(bad)
    assert (s.history, s.prefix_cache, s.prefix_tokens) == snapshot


def test_capacity_error_names_round():
    cfg = ModelConfig(layers=1, model_dim=16, heads=2, vocab=SV, max_positions=16, codec_rate=4, max_frames=20)
    s = DialogueSession(init_params(cfg), decode_cfg=DecodeConfig(max_response_steps=2))
    s.history = [((6, 7, 8), (6, 7, 8))]
    with pytest.raises(CapacityError, match="round 1"):
        s.build_prompt(s.codec.encode([6]))


def test_transcript(model, tmp_path):
    s = session(model)
    res = [s.run_turn(s.codec.encode(u)) for u in SCRIPT]
    p = tmp_path / "transcript.jsonl"
    write_transcript(p, res)
    rows = [json.loads(x) for x in p.read_text().splitlines()]
    assert [r["round"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"round", "user_text", "assistant_text", "reuse_len", "steps"}
    assert rows[1]["user_text"] == SCRIPT[1]

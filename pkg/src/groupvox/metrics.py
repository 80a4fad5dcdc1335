"""Word error rate, Repeat scoring, ASR-WER through the toy codec, judge prompts."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .vocab import ToyCodec

JUDGE_MODES = ("open", "semi-open", "qa", "multi-round")
MODES = JUDGE_MODES + ("repeat",)


class EvalError(ValueError):
    pass


_PUNCT = re.compile("[" + re.escape(string.punctuation) + "‘’“”]")


def normalize(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def words(text: str) -> list[str]:
    return normalize(text).split()


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """(S + I + D) / max(1, |reference|); sequences of words or token ids."""
    return edit_distance(reference, hypothesis) / max(1, len(reference))


def repeat_sample_score(w: float) -> float:
    if w < 0:
        raise EvalError("WER must be non-negative")
    return 100.0 * (1.0 - w) if w <= 0.5 else 0.0


def repeat_dataset_score(wers: Sequence[float]) -> float:
    """``100 * alpha * (1 - mean WER of passing samples)``; passing means WER <= 0.5."""
    wers = list(wers)
    if not wers:
        raise EvalError("empty sample set")
    passing = [w for w in wers if w <= 0.5]
    if not passing:
        return 0.0
    alpha = len(passing) / len(wers)
    return 100.0 * alpha * (1.0 - float(np.mean(passing)))


def asr_wer(audio_tokens: Sequence[int], text_tokens: Sequence[int], codec: ToyCodec) -> float:
    """WER between the text stream and the toy transcription of the audio stream.

    Unmatched audio produces no hypothesis words, so a corrupted block shows
    up as one deletion.
    """
    heard = codec.decode(audio_tokens).tokens
    return wer(list(text_tokens), heard)


def overall_score(scores) -> float:
    vals = list(scores.values()) if isinstance(scores, dict) else list(scores)
    if not vals:
        raise EvalError("no dataset scores to average")
    return float(np.mean(vals))


# judge prompts ---------------------------------------------------------------

_INTRO = (
    "I need your help to evaluate the performance of several models in the speech interaction "
    "scenario. The models will receive a speech input from the user, which they need to understand "
    "and respond to with a speech output.\n"
)

OPEN_TEMPLATE = (
    _INTRO
    + "Your task is to rate the model’s responses based on the provided user input transcription "
    "[Instruction] and the model’s output transcription [Response].\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: The response is largely irrelevant, incorrect, or fails to address the user’s query. "
    "It may be off-topic or provide incorrect information.\n"
    "2 points: The response is somewhat relevant but lacks accuracy or completeness. It may only "
    "partially answer the user’s question or include extraneous information.\n"
    "3 points: The response is relevant and mostly accurate, but it may lack conciseness or include "
    "unnecessary details that don’t contribute to the main point.\n"
    "4 points: The response is relevant, accurate, and concise, providing a clear answer to the "
    "user’s question without unnecessary elaboration.\n"
    "5 points: The response is exceptionally relevant, accurate, and to the point. It directly "
    "addresses the user’s query in a highly effective and efficient manner, providing exactly the "
    "information needed.\n"
    "\n"
    "Below are the transcription of user’s instruction and models’ response:\n"
    "### [Instruction]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "After evaluating, please output the score only without anything else.\n"
    "You don’t need to provide any explanations."
)

SEMI_OPEN_TEMPLATE = (
    _INTRO
    + "Your task is to rate the model’s responses based on the provided user input transcription "
    "[Instruction], the model’s output transcription [Response] and some suggested answers "
    "[Reference].\n"
    "The model's response doesn't necessarily have to be identical to the suggested answers, as long "
    "as it aligns with the question and is reasonable.\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: The response is largely irrelevant, incorrect, or fails to address the user's query. It "
    "may be off-topic or provide incorrect information. The response does not align with the question "
    "in any meaningful way.\n"
    "2 points: The response is somewhat relevant but lacks accuracy, completeness, or coherence. It may "
    "partially address the query but introduces unnecessary information or deviates from the core "
    "issue. The response may not align well with the suggested answer but still provides some value.\n"
    "3 points: The response is relevant and mostly accurate, but may lack conciseness or clarity. It "
    "addresses the question reasonably, but there might be slight deviations in approach or content. "
    "While it may not strictly align with the suggested answer, it still effectively addresses the "
    "core of the query.\n"
    "4 points: The response is relevant, accurate, and concise. It provides a clear answer to the "
    "user’s question and avoids unnecessary details. While it may not exactly mirror the suggested "
    "answer, it effectively addresses the user's query in a logical and well-reasoned manner.\n"
    "5 points: The response is exceptionally relevant, accurate, and concise. It directly addresses "
    "the user's query in the most efficient manner, providing exactly the information needed. The "
    "response may differ from the suggested answer in phrasing or approach but still aligns perfectly "
    "with the intent of the query, demonstrating a high level of reasoning and clarity.\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference "
    "answer:\n"
    "### [Instruction]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "### [Reference]\n"
    "{reference}\n"
    "\n"
    "After evaluating, please output the score only without anything else. "
    "You don’t need to provide any explanations."
)

QA_TEMPLATE = (
    _INTRO
    + "Your task is to rate the model’s responses based on the provided user input transcription "
    "[Question], the model’s output transcription [Response] and the correct answer [Reference].\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference "
    "answer:\n"
    "### [Question]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "### [Reference]\n"
    "{reference}\n"
    "\n"
    "Is the model’s response correct based on the question and reference answer?\n"
    'Please only output a single "Yes" or "No". Do not output anything else.'
)

MULTI_ROUND_HEAD = (
    "I need your help to evaluate the performance of several models in the multi-round speech "
    "interaction scenario. The models will receive a speech input from the user, which they need to "
    "understand and respond to with a speech output.\n"
    "Your task is to rate the model’s multi-round responses based on the provided user input "
    "transcription [Instruction], the model’s output transcription [Response] and some suggested "
    "answers [Reference].\n"
    "The model's response doesn't necessarily have to be identical to the suggested answers, as long "
    "as it aligns with the question and is reasonable.\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: Responses are irrelevant or nonsensical. Or responses ignore previous turns, leading to "
    "confusion or irrelevance.\n"
    "2 points: Some answers are relevant but many lack detail or completeness. Frequently loses track "
    "of the conversation, with responses that are not aligned with earlier turns.\n"
    "3 points: Responses are mostly relevant and coherent, though occasional lapses in depth. The model "
    "follows the conversation, but may occasionally forget important details from earlier turns.\n"
    "4 points: Responses are clear, relevant, and detailed. Generally keeps track of the conversation, "
    "with minor lapses.\n"
    "5 points: Responses are clear, relevant, and detailed. Flawlessly integrates context across all "
    "rounds, ensuring natural conversation flow, creating an engaging experience.\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference "
    "answer:\n"
)

MULTI_ROUND_BLOCK = (
    "### [Round_{n}]\n"
    "### [Instruction]\n"
    "{question}\n"
    "### [Response]\n"
    "{answer}\n"
    "### [Reference]\n"
    "{reference}\n"
    "\n"
)

MULTI_ROUND_TAIL = (
    "Please output only one score for the whole conversation without anything else.\n"
    "You don’t need to provide any explanations."
)


@dataclass
class EvalSample:
    id: str
    reference: str | list = ""
    hypothesis: str | list = ""
    question: str | list = ""
    dataset: str = "default"
    mode: str = "repeat"
    audio_tokens: list[int] | None = None
    text_tokens: list[int] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSample":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _need(sample: EvalSample, name: str) -> str:
    val = getattr(sample, name)
    if val is None or val == "" or val == []:
        raise EvalError(f"sample {sample.id}: mode {sample.mode!r} needs a {name!r} slot")
    return val


def render_judge_prompt(sample: EvalSample, mode: str | None = None) -> str:
    mode = mode or sample.mode
    if mode == "open":
        return OPEN_TEMPLATE.format(question=_need(sample, "question"), answer=_need(sample, "hypothesis"))
    if mode == "semi-open":
        return SEMI_OPEN_TEMPLATE.format(question=_need(sample, "question"),
                                         answer=_need(sample, "hypothesis"),
                                         reference=_need(sample, "reference"))
    if mode == "qa":
        return QA_TEMPLATE.format(question=_need(sample, "question"), answer=_need(sample, "hypothesis"),
                                  reference=_need(sample, "reference"))
    if mode == "multi-round":
        qs, ans, refs = (_need(sample, k) for k in ("question", "hypothesis", "reference"))
        if not (isinstance(qs, list) and isinstance(ans, list) and isinstance(refs, list)) \
                or not len(qs) == len(ans) == len(refs):
            raise EvalError(f"sample {sample.id}: multi-round slots must be equal-length lists")
        blocks = "".join(MULTI_ROUND_BLOCK.format(n=i + 1, question=q, answer=a, reference=r)
                         for i, (q, a, r) in enumerate(zip(qs, ans, refs)))
        return MULTI_ROUND_HEAD + blocks + MULTI_ROUND_TAIL
    raise EvalError(f"no judge template for mode {mode!r}")


JudgeClient = Callable[[str], str]


def stub_judge(prompt: str) -> str:
    """Deterministic stand-in for a hosted judge model."""
    return "Yes" if prompt.rstrip().endswith("Do not output anything else.") else "3"


def judge_score_to_100(reply: str, mode: str) -> float:
    reply = reply.strip()
    if mode == "qa":
        return 100.0 if reply.lower().startswith("yes") else 0.0
    m = re.search(r"[1-5]", reply)
    if not m:
        raise EvalError(f"unparseable judge reply {reply!r}")
    return 20.0 * int(m.group())


# reports -----------------------------------------------------------------------

def read_manifest(path) -> list[EvalSample]:
    return [EvalSample.from_dict(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def _as_words(x) -> list:
    return words(x) if isinstance(x, str) else list(x)


@dataclass
class Report:
    datasets: dict[str, float] = field(default_factory=dict)
    asr_wer: dict[str, float] = field(default_factory=dict)
    overall: float = 0.0
    overall_asr_wer: float | None = None
    n_samples: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"datasets": self.datasets, "overall": self.overall, "asr_wer": self.asr_wer,
                "overall_asr_wer": self.overall_asr_wer, "n_samples": self.n_samples}


def evaluate(samples: Iterable[EvalSample], mode: str | None = None, judge: JudgeClient = stub_judge,
             codec: ToyCodec | None = None) -> Report:
    """Score every dataset in the manifest, then average dataset scores."""
    by_ds: dict[str, list[EvalSample]] = {}
    for s in samples:
        by_ds.setdefault(s.dataset, []).append(s)
    if not by_ds:
        raise EvalError("empty manifest")
    rep = Report()
    for ds, items in sorted(by_ds.items()):
        m = mode or items[0].mode
        if m not in MODES:
            raise EvalError(f"unknown mode {m!r}")
        if m == "repeat":
            score = repeat_dataset_score([wer(_as_words(s.reference), _as_words(s.hypothesis)) for s in items])
        else:
            score = float(np.mean([judge_score_to_100(judge(render_judge_prompt(s, m)), m) for s in items]))
        rep.datasets[ds] = score
        rep.n_samples[ds] = len(items)
        with_audio = [s for s in items if s.audio_tokens is not None and s.text_tokens is not None]
        if with_audio and codec is not None:
            rep.asr_wer[ds] = float(np.mean([asr_wer(s.audio_tokens, s.text_tokens, codec) for s in with_audio]))
    rep.overall = overall_score(rep.datasets)
    if rep.asr_wer:
        rep.overall_asr_wer = overall_score(rep.asr_wer)
    return rep

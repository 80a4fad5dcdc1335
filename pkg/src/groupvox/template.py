"""Prompt layout shared by training collation and live sessions.

``[SYS] system... ([HIST] user... [EOS] assistant... [EOS])* [INPUT] speech... [ANSWER]``

Completed rounds appear only as text. The current round's ``[INPUT]`` region
holds speech positions (``None`` in the layout) or, for text-input training
modes, text ids.
"""

from __future__ import annotations

from typing import Sequence

from .vocab import JointVocabulary

DEFAULT_SYSTEM = (6, 7)


def history_block(vocab: JointVocabulary, user: Sequence[int], assistant: Sequence[int]) -> list[int]:
    return [vocab.HIST, *user, vocab.TEXT_EOS, *assistant, vocab.TEXT_EOS]


def prefix_layout(vocab: JointVocabulary, system: Sequence[int], history) -> list[int]:
    """System prompt plus history; the part of a prompt that stays stable across rounds."""
    out = [vocab.SYS, *system]
    for user, assistant in history:
        out.extend(history_block(vocab, user, assistant))
    return out


def prompt_layout(vocab: JointVocabulary, system: Sequence[int], history,
                  n_speech: int = 0, input_text: Sequence[int] | None = None) -> list[int | None]:
    out: list[int | None] = list(prefix_layout(vocab, system, history))
    out.append(vocab.INPUT)
    if input_text is not None:
        out.extend(input_text)
    else:
        out.extend([None] * n_speech)
    out.append(vocab.ANSWER)
    return out

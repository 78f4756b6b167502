"""Structured response grammar: ``<think>...</think><answer>a || b</answer>``.

A response is well formed when the tags appear exactly once each and in
order, with nothing outside them except one trailing end-of-turn token.
The think block may be omitted when ``think_required`` is false. Malformed
responses earn a fixed format penalty and no environment step.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass

from .errors import EncodingError
from .vocab import ANSWER_CLOSE, ANSWER_OPEN, EOT, PAD, SEPARATOR, THINK_CLOSE, THINK_OPEN, Vocabulary

FORMAT_PENALTY = -0.1

_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
_SHAPE = re.compile(
    re.escape(THINK_OPEN) + "(?P<think>.*)" + re.escape(THINK_CLOSE)
    + re.escape(ANSWER_OPEN) + "(?P<answer>.*)" + re.escape(ANSWER_CLOSE), re.S)
_SHAPE_NOTHINK = re.compile(re.escape(ANSWER_OPEN) + "(?P<answer>.*)" + re.escape(ANSWER_CLOSE), re.S)


@dataclass(frozen=True)
class StructuredResponse:
    think_tokens: tuple[int, ...]
    answer_actions: tuple[str, ...]
    raw_tokens: tuple[int, ...] = ()

    @classmethod
    def build(cls, vocab: Vocabulary, actions: Sequence[str], think_tokens: Sequence[int] = ()):
        r = cls(tuple(think_tokens), tuple(actions))
        return cls(r.think_tokens, r.answer_actions, tuple(serialize(r, vocab)))


@dataclass(frozen=True)
class ParseOutcome:
    response: StructuredResponse | None
    format_ok: bool
    penalty: float
    truncated: int = 0

    def __post_init__(self):
        if self.format_ok == (self.penalty == FORMAT_PENALTY):
            raise ValueError("format_ok and penalty are mutually exclusive")


MALFORMED = ParseOutcome(None, False, FORMAT_PENALTY)


def parse_text(text: str, vocab: Vocabulary, *, think_required: bool = True,
               max_actions: int = 5, raw_tokens: Sequence[int] | None = None) -> ParseOutcome:
    if text.endswith(EOT):
        text = text[: -len(EOT)]
    if not text or EOT in text or PAD in text:
        return MALFORMED
    has_think = text.startswith(THINK_OPEN)
    if think_required and not has_think:
        return MALFORMED
    match = (_SHAPE if has_think else _SHAPE_NOTHINK).fullmatch(text)
    if match is None:
        return MALFORMED
    think = match.group("think") if has_think else ""
    answer = match.group("answer")
    if any(tag in think or tag in answer for tag in _TAGS):
        return MALFORMED
    labels = [label.strip() for label in answer.split(SEPARATOR)]
    if any(not label for label in labels):
        return MALFORMED
    truncated = max(0, len(labels) - max_actions)
    try:
        think_ids = tuple(vocab.encode(think))
    except EncodingError:
        return MALFORMED
    if raw_tokens is None:
        raw_tokens = vocab.encode(text)
    response = StructuredResponse(think_ids, tuple(labels[:max_actions]), tuple(raw_tokens))
    return ParseOutcome(response, True, 0.0, truncated)


def parse(raw_tokens: Sequence[int], vocab: Vocabulary, *, think_required: bool = True,
          max_actions: int = 5) -> ParseOutcome:
    """Validate a generated turn (including any prefilled prefix)."""
    return parse_text(vocab.decode(raw_tokens), vocab, think_required=think_required,
                      max_actions=max_actions, raw_tokens=tuple(int(t) for t in raw_tokens))


def serialize(response: StructuredResponse, vocab: Vocabulary) -> list[int]:
    if not response.answer_actions:
        raise EncodingError("a response needs at least one action")
    for label in response.answer_actions:
        if label not in vocab:
            raise EncodingError(f"action {label!r} not in vocabulary")
    ids = [vocab.id(THINK_OPEN), *response.think_tokens, vocab.id(THINK_CLOSE), vocab.id(ANSWER_OPEN)]
    for i, label in enumerate(response.answer_actions):
        if i:
            ids.append(vocab.id(SEPARATOR))
        ids.append(vocab.id(label))
    ids.append(vocab.id(ANSWER_CLOSE))
    return ids

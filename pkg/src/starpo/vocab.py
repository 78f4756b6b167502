"""Token vocabulary and greedy longest-match tokenizer.

Every environment family gets one vocabulary made of

* protocol tokens (pad, end-of-turn, the four tags and the action separator),
* an opaque think sub-vocabulary,
* the family's primitive action labels,
* the observation symbols used to render states.

Text is tokenized by greedy longest match over the token strings, so
``decode(encode(text)) == text`` for any text built from vocabulary strings.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

from .errors import EncodingError

PAD = "<pad>"
EOT = "<eot>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
SEPARATOR = " || "

PROTOCOL_TOKENS = (PAD, EOT, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, SEPARATOR)


def think_tokens(size: int) -> list[str]:
    return [f"<t{i}>" for i in range(size)]


class Vocabulary:
    def __init__(self, tokens: Sequence[str], *, actions: Sequence[str] = (), think_size: int = 0):
        if len(set(tokens)) != len(tokens):
            raise EncodingError("duplicate tokens in vocabulary")
        if any(t == "" for t in tokens):
            raise EncodingError("empty token string")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.actions: tuple[str, ...] = tuple(actions)
        self.think_size = think_size
        # longest first so that " || " wins over " "
        self._by_length = sorted(self.tokens, key=len, reverse=True)
        self._first_char: dict[str, list[str]] = {}
        for t in self._by_length:
            self._first_char.setdefault(t[0], []).append(t)

    @classmethod
    def build(cls, actions: Iterable[str], symbols: Iterable[str], think_size: int = 4) -> "Vocabulary":
        actions = list(dict.fromkeys(actions))
        tokens = list(PROTOCOL_TOKENS) + think_tokens(think_size) + actions
        for s in symbols:
            if s not in tokens:
                tokens.append(s)
        return cls(tokens, actions=actions, think_size=think_size)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise EncodingError(f"token {token!r} not in vocabulary") from None

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eot_id(self) -> int:
        return self.index[EOT]

    @property
    def think_ids(self) -> list[int]:
        return [self.index[t] for t in think_tokens(self.think_size)]

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for cand in self._first_char.get(text[i], ()):
                if text.startswith(cand, i):
                    ids.append(self.index[cand])
                    i += len(cand)
                    break
            else:
                raise EncodingError(f"cannot tokenize {text[i:i + 12]!r} at offset {i}")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise EncodingError(f"token id {i} out of range for vocabulary of {len(self.tokens)}")
            out.append(self.tokens[i])
        return "".join(out)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "actions": list(self.actions), "think_size": self.think_size}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(data["tokens"], actions=data.get("actions", ()), think_size=data.get("think_size", 0))

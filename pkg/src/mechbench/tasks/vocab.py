"""Closed word-level vocabulary.

Tokens keep their leading space (`` John`` and ``John`` are different tokens),
so ``"".join(tokenize(s)) == s`` for every prompt the generators emit.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PAD = "<pad>"
TOKEN_RE = re.compile(r" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]|\n")


class TokenizeError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    tokens = TOKEN_RE.findall(text)
    if "".join(tokens) != text:
        raise TokenizeError(f"text does not round-trip through the tokenizer: {text!r}")
    return tokens


def answer_token(text: str) -> str:
    """Completion tokens carry a leading space, e.g. ``" John"`` or ``" 42"``."""
    return text if text.startswith(" ") else " " + text


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            tokens = [PAD] + [t for t in tokens if t != PAD]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens: list[str] = tokens
        self.index: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        out = []
        for tok in tokenize(text):
            if tok not in self.index:
                raise KeyError(f"token {tok!r} is not in the vocabulary")
            out.append(self.index[tok])
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.pad_id)

    def token_id(self, token: str) -> int:
        if token not in self.index:
            raise KeyError(f"token {token!r} is not in the vocabulary")
        return self.index[token]

    def answer_id(self, text: str) -> int:
        return self.token_id(answer_token(text))


def build_vocab(instances: Iterable, extra_tokens: Iterable[str] = ()) -> Vocab:
    """Vocabulary over every prompt, choice and counterfactual in ``instances``.

    ``extra_tokens`` registers attribute pools up front so that splits not
    passed in (e.g. the private test split) are still covered.
    """
    seen: dict[str, None] = {}
    for inst in instances:
        for prompt, choices in inst.iter_prompts():
            for tok in tokenize(prompt):
                seen.setdefault(tok, None)
            for c in choices:
                seen.setdefault(answer_token(c), None)
    for tok in extra_tokens:
        for t in tokenize(tok):
            seen.setdefault(t, None)
    return Vocab([PAD] + sorted(seen))

"""Turning task instances into padded token batches and (base, counterfactual) pairs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import torch

from .tasks.common import TaskInstance
from .tasks.vocab import Vocab


def encode_prompts(vocab: Vocab, prompts: Sequence[str], length: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-padded token ids and a boolean mask of real tokens."""
    seqs = [vocab.encode(p) for p in prompts]
    T = max([len(s) for s in seqs] + [length or 0])
    toks = torch.full((len(seqs), T), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        toks[i, T - len(s):] = torch.tensor(s, dtype=torch.long)
        mask[i, T - len(s):] = True
    return toks, mask


@dataclass
class PromptBatch:
    tokens: torch.Tensor
    mask: torch.Tensor
    answers: torch.Tensor

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx: Sequence[int] | torch.Tensor) -> "PromptBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PromptBatch(self.tokens[idx], self.mask[idx], self.answers[idx])


def training_prompts(instances: Sequence[TaskInstance], with_counterfactuals: bool = True) -> list[tuple[str, str]]:
    """(prompt, answer) pairs; counterfactual prompts with a defined answer are included once each."""
    seen: dict[str, str] = {}
    for inst in instances:
        seen.setdefault(inst.prompt, inst.answer)
        if with_counterfactuals:
            for name in sorted(inst.counterfactuals):
                cf = inst.counterfactuals[name]
                if cf.answerKey >= 0:
                    seen.setdefault(cf.prompt, cf.answer)
    return list(seen.items())


def prompt_batch(vocab: Vocab, items: Sequence[tuple[str, str]]) -> PromptBatch:
    toks, mask = encode_prompts(vocab, [p for p, _ in items])
    answers = torch.tensor([vocab.answer_id(a) for _, a in items], dtype=torch.long)
    return PromptBatch(toks, mask, answers)


@dataclass
class PairBatch:
    """Base prompts aligned (by final token) with one named counterfactual each."""

    clean: torch.Tensor
    clean_mask: torch.Tensor
    corrupt: torch.Tensor
    corrupt_mask: torch.Tensor
    answer: torch.Tensor  # y: correct answer on the base prompt
    cf_answer: torch.Tensor  # y': correct answer on the counterfactual
    counterfactual: str

    def __len__(self) -> int:
        return self.clean.shape[0]

    def subset(self, idx: Sequence[int] | torch.Tensor) -> "PairBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PairBatch(self.clean[idx], self.clean_mask[idx], self.corrupt[idx], self.corrupt_mask[idx],
                         self.answer[idx], self.cf_answer[idx], self.counterfactual)

    def chunks(self, size: int):
        for start in range(0, len(self), size):
            yield self.subset(torch.arange(start, min(start + size, len(self))))

    def digest(self) -> str:
        h = hashlib.sha256(self.counterfactual.encode())
        for t in (self.clean, self.clean_mask, self.corrupt, self.corrupt_mask, self.answer, self.cf_answer):
            h.update(t.numpy().tobytes())
        return h.hexdigest()[:16]


def cf_answer_text(inst: TaskInstance, name: str) -> str:
    cf = inst.cf(name)
    if cf.answerKey >= 0:
        return cf.answer  # type: ignore[return-value]
    # No defined answer (IOI "abc"): contrast against the base subject instead.
    return inst.metadata["subject"]


def make_pairs(vocab: Vocab, instances: Sequence[TaskInstance], counterfactual: str) -> PairBatch:
    if not instances:
        raise ValueError("no instances to pair")
    base = [inst.prompt for inst in instances]
    cfs = [inst.cf(counterfactual).prompt for inst in instances]
    T = max(len(vocab.encode(p)) for p in base + cfs)
    clean, cmask = encode_prompts(vocab, base, T)
    corrupt, kmask = encode_prompts(vocab, cfs, T)
    ans = torch.tensor([vocab.answer_id(inst.answer) for inst in instances], dtype=torch.long)
    cf_ans = torch.tensor([vocab.answer_id(cf_answer_text(inst, counterfactual)) for inst in instances], dtype=torch.long)
    return PairBatch(clean, cmask, corrupt, kmask, ans, cf_ans, counterfactual)


def dataset_hash(instances: Sequence[TaskInstance]) -> str:
    h = hashlib.sha256()
    for inst in instances:
        h.update(json.dumps(inst.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:16]

"""Task registry: generators, vocabulary pools and the counterfactual each track uses."""

from __future__ import annotations

from typing import Any

from . import arithmetic, ioi, mcqa
from .common import COUNTERFACTUALS, SPLITS, Counterfactual, TaskInstance, io_roundtrip, read_jsonl, write_jsonl
from .vocab import Vocab, build_vocab

TASKS = ("ioi", "arithmetic", "mcqa")

# Counterfactual paired with each base prompt for circuit discovery/evaluation.
CIRCUIT_COUNTERFACTUAL = {"ioi": "abc", "arithmetic": "random_operands", "mcqa": "answer_position"}


def generate(task: str, n: int, seed: int, split: str = "train", **kwargs: Any) -> list[TaskInstance]:
    if task == "ioi":
        return ioi.gen_ioi(n, seed, split)
    if task == "arithmetic":
        return arithmetic.gen_arithmetic(n, seed=seed, split=split, **kwargs)
    if task == "mcqa":
        return mcqa.gen_mcqa(n, seed=seed, split=split, **kwargs)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def all_tokens(task: str) -> list[str]:
    return {"ioi": ioi.all_tokens, "arithmetic": arithmetic.all_tokens, "mcqa": mcqa.all_tokens}[task]()


def task_vocab(task: str, instances: list[TaskInstance] = ()) -> Vocab:  # type: ignore[assignment]
    """Vocabulary covering every split of ``task`` (pools registered up front)."""
    return build_vocab(instances, extra_tokens=all_tokens(task))


def check_instance(inst: TaskInstance) -> None:
    {"ioi": ioi.check_instance, "arithmetic": arithmetic.check_instance, "mcqa": mcqa.check_instance}[inst.task](inst)


__all__ = [
    "COUNTERFACTUALS", "SPLITS", "TASKS", "CIRCUIT_COUNTERFACTUAL", "Counterfactual", "TaskInstance",
    "Vocab", "build_vocab", "generate", "all_tokens", "task_vocab", "check_instance",
    "io_roundtrip", "read_jsonl", "write_jsonl",
]

"""Shared record layout, split handling and JSONL persistence for task datasets."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

SPLITS = ("train", "validation", "test_public", "test_private")
CF_SUFFIX = "_counterfactual"


class PoolExhaustedError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


@dataclass(frozen=True)
class Counterfactual:
    prompt: str
    choices: tuple[str, ...]
    answerKey: int
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def answer(self) -> str | None:
        return None if self.answerKey < 0 else self.choices[self.answerKey]

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "choices": list(self.choices), "answerKey": self.answerKey, "metadata": dict(self.metadata)}


@dataclass(frozen=True)
class TaskInstance:
    task: str
    prompt: str
    template: str
    metadata: Mapping[str, Any]
    choices: tuple[str, ...]
    answerKey: int
    counterfactuals: Mapping[str, Counterfactual]

    def __post_init__(self) -> None:
        if not 0 <= self.answerKey < len(self.choices):
            raise ValueError(f"answerKey {self.answerKey} does not index {len(self.choices)} choices")
        allowed = COUNTERFACTUALS.get(self.task)
        if allowed is not None:
            unknown = set(self.counterfactuals) - set(allowed)
            if unknown:
                raise ValueError(f"unknown counterfactual(s) for {self.task}: {sorted(unknown)}")

    @property
    def answer(self) -> str:
        return self.choices[self.answerKey]

    def cf(self, name: str) -> Counterfactual:
        try:
            return self.counterfactuals[name]
        except KeyError:
            raise KeyError(f"instance has no counterfactual {name!r}") from None

    def iter_prompts(self) -> Iterator[tuple[str, Sequence[str]]]:
        yield self.prompt, self.choices
        for name in sorted(self.counterfactuals):
            c = self.counterfactuals[name]
            yield c.prompt, c.choices

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "prompt": self.prompt,
            "template": self.template,
            "metadata": dict(self.metadata),
            "choices": list(self.choices),
            "answerKey": self.answerKey,
        }
        for name in COUNTERFACTUALS[self.task]:
            if name in self.counterfactuals:
                out[name + CF_SUFFIX] = self.counterfactuals[name].to_json()
        return out

    @classmethod
    def from_json(cls, task: str, obj: Mapping[str, Any]) -> "TaskInstance":
        base_keys = {"prompt", "template", "metadata", "choices", "answerKey"}
        missing = base_keys - set(obj)
        if missing:
            raise ValueError(f"missing field(s) {sorted(missing)}")
        cfs = {}
        for key, value in obj.items():
            if key in base_keys:
                continue
            if not key.endswith(CF_SUFFIX) or key[: -len(CF_SUFFIX)] not in COUNTERFACTUALS[task]:
                raise ValueError(f"unknown key {key!r} for task {task}")
            cfs[key[: -len(CF_SUFFIX)]] = Counterfactual(
                value["prompt"], tuple(value["choices"]), int(value["answerKey"]), value.get("metadata", {})
            )
        return cls(task, obj["prompt"], obj["template"], obj["metadata"], tuple(obj["choices"]), int(obj["answerKey"]), cfs)


# Filled by the task modules at import time.
COUNTERFACTUALS: dict[str, tuple[str, ...]] = {}


@dataclass(frozen=True)
class SplitSpec:
    split: str
    pools: Mapping[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}; expected one of {SPLITS}")

    def pool(self, name: str) -> tuple[str, ...]:
        return self.pools[name]


def make_split(split: str, public: Mapping[str, Sequence[str]], private: Mapping[str, Sequence[str]]) -> SplitSpec:
    # Public splits share one pool set so a trained toy model can be evaluated on
    # held-out combinations; only the private split draws from unseen attributes.
    src = private if split == "test_private" else public
    return SplitSpec(split, {k: tuple(v) for k, v in src.items()})


def rng_for(task: str, seed: int, split: str, salt: str = "") -> random.Random:
    return random.Random(f"{task}|{seed}|{split}|{salt}")


def write_jsonl(instances: Iterable[TaskInstance], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=False, ensure_ascii=False))
            fh.write("\n")
    return path


def read_jsonl(path: str | Path, task: str) -> list[TaskInstance]:
    if task not in COUNTERFACTUALS:
        raise ValueError(f"unknown task {task!r}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(TaskInstance.from_json(task, json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(lineno, str(exc)) from exc
    return out


def io_roundtrip(instances: Sequence[TaskInstance], path: str | Path) -> list[TaskInstance]:
    instances = list(instances)
    task = instances[0].task if instances else next(iter(COUNTERFACTUALS), "ioi")
    write_jsonl(instances, path)
    return read_jsonl(path, task)

"""Color multiple-choice questions with semantic and format counterfactuals."""

from __future__ import annotations

import random
import string
from typing import Sequence

from .common import COUNTERFACTUALS, Counterfactual, PoolExhaustedError, SplitSpec, TaskInstance, make_split, rng_for

TASK = "mcqa"

CF_NAMES = (
    "noun",
    "color",
    "noun_color",
    "answer_position",
    "symbol",
    "random_letter",
    "answer_position_random_letter",
    "answer_position_symbol",
    "answer_position_color",
)
COUNTERFACTUALS[TASK] = CF_NAMES

COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray")

PUBLIC = {
    "objects": (
        "banana", "tomato", "grass", "snow", "coal", "sky",
        "carrot", "lemon", "cherry", "milk", "chocolate", "flamingo",
    ),
    "colors": COLORS,
}
PRIVATE = {
    "objects": ("lime", "cloud", "strawberry", "eggplant"),
    "colors": COLORS,
}
OBJECT_COLOR = {
    "banana": "yellow", "tomato": "red", "grass": "green", "snow": "white", "coal": "black", "sky": "blue",
    "carrot": "orange", "lemon": "yellow", "cherry": "red", "milk": "white", "chocolate": "brown",
    "flamingo": "pink", "lime": "green", "cloud": "white", "strawberry": "red", "eggplant": "purple",
}

TEMPLATE = "Question: The {object} is {color}. What color is the {object}?\n{options}\nAnswer:"
LETTERS = tuple(string.ascii_uppercase)


def split_spec(split: str) -> SplitSpec:
    return make_split(split, PUBLIC, PRIVATE)


def render(obj: str, color: str, options: Sequence[str], labels: Sequence[str]) -> str:
    lines = "\n".join(f"{lab}. {opt}" for lab, opt in zip(labels, options))
    return TEMPLATE.format(object=obj, color=color, options=lines)


def _record(obj: str, color: str, options: Sequence[str], labels: Sequence[str]) -> Counterfactual:
    pos = list(options).index(color)
    return Counterfactual(render(obj, color, options, labels), tuple(labels), pos,
                          {"object": obj, "color": color, "options": list(options)})


def make_instance(
    obj: str,
    color: str,
    options: Sequence[str],
    *,
    new_object: str,
    new_color: str,
    new_position: int,
    random_letters: Sequence[str],
) -> TaskInstance:
    """Build one instance; ``options`` must contain ``color`` exactly once."""
    n = len(options)
    if list(options).count(color) != 1:
        raise ValueError("the correct color must appear exactly once among the options")
    if new_color in options:
        raise ValueError("replacement color must not already be an option")
    labels = LETTERS[:n]
    symbols = tuple(str(i + 1) for i in range(n))
    pos = list(options).index(color)
    if new_position == pos:
        raise ValueError("answer-position counterfactual must move the answer")
    moved = list(options)
    moved[pos], moved[new_position] = moved[new_position], moved[pos]
    recolored = [new_color if o == color else o for o in options]
    moved_recolored = [new_color if o == color else o for o in moved]
    cfs = {
        "noun": _record(new_object, color, options, labels),
        "color": _record(obj, new_color, recolored, labels),
        "noun_color": _record(new_object, new_color, recolored, labels),
        "answer_position": _record(obj, color, moved, labels),
        "symbol": _record(obj, color, options, symbols),
        "random_letter": _record(obj, color, options, random_letters),
        "answer_position_random_letter": _record(obj, color, moved, random_letters),
        "answer_position_symbol": _record(obj, color, moved, symbols),
        "answer_position_color": _record(obj, new_color, moved_recolored, labels),
    }
    meta = {"object": obj, "color": color, "options": list(options), "n_choices": n}
    return TaskInstance(TASK, render(obj, color, options, labels), TEMPLATE, meta, tuple(labels), pos, cfs)


def gen_mcqa(n: int, n_choices: int = 4, seed: int = 0, split: str = "train") -> list[TaskInstance]:
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 2 <= n_choices <= 10:
        raise ValueError("n_choices must be between 2 and 10")
    spec = split_spec(split)
    objects, colors = spec.pool("objects"), spec.pool("colors")
    if len(objects) < 2:
        raise PoolExhaustedError(f"need at least two objects in split {split!r}")
    if len(colors) < n_choices + 1:
        raise PoolExhaustedError(f"need {n_choices + 1} colors for {n_choices} choices, have {len(colors)}")
    rng = rng_for(TASK, seed, f"{split}|{n_choices}")
    out = []
    for _ in range(n):
        obj = rng.choice(objects)
        color = OBJECT_COLOR[obj]
        distractors = rng.sample([c for c in colors if c != color], n_choices - 1)
        pos = rng.randrange(n_choices)
        options = distractors[:pos] + [color] + distractors[pos:]
        out.append(make_instance(
            obj, color, options,
            new_object=rng.choice([o for o in objects if o != obj]),
            new_color=rng.choice([c for c in colors if c not in options]),
            new_position=rng.choice([i for i in range(n_choices) if i != pos]),
            random_letters=_random_letters(rng, n_choices),
        ))
    return out


def _random_letters(rng: random.Random, n: int) -> tuple[str, ...]:
    while True:
        letters = tuple(rng.sample(LETTERS, n))
        if letters != LETTERS[:n]:
            return letters


def all_tokens() -> list[str]:
    out = [render(PUBLIC["objects"][0], COLORS[0], COLORS[:10], LETTERS[:10])]
    out += [" " + o for pools in (PUBLIC, PRIVATE) for o in pools["objects"]]
    out += [" " + c for c in COLORS]
    out += [x for lab in LETTERS for x in (lab, " " + lab)]
    out += [x for i in range(1, 11) for x in (str(i), " " + str(i))]
    return out


def check_instance(inst: TaskInstance) -> None:
    m = inst.metadata
    if m["options"][inst.answerKey] != m["color"]:
        raise AssertionError("base answer does not point at the stated color")
    for name, cf in inst.counterfactuals.items():
        cm = cf.metadata
        if cm["options"][cf.answerKey] != cm["color"]:
            raise AssertionError(f"counterfactual {name} answer does not point at the stated color")

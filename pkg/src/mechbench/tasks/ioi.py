"""Indirect-object identification prompts with their fixed name-swap counterfactuals."""

from __future__ import annotations

from typing import Sequence

from .common import COUNTERFACTUALS, Counterfactual, PoolExhaustedError, SplitSpec, TaskInstance, make_split, rng_for

TASK = "ioi"

CF_NAMES = (
    "abc",
    "random_names",
    "s1_io_flip",
    "s2_io_flip",
    "random_names_s1_io_flip",
    "random_names_s2_io_flip",
    "s1_io_flip_s2_io_flip",
    "random_names_s1_io_flip_s2_io_flip",
)
COUNTERFACTUALS[TASK] = CF_NAMES

# Counterfactuals used by the causal track, with which subject signal each one inverts.
SIGNAL_FLIPS = {
    "s1_io_flip": (True, False),  # (position inverted, token inverted)
    "s2_io_flip": (False, True),
    "s1_io_flip_s2_io_flip": (True, True),
}

PUBLIC = {
    "templates": (
        "After {name_A} and {name_B} spent some time at the {place}, {name_C} offered a {object} to",
        "When {name_A} and {name_B} went to the {place}, {name_C} gave a {object} to",
        "Then, {name_A} and {name_B} had a long talk at the {place}. {name_C} handed a {object} to",
        "While {name_A} and {name_B} were working at the {place}, {name_C} passed a {object} to",
        "Friends {name_A} and {name_B} found a {object} at the {place}. {name_C} threw the {object} to",
        "Afterwards {name_A} and {name_B} met at the {place}, and {name_C} brought a {object} to",
    ),
    "names": (
        "John", "Mary", "Nick", "Anna", "Tom", "Kate", "Max", "Fred", "Bob", "Lisa", "Paul", "Emma",
        "Mark", "Sara", "Jack", "Lucy", "Adam", "Rose", "Dave", "Jane", "Sam", "Ruth", "Ben", "Nora",
    ),
    "places": (
        "store", "park", "school", "beach", "garden", "office",
        "station", "market", "library", "hospital", "museum", "restaurant",
    ),
    "objects": ("nail", "book", "drink", "ball", "apple", "key", "ring", "pen", "cup", "hat", "letter", "bottle"),
}
PRIVATE = {
    "templates": (
        "Once {name_A} and {name_B} walked into the {place}, {name_C} showed a {object} to",
        "Yesterday {name_A} and {name_B} cleaned the {place}, so {name_C} lent a {object} to",
    ),
    "names": ("Oscar", "Hugo", "Iris", "Leon", "Vera", "Ivan", "Zoe", "Carl"),
    "places": ("harbor", "stadium", "theater", "bakery"),
    "objects": ("kite", "lamp", "coin", "scarf"),
}


def split_spec(split: str) -> SplitSpec:
    return make_split(split, PUBLIC, PRIVATE)


def all_tokens() -> list[str]:
    """Every attribute and template word across all splits, for vocabulary building."""
    out: list[str] = []
    for pools in (PUBLIC, PRIVATE):
        n = pools["names"]
        for t in pools["templates"]:
            out.append(fill(t, n[0], n[1], n[2], pools["places"][0], pools["objects"][0]))
        out += [" " + n for n in pools["names"]]
        out += [" " + p for p in pools["places"]]
        out += [" " + o for o in pools["objects"]]
    return out


def fill(template: str, a: str, b: str, c: str, place: str, obj: str) -> str:
    return template.format(name_A=a, name_B=b, name_C=c, place=place, object=obj)


def _answer(a: str, b: str, c: str) -> str:
    # the first-clause name that is not repeated
    return b if c == a else a


def _cf(template: str, names: tuple[str, str, str], place: str, obj: str) -> Counterfactual:
    a, b, c = names
    ans = _answer(a, b, c)
    return Counterfactual(
        fill(template, a, b, c, place, obj), (a, b), (a, b).index(ans), {"name_A": a, "name_B": b, "name_C": c}
    )


def make_instance(
    template: str,
    io: str,
    subject: str,
    place: str,
    obj: str,
    random_names: Sequence[str],
    subject_first: bool = True,
) -> TaskInstance:
    """Build one instance from explicit attributes.

    ``random_names`` is (random_a, random_b, random_c); random_a/random_b
    replace the base pair in first-clause order, random_c is the third name of
    the ABC counterfactual.
    """
    ra, rb, rc = random_names
    if len({io, subject, ra, rb, rc}) != 5:
        raise ValueError("IO, subject and the three random names must be distinct")
    a, b = (subject, io) if subject_first else (io, subject)
    c = subject
    base = (a, b, c)

    def s1(n: tuple[str, str, str]) -> tuple[str, str, str]:
        return (n[1], n[0], n[2])

    def s2(n: tuple[str, str, str]) -> tuple[str, str, str]:
        other = n[1] if n[2] == n[0] else n[0]
        return (n[0], n[1], other)

    rename = {a: ra, b: rb}
    rnd = (ra, rb, rename[c])
    abc_prompt = fill(template, a, b, rc, place, obj)
    cfs = {
        "abc": Counterfactual(abc_prompt, (io, subject, rc), -1, {"name_A": a, "name_B": b, "name_C": rc}),
        "random_names": _cf(template, rnd, place, obj),
        "s1_io_flip": _cf(template, s1(base), place, obj),
        "s2_io_flip": _cf(template, s2(base), place, obj),
        "random_names_s1_io_flip": _cf(template, s1(rnd), place, obj),
        "random_names_s2_io_flip": _cf(template, s2(rnd), place, obj),
        "s1_io_flip_s2_io_flip": _cf(template, s2(s1(base)), place, obj),
        "random_names_s1_io_flip_s2_io_flip": _cf(template, s2(s1(rnd)), place, obj),
    }
    meta = {
        "indirect_object": io,
        "subject": subject,
        "object": obj,
        "place": place,
        "random_a": ra,
        "random_b": rb,
        "random_c": rc,
        "name_A": a,
        "name_B": b,
        "name_C": c,
    }
    return TaskInstance(TASK, fill(template, a, b, c, place, obj), template, meta, (io, subject), 0, cfs)


def gen_ioi(n: int, seed: int, split: str = "train") -> list[TaskInstance]:
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = split_spec(split)
    names = spec.pool("names")
    if len(names) < 5:
        raise PoolExhaustedError(f"IOI needs at least 5 distinct names, split {split!r} has {len(names)}")
    if not spec.pool("places") or not spec.pool("objects") or not spec.pool("templates"):
        raise PoolExhaustedError(f"empty attribute pool for split {split!r}")
    rng = rng_for(TASK, seed, split)
    out = []
    for _ in range(n):
        template = rng.choice(spec.pool("templates"))
        io, subject, ra, rb, rc = rng.sample(names, 5)
        out.append(make_instance(
            template, io, subject, rng.choice(spec.pool("places")), rng.choice(spec.pool("objects")),
            (ra, rb, rc), subject_first=rng.random() < 0.5,
        ))
    return out


def check_instance(inst: TaskInstance) -> None:
    """Re-derive every answer from the names in the prompt; raises on mismatch."""
    m = inst.metadata
    if inst.answer != _answer(m["name_A"], m["name_B"], m["name_C"]) or inst.answer != m["indirect_object"]:
        raise AssertionError("base answer does not match the IO")
    words = inst.prompt.replace(",", " ").replace(".", " ").split()
    if words.count(m["subject"]) != 2 or words.count(m["indirect_object"]) != 1:
        raise AssertionError("subject must appear twice and the IO once")
    for name, cf in inst.counterfactuals.items():
        if cf.answerKey < 0:
            continue
        cm = cf.metadata
        if cf.answer != _answer(cm["name_A"], cm["name_B"], cm["name_C"]):
            raise AssertionError(f"counterfactual {name} answer mismatch")

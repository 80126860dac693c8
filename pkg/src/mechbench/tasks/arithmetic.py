"""Two-operand addition/subtraction prompts with digit- and carry-level counterfactuals."""

from __future__ import annotations

import functools
import random
from typing import Callable

from .common import COUNTERFACTUALS, Counterfactual, PoolExhaustedError, TaskInstance, rng_for

TASK = "arithmetic"

CF_NAMES = (
    "random_operands",
    "ones_op1",
    "ones_op2",
    "tens_op1",
    "tens_op2",
    "ones_carry",
    "tens_carry",
)
COUNTERFACTUALS[TASK] = CF_NAMES

TEMPLATES = {
    "+": (
        "Q: How much is {n1} plus {n2}? A:",
        "Q: What is {n1} plus {n2}? A:",
        "Q: What is the result of {n1} plus {n2}? A:",
        "The sum of {n1} and {n2} is:",
        "{n1}+{n2}=",
        "{n1} + {n2} =",
    ),
    "-": (
        "Q: How much is {n1} minus {n2}? A:",
        "Q: What is {n1} minus {n2}? A:",
        "Q: What is the result of {n1} minus {n2}?",
        "The difference between {n1} and {n2} is:",
        "{n1}-{n2}=",
        "{n1} - {n2} =",
    ),
}


def compute(op: str, x: int, y: int) -> int:
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    raise ValueError(f"unknown operator {op!r}")


def ones_carry(op: str, x: int, y: int) -> bool:
    """Carry out of the ones column (a borrow for subtraction)."""
    if op == "+":
        return x % 10 + y % 10 >= 10
    return x % 10 < y % 10


def tens_carry(op: str, x: int, y: int) -> bool:
    """Carry out of the tens column; for subtraction, whether the result keeps a tens digit."""
    if op == "+":
        return x // 10 + y // 10 + int(ones_carry(op, x, y)) >= 10
    return x - y >= 10


def is_private_pair(x: int, y: int) -> bool:
    # fixed hash partition: about one operand pair in ten is reserved for the private split
    return (x * 131 + y * 197) % 10 == 3


def _valid(op: str, x: int, y: int, lo: int, hi: int) -> bool:
    return lo <= x <= hi and lo <= y <= hi and (op == "+" or x - y > 0)


def _pick(rng: random.Random, name: str, cands: list[tuple[int, int]]) -> tuple[int, int]:
    if not cands:
        raise PoolExhaustedError(f"operand range too narrow for counterfactual {name!r}")
    return rng.choice(cands)


def _random_pair(rng: random.Random, op: str, x: int, y: int, lo: int, hi: int) -> tuple[int, int]:
    for _ in range(10_000):
        a, b = rng.randint(lo, hi), rng.randint(lo, hi)
        if _valid(op, a, b, lo, hi) and (a, b) != (x, y):
            return a, b
    raise PoolExhaustedError("operand range too narrow for counterfactual 'random_operands'")


def _cf_candidates(op: str, x: int, y: int, lo: int, hi: int) -> dict[str, list[tuple[int, int]]]:
    def ok(a: int, b: int) -> bool:
        return _valid(op, a, b, lo, hi) and (a, b) != (x, y)

    xt, xo, yt, yo = x // 10, x % 10, y // 10, y % 10
    digits = range(10)
    cands: dict[str, list[tuple[int, int]]] = {
        "ones_op1": [(xt * 10 + d, y) for d in digits if d != xo and ok(xt * 10 + d, y)],
        "ones_op2": [(x, yt * 10 + d) for d in digits if d != yo and ok(x, yt * 10 + d)],
        "tens_op1": [(d * 10 + xo, y) for d in digits if d != xt and ok(d * 10 + xo, y)],
        "tens_op2": [(x, d * 10 + yo) for d in digits if d != yt and ok(x, d * 10 + yo)],
    }
    base_oc, base_tc = ones_carry(op, x, y), tens_carry(op, x, y)
    cands["ones_carry"] = [
        (xt * 10 + a, yt * 10 + b)
        for a in digits for b in digits
        if ok(xt * 10 + a, yt * 10 + b) and ones_carry(op, xt * 10 + a, yt * 10 + b) != base_oc
    ]
    # prefer changing only the first operand's tens digit, fall back to both
    single = [(d * 10 + xo, y) for d in digits if ok(d * 10 + xo, y) and tens_carry(op, d * 10 + xo, y) != base_tc]
    cands["tens_carry"] = single or [
        (a * 10 + xo, b * 10 + yo)
        for a in digits for b in digits
        if ok(a * 10 + xo, b * 10 + yo) and tens_carry(op, a * 10 + xo, b * 10 + yo) != base_tc
    ]
    return cands


def make_instance(
    op: str,
    x: int,
    y: int,
    template_id: int,
    counterfactual_operands: dict[str, tuple[int, int]],
) -> TaskInstance:
    template = TEMPLATES[op][template_id]

    def record(a: int, b: int) -> Counterfactual:
        return Counterfactual(template.format(n1=a, n2=b), (str(compute(op, a, b)),), 0,
                              {"operand1": a, "operand2": b})

    cfs = {name: record(*counterfactual_operands[name]) for name in CF_NAMES if name in counterfactual_operands}
    meta = {"operator": op, "operand1": x, "operand2": y, "template_id": template_id}
    return TaskInstance(TASK, template.format(n1=x, n2=y), template, meta, (str(compute(op, x, y)),), 0, cfs)


@functools.lru_cache(maxsize=None)
def _bases(op: str, lo: int, hi: int, private: bool) -> tuple[tuple[int, int], ...]:
    """Valid base pairs for which every counterfactual family has a candidate."""
    return tuple(
        (a, b) for a in range(lo, hi + 1) for b in range(lo, hi + 1)
        if _valid(op, a, b, lo, hi) and is_private_pair(a, b) == private
        and all(_cf_candidates(op, a, b, lo, hi).values())
    )


def gen_arithmetic(
    n: int,
    op: str = "+",
    ranges: tuple[int, int] = (10, 99),
    seed: int = 0,
    split: str = "train",
) -> list[TaskInstance]:
    if n < 1:
        raise ValueError("n must be at least 1")
    if op not in TEMPLATES:
        raise ValueError(f"unknown operator {op!r}")
    lo, hi = ranges
    if not (0 <= lo <= hi <= 99):
        raise ValueError("operands must be at most two digits")
    bases = _bases(op, lo, hi, split == "test_private")
    if not bases:
        raise PoolExhaustedError(f"no valid operand pairs in range {ranges} for split {split!r}")
    rng = rng_for(f"{TASK}{op}", seed, split)
    out = []
    for _ in range(n):
        x, y = rng.choice(bases)
        cands = _cf_candidates(op, x, y, lo, hi)
        chosen = {"random_operands": _random_pair(rng, op, x, y, lo, hi)}
        chosen.update({name: _pick(rng, name, cands[name]) for name in CF_NAMES[1:]})
        out.append(make_instance(op, x, y, rng.randrange(len(TEMPLATES[op])), chosen))
    return out


def all_tokens(ranges: tuple[int, int] = (10, 99)) -> list[str]:
    lo, hi = ranges
    out = [t.format(n1=lo, n2=lo) for op in TEMPLATES for t in TEMPLATES[op]]
    for v in range(0, 2 * hi + 1):
        out += [str(v), " " + str(v)]
    return out


def check_instance(inst: TaskInstance) -> None:
    op = inst.metadata["operator"]
    if inst.answer != str(compute(op, inst.metadata["operand1"], inst.metadata["operand2"])):
        raise AssertionError("base answer mismatch")
    for name, cf in inst.counterfactuals.items():
        if cf.answer != str(compute(op, cf.metadata["operand1"], cf.metadata["operand2"])):
            raise AssertionError(f"counterfactual {name} answer mismatch")


CARRY_TEST: dict[str, Callable[[str, int, int], bool]] = {"ones_carry": ones_carry, "tens_carry": tens_carry}

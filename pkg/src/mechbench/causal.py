"""High-level causal models with hard interventions, and the IOI linear-signal fit."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .tasks.common import Counterfactual, TaskInstance


class CausalModelError(ValueError):
    pass


@dataclass(frozen=True)
class CausalModel:
    """Variables listed in topological order; the first one is the raw input."""

    name: str
    variables: tuple[str, ...]
    parents: Mapping[str, tuple[str, ...]]
    mechanisms: Mapping[str, Callable[..., Any]]
    output: str
    readout: Callable[[dict[str, Any]], Any] | None = None  # final answer from all values; default: the output variable

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for var in self.variables:
            for p in self.parents.get(var, ()):
                if p not in seen:
                    raise CausalModelError(f"{var} depends on {p}, which is not earlier in the order")
            if var != self.variables[0] and var not in self.mechanisms:
                raise CausalModelError(f"no mechanism for {var}")
            seen.add(var)
        if self.output not in seen:
            raise CausalModelError(f"unknown output variable {self.output}")

    @property
    def input_var(self) -> str:
        return self.variables[0]

    def run(self, inp: Any, interventions: Mapping[str, Any] | None = None) -> dict[str, Any]:
        interventions = dict(interventions or {})
        unknown = set(interventions) - set(self.variables)
        if unknown:
            raise CausalModelError(f"unknown variable(s) {sorted(unknown)}")
        values: dict[str, Any] = {self.input_var: inp}
        for var in self.variables[1:]:
            if var in interventions:
                values[var] = interventions[var]
            else:
                values[var] = self.mechanisms[var](*(values[p] for p in self.parents.get(var, ())))
        return values

    def output_of(self, inp: Any, interventions: Mapping[str, Any] | None = None) -> Any:
        values = self.run(inp, interventions)
        return values[self.output] if self.readout is None else self.readout(values)

    def interchange(self, base: Any, source: Any, variables: Sequence[str]) -> Any:
        """Output on ``base`` with ``variables`` fixed to their values on ``source``."""
        src = self.run(source)
        return self.output_of(base, {v: src[v] for v in variables})


# ----------------------------------------------------------------------------
# MCQA: the answer position, then the label found there

def _mcqa_record(inp: Any) -> tuple[tuple[str, ...], int]:
    if isinstance(inp, (TaskInstance, Counterfactual)):
        return tuple(inp.choices), int(inp.answerKey)
    try:
        labels, key = tuple(inp["choices"]), int(inp["answerKey"])
    except (KeyError, TypeError) as exc:
        raise CausalModelError(f"not an MCQA instance: {inp!r}") from exc
    return labels, key


def _order(inp: Any) -> int:
    labels, key = _mcqa_record(inp)
    if not 0 <= key < len(labels):
        raise CausalModelError("answer key outside the choice list")
    return key


def _answer_at(inp: Any, order: int) -> str:
    labels, _ = _mcqa_record(inp)
    if not 0 <= order < len(labels):
        raise CausalModelError(f"answer position {order} outside {len(labels)} choices")
    return labels[order]


H_MCQA = CausalModel(
    "mcqa",
    ("T", "X_Order", "O_Answer"),
    {"X_Order": ("T",), "O_Answer": ("T", "X_Order")},
    {"X_Order": _order, "O_Answer": _answer_at},
    "O_Answer",
)


def h_mcqa_run(inp: Any, interventions: Mapping[str, Any] | None = None) -> str:
    return H_MCQA.output_of(inp, interventions)


# ----------------------------------------------------------------------------
# two-digit addition with an explicit carry

_SUM_RE = re.compile(r"^\s*(\d{1,2})\s*\+\s*(\d{1,2})\s*=?\s*$")


def parse_operands(inp: Any) -> tuple[int, int]:
    if isinstance(inp, (TaskInstance, Counterfactual)):
        meta = inp.metadata
        if "operand1" not in meta:
            raise CausalModelError("instance has no operands")
        if meta.get("operator", "+") != "+":
            raise CausalModelError("the carry model covers addition only")
        x, y = int(meta["operand1"]), int(meta["operand2"])
    elif isinstance(inp, str):
        m = _SUM_RE.match(inp)
        if not m:
            raise CausalModelError(f"cannot parse {inp!r} as a two-digit sum")
        x, y = int(m.group(1)), int(m.group(2))
    else:
        try:
            x, y = (int(v) for v in inp)
        except (TypeError, ValueError) as exc:
            raise CausalModelError(f"cannot parse operands from {inp!r}") from exc
    if not (0 <= x <= 99 and 0 <= y <= 99):
        raise CausalModelError("operands must have at most two digits")
    return x, y


H_PLUS = CausalModel(
    "plus",
    ("T", "X1", "Y1", "X10", "Y10", "X_Carry", "O_1", "O_110"),
    {
        "X1": ("T",), "Y1": ("T",), "X10": ("T",), "Y10": ("T",),
        "X_Carry": ("X1", "Y1"),
        "O_1": ("X1", "Y1"),
        "O_110": ("X_Carry", "X10", "Y10"),
    },
    {
        "X1": lambda t: parse_operands(t)[0] % 10,
        "Y1": lambda t: parse_operands(t)[1] % 10,
        "X10": lambda t: parse_operands(t)[0] // 10,
        "Y10": lambda t: parse_operands(t)[1] // 10,
        "X_Carry": lambda x1, y1: int(x1 + y1 >= 10),
        "O_1": lambda x1, y1: (x1 + y1) % 10,
        "O_110": lambda c, x10, y10: c + x10 + y10,
    },
    "O_110",
    readout=lambda v: 10 * v["O_110"] + v["O_1"],
)


def h_plus_run(inp: Any, interventions: Mapping[str, Any] | None = None) -> int:
    return H_PLUS.output_of(inp, interventions)


# ----------------------------------------------------------------------------
# IOI: subject token and first-clause order feed a linear logit-difference model

@dataclass(frozen=True)
class IOICoeffs:
    intercept: float = 0.048
    position: float = 2.005
    token: float = 0.768

    def predict(self, position_signal: float, token_signal: float) -> float:
        return self.intercept + self.position * position_signal + self.token * token_signal


def _names(inp: Any) -> tuple[str, str, str]:
    meta = inp.metadata if isinstance(inp, (TaskInstance, Counterfactual)) else inp
    try:
        return meta["name_A"], meta["name_B"], meta["name_C"]
    except (KeyError, TypeError) as exc:
        raise CausalModelError(f"not an IOI record: {inp!r}") from exc


def _ioi_model(coeffs: IOICoeffs) -> CausalModel:
    def logit_diff(t: Any, s_tok: str, s_pos: tuple[str, str]) -> float:
        a, b, c = _names(t)
        token_signal = 1.0 if s_tok == c else -1.0
        position_signal = 1.0 if tuple(s_pos) == (a, b) else -1.0
        return coeffs.predict(position_signal, token_signal)

    return CausalModel(
        "ioi",
        ("T", "S_Tok", "S_Pos", "O_LogDiff"),
        {"S_Tok": ("T",), "S_Pos": ("T",), "O_LogDiff": ("T", "S_Tok", "S_Pos")},
        {
            "S_Tok": lambda t: _names(t)[2],  # the repeated (subject) name
            "S_Pos": lambda t: _names(t)[:2],  # first-clause order
            "O_LogDiff": logit_diff,
        },
        "O_LogDiff",
    )


H_IOI = _ioi_model(IOICoeffs())


def h_ioi_run(inp: Any, interventions: Mapping[str, Any] | None = None, coeffs: IOICoeffs | None = None) -> float:
    model = H_IOI if coeffs is None else _ioi_model(coeffs)
    return model.output_of(inp, interventions)


def ioi_signals(base: Any, source: Any, variables: Sequence[str]) -> tuple[float, float]:
    """(position, token) signals after fixing ``variables`` to their values on ``source``."""
    a, b, c = _names(base)
    src = H_IOI.run(source)
    tok = src["S_Tok"] if "S_Tok" in variables else c
    pos = tuple(src["S_Pos"]) if "S_Pos" in variables else (a, b)
    return (1.0 if pos == (a, b) else -1.0), (1.0 if tok == c else -1.0)


def fit_ioi_coeffs(results: Sequence[tuple[float, float, float]]) -> IOICoeffs:
    """Least-squares (intercept, position, token) from (pos_signal, tok_signal, observed) rows."""
    arr = np.asarray(results, dtype=np.float64).reshape(-1, 3)
    X = np.column_stack([np.ones(len(arr)), arr[:, 0], arr[:, 1]])
    if np.linalg.matrix_rank(X) < 3:
        raise CausalModelError("design matrix is rank deficient: both signals must vary independently")
    coef, *_ = np.linalg.lstsq(X, arr[:, 2], rcond=None)
    return IOICoeffs(float(coef[0]), float(coef[1]), float(coef[2]))


MODELS = {"mcqa": H_MCQA, "arithmetic": H_PLUS, "ioi": H_IOI}

"""Interchange interventions on featurized hidden vectors, and the alignment search around them.

A site is either the residual stream at a block boundary or the concatenated
outputs of a set of attention heads.  The hidden vector at a site is read at
one token position per prompt, chosen by a named token selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Any, Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .causal import CausalModel, IOICoeffs, ioi_signals
from .data import encode_prompts
from .featurize import Featurizer, IdentityFeaturizer, orthonormalize, rotation_from_directions
from .model import DTYPE, Interventions, Model, run
from .tasks.common import TaskInstance
from .tasks.vocab import Vocab, tokenize

SELECTOR_VERSION = 1
Mixer = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class InterchangeError(ValueError):
    pass


# ----------------------------------------------------------------------------
# token selectors: (record, prompt tokens) -> index into the unpadded prompt

def _last(record: Any, toks: list[str]) -> int:
    return len(toks) - 1


def _answer_letter(record: Any, toks: list[str]) -> int:
    """The label token of the correct option; options start right after each newline."""
    lines = [i for i, t in enumerate(toks) if t == "\n"]
    key = record.answerKey
    if key < 0 or key >= len(lines) or lines[key] + 1 >= len(toks):
        raise InterchangeError("no option line for the answer key")
    pos = lines[key] + 1
    if toks[pos].strip() != record.choices[key].strip():
        raise InterchangeError(f"expected label {record.choices[key]!r} at option line {key}, found {toks[pos]!r}")
    return pos


def _second_operand(record: Any, toks: list[str]) -> int:
    target = str(record.metadata["operand2"])
    hits = [i for i, t in enumerate(toks) if t.strip() == target]
    if not hits:
        raise InterchangeError(f"second operand {target} not in prompt")
    return hits[-1]


def _final_name(record: Any, toks: list[str]) -> int:
    names = {record.metadata[k] for k in ("name_A", "name_B", "name_C")}
    hits = [i for i, t in enumerate(toks) if t.strip() in names]
    if not hits:
        raise InterchangeError("no name token in prompt")
    return hits[-1]


SELECTORS: dict[str, Callable[[Any, list[str]], int]] = {
    "last": _last,
    "answer_letter": _answer_letter,
    "second_operand": _second_operand,
    "final_name": _final_name,
}


def select_position(selector: str, record: Any) -> int:
    if selector not in SELECTORS:
        raise InterchangeError(f"unknown token selector {selector!r}")
    try:
        return SELECTORS[selector](record, tokenize(record.prompt))
    except (InterchangeError, KeyError, IndexError) as exc:
        raise InterchangeError(f"selector {selector!r} failed on {record.prompt!r}: {exc}") from exc


# ----------------------------------------------------------------------------
# sites

@dataclass(frozen=True)
class Site:
    """Residual stream after ``layer`` blocks, or the outputs of ``heads`` ((layer, head) pairs)."""

    layer: int = 0
    heads: tuple[tuple[int, int], ...] = ()

    def width(self, model: Model) -> int:
        d = model.config.d_model
        return d * len(self.heads) if self.heads else d

    def label(self) -> str:
        if self.heads:
            return "heads:" + ",".join(f"{l}.{h}" for l, h in self.heads)
        return f"resid:{self.layer}"

    def validate(self, model: Model) -> None:
        L, H = model.config.n_layers, model.config.n_heads
        if self.heads:
            if any(not (0 <= l < L and 0 <= h < H) for l, h in self.heads):
                raise InterchangeError(f"head out of range in {self.label()}")
        elif not 0 <= self.layer <= L:
            raise InterchangeError(f"residual boundary {self.layer} outside 0..{L}")


def _head_node(model: Model, layer: int, head: int) -> int:
    return 1 + layer * (model.config.n_heads + 1) + head


def capture(model: Model, tokens: torch.Tensor, mask: torch.Tensor, pos: torch.Tensor, site: Site) -> torch.Tensor:
    """Hidden vector at ``site`` for each row at its position, (B, width)."""
    with torch.no_grad():
        _, cache = run(model, tokens, mask)
    rows = torch.arange(tokens.shape[0])
    if site.heads:
        idx = [_head_node(model, l, h) for l, h in site.heads]
        return cache.outputs[rows, pos][:, idx].reshape(len(rows), -1)
    n = 1 + site.layer * (model.config.n_heads + 1)
    return cache.outputs[rows, pos, :n].sum(dim=1)


def run_with_site(model: Model, tokens: torch.Tensor, mask: torch.Tensor, pos: torch.Tensor, site: Site,
                  h_cf: torch.Tensor, mix: Mixer) -> torch.Tensor:
    """Logits with the site's vector at ``pos`` replaced by ``mix(h_base, h_cf)``."""
    rows = torch.arange(tokens.shape[0])
    d = model.config.d_model
    if not site.heads:
        def hook(resid: torch.Tensor) -> torch.Tensor:
            out = resid.clone()
            out[rows, pos] = mix(resid[rows, pos], h_cf)
            return out

        logits, _ = run(model, tokens, mask, Interventions(resid_hooks={site.layer: hook}))
        return logits

    layers = sorted({l for l, _ in site.heads})
    head_hooks = {}
    if len(layers) == 1:
        def one_layer(out: torch.Tensor, l: int = layers[0]) -> torch.Tensor:
            hs = [h for _, h in site.heads]
            new = out.clone()
            mixed = mix(out[rows, pos][:, hs].reshape(len(rows), -1), h_cf)
            new[rows[:, None], pos[:, None], torch.tensor(hs)[None]] = mixed.reshape(len(rows), len(hs), d)
            return new

        head_hooks[layers[0]] = one_layer
    else:
        # Heads in different layers are read at different times, so the mixer
        # must act coordinate-wise; it is applied per head slice.
        for l in layers:
            slots = [(i, h) for i, (ll, h) in enumerate(site.heads) if ll == l]

            def per_layer(out: torch.Tensor, slots=slots) -> torch.Tensor:
                new = out.clone()
                for i, h in slots:
                    sl = slice(i * d, (i + 1) * d)
                    new[rows, pos, h] = mix.sliced(out[rows, pos, h], h_cf[:, sl], sl)  # type: ignore[attr-defined]
                return new

            head_hooks[l] = per_layer
    logits, _ = run(model, tokens, mask, Interventions(head_hooks=head_hooks))
    return logits


class FeatureMixer:
    """mix(h_base, h_cf) for a featurizer and a feature mask."""

    def __init__(self, featurizer: Featurizer, mask: torch.Tensor):
        self.featurizer = featurizer
        self.mask = mask

    def __call__(self, h_base: torch.Tensor, h_cf: torch.Tensor) -> torch.Tensor:
        return self.featurizer.intervene(h_base, h_cf, self.mask)

    def sliced(self, h_base: torch.Tensor, h_cf: torch.Tensor, sl: slice) -> torch.Tensor:
        if not isinstance(self.featurizer, IdentityFeaturizer):
            raise InterchangeError("heads spanning several layers need the identity featurizer")
        return h_base + self.mask[sl] * (h_cf - h_base)


@dataclass
class Alignment:
    variable: str
    site: Site
    selector: str
    featurizer: Featurizer
    mask: torch.Tensor  # (k,), 1 marks a feature aligned with the variable

    @property
    def features(self) -> list[int]:
        return [int(i) for i in torch.nonzero(self.mask > 0.5).flatten()]

    def mixer(self) -> FeatureMixer:
        return FeatureMixer(self.featurizer, self.mask.to(DTYPE))

    def to_record(self) -> dict:
        return {"variable": self.variable, "site": self.site.label(), "selector": self.selector,
                "selector_version": SELECTOR_VERSION, "featurizer": self.featurizer.kind,
                "features": self.features}


def full_vector(model: Model, variable: str, site: Site, selector: str) -> Alignment:
    w = site.width(model)
    return Alignment(variable, site, selector, IdentityFeaturizer(w), torch.ones(w, dtype=DTYPE))


# ----------------------------------------------------------------------------
# (base, counterfactual) sets

@dataclass
class InterchangeSet:
    """Aligned base/counterfactual prompts with the high-level model's expected outcome.

    ``expected`` holds answer token ids (-1 when the expected answer is not a
    vocabulary token) for token-valued variables; ``signals`` holds the IOI
    (position, token) signals for logit-difference targets.
    """

    base: torch.Tensor
    base_mask: torch.Tensor
    base_pos: torch.Tensor
    cf: torch.Tensor
    cf_mask: torch.Tensor
    cf_pos: torch.Tensor
    base_answer: torch.Tensor
    cf_answer: torch.Tensor
    expected: torch.Tensor | None = None
    contrast: torch.Tensor | None = None  # token the logit difference is taken against
    signals: torch.Tensor | None = None
    sources: list[str] = field(default_factory=list)
    dropped: int = 0

    def __len__(self) -> int:
        return self.base.shape[0]

    def subset(self, idx: Sequence[int] | torch.Tensor) -> "InterchangeSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return replace(self, base=self.base[idx], base_mask=self.base_mask[idx], base_pos=self.base_pos[idx],
                       cf=self.cf[idx], cf_mask=self.cf_mask[idx], cf_pos=self.cf_pos[idx],
                       base_answer=self.base_answer[idx], cf_answer=self.cf_answer[idx],
                       expected=pick(self.expected), contrast=pick(self.contrast), signals=pick(self.signals),
                       sources=[self.sources[i] for i in idx.tolist()] if self.sources else [])

    def chunks(self, size: int):
        for start in range(0, len(self), size):
            yield self.subset(torch.arange(start, min(start + size, len(self))))

    @property
    def is_regression(self) -> bool:
        return self.signals is not None


def concat_sets(sets: Sequence[InterchangeSet]) -> InterchangeSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        raise InterchangeError("no pairs to combine")
    T = max(s.base.shape[1] for s in sets)

    def pad(t: torch.Tensor, fill: Any) -> torch.Tensor:
        extra = T - t.shape[1]
        if extra == 0:
            return t
        return torch.cat([torch.full((t.shape[0], extra), fill, dtype=t.dtype), t], dim=1)

    def cat(name: str):
        vals = [getattr(s, name) for s in sets]
        return None if vals[0] is None else torch.cat(vals)

    return InterchangeSet(
        base=torch.cat([pad(s.base, 0) for s in sets]),
        base_mask=torch.cat([pad(s.base_mask, False) for s in sets]),
        base_pos=torch.cat([s.base_pos + T - s.base.shape[1] for s in sets]),
        cf=torch.cat([pad(s.cf, 0) for s in sets]),
        cf_mask=torch.cat([pad(s.cf_mask, False) for s in sets]),
        cf_pos=torch.cat([s.cf_pos + T - s.cf.shape[1] for s in sets]),
        base_answer=cat("base_answer"), cf_answer=cat("cf_answer"), expected=cat("expected"),
        contrast=cat("contrast"), signals=cat("signals"),
        sources=[src for s in sets for src in s.sources], dropped=sum(s.dropped for s in sets),
    )


def _output_token(vocab: Vocab, value: Any) -> int:
    text = value if isinstance(value, str) else str(value)
    try:
        return vocab.answer_id(text)
    except KeyError:
        return -1


def build_set(
    model: Model,
    instances: Sequence[TaskInstance],
    cf_name: str,
    causal: CausalModel,
    variables: Sequence[str],
    selector: str,
    filter_correct: bool = True,
) -> InterchangeSet:
    """Pairs (instance, its ``cf_name`` counterfactual) with expected outputs for intervening ``variables``.

    With ``filter_correct`` only pairs where the model answers both prompts
    correctly are kept.
    """
    vocab = model.vocab
    if vocab is None:
        raise InterchangeError("model has no vocabulary")
    bases, cfs = list(instances), [inst.cf(cf_name) for inst in instances]
    if not bases:
        raise InterchangeError("no instances")
    T = max(len(vocab.encode(r.prompt)) for r in bases + cfs)
    b_tok, b_mask = encode_prompts(vocab, [r.prompt for r in bases], T)
    c_tok, c_mask = encode_prompts(vocab, [r.prompt for r in cfs], T)
    b_pos = torch.tensor([T - len(vocab.encode(r.prompt)) + select_position(selector, r) for r in bases])
    c_pos = torch.tensor([T - len(vocab.encode(r.prompt)) + select_position(selector, r) for r in cfs])
    b_ans = torch.tensor([vocab.answer_id(r.answer) for r in bases])
    c_ans = torch.tensor([vocab.answer_id(r.answer) if r.answerKey >= 0 else -1 for r in cfs])

    expected = contrast = signals = None
    if causal.name == "ioi":
        contrast = torch.tensor([vocab.answer_id(r.metadata["subject"]) for r in bases])
        signals = torch.tensor([ioi_signals(b, c, variables) for b, c in zip(bases, cfs)], dtype=DTYPE)
    else:
        outputs = [causal.interchange(b, c, variables) for b, c in zip(bases, cfs)]
        expected = torch.tensor([_output_token(vocab, o) for o in outputs])

    full = InterchangeSet(b_tok, b_mask, b_pos, c_tok, c_mask, c_pos, b_ans, c_ans, expected, contrast, signals,
                          [cf_name] * len(bases))
    if not filter_correct:
        return full
    keep = correct_rows(model, full)
    kept = full.subset(torch.nonzero(keep).flatten())
    kept.dropped = len(full) - len(kept)
    return kept


def correct_rows(model: Model, s: InterchangeSet, chunk: int = 256) -> torch.Tensor:
    """Rows where the model predicts the right answer on base and on counterfactual."""
    keep = []
    with torch.no_grad():
        for part in s.chunks(chunk):
            pb = run(model, part.base, part.base_mask)[0][:, -1].argmax(dim=-1)
            pc = run(model, part.cf, part.cf_mask)[0][:, -1].argmax(dim=-1)
            ok = pb == part.base_answer
            ok &= (part.cf_answer < 0) | (pc == part.cf_answer)
            keep.append(ok)
    return torch.cat(keep)


# ----------------------------------------------------------------------------
# running interventions

def interchange_logits(model: Model, s: InterchangeSet, site: Site, mix: Mixer) -> torch.Tensor:
    """Final-position logits of the bases with the site mixed towards each counterfactual."""
    h_cf = capture(model, s.cf, s.cf_mask, s.cf_pos, site)
    return run_with_site(model, s.base, s.base_mask, s.base_pos, site, h_cf, mix)[:, -1]


def interchange_run(model: Model, s: InterchangeSet, alignment: Alignment, chunk: int = 128) -> torch.Tensor:
    """Greedy next token of every base under the alignment's interchange intervention."""
    alignment.site.validate(model)
    out = []
    with torch.no_grad():
        for part in s.chunks(chunk):
            out.append(interchange_logits(model, part, alignment.site, alignment.mixer()).argmax(dim=-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def observed_logit_diff(model: Model, s: InterchangeSet, alignment: Alignment, chunk: int = 128) -> torch.Tensor:
    if s.contrast is None:
        raise InterchangeError("logit differences need a contrast token per pair")
    out = []
    with torch.no_grad():
        for part in s.chunks(chunk):
            logits = interchange_logits(model, part, alignment.site, alignment.mixer())
            rows = torch.arange(len(part))
            out.append(logits[rows, part.base_answer] - logits[rows, part.contrast])
    return torch.cat(out)


def iia(model: Model, s: InterchangeSet, alignment: Alignment) -> float:
    """Share of pairs whose intervened output equals the high-level model's output."""
    if len(s) == 0:
        raise InterchangeError("no pairs left after filtering")
    if s.expected is None:
        raise InterchangeError("this pair set has no token-valued expectations")
    pred = interchange_run(model, s, alignment)
    return float((pred == s.expected).to(DTYPE).mean())


def ioi_mse(model: Model, s: InterchangeSet, alignment: Alignment, coeffs: IOICoeffs = IOICoeffs()) -> float:
    if s.signals is None:
        raise InterchangeError("this pair set has no IOI signals")
    observed = observed_logit_diff(model, s, alignment)
    predicted = coeffs.intercept + coeffs.position * s.signals[:, 0] + coeffs.token * s.signals[:, 1]
    return float(((observed - predicted) ** 2).mean())


def alignment_score(model: Model, s: InterchangeSet, alignment: Alignment, coeffs: IOICoeffs = IOICoeffs()) -> float:
    return ioi_mse(model, s, alignment, coeffs) if s.is_regression else iia(model, s, alignment)


# ----------------------------------------------------------------------------
# learned alignments

def _target_loss(logits: torch.Tensor, s: InterchangeSet, coeffs: IOICoeffs) -> torch.Tensor:
    if s.is_regression:
        rows = torch.arange(len(s))
        diff = logits[rows, s.base_answer] - logits[rows, s.contrast]
        target = coeffs.intercept + coeffs.position * s.signals[:, 0] + coeffs.token * s.signals[:, 1]
        return ((diff - target) ** 2).mean()
    ok = s.expected >= 0
    if not bool(ok.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[ok], s.expected[ok])


@dataclass(frozen=True)
class DASConfig:
    dim: int = 16
    lr: float = 0.01
    epochs: int = 8
    batch_size: int = 64
    seed: int = 0


def das_train(model: Model, train: InterchangeSet, variable: str, site: Site, selector: str,
              hyper: DASConfig = DASConfig(), coeffs: IOICoeffs = IOICoeffs()) -> Alignment:
    """Learn ``dim`` orthonormal directions whose interchange reproduces the high-level outcome."""
    site.validate(model)
    w = site.width(model)
    if not 0 < hyper.dim <= w:
        raise InterchangeError(f"subspace dimension {hyper.dim} outside 1..{w}")
    if len(train) == 0:
        raise InterchangeError("no training pairs")
    gen = torch.Generator().manual_seed(hyper.seed)
    q = orthonormalize(torch.randn(w, hyper.dim, generator=gen, dtype=DTYPE)).requires_grad_(True)
    opt = torch.optim.Adam([q], lr=hyper.lr)
    h_cf_all = capture(model, train.cf, train.cf_mask, train.cf_pos, site)
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(train), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            part = train.subset(idx)
            # Orthonormalizing inside the graph keeps the gradient tangent to the constraint.
            qn = orthonormalize(q)
            mix = lambda hb, hc: hb + ((hc - hb) @ qn) @ qn.T  # noqa: E731
            logits = run_with_site(model, part.base, part.base_mask, part.base_pos, site, h_cf_all[idx], mix)[:, -1]
            loss = _target_loss(logits, part, coeffs)
            if not torch.isfinite(loss):
                raise InterchangeError(f"DAS training diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                q.copy_(orthonormalize(q))
    directions = q.detach()
    mask = torch.zeros(w, dtype=DTYPE)
    mask[:hyper.dim] = 1.0
    return Alignment(variable, site, selector, rotation_from_directions(directions, hyper.seed), mask)


@dataclass(frozen=True)
class DBMConfig:
    lr: float = 0.01
    epochs: int = 8
    batch_size: int = 64
    tau_start: float = 1.0
    tau_end: float = 0.01
    init_logit: float = -0.1
    seed: int = 0


def temperature(step: int, total: int, start: float, end: float) -> float:
    """Exponential anneal from ``start`` at step 0 to ``end`` at the last step."""
    if total <= 1:
        return end
    return start * math.exp(math.log(end / start) * step / (total - 1))


def binarize(mask_logits: torch.Tensor) -> torch.Tensor:
    """Evaluation mask: features whose sigmoid exceeds one half."""
    return (mask_logits > 0).to(DTYPE)


def dbm_train(model: Model, train: InterchangeSet, variable: str, site: Site, selector: str, featurizer: Featurizer,
              hyper: DBMConfig = DBMConfig(), coeffs: IOICoeffs = IOICoeffs()) -> Alignment:
    """Learn a binary feature mask over a fixed featurizer."""
    site.validate(model)
    if featurizer.d != site.width(model):
        raise InterchangeError(f"featurizer expects width {featurizer.d}, site has {site.width(model)}")
    if len(train) == 0:
        raise InterchangeError("no training pairs")
    gen = torch.Generator().manual_seed(hyper.seed)
    logits_m = torch.full((featurizer.k,), hyper.init_logit, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([logits_m], lr=hyper.lr)
    h_cf_all = capture(model, train.cf, train.cf_mask, train.cf_pos, site)
    n_batches = math.ceil(len(train) / hyper.batch_size)
    total = hyper.epochs * n_batches
    step = 0
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(train), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            part = train.subset(idx)
            tau = temperature(step, total, hyper.tau_start, hyper.tau_end)
            soft = torch.sigmoid(logits_m / tau)
            mix = lambda hb, hc: featurizer.intervene(hb, hc, soft)  # noqa: E731
            logits = run_with_site(model, part.base, part.base_mask, part.base_pos, site, h_cf_all[idx], mix)[:, -1]
            loss = _target_loss(logits, part, coeffs)
            if not torch.isfinite(loss):
                raise InterchangeError(f"DBM training diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    return Alignment(variable, site, selector, featurizer, binarize(logits_m.detach()))


# ----------------------------------------------------------------------------
# sweeps

@dataclass
class SweepTable:
    """Per-(layer, selector) scores; ``higher_is_better`` is False for MSE."""

    scores: dict[int, dict[str, float]]
    higher_is_better: bool = True

    def _pick(self, values):
        return max(values) if self.higher_is_better else min(values)

    def per_layer(self) -> dict[int, float]:
        return {layer: self._pick(row.values()) for layer, row in sorted(self.scores.items())}

    @property
    def mean(self) -> float:
        vals = list(self.per_layer().values())
        return sum(vals) / len(vals)

    @property
    def best(self) -> float:
        return self._pick(self.per_layer().values())

    def to_record(self) -> dict:
        return {"cells": {str(l): dict(sorted(row.items())) for l, row in sorted(self.scores.items())},
                "per_layer": {str(l): v for l, v in self.per_layer().items()},
                "mean": self.mean, "best": self.best}


def sweep_alignments(
    model: Model,
    variable: str,
    layers: Sequence[int],
    selectors: Sequence[str],
    fit: Callable[[Site, str, InterchangeSet], Alignment],
    data: Mapping[str, tuple[InterchangeSet, Mapping[str, InterchangeSet]]],
    coeffs: IOICoeffs = IOICoeffs(),
) -> SweepTable:
    """Fit an alignment per (layer, selector) and score it on every evaluation set.

    ``data`` maps selector -> (training set, {counterfactual name: evaluation set});
    a cell's score is the mean over evaluation sets.
    """
    if not layers or not selectors:
        raise InterchangeError("empty sweep grid")
    scores: dict[int, dict[str, float]] = {}
    regression = False
    for layer in layers:
        row = {}
        for sel in selectors:
            train, evals = data[sel]
            alignment = fit(Site(layer), sel, train)
            vals = [alignment_score(model, s, alignment, coeffs) for _, s in sorted(evals.items()) if len(s)]
            if not vals:
                raise InterchangeError(f"no evaluation pairs for selector {sel!r}")
            regression = regression or train.is_regression
            row[sel] = sum(vals) / len(vals)
        scores[layer] = row
    return SweepTable(scores, higher_is_better=not regression)


def head_subset_table(model: Model, sets: Mapping[str, InterchangeSet], heads: Sequence[tuple[int, int]],
                      selector: str, coeffs: IOICoeffs) -> list[dict]:
    """Full-vector MSE for every subset of ``heads`` against each variable's prediction.

    ``sets`` maps variable name to a pair set whose signals reflect intervening
    that variable alone.
    """
    rows = []
    for r in range(len(heads) + 1):
        for subset in combinations(heads, r):
            row = {"heads": [list(h) for h in subset]}
            for variable, s in sorted(sets.items()):
                if subset:
                    align = full_vector(model, variable, Site(heads=tuple(subset)), selector)
                    row[variable] = ioi_mse(model, s, align, coeffs)
                else:
                    align = full_vector(model, variable, Site(0), selector)
                    align.mask = torch.zeros_like(align.mask)
                    row[variable] = ioi_mse(model, s, align, coeffs)
            rows.append(row)
    return rows

"""Edge and neuron importance scorers for circuit discovery.

All scorers report the effect of *keeping* an edge: positive scores mean the
edge pushes the metric up on the clean input relative to its ablated value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .ablation import AblationSource
from .data import PairBatch
from .graph import EdgeId, Graph, NodeId
from .model import Interventions, Model, logit_diff_metric, note_backward, run

Metric = Callable[[torch.Tensor, PairBatch], torch.Tensor]


def logit_diff(logits: torch.Tensor, pairs: PairBatch) -> torch.Tensor:
    return logit_diff_metric(logits, pairs.answer, pairs.cf_answer)


@dataclass
class EdgeScores:
    graph: Graph
    values: np.ndarray  # (n_edges,)
    method: str
    ablation: str = ""
    data_hash: str = ""
    flags: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.graph.n_edges,):
            raise ValueError(f"expected {self.graph.n_edges} scores, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("edge scores must be finite")

    def __getitem__(self, edge: EdgeId) -> float:
        return float(self.values[self.graph.edge_index[edge]])

    def as_dict(self) -> dict[EdgeId, float]:
        return {e: float(v) for e, v in zip(self.graph.edges, self.values)}

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "ablation": self.ablation,
            "dataset": self.data_hash,
            "scores": [
                {"source": str(e.source), "target": str(e.target), "slot": e.slot, "score": float(v)}
                for e, v in zip(self.graph.edges, self.values)
            ],
        }


@dataclass
class NeuronScores:
    graph: Graph
    values: np.ndarray  # (n_sources, d_model)
    method: str
    ablation: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != self.graph.n_sources:
            raise ValueError("one row of neuron scores per writer node expected")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("neuron scores must be finite")

    def __getitem__(self, key: tuple[NodeId, int]) -> float:
        node, i = key
        return float(self.values[self.graph.node_index[node], i])

    def node_totals(self) -> np.ndarray:
        return self.values.sum(axis=1)


def _edge_table(graph: Graph) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(graph.edge_source_index), torch.as_tensor(graph.edge_slot_index)


def _slot_grads(model: Model, cache, metric_value: torch.Tensor) -> torch.Tensor:
    """d(sum metric)/d(slot input) for every graph slot, stacked to (B, T, n_slots, d)."""
    groups = cache.slot_groups
    # slots feeding a node whose output is overridden do not reach the metric
    grads = torch.autograd.grad(metric_value.sum(), [g for _, g in groups], allow_unused=True)
    B, T, _, d = cache.outputs.shape
    out = torch.zeros(B, T, len(model.graph.slots), d, dtype=cache.outputs.dtype)
    for (first, g), gr in zip(groups, grads):
        if gr is not None:
            out[:, :, first:first + g.shape[2]] = gr
    note_backward(B)
    return out


def _leaf_embed(value: torch.Tensor | None = None):
    """Node hook making the embedding output a graph leaf (optionally replacing it)."""
    def hook(out: torch.Tensor) -> torch.Tensor:
        src = out if value is None else value
        return src.detach().clone().requires_grad_(True)
    return hook


def _frozen(model: Model) -> Model:
    if not any(p.requires_grad for p in model.params.values()):
        return model
    return Model(model.config, {k: v.detach() for k, v in model.params.items()}, model.vocab)


def _edges_from_products(graph: Graph, prod: torch.Tensor) -> np.ndarray:
    """prod[n, s] = sum over (b, t, d) of delta_n * grad_s -> per-edge values."""
    src, slot = _edge_table(graph)
    return prod[src, slot].numpy()


def random_scores(model: Model | Graph, seed: int) -> EdgeScores:
    graph = model.graph if isinstance(model, Model) else model
    rng = np.random.default_rng(seed)
    return EdgeScores(graph, rng.uniform(-1.0, 1.0, graph.n_edges), "random")


def exact_edge_patching(
    model: Model,
    pairs: PairBatch,
    ablation: AblationSource,
    metric: Metric = logit_diff,
    edge_chunk: int = 16,
    pair_chunk: int = 64,
) -> EdgeScores:
    """m(clean) - m(edge ablated), one patched forward per edge and pair.

    Each edge chunk carries one unpatched replica as its baseline, so an edge
    with no effect scores exactly zero rather than rounding noise.
    """
    model = _frozen(model)
    g = model.graph
    E = g.n_edges
    total = torch.zeros(E, dtype=torch.float64)
    with torch.no_grad():
        for chunk in pairs.chunks(pair_chunk):
            B = len(chunk)
            abl = ablation.provide(model, chunk)
            for start in range(0, E, edge_chunk):
                ids = list(range(start, min(start + edge_chunk, E)))
                c = len(ids) + 1
                alpha = torch.ones(c, B, E, dtype=torch.float64)
                for j, e in enumerate(ids, start=1):
                    alpha[j, :, e] = 0.0
                rep = chunk.subset(torch.arange(B).repeat(c))
                logits, _ = run(model, rep.clean, rep.clean_mask, Interventions(
                    alpha=alpha.reshape(c * B, E), ablated=abl.repeat(c, 1, 1, 1)))
                m = metric(logits, rep).reshape(c, B)
                total[ids] += (m[:1] - m[1:]).sum(dim=1)
    return EdgeScores(g, (total / len(pairs)).numpy(), "exact", ablation.kind)


def eap(model: Model, pairs: PairBatch, ablation: AblationSource, metric: Metric = logit_diff,
        pair_chunk: int = 64) -> EdgeScores:
    """First-order estimate (a_u - a'_u) . dm/d(slot input of v), gradient on the clean run."""
    model = _frozen(model)
    g = model.graph
    acc = torch.zeros(g.n_sources, len(g.slots), dtype=torch.float64)
    for chunk in pairs.chunks(pair_chunk):
        abl = ablation.provide(model, chunk)
        logits, cache = run(model, chunk.clean, chunk.clean_mask,
                            Interventions(node_hooks={0: _leaf_embed()}), split_slots=True)
        grads = _slot_grads(model, cache, metric(logits, chunk))
        delta = (cache.outputs - abl).detach()
        acc += torch.einsum("btnd,btsd->ns", delta, grads)
    return EdgeScores(g, _edges_from_products(g, acc / len(pairs)), "eap", ablation.kind)


def eap_ig(
    model: Model,
    pairs: PairBatch,
    ablation: AblationSource,
    mode: str = "inputs",
    steps: int = 5,
    metric: Metric = logit_diff,
    pair_chunk: int = 64,
) -> EdgeScores:
    """Integrated-gradient variant: gradients averaged over points a' + (z/Z)(a - a'), z = 1..Z.

    ``inputs`` interpolates only the embedding output and lets the network
    recompute everything downstream; ``activations`` interpolates the outputs
    of one write stage at a time (embedding, each attention layer, each MLP)
    and scores that stage's outgoing edges from the resulting gradients.
    """
    if steps < 1:
        raise ValueError("need at least one interpolation step")
    if mode not in ("inputs", "activations"):
        raise ValueError(f"unknown EAP-IG mode {mode!r}")
    model = _frozen(model)
    g = model.graph
    src_idx, _ = _edge_table(g)
    stage = torch.tensor([g.layer_of(n) for n in g.nodes[: g.n_sources]])
    acc = torch.zeros(g.n_sources, len(g.slots), dtype=torch.float64)
    for chunk in pairs.chunks(pair_chunk):
        abl = ablation.provide(model, chunk)
        with torch.no_grad():
            _, clean_cache = run(model, chunk.clean, chunk.clean_mask)
        clean = clean_cache.outputs
        delta = clean - abl
        if mode == "inputs":
            gsum = torch.zeros(clean.shape[0], clean.shape[1], len(g.slots), clean.shape[3], dtype=torch.float64)
            for z in range(1, steps + 1):
                emb = abl[:, :, 0] + (z / steps) * delta[:, :, 0]
                logits, cache = run(model, chunk.clean, chunk.clean_mask,
                                    Interventions(node_hooks={0: _leaf_embed(emb)}), split_slots=True)
                gsum += _slot_grads(model, cache, metric(logits, chunk))
            acc += torch.einsum("btnd,btsd->ns", delta, gsum / steps)
        else:
            for st in sorted(set(stage.tolist())):
                nodes = [int(i) for i in torch.nonzero(stage == st).flatten()]
                gsum = None
                for z in range(1, steps + 1):
                    hooks = {}
                    for u in nodes:
                        value = abl[:, :, u] + (z / steps) * delta[:, :, u]
                        hooks[u] = (lambda v: (lambda out: v))(value)
                    if 0 not in hooks:
                        hooks[0] = _leaf_embed()
                    else:
                        hooks[0] = _leaf_embed(hooks[0](None))
                    logits, cache = run(model, chunk.clean, chunk.clean_mask, Interventions(node_hooks=hooks),
                                        split_slots=True)
                    gr = _slot_grads(model, cache, metric(logits, chunk))
                    gsum = gr if gsum is None else gsum + gr
                prod = torch.einsum("btnd,btsd->ns", delta[:, :, nodes], gsum / steps)
                acc[nodes] += prod
    scores = _edges_from_products(g, acc / len(pairs))
    return EdgeScores(g, scores, f"eap_ig_{mode}", ablation.kind)


def node_attribution(
    model: Model,
    pairs: PairBatch,
    ablation: AblationSource,
    ig: bool = False,
    steps: int = 5,
    metric: Metric = logit_diff,
    pair_chunk: int = 64,
) -> NeuronScores:
    """Per-neuron (a_u - a'_u)[i] * dm/da_u[i], summed over positions and averaged over pairs.

    With ``ig`` the gradient is averaged over embedding interpolations as in
    the inputs variant of :func:`eap_ig`.
    """
    model = _frozen(model)
    g = model.graph
    acc = torch.zeros(g.n_sources, model.config.d_model, dtype=torch.float64)
    n_pts = steps if ig else 1
    for chunk in pairs.chunks(pair_chunk):
        abl = ablation.provide(model, chunk)
        with torch.no_grad():
            _, clean_cache = run(model, chunk.clean, chunk.clean_mask)
        delta = clean_cache.outputs - abl
        gsum = torch.zeros_like(delta)
        for z in range(1, n_pts + 1):
            captured: dict[int, torch.Tensor] = {}
            hooks = {}
            for u in range(g.n_sources):
                def hook(out: torch.Tensor, u: int = u) -> torch.Tensor:
                    if u == 0 and ig:
                        out = abl[:, :, 0] + (z / n_pts) * delta[:, :, 0]
                    if u == 0:
                        out = out.detach().clone().requires_grad_(True)
                    captured[u] = out
                    return out
                hooks[u] = hook
            logits, _ = run(model, chunk.clean, chunk.clean_mask, Interventions(node_hooks=hooks))
            m = metric(logits, chunk).sum()
            grads = torch.autograd.grad(m, [captured[u] for u in range(g.n_sources)])
            note_backward(len(chunk))
            gsum += torch.stack(grads, dim=2)
        acc += (delta * gsum / n_pts).sum(dim=(0, 1))
    name = "nap_ig" if ig else "nap"
    return NeuronScores(g, (acc / len(pairs)).numpy(), name, ablation.kind)


@dataclass
class IFRResult:
    scores: EdgeScores
    flagged_slots: list[int]


def ifr_scores(model: Model, tokens: torch.Tensor, mask: torch.Tensor, chunk: int = 128,
               per_example: bool = False):
    """Information-flow importance of each edge, averaged over real positions of the inputs.

    Per position, raw(u, v) = max(|a_v|_1 - |a_u - a_v|_1, 0), normalized over the
    sources feeding slot v.  Cells whose normalizer is zero contribute nothing; a
    slot with no valid cell at all gets zero scores and is flagged.
    With ``per_example`` returns a list of per-input results instead.
    """
    model = _frozen(model)
    g = model.graph
    src, slot_of = _edge_table(g)
    sums = torch.zeros(g.n_edges, dtype=torch.float64)
    counts = torch.zeros(len(g.slots), dtype=torch.float64)
    per: list[IFRResult] = []
    with torch.no_grad():
        for start in range(0, tokens.shape[0], chunk):
            t, m = tokens[start:start + chunk], mask[start:start + chunk]
            _, cache = run(model, t, m)
            B = t.shape[0]
            ex_sums = torch.zeros(B, g.n_edges, dtype=torch.float64)
            ex_counts = torch.zeros(B, len(g.slots), dtype=torch.float64)
            for si, s in enumerate(g.slots):
                a_v = cache.slot_inputs[si]  # (B, T, d)
                a_u = cache.outputs[:, :, list(s.sources)]  # (B, T, k, d)
                raw = (a_v.abs().sum(-1)[..., None] - (a_u - a_v[:, :, None]).abs().sum(-1)).clamp(min=0.0)
                denom = raw.sum(-1)
                valid = (denom > 0) & m
                norm = torch.where(valid[..., None], raw / denom.clamp(min=1e-300)[..., None], torch.zeros_like(raw))
                ex_sums[:, list(s.edges)] = norm.sum(dim=1)
                ex_counts[:, si] = valid.sum(dim=1).to(torch.float64)
            sums += ex_sums.sum(0)
            counts += ex_counts.sum(0)
            if per_example:
                for b in range(B):
                    c = ex_counts[b][slot_of]
                    vals = torch.where(c > 0, ex_sums[b] / c.clamp(min=1), torch.zeros_like(c))
                    flagged = [i for i in range(len(g.slots)) if ex_counts[b, i] == 0]
                    per.append(IFRResult(EdgeScores(g, vals.numpy(), "ifr"), flagged))
    if per_example:
        return per
    c = counts[slot_of]
    vals = torch.where(c > 0, sums / c.clamp(min=1), torch.zeros_like(c))
    flagged = [i for i in range(len(g.slots)) if counts[i] == 0]
    return IFRResult(EdgeScores(g, vals.numpy(), "ifr", flags={"zero_slots": flagged}), flagged)


# ----------------------------------------------------------------------------
# uniform gradient sampling

def _ugs_draw(theta: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    w = theta * (1 - theta)
    r = torch.rand(theta.shape, generator=gen, dtype=torch.float64)
    u = torch.rand(theta.shape, generator=gen, dtype=torch.float64)
    is_uniform = r < w
    is_one = (r >= w) & (r < w + theta - w / 2)
    alpha = torch.where(is_uniform, u, is_one.to(torch.float64))
    return alpha, is_uniform


def ugs_sample_alpha(theta, gen: torch.Generator | int) -> torch.Tensor:
    """alpha ~ Unif(0,1) w.p. theta(1-theta), 1 w.p. theta - w/2, else 0."""
    theta = torch.as_tensor(theta, dtype=torch.float64)
    if bool(((theta <= 0) | (theta >= 1)).any()):
        raise ValueError("theta must lie strictly inside (0, 1)")
    if isinstance(gen, int):
        gen = torch.Generator().manual_seed(gen)
    return _ugs_draw(theta, gen)[0]


@dataclass(frozen=True)
class UGSConfig:
    lam: float = 1e-3
    steps: int = 300
    lr: float = 0.05
    batch_size: int = 16
    init_logit: float = 1.0
    seed: int = 0


def _kl_last(clean_logits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    p = F.log_softmax(clean_logits[:, -1], dim=-1)
    q = F.log_softmax(logits[:, -1], dim=-1)
    return (p.exp() * (p - q)).sum(-1)


def ugs_train(model: Model, pairs: PairBatch, ablation: AblationSource, hyper: UGSConfig = UGSConfig()) -> EdgeScores:
    """Learn per-edge keep probabilities; loss = KL(clean || masked) + lam * sum(theta)."""
    model = _frozen(model)
    g = model.graph
    gen = torch.Generator().manual_seed(hyper.seed)
    logit = torch.full((g.n_edges,), hyper.init_logit, dtype=torch.float64)
    opt = torch.optim.Adam([logit.requires_grad_(True)], lr=hyper.lr)
    with torch.no_grad():
        abl_all = ablation.provide(model, pairs)
        clean_all, _ = run(model, pairs.clean, pairs.clean_mask)
    for step in range(hyper.steps):
        idx = torch.randint(0, len(pairs), (min(hyper.batch_size, len(pairs)),), generator=gen)
        batch = pairs.subset(idx)
        theta = torch.sigmoid(logit.detach())
        alpha, is_uniform = _ugs_draw(theta.expand(len(batch), -1), gen)
        alpha = alpha.requires_grad_(True)
        logits, _ = run(model, batch.clean, batch.clean_mask, Interventions(alpha=alpha, ablated=abl_all[idx]))
        kl = _kl_last(clean_all[idx], logits).mean()
        if not torch.isfinite(kl):
            raise FloatingPointError(f"UGS loss diverged at step {step}")
        (d_alpha,) = torch.autograd.grad(kl * len(batch), alpha)
        note_backward(len(batch))
        # On uniformly sampled coordinates dL/dalpha is an unbiased estimate of dL/dtheta
        # rescaled by the sampling rate, which cancels the sigmoid Jacobian theta(1-theta).
        per = torch.where(is_uniform, d_alpha, torch.zeros_like(d_alpha)).sum(0) / len(batch)
        grad = per + hyper.lam * theta * (1 - theta)
        opt.zero_grad()
        logit.grad = grad
        opt.step()
    theta = torch.sigmoid(logit.detach())
    return EdgeScores(g, theta.numpy(), "ugs", ablation.kind, flags={"lambda": hyper.lam, "steps": hyper.steps})

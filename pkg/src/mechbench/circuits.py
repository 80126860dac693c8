"""Circuits from scores, their weighted size, faithfulness curves, and ground-truth models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .ablation import AblationSource
from .data import PairBatch, PromptBatch
from .graph import LOGITS, Graph, NodeId
from .model import Interventions, Model, run
from .scoring import EdgeScores, Metric, NeuronScores, logit_diff
from .training import accuracy

log = logging.getLogger(__name__)

K_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


class DegenerateError(ValueError):
    pass


class GroundTruthError(ValueError):
    pass


@dataclass
class Circuit:
    graph: Graph
    edges: np.ndarray  # bool (n_edges,)
    neurons: dict[int, np.ndarray] = field(default_factory=dict)  # node index -> bool (d_model,)
    origin: str = ""

    def __post_init__(self) -> None:
        self.edges = np.asarray(self.edges, dtype=bool)
        if self.edges.shape != (self.graph.n_edges,):
            raise ValueError("edge mask has the wrong length")

    @classmethod
    def full(cls, graph: Graph) -> "Circuit":
        return cls(graph, np.ones(graph.n_edges, dtype=bool), origin="full")

    @classmethod
    def empty(cls, graph: Graph) -> "Circuit":
        return cls(graph, np.zeros(graph.n_edges, dtype=bool), origin="empty")

    @property
    def n_edges(self) -> int:
        return int(self.edges.sum())

    def neuron_fraction(self, node: int) -> float:
        mask = self.neurons.get(node)
        return 1.0 if mask is None else float(mask.mean())

    def neuron_mask(self, d_model: int) -> torch.Tensor | None:
        if not self.neurons:
            return None
        out = torch.ones(self.graph.n_sources, d_model, dtype=torch.float64)
        for node, mask in self.neurons.items():
            out[node] = torch.as_tensor(mask, dtype=torch.float64)
        return out


def weighted_edge_count(circuit: Circuit) -> float:
    """Sum over included edges of the fraction of the source node's neurons in the circuit."""
    src = circuit.graph.edge_source_index
    return float(sum(circuit.neuron_fraction(int(src[e])) for e in np.flatnonzero(circuit.edges)))


def budget_for(k: float, n_edges: int) -> int:
    return int(math.floor(k * n_edges + 1e-9))


def _ranked(values: np.ndarray, mode: str) -> np.ndarray:
    if mode not in ("value", "magnitude"):
        raise ValueError(f"unknown selection mode {mode!r}")
    key = values if mode == "value" else np.abs(values)
    # stable: ties keep graph order
    return np.argsort(-key, kind="stable")


def build_circuit(scores: EdgeScores | NeuronScores, k: float, strategy: str = "topn", mode: str = "value") -> Circuit:
    if not 0 < k <= 1:
        raise ValueError("k must lie in (0, 1]")
    if isinstance(scores, NeuronScores):
        return _neuron_circuit(scores, k, mode)
    g = scores.graph
    n = budget_for(k, g.n_edges)
    order = _ranked(scores.values, mode)
    keep = np.zeros(g.n_edges, dtype=bool)
    if strategy == "topn":
        keep[order[:n]] = True
    elif strategy == "greedy":
        rank = np.empty(g.n_edges, dtype=np.int64)
        rank[order] = np.arange(g.n_edges)
        reached = {g.node_index[LOGITS]}
        tgt, src = g.edge_target_index, g.edge_source_index
        while keep.sum() < n:
            cand = [e for e in range(g.n_edges) if not keep[e] and int(tgt[e]) in reached]
            if not cand:
                log.warning("greedy search exhausted connected edges at %d of %d", keep.sum(), n)
                break
            best = min(cand, key=lambda e: rank[e])
            keep[best] = True
            reached.add(int(src[best]))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return Circuit(g, keep, origin=f"{scores.method}:{strategy}:{mode}:{k}")


def _neuron_circuit(scores: NeuronScores, k: float, mode: str) -> Circuit:
    g = scores.graph
    n_src, d = scores.values.shape
    budget = k * g.n_edges
    deg = g.out_degrees[:n_src].astype(np.float64)
    order = _ranked(scores.values.reshape(-1), mode)
    chosen = np.zeros((n_src, d), dtype=bool)
    used = 0.0
    for flat in order:
        node, i = divmod(int(flat), d)
        cost = deg[node] / d
        if used + cost > budget + 1e-9:
            continue
        chosen[node, i] = True
        used += cost
    active = chosen.any(axis=1)
    edges = active[g.edge_source_index]
    neurons = {u: chosen[u] for u in range(n_src) if active[u] and not chosen[u].all()}
    return Circuit(g, edges, neurons, origin=f"{scores.method}:topn:{mode}:{k}")


# ----------------------------------------------------------------------------
# faithfulness

@dataclass
class MetricValues:
    full: torch.Tensor  # m(N) per pair
    empty: torch.Tensor  # m(empty) per pair
    keep: torch.Tensor  # bool, pairs retained


def _masked_metric(model: Model, pairs: PairBatch, abl: torch.Tensor, alpha: torch.Tensor,
                   nmask: torch.Tensor | None, metric: Metric) -> torch.Tensor:
    with torch.no_grad():
        logits, _ = run(model, pairs.clean, pairs.clean_mask,
                        Interventions(alpha=alpha, ablated=abl, neuron_mask=nmask))
    return metric(logits, pairs)


class FaithfulnessEvaluator:
    """Caches ablated activations and the m(N) / m(empty) reference values for a pair set."""

    def __init__(self, model: Model, pairs: PairBatch, ablation: AblationSource, metric: Metric = logit_diff,
                 tol: float = 1e-6, drop_degenerate: bool = False):
        self.model, self.metric = model, metric
        g = model.graph
        self.abl = ablation.provide(model, pairs)
        ones = torch.ones(g.n_edges, dtype=torch.float64)
        full = _masked_metric(model, pairs, self.abl, ones, None, metric)
        empty = _masked_metric(model, pairs, self.abl, torch.zeros_like(ones), None, metric)
        bad = torch.nonzero((full - empty).abs() <= tol).flatten().tolist()
        if bad and not drop_degenerate:
            raise DegenerateError(f"m(full) == m(empty) within {tol} for pairs {bad}")
        keep = torch.ones(len(pairs), dtype=torch.bool)
        keep[bad] = False
        if not keep.any():
            raise DegenerateError("every pair is degenerate")
        self.dropped = bad
        self.pairs = pairs.subset(torch.nonzero(keep).flatten())
        self.abl = self.abl[keep]
        self.m_full = full[keep]
        self.m_empty = empty[keep]

    def metric_of(self, circuit: Circuit) -> torch.Tensor:
        alpha = torch.as_tensor(circuit.edges, dtype=torch.float64)
        return _masked_metric(self.model, self.pairs, self.abl, alpha,
                              circuit.neuron_mask(self.model.config.d_model), self.metric)

    def faithfulness(self, circuit: Circuit) -> float:
        m_c = self.metric_of(circuit).mean()
        num = m_c - self.m_empty.mean()
        den = self.m_full.mean() - self.m_empty.mean()
        return float(num / den)


def faithfulness(model: Model, circuit: Circuit, pairs: PairBatch, ablation: AblationSource,
                 metric: Metric = logit_diff, tol: float = 1e-6, drop_degenerate: bool = False) -> float:
    """(m(C) - m(empty)) / (m(N) - m(empty)) with each m averaged over pairs first."""
    return FaithfulnessEvaluator(model, pairs, ablation, metric, tol, drop_degenerate).faithfulness(circuit)


def faithfulness_from_values(m_circuit: float, m_full: float, m_empty: float) -> float:
    den = m_full - m_empty
    if den == 0:
        raise DegenerateError("m(full) equals m(empty)")
    return (m_circuit - m_empty) / den


@dataclass
class FaithfulnessCurve:
    ks: list[float]
    fs: list[float]
    dropped: list[float] = field(default_factory=list)
    sizes: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.ks) != len(self.fs):
            raise ValueError("ks and fs differ in length")


def faithfulness_curve(
    evaluator: FaithfulnessEvaluator,
    scores: EdgeScores | NeuronScores,
    grid: Sequence[float] = K_GRID,
    strategy: str = "topn",
    mode: str = "value",
) -> FaithfulnessCurve:
    g = evaluator.model.graph
    ks, fs, dropped, sizes = [0.0], [0.0], [], [0.0]
    for k in grid:
        if budget_for(k, g.n_edges) < 1:
            dropped.append(k)
            continue
        c = build_circuit(scores, k, strategy, mode)
        ks.append(float(k))
        fs.append(evaluator.faithfulness(c))
        sizes.append(weighted_edge_count(c))
    return FaithfulnessCurve(ks, fs, dropped, sizes)


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def cpr_cmd(curve: FaithfulnessCurve) -> tuple[float, float]:
    """Areas under f and under |1 - f| over k in [0, 1], trapezoidal rule."""
    k = np.asarray(curve.ks, dtype=np.float64)
    f = np.asarray(curve.fs, dtype=np.float64)
    if len(k) < 2 or np.any(np.diff(k) <= 0):
        raise ValueError("curve points must be strictly increasing in k")
    if k[0] != 0.0 or k[-1] != 1.0:
        raise ValueError("curve must start at k=0 and end at k=1")
    return _trapezoid(f, k), _trapezoid(np.abs(1.0 - f), k)


def auroc(scores: np.ndarray | EdgeScores, truth: np.ndarray) -> float:
    """Rank AUROC of |score| against boolean membership, ties at midrank."""
    s = np.abs(scores.values if isinstance(scores, EdgeScores) else np.asarray(scores, dtype=np.float64))
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape:
        raise ValueError("scores and truth differ in shape")
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative edge")
    ranks = rankdata(s)
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ----------------------------------------------------------------------------
# ground truth

def prune_nodes(model: Model, kept: set[NodeId]) -> Model:
    """Zero the output projections of every head/MLP not in ``kept``."""
    params = {k: v.clone() for k, v in model.params.items()}
    for node in model.graph.nodes:
        if node in kept or node.kind in ("embed", "logits"):
            continue
        pre = f"blocks.{node.layer}."
        if node.kind == "head":
            params[pre + "W_O"][node.head] = 0.0
        else:
            params[pre + "W_out"].zero_()
            params[pre + "b_out"].zero_()
    return Model(model.config, params, model.vocab)


def truth_edges(graph: Graph, kept: set[NodeId]) -> np.ndarray:
    return np.array([e.source in kept and e.target in kept for e in graph.edges], dtype=bool)


def make_groundtruth(model: Model, kept_nodes: Sequence[NodeId], data: PromptBatch,
                     threshold: float = 0.95) -> tuple[Model, np.ndarray]:
    kept = set(kept_nodes)
    g = model.graph
    if g.nodes[0] not in kept or LOGITS not in kept:
        raise GroundTruthError("kept nodes must include the embedding and the logits")
    pruned = prune_nodes(model, kept)
    acc = accuracy(pruned, data)
    if acc < threshold:
        raise GroundTruthError(f"pruned model accuracy {acc:.3f} below threshold {threshold}")
    return pruned, truth_edges(g, kept)


def select_kept_nodes(model: Model, data: PromptBatch, threshold: float = 0.95) -> list[NodeId]:
    """Greedily drop heads/MLPs (latest first) while accuracy stays at or above ``threshold``."""
    g = model.graph
    kept = set(g.nodes)
    for node in reversed(g.nodes):
        if node.kind in ("embed", "logits"):
            continue
        trial = kept - {node}
        if accuracy(prune_nodes(model, trial), data) >= threshold:
            kept = trial
    return [n for n in g.nodes if n in kept]

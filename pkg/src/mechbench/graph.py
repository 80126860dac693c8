"""Node/edge structure of the decomposed residual stream.

Every node writes additively into the residual stream; every input slot of a
downstream node reads the sum of its upstream writers.  Attention heads have
three input slots (q, k, v), MLPs and the logits have one (``in``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

HEAD_SLOTS = ("q", "k", "v")
KIND_ORDER = {"embed": 0, "head": 1, "mlp": 2, "logits": 3}


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    def __post_init__(self) -> None:
        if self.kind not in KIND_ORDER:
            raise ValueError(f"unknown node kind {self.kind!r}")

    def __str__(self) -> str:
        if self.kind == "head":
            return f"a{self.layer}.h{self.head}"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text in ("embed", "logits"):
            return cls(text)
        if text.startswith("a") and ".h" in text:
            layer, head = text[1:].split(".h")
            return cls("head", int(layer), int(head))
        if text.startswith("m"):
            return cls("mlp", int(text[1:]))
        raise ValueError(f"cannot parse node id {text!r}")


EMBED = NodeId("embed")
LOGITS = NodeId("logits")


def Head(layer: int, head: int) -> NodeId:
    return NodeId("head", layer, head)


def Mlp(layer: int) -> NodeId:
    return NodeId("mlp", layer)


@dataclass(frozen=True, order=True)
class EdgeId:
    source: NodeId
    target: NodeId
    slot: str = "in"

    def __str__(self) -> str:
        suffix = f"<{self.slot}>" if self.slot != "in" else ""
        return f"{self.source}->{self.target}{suffix}"

    @classmethod
    def parse(cls, text: str) -> "EdgeId":
        src, rest = text.split("->")
        slot = "in"
        if rest.endswith(">"):
            rest, slot = rest[:-1].split("<")
        return cls(NodeId.parse(src), NodeId.parse(rest), slot)


@dataclass(frozen=True)
class Slot:
    target: NodeId
    name: str
    sources: tuple[int, ...]  # node indices
    edges: tuple[int, ...]  # edge indices, aligned with sources


@dataclass(frozen=True)
class Graph:
    n_layers: int
    n_heads: int
    nodes: tuple[NodeId, ...] = field(init=False)
    edges: tuple[EdgeId, ...] = field(init=False)
    slots: tuple[Slot, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("graph needs at least one layer and one head")
        nodes = [EMBED]
        for layer in range(self.n_layers):
            nodes += [Head(layer, h) for h in range(self.n_heads)]
            nodes.append(Mlp(layer))
        nodes.append(LOGITS)
        index = {n: i for i, n in enumerate(nodes)}

        edges: list[EdgeId] = []
        slots: list[Slot] = []

        def add_slot(target: NodeId, name: str, sources: list[NodeId]) -> None:
            start = len(edges)
            edges.extend(EdgeId(s, target, name) for s in sources)
            slots.append(Slot(target, name, tuple(index[s] for s in sources), tuple(range(start, len(edges)))))

        upstream = [EMBED]
        for layer in range(self.n_layers):
            heads = [Head(layer, h) for h in range(self.n_heads)]
            for head in heads:
                for slot in HEAD_SLOTS:
                    add_slot(head, slot, list(upstream))
            upstream += heads
            add_slot(Mlp(layer), "in", list(upstream))
            upstream.append(Mlp(layer))
        add_slot(LOGITS, "in", list(upstream))

        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "slots", tuple(slots))

    @cached_property
    def node_index(self) -> dict[NodeId, int]:
        return {n: i for i, n in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> dict[EdgeId, int]:
        return {e: i for i, e in enumerate(self.edges)}

    @cached_property
    def slot_index(self) -> dict[tuple[NodeId, str], int]:
        return {(s.target, s.name): i for i, s in enumerate(self.slots)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_sources(self) -> int:
        """Nodes that write into the residual stream (everything but logits)."""
        return len(self.nodes) - 1

    @cached_property
    def edge_source_index(self) -> np.ndarray:
        return np.array([self.node_index[e.source] for e in self.edges], dtype=np.int64)

    @cached_property
    def edge_target_index(self) -> np.ndarray:
        return np.array([self.node_index[e.target] for e in self.edges], dtype=np.int64)

    @cached_property
    def edge_slot_index(self) -> np.ndarray:
        out = np.empty(self.n_edges, dtype=np.int64)
        for si, slot in enumerate(self.slots):
            out[list(slot.edges)] = si
        return out

    def out_degree(self, node: NodeId) -> int:
        return sum(1 for e in self.edges if e.source == node)

    @cached_property
    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_source_index, minlength=self.n_nodes)

    def layer_of(self, node: NodeId) -> int:
        """Position in the write order used to group nodes for per-stage passes."""
        if node.kind == "embed":
            return 0
        if node.kind == "head":
            return 1 + 2 * node.layer
        if node.kind == "mlp":
            return 2 + 2 * node.layer
        return 1 + 2 * self.n_layers


def edge_count(n_layers: int, n_heads: int) -> int:
    """Closed form for ``len(Graph(n_layers, n_heads).edges)``."""
    total = 1 + n_layers * (n_heads + 1)  # logits reads every writer
    for layer in range(n_layers):
        upstream = 1 + layer * (n_heads + 1)
        total += 3 * n_heads * upstream + upstream + n_heads
    return total

"""Pre-norm decoder-only transformer with an explicitly decomposed residual stream.

Every input slot (q/k/v of each head, the MLP input, the unembedding input)
is computed as the sum of the outputs of its upstream writers.  That makes
each edge of the computation graph individually addressable: it can be
scaled, ablated, or overwritten without touching any other edge.

Layer normalization is recomputed on every slot input, never patched.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .graph import LOGITS, EdgeId, Graph, NodeId
from .tasks.vocab import Vocab

DTYPE = torch.float64
LN_EPS = 1e-5
CHECKPOINT_FORMAT = 1

torch.set_default_dtype(torch.float64)


class ConfigError(ValueError):
    pass


class UnknownEdgeError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    d_mlp: int = 256
    vocab_size: int = 64
    max_seq_len: int = 64
    seed: int = 0
    act: str = "gelu"
    norm: str = "layernorm"

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})")
        if self.act not in ("gelu", "relu", "linear"):
            raise ConfigError(f"unknown activation {self.act!r}")
        if self.norm not in ("layernorm", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, e, m = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {"W_E": (cfg.vocab_size, d), "W_pos": (cfg.max_seq_len, d)}
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        shapes.update({
            p + "ln1.w": (d,), p + "ln1.b": (d,),
            p + "W_Q": (h, d, e), p + "b_Q": (h, e),
            p + "W_K": (h, d, e), p + "b_K": (h, e),
            p + "W_V": (h, d, e), p + "b_V": (h, e),
            p + "W_O": (h, e, d),
            p + "ln2.w": (d,), p + "ln2.b": (d,),
            p + "W_in": (d, m), p + "b_in": (m,),
            p + "W_out": (m, d), p + "b_out": (d,),
        })
    shapes.update({"ln_f.w": (d,), "ln_f.b": (d,), "W_U": (d, cfg.vocab_size)})
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    vocab: Vocab | None = None
    graph: Graph = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.config.validate()
        self.graph = Graph(self.config.n_layers, self.config.n_heads)
        shapes = _param_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, shape in shapes.items():
            if tuple(self.params[k].shape) != shape:
                raise ConfigError(f"parameter {k} has shape {tuple(self.params[k].shape)}, expected {shape}")
            if not torch.isfinite(self.params[k]).all():
                raise ConfigError(f"parameter {k} has non-finite entries")
        if self.vocab is not None and len(self.vocab) != self.config.vocab_size:
            raise ConfigError(f"vocab has {len(self.vocab)} tokens, config says {self.config.vocab_size}")
        self._prepare_slot_tables()

    def _prepare_slot_tables(self) -> None:
        g = self.graph
        L, H = self.config.n_layers, self.config.n_heads
        # For each group of slots computed together: dense (n_slots, n_upstream) edge-index table.
        self._head_tables = []
        self._mlp_tables = []
        for layer in range(L):
            rows = [list(g.slots[g.slot_index[(NodeId("head", layer, h), s)]].edges) for h in range(H) for s in ("q", "k", "v")]
            self._head_tables.append(torch.tensor(rows, dtype=torch.long))
            self._mlp_tables.append(torch.tensor([list(g.slots[g.slot_index[(NodeId("mlp", layer), "in")]].edges)], dtype=torch.long))
        self._logit_table = torch.tensor([list(g.slots[g.slot_index[(LOGITS, "in")]].edges)], dtype=torch.long)

    def p(self, name: str) -> torch.Tensor:
        return self.params[name]

    def with_params(self, params: Mapping[str, torch.Tensor]) -> "Model":
        merged = dict(self.params)
        merged.update(params)
        return Model(self.config, merged, self.vocab)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def init_model(config: ModelConfig, seed: int | None = None, vocab: Vocab | None = None) -> Model:
    config.validate()
    seed = config.seed if seed is None else seed
    gen = torch.Generator().manual_seed(int(seed))
    params: dict[str, torch.Tensor] = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf in ("w",):
            t = torch.ones(shape)
        elif leaf.startswith("b") or leaf == "b":
            t = torch.zeros(shape)
        elif name in ("W_E", "W_pos"):
            t = torch.randn(shape, generator=gen) * 0.5
        else:
            fan_in = shape[-2]
            t = torch.randn(shape, generator=gen) / math.sqrt(fan_in)
        params[name] = t.to(DTYPE)
    return Model(config, params, vocab)


# ----------------------------------------------------------------------------
# pass accounting

@dataclass
class PassCounter:
    forward: int = 0
    backward: int = 0

    def per_example(self, n: int) -> tuple[float, float]:
        return self.forward / n, self.backward / n


_COUNTERS: list[PassCounter] = []


@contextlib.contextmanager
def count_passes() -> Iterator[PassCounter]:
    """Count per-example forward/backward passes issued inside the block."""
    c = PassCounter()
    _COUNTERS.append(c)
    try:
        yield c
    finally:
        _COUNTERS.remove(c)


def note_backward(batch_size: int) -> None:
    for c in _COUNTERS:
        c.backward += batch_size


# ----------------------------------------------------------------------------
# forward machinery

@dataclass
class ActivationCache:
    graph: Graph
    outputs: torch.Tensor  # (B, T, n_sources, d): output of every writer node
    slot_inputs: list[torch.Tensor]  # per graph slot, (B, T, d)
    mask: torch.Tensor
    slot_groups: list[tuple[int, torch.Tensor]] = field(default_factory=list)  # (first slot, (B, T, n, d))

    def node(self, node: NodeId) -> torch.Tensor:
        i = self.graph.node_index[node]
        if node == LOGITS:
            raise KeyError("the logits node has no residual output")
        return self.outputs[:, :, i]

    def slot(self, node: NodeId, slot: str = "in") -> torch.Tensor:
        return self.slot_inputs[self.graph.slot_index[(node, slot)]]

    def edge_contribution(self, edge: EdgeId) -> torch.Tensor:
        return self.node(edge.source)


@dataclass
class Interventions:
    """Everything ``run`` can do to a forward pass besides plain evaluation.

    alpha:        per-edge keep weight, (E,) or (B, E); slot input is
                  sum_u alpha*live_u + (1-alpha)*ablated_u
    ablated:      (B, T, n_sources, d) replacement activations for alpha < 1
    neuron_mask:  (n_sources, d) keep weight per writer neuron (all outgoing edges)
    node_hooks:   node index -> fn(output (B,T,d)) -> replacement
    head_hooks:   layer -> fn(head outputs (B,T,H,d)) -> replacement
    resid_hooks:  boundary b in 0..L -> fn(residual (B,T,d)) -> replacement;
                  boundary 0 is after the embedding, b is after block b-1
    slot_patches: slot index -> list of (source node index, tensor); replaces
                  that single edge's contribution
    """

    alpha: torch.Tensor | None = None
    ablated: torch.Tensor | None = None
    neuron_mask: torch.Tensor | None = None
    node_hooks: Mapping[int, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    head_hooks: Mapping[int, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    resid_hooks: Mapping[int, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    slot_patches: Mapping[int, Sequence[tuple[int, torch.Tensor]]] = field(default_factory=dict)


def as_batch(tokens: Any, mask: Any = None) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(tokens, torch.Tensor):
        toks = tokens.long()
        if toks.dim() == 1:
            toks = toks[None]
        m = torch.ones_like(toks, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool).reshape(toks.shape)
        return toks, m
    tokens = list(tokens)
    if tokens and not hasattr(tokens[0], "__len__"):
        tokens = [tokens]  # a single flat sequence
    seqs = [list(s) for s in tokens]
    T = max(len(s) for s in seqs)
    toks = torch.zeros((len(seqs), T), dtype=torch.long)
    m = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        if s:
            toks[i, T - len(s):] = torch.tensor(s, dtype=torch.long)
            m[i, T - len(s):] = True
    return toks, m


def _layernorm(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if cfg.norm == "none":
        return x
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * w + b


def _act(x: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if cfg.act == "gelu":
        return F.gelu(x, approximate="tanh")
    if cfg.act == "relu":
        return torch.relu(x)
    return x


def _mix(live: torch.Tensor, abl: torch.Tensor | None, alpha: torch.Tensor | None) -> torch.Tensor:
    """Slot inputs from writer outputs.

    live, abl: (B, T, n, d); alpha: None, (S, n) or (B, S, n) -> (B, T, S, d)
    """
    if alpha is None:
        return live.sum(dim=2, keepdim=True)
    if alpha.dim() == 2:
        out = torch.einsum("btnd,sn->btsd", live, alpha)
        if abl is not None:
            out = out + torch.einsum("btnd,sn->btsd", abl, 1.0 - alpha)
    else:
        out = torch.einsum("btnd,bsn->btsd", live, alpha)
        if abl is not None:
            out = out + torch.einsum("btnd,bsn->btsd", abl, 1.0 - alpha)
    return out


def run(
    model: Model,
    tokens: Any,
    mask: Any = None,
    iv: Interventions | None = None,
    split_slots: bool = False,
) -> tuple[torch.Tensor, ActivationCache]:
    """Core forward pass.  Returns logits (B, T, V) and the activation cache.

    ``split_slots`` materializes one tensor per q/k/v slot even when they are
    identical, so gradients with respect to each slot stay separate.
    """
    cfg, g = model.config, model.graph
    toks, m = as_batch(tokens, mask)
    B, T = toks.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if toks.numel() and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise ValueError("token id out of vocabulary range")
    for c in _COUNTERS:
        c.forward += B
    iv = iv or Interventions()
    L, H, d = cfg.n_layers, cfg.n_heads, cfg.d_model

    alpha = iv.alpha
    if alpha is not None:
        alpha = alpha.to(DTYPE)
        if alpha.shape[-1] != g.n_edges:
            raise ValueError(f"alpha has {alpha.shape[-1]} entries, graph has {g.n_edges} edges")
    abl_all = iv.ablated
    if alpha is not None and abl_all is None:
        raise ValueError("alpha given without ablated activations")
    nmask = iv.neuron_mask
    if nmask is not None and abl_all is None:
        raise ValueError("neuron_mask given without ablated activations")

    pos = (m.long().cumsum(dim=1) - 1).clamp(min=0)
    causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
    allowed = causal[None] & (m[:, None, :] | torch.eye(T, dtype=torch.bool)[None])

    outs: list[torch.Tensor] = []
    slot_inputs: list[torch.Tensor | None] = [None] * len(g.slots)
    extra = None  # accumulated residual-hook deltas
    groups: list[tuple[int, torch.Tensor]] = []

    def finish_node(idx: int, out: torch.Tensor) -> torch.Tensor:
        hook = iv.node_hooks.get(idx)
        return out if hook is None else hook(out)

    def stacked(n: int) -> tuple[torch.Tensor, torch.Tensor | None]:
        live = torch.stack(outs[:n], dim=2)
        abl = None if abl_all is None else abl_all[:, :, :n]
        if nmask is not None:
            live = abl + (live - abl) * nmask[:n]
        return live, abl

    def slot_alpha(table: torch.Tensor) -> torch.Tensor | None:
        if alpha is None:
            return None
        return alpha[..., table]

    def apply_resid_hook(boundary: int) -> None:
        nonlocal extra
        hook = iv.resid_hooks.get(boundary)
        if hook is None:
            return
        resid = torch.stack(outs, dim=2).sum(dim=2)
        if extra is not None:
            resid = resid + extra
        new = hook(resid)
        delta = new - resid
        extra = delta if extra is None else extra + delta

    def finalize_slots(group: torch.Tensor, first_slot: int, n_slots: int) -> torch.Tensor:
        """Add hook deltas and edge patches; a width-1 group stands for n_slots identical slots."""
        if extra is not None:
            group = group + extra[:, :, None, :]
        patched = any(first_slot + j in iv.slot_patches for j in range(n_slots))
        if group.shape[2] == 1 and n_slots > 1 and (patched or split_slots):
            group = group.expand(B, T, n_slots, d).clone()
        if patched:
            cols = list(group.unbind(dim=2))
            for j in range(n_slots):
                for src, value in iv.slot_patches.get(first_slot + j, ()):
                    cols[j] = cols[j] + value - outs[src]
            group = torch.stack(cols, dim=2)
        for j in range(n_slots):
            slot_inputs[first_slot + j] = group[:, :, min(j, group.shape[2] - 1)]
        groups.append((first_slot, group))
        return group

    # embedding
    emb = model.p("W_E")[toks] + model.p("W_pos")[pos]
    outs.append(finish_node(0, emb))
    apply_resid_hook(0)

    node_i = 1
    slot_i = 0
    for layer in range(L):
        pre = f"blocks.{layer}."
        n_src = len(outs)
        live, abl = stacked(n_src)
        hin = _mix(live, abl, slot_alpha(model._head_tables[layer][:, :n_src]))
        hin = finalize_slots(hin, slot_i, 3 * H)
        slot_i += 3 * H
        x = _layernorm(hin, model.p(pre + "ln1.w"), model.p(pre + "ln1.b"), cfg)
        x = x.expand(B, T, 3 * H, d).reshape(B, T, H, 3, d)
        q = torch.einsum("bthd,hde->bthe", x[:, :, :, 0], model.p(pre + "W_Q")) + model.p(pre + "b_Q")
        k = torch.einsum("bthd,hde->bthe", x[:, :, :, 1], model.p(pre + "W_K")) + model.p(pre + "b_K")
        v = torch.einsum("bthd,hde->bthe", x[:, :, :, 2], model.p(pre + "W_V")) + model.p(pre + "b_V")
        scores = torch.einsum("bqhe,bkhe->bhqk", q, k) / math.sqrt(cfg.d_head)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        pattern = torch.softmax(scores, dim=-1)
        z = torch.einsum("bhqk,bkhe->bqhe", pattern, v)
        head_out = torch.einsum("bqhe,hed->bqhd", z, model.p(pre + "W_O"))
        hook = iv.head_hooks.get(layer)
        if hook is not None:
            head_out = hook(head_out)
        for h in range(H):
            outs.append(finish_node(node_i, head_out[:, :, h]))
            node_i += 1

        n_src = len(outs)
        live, abl = stacked(n_src)
        min_ = _mix(live, abl, slot_alpha(model._mlp_tables[layer][:, :n_src]))
        min_ = finalize_slots(min_, slot_i, 1)
        slot_i += 1
        x = _layernorm(min_[:, :, 0], model.p(pre + "ln2.w"), model.p(pre + "ln2.b"), cfg)
        hidden = _act(x @ model.p(pre + "W_in") + model.p(pre + "b_in"), cfg)
        outs.append(finish_node(node_i, hidden @ model.p(pre + "W_out") + model.p(pre + "b_out")))
        node_i += 1
        apply_resid_hook(layer + 1)

    n_src = len(outs)
    live, abl = stacked(n_src)
    lin = _mix(live, abl, slot_alpha(model._logit_table[:, :n_src]))
    lin = finalize_slots(lin, slot_i, 1)
    x = _layernorm(lin[:, :, 0], model.p("ln_f.w"), model.p("ln_f.b"), cfg)
    logits = x @ model.p("W_U")
    cache = ActivationCache(g, torch.stack(outs, dim=2), slot_inputs, m, groups)  # type: ignore[arg-type]
    return logits, cache


def forward(model: Model, tokens: Any, mask: Any = None) -> tuple[torch.Tensor, ActivationCache]:
    return run(model, tokens, mask)


PatchKey = EdgeId | tuple[NodeId, Sequence[int] | None]


def forward_patched(model: Model, tokens: Any, patch: Mapping[Any, torch.Tensor], mask: Any = None) -> torch.Tensor:
    """Forward pass with individual edges or node outputs overwritten.

    Keys are either an :class:`EdgeId` (the source's contribution to that one
    target slot is replaced) or ``(NodeId, neurons)`` where ``neurons`` is a
    sequence of indices or ``None`` for the whole output (every outgoing edge
    sees the replaced value).
    """
    g = model.graph
    slot_patches: dict[int, list[tuple[int, torch.Tensor]]] = {}
    node_hooks: dict[int, Callable[[torch.Tensor], torch.Tensor]] = {}
    for key, value in patch.items():
        value = torch.as_tensor(value, dtype=DTYPE)
        if isinstance(key, EdgeId):
            if key not in g.edge_index:
                raise UnknownEdgeError(str(key))
            si = g.slot_index[(key.target, key.slot)]
            slot_patches.setdefault(si, []).append((g.node_index[key.source], value))
        else:
            node, neurons = key
            if node not in g.node_index or node == LOGITS:
                raise UnknownEdgeError(f"cannot patch node {node}")
            idx = None if neurons is None else torch.as_tensor(list(neurons), dtype=torch.long)
            if idx is not None and idx.numel() and (idx.min() < 0 or idx.max() >= model.config.d_model):
                raise ValueError("neuron index outside d_model")

            def hook(out: torch.Tensor, value=value, idx=idx) -> torch.Tensor:
                if idx is None:
                    return value.expand_as(out)
                out = out.clone()
                out[..., idx] = value.expand_as(out)[..., idx]
                return out

            node_hooks[g.node_index[node]] = hook
    logits, _ = run(model, tokens, mask, Interventions(node_hooks=node_hooks, slot_patches=slot_patches))
    return logits


def list_edges(model: Model | Graph) -> list[EdgeId]:
    g = model.graph if isinstance(model, Model) else model
    return list(g.edges)


def logit_diff_metric(logits: torch.Tensor, answer: Any, cf_answer: Any) -> torch.Tensor:
    """logit(y) - logit(y') at the final position.

    ``logits`` is (V,), (T, V) or (B, T, V); answers are ints or per-example tensors.
    """
    if logits.dim() == 1:
        return logits[answer] - logits[cf_answer]
    last = logits[..., -1, :] if logits.dim() >= 2 else logits
    if last.dim() == 1:
        return last[answer] - last[cf_answer]
    a = torch.as_tensor(answer, dtype=torch.long).reshape(-1)
    b = torch.as_tensor(cf_answer, dtype=torch.long).reshape(-1)
    rows = torch.arange(last.shape[0])
    return last[rows, a] - last[rows, b]


def greedy_next(model: Model, tokens: Any, mask: Any = None) -> torch.Tensor:
    with torch.no_grad():
        logits, _ = run(model, tokens, mask)
    return logits[:, -1].argmax(dim=-1)


# ----------------------------------------------------------------------------
# checkpoints

def save_model(model: Model, path: str | Path) -> Path:
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocab": None if model.vocab is None else model.vocab.tokens,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_model(path: str | Path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {k: torch.from_numpy(np.array(data[k])).to(DTYPE) for k in data.files if k != "__meta__"}
    vocab = None if meta["vocab"] is None else Vocab(meta["vocab"])
    return Model(ModelConfig(**meta["config"]), params, vocab)


# ----------------------------------------------------------------------------
# tape compilation (second route through the numpy autodiff engine)

def build_tape(model: Model, tokens: Sequence[int], answer: int, cf_answer: int):
    """Record the plain (non-decomposed) forward for one unpadded prompt.

    Leaves are named after the model parameters; the tape also names
    ``logits`` (T, V) and ``metric`` (scalar logit difference at the last
    position).
    """
    from .autodiff import Tape

    cfg = model.config
    T = len(tokens)
    tape = Tape()
    leaf = {k: tape.leaf(k) for k in sorted(model.params)}
    emb = tape.embedding(leaf["W_E"], list(tokens))
    pos = tape.take(leaf["W_pos"], list(range(T)), axis=0)
    resid = tape.add(emb, pos)
    causal = np.tril(np.ones((T, T), dtype=bool))

    def ln(x: int, pre: str) -> int:
        if cfg.norm == "none":
            return x
        return tape.layernorm(x, leaf[pre + ".w"], leaf[pre + ".b"])

    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        x = ln(resid, pre + "ln1")
        attn = None
        for h in range(cfg.n_heads):
            def proj(name: str) -> int:
                w = tape.take(leaf[pre + "W_" + name], h, axis=0)
                b = tape.take(leaf[pre + "b_" + name], h, axis=0)
                return tape.add(tape.matmul(x, w), b)

            q, k, v = proj("Q"), proj("K"), proj("V")
            scores = tape.scale(tape.matmul(q, tape.transpose(k, (1, 0))), 1.0 / math.sqrt(cfg.d_head))
            pattern = tape.softmax(scores, mask=causal)
            out = tape.matmul(tape.matmul(pattern, v), tape.take(leaf[pre + "W_O"], h, axis=0))
            attn = out if attn is None else tape.add(attn, out)
        resid = tape.add(resid, attn)
        x = ln(resid, pre + "ln2")
        hidden = tape.add(tape.matmul(x, leaf[pre + "W_in"]), leaf[pre + "b_in"])
        if cfg.act == "gelu":
            hidden = tape.gelu(hidden)
        elif cfg.act == "relu":
            hidden = tape.relu(hidden)
        mlp = tape.add(tape.matmul(hidden, leaf[pre + "W_out"]), leaf[pre + "b_out"])
        resid = tape.add(resid, mlp)
    logits = tape.matmul(ln(resid, "ln_f"), leaf["W_U"])
    tape.name(logits, "logits")
    last = tape.take(logits, T - 1, axis=0)
    sel = np.zeros(cfg.vocab_size)
    sel[answer] += 1.0
    sel[cf_answer] -= 1.0
    metric = tape.sum(tape.mul(last, tape.const(sel)))
    tape.name(metric, "metric")
    return tape


def tape_inputs(model: Model) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.params.items()}

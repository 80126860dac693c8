"""Ablation values for node outputs: counterfactual, dataset mean, and learned (optimal) vectors.

Mean and optimal values are stored per position, aligned from the final
token backward, so prompts of different lengths share the answer position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import PairBatch, PromptBatch
from .model import DTYPE, Interventions, Model, run

KINDS = ("counterfactual", "mean", "optimal")


class AblationError(ValueError):
    pass


def align_right(values: torch.Tensor, T: int) -> torch.Tensor:
    """(P, ...) end-aligned values -> (T, ...) for a batch of length T; missing leading positions are zero."""
    P = values.shape[0]
    if T <= P:
        return values[P - T:]
    pad = torch.zeros((T - P,) + tuple(values.shape[1:]), dtype=values.dtype)
    return torch.cat([pad, values], dim=0)


@dataclass
class AblationSource:
    kind: str
    values: torch.Tensor | None = None  # (P, n_sources, d) for mean / optimal
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise AblationError(f"unknown ablation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "counterfactual" and self.values is None:
            raise AblationError(f"{self.kind} ablation needs precomputed values")

    def provide(self, model: Model, pairs: PairBatch) -> torch.Tensor:
        """Ablated node outputs (B, T, n_sources, d) aligned with ``pairs.clean``."""
        B, T = pairs.clean.shape
        if self.kind == "counterfactual":
            with torch.no_grad():
                _, cache = run(model, pairs.corrupt, pairs.corrupt_mask)
            return cache.outputs
        return align_right(self.values, T)[None].expand(B, -1, -1, -1)

    def for_prompts(self, B: int, T: int) -> torch.Tensor:
        if self.kind == "counterfactual":
            raise AblationError("counterfactual ablation needs a paired input")
        return align_right(self.values, T)[None].expand(B, -1, -1, -1)


def mean_activations(model: Model, tokens: torch.Tensor, mask: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Position-wise mean of every node output, ignoring padding; (T, n_sources, d)."""
    if tokens.shape[0] == 0:
        raise AblationError("cannot take the mean over an empty dataset")
    total = None
    count = torch.zeros(tokens.shape[1], dtype=DTYPE)
    with torch.no_grad():
        for start in range(0, tokens.shape[0], chunk):
            t, m = tokens[start:start + chunk], mask[start:start + chunk]
            _, cache = run(model, t, m)
            w = m.to(DTYPE)[:, :, None, None]
            s = (cache.outputs * w).sum(dim=0)
            total = s if total is None else total + s
            count += m.to(DTYPE).sum(dim=0)
    return total / count.clamp(min=1.0)[:, None, None]


def mean_source(model: Model, data: PromptBatch) -> AblationSource:
    return AblationSource("mean", mean_activations(model, data.tokens, data.mask))


@dataclass(frozen=True)
class OAConfig:
    lr: float = 1e-3
    batch_size: int = 20
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 150
    seed: int = 0


def _replicated_loss(model: Model, vectors: torch.Tensor, batch: PromptBatch, per_node: bool = False) -> torch.Tensor:
    """Cross-entropy with each node's output set to its vector, all nodes in one replicated batch.

    Replica u of the batch has node u ablated; the other nodes run normally.
    """
    n_src = vectors.shape[1]
    B, T = batch.tokens.shape
    toks = batch.tokens.repeat(n_src, 1)
    mask = batch.mask.repeat(n_src, 1)
    vals = align_right(vectors, T)  # (T, n, d)
    hooks = {}
    for u in range(n_src):
        def hook(out: torch.Tensor, u: int = u) -> torch.Tensor:
            rows = torch.zeros(out.shape[0], dtype=torch.bool)
            rows[u * B:(u + 1) * B] = True
            return torch.where(rows[:, None, None], vals[None, :, u], out)

        hooks[u] = hook
    logits, _ = run(model, toks, mask, Interventions(node_hooks=hooks))
    ce = F.cross_entropy(logits[:, -1], batch.answers.repeat(n_src), reduction="none").reshape(n_src, B).mean(dim=1)
    return ce if per_node else ce.sum()


def train_optimal_ablation(
    model: Model,
    train: PromptBatch,
    validation: PromptBatch,
    hyper: OAConfig = OAConfig(),
    init: torch.Tensor | None = None,
) -> AblationSource:
    """Learn an input-independent replacement vector per node output, initialized at the mean."""
    if len(train) == 0 or len(validation) == 0:
        raise AblationError("optimal ablation needs non-empty train and validation data")
    start = mean_activations(model, train.tokens, train.mask) if init is None else init.clone()
    frozen = Model(model.config, {k: v.detach() for k, v in model.params.items()}, model.vocab)
    vectors = start.clone().requires_grad_(True)
    opt = torch.optim.Adam([vectors], lr=hyper.lr)
    gen = torch.Generator().manual_seed(hyper.seed)

    with torch.no_grad():
        initial = _replicated_loss(frozen, start, validation, per_node=True)
    best_loss = initial.clone()
    best = start.clone()
    since_improved = 0
    steps_run = 0
    for step in range(1, hyper.max_steps + 1):
        idx = torch.randint(0, len(train), (min(hyper.batch_size, len(train)),), generator=gen)
        loss = _replicated_loss(frozen, vectors, train.subset(idx))
        if not torch.isfinite(loss):
            raise AblationError(f"optimal-ablation loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_run = step
        if step % hyper.eval_every == 0:
            with torch.no_grad():
                val = _replicated_loss(frozen, vectors.detach(), validation, per_node=True)
            better = val < best_loss
            if bool(better.any()):
                best[:, better] = vectors.detach()[:, better]
                best_loss = torch.where(better, val, best_loss)
                since_improved = 0
            else:
                since_improved += hyper.eval_every
            if since_improved >= hyper.patience:
                break
    info = {
        "steps": steps_run,
        "initial_val_loss": [float(x) for x in initial],
        "best_val_loss": [float(x) for x in best_loss],
    }
    return AblationSource("optimal", best.detach(), info)


def resolve(kind: str, precomputed: dict[str, AblationSource] | None = None) -> AblationSource:
    """Look up the ablation source for ``kind``; counterfactual needs nothing precomputed."""
    if kind == "counterfactual":
        return AblationSource("counterfactual")
    if not precomputed or kind not in precomputed:
        raise AblationError(f"no precomputed {kind} ablation values available")
    return precomputed[kind]


def save_source(source: AblationSource, path: str | Path, model_hash: str, data_hash: str) -> Path:
    if source.values is None:
        raise AblationError("counterfactual ablations have nothing to persist")
    meta = {"kind": source.kind, "model_hash": model_hash, "dataset_hash": data_hash, "info": source.info}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, values=source.values.numpy(), meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    return path


def load_source(path: str | Path, model_hash: str | None = None) -> AblationSource:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        values = torch.from_numpy(np.array(data["values"])).to(DTYPE)
    if model_hash is not None and meta["model_hash"] != model_hash:
        raise AblationError(f"ablation values were computed for model {meta['model_hash']}, not {model_hash}")
    return AblationSource(meta["kind"], values, meta["info"])

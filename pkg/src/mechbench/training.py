"""Answer-token cross-entropy training for the toy model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import PromptBatch
from .model import Interventions, Model, run

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    warmup: int = 50
    window: int = 200  # steps per loss window for the health check


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def answer_loss(model: Model, batch: PromptBatch, iv: Interventions | None = None) -> torch.Tensor:
    logits, _ = run(model, batch.tokens, batch.mask, iv)
    return F.cross_entropy(logits[:, -1], batch.answers)


def accuracy(model: Model, batch: PromptBatch, chunk: int = 512) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), chunk):
            sub = batch.subset(range(start, min(start + chunk, len(batch))))
            logits, _ = run(model, sub.tokens, sub.mask)
            correct += int((logits[:, -1].argmax(-1) == sub.answers).sum())
    return correct / len(batch)


def train_model(model: Model, data: PromptBatch, hyper: TrainConfig = TrainConfig()) -> tuple[Model, TrainLog]:
    """Adam on the answer-token loss; returns a new model (the input is untouched)."""
    out_log = TrainLog()
    if hyper.steps == 0:
        return model, out_log
    params = {k: v.detach().clone().requires_grad_(True) for k, v in model.params.items()}
    working = Model(model.config, params, model.vocab)
    opt = torch.optim.AdamW(params.values(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(1, hyper.warmup)))
    gen = torch.Generator().manual_seed(hyper.seed)
    n = len(data)
    prev_window = None
    for step in range(hyper.steps):
        idx = torch.randint(0, n, (min(hyper.batch_size, n),), generator=gen)
        loss = answer_loss(working, data.subset(idx))
        value = float(loss.detach())
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        out_log.losses.append(value)
        if (step + 1) % hyper.window == 0:
            window = sum(out_log.losses[-hyper.window:]) / hyper.window
            if prev_window is not None and window > 1.1 * prev_window:
                msg = f"loss rose by more than 10% over steps {step + 1 - hyper.window}-{step + 1}"
                log.warning(msg)
                out_log.warnings.append(msg)
            prev_window = window
    trained = {k: v.detach().clone() for k, v in params.items()}
    return Model(model.config, trained, model.vocab), out_log

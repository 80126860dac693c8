"""Hand-built models with known answers, used as oracles.

``linear_model`` has a metric that is exactly linear in every edge's
contribution.  ``planted_model`` stores one binary variable along a known
residual direction and a second one elsewhere, with a one-token prompt per
input.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

from .causal import CausalModel
from .model import DTYPE, Model, ModelConfig, init_model
from .tasks.common import Counterfactual, TaskInstance
from .tasks.vocab import Vocab


def linear_model(vocab_size: int, seed: int = 0, max_seq_len: int = 40, **overrides) -> Model:
    """No normalization, identity MLP activation, and constant attention patterns."""
    cfg = ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, seed=seed, act="linear", norm="none", **overrides)
    model = init_model(cfg)
    for layer in range(cfg.n_layers):
        for name in ("W_Q", "W_K", "b_Q", "b_K"):
            model.params[f"blocks.{layer}.{name}"].zero_()
    return model


# ----------------------------------------------------------------------------
# planted binary variables

A_CODES, B_CODES, NUISANCE = "pq", "rs", "wxyz"
OUTPUTS = ("oa", "ob", "oc", "od")


def planted_token(a: int, b: int, j: int) -> str:
    return " " + A_CODES[a] + B_CODES[b] + NUISANCE[j]


def _decode(prompt: str) -> tuple[int, int, int]:
    word = prompt.strip()
    return A_CODES.index(word[0]), B_CODES.index(word[1]), NUISANCE.index(word[2])


PLANTED_CAUSAL = CausalModel(
    "planted",
    ("T", "A", "B", "O"),
    {"A": ("T",), "B": ("T",), "O": ("A", "B")},
    {
        "A": lambda t: _decode(t.prompt)[0],
        "B": lambda t: _decode(t.prompt)[1],
        "O": lambda a, b: 2 * a + b,
    },
    "O",
    readout=lambda v: OUTPUTS[v["O"]],
)


@dataclass
class PlantedModel:
    model: Model
    direction: torch.Tensor  # unit vector carrying variable A
    instances: list[TaskInstance]  # every (base, counterfactual) pair, counterfactual name "pair"


def planted_model(d: int = 16, direction: torch.Tensor | int | None = None, seed: int = 0,
                  a_scale: float = 2.0) -> PlantedModel:
    """A one-block model whose blocks are switched off; the embedding carries everything.

    ``direction`` is a unit vector, a coordinate index, or None for a random
    unit vector.  Variable B and a nuisance code live in the orthogonal
    complement, so only the planted direction decides A.
    """
    gen = torch.Generator().manual_seed(seed)
    if direction is None:
        u = torch.randn(d, generator=gen, dtype=DTYPE)
    elif isinstance(direction, int):
        u = torch.zeros(d, dtype=DTYPE)
        u[direction] = 1.0
    else:
        u = torch.as_tensor(direction, dtype=DTYPE).clone()
    u = u / u.norm()

    def orth(x: torch.Tensor, basis: list[torch.Tensor]) -> torch.Tensor:
        for e in basis:
            x = x - (x @ e) * e
        return x / x.norm()

    if isinstance(direction, int):
        # Keep B and the nuisance codes off the planted coordinate so it stays axis-aligned.
        others = [i for i in range(d) if i != direction]
        v = torch.zeros(d, dtype=DTYPE)
        v[others[: max(1, len(others) // 2)]] = 1.0
        v = orth(v, [u])
    else:
        v = orth(torch.randn(d, generator=gen, dtype=DTYPE), [u])
    nuisance = [orth(torch.randn(d, generator=gen, dtype=DTYPE), [u, v]) for _ in NUISANCE]

    inputs = [planted_token(a, b, j) for a, b, j in itertools.product(range(2), range(2), range(len(NUISANCE)))]
    vocab = Vocab(["<pad>"] + inputs + [" " + o for o in OUTPUTS])
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=d, d_head=d, d_mlp=4, vocab_size=len(vocab),
                      max_seq_len=4, seed=seed, act="relu", norm="none")
    model = init_model(cfg, vocab=vocab)
    for name, t in model.params.items():
        if name != "W_E":
            t.zero_()
    W_E = model.params["W_E"]
    W_E.zero_()
    for a, b, j in itertools.product(range(2), range(2), range(len(NUISANCE))):
        W_E[vocab.token_id(planted_token(a, b, j))] = a_scale * (2 * a - 1) * u + (2 * b - 1) * v + nuisance[j]
    W_U = model.params["W_U"]
    for o, name in enumerate(OUTPUTS):
        a, b = divmod(o, 2)
        W_U[:, vocab.token_id(" " + name)] = (2 * a - 1) * u + (2 * b - 1) * v
    model = Model(cfg, model.params, vocab)

    instances = []
    for base, cf in itertools.product(inputs, inputs):
        ab, bb, _ = _decode(base)
        ac, bc, _ = _decode(cf)
        instances.append(TaskInstance(
            "planted", base, "planted", {}, OUTPUTS, 2 * ab + bb,
            {"pair": Counterfactual(cf, OUTPUTS, 2 * ac + bc, {})},
        ))
    return PlantedModel(model, u, instances)

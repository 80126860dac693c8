import pytest
import torch
import torch.nn.functional as F

from mechbench.ablation import (
    AblationError, AblationSource, OAConfig, _replicated_loss, align_right, load_source, mean_activations,
    mean_source, resolve, save_source, train_optimal_ablation,
)
from mechbench.data import make_pairs, prompt_batch, training_prompts
from mechbench.model import Interventions, run
from mechbench.tasks import generate

from conftest import small_model


def _batch(model, n=12, seed=0):
    return prompt_batch(model.vocab, [(i.prompt, i.answer) for i in generate("ioi", n, seed)])


def test_align_right_pads_and_crops():
    v = torch.arange(6, dtype=torch.float64).reshape(3, 2)
    assert align_right(v, 2).tolist() == [[2, 3], [4, 5]]
    assert align_right(v, 4).tolist() == [[0, 0], [0, 1], [2, 3], [4, 5]]


def test_mean_ignores_padding_and_aligns_from_the_end():
    model = small_model("ioi")
    batch = _batch(model)
    got = mean_activations(model, batch.tokens, batch.mask, chunk=5)
    # oracle: run each prompt alone, without padding, and average by distance from the end
    T = batch.tokens.shape[1]
    total = torch.zeros_like(got)
    count = torch.zeros(T, dtype=torch.float64)
    for toks, m in zip(batch.tokens, batch.mask):
        real = toks[m][None]
        _, cache = run(model, real, torch.ones_like(real, dtype=torch.bool))
        n = real.shape[1]
        total[T - n:] += cache.outputs[0]
        count[T - n:] += 1
    torch.testing.assert_close(got, total / count.clamp(min=1)[:, None, None], atol=1e-10, rtol=0)
    with pytest.raises(AblationError):
        mean_activations(model, batch.tokens[:0], batch.mask[:0])


def test_sources_provide_the_right_values():
    model = small_model("ioi")
    pairs = make_pairs(model.vocab, generate("ioi", 6, 0), "abc")
    cf = AblationSource("counterfactual").provide(model, pairs)
    _, cache = run(model, pairs.corrupt, pairs.corrupt_mask)
    torch.testing.assert_close(cf, cache.outputs)
    src = mean_source(model, _batch(model))
    B, T = pairs.clean.shape
    out = src.provide(model, pairs)
    assert out.shape == (B, T) + tuple(src.values.shape[1:])
    torch.testing.assert_close(out[0], align_right(src.values, T))
    with pytest.raises(AblationError):
        AblationSource("counterfactual").for_prompts(2, 3)
    with pytest.raises(AblationError):
        AblationSource("zero")
    with pytest.raises(AblationError):
        AblationSource("mean")


def test_replicated_loss_matches_one_node_at_a_time():
    model = small_model("ioi")
    batch = _batch(model, 5)
    vectors = torch.randn(batch.tokens.shape[1], model.graph.n_sources, model.config.d_model, dtype=torch.float64)
    got = _replicated_loss(model, vectors, batch, per_node=True)
    for u in range(model.graph.n_sources):
        iv = Interventions(node_hooks={u: lambda out, u=u: vectors[None, :, u].expand_as(out)})
        logits, _ = run(model, batch.tokens, batch.mask, iv)
        assert got[u].item() == pytest.approx(F.cross_entropy(logits[:, -1], batch.answers).item(), abs=1e-10)


def test_optimal_ablation_never_worsens_validation_loss():
    model = small_model("ioi")
    insts = generate("ioi", 40, 0)
    train = prompt_batch(model.vocab, training_prompts(insts[:30], with_counterfactuals=False))
    val = prompt_batch(model.vocab, training_prompts(insts[30:], with_counterfactuals=False))
    src = train_optimal_ablation(model, train, val, OAConfig(lr=1e-2, max_steps=40, eval_every=10, patience=20))
    assert src.kind == "optimal"
    assert all(b <= i + 1e-12 for b, i in zip(src.info["best_val_loss"], src.info["initial_val_loss"]))
    assert any(b < i for b, i in zip(src.info["best_val_loss"], src.info["initial_val_loss"]))
    with pytest.raises(AblationError):
        train_optimal_ablation(model, train.subset([]), val)


def test_resolve_and_persistence(tmp_path):
    model = small_model("ioi")
    src = mean_source(model, _batch(model))
    assert resolve("counterfactual").kind == "counterfactual"
    assert resolve("mean", {"mean": src}) is src
    with pytest.raises(AblationError):
        resolve("optimal", {"mean": src})
    path = save_source(src, tmp_path / "mean.npz", model.param_hash(), "d0")
    again = load_source(path, model.param_hash())
    assert again.kind == "mean" and torch.equal(again.values, src.values)
    with pytest.raises(AblationError):
        load_source(path, "someone-else")
    with pytest.raises(AblationError):
        save_source(AblationSource("counterfactual"), tmp_path / "cf.npz", "m", "d")

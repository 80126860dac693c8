import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from mechbench.autodiff import evaluate
from mechbench.graph import EMBED, LOGITS, EdgeId, Graph, Head, Mlp, NodeId, edge_count
from mechbench.model import (
    ConfigError, Interventions, ModelConfig, UnknownEdgeError, build_tape, forward, forward_patched, init_model,
    list_edges, load_model, logit_diff_metric, run, save_model, tape_inputs,
)

from conftest import small_model


def reference_logits(model, ids):
    """Plain per-prompt transformer forward, written without the edge decomposition."""
    cfg, p = model.config, model.params
    T = len(ids)
    x = p["W_E"][ids] + p["W_pos"][:T]

    def ln(h, pre):
        if cfg.norm == "none":
            return h
        return F.layer_norm(h, (cfg.d_model,), p[pre + ".w"], p[pre + ".b"], eps=1e-5)

    causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        h = ln(x, pre + "ln1")
        attn = torch.zeros_like(x)
        for i in range(cfg.n_heads):
            q = h @ p[pre + "W_Q"][i] + p[pre + "b_Q"][i]
            k = h @ p[pre + "W_K"][i] + p[pre + "b_K"][i]
            v = h @ p[pre + "W_V"][i] + p[pre + "b_V"][i]
            s = (q @ k.T / math.sqrt(cfg.d_head)).masked_fill(~causal, float("-inf"))
            attn = attn + torch.softmax(s, -1) @ v @ p[pre + "W_O"][i]
        x = x + attn
        h = F.gelu(ln(x, pre + "ln2") @ p[pre + "W_in"] + p[pre + "b_in"], approximate="tanh")
        x = x + h @ p[pre + "W_out"] + p[pre + "b_out"]
    return ln(x, "ln_f") @ p["W_U"]


def hand_edges(L, H):
    """Enumerate edges directly from the wiring rules."""
    writers = [("embed",)]
    edges = []
    for layer in range(L):
        for h in range(H):
            edges += [(w, ("head", layer, h), s) for s in "qkv" for w in writers]
        writers = writers + [("head", layer, h) for h in range(H)]
        edges += [(w, ("mlp", layer), "in") for w in writers]
        writers = writers + [("mlp", layer)]
    edges += [(w, ("logits",), "in") for w in writers]
    return edges


@pytest.mark.parametrize("L,H", list(itertools.product([1, 2], [1, 2, 4])))
def test_edge_count_matches_hand_enumeration(L, H):
    g = Graph(L, H)
    assert g.n_edges == len(hand_edges(L, H)) == edge_count(L, H)


def test_desk_config_has_110_edges_and_12_nodes(tiny_ioi):
    edges = list_edges(tiny_ioi)
    assert len(edges) == 110
    assert tiny_ioi.graph.n_nodes == 12
    assert len(set(edges)) == len(edges)
    idx = tiny_ioi.graph.node_index
    assert all(idx[e.source] < idx[e.target] for e in edges)
    assert list_edges(Graph(2, 4)) == edges  # deterministic order


def test_node_and_edge_ids_roundtrip():
    for node in (EMBED, LOGITS, Head(1, 3), Mlp(0)):
        assert NodeId.parse(str(node)) == node
    e = EdgeId(Head(0, 1), Mlp(0), "in")
    assert EdgeId.parse(str(e)) == e
    with pytest.raises(ValueError):
        NodeId.parse("x9")


def test_forward_matches_reference(tiny_ioi, ioi_instances):
    vocab = tiny_ioi.vocab
    for inst in ioi_instances[:4]:
        ids = vocab.encode(inst.prompt)
        logits, _ = forward(tiny_ioi, ids)
        torch.testing.assert_close(logits[0], reference_logits(tiny_ioi, ids), atol=1e-10, rtol=0)


def test_residual_decomposition(tiny_ioi, ioi_instances):
    ids = tiny_ioi.vocab.encode(ioi_instances[0].prompt)
    _, cache = forward(tiny_ioi, ids)
    g = tiny_ioi.graph
    for si, slot in enumerate(g.slots):
        total = sum(cache.edge_contribution(g.edges[e]) for e in slot.edges)
        assert (total - cache.slot_inputs[si]).abs().max() < 1e-8
    # everything written reaches the logits slot
    assert (cache.outputs.sum(dim=2) - cache.slot(LOGITS)).abs().max() < 1e-8
    assert cache.outputs.shape[2] == g.n_sources


def test_padding_and_batch_order_do_not_change_results(tiny_ioi, ioi_instances):
    vocab = tiny_ioi.vocab
    seqs = [vocab.encode(i.prompt) for i in ioi_instances[:5]]
    batched, _ = run(tiny_ioi, seqs)
    perm = [3, 0, 4, 1, 2]
    shuffled, _ = run(tiny_ioi, [seqs[i] for i in perm])
    torch.testing.assert_close(shuffled[:, -1], batched[perm, -1], atol=1e-12, rtol=0)
    for b, s in enumerate(seqs):
        alone, _ = run(tiny_ioi, s)
        torch.testing.assert_close(batched[b, -1], alone[0, -1], atol=1e-10, rtol=0)


def test_out_of_vocab_and_too_long_inputs_raise(tiny_ioi):
    with pytest.raises(ValueError):
        forward(tiny_ioi, [tiny_ioi.config.vocab_size])
    with pytest.raises(ValueError):
        forward(tiny_ioi, [1] * (tiny_ioi.config.max_seq_len + 1))


def test_empty_patch_and_self_patch_are_identities(tiny_ioi, ioi_instances):
    ids = tiny_ioi.vocab.encode(ioi_instances[0].prompt)
    logits, cache = forward(tiny_ioi, ids)
    assert torch.equal(forward_patched(tiny_ioi, ids, {}), logits)
    patch = {e: cache.edge_contribution(e) for e in list_edges(tiny_ioi)}
    assert (forward_patched(tiny_ioi, ids, patch) - logits).abs().max() < 1e-8


def test_patching_every_edge_from_counterfactual_gives_counterfactual_run(tiny_ioi, ioi_instances):
    vocab = tiny_ioi.vocab
    inst = ioi_instances[1]
    base, cf = vocab.encode(inst.prompt), vocab.encode(inst.cf("abc").prompt)
    assert len(base) == len(cf)
    cf_logits, cf_cache = forward(tiny_ioi, cf)
    patch = {e: cf_cache.edge_contribution(e) for e in list_edges(tiny_ioi)}
    assert (forward_patched(tiny_ioi, base, patch) - cf_logits).abs().max() < 1e-8


def test_node_patch_equals_patching_all_outgoing_edges(tiny_ioi, ioi_instances):
    vocab = tiny_ioi.vocab
    inst = ioi_instances[2]
    base, cf = vocab.encode(inst.prompt), vocab.encode(inst.cf("abc").prompt)
    _, cf_cache = forward(tiny_ioi, cf)
    for node in (EMBED, Head(0, 2), Mlp(0), Head(1, 1)):
        value = cf_cache.node(node)
        by_node = forward_patched(tiny_ioi, base, {(node, None): value})
        by_edges = forward_patched(tiny_ioi, base, {e: value for e in list_edges(tiny_ioi) if e.source == node})
        full_neurons = forward_patched(tiny_ioi, base, {(node, range(tiny_ioi.config.d_model)): value})
        assert (by_node - by_edges).abs().max() < 1e-10
        assert (by_node - full_neurons).abs().max() < 1e-12


def test_single_edge_patch_only_changes_its_target(tiny_ioi, ioi_instances):
    ids = tiny_ioi.vocab.encode(ioi_instances[0].prompt)
    _, cache = forward(tiny_ioi, ids)
    edge = EdgeId(Head(0, 0), Head(1, 2), "v")
    value = torch.randn_like(cache.edge_contribution(edge))
    g = tiny_ioi.graph
    _, patched = run(tiny_ioi, ids, iv=Interventions(slot_patches={
        g.slot_index[(edge.target, edge.slot)]: [(g.node_index[edge.source], value)]}))
    # upstream of the target is untouched, and so are the target's other slots
    torch.testing.assert_close(patched.outputs[:, :, :6], cache.outputs[:, :, :6], atol=1e-12, rtol=0)
    torch.testing.assert_close(patched.slot(Head(1, 2), "q"), cache.slot(Head(1, 2), "q"), atol=1e-12, rtol=0)
    delta = patched.slot(Head(1, 2), "v") - cache.slot(Head(1, 2), "v")
    torch.testing.assert_close(delta, value - cache.edge_contribution(edge), atol=1e-12, rtol=0)


def test_patch_errors(tiny_ioi):
    with pytest.raises(UnknownEdgeError):
        forward_patched(tiny_ioi, [1, 2], {EdgeId(Head(1, 0), Head(0, 0), "q"): torch.zeros(16)})
    with pytest.raises(UnknownEdgeError):
        forward_patched(tiny_ioi, [1, 2], {(LOGITS, None): torch.zeros(16)})
    with pytest.raises(ValueError):
        forward_patched(tiny_ioi, [1, 2], {(Mlp(0), (16,)): torch.zeros(16)})


def test_alpha_interpolation_endpoints(tiny_ioi, ioi_instances):
    vocab = tiny_ioi.vocab
    inst = ioi_instances[3]
    base, cf = vocab.encode(inst.prompt), vocab.encode(inst.cf("abc").prompt)
    clean, _ = forward(tiny_ioi, base)
    cf_logits, cf_cache = forward(tiny_ioi, cf)
    E = tiny_ioi.graph.n_edges
    keep, _ = run(tiny_ioi, base, iv=Interventions(alpha=torch.ones(E), ablated=cf_cache.outputs))
    drop, _ = run(tiny_ioi, base, iv=Interventions(alpha=torch.zeros(E), ablated=cf_cache.outputs))
    assert (keep - clean).abs().max() < 1e-10
    assert (drop - cf_logits).abs().max() < 1e-10


def test_logit_diff_metric():
    logits = torch.zeros(3, 5)
    logits[-1, 1], logits[-1, 3] = 4.0, 1.0
    assert logit_diff_metric(logits, 1, 3).item() == 3.0
    assert logit_diff_metric(logits, 2, 2).item() == 0.0
    batch = torch.randn(4, 3, 5, dtype=torch.float64)
    a, b = torch.tensor([0, 1, 2, 3]), torch.tensor([4, 3, 2, 1])
    torch.testing.assert_close(logit_diff_metric(batch, a, b), -logit_diff_metric(batch, b, a))


@given(st.integers(0, 2**31 - 1))
def test_tape_forward_matches_torch_forward(seed):
    model = small_model("ioi", seed=seed, n_layers=1, n_heads=2, d_model=8, d_head=4, d_mlp=8)
    rng = np.random.default_rng(seed)
    ids = rng.integers(1, model.config.vocab_size, size=6).tolist()
    tape = build_tape(model, ids, ids[0], ids[1])
    trace = evaluate(tape, tape_inputs(model))
    logits, _ = forward(model, ids)
    np.testing.assert_allclose(trace["logits"].numpy(), logits[0].numpy(), atol=1e-10)
    assert trace["metric"].item() == pytest.approx(logit_diff_metric(logits, ids[0], ids[1]).item(), abs=1e-10)


def test_checkpoint_roundtrip(tmp_path, tiny_ioi):
    path = save_model(tiny_ioi, tmp_path / "m.npz")
    again = load_model(path)
    assert again.config == tiny_ioi.config and again.vocab == tiny_ioi.vocab
    assert again.param_hash() == tiny_ioi.param_hash()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=64, n_heads=4, d_head=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(act="tanh").validate()
    model = init_model(ModelConfig(vocab_size=10, max_seq_len=8, d_model=8, d_head=2, d_mlp=8))
    params = dict(model.params)
    params["W_U"] = torch.full_like(params["W_U"], float("nan"))
    with pytest.raises(ConfigError):
        model.with_params(params)
    del params["W_U"]
    with pytest.raises(ConfigError):
        type(model)(model.config, params)

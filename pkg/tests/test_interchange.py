import pytest
import torch

from mechbench.causal import H_MCQA, H_PLUS
from mechbench.featurize import make_identity, orthonormalize, pca_fit, rotation_from_directions, sae_train, SAEConfig
from mechbench.interchange import (
    DASConfig, DBMConfig, FeatureMixer, InterchangeError, Site, SweepTable, binarize, build_set, capture,
    concat_sets, das_train, dbm_train, full_vector, iia, interchange_run, run_with_site, select_position,
    temperature,
)
from mechbench.model import forward_patched, run
from mechbench.synthetic import PLANTED_CAUSAL, planted_model
from mechbench.tasks import generate
from mechbench.tasks.vocab import tokenize

from conftest import small_model


@pytest.fixture(scope="module")
def planted():
    return planted_model(d=8, seed=0)


def test_selectors_find_the_named_tokens():
    for inst in generate("mcqa", 10, 0):
        toks = tokenize(inst.prompt)
        assert toks[select_position("answer_letter", inst)].strip() == inst.answer
        assert select_position("last", inst) == len(toks) - 1
    for inst in generate("arithmetic", 10, 0, op="+"):
        toks = tokenize(inst.prompt)
        assert toks[select_position("second_operand", inst)].strip() == str(inst.metadata["operand2"])
    for inst in generate("ioi", 10, 0):
        toks = tokenize(inst.prompt)
        assert toks[select_position("final_name", inst)].strip() == inst.metadata["name_C"]
    with pytest.raises(InterchangeError):
        select_position("first_verb", inst)
    with pytest.raises(InterchangeError):
        select_position("second_operand", inst)


def _mcqa_set(model, n=6, cf="answer_position", variables=("X_Order",), selector="last"):
    return build_set(model, generate("mcqa", n, 0), cf, H_MCQA, variables, selector, filter_correct=False)


def _featurizers(w, seed=0):
    acts = torch.randn(200, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    q = orthonormalize(torch.randn(w, 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64))
    return [make_identity(w), rotation_from_directions(q), pca_fit(acts),
            sae_train(acts, hyper=SAEConfig(steps=20))]


@pytest.mark.parametrize("site", [Site(0), Site(1), Site(2), Site(heads=((1, 0), (1, 3))), Site(heads=((0, 1), (1, 2)))])
def test_self_interchange_is_an_identity(site):
    model = small_model("mcqa")
    s = _mcqa_set(model)
    clean, _ = run(model, s.base, s.base_mask)
    h = capture(model, s.base, s.base_mask, s.base_pos, site)
    for feat in _featurizers(site.width(model)):
        if len({l for l, _ in site.heads}) > 1 and feat.kind != "identity":
            continue
        mask = (torch.arange(feat.k) % 2).to(torch.float64)
        out = run_with_site(model, s.base, s.base_mask, s.base_pos, site, h, FeatureMixer(feat, mask))
        torch.testing.assert_close(out, clean, atol=1e-10, rtol=0, msg=feat.kind)


def test_full_residual_interchange_equals_edge_patching():
    model = small_model("mcqa")
    s = _mcqa_set(model, selector="answer_letter")
    g = model.graph
    H = model.config.n_heads
    for layer in range(model.config.n_layers + 1):
        site = Site(layer)
        got = run_with_site(model, s.base, s.base_mask, s.base_pos, site,
                            capture(model, s.cf, s.cf_mask, s.cf_pos, site),
                            full_vector(model, "X", site, "answer_letter").mixer())
        # oracle: patch every edge that crosses the boundary, at the selected position only
        _, base = run(model, s.base, s.base_mask)
        _, cf = run(model, s.cf, s.cf_mask)
        rows = torch.arange(len(s))
        n = 1 + layer * (H + 1)
        patch = {}
        for e in g.edges:
            u, v = g.node_index[e.source], g.node_index[e.target]
            if u < n <= v:
                value = base.outputs[:, :, u].clone()
                value[rows, s.base_pos] = cf.outputs[rows, s.cf_pos, u]
                patch[e] = value
        want = forward_patched(model, s.base, patch, s.base_mask)
        torch.testing.assert_close(got, want, atol=1e-8, rtol=0)


def test_full_head_interchange_equals_node_patching():
    model = small_model("mcqa")
    s = _mcqa_set(model)
    site = Site(heads=((0, 2), (1, 1)))
    got = run_with_site(model, s.base, s.base_mask, s.base_pos, site,
                        capture(model, s.cf, s.cf_mask, s.cf_pos, site), full_vector(model, "X", site, "last").mixer())
    _, base = run(model, s.base, s.base_mask)
    _, cf = run(model, s.cf, s.cf_mask)
    rows = torch.arange(len(s))
    patch = {}
    for node in (model.graph.nodes[1 + 2], model.graph.nodes[1 + 5 + 1]):
        u = model.graph.node_index[node]
        value = base.outputs[:, :, u].clone()
        value[rows, s.base_pos] = cf.outputs[rows, s.cf_pos, u]
        patch[(node, None)] = value
    torch.testing.assert_close(got, forward_patched(model, s.base, patch, s.base_mask), atol=1e-8, rtol=0)


def test_build_set_expectations_and_filtering():
    model = small_model("arithmetic")
    insts = generate("arithmetic", 8, 0, op="+")
    s = build_set(model, insts, "ones_carry", H_PLUS, ("X_Carry",), "last", filter_correct=False)
    for i, inst in enumerate(insts):
        want = H_PLUS.interchange(inst, inst.cf("ones_carry"), ["X_Carry"])
        assert s.expected[i] == model.vocab.answer_id(str(want))
    kept = build_set(model, insts, "ones_carry", H_PLUS, ("X_Carry",), "last")
    assert len(kept) + kept.dropped == len(insts)
    both = concat_sets([s, _set_with_other_length(model)])
    assert len(both) == len(s) + 3


def _set_with_other_length(model):
    return build_set(model, generate("arithmetic", 3, 5, op="+"), "random_operands", H_PLUS, ("X_Carry",),
                     "second_operand", filter_correct=False)


def test_full_vector_at_the_output_layer_swaps_the_answer(planted):
    m = planted.model
    s = build_set(m, planted.instances, "pair", PLANTED_CAUSAL, ("O",), "last")
    assert len(s) == len(planted.instances)  # the planted model is always right
    assert iia(m, s, full_vector(m, "O", Site(1), "last")) == 1.0
    assert iia(m, s, full_vector(m, "O", Site(0), "last")) == 1.0


def test_das_recovers_the_planted_direction(planted):
    m = planted.model
    s = build_set(m, planted.instances, "pair", PLANTED_CAUSAL, ("A",), "last")
    align = das_train(m, s, "A", Site(0), "last", DASConfig(dim=1, lr=0.05, epochs=40, batch_size=16))
    learned = align.featurizer.basis[:, 0]
    assert abs(float(learned @ planted.direction)) > 0.99
    assert iia(m, s, align) == 1.0


def test_dbm_selects_the_planted_coordinate():
    p = planted_model(d=8, direction=3, seed=1)
    s = build_set(p.model, p.instances, "pair", PLANTED_CAUSAL, ("A",), "last")
    align = dbm_train(p.model, s, "A", Site(0), "last", make_identity(8),
                      DBMConfig(lr=0.05, epochs=40, batch_size=16))
    assert align.features == [3]
    assert iia(p.model, s, align) == 1.0


def test_interchange_run_returns_tokens(planted):
    m = planted.model
    s = build_set(m, planted.instances[:5], "pair", PLANTED_CAUSAL, ("O",), "last")
    pred = interchange_run(m, s, full_vector(m, "O", Site(1), "last"))
    assert pred.tolist() == s.cf_answer.tolist()


def test_annealing_and_binarization():
    assert temperature(0, 10, 1.0, 0.01) == pytest.approx(1.0)
    assert temperature(9, 10, 1.0, 0.01) == pytest.approx(0.01)
    assert temperature(0, 1, 1.0, 0.01) == 0.01
    assert binarize(torch.tensor([-0.1, 0.0, 0.2])).tolist() == [0.0, 0.0, 1.0]


def test_sweep_table_summaries():
    t = SweepTable({0: {"last": 0.2, "x": 0.6}, 1: {"last": 0.9, "x": 0.1}})
    assert t.per_layer() == {0: 0.6, 1: 0.9}
    assert t.mean == pytest.approx(0.75) and t.best == 0.9
    mse = SweepTable({0: {"last": 0.2, "x": 0.6}, 1: {"last": 0.9, "x": 0.1}}, higher_is_better=False)
    assert mse.per_layer() == {0: 0.2, 1: 0.1} and mse.best == 0.1


def test_site_validation_and_training_errors(planted):
    m = planted.model
    with pytest.raises(InterchangeError):
        Site(5).validate(m)
    with pytest.raises(InterchangeError):
        Site(heads=((0, 3),)).validate(m)
    s = build_set(m, planted.instances, "pair", PLANTED_CAUSAL, ("A",), "last")
    with pytest.raises(InterchangeError):
        das_train(m, s, "A", Site(0), "last", DASConfig(dim=9))
    with pytest.raises(InterchangeError):
        dbm_train(m, s, "A", Site(0), "last", make_identity(4))
    with pytest.raises(InterchangeError):
        iia(m, s.subset([]), full_vector(m, "A", Site(0), "last"))

"""End-to-end acceptance checks, one test group per criterion.

A pass/fail line per criterion is printed in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest
import torch

from mechbench.ablation import AblationSource, OAConfig, mean_source, train_optimal_ablation
from mechbench.autodiff import backward, evaluate, finite_difference
from mechbench.causal import H_MCQA, IOICoeffs, fit_ioi_coeffs, h_ioi_run, h_plus_run, H_PLUS
from mechbench.circuits import (
    K_GRID, Circuit, FaithfulnessCurve, FaithfulnessEvaluator, auroc, cpr_cmd, make_groundtruth, select_kept_nodes,
)
from mechbench.data import make_pairs, prompt_batch, training_prompts
from mechbench.featurize import make_identity, pca_fit, sae_train
from mechbench.interchange import (
    DASConfig, DBMConfig, FeatureMixer, Site, build_set, capture, das_train, dbm_train, full_vector, iia,
    run_with_site,
)
from mechbench.model import build_tape, forward_patched, logit_diff_metric, run, tape_inputs
from mechbench.pipeline import dump_record, recipe_config, task_kwargs
from mechbench.pipeline import run as run_pipeline
from mechbench.scoring import eap, eap_ig, exact_edge_patching, ifr_scores, random_scores, ugs_sample_alpha
from mechbench.synthetic import PLANTED_CAUSAL, linear_model, planted_model
from mechbench.tasks import CIRCUIT_COUNTERFACTUAL, TASKS, generate, task_vocab

from conftest import small_model, trained_model

CF = AblationSource("counterfactual")


def criterion(n, name):
    return pytest.mark.criterion(n, name)


# ----------------------------------------------------------------------------
# 1

GRAD_FLOOR = 1e-8  # below this both values are FD roundoff; compared absolutely instead


@criterion(1, "backward matches central finite differences (rel err < 1e-4, 20 parameter points, < 1 min)")
def test_gradients_match_finite_differences(record_property):
    start = time.perf_counter()
    worst, worst_abs = 0.0, 0.0
    for seed in range(20):
        model = small_model("ioi", seed=seed)
        inst = generate("ioi", 1, seed)[0]
        v = model.vocab
        tape = build_tape(model, v.encode(inst.prompt), v.answer_id(inst.answer), v.answer_id(inst.metadata["subject"]))
        inputs = tape_inputs(model)
        grads = backward(evaluate(tape, inputs), "metric")
        rng = np.random.default_rng(seed)
        for name in sorted(inputs):
            g = grads[name].numpy().reshape(-1)
            nonzero = np.flatnonzero(g)
            # one uniform coordinate plus one the metric actually depends on
            idx = [int(rng.integers(g.size))] + ([int(rng.choice(nonzero))] if len(nonzero) else [])

            def metric(x, name=name):
                return evaluate(tape, {**inputs, name: x})["metric"].item()

            fd = finite_difference(metric, inputs[name], step=1e-5, indices=idx).numpy().reshape(-1)
            for i in idx:
                err, scale = abs(g[i] - fd[i]), max(abs(g[i]), abs(fd[i]))
                if scale > GRAD_FLOOR:
                    worst = max(worst, err / scale)
                else:
                    worst_abs = max(worst_abs, err)
    elapsed = time.perf_counter() - start
    record_property("measured", f"max rel err {worst:.2e}, max abs err at near-zero gradients {worst_abs:.1e}, "
                                f"{elapsed:.0f}s")
    assert worst < 1e-4
    assert worst_abs < GRAD_FLOOR
    assert elapsed < 60


# ----------------------------------------------------------------------------
# 2

def _sources(task, model):
    kw = task_kwargs(task)
    train = prompt_batch(model.vocab, training_prompts(generate(task, 60, 0, "train", **kw), with_counterfactuals=False))
    val = prompt_batch(model.vocab, training_prompts(generate(task, 20, 0, "validation", **kw),
                                                     with_counterfactuals=False))
    return {"counterfactual": CF, "mean": mean_source(model, train),
            "optimal": train_optimal_ablation(model, train, val, OAConfig(max_steps=20, eval_every=10))}


@criterion(2, "f(full) = 1 and f(empty) = 0 within 1e-10 for every task and ablation (< 1 min)")
@pytest.mark.parametrize("task", TASKS)
def test_faithfulness_anchors(task, record_property):
    model = trained_model(task)
    start = time.perf_counter()
    kw = task_kwargs(task)
    pairs = make_pairs(model.vocab, generate(task, 40, 1, "test_public", **kw), CIRCUIT_COUNTERFACTUAL[task])
    g = model.graph
    worst = 0.0
    for name, source in _sources(task, model).items():
        ev = FaithfulnessEvaluator(model, pairs, source, drop_degenerate=True)
        worst = max(worst, abs(ev.faithfulness(Circuit.full(g)) - 1.0), abs(ev.faithfulness(Circuit.empty(g))))
        clean = logit_diff_metric(run(model, ev.pairs.clean, ev.pairs.clean_mask)[0], ev.pairs.answer,
                                  ev.pairs.cf_answer)
        torch.testing.assert_close(ev.metric_of(Circuit.full(g)), clean, atol=1e-10, rtol=0)
        if name == "counterfactual":
            corrupt = logit_diff_metric(run(model, ev.pairs.corrupt, ev.pairs.corrupt_mask)[0], ev.pairs.answer,
                                        ev.pairs.cf_answer)
            torch.testing.assert_close(ev.metric_of(Circuit.empty(g)), corrupt, atol=1e-10, rtol=0)
    elapsed = time.perf_counter() - start
    record_property("measured", f"{task}: max |f - anchor| {worst:.1e}, {elapsed:.0f}s")
    assert worst < 1e-10
    assert elapsed < 60


# ----------------------------------------------------------------------------
# 3

@criterion(3, "CPR + CMD = 1 within 1e-12 on 100 curves; constant f = 1 gives CPR 0.9995")
def test_cpr_cmd_identity(record_property):
    ks = [0.0] + list(K_GRID)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        fs = [0.0] + rng.uniform(0, 1, len(K_GRID)).tolist()
        worst = max(worst, abs(sum(cpr_cmd(FaithfulnessCurve(ks, fs))) - 1.0))
    cpr, _ = cpr_cmd(FaithfulnessCurve(ks, [0.0] + [1.0] * len(K_GRID)))
    record_property("measured", f"max |CPR + CMD - 1| {worst:.1e}, constant-1 CPR {cpr!r}")
    assert worst < 1e-12
    assert cpr == pytest.approx(0.9995, abs=1e-15)


# ----------------------------------------------------------------------------
# 4

@criterion(4, "EAP, EAP-IG (Z = 1, 5, 10, both modes) and exact patching agree within 1e-8 on a linear model")
@pytest.mark.parametrize("kind", ["counterfactual", "mean"])
def test_linear_model_oracle(kind, record_property):
    vocab = task_vocab("ioi")
    model = linear_model(len(vocab), seed=5, n_layers=2, n_heads=4, d_model=16, d_head=4, d_mlp=32)
    model.vocab = vocab
    pairs = make_pairs(vocab, generate("ioi", 12, 0), "abc")
    source = CF if kind == "counterfactual" else mean_source(
        model, prompt_batch(vocab, [(i.prompt, i.answer) for i in generate("ioi", 30, 1)]))
    exact = exact_edge_patching(model, pairs, source).values
    approx = [eap(model, pairs, source)] + [eap_ig(model, pairs, source, mode, z)
                                            for mode in ("inputs", "activations") for z in (1, 5, 10)]
    worst = max(float(np.abs(a.values - exact).max()) for a in approx)
    record_property("measured", f"{kind}: max per-edge gap {worst:.1e}")
    assert worst < 1e-8


# ----------------------------------------------------------------------------
# 5

@criterion(5, "exact patching AUROC = 1.0 on the pruned ground-truth model; random 0.5 +- 0.05 (< 5 min)")
def test_ground_truth_auroc(ioi_model, record_property):
    start = time.perf_counter()
    model = ioi_model
    held_out = prompt_batch(model.vocab, [(i.prompt, i.answer) for i in generate("ioi", 200, 1, "test_public")])
    pruned, truth = make_groundtruth(model, select_kept_nodes(model, held_out), held_out)
    pairs = make_pairs(model.vocab, generate("ioi", 50, 0, "validation"), "abc")
    train = prompt_batch(model.vocab, training_prompts(generate("ioi", 200, 0, "train"), with_counterfactuals=False))
    # mean ablation: under counterfactual ablation some kept edges carry the same value
    # on both prompts and tie at zero with the pruned ones
    mean_scores = exact_edge_patching(pruned, pairs, mean_source(pruned, train))
    cf_scores = exact_edge_patching(pruned, pairs, CF)
    exact_auc = auroc(mean_scores, truth)
    rand_auc = float(np.mean([auroc(random_scores(pruned, seed), truth) for seed in range(20)]))
    elapsed = time.perf_counter() - start
    record_property("measured", f"{int(truth.sum())} true edges, exact AUROC {exact_auc:.4f} (mean ablation), "
                                f"{auroc(cf_scores, truth):.4f} (CF), random {rand_auc:.3f}, {elapsed:.0f}s")
    assert np.all(mean_scores.values[~truth] == 0.0)
    assert exact_auc == 1.0
    assert abs(rand_auc - 0.5) <= 0.05
    assert elapsed < 300


# ----------------------------------------------------------------------------
# 6

def _circuit_cmd(seed, method, ablation):
    record, _ = run_pipeline(recipe_config("ioi", seed, method=method, ablation=ablation), write=False)
    return record["metrics"]["cmd"]


@criterion(6, "CMD(EAP-IG inputs, CF) <= CMD(EAP, mean) and CMD(EAP, CF) <= CMD(random) on >= 2 of 3 seeds")
def test_method_ordering_trend(record_property):
    start = time.perf_counter()
    held = []
    for seed in range(3):
        c = {name: _circuit_cmd(seed, m, a) for name, m, a in [
            ("ig_cf", "eap_ig_inputs", "counterfactual"), ("eap_mean", "eap", "mean"),
            ("eap_cf", "eap", "counterfactual"), ("random", "random", "counterfactual")]}
        ok = c["ig_cf"] <= c["eap_mean"] and c["eap_cf"] <= c["random"]
        held.append(ok)
        record_property("measured", f"seed {seed}: " + ", ".join(f"{k} {v:.3f}" for k, v in c.items())
                        + (" holds" if ok else " fails"))
    elapsed = time.perf_counter() - start
    record_property("measured", f"{elapsed:.0f}s")
    assert sum(held) >= 2
    assert elapsed < 1800


# ----------------------------------------------------------------------------
# 7

@criterion(7, "UGS draws match the sampling law within 0.01 over 1e5 draws at theta = 0.1, 0.5, 0.9")
@pytest.mark.parametrize("theta", [0.1, 0.5, 0.9])
def test_ugs_sampling_law(theta, record_property):
    alpha = ugs_sample_alpha(torch.full((100_000,), theta), 0)
    w = theta * (1 - theta)
    got = {"P(0)": float((alpha == 0).double().mean()), "P(1)": float((alpha == 1).double().mean()),
           "P(0<a<1)": float(((alpha > 0) & (alpha < 1)).double().mean())}
    want = {"P(0)": 1 - theta - w / 2, "P(1)": theta - w / 2, "P(0<a<1)": w}
    gap = max(abs(got[k] - want[k]) for k in want)
    record_property("measured", f"theta {theta}: max gap {gap:.4f}")
    assert gap < 0.01


# ----------------------------------------------------------------------------
# 8

@criterion(8, "IFR incoming scores sum to 1 (or are flagged 0) for every node on 100 random inputs")
def test_ifr_normalization(ioi_model, record_property):
    model = ioi_model
    gen = torch.Generator().manual_seed(0)
    T = 20
    tokens = torch.randint(1, model.config.vocab_size, (100, T), generator=gen)
    lengths = torch.randint(3, T + 1, (100,), generator=gen)
    mask = torch.arange(T)[None] >= (T - lengths)[:, None]
    tokens = torch.where(mask, tokens, torch.full_like(tokens, model.vocab.pad_id))
    g = model.graph
    worst, flagged = 0.0, 0
    for res in ifr_scores(model, tokens, mask, per_example=True):
        for si, slot in enumerate(g.slots):
            total = res.scores.values[list(slot.edges)].sum()
            if si in res.flagged_slots:
                flagged += 1
                assert total == 0.0
            else:
                worst = max(worst, abs(total - 1.0))
    record_property("measured", f"max |sum - 1| {worst:.1e}, {flagged} flagged slots")
    assert worst < 1e-12


# ----------------------------------------------------------------------------
# 9

@criterion(9, "causal models: exhaustive addition, 17+25 with carry 0 gives 32, four IOI predictions")
def test_causal_model_exactness(record_property):
    assert all(h_plus_run((x, y)) == x + y for x, y in itertools.product(range(10, 100), repeat=2))
    assert h_plus_run("17+25=", {"X_Carry": 0}) == 32
    assert H_PLUS.output_of((17, 25), {"X_Carry": 0}) == 32
    c = IOICoeffs(0.048, 2.005, 0.768)
    base = {"name_A": "Ann", "name_B": "Bob", "name_C": "Bob"}
    flipped_pos = ("Bob", "Ann")
    preds = {
        (+1, +1): h_ioi_run(base, {}, c),
        (+1, -1): h_ioi_run(base, {"S_Tok": "Ann"}, c),
        (-1, +1): h_ioi_run(base, {"S_Pos": flipped_pos}, c),
        (-1, -1): h_ioi_run(base, {"S_Tok": "Ann", "S_Pos": flipped_pos}, c),
    }
    for (pos, tok), got in preds.items():
        assert got == pytest.approx(0.048 + 2.005 * pos + 0.768 * tok, abs=1e-12)
    record_property("measured", "IOI predictions " + ", ".join(f"{v:.3f}" for v in preds.values()))


# ----------------------------------------------------------------------------
# 10

@criterion(10, "interchange identities: c = b is an identity, full identity interchange = patching, O_Answer IIA 1")
def test_interchange_identities(mcqa_model, record_property):
    model = mcqa_model
    insts = generate("mcqa", 40, 1, "test_public")
    s = build_set(model, insts, "answer_position", H_MCQA, ("X_Order",), "last", filter_correct=False)
    clean, _ = run(model, s.base, s.base_mask)
    worst_self = 0.0
    for layer in range(model.config.n_layers + 1):
        site = Site(layer)
        h = capture(model, s.base, s.base_mask, s.base_pos, site)
        acts = torch.cat([h, capture(model, s.cf, s.cf_mask, s.cf_pos, site)])
        das = das_train(model, s, "X_Order", site, "last", DASConfig(dim=4, epochs=2))
        for feat in (make_identity(h.shape[1]), pca_fit(acts), sae_train(acts), das.featurizer):
            mask = torch.ones(feat.k, dtype=torch.float64)
            out = run_with_site(model, s.base, s.base_mask, s.base_pos, site, h, FeatureMixer(feat, mask))
            worst_self = max(worst_self, float((out - clean).abs().max()))

    # full identity interchange at a residual boundary == patching every edge that crosses it
    g, H = model.graph, model.config.n_heads
    _, base = run(model, s.base, s.base_mask)
    _, cf = run(model, s.cf, s.cf_mask)
    rows = torch.arange(len(s))
    worst_patch = 0.0
    for layer in range(model.config.n_layers + 1):
        site = Site(layer)
        got = run_with_site(model, s.base, s.base_mask, s.base_pos, site, capture(model, s.cf, s.cf_mask, s.cf_pos, site),
                            full_vector(model, "X_Order", site, "last").mixer())
        n = 1 + layer * (H + 1)
        patch = {}
        for e in g.edges:
            u, v = g.node_index[e.source], g.node_index[e.target]
            if u < n <= v:
                value = base.outputs[:, :, u].clone()
                value[rows, s.base_pos] = cf.outputs[rows, s.cf_pos, u]
                patch[e] = value
        want = forward_patched(model, s.base, patch, s.base_mask)
        worst_patch = max(worst_patch, float((got - want).abs().max()))

    out_set = build_set(model, insts, "answer_position", H_MCQA, ("O_Answer",), "last")
    answer_iia = iia(model, out_set, full_vector(model, "O_Answer", Site(model.config.n_layers), "last"))
    record_property("measured", f"self-interchange gap {worst_self:.1e}, patching gap {worst_patch:.1e}, "
                                f"O_Answer IIA {answer_iia} on {len(out_set)} pairs")
    assert worst_self < 1e-8
    assert worst_patch < 1e-8
    assert answer_iia == 1.0


# ----------------------------------------------------------------------------
# 11

@criterion(11, "planted direction: DAS |cos| > 0.99 with IIA 1; DBM picks the planted coordinate (< 10 min)")
def test_planted_feature_recovery(record_property):
    start = time.perf_counter()
    p = planted_model(d=16, seed=2)
    s = build_set(p.model, p.instances, "pair", PLANTED_CAUSAL, ("A",), "last")
    das = das_train(p.model, s, "A", Site(0), "last", DASConfig(dim=1, lr=0.05, epochs=40, batch_size=16))
    cos = abs(float(das.featurizer.basis[:, 0] @ p.direction))
    das_iia = iia(p.model, s, das)
    q = planted_model(d=16, direction=11, seed=2)
    sq = build_set(q.model, q.instances, "pair", PLANTED_CAUSAL, ("A",), "last")
    dbm = dbm_train(q.model, sq, "A", Site(0), "last", make_identity(16), DBMConfig(lr=0.05, epochs=40, batch_size=16))
    elapsed = time.perf_counter() - start
    record_property("measured", f"DAS |cos| {cos:.5f}, IIA {das_iia}; DBM features {dbm.features}, {elapsed:.0f}s")
    assert cos > 0.99 and das_iia == 1.0
    assert dbm.features == [11]
    assert elapsed < 600


# ----------------------------------------------------------------------------
# 12

def _order_iia(seed, method):
    cfg = recipe_config("mcqa", seed, track="causal", method=method, causal={"variables": ["X_Order"]})
    record, _ = run_pipeline(cfg, write=False)
    return record["variables"]["X_Order"]["mean"]


@criterion(12, "mean X_Order IIA: DAS >= DBM(identity) >= full vector on >= 2 of 3 MCQA seeds")
def test_supervision_ordering_trend(record_property):
    held = []
    for seed in range(3):
        das, dbm, fv = (_order_iia(seed, m) for m in ("das", "dbm_identity", "full_vector"))
        ok = das >= dbm >= fv
        held.append(ok)
        record_property("measured", f"seed {seed}: DAS {das:.3f}, DBM {dbm:.3f}, full {fv:.3f}"
                        + (" holds" if ok else " fails"))
    assert sum(held) >= 2


# ----------------------------------------------------------------------------
# 13

@criterion(13, "IOI coefficient fit recovers planted values within 1e-10; 16-row head-subset MSE table")
def test_ioi_regression_oracle(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        a, b, c = rng.normal(size=3) * 3
        signals = rng.choice([-1.0, 1.0], size=(40, 2))
        signals[:4] = list(itertools.product((-1.0, 1.0), repeat=2))
        fit = fit_ioi_coeffs([(p, t, a + b * p + c * t) for p, t in signals])
        worst = max(worst, abs(fit.intercept - a), abs(fit.position - b), abs(fit.token - c))
    cfg = recipe_config("ioi", 0, track="causal", method="full_vector",
                        data={"n_fit": 60, "n_eval": 60}, causal={"layers": [2], "brute_force": True})
    record, _ = run_pipeline(cfg, write=False)
    table = record["head_subsets"]
    heads = {tuple(h) for h in record["coefficients"]["heads"]}
    subsets = {frozenset(map(tuple, row["heads"])) for row in table}
    record_property("measured", f"max coefficient error {worst:.1e}, {len(table)} subset rows")
    assert worst < 1e-10
    assert len(table) == 16 and len(heads) == 4
    assert subsets == {frozenset(c) for r in range(5) for c in itertools.combinations(heads, r)}
    assert all(np.isfinite(row[v]) for row in table for v in ("S_Pos", "S_Tok"))


# ----------------------------------------------------------------------------
# 14

@criterion(14, "identical configs give byte-identical result records")
@pytest.mark.parametrize("track, method, ablation", [("circuit", "eap_ig_inputs", "optimal"), ("circuit", "ugs", "mean"),
                                                     ("causal", "das", "counterfactual")])
def test_reruns_are_byte_identical(track, method, ablation, record_property):
    task = "ioi" if track == "circuit" else "mcqa"
    cfg = recipe_config(task, 0, track=track, method=method, ablation=ablation, data={"n_fit": 20, "n_eval": 20},
                        circuit={"oa_max_steps": 20, "ugs_steps": 20}, causal={"layers": [1], "epochs": 2})
    first, _ = run_pipeline(cfg, write=False)
    second, _ = run_pipeline(cfg, write=False)
    record_property("measured", f"{track}/{method}: {len(dump_record(first))} bytes")
    assert dump_record(first) == dump_record(second)

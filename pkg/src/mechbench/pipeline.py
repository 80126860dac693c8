"""End-to-end runs for both benchmark tracks.

A run produces a result record (deterministic, byte-identical for identical
configs) and a separate timing file, written to one directory per run.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch

from . import __version__
from .ablation import AblationSource, OAConfig, mean_source, train_optimal_ablation
from .causal import MODELS as CAUSAL_MODELS
from .causal import IOICoeffs, fit_ioi_coeffs
from .circuits import FaithfulnessEvaluator, auroc, cpr_cmd, faithfulness_curve, make_groundtruth, select_kept_nodes
from .config import RunConfig, emit, from_dict, to_dict
from .data import PairBatch, dataset_hash, make_pairs, prompt_batch, training_prompts
from .featurize import make_identity, pca_fit, sae_train
from .interchange import (
    InterchangeSet, Site, build_set, capture, concat_sets, das_train, dbm_train, full_vector, head_subset_table,
    observed_logit_diff, sweep_alignments, DASConfig, DBMConfig,
)
from .model import Model, ModelConfig, count_passes, init_model, load_model, save_model
from .scoring import (
    UGSConfig, eap, eap_ig, exact_edge_patching, ifr_scores, node_attribution, random_scores, ugs_train,
)
from .tasks import CIRCUIT_COUNTERFACTUAL, generate, task_vocab
from .training import TrainConfig, train_model

RECORD_FORMAT = 1
PACKAGE_DIR = Path(__file__).resolve().parent

# Causal-track defaults per task: variables, counterfactual datasets, token selectors.
CAUSAL_DEFAULTS = {
    "mcqa": (("X_Order", "O_Answer"), ("answer_position", "random_letter", "answer_position_random_letter"),
             ("last", "answer_letter")),
    "arithmetic": (("X_Carry",), ("ones_carry", "random_operands"), ("last", "second_operand")),
    "ioi": (("S_Pos", "S_Tok"), ("s1_io_flip", "s2_io_flip", "s1_io_flip_s2_io_flip"), ("last", "final_name")),
}
DAS_DIMS = {"X_Order": 16, "X_Carry": 16, "S_Tok": 32, "S_Pos": 32}  # O_Answer: half the width


# Desk-scale training recipes (ModelSpec overrides) used by the scripts and the test suite.
RECIPES = {
    "ioi": {"train_steps": 800},
    "mcqa": {"train_steps": 1500},
    "arithmetic": {"train_steps": 4000, "n_train": 6000},
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


def code_version() -> str:
    """Hash of the package sources, so records name the code that produced them."""
    h = hashlib.sha256(__version__.encode())
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(str(path.relative_to(PACKAGE_DIR)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class Stages:
    """Wall-clock time per stage; errors are re-raised tagged with the stage name."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start


def task_kwargs(task: str) -> dict:
    # The carry model covers addition only, so both tracks use addition prompts.
    return {"op": "+"} if task == "arithmetic" else {}


def cache_dir() -> Path:
    return Path(os.environ.get("MECHBENCH_CACHE", Path.home() / ".cache" / "mechbench"))


def _training_code_hash() -> str:
    h = hashlib.sha256()
    for rel in ("model.py", "training.py", "data.py", "graph.py"):
        h.update((PACKAGE_DIR / rel).read_bytes())
    for path in sorted((PACKAGE_DIR / "tasks").glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def prepare_model(task: str, cfg: RunConfig, cache: Path | None = None) -> Model:
    """Load the configured checkpoint, or train one (cached by its full recipe)."""
    spec = cfg.model
    if spec.checkpoint:
        return load_model(spec.checkpoint)
    recipe = {"task": task, "model": to_dict(spec), "seed": cfg.seed, "code": _training_code_hash()}
    key = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:16]
    cache = cache_dir() if cache is None else cache
    path = cache / f"{task}-{key}.npz"
    if path.exists():
        return load_model(path)
    model = train_task_model(task, cfg)
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".{os.getpid()}.tmp")
    save_model(model, tmp)
    os.replace(tmp, path)
    return model


def recipe_config(task: str, seed: int, **raw: Any) -> RunConfig:
    """RunConfig using the desk-scale recipe for ``task``; ``raw`` overrides top-level fields."""
    base = {"task": task, "seed": seed, "method": raw.pop("method", "random"), "model": dict(RECIPES[task])}
    base["model"].update(raw.pop("model", {}))
    base.update(raw)
    return from_dict(base)


def train_task_model(task: str, cfg: RunConfig) -> Model:
    spec = cfg.model
    vocab = task_vocab(task)
    instances = generate(task, spec.n_train, cfg.seed, "train", **task_kwargs(task))
    mcfg = ModelConfig(n_layers=spec.n_layers, n_heads=spec.n_heads, d_model=spec.d_model,
                       d_head=spec.d_model // spec.n_heads, d_mlp=spec.d_mlp, vocab_size=len(vocab),
                       max_seq_len=48, seed=cfg.seed)
    model = init_model(mcfg, vocab=vocab)
    hyper = TrainConfig(steps=spec.train_steps, lr=spec.train_lr, batch_size=spec.train_batch_size, seed=cfg.seed)
    trained, _ = train_model(model, prompt_batch(vocab, training_prompts(instances)), hyper)
    return trained


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, torch.Tensor):
        return _jsonable(x.tolist())
    return x


def dump_record(record: dict) -> str:
    return json.dumps(_jsonable(record), sort_keys=True, indent=1) + "\n"


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.track}-{cfg.task}-{cfg.method}-{cfg.ablation}-s{cfg.seed}"


def write_run(cfg: RunConfig, record: dict, timing: dict, extra_files: dict[str, str] | None = None) -> Path:
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(dump_record(record))
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=1) + "\n")
    (out / "config.yaml").write_text(emit(cfg))
    for name, text in (extra_files or {}).items():
        (out / name).write_text(text)
    return out


def curve_tsv(curve) -> str:
    lines = ["k\tfaithfulness\tweighted_edges"]
    sizes = curve.sizes if len(curve.sizes) == len(curve.ks) else [float("nan")] * len(curve.ks)
    lines += [f"{k!r}\t{f!r}\t{s!r}" for k, f, s in zip(curve.ks, curve.fs, sizes)]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# circuit track

def _ablation(cfg: RunConfig, model: Model) -> AblationSource:
    if cfg.ablation == "counterfactual":
        return AblationSource("counterfactual")
    vocab = model.vocab
    train = generate(cfg.task, cfg.data.n_mean, cfg.seed, "train", **task_kwargs(cfg.task))
    batch = prompt_batch(vocab, training_prompts(train, with_counterfactuals=False))
    if cfg.ablation == "mean":
        return mean_source(model, batch)
    val = generate(cfg.task, max(cfg.data.n_mean // 4, 20), cfg.seed, "validation", **task_kwargs(cfg.task))
    vbatch = prompt_batch(vocab, training_prompts(val, with_counterfactuals=False))
    return train_optimal_ablation(model, batch, vbatch, OAConfig(max_steps=cfg.circuit.oa_max_steps, seed=cfg.seed))


def _score(cfg: RunConfig, model: Model, pairs: PairBatch, ablation: AblationSource, seed: int):
    c, m = cfg.circuit, cfg.method
    if m == "random":
        return random_scores(model, seed)
    if m == "exact":
        return exact_edge_patching(model, pairs, ablation)
    if m == "eap":
        return eap(model, pairs, ablation)
    if m in ("eap_ig_inputs", "eap_ig_activations"):
        return eap_ig(model, pairs, ablation, mode=m.rsplit("_", 1)[1], steps=c.ig_steps)
    if m in ("nap", "nap_ig"):
        return node_attribution(model, pairs, ablation, ig=m == "nap_ig", steps=c.ig_steps)
    if m == "ifr":
        return ifr_scores(model, pairs.clean, pairs.clean_mask).scores
    if m == "ugs":
        return ugs_train(model, pairs, ablation, UGSConfig(lam=c.ugs_lambda, steps=c.ugs_steps, seed=seed))
    raise ValueError(f"unknown method {m!r}")


def run_circuit_track(cfg: RunConfig, write: bool = True) -> tuple[dict, dict]:
    torch.use_deterministic_algorithms(True)
    stages = Stages()
    with stages("model"):
        model = prepare_model(cfg.task, cfg)
        vocab = model.vocab
    with stages("data"):
        cf_name = cfg.circuit.counterfactual or CIRCUIT_COUNTERFACTUAL[cfg.task]
        kw = task_kwargs(cfg.task)
        fit_inst = generate(cfg.task, cfg.data.n_fit, cfg.seed, "validation", **kw)
        eval_inst = generate(cfg.task, cfg.data.n_eval, cfg.seed + 1, cfg.data.eval_split, **kw)
        fit_pairs = make_pairs(vocab, fit_inst, cf_name)
        eval_pairs = make_pairs(vocab, eval_inst, cf_name)
    truth = None
    kept_nodes: list = []
    if cfg.circuit.ground_truth:
        with stages("ground_truth"):
            batch = prompt_batch(vocab, [(i.prompt, i.answer) for i in eval_inst])
            kept_nodes = select_kept_nodes(model, batch)
            model, truth = make_groundtruth(model, kept_nodes, batch)
    with stages("ablation"):
        ablation = _ablation(cfg, model)
    seeds = [cfg.seed + i for i in range(cfg.circuit.random_seeds)] if cfg.method == "random" else [cfg.seed]
    runs = []
    with stages("evaluator"):
        evaluator = FaithfulnessEvaluator(model, eval_pairs, ablation, drop_degenerate=True)
    for seed in seeds:
        with stages("scores"), count_passes() as passes:
            scores = _score(cfg, model, fit_pairs, ablation, seed)
        with stages("faithfulness"):
            value = faithfulness_curve(evaluator, scores, cfg.k_grid, cfg.circuit.strategy, "value")
            magnitude = faithfulness_curve(evaluator, scores, cfg.k_grid, cfg.circuit.strategy, "magnitude")
            cpr, _ = cpr_cmd(value)
            _, cmd = cpr_cmd(magnitude)
        entry = {"seed": seed, "cpr": cpr, "cmd": cmd, "value": value, "magnitude": magnitude,
                 "passes": passes.per_example(len(fit_pairs))}
        if truth is not None:
            entry["auroc"] = auroc(scores, truth)
        runs.append(entry)

    metrics = {"cpr": float(np.mean([r["cpr"] for r in runs])), "cmd": float(np.mean([r["cmd"] for r in runs]))}
    if truth is not None:
        metrics["auroc"] = float(np.mean([r["auroc"] for r in runs]))
    first = runs[0]
    record = {
        "format": RECORD_FORMAT,
        "track": "circuit",
        "version": code_version(),
        "config": to_dict(cfg),
        "model_hash": model.param_hash(),
        "data": {"counterfactual": cf_name, "fit": dataset_hash(fit_inst), "eval": dataset_hash(eval_inst),
                 "eval_pairs": len(evaluator.pairs), "degenerate_pairs": len(evaluator.dropped)},
        "metrics": metrics,
        "per_seed": [{k: r[k] for k in ("seed", "cpr", "cmd", "auroc") if k in r} for r in runs],
        "curve": {
            "value": {"k": first["value"].ks, "f": first["value"].fs, "weighted_edges": first["value"].sizes},
            "magnitude": {"k": first["magnitude"].ks, "f": first["magnitude"].fs,
                          "weighted_edges": first["magnitude"].sizes},
            "dropped_k": first["value"].dropped,
        },
        "passes_per_example": {"forward": first["passes"][0], "backward": first["passes"][1]},
    }
    if truth is not None:
        record["ground_truth"] = {"kept_nodes": [str(n) for n in kept_nodes], "true_edges": int(truth.sum())}
    timing = {"stages": stages.seconds}
    if write:
        write_run(cfg, record, timing, {"curve_value.tsv": curve_tsv(first["value"]),
                                        "curve_magnitude.tsv": curve_tsv(first["magnitude"])})
    return record, timing


# ----------------------------------------------------------------------------
# causal track

def default_heads(model: Model) -> tuple[tuple[int, int], ...]:
    """The last block's heads, which carry the subject signal to the final position."""
    last = model.config.n_layers - 1
    return tuple((last, h) for h in range(model.config.n_heads))


def _fitter(cfg: RunConfig, model: Model, variable: str, coeffs: IOICoeffs, samples: Callable[[Site, str], torch.Tensor]):
    c = cfg.causal
    lr = c.lr if c.lr is not None else (1.0 if cfg.task == "ioi" else 0.01)
    d = model.config.d_model
    dim = c.das_dim or DAS_DIMS.get(variable, d // 2)
    method = cfg.method

    def fit(site: Site, selector: str, train: InterchangeSet):
        if method == "full_vector":
            return full_vector(model, variable, site, selector)
        if method == "das":
            return das_train(model, train, variable, site, selector,
                             DASConfig(dim=dim, lr=lr, epochs=c.epochs, seed=cfg.seed), coeffs)
        if method == "dbm_identity":
            feat = make_identity(site.width(model))
        elif method == "dbm_pca":
            feat = pca_fit(samples(site, selector))
        else:
            feat = sae_train(samples(site, selector))
        return dbm_train(model, train, variable, site, selector, feat,
                         DBMConfig(lr=lr, epochs=c.epochs, seed=cfg.seed), coeffs)

    return fit


def run_causal_track(cfg: RunConfig, write: bool = True) -> tuple[dict, dict]:
    torch.use_deterministic_algorithms(True)
    stages = Stages()
    with stages("model"):
        model = prepare_model(cfg.task, cfg)
    causal = CAUSAL_MODELS[cfg.task]
    dvars, dcfs, dsels = CAUSAL_DEFAULTS[cfg.task]
    c = cfg.causal
    variables = c.variables or dvars
    cfs = c.counterfactuals or dcfs
    selectors = c.selectors or dsels
    layers = c.layers if c.layers is not None else tuple(range(model.config.n_layers + 1))
    kw = task_kwargs(cfg.task)
    with stages("data"):
        fit_inst = generate(cfg.task, cfg.data.n_fit, cfg.seed, "train", **kw)
        eval_inst = generate(cfg.task, cfg.data.n_eval, cfg.seed + 1, cfg.data.eval_split, **kw)

    coeffs = IOICoeffs()
    extra: dict[str, Any] = {}
    if cfg.task == "ioi":
        heads = c.heads or default_heads(model)
        with stages("coefficients"):
            both = ("S_Tok", "S_Pos")
            fit_all = concat_sets([build_set(model, fit_inst, cf, causal, both, "last") for cf in cfs])
            observed = observed_logit_diff(model, fit_all, full_vector(model, "both", Site(heads=heads), "last"))
            rows = torch.cat([fit_all.signals, observed[:, None]], dim=1)
            coeffs = fit_ioi_coeffs(rows.tolist())
            extra["coefficients"] = {"intercept": coeffs.intercept, "position": coeffs.position,
                                     "token": coeffs.token, "heads": [list(h) for h in heads]}
        if c.brute_force:
            with stages("head_subsets"):
                sets = {v: concat_sets([build_set(model, eval_inst, cf, causal, (v,), "last") for cf in cfs])
                        for v in variables}
                extra["head_subsets"] = head_subset_table(model, sets, heads, "last", coeffs)

    results: dict[str, Any] = {}
    pair_counts: dict[str, Any] = {}
    for variable in variables:
        with stages("pairs"):
            data = {}
            for sel in selectors:
                train = concat_sets([build_set(model, fit_inst, cf, causal, (variable,), sel) for cf in cfs])
                evals = {cf: build_set(model, eval_inst, cf, causal, (variable,), sel) for cf in cfs}
                data[sel] = (train, evals)
            pair_counts[variable] = {sel: {"fit": len(tr), "fit_dropped": tr.dropped,
                                           "eval": {cf: len(s) for cf, s in sorted(ev.items())}}
                                     for sel, (tr, ev) in data.items()}

        def samples(site: Site, selector: str) -> torch.Tensor:
            train = data[selector][0]
            return torch.cat([capture(model, train.base, train.base_mask, train.base_pos, site),
                              capture(model, train.cf, train.cf_mask, train.cf_pos, site)])

        with stages("alignment"):
            table = sweep_alignments(model, variable, layers, selectors,
                                     _fitter(cfg, model, variable, coeffs, samples), data, coeffs)
        results[variable] = table.to_record()

    kind = "mse" if cfg.task == "ioi" else "iia"
    metrics = {
        f"{kind}_mean": float(np.mean([r["mean"] for r in results.values()])),
        f"{kind}_best": float(np.mean([r["best"] for r in results.values()])),
    }
    record = {
        "format": RECORD_FORMAT,
        "track": "causal",
        "version": code_version(),
        "config": to_dict(cfg),
        "model_hash": model.param_hash(),
        "data": {"fit": dataset_hash(fit_inst), "eval": dataset_hash(eval_inst), "pairs": pair_counts},
        "metrics": metrics,
        "variables": results,
        **extra,
    }
    timing = {"stages": stages.seconds}
    if write:
        write_run(cfg, record, timing)
    return record, timing


def run(cfg: RunConfig, write: bool = True) -> tuple[dict, dict]:
    return run_circuit_track(cfg, write) if cfg.track == "circuit" else run_causal_track(cfg, write)

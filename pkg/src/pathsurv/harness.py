"""Experiment orchestration: stratified CV, training, ablation, synthetic
cohorts, and interpretability reports.

Determinism contract: every random choice flows from a seeded generator,
fold jobs never share mutable state, and output files are ordered by
(cohort, fold, mode) so byte-identical reruns are possible. Wall times go
to a separate timings file, never into metrics records.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import MODES, RunConfig, SynthSpec
from .encoder import run_forward
from .errors import ConfigError, DataError, NoEventsError, NumericError
from .graphs import (
    HierarchicalBatch,
    TopologyLibrary,
    build_monolithic_graph,
    build_patient_package,
    collate_batch,
    load_library,
    load_pathway_catalogue,
)
from .omics import (
    AlignedCohort,
    PreprocessParams,
    align_cohort,
    apply_preprocessor,
    encode_clinical,
    fit_preprocessor,
    parse_clinical,
    parse_matrix,
    parse_survival,
)
from .params import ModelParams, init_params, load_checkpoint, save_checkpoint
from .survival import (
    SurvivalRecord,
    concordance_index,
    cox_loss,
    cox_nll_value,
    kaplan_meier,
    log_rank_test,
    stratify_risk,
    time_dependent_auc,
)

__all__ = [
    "stratified_kfold",
    "Adam",
    "train",
    "predict_theta",
    "evaluate_packages",
    "run_experiment",
    "run_ablation",
    "generate_synthetic_cohort",
    "export_attention_report",
    "load_cohort_dir",
    "prepare_patients",
]

logger = logging.getLogger(__name__)


def stratified_kfold(
    records: Sequence[SurvivalRecord], k: int, seed: int
) -> list:
    """Event-stratified k-fold splits over patient ids.

    Within each stratum (events, censored) patients are shuffled with the
    seed and dealt round-robin, so fold event rates stay within one patient
    of the cohort rate. A stratum smaller than k triggers the plain-shuffle
    fallback with a warning.
    """
    if k < 2:
        raise ConfigError("folds must be >= 2")
    if k > len(records):
        raise DataError(f"cannot make {k} folds from {len(records)} patients")
    rng = np.random.default_rng(seed)
    events = [r.patient_id for r in records if r.event == 1]
    censored = [r.patient_id for r in records if r.event == 0]
    fold_of = {}
    if min(len(events), len(censored)) >= k:
        for stratum in (events, censored):
            order = np.array(stratum)
            rng.shuffle(order)
            for i, pid in enumerate(order):
                fold_of[pid] = i % k
    else:
        logger.warning(
            "stratum smaller than k (%d events, %d censored); "
            "falling back to a plain shuffle", len(events), len(censored),
        )
        order = np.array([r.patient_id for r in records])
        rng.shuffle(order)
        for i, pid in enumerate(order):
            fold_of[pid] = i % k
    all_ids = [r.patient_id for r in records]
    splits = []
    for fold in range(k):
        test = [p for p in all_ids if fold_of[p] == fold]
        train = [p for p in all_ids if fold_of[p] != fold]
        splits.append((train, test))
    return splits


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, names: Sequence[str], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: ModelParams, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            params.arrays[name] -= (
                self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            )


def predict_theta(
    params: ModelParams,
    packages: Sequence,
    library: TopologyLibrary,
    mode: str,
    chunk: int = 64,
) -> np.ndarray:
    """Risk scores via chunked forward passes (bounds tape memory)."""
    out = []
    for start in range(0, len(packages), chunk):
        batch = collate_batch(packages[start : start + chunk], library)
        tape, _, result = run_forward(params, batch, mode)
        out.append(tape.value(result.theta).reshape(-1))
    return np.concatenate(out)


def train(
    config: RunConfig,
    packages: Sequence,
    library: TopologyLibrary,
    mode: Optional[str] = None,
    seed: Optional[int] = None,
):
    """Minibatch Cox training with Adam and best-epoch selection.

    Epoch 0 of the loss history is the untrained model (leakage tests pin
    it); epochs 1..N follow each optimization sweep. The returned params
    are from the epoch with the lowest full-training-set objective.
    """
    mode = mode or config.mode
    seed = config.seed if seed is None else seed
    records = [p.survival for p in packages]
    if not any(r.event for r in records):
        raise NoEventsError("training set has no events")
    n = len(packages)
    rng = np.random.default_rng(seed)
    params = init_params(
        seed,
        n_pathways=library.K,
        n_relations=len(library.relations),
        d_clinical=packages[0].clinical.shape[0],
        d_hidden=config.d_hidden,
        heads=config.heads,
        layers=config.layers,
        d_context=config.d_context,
        mlp_hidden=config.mlp_hidden,
    )
    optimizer = Adam(params.names(), learning_rate=config.learning_rate)

    def full_nll(p: ModelParams) -> float:
        theta = predict_theta(p, packages, library, mode, config.eval_chunk)
        return cox_nll_value(theta, records)

    # Epoch 0 is the untrained model on the full training set; the leakage
    # contract pins this value bit-exactly.
    nll0 = full_nll(params)
    history = {"train_nll": [nll0], "epoch_loss": []}
    best = params.copy()
    best_objective = math.inf
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if not any(records[i].event for i in idx):
                # Zero-event batch: the partial likelihood is undefined, so
                # resample a batch that contains at least one event.
                for _ in range(50):
                    idx = rng.choice(n, size=idx.size, replace=False)
                    if any(records[i].event for i in idx):
                        break
                else:
                    continue
            batch = collate_batch([packages[i] for i in idx], library)
            tape, nodes, result = run_forward(params, batch, mode)
            loss = cox_loss(
                tape,
                result.theta,
                batch.survival,
                lam=config.l2,
                regularized=[nodes[m] for m in params.regularized_names()],
            )
            loss_value = float(tape.value(loss)[0, 0])
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch starting {start} (mode {mode})"
                )
            tape.backward(loss)
            grads = {name: tape.grad(nodes[name]) for name in params.names()}
            optimizer.step(params, grads)
            batch_losses.append(loss_value / max(1, idx.size))
        # Selection criterion: mean per-patient minibatch objective for the
        # epoch (recomputing the full training loss every epoch would cost
        # another half epoch of forward passes).
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else math.inf
        history["epoch_loss"].append(epoch_loss)
        if epoch_loss < best_objective:
            best_objective = epoch_loss
            best = params.copy()
            best_epoch = epoch
    history["best_epoch"] = best_epoch
    history["train_nll"].append(full_nll(best))
    return best, history


def evaluate_packages(
    params: ModelParams,
    packages: Sequence,
    library: TopologyLibrary,
    config: RunConfig,
    cutpoints: Optional[np.ndarray] = None,
) -> dict:
    """Test-set metrics: C-index, time-dependent AUC at the horizon rule,
    and a KM log-rank split under training cutpoints when provided."""
    records = [p.survival for p in packages]
    theta = predict_theta(params, packages, library, config.mode,
                          config.eval_chunk)
    metrics = {}
    try:
        metrics["c_index"] = concordance_index(theta, records)
    except DataError:
        metrics["c_index"] = None
    try:
        metrics["td_auc"] = time_dependent_auc(
            theta, records, config.horizon_days()
        )
    except DataError:
        metrics["td_auc"] = None
    if cutpoints is not None:
        labels, _ = stratify_risk(theta, config.stratify, cutpoints)
        try:
            chi2, p = log_rank_test(records, labels)
            metrics["log_rank_chi2"], metrics["log_rank_p"] = chi2, p
        except DataError:
            metrics["log_rank_chi2"] = metrics["log_rank_p"] = None
    return metrics


@dataclass
class FoldResult:
    """One CV fold: membership, metrics, and training history."""

    fold: int
    train_ids: list
    test_ids: list
    metrics: dict
    history: dict
    wall_time: float


def load_cohort_dir(data_dir: str, config: RunConfig):
    """Parse and align one cohort directory; compile its library."""

    def path(name):
        return os.path.join(data_dir, name)

    def optional(name, modality):
        p = path(name)
        return parse_matrix(p, modality) if os.path.exists(p) else None

    expression = parse_matrix(path(config.expression_file), "expression")
    cnv = optional(config.cnv_file, "cnv")
    mutation = optional(config.mutation_file, "mutation")
    clinical = parse_clinical(path(config.clinical_file))
    survival = parse_survival(path(config.survival_file))
    library = load_pathway_catalogue(
        path(config.mapping_file),
        path(config.edges_file),
        add_reverse_edges=config.add_reverse_edges,
    )
    universe = sorted({g for p in library.pathways for g in p.genes})
    cohort = align_cohort(
        expression, cnv, mutation, clinical, survival, universe
    )
    return cohort, library


def prepare_patients(
    cohort: AlignedCohort,
    library: TopologyLibrary,
    preprocess: PreprocessParams,
    patient_ids: Sequence[str],
):
    """Apply frozen preprocessing and build one package per patient."""
    processed = apply_preprocessor(cohort, preprocess)
    clinical = encode_clinical(processed, preprocess)
    row = {p: i for i, p in enumerate(processed.patient_ids)}
    return [
        build_patient_package(processed, pid, library, clinical[row[pid]])
        for pid in patient_ids
    ]


def _fold_job(fold, train_ids, test_ids, cohort, library, config, mode, seed):
    started = time.monotonic()
    preprocess = fit_preprocessor(
        cohort, train_ids, log1p=config.expression_log1p,
        provenance=f"fold{fold}",
    )
    train_packages = prepare_patients(cohort, library, preprocess, train_ids)
    test_packages = prepare_patients(cohort, library, preprocess, test_ids)
    local = RunConfig(**{**config.to_dict(), "mode": mode})
    params, history = train(local, train_packages, library, mode, seed)
    train_theta = predict_theta(params, train_packages, library, mode,
                                config.eval_chunk)
    try:
        _, cutpoints = stratify_risk(train_theta, config.stratify)
    except DataError:
        cutpoints = None
    metrics = evaluate_packages(params, test_packages, library, local,
                                cutpoints)
    metrics["epoch0_nll"] = history["train_nll"][0]
    metrics["best_epoch"] = history["best_epoch"]
    metrics["final_train_nll"] = history["train_nll"][-1]
    return FoldResult(
        fold=fold,
        train_ids=train_ids,
        test_ids=test_ids,
        metrics=metrics,
        history=history,
        wall_time=time.monotonic() - started,
    )


def _run_folds(cohort, library, config, mode, seed):
    splits = stratified_kfold(cohort.survival, config.folds, seed)
    jobs = [
        (fold, train_ids, test_ids)
        for fold, (train_ids, test_ids) in enumerate(splits)
    ]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_fold_job, fold, tr, te, cohort, library, config,
                            mode, seed)
                for fold, tr, te in jobs
            ]
            return [f.result() for f in futures]
    return [
        _fold_job(fold, tr, te, cohort, library, config, mode, seed)
        for fold, tr, te in jobs
    ]


def discover_cohorts(data_dir: str, config: RunConfig) -> list:
    """A data dir is either one cohort or a directory of cohort subdirs."""
    if os.path.exists(os.path.join(data_dir, config.expression_file)):
        return [(config.cohort_name, data_dir)]
    cohorts = []
    for name in sorted(os.listdir(data_dir)):
        sub = os.path.join(data_dir, name)
        if os.path.isdir(sub) and os.path.exists(
            os.path.join(sub, config.expression_file)
        ):
            cohorts.append((name, sub))
    if not cohorts:
        raise DataError(f"{data_dir}: no cohort data found")
    return cohorts


def _mean_sd(values: list):
    clean = [v for v in values if v is not None]
    if not clean:
        return None, None
    mean = float(np.mean(clean))
    sd = float(np.std(clean))
    return mean, sd


def _jsonl(records: list) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def run_experiment(config: RunConfig, data_dir: str, out_dir: str) -> dict:
    """Stratified k-fold CV per cohort plus cross-cohort aggregation.

    Writes metrics.jsonl (deterministic), summary.txt, the resolved config,
    and timings.txt (excluded from the determinism contract).
    """
    os.makedirs(out_dir, exist_ok=True)
    cohorts = discover_cohorts(data_dir, config)
    records = []
    timing_lines = []
    per_cohort = {}
    for cohort_name, cohort_dir in cohorts:
        cohort, library = load_cohort_dir(cohort_dir, config)
        folds = _run_folds(cohort, library, config, config.mode, config.seed)
        per_cohort[cohort_name] = {
            "n": len(cohort.patient_ids),
            "folds": folds,
        }
        for result in folds:
            for metric in sorted(result.metrics):
                value = result.metrics[metric]
                records.append({
                    "cohort": cohort_name,
                    "fold": result.fold,
                    "mode": config.mode,
                    "metric": metric,
                    "value": value,
                })
            timing_lines.append(
                f"{cohort_name} fold {result.fold}: {result.wall_time:.2f}s"
            )
        for metric in ("c_index", "td_auc"):
            mean, sd = _mean_sd([r.metrics.get(metric) for r in folds])
            records.append({
                "cohort": cohort_name, "fold": None, "mode": config.mode,
                "metric": f"{metric}_mean", "value": mean,
            })
            records.append({
                "cohort": cohort_name, "fold": None, "mode": config.mode,
                "metric": f"{metric}_sd", "value": sd,
            })

    for metric in ("c_index", "td_auc"):
        total_n = 0
        weighted = 0.0
        any_value = False
        for cohort_name in sorted(per_cohort):
            info = per_cohort[cohort_name]
            mean, _ = _mean_sd(
                [r.metrics.get(metric) for r in info["folds"]]
            )
            if mean is not None:
                weighted += info["n"] * mean
                total_n += info["n"]
                any_value = True
        records.append({
            "cohort": "__overall__", "fold": None, "mode": config.mode,
            "metric": f"{metric}_weighted",
            "value": (weighted / total_n) if any_value else None,
        })

    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        fh.write(_jsonl(records))
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(config.to_text())
    with open(os.path.join(out_dir, "timings.txt"), "w") as fh:
        fh.write("\n".join(timing_lines) + "\n")
    summary = _summary_table(records)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary)
    return {"records": records, "per_cohort": per_cohort, "summary": summary}


def _summary_table(records: list) -> str:
    lines = ["cohort           mode             metric            value",
             "-" * 60]
    for r in records:
        if r["fold"] is not None:
            continue
        value = "nan" if r["value"] is None else f"{r['value']:.4f}"
        lines.append(
            f"{r['cohort']:<16} {r['mode']:<16} {r['metric']:<17} {value}"
        )
    return "\n".join(lines) + "\n"


def run_ablation(
    config: RunConfig, data_dir: str, out_dir: str,
    modes: Optional[Sequence[str]] = None,
) -> dict:
    """Run every mode under identical seeds and fold splits; report
    absolute and relative C-index deltas against the full mode."""
    modes = list(modes) if modes else list(MODES)
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}")
    if "full" not in modes:
        modes = ["full"] + modes
    os.makedirs(out_dir, exist_ok=True)
    cohorts = discover_cohorts(data_dir, config)
    records = []
    mode_means = {}
    for cohort_name, cohort_dir in cohorts:
        cohort, library = load_cohort_dir(cohort_dir, config)
        monolithic_library = None
        for mode in modes:
            lib = library
            if mode == "monolithic":
                if monolithic_library is None:
                    monolithic_library = build_monolithic_graph(library)
                lib = monolithic_library
            folds = _run_folds(cohort, lib, config, mode, config.seed)
            values = [r.metrics.get("c_index") for r in folds]
            mean, sd = _mean_sd(values)
            mode_means.setdefault(cohort_name, {})[mode] = mean
            for result in folds:
                records.append({
                    "cohort": cohort_name, "fold": result.fold, "mode": mode,
                    "metric": "c_index",
                    "value": result.metrics.get("c_index"),
                })
            records.append({
                "cohort": cohort_name, "fold": None, "mode": mode,
                "metric": "c_index_mean", "value": mean,
            })
            records.append({
                "cohort": cohort_name, "fold": None, "mode": mode,
                "metric": "c_index_sd", "value": sd,
            })
        full_mean = mode_means[cohort_name].get("full")
        for mode in modes:
            mean = mode_means[cohort_name][mode]
            delta = rel = None
            if mean is not None and full_mean is not None:
                delta = mean - full_mean
                rel = delta / full_mean if full_mean != 0 else None
            records.append({
                "cohort": cohort_name, "fold": None, "mode": mode,
                "metric": "c_index_delta_vs_full", "value": delta,
            })
            records.append({
                "cohort": cohort_name, "fold": None, "mode": mode,
                "metric": "c_index_rel_delta_vs_full", "value": rel,
            })

    with open(os.path.join(out_dir, "ablation.jsonl"), "w") as fh:
        fh.write(_jsonl(records))
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(config.to_text())
    summary = _summary_table(records)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary)
    return {"records": records, "mode_means": mode_means, "summary": summary}


RELATION_CYCLE = ("activation", "inhibition", "binding")


def generate_synthetic_cohort(spec: SynthSpec, seed: int, out_dir: str) -> dict:
    """Write a fully synthetic cohort with planted pathway-level signal.

    Expression is standard normal. Each causal pathway contributes a linear
    risk through a random half of its genes, each modulated by the gene's
    mutation state (factor 1 + mut), so the signal has within-pathway
    structure that mean pooling averages away. Survival
    is exponential with rate exp(risk); a ``censoring_rate`` fraction of
    patients is censored uniformly before their event.

    All draws come from one seeded generator in fixed order and values are
    fixed-precision formatted, so regeneration is byte-identical.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    n = spec.n_patients
    width = max(4, len(str(spec.n_pathways)))
    pathway_ids = [f"P{k + 1:0{max(3, len(str(spec.n_pathways)))}d}"
                   for k in range(spec.n_pathways)]
    causal = spec.causal_ids()
    unknown = [c for c in causal if c not in pathway_ids]
    if unknown:
        raise ConfigError(
            f"causal pathway ids not in the generated catalogue: "
            f"{', '.join(unknown)} (ids run {pathway_ids[0]}..{pathway_ids[-1]})"
        )
    gene_count = spec.n_pathways * spec.genes_per_pathway
    gene_width = max(4, len(str(gene_count)))
    genes = [f"G{g + 1:0{gene_width}d}" for g in range(gene_count)]
    patients = [f"PT{i + 1:0{width}d}" for i in range(n)]
    members = {
        pid: genes[k * spec.genes_per_pathway : (k + 1) * spec.genes_per_pathway]
        for k, pid in enumerate(pathway_ids)
    }

    with open(os.path.join(out_dir, "mapping.tsv"), "w") as fh:
        for pid in pathway_ids:
            for gene in members[pid]:
                fh.write(f"{pid}\t{gene}\n")
    with open(os.path.join(out_dir, "edges.tsv"), "w") as fh:
        for pid in pathway_ids:
            local = members[pid]
            for e in range(spec.edges_per_pathway):
                src, dst = rng.choice(len(local), size=2, replace=False)
                relation = RELATION_CYCLE[e % len(RELATION_CYCLE)]
                fh.write(f"{pid}\t{local[src]}\t{local[dst]}\t{relation}\n")

    expression = rng.standard_normal((gene_count, n))
    cnv = rng.choice(
        np.array([-2.0, -1.0, 0.0, 1.0, 2.0]),
        size=(gene_count, n),
        p=[0.05, 0.2, 0.5, 0.2, 0.05],
    )
    mutation = (rng.random((gene_count, n)) < spec.mutation_rate).astype(float)

    def write_matrix(name, values, fmt="%.10g"):
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write("gene_id\t" + "\t".join(patients) + "\n")
            for g, gene in enumerate(genes):
                cells = "\t".join(fmt % values[g, i] for i in range(n))
                fh.write(f"{gene}\t{cells}\n")

    write_matrix("expression.tsv", expression)
    write_matrix("cnv.tsv", cnv, fmt="%g")
    write_matrix("mutation.tsv", mutation, fmt="%g")

    gene_row = {g: i for i, g in enumerate(genes)}
    risk = np.zeros(n)
    causal_genes = {}
    for pid in causal:
        pool = members[pid]
        subset_size = max(1, len(pool) // 2)
        chosen = sorted(rng.choice(len(pool), size=subset_size, replace=False))
        causal_genes[pid] = [pool[j] for j in chosen]
        rows = np.array([gene_row[g] for g in causal_genes[pid]])
        contribution = (expression[rows] * (1.0 + mutation[rows])).sum(axis=0)
        risk += spec.effect_size * contribution

    base_time = 365.0 * rng.exponential(1.0, size=n) / np.exp(risk)
    censor_flags = rng.random(n) < spec.censoring_rate
    censor_frac = rng.random(n)
    times = np.where(censor_flags, base_time * censor_frac, base_time)
    events = (~censor_flags).astype(int)

    age = rng.normal(60.0, 10.0, size=n)
    sex = rng.choice(["M", "F"], size=n)
    stage = rng.choice(["I", "II", "III", "IV"], size=n)
    with open(os.path.join(out_dir, "clinical.csv"), "w") as fh:
        fh.write("patient_id,age,sex,stage\n")
        for i, pid in enumerate(patients):
            fh.write(f"{pid},{age[i]:.10g},{sex[i]},{stage[i]}\n")
    with open(os.path.join(out_dir, "survival.csv"), "w") as fh:
        fh.write("patient_id,time,event\n")
        for i, pid in enumerate(patients):
            fh.write(f"{pid},{times[i]:.10g},{events[i]}\n")
    with open(os.path.join(out_dir, "truth.csv"), "w") as fh:
        fh.write("patient_id,risk\n")
        for i, pid in enumerate(patients):
            fh.write(f"{pid},{risk[i]:.10g}\n")
    with open(os.path.join(out_dir, "synth.cfg"), "w") as fh:
        fh.write(spec.to_text())
        fh.write(f"# seed = {seed}\n")
        for pid in causal:
            fh.write(f"# causal genes {pid}: {','.join(causal_genes[pid])}\n")
    return {
        "patients": patients,
        "genes": genes,
        "causal_genes": causal_genes,
        "risk": risk,
        "times": times,
        "events": events,
    }


def train_full_cohort(config: RunConfig, data_dir: str, ckpt_path: str):
    """Train on every patient in a cohort dir and write a checkpoint that
    carries everything evaluation needs: preprocessing statistics, the
    compiled library, the clinical schema, and training risk cutpoints."""
    cohort, library = load_cohort_dir(data_dir, config)
    preprocess = fit_preprocessor(
        cohort, cohort.patient_ids, log1p=config.expression_log1p,
        provenance="full-train",
    )
    packages = prepare_patients(cohort, library, preprocess,
                                cohort.patient_ids)
    lib = library
    if config.mode == "monolithic":
        lib = build_monolithic_graph(library)
        packages = prepare_patients(cohort, lib, preprocess,
                                    cohort.patient_ids)
    params, history = train(config, packages, lib, config.mode, config.seed)
    theta = predict_theta(params, packages, lib, config.mode,
                          config.eval_chunk)
    try:
        _, cutpoints = stratify_risk(theta, config.stratify)
    except DataError:
        cutpoints = None
    extras = {
        "universe": cohort.gene_universe,
        "schema_numeric": cohort.schema.numeric_fields,
        "schema_categorical": cohort.schema.categorical_fields,
        "preprocess": {
            "gene_mean": preprocess.gene_mean,
            "gene_std": preprocess.gene_std,
            "log1p": preprocess.log1p,
            "clinical_mean": preprocess.clinical_mean,
            "clinical_std": preprocess.clinical_std,
            "provenance": preprocess.provenance,
        },
        "cutpoints": cutpoints,
        "library": {
            "relations": lib.relations,
            "pre_filter_count": lib.pre_filter_count,
            "pathways": [
                {
                    "pathway_id": p.pathway_id,
                    "genes": p.genes,
                    "edge_src": p.edge_src,
                    "edge_dst": p.edge_dst,
                    "edge_rel": p.edge_rel,
                }
                for p in lib.pathways
            ],
        },
        "mode": config.mode,
        "history": history,
    }
    save_checkpoint(ckpt_path, params, config.fingerprint(), config.to_text(),
                    extras)
    return params, history


def _library_from_extras(extras: dict) -> TopologyLibrary:
    from .graphs import PathwayTopology

    return TopologyLibrary(
        [
            PathwayTopology(
                pathway_id=item["pathway_id"],
                genes=list(item["genes"]),
                edge_src=np.asarray(item["edge_src"], dtype=np.int64),
                edge_dst=np.asarray(item["edge_dst"], dtype=np.int64),
                edge_rel=np.asarray(item["edge_rel"], dtype=np.int64),
            )
            for item in extras["library"]["pathways"]
        ],
        list(extras["library"]["relations"]),
        int(extras["library"]["pre_filter_count"]),
    )


def _cohort_from_checkpoint(data_dir: str, config: RunConfig, extras: dict):
    """Align a cohort against a checkpoint's frozen universe and schema."""
    from .omics import ClinicalSchema

    def path(name):
        return os.path.join(data_dir, name)

    def optional(name, modality):
        p = path(name)
        return parse_matrix(p, modality) if os.path.exists(p) else None

    expression = parse_matrix(path(config.expression_file), "expression")
    cnv = optional(config.cnv_file, "cnv")
    mutation = optional(config.mutation_file, "mutation")
    clinical = parse_clinical(path(config.clinical_file))
    survival = parse_survival(path(config.survival_file))
    schema = ClinicalSchema(
        list(extras["schema_numeric"]),
        [list(pair) for pair in extras["schema_categorical"]],
    )
    cohort = align_cohort(
        expression, cnv, mutation, clinical, survival, extras["universe"],
        schema=schema,
    )
    pp = extras["preprocess"]
    preprocess = PreprocessParams(
        gene_mean=np.asarray(pp["gene_mean"]),
        gene_std=np.asarray(pp["gene_std"]),
        log1p=bool(pp["log1p"]),
        clinical_mean=dict(pp["clinical_mean"]),
        clinical_std=dict(pp["clinical_std"]),
        provenance=str(pp["provenance"]),
    )
    return cohort, preprocess


def evaluate_checkpoint(ckpt_path: str, data_dir: str, out_path: str) -> dict:
    """Score a cohort with a trained checkpoint and write metrics.jsonl."""
    params, fingerprint, config_text, extras = load_checkpoint(ckpt_path)
    config = _config_from_text(config_text)
    if config.fingerprint() != fingerprint:
        raise ConfigError(f"{ckpt_path}: embedded config does not hash to "
                          "the stored fingerprint")
    library = _library_from_extras(extras)
    cohort, preprocess = _cohort_from_checkpoint(data_dir, config, extras)
    packages = prepare_patients(cohort, library, preprocess,
                                cohort.patient_ids)
    local = RunConfig(**{**config.to_dict(), "mode": extras["mode"]})
    cutpoints = extras.get("cutpoints")
    metrics = evaluate_packages(params, packages, library, local, cutpoints)
    records = [
        {
            "cohort": config.cohort_name, "fold": None,
            "mode": extras["mode"], "metric": metric,
            "value": metrics[metric],
        }
        for metric in sorted(metrics)
    ]
    with open(out_path, "w") as fh:
        fh.write(_jsonl(records))
    return metrics


def _config_from_text(text: str) -> RunConfig:
    mapping = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return RunConfig.from_mapping(mapping)


def export_attention_report(
    ckpt_path: str, data_dir: str, patient_id: str, out_path: str,
) -> dict:
    """Individual molecular profile: risk score and group, top pathways by
    attention, and per pathway the top genes with modulation coefficients
    and raw modality values. All weights are the live model internals."""
    params, fingerprint, config_text, extras = load_checkpoint(ckpt_path)
    config = _config_from_text(config_text)
    if config.fingerprint() != fingerprint:
        raise ConfigError(f"{ckpt_path}: embedded config does not hash to "
                          "the stored fingerprint")
    mode = extras["mode"]
    if mode in ("mean_pool_both", "monolithic"):
        raise ConfigError(
            f"attention report requires an attention mode; checkpoint "
            f"was trained with {mode!r}"
        )
    library = _library_from_extras(extras)
    cohort, preprocess = _cohort_from_checkpoint(data_dir, config, extras)
    if patient_id not in cohort.patient_ids:
        raise DataError(f"unknown patient {patient_id!r}")
    package = prepare_patients(cohort, library, preprocess, [patient_id])[0]
    batch = collate_batch([package], library)
    tape, _, result = run_forward(params, batch, mode)

    theta = float(tape.value(result.theta)[0, 0])
    cutpoints = extras.get("cutpoints")
    group = None
    if cutpoints is not None:
        labels, _ = stratify_risk(
            np.array([theta]), config.stratify, np.asarray(cutpoints)
        )
        group = int(labels[0])
    pi = (
        tape.value(result.pi).reshape(-1)
        if result.pi is not None
        else np.full(batch.n_instances, 1.0 / batch.n_instances)
    )
    alpha = (
        tape.value(result.alpha).reshape(-1)
        if result.alpha is not None
        else None
    )
    gamma = (
        tape.value(result.hom.gamma).reshape(-1)
        if result.hom.gamma is not None
        else np.ones(batch.n_nodes)
    )
    beta = (
        tape.value(result.hom.beta).reshape(-1)
        if result.hom.beta is not None
        else np.zeros(batch.n_nodes)
    )

    node_of_instance = batch.gene_to_pathway.index
    order = np.argsort(-pi, kind="stable")[: config.top_pathways]
    pathways = []
    for j in order:
        k = int(batch.pathway_index[j])
        topology = library.pathways[k]
        rows = np.flatnonzero(node_of_instance == j)
        if alpha is not None:
            weights = alpha[rows]
        else:
            weights = np.full(rows.size, 1.0 / rows.size)
        top = np.argsort(-weights, kind="stable")[: config.top_genes]
        gene_entries = []
        for t in top:
            node = int(rows[t])
            gene_entries.append({
                "gene": topology.genes[int(t)],
                "alpha": float(weights[t]),
                "gamma": float(gamma[node]),
                "beta": float(beta[node]),
                "expression": float(batch.node_x[node, 0]),
                "cnv": float(batch.node_x[node, 1]),
                "mutation": float(batch.node_x[node, 2]),
            })
        pathways.append({
            "pathway_id": topology.pathway_id,
            "pi": float(pi[j]),
            "genes": gene_entries,
        })
    report = {
        "patient_id": patient_id,
        "mode": mode,
        "theta": theta,
        "risk_group": group,
        "stratify": config.stratify,
        "pathways": pathways,
    }
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report

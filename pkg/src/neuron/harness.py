"""Experiment orchestration: performance tables and explanation comparisons.

``run_performance_experiment`` trains every (predictor, configuration) pair
per seed on identical stay sets and reports bootstrap-backed validation
metrics. ``run_explanation_comparison`` repeats the attribution and
narrative pipeline R times on one validation stay and aggregates both
metric families into a side-by-side report.

Everything is seeded; wall-clock timestamps only ever reach the request
log, so two runs of the same configuration produce byte-identical output
trees apart from ``logs/``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import attribution as attr_mod
from . import cohort as cohort_mod
from . import embeddings as emb_mod
from . import metrics as metrics_mod
from . import narrative as narr_mod
from . import ontology as onto_mod
from . import predictors as pred_mod
from .errors import DataError, JudgeUnavailable, NoClaims
from .knowledge import default_knowledge_base, default_lexicon, extract_claims
from .retrieval import HashingEmbedder, index_documents, retrieve

DEFAULT_EMBED_PARAMS = {
    "p": 1.0, "q": 1.0, "walk_len": 40, "walks_per_node": 10,
    "dim": 32, "window": 5, "negatives": 5, "epochs": 5, "lr": 0.025, "seed": 100,
}

DEFAULT_PERTURB = {"radius": 0.1, "n_perturb": 50, "mask_prob": 0.5}

# Table-shaped row order for the explanation comparison export
METRIC_ROW_ORDER = [
    ("completeness", "SHAP"),
    ("additivity_gap", "SHAP"),
    ("infidelity", "SHAP"),
    ("max_sensitivity", "SHAP"),
    ("topk_jaccard", "SHAP"),
    ("mass_coverage", "RAG"),
    ("narrative_completeness", "RAG"),
    ("clinical_plausibility", "RAG"),
    ("ha_faithfulness", "BOTH"),
    ("ha_plausibility", "BOTH"),
    ("ha_usefulness", "BOTH"),
    ("ha_sensemaking", "BOTH"),
    ("ha_overall", "BOTH"),
    ("narrative_coherence", "RAG"),
    ("run_stability", "BOTH"),
]


@dataclass
class ExperimentConfig:
    cohort_spec_path: Optional[str] = None
    cohort_jsonl: Optional[str] = None
    cohort_n: int = 5000
    ontology_concepts: Optional[str] = None
    ontology_relationships: Optional[str] = None

    predictor_kinds: list[str] = field(default_factory=lambda: list(pred_mod.PREDICTOR_KINDS))
    feature_configs: list[str] = field(default_factory=lambda: list(cohort_mod.FEATURE_CONFIGS))
    hyper: dict = field(default_factory=dict)

    seeds: list[int] = field(default_factory=lambda: [0])
    split_mode: str = "STAY"
    val_frac: float = 0.30
    n_boot: int = 1000
    metric_runs: int = 30

    embed: dict = field(default_factory=lambda: dict(DEFAULT_EMBED_PARAMS))

    explain_model: str = "LOGISTIC"
    explain_config: str = "TABULAR"
    explainer: str = "EXACT"
    kernel_samples: int = 2048
    explain_stay_index: int = 0
    top_k: int = 5
    perturb: dict = field(default_factory=lambda: dict(DEFAULT_PERTURB))
    retrieval_k: int = 3
    budgets: dict = field(default_factory=lambda: dict(narr_mod.DEFAULT_BUDGETS))

    llm: str = "STUB"
    judge: str = "STUB"
    out_dir: str = "out"
    deterministic: bool = True

    def validate(self) -> None:
        if self.metric_runs < 2:
            raise DataError("metric_runs must be >= 2")
        if not self.predictor_kinds:
            raise DataError("need at least one predictor kind")
        if not self.feature_configs:
            raise DataError("need at least one feature configuration")
        for kind in self.predictor_kinds:
            if kind not in pred_mod.PREDICTOR_KINDS:
                raise DataError(f"unknown predictor kind {kind!r}")
        for config in self.feature_configs:
            if config not in cohort_mod.FEATURE_CONFIGS:
                raise DataError(f"unknown feature configuration {config!r}")
        if self.explainer not in ("EXACT", "KERNEL"):
            raise DataError(f"unknown explainer {self.explainer!r}")
        if not self.seeds:
            raise DataError("need at least one seed")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


# --- shared setup -----------------------------------------------------------------

def load_ontology(cfg: ExperimentConfig) -> tuple[onto_mod.ConceptGraph, onto_mod.LevelMap]:
    if cfg.ontology_concepts and cfg.ontology_relationships:
        graph = onto_mod.load_concept_graph(cfg.ontology_concepts, cfg.ontology_relationships)
    else:
        graph = onto_mod.load_toy_ontology()
    return graph, onto_mod.discover_levels(graph)


def build_embeddings(cfg: ExperimentConfig, graph: onto_mod.ConceptGraph) -> emb_mod.EmbeddingTable:
    p = cfg.embed
    walks = emb_mod.generate_walks(
        graph, p=p.get("p", 1.0), q=p.get("q", 1.0),
        walk_len=p.get("walk_len", 40), walks_per_node=p.get("walks_per_node", 10),
        seed=p.get("seed", 100),
    )
    workers = 1 if cfg.deterministic else int(p.get("workers", 1))
    return emb_mod.train_skipgram(
        walks, dim=p.get("dim", 32), window=p.get("window", 5),
        negatives=p.get("negatives", 5), epochs=p.get("epochs", 5),
        lr=p.get("lr", 0.025), seed=p.get("seed", 100), workers=workers,
    )


def load_cohort(cfg: ExperimentConfig, graph: onto_mod.ConceptGraph, seed: int) -> list:
    if cfg.cohort_jsonl:
        return cohort_mod.load_admissions_jsonl(cfg.cohort_jsonl)
    if cfg.cohort_spec_path:
        spec = cohort_mod.CohortSpec.from_json(cfg.cohort_spec_path)
    else:
        spec = cohort_mod.default_cohort_spec(n=cfg.cohort_n)
    return cohort_mod.generate_cohort(spec, graph, seed=seed)


@dataclass
class PreparedData:
    train: list
    val: list
    idf: emb_mod.WeightTable
    matrices: dict  # config -> (train FeatureMatrix, val FeatureMatrix), unscaled
    train_labels: np.ndarray
    val_labels: np.ndarray


def prepare_data(cfg: ExperimentConfig, seed: int, graph, levels, emb) -> PreparedData:
    """The fixed pipeline: filter -> split -> impute -> assemble.

    Scaling happens later, per predictor kind, with statistics fit on the
    training rows only.
    """
    records = load_cohort(cfg, graph, seed)
    records = cohort_mod.filter_missingness(records)
    train, val = cohort_mod.split(records, cfg.split_mode, cfg.val_frac, seed=seed)
    train, val = cohort_mod.impute_median(train, val)
    idf = emb_mod.compute_idf(train)
    matrices = {}
    for config in dict.fromkeys(list(cfg.feature_configs) + [cfg.explain_config]):
        mt = cohort_mod.assemble_features(train, config, emb, idf, levels, graph)
        mv = cohort_mod.assemble_features(val, config, emb, idf, levels, graph)
        matrices[config] = (mt, mv)
    return PreparedData(
        train=train, val=val, idf=idf, matrices=matrices,
        train_labels=np.array([r.label for r in train], dtype=np.float64),
        val_labels=np.array([r.label for r in val], dtype=np.float64),
    )


def _scaled_pair(prep: PreparedData, config: str, kind: str):
    mt, mv = prep.matrices[config]
    mode = pred_mod.DEFAULT_SCALING[kind]
    mts, params = cohort_mod.scale(mt, mode)
    mvs = cohort_mod.apply_scaler(mv, params)
    return mts, mvs


# --- performance experiment ----------------------------------------------------------

def run_performance_experiment(cfg: ExperimentConfig) -> list[pred_mod.PerformanceRow]:
    """Train and evaluate every (kind, config, seed) cell on shared stay sets."""
    cfg.validate()
    graph, levels = load_ontology(cfg)
    emb = build_embeddings(cfg, graph)
    rows: list[pred_mod.PerformanceRow] = []
    for seed in cfg.seeds:
        prep = prepare_data(cfg, seed, graph, levels, emb)
        for config in cfg.feature_configs:
            for kind in cfg.predictor_kinds:
                mts, mvs = _scaled_pair(prep, config, kind)
                model = pred_mod.train(kind, mts, prep.train_labels,
                                       hyper=cfg.hyper.get(kind), seed=seed)
                row = pred_mod.evaluate(model, mvs, prep.val_labels,
                                        n_boot=cfg.n_boot, seed=seed)
                row.model = kind
                row.config = config
                row.seed = seed
                rows.append(row)
    return rows


def write_performance_csv(rows: list[pred_mod.PerformanceRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(pred_mod.PerformanceRow.CSV_FIELDS)
        for row in rows:
            writer.writerow(row.as_csv_row())


# --- explanation comparison -----------------------------------------------------------

@dataclass
class ExplanationComparison:
    shap_report: dict
    rag_report: dict
    skipped: list[str]
    stay_id: str
    narratives: list[str]
    attributions: list[attr_mod.AttributionVector]


def _make_clients(cfg: ExperimentConfig, log_path: Optional[Path]):
    if cfg.llm == "STUB":
        client = narr_mod.StubLLMClient(log_path=log_path)
    else:
        client = narr_mod.HttpLLMClient(cfg.llm, log_path=log_path)
    if cfg.judge == "STUB":
        judge = narr_mod.StubJudge()
    else:
        judge = narr_mod.HttpJudgeClient(cfg.judge, log_path=log_path)
    return client, judge


def run_explanation_comparison(cfg: ExperimentConfig,
                               log_path: Optional[Path] = None) -> ExplanationComparison:
    """R repeated attribution + narrative runs on one validation stay.

    Per-run metrics aggregate into mean / SD / CI; the run-to-run stability
    rows aggregate the pairwise cosine similarities across runs. A judge
    failure downgrades the human-aligned rows to skipped instead of
    failing the experiment.
    """
    cfg.validate()
    graph, levels = load_ontology(cfg)
    emb = build_embeddings(cfg, graph)
    seed0 = cfg.seeds[0]
    prep = prepare_data(cfg, seed0, graph, levels, emb)
    kb = default_knowledge_base()
    lexicon = default_lexicon()

    kind = cfg.explain_model
    config = cfg.explain_config
    mts, mvs = _scaled_pair(prep, config, kind)
    model = pred_mod.train(kind, mts, prep.train_labels, hyper=cfg.hyper.get(kind), seed=seed0)

    stay_index = cfg.explain_stay_index % len(prep.val)
    record = prep.val[stay_index]
    x = mvs.values[stay_index]
    baseline = np.median(mts.values, axis=0)
    layout = mvs.layout

    # display values: raw imputed tabular features plus ontology counts by term
    display_features: dict = dict(record.features)
    counts = onto_mod.category_counts(graph, levels, record.codes, record.stay_id)
    for aid, term in layout.ontology:
        display_features[term] = counts.counts[aid]

    # retrieval corpora
    concept_allow = set(record.codes)
    for code in record.codes:
        if code in graph.concepts:
            concept_allow |= graph.ancestors(code)
    concept_allow &= set(graph.concepts)
    embedder = _default_embedder()
    onto_docs = onto_mod.slice_documents(graph, set(graph.concepts))
    onto_index = index_documents(onto_docs, embedder) if onto_docs else None
    note_docs = [
        onto_mod.Document(doc_id=f"note-{r.stay_id}", text=r.notes,
                          metadata={"kind": "note", "stay_id": r.stay_id})
        for r in prep.train + prep.val if r.notes
    ]
    note_index = index_documents(note_docs, embedder) if note_docs else None

    client, judge = _make_clients(cfg, log_path)
    judge_ok = True

    def explainer_for(run_seed: int):
        if cfg.explainer == "EXACT":
            return lambda z: attr_mod.exact_shapley(model, z, baseline)
        return lambda z: attr_mod.kernel_shap(model, z, baseline,
                                              n_samples=cfg.kernel_samples, seed=run_seed)

    shap_runs: list[dict] = []
    rag_runs: list[dict] = []
    phi_vectors: list[np.ndarray] = []
    mention_vectors: list[np.ndarray] = []
    narratives: list[str] = []
    attributions: list[attr_mod.AttributionVector] = []
    skipped: list[str] = []

    for run in range(cfg.metric_runs):
        run_seed = int(np.random.default_rng([seed0, run]).integers(0, 2**31 - 1))
        explain = explainer_for(run_seed)
        attr = explain(x)
        attr.column_names = list(mvs.columns)
        attributions.append(attr)
        phi_vectors.append(attr.phi.copy())

        pcfg = metrics_mod.PerturbationConfig(
            radius=cfg.perturb.get("radius", 0.1),
            n_perturb=cfg.perturb.get("n_perturb", 50),
            mask_prob=cfg.perturb.get("mask_prob", 0.5),
            seed=run_seed,
        )
        shap_metrics = {
            "completeness": metrics_mod.completeness_score(attr),
            "additivity_gap": metrics_mod.additivity_gap(attr),
            "infidelity": metrics_mod.infidelity(attr, model, x, baseline, pcfg),
            "max_sensitivity": metrics_mod.max_sensitivity(explain, model, x, pcfg),
            "topk_jaccard": metrics_mod.topk_jaccard_robustness(explain, model, x, cfg.top_k, pcfg),
        }

        grouped = attr_mod.collapse_and_group(attr, layout, x=x)
        drivers = attr_mod.rank_drivers(grouped, k=cfg.top_k)
        driver_text = narr_mod.build_driver_section(drivers, display_features, kb)

        # retrieval-grounded evidence
        onto_evidence = ""
        if onto_index is not None and concept_allow:
            hits = retrieve(onto_index, driver_text, embedder=embedder,
                            allow_list=concept_allow, k=cfg.retrieval_k)
            doc_text = {d.doc_id: d.text for d in onto_docs}
            onto_evidence = "\n".join(doc_text[doc_id] for doc_id, _, _ in hits)
        notes_text = ""
        if note_index is not None and record.notes:
            hits = retrieve(note_index, driver_text, embedder=embedder, k=1,
                            metadata_filter={"stay_id": record.stay_id})
            note_text = {d.doc_id: d.text for d in note_docs}
            notes_text = "\n".join(note_text[doc_id] for doc_id, _, _ in hits)

        driver_feature_keys = [e.feature_key for e in drivers.entries if e.feature_key]
        kb_text = narr_mod.build_kb_section(driver_feature_keys, kb)
        tabular_text = narr_mod.build_tabular_section(record.features, kb)
        prompt = narr_mod.assemble_prompt(driver_text, tabular_text, onto_evidence,
                                          kb_text, notes_text, budgets=cfg.budgets)
        bundle = narr_mod.generate_narrative(client, prompt, drivers=drivers, lexicon=lexicon)
        narratives.append(bundle.raw)
        mention_vectors.append(bundle.mention_vector.astype(np.float64))

        covered_names = set()
        for token, entry in zip(drivers.tokens, drivers.entries):
            if token in bundle.driver_tokens_covered:
                covered_names.add(entry.name)
        rag_metrics = {
            "mass_coverage": metrics_mod.shap_mass_coverage(drivers, covered_names),
            "narrative_completeness": metrics_mod.narrative_completeness(
                drivers, bundle, lexicon=lexicon).score,
        }
        claim_text = bundle.sections.get("A", "") + "\n" + bundle.sections.get("integration", "")
        try:
            claims = extract_claims(claim_text, kb, lexicon)
            rag_metrics["clinical_plausibility"] = metrics_mod.clinical_plausibility(claims, kb)
        except NoClaims:
            pass

        if judge_ok:
            try:
                shap_judge = metrics_mod.judge_scores(judge, driver_text)
                rag_judge = metrics_mod.judge_scores(judge, bundle)
                for dim in ("faithfulness", "plausibility", "usefulness", "sensemaking", "overall"):
                    shap_metrics[f"ha_{dim}"] = shap_judge[dim]
                    rag_metrics[f"ha_{dim}"] = rag_judge[dim]
                if "coherence" in rag_judge:
                    rag_metrics["narrative_coherence"] = rag_judge["coherence"]
            except JudgeUnavailable:
                judge_ok = False
                for run_metrics in (shap_runs, rag_runs):
                    for prior in run_metrics:
                        for key in [k for k in prior if k.startswith("ha_") or k == "narrative_coherence"]:
                            prior.pop(key)

        shap_runs.append(shap_metrics)
        rag_runs.append(rag_metrics)

    if not judge_ok:
        skipped = [f"ha_{d}" for d in ("faithfulness", "plausibility", "usefulness",
                                       "sensemaking", "overall")] + ["narrative_coherence"]

    shap_report = metrics_mod.aggregate(shap_runs, seed=seed0)
    rag_report = metrics_mod.aggregate(rag_runs, seed=seed0)

    # cross-run stability rows aggregate the pairwise similarities
    shap_pairs = metrics_mod.pairwise_cosines(phi_vectors)
    rag_pairs = metrics_mod.pairwise_cosines(mention_vectors)
    shap_report["run_stability"] = _aggregate_values(shap_pairs, seed0)
    rag_report["run_stability"] = _aggregate_values(rag_pairs, seed0)

    return ExplanationComparison(
        shap_report=shap_report, rag_report=rag_report, skipped=skipped,
        stay_id=record.stay_id, narratives=narratives, attributions=attributions,
    )


def _default_embedder():
    return HashingEmbedder(dim=64, seed=0)


def _aggregate_values(values: list[float], seed: int) -> metrics_mod.MetricAggregate:
    arr = np.array(values, dtype=np.float64)
    rng = np.random.default_rng([seed, 9999])
    idx = rng.integers(0, len(arr), size=(10_000, len(arr)))
    boot = arr[idx].mean(axis=1)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return metrics_mod.MetricAggregate(
        mean=float(arr.mean()),
        sd=float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        ci_lo=float(lo), ci_hi=float(hi), n_runs=len(arr),
    )


def write_metric_report(comparison: ExplanationComparison, csv_path: str | Path,
                        json_path: Optional[str | Path] = None) -> None:
    """Export the comparison in the fixed row order, one row per metric."""
    def cells(report: dict, name: str) -> list[str]:
        agg = report.get(name)
        if agg is None:
            status = "skipped" if name in comparison.skipped else "--"
            return [status, "", "", "", ""]
        return ["%.10g" % agg.mean, "%.10g" % agg.sd,
                "%.10g" % agg.ci_lo, "%.10g" % agg.ci_hi, str(agg.n_runs)]

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "metric", "side",
            "shap_mean", "shap_sd", "shap_ci_lo", "shap_ci_hi", "shap_n",
            "rag_mean", "rag_sd", "rag_ci_lo", "rag_ci_hi", "rag_n",
        ])
        for name, side in METRIC_ROW_ORDER:
            shap_cells = cells(comparison.shap_report, name) if side in ("SHAP", "BOTH") \
                else ["--", "", "", "", ""]
            rag_cells = cells(comparison.rag_report, name) if side in ("RAG", "BOTH") \
                else ["--", "", "", "", ""]
            writer.writerow([name, side] + shap_cells + rag_cells)

    if json_path is not None:
        payload = {
            "stay_id": comparison.stay_id,
            "skipped": comparison.skipped,
            "shap": {k: asdict(v) for k, v in comparison.shap_report.items()},
            "rag": {k: asdict(v) for k, v in comparison.rag_report.items()},
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


# --- output tree -----------------------------------------------------------------------

def make_output_tree(out_dir: str | Path) -> dict[str, Path]:
    root = Path(out_dir)
    tree = {name: root / name for name in ("perf", "attributions", "narratives", "metrics", "logs")}
    for path in tree.values():
        path.mkdir(parents=True, exist_ok=True)
    tree["root"] = root
    return tree


def write_manifest(cfg: ExperimentConfig, out_dir: str | Path) -> None:
    payload = {
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds,
    }
    with open(Path(out_dir) / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_full_experiment(cfg: ExperimentConfig, skip_performance: bool = False,
                        skip_explanations: bool = False) -> None:
    """Performance table plus explanation comparison into the output tree."""
    tree = make_output_tree(cfg.out_dir)
    write_manifest(cfg, tree["root"])
    if not skip_performance:
        rows = run_performance_experiment(cfg)
        write_performance_csv(rows, tree["perf"] / "performance.csv")
    if not skip_explanations:
        comparison = run_explanation_comparison(cfg, log_path=tree["logs"] / "requests.jsonl")
        write_metric_report(comparison,
                            tree["metrics"] / "explanation_metrics.csv",
                            tree["metrics"] / "explanation_metrics.json")
        for i, text in enumerate(comparison.narratives):
            (tree["narratives"] / f"narrative_run{i:03d}.txt").write_text(text, encoding="utf-8")
        for i, attr in enumerate(comparison.attributions):
            attr.to_json(tree["attributions"] / f"attribution_run{i:03d}.json")

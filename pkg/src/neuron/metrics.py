"""Explanation-quality metrics for attribution vectors and narratives.

Attribution-side metrics (axiomatic and perturbation-based):

  completeness   1 - |sum(phi) - (f(x) - phi0)| / (|f(x) - phi0| + eps)
  additivity gap |f(x) - (phi0 + sum(phi))|
  infidelity     E_I[(I . phi - (f(x) - f(x_I)))^2], I ~ Bernoulli masks
  max-sensitivity  max over ||delta||_inf <= r of ||Phi(x+delta) - Phi(x)||_2
  top-k Jaccard  mean |S_k(x) cap S_k(x_t)| / |S_k(x) cup S_k(x_t)|
  run stability  mean pairwise cosine over repeated runs, rescaled (1+s)/2

Narrative-side metrics:

  mass coverage            top-K attribution mass over mentioned features
  narrative completeness   fraction of drivers with name, value (1% relative
                           tolerance) and direction all present
  clinical plausibility    mean claim score in {1.0, 0.6, 0.5, 0.0}
  judge scores             faithfulness / plausibility / usefulness /
                           sensemaking via an LLM judge (or deterministic stub)

``aggregate`` turns per-run metric maps into mean, sample SD, and a seeded
percentile-bootstrap 95% CI per metric.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .attribution import AttributionVector, DriverList, RISK_DOWN, RISK_UP, SPACE_LOGIT
from .errors import EmptyTopK, NoClaims, TooFewRuns
from .knowledge import (
    BINARY_KB_FEATURES,
    Claim,
    KnowledgeBase,
    classify_feature_status,
    default_lexicon,
)

EPS_COMPLETENESS = 1e-12


@dataclass
class PerturbationConfig:
    radius: float = 0.1
    n_perturb: int = 50
    mask_prob: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not (0.0 < self.mask_prob < 1.0):
            raise ValueError("mask_prob must be in (0, 1)")
        if self.n_perturb < 1:
            raise ValueError("n_perturb must be >= 1")


def _model_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_logit"):
        return lambda X: np.asarray(model.predict_logit(X), dtype=np.float64)
    return lambda X: np.asarray(model(X), dtype=np.float64).reshape(-1)


def _phi_of(result) -> np.ndarray:
    return np.asarray(result.phi if hasattr(result, "phi") else result, dtype=np.float64)


def completeness_score(attr: AttributionVector) -> float:
    """Normalized residual between the attribution sum and the output shift."""
    if attr.space != SPACE_LOGIT:
        raise ValueError("completeness is defined in logit space")
    shift = attr.fx - attr.phi0
    return 1.0 - abs(float(attr.phi.sum()) - shift) / (abs(shift) + EPS_COMPLETENESS)


def additivity_gap(attr: AttributionVector) -> float:
    return abs(attr.fx - (attr.phi0 + float(attr.phi.sum())))


def infidelity_terms(attr: AttributionVector, model, x: Sequence[float],
                     baseline: Sequence[float], cfg: PerturbationConfig) -> np.ndarray:
    """Per-draw squared residuals of the masking test; infidelity is their mean.

    Each draw masks a Bernoulli(mask_prob) subset of coordinates to the
    baseline and compares the attribution-predicted output change with the
    actual one.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    f = _model_fn(model)
    rng = np.random.default_rng(cfg.seed)
    masks = rng.random((cfg.n_perturb, len(x))) < cfg.mask_prob  # True = masked
    x_masked = np.where(masks, baseline, x)
    fx = float(f(x[None, :])[0])
    predicted = masks @ attr.phi
    actual = fx - f(x_masked)
    return (predicted - actual) ** 2


def infidelity(attr: AttributionVector, model, x: Sequence[float],
               baseline: Sequence[float], cfg: PerturbationConfig) -> float:
    return float(infidelity_terms(attr, model, x, baseline, cfg).mean())


def _perturbations(x: np.ndarray, cfg: PerturbationConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    deltas = rng.uniform(-cfg.radius, cfg.radius, size=(cfg.n_perturb, len(x)))
    return x[None, :] + deltas


def max_sensitivity(explainer: Callable, model, x: Sequence[float],
                    cfg: PerturbationConfig) -> float:
    """Largest explanation change over uniform draws from the L-inf ball.

    ``explainer`` maps an input vector to an attribution (vector or
    AttributionVector); ``model`` is accepted for signature symmetry with
    the other perturbation metrics but the explainer closure already binds it.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.radius == 0.0:
        return 0.0
    ref = _phi_of(explainer(x))
    worst = 0.0
    for xp in _perturbations(x, cfg):
        diff = _phi_of(explainer(xp)) - ref
        worst = max(worst, float(np.linalg.norm(diff)))
    return worst


def _topk_set(phi: np.ndarray, k: int) -> frozenset:
    order = np.lexsort((np.arange(len(phi)), -np.abs(phi)))
    return frozenset(order[:k].tolist())


def topk_jaccard_robustness(explainer: Callable, model, x: Sequence[float],
                            k: int, cfg: PerturbationConfig) -> float:
    """Mean Jaccard overlap between the reference top-k set and perturbed ones."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    ref = _topk_set(_phi_of(explainer(x)), k)
    if cfg.radius == 0.0:
        return 1.0
    sims = []
    for xp in _perturbations(x, cfg):
        other = _topk_set(_phi_of(explainer(xp)), k)
        union = ref | other
        sims.append(len(ref & other) / len(union) if union else 1.0)
    return float(np.mean(sims))


def run_stability_cosine(vectors: Sequence[np.ndarray]) -> float:
    """Mean pairwise cosine similarity across runs, rescaled to [0, 1].

    An all-zero vector has defined similarity 0 with any partner.
    """
    if len(vectors) < 2:
        raise TooFewRuns(len(vectors))
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    norms = [float(np.linalg.norm(v)) for v in vecs]
    sims = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                sims.append(0.0)
            else:
                sims.append(float(vecs[i] @ vecs[j]) / (norms[i] * norms[j]))
    raw = float(np.mean(sims))
    return (1.0 + raw) / 2.0


def pairwise_cosines(vectors: Sequence[np.ndarray]) -> list[float]:
    """The rescaled pairwise similarities backing run_stability_cosine."""
    if len(vectors) < 2:
        raise TooFewRuns(len(vectors))
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    norms = [float(np.linalg.norm(v)) for v in vecs]
    out = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                raw = 0.0
            else:
                raw = float(vecs[i] @ vecs[j]) / (norms[i] * norms[j])
            out.append((1.0 + raw) / 2.0)
    return out


def shap_mass_coverage(drivers: DriverList, mentions: set[str]) -> float:
    """Share of top-K attribution mass whose features the narrative mentions."""
    entries = drivers.entries
    if not entries:
        raise EmptyTopK()
    total = sum(abs(e.phi) for e in entries)
    if total == 0.0:
        raise EmptyTopK()
    covered = sum(abs(e.phi) for e in entries if e.name in mentions)
    return covered / total


_NUMBER_RE = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?")

_DIRECTION_WORDS = {
    RISK_UP: ("increases predicted risk", "raises risk", "increases risk",
              "raising the predicted risk", "higher risk", "worsens the outlook"),
    RISK_DOWN: ("decreases predicted risk", "lowers risk", "reduces risk",
                "lowering the predicted risk", "lower risk", "protective"),
}


@dataclass
class NarrativeCompleteness:
    score: float
    name_rate: float
    value_rate: float
    direction_rate: float


def narrative_completeness(items: DriverList, narrative,
                           lexicon: Optional[dict[str, list[str]]] = None) -> NarrativeCompleteness:
    """Fraction of required drivers fully realized in the narrative.

    An item counts only if its feature name, numeric value (within 1%
    relative tolerance), and risk direction all appear, with the value and
    direction checked inside the sentences that mention the name. Items
    without a numeric value (latent or imputed drivers) skip the value check.
    """
    if not items.entries:
        raise ValueError("need at least one required driver")
    lex = lexicon or default_lexicon()
    text = narrative.raw if hasattr(narrative, "raw") else str(narrative)
    sentences = re.split(r"(?<=[.!?])\s+|\n", text)

    name_ok = value_ok = dir_ok = all_ok = 0
    for entry in items.entries:
        synonyms = list(lex.get(entry.feature_key or "", []))
        synonyms.append(entry.name)
        pats = [re.compile(r"(?<!\w)" + re.escape(s) + r"(?!\w)", re.IGNORECASE) for s in synonyms]
        hits = [sent for sent in sentences if any(p.search(sent) for p in pats)]
        has_name = bool(hits)
        scoped = " ".join(hits)

        has_value = True
        if entry.value is not None:
            has_value = False
            if entry.feature_key in BINARY_KB_FEATURES:
                scoped_low = scoped.lower()
                if entry.value >= 0.5:
                    has_value = ("in use" in scoped_low or "administered" in scoped_low) \
                        and "not in use" not in scoped_low
                else:
                    has_value = "not in use" in scoped_low or "no use" in scoped_low
            else:
                for token in _NUMBER_RE.findall(scoped):
                    num = float(token)
                    tol = 0.01 * max(abs(entry.value), 1e-9)
                    if abs(num - entry.value) <= tol:
                        has_value = True
                        break

        has_dir = False
        if entry.direction in _DIRECTION_WORDS:
            scoped_low = scoped.lower()
            opposite = RISK_DOWN if entry.direction == RISK_UP else RISK_UP
            match = any(w in scoped_low for w in _DIRECTION_WORDS[entry.direction])
            contradicted = any(w in scoped_low for w in _DIRECTION_WORDS[opposite])
            has_dir = match and not contradicted
        else:
            has_dir = has_name  # neutral drivers only need to be present

        name_ok += has_name
        value_ok += has_value
        dir_ok += has_dir
        all_ok += has_name and has_value and has_dir

    n = len(items.entries)
    return NarrativeCompleteness(
        score=all_ok / n, name_rate=name_ok / n,
        value_rate=value_ok / n, direction_rate=dir_ok / n,
    )


_CLAIM_SCORES = {"agreement": 1.0, "partial": 0.6, "neutral": 0.5, "contradiction": 0.0}


def score_claim(claim: Claim, kb: KnowledgeBase) -> float:
    """Grade one extracted claim against the knowledge base.

    agreement (1.0): asserted status matches the threshold classification
    and the asserted direction does not contradict the feature's risk
    direction; partial (0.6): status off by one severity tier; neutral
    (0.5): mention without an asserted status; contradiction (0.0):
    status or direction contradicts the knowledge base.
    """
    if claim.feature not in kb.entries:
        return _CLAIM_SCORES["neutral"]
    if claim.value is None or claim.status is None:
        return _CLAIM_SCORES["neutral"]
    true_status, _ = classify_feature_status(claim.feature, claim.value, kb)

    entry = kb.entries[claim.feature]
    if claim.direction is not None and true_status != "NORMAL":
        if claim.direction != entry.risk_direction:
            return _CLAIM_SCORES["contradiction"]

    if claim.status == true_status:
        return _CLAIM_SCORES["agreement"]
    tiers = ["NORMAL", "ABNORMAL", "SEVERE"]
    if abs(tiers.index(claim.status) - tiers.index(true_status)) == 1:
        if claim.status == "NORMAL" or true_status == "NORMAL":
            return _CLAIM_SCORES["contradiction"]
        return _CLAIM_SCORES["partial"]
    return _CLAIM_SCORES["contradiction"]


def clinical_plausibility(claims: Sequence[Claim], kb: KnowledgeBase) -> float:
    if not claims:
        raise NoClaims()
    return float(np.mean([score_claim(c, kb) for c in claims]))


def judge_scores(judge, narrative, context: str = "") -> dict[str, float]:
    """Human-aligned rubric scores from a judge client.

    Returns faithfulness, plausibility, usefulness, sensemaking, overall,
    and coherence when the judge provides it. overall defaults to the mean
    of the four core dimensions unless the judge supplies its own.
    """
    text = narrative.raw if hasattr(narrative, "raw") else str(narrative)
    raw = judge.score(text, context)
    dims = ("faithfulness", "plausibility", "usefulness", "sensemaking")
    out = {k: float(np.clip(raw[k], 0.0, 1.0)) for k in dims}
    if "overall" in raw:
        out["overall"] = float(np.clip(raw["overall"], 0.0, 1.0))
    else:
        out["overall"] = float(np.mean([out[k] for k in dims]))
    if "coherence" in raw:
        out["coherence"] = float(np.clip(raw["coherence"], 0.0, 1.0))
    return out


# --- aggregation ------------------------------------------------------------------

@dataclass
class MetricAggregate:
    mean: float
    sd: float
    ci_lo: float
    ci_hi: float
    n_runs: int


def aggregate(runs: Sequence[dict[str, float]], n_boot: int = 10_000,
              seed: int = 0) -> dict[str, MetricAggregate]:
    """Mean, sample SD, and percentile-bootstrap 95% CI per metric.

    Metrics absent from some runs aggregate over the runs that produced
    them; a metric needs at least two values.
    """
    if len(runs) < 2:
        raise TooFewRuns(len(runs))
    names: list[str] = []
    for run in runs:
        for key in run:
            if key not in names:
                names.append(key)

    report: dict[str, MetricAggregate] = {}
    for pos, name in enumerate(names):
        values = np.array([run[name] for run in runs if name in run], dtype=np.float64)
        if len(values) < 2:
            raise TooFewRuns(len(values))
        rng = np.random.default_rng([seed, pos])
        idx = rng.integers(0, len(values), size=(n_boot, len(values)))
        boot_means = values[idx].mean(axis=1)
        ci_lo, ci_hi = np.percentile(boot_means, [2.5, 97.5])
        report[name] = MetricAggregate(
            mean=float(values.mean()),
            sd=float(values.std(ddof=1)),
            ci_lo=float(ci_lo),
            ci_hi=float(ci_hi),
            n_runs=len(values),
        )
    return report

"""Synthetic ICU cohort generation and the feature-preparation pipeline.

The generator produces admission records whose marginals match a published
acute-heart-failure cohort profile (18 tabular features) and whose outcome
label carries three stacked signals:

  * a tabular signal: a logistic score over a weighted subset of features;
  * a branch signal: conditional on the label, admissions draw their extra
    ontology codes from a high-risk or low-risk branch pool with different
    mixing rates, which shifts the pooled concept-embedding vector;
  * a count signal: conditional on the label, the admission's whole code
    list is replicated m times. Normalized TF-IDF pooling is exactly
    invariant to whole-list replication, so this signal is invisible to the
    embedding configuration but linear in the ontology count columns.

Stacking the signals this way makes the three feature configurations
genuinely and increasingly informative: tabular < tabular+embeddings <
full neuro-symbolic.

Pipeline order is fixed: filter missingness -> split -> impute (fit on
train) -> assemble -> scale (fit on train). No statistic is ever computed
on validation rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embeddings import EmbeddingTable, WeightTable, pool_admission
from .errors import AllMissingFeature, ConfigMismatch, DataError, InvalidSpec
from .ontology import ConceptGraph, LevelMap, category_counts

SCHEMA_VERSION = 1

# Canonical tabular feature order; all matrices use it.
TABULAR_FEATURES = [
    "age",
    "wbc_min",
    "anion_gap_min",
    "anion_gap_max",
    "bun_min",
    "inr_min",
    "inr_max",
    "ptt_min",
    "urine_output",
    "heart_rate",
    "sbp",
    "dbp_min",
    "resp_rate",
    "spo2_min",
    "dobutamine",
    "dopamine",
    "norepinephrine",
    "phenylephrine",
]
BINARY_FEATURES = ["dobutamine", "dopamine", "norepinephrine", "phenylephrine"]

FEATURE_CONFIGS = ("TABULAR", "TABULAR_KG", "NEUROSYMBOLIC")
EMBEDDING_DIM_DEFAULT = 32


@dataclass
class AdmissionRecord:
    stay_id: str
    subject_id: str
    features: dict[str, Optional[float]]
    codes: list[str]
    label: Optional[int]
    notes: Optional[str] = None

    def missing_fraction(self) -> float:
        missing = sum(1 for f in TABULAR_FEATURES if self.features.get(f) is None)
        return missing / len(TABULAR_FEATURES)


@dataclass
class FeatureSpec:
    mean: float
    sd: float
    missing_rate: float = 0.0
    clip_lo: float = -math.inf
    clip_hi: float = math.inf


@dataclass
class SignalSpec:
    """Parameters of the injected outcome signal."""

    tabular_weights: dict[str, float]
    tabular_scale: float = 1.0
    base_codes: list[str] = field(default_factory=lambda: ["C1101", "C1102"])
    risk_pool: list[str] = field(default_factory=list)
    benign_pool: list[str] = field(default_factory=list)
    extra_codes_mean: float = 5.0
    tilt_beta_died: tuple[float, float] = (7.0, 3.0)
    tilt_beta_alive: tuple[float, float] = (3.0, 7.0)
    repeat_poisson_died: float = 3.0
    repeat_poisson_alive: float = 0.7
    no_code_rate: float = 0.02
    note_rate: float = 0.9


@dataclass
class CohortSpec:
    features: dict[str, FeatureSpec]
    n: int
    mortality_rate: float
    signal: SignalSpec

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidSpec("n", "must be >= 1")
        if not (0.0 < self.mortality_rate < 1.0):
            raise InvalidSpec("mortality_rate", "must be in (0, 1)")
        for name in TABULAR_FEATURES:
            if name not in self.features:
                raise InvalidSpec(name, "missing feature spec")
            fs = self.features[name]
            if not (0.0 <= fs.missing_rate < 0.9):
                raise InvalidSpec(name, "missing_rate must be in [0, 0.9)")
            if not (fs.clip_lo < fs.clip_hi):
                raise InvalidSpec(name, "clip_lo must be < clip_hi")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "mortality_rate": self.mortality_rate,
            "features": {k: asdict(v) for k, v in self.features.items()},
            "signal": asdict(self.signal),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "CohortSpec":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        sig = dict(payload["signal"])
        for key in ("tilt_beta_died", "tilt_beta_alive"):
            if key in sig:
                sig[key] = tuple(sig[key])
        spec = cls(
            features={k: FeatureSpec(**v) for k, v in payload["features"].items()},
            n=int(payload["n"]),
            mortality_rate=float(payload["mortality_rate"]),
            signal=SignalSpec(**sig),
        )
        spec.validate()
        return spec


def default_cohort_spec(n: int = 5000, mortality_rate: float = 0.146) -> CohortSpec:
    """Cohort profile calibrated to the published AHF baseline table.

    The systolic blood pressure row in that table carries a data-artifact SD
    (746.87); we use SD 15 with a physiological clip range instead.
    """
    f = {
        "age": FeatureSpec(71.32, 13.68, 0.0, 18, 100),
        "wbc_min": FeatureSpec(10.75, 7.44, 0.06, 0.1, 80),
        "anion_gap_min": FeatureSpec(13.67, 3.70, 0.06, 1, 45),
        "anion_gap_max": FeatureSpec(15.72, 4.47, 0.06, 1, 50),
        "bun_min": FeatureSpec(33.79, 23.56, 0.06, 1, 200),
        "inr_min": FeatureSpec(1.62, 1.00, 0.12, 0.5, 12),
        "inr_max": FeatureSpec(1.82, 1.31, 0.12, 0.5, 15),
        "ptt_min": FeatureSpec(36.52, 17.23, 0.12, 10, 150),
        "urine_output": FeatureSpec(3794.89, 6343.61, 0.08, 0, 30000),
        "heart_rate": FeatureSpec(84.07, 15.57, 0.03, 20, 220),
        "sbp": FeatureSpec(81.32, 15.0, 0.03, 40, 220),
        "dbp_min": FeatureSpec(44.22, 12.69, 0.03, 5, 140),
        "resp_rate": FeatureSpec(20.34, 6.20, 0.03, 4, 60),
        "spo2_min": FeatureSpec(90.38, 8.52, 0.03, 40, 100),
        "dobutamine": FeatureSpec(0.021, 0.0),
        "dopamine": FeatureSpec(0.050, 0.0),
        "norepinephrine": FeatureSpec(0.175, 0.0),
        "phenylephrine": FeatureSpec(0.169, 0.0),
    }
    signal = SignalSpec(
        tabular_weights={
            "age": 0.45,
            "wbc_min": 0.25,
            "anion_gap_max": 0.40,
            "bun_min": 0.55,
            "inr_max": 0.20,
            "urine_output": -0.30,
            "heart_rate": 0.20,
            "sbp": -0.35,
            "dbp_min": -0.20,
            "spo2_min": -0.50,
            "dobutamine": 0.30,
            "dopamine": 0.40,
            "norepinephrine": 0.60,
            "phenylephrine": 0.15,
        },
        tabular_scale=1.0,
        base_codes=["C1101", "C1102"],
        risk_pool=[
            "C1103", "C2101", "C2102", "C2103",
            "C3101", "C3102", "C3103", "C4102", "C6101",
        ],
        benign_pool=[
            "C1201", "C1202", "C1301", "C1302", "C2201", "C3201",
            "C4101", "C4201", "C4202", "C5101", "C5102",
            "C5201", "C5202", "C6102", "C6201", "C6202",
        ],
    )
    return CohortSpec(features=f, n=n, mortality_rate=mortality_rate, signal=signal)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _calibrate_intercept(scores: np.ndarray, target_rate: float) -> float:
    """Bisect the intercept so the mean sampled probability hits the target."""
    lo, hi = -20.0, 20.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(np.mean(_sigmoid(mid + scores))) < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_NOTE_TEMPLATES = [
    "ICU admission for decompensated heart failure. BUN {bun:.0f} mg/dL, "
    "SpO2 nadir {spo2:.0f}%. Problem list includes {problems}.",
    "Patient admitted with acute on chronic heart failure. Systolic pressure "
    "{sbp:.0f} mmHg, heart rate {hr:.0f} bpm. History notable for {problems}.",
    "Transfer for worsening dyspnea and fluid overload. Urine output "
    "{urine:.0f} mL. Active issues: {problems}.",
]


def generate_cohort(spec: CohortSpec, graph: ConceptGraph, seed: int) -> list[AdmissionRecord]:
    """Sample a labeled synthetic cohort; deterministic per seed.

    Feature values are clipped Gaussians (clipped Bernoullis for the drug
    flags). The outcome is drawn from a logistic model whose intercept is
    calibrated by bisection so the realized mortality rate matches the spec.
    Codes are drawn conditional on the label as described in the module
    docstring.
    """
    spec.validate()
    n = spec.n
    sig = spec.signal

    # pass 1: raw feature values, before missingness masking
    raw: list[dict[str, float]] = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0])
        values: dict[str, float] = {}
        for name in TABULAR_FEATURES:
            fs = spec.features[name]
            if name in BINARY_FEATURES:
                values[name] = float(rng.random() < fs.mean)
            else:
                values[name] = float(np.clip(rng.normal(fs.mean, fs.sd), fs.clip_lo, fs.clip_hi))
        raw.append(values)

    scores = np.zeros(n)
    for i, values in enumerate(raw):
        s = 0.0
        for name, w in sig.tabular_weights.items():
            fs = spec.features[name]
            if name in BINARY_FEATURES:
                s += w * (values[name] - fs.mean)
            else:
                s += w * (values[name] - fs.mean) / fs.sd
        scores[i] = sig.tabular_scale * s
    b0 = _calibrate_intercept(scores, spec.mortality_rate)

    records: list[AdmissionRecord] = []
    prev_subject = ""
    n_subjects = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i, 1])
        label = int(rng.random() < _sigmoid(np.array([b0 + scores[i]]))[0])

        if label == 1:
            a, b = sig.tilt_beta_died
            repeat_lambda = sig.repeat_poisson_died
        else:
            a, b = sig.tilt_beta_alive
            repeat_lambda = sig.repeat_poisson_alive
        tilt = float(rng.beta(a, b))
        m = 1 + int(rng.poisson(repeat_lambda))

        codes: list[str] = []
        if rng.random() >= sig.no_code_rate:
            codes.append(sig.base_codes[0])
            for extra_base in sig.base_codes[1:]:
                if rng.random() < 0.5:
                    codes.append(extra_base)
            n_extra = int(rng.poisson(sig.extra_codes_mean))
            for _ in range(n_extra):
                pool = sig.risk_pool if rng.random() < tilt else sig.benign_pool
                if pool:
                    codes.append(pool[int(rng.integers(len(pool)))])
            codes = codes * m

        values = dict(raw[i])
        notes: Optional[str] = None
        if rng.random() < sig.note_rate:
            distinct = sorted(set(codes))
            problems = ", ".join(
                graph.concepts.get(c, c).lower() for c in distinct[:3]
            ) or "heart failure"
            template = _NOTE_TEMPLATES[int(rng.integers(len(_NOTE_TEMPLATES)))]
            notes = template.format(
                bun=values["bun_min"],
                spo2=values["spo2_min"],
                sbp=values["sbp"],
                hr=values["heart_rate"],
                urine=values["urine_output"],
                problems=problems,
            )

        features: dict[str, Optional[float]] = {}
        for name in TABULAR_FEATURES:
            fs = spec.features[name]
            if fs.missing_rate > 0 and rng.random() < fs.missing_rate:
                features[name] = None
            else:
                features[name] = values[name]

        if i > 0 and rng.random() < 0.13:
            subject = prev_subject
        else:
            subject = f"SUBJ{n_subjects:06d}"
            n_subjects += 1
        prev_subject = subject

        records.append(
            AdmissionRecord(
                stay_id=f"ST{i:06d}",
                subject_id=subject,
                features=features,
                codes=codes,
                label=label,
                notes=notes,
            )
        )
    return records


# --- pipeline steps ----------------------------------------------------------

def filter_missingness(records: Sequence[AdmissionRecord], max_frac: float = 0.30) -> list[AdmissionRecord]:
    """Drop records missing their label or more than ``max_frac`` of predictors."""
    if not (0.0 <= max_frac <= 1.0):
        raise ValueError("max_frac must be in [0, 1]")
    kept = []
    for rec in records:
        if rec.label is None:
            continue
        if rec.missing_fraction() <= max_frac:
            kept.append(rec)
    return kept


def compute_medians(train: Sequence[AdmissionRecord]) -> dict[str, float]:
    """Per-feature imputation values fit on training records only.

    Continuous features use the median of observed values; binary drug
    features impute to 0 regardless.
    """
    medians: dict[str, float] = {}
    for name in TABULAR_FEATURES:
        if name in BINARY_FEATURES:
            medians[name] = 0.0
            continue
        observed = [rec.features.get(name) for rec in train]
        observed = [v for v in observed if v is not None]
        if not observed:
            raise AllMissingFeature(name)
        medians[name] = float(np.median(observed))
    return medians


def impute_median(
    train: Sequence[AdmissionRecord], apply_to: Sequence[AdmissionRecord]
) -> tuple[list[AdmissionRecord], list[AdmissionRecord]]:
    """Median imputation fit on ``train`` and applied to both record sets."""
    medians = compute_medians(train)

    def fill(recs: Sequence[AdmissionRecord]) -> list[AdmissionRecord]:
        out = []
        for rec in recs:
            feats = {
                name: (medians[name] if rec.features.get(name) is None else rec.features[name])
                for name in TABULAR_FEATURES
            }
            out.append(
                AdmissionRecord(
                    stay_id=rec.stay_id,
                    subject_id=rec.subject_id,
                    features=feats,
                    codes=list(rec.codes),
                    label=rec.label,
                    notes=rec.notes,
                )
            )
        return out

    return fill(train), fill(apply_to)


def split(
    records: Sequence[AdmissionRecord],
    mode: str = "STAY",
    val_frac: float = 0.30,
    seed: int = 0,
) -> tuple[list[AdmissionRecord], list[AdmissionRecord]]:
    """Deterministic train/validation partition.

    STAY randomizes stays directly; SUBJECT keeps all stays of one subject on
    the same side.
    """
    if not (0.0 < val_frac < 1.0):
        raise ValueError("val_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_val = int(math.floor(val_frac * len(records)))
    if mode == "STAY":
        order = rng.permutation(len(records))
        val_idx = set(order[:n_val].tolist())
        train = [rec for i, rec in enumerate(records) if i not in val_idx]
        val = [rec for i, rec in enumerate(records) if i in val_idx]
        return train, val
    if mode == "SUBJECT":
        subjects = sorted({rec.subject_id for rec in records})
        order = rng.permutation(len(subjects))
        by_subject: dict[str, list[AdmissionRecord]] = {s: [] for s in subjects}
        for rec in records:
            by_subject[rec.subject_id].append(rec)
        val_subjects: set[str] = set()
        count = 0
        for idx in order:
            if count >= n_val:
                break
            subj = subjects[idx]
            val_subjects.add(subj)
            count += len(by_subject[subj])
        train = [rec for rec in records if rec.subject_id not in val_subjects]
        val = [rec for rec in records if rec.subject_id in val_subjects]
        return train, val
    raise ValueError(f"unknown split mode {mode!r}")


# --- feature matrices ----------------------------------------------------------

@dataclass
class FeatureLayout:
    """Block structure of a feature matrix's columns."""

    tabular: list[str]
    n_embedding: int
    ontology: list[tuple[str, str]]  # (anchor id, anchor term)

    @property
    def width(self) -> int:
        return len(self.tabular) + self.n_embedding + len(self.ontology)

    def column_names(self) -> list[str]:
        cols = list(self.tabular)
        cols += [f"emb_{i:02d}" for i in range(self.n_embedding)]
        cols += [f"cnt_{aid}" for aid, _ in self.ontology]
        return cols


@dataclass
class FeatureMatrix:
    stay_ids: list[str]
    columns: list[str]
    values: np.ndarray
    config: str
    layout: FeatureLayout


def assemble_features(
    records: Sequence[AdmissionRecord],
    config: str,
    emb: Optional[EmbeddingTable] = None,
    weights: Optional[WeightTable] = None,
    levels: Optional[LevelMap] = None,
    graph: Optional[ConceptGraph] = None,
) -> FeatureMatrix:
    """Build the feature matrix for one configuration.

    TABULAR uses the 18 tabular columns; TABULAR_KG appends the pooled
    embedding block; NEUROSYMBOLIC appends ontology anchor counts as well.
    Records without codes get zero-filled embedding and count blocks.
    """
    if config not in FEATURE_CONFIGS:
        raise ConfigMismatch(f"unknown feature configuration {config!r}")
    needs_kg = config in ("TABULAR_KG", "NEUROSYMBOLIC")
    if needs_kg and (emb is None or weights is None):
        raise ConfigMismatch(f"{config} requires an embedding table and IDF weights")
    if config == "NEUROSYMBOLIC" and (levels is None or graph is None):
        raise ConfigMismatch("NEUROSYMBOLIC requires the concept graph and level map")

    n_embedding = emb.dim if needs_kg else 0
    ontology: list[tuple[str, str]] = []
    if config == "NEUROSYMBOLIC":
        assert levels is not None and graph is not None
        ontology = [(aid, graph.concepts[aid]) for aid in levels.anchor_ids()]
    layout = FeatureLayout(tabular=list(TABULAR_FEATURES), n_embedding=n_embedding, ontology=ontology)

    rows = np.zeros((len(records), layout.width))
    for r, rec in enumerate(records):
        for c, name in enumerate(TABULAR_FEATURES):
            value = rec.features.get(name)
            if value is None:
                raise DataError(f"record {rec.stay_id} not imputed: {name} is missing")
            rows[r, c] = value
        if needs_kg:
            assert emb is not None and weights is not None
            rows[r, 18 : 18 + n_embedding] = pool_admission(rec.codes, emb, weights)
        if config == "NEUROSYMBOLIC":
            assert levels is not None and graph is not None
            counts = category_counts(graph, levels, rec.codes, rec.stay_id)
            for k, (aid, _) in enumerate(ontology):
                rows[r, 18 + n_embedding + k] = counts.counts[aid]

    return FeatureMatrix(
        stay_ids=[rec.stay_id for rec in records],
        columns=layout.column_names(),
        values=rows,
        config=config,
        layout=layout,
    )


@dataclass
class ScalerParams:
    mode: str
    center: np.ndarray
    scale: np.ndarray
    constant: np.ndarray  # bool mask of train-constant columns (MINMAX zeroes them)


def scale(
    matrix: FeatureMatrix, mode: str = "ZSCORE", fit_rows: Optional[np.ndarray] = None
) -> tuple[FeatureMatrix, ScalerParams]:
    """Column scaling with statistics fit on ``fit_rows`` (default: all rows)."""
    if mode not in ("ZSCORE", "MINMAX", "NONE"):
        raise ValueError(f"unknown scaling mode {mode!r}")
    fit = matrix.values if fit_rows is None else matrix.values[fit_rows]
    if mode == "NONE":
        params = ScalerParams(
            mode=mode,
            center=np.zeros(matrix.values.shape[1]),
            scale=np.ones(matrix.values.shape[1]),
            constant=np.zeros(matrix.values.shape[1], dtype=bool),
        )
        return matrix, params
    if mode == "ZSCORE":
        center = fit.mean(axis=0)
        sd = fit.std(axis=0, ddof=0)
        constant = sd == 0.0
        sd = np.where(constant, 1.0, sd)
        params = ScalerParams(mode=mode, center=center, scale=sd, constant=constant)
    else:  # MINMAX
        lo = fit.min(axis=0)
        hi = fit.max(axis=0)
        constant = hi == lo
        span = np.where(constant, 1.0, hi - lo)
        params = ScalerParams(mode=mode, center=lo, scale=span, constant=constant)
    return apply_scaler(matrix, params), params


def apply_scaler(matrix: FeatureMatrix, params: ScalerParams) -> FeatureMatrix:
    if params.mode == "NONE":
        return matrix
    out = (matrix.values - params.center) / params.scale
    if params.mode == "MINMAX" and params.constant.any():
        out[:, params.constant] = 0.0
    return FeatureMatrix(
        stay_ids=list(matrix.stay_ids),
        columns=list(matrix.columns),
        values=out,
        config=matrix.config,
        layout=matrix.layout,
    )


# --- record serialization ------------------------------------------------------

def save_admissions_jsonl(records: Sequence[AdmissionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = {
                "schema_version": SCHEMA_VERSION,
                "stay_id": rec.stay_id,
                "subject_id": rec.subject_id,
                "features": rec.features,
                "codes": rec.codes,
                "label": rec.label,
                "notes": rec.notes,
            }
            fh.write(json.dumps(payload, sort_keys=True) + "\n")


def load_admissions_jsonl(path: str | Path) -> list[AdmissionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            if payload.get("schema_version") != SCHEMA_VERSION:
                raise DataError(
                    f"{path}:{line_no}: unsupported schema_version {payload.get('schema_version')!r}"
                )
            records.append(
                AdmissionRecord(
                    stay_id=payload["stay_id"],
                    subject_id=payload["subject_id"],
                    features={k: (None if v is None else float(v)) for k, v in payload["features"].items()},
                    codes=list(payload["codes"]),
                    label=None if payload["label"] is None else int(payload["label"]),
                    notes=payload.get("notes"),
                )
            )
    return records

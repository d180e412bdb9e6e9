"""Shapley-value feature attribution and driver post-processing.

``exact_shapley`` enumerates all 2^d coalitions, where a coalition keeps its
features at the observed values and masks the rest to the baseline vector.
It is the exact oracle for every other attribution path and is guarded at
d <= 20. ``kernel_shap`` solves the weighted least-squares formulation over
sampled coalitions; when the sample budget covers every coalition it
reproduces the exact values.

Post-processing mirrors how attributions feed the narrative layer: the
embedding block collapses into a single latent entry, ontology count
columns group under their anchor names, and the top drivers are emitted as
machine-checkable ``DRIVER:<name>:<UP|DOWN>`` tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cohort import FeatureLayout
from .errors import LayoutMismatch, SingularSystem, TooManyFeatures

SPACE_LOGIT = "LOGIT"
SPACE_PROB = "PROB"

GROUP_TABULAR = "TABULAR"
GROUP_ONTOLOGY = "ONTOLOGY"
GROUP_EMBEDDING = "EMBEDDING"

RISK_UP = "RISK_UP"
RISK_DOWN = "RISK_DOWN"
NEUTRAL = "NEUTRAL"

_EXACT_LIMIT = 20
_mask_cache: dict[int, np.ndarray] = {}


@dataclass
class AttributionVector:
    """Baseline output, per-feature contributions, and the explained output."""

    phi0: float
    phi: np.ndarray
    fx: float
    space: str = SPACE_LOGIT
    column_names: Optional[list[str]] = None

    def to_json(self, path: str | Path) -> None:
        payload = {
            "phi0": self.phi0,
            "phi": [float(v) for v in self.phi],
            "fx": self.fx,
            "space": self.space,
            "column_names": self.column_names,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "AttributionVector":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            phi0=float(payload["phi0"]),
            phi=np.array(payload["phi"], dtype=np.float64),
            fx=float(payload["fx"]),
            space=payload["space"],
            column_names=payload.get("column_names"),
        )


def _value_fn(model, space: str) -> Callable[[np.ndarray], np.ndarray]:
    """Adapt a Predictor or a plain batch callable to a coalition value function."""
    if hasattr(model, "predict_logit"):
        if space == SPACE_LOGIT:
            return lambda X: np.asarray(model.predict_logit(X), dtype=np.float64)
        return lambda X: np.asarray(model.predict_proba(X), dtype=np.float64)
    if callable(model):
        return lambda X: np.asarray(model(X), dtype=np.float64).reshape(-1)
    raise TypeError("model must be a Predictor or a callable over 2D arrays")


def _coalition_masks(d: int) -> np.ndarray:
    """All 2^d keep-masks as a cached (2^d, d) boolean array; bit j of the row
    index says whether feature j keeps its observed value."""
    if d not in _mask_cache:
        idx = np.arange(1 << d, dtype=np.int64)
        _mask_cache[d] = ((idx[:, None] >> np.arange(d)) & 1).astype(bool)
    return _mask_cache[d]


def exact_shapley(model, x: Sequence[float], baseline: Sequence[float],
                  space: str = SPACE_LOGIT,
                  column_names: Optional[list[str]] = None) -> AttributionVector:
    """Exact Shapley values by full coalition enumeration.

    phi_j = sum over coalitions S not containing j of
            |S|! (d - |S| - 1)! / d!  *  (v(S + j) - v(S))

    where v(S) evaluates the model at x with the complement of S masked to
    the baseline. Satisfies efficiency exactly: phi0 + sum(phi) == f(x).
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    d = len(x)
    if d > _EXACT_LIMIT:
        raise TooManyFeatures(d, _EXACT_LIMIT)
    f = _value_fn(model, space)

    masks = _coalition_masks(d)
    X_eval = np.where(masks, x, baseline)
    v = f(X_eval)
    sizes = masks.sum(axis=1)

    fact = [math.factorial(k) for k in range(d + 1)]
    w = np.array([fact[s] * fact[d - s - 1] / fact[d] for s in range(d)])

    phi = np.zeros(d)
    all_idx = np.arange(1 << d, dtype=np.int64)
    for j in range(d):
        without = all_idx[~masks[:, j]]
        phi[j] = np.sum(w[sizes[without]] * (v[without + (1 << j)] - v[without]))

    return AttributionVector(
        phi0=float(v[0]), phi=phi, fx=float(v[-1]), space=space, column_names=column_names
    )


def _kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (math.comb(d, s) * s * (d - s))


def kernel_shap(model, x: Sequence[float], baseline: Sequence[float],
                n_samples: int = 2048, seed: int = 0, space: str = SPACE_LOGIT,
                column_names: Optional[list[str]] = None) -> AttributionVector:
    """KernelSHAP: weighted least squares over coalitions with the Shapley kernel.

    The empty and full coalitions are always evaluated deterministically;
    they pin phi0 and the efficiency constraint phi0 + sum(phi) = f(x),
    which is enforced by eliminating the last coefficient. When
    ``n_samples`` covers all 2^d - 2 proper coalitions, the solution equals
    the exact Shapley values; otherwise coalition sizes are drawn from the
    kernel's size distribution and members uniformly within a size.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    d = len(x)
    if d < 2:
        raise ValueError("kernel_shap needs at least 2 features")
    if n_samples < 2 * d + 2:
        raise ValueError(f"n_samples must be >= 2d + 2 = {2 * d + 2}")
    f = _value_fn(model, space)

    phi0 = float(f(baseline[None, :])[0])
    fx = float(f(x[None, :])[0])
    total = fx - phi0

    if n_samples >= (1 << d) - 2:
        masks = _coalition_masks(d)
        sizes = masks.sum(axis=1)
        proper = (sizes > 0) & (sizes < d)
        Z = masks[proper].astype(np.float64)
        weights = np.array([_kernel_weight(d, int(s)) for s in sizes[proper]])
    else:
        rng = np.random.default_rng(seed)
        size_probs = np.array([_kernel_weight(d, s) * math.comb(d, s) for s in range(1, d)])
        size_probs = size_probs / size_probs.sum()
        sizes = rng.choice(np.arange(1, d), size=n_samples, p=size_probs)
        Z = np.zeros((n_samples, d))
        for i, s in enumerate(sizes):
            cols = rng.permutation(d)[:s]
            Z[i, cols] = 1.0
        weights = np.ones(n_samples)

    X_eval = np.where(Z.astype(bool), x, baseline)
    y = f(X_eval) - phi0

    # eliminate the last coefficient using the efficiency constraint
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * total
    aw = A * weights[:, None]
    lhs = aw.T @ A
    rhs = aw.T @ b
    try:
        beta = np.linalg.solve(lhs, rhs)
        if not np.all(np.isfinite(beta)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        try:
            beta = np.linalg.solve(lhs + 1e-6 * np.eye(d - 1), rhs)
            if not np.all(np.isfinite(beta)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError as exc:
            raise SingularSystem() from exc

    phi = np.empty(d)
    phi[:-1] = beta
    phi[-1] = total - beta.sum()
    return AttributionVector(phi0=phi0, phi=phi, fx=fx, space=space, column_names=column_names)


# --- grouping and driver ranking ------------------------------------------------

@dataclass
class GroupEntry:
    group: str            # TABULAR | ONTOLOGY | EMBEDDING
    name: str
    phi: float
    value: Optional[float]
    direction: str        # RISK_UP | RISK_DOWN | NEUTRAL
    column_index: int
    feature_key: Optional[str] = None  # canonical tabular feature name, if any


@dataclass
class GroupedAttribution:
    entries: list[GroupEntry]
    phi0: float
    fx: float


def _direction(phi: float) -> str:
    if phi > 0:
        return RISK_UP
    if phi < 0:
        return RISK_DOWN
    return NEUTRAL


def collapse_and_group(attr: AttributionVector, layout: FeatureLayout,
                       x: Optional[Sequence[float]] = None) -> GroupedAttribution:
    """Collapse embedding dims into one latent entry and group the rest.

    Entries are sorted by |phi| descending with ties broken by the original
    column index, so the ordering is stable and reproducible.
    """
    if layout.width != len(attr.phi):
        raise LayoutMismatch(layout.width, len(attr.phi))
    values = None if x is None else np.asarray(x, dtype=np.float64)

    entries: list[GroupEntry] = []
    n_tab = len(layout.tabular)
    for i, name in enumerate(layout.tabular):
        phi = float(attr.phi[i])
        entries.append(GroupEntry(
            group=GROUP_TABULAR, name=name, phi=phi,
            value=None if values is None else float(values[i]),
            direction=_direction(phi), column_index=i, feature_key=name,
        ))
    if layout.n_embedding > 0:
        phi = float(attr.phi[n_tab : n_tab + layout.n_embedding].sum())
        entries.append(GroupEntry(
            group=GROUP_EMBEDDING, name="knowledge graph embedding", phi=phi,
            value=None, direction=_direction(phi), column_index=n_tab,
        ))
    base = n_tab + layout.n_embedding
    for k, (aid, term) in enumerate(layout.ontology):
        phi = float(attr.phi[base + k])
        entries.append(GroupEntry(
            group=GROUP_ONTOLOGY, name=term, phi=phi,
            value=None if values is None else float(values[base + k]),
            direction=_direction(phi), column_index=base + k,
        ))

    entries.sort(key=lambda e: (-abs(e.phi), e.column_index))
    return GroupedAttribution(entries=entries, phi0=attr.phi0, fx=attr.fx)


@dataclass
class DriverList:
    entries: list[GroupEntry]
    tokens: list[str] = field(default_factory=list)


def rank_drivers(grouped: GroupedAttribution, k: int = 5) -> DriverList:
    """Top-k entries by attribution magnitude, with coverage-check tokens."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = grouped.entries[:k]
    tokens = []
    for e in top:
        word = {RISK_UP: "UP", RISK_DOWN: "DOWN", NEUTRAL: "NEUTRAL"}[e.direction]
        tokens.append(f"DRIVER:{e.name}:{word}")
    return DriverList(entries=top, tokens=tokens)

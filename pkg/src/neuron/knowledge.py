"""Curated clinical knowledge base: thresholds, interpretation, and lexicon.

Each of the 18 tabular features carries its unit, a typical normal range,
ordered severity thresholds with literature citation keys, and the risk
direction its abnormal state implies. ``classify_feature_status`` applies
the thresholds with a most-severe-wins rule; binary drug flags classify as
abnormal when in use.

The lexicon maps each canonical feature name to the synonyms accepted by
mention extraction. Min/max variants of the same lab deliberately get
disjoint synonym sets so a mention can always be attributed to exactly one
feature.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

from .errors import UnknownFeature

_DATA_DIR = Path(__file__).parent / "data"
KNOWLEDGE_BASE_FILE = _DATA_DIR / "knowledge_base.json"
LEXICON_FILE = _DATA_DIR / "lexicon.json"

STATUS_NORMAL = "NORMAL"
STATUS_ABNORMAL = "ABNORMAL"
STATUS_SEVERE = "SEVERE"

DEVIATION_HIGH = "HIGH"
DEVIATION_LOW = "LOW"
DEVIATION_NONE = "NONE"

_SEVERITY_RANK = {STATUS_ABNORMAL: 1, STATUS_SEVERE: 2}

DISPLAY_NAMES = {
    "age": "Age",
    "wbc_min": "WBC (min)",
    "anion_gap_min": "Anion gap (min)",
    "anion_gap_max": "Anion gap (max)",
    "bun_min": "BUN (min)",
    "inr_min": "INR (min)",
    "inr_max": "INR (max)",
    "ptt_min": "PTT (min)",
    "urine_output": "Urine output",
    "heart_rate": "Heart rate",
    "sbp": "SBP",
    "dbp_min": "DBP (min)",
    "resp_rate": "Respiratory rate",
    "spo2_min": "SpO2 (min)",
    "dobutamine": "Dobutamine",
    "dopamine": "Dopamine",
    "norepinephrine": "Norepinephrine",
    "phenylephrine": "Phenylephrine",
}

BINARY_KB_FEATURES = {"dobutamine", "dopamine", "norepinephrine", "phenylephrine"}


@dataclass(frozen=True)
class Threshold:
    op: str        # one of <, <=, >, >=, ==
    value: float
    severity: str  # ABNORMAL | SEVERE

    def holds(self, value: float) -> bool:
        if self.op == "<":
            return value < self.value
        if self.op == "<=":
            return value <= self.value
        if self.op == ">":
            return value > self.value
        if self.op == ">=":
            return value >= self.value
        if self.op == "==":
            return value == self.value
        raise ValueError(f"unknown comparator {self.op!r}")

    @property
    def deviation(self) -> str:
        return DEVIATION_LOW if self.op in ("<", "<=") else DEVIATION_HIGH


@dataclass
class KbEntry:
    feature: str
    unit: str
    normal_range: tuple[float, float]
    thresholds: list[Threshold]
    risk_direction: str  # RISK_UP | RISK_DOWN when the abnormal state holds
    note: str
    source: str


@dataclass
class KnowledgeBase:
    entries: dict[str, KbEntry]

    def __contains__(self, feature: str) -> bool:
        return feature in self.entries


def load_knowledge_base(path: str | Path = KNOWLEDGE_BASE_FILE) -> KnowledgeBase:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    entries = {}
    for item in payload:
        entries[item["feature"]] = KbEntry(
            feature=item["feature"],
            unit=item["unit"],
            normal_range=tuple(item["normal_range"]),
            thresholds=[Threshold(t["op"], float(t["value"]), t["severity"]) for t in item["thresholds"]],
            risk_direction=item["risk_direction"],
            note=item["note"],
            source=item["source"],
        )
    return KnowledgeBase(entries=entries)


@lru_cache(maxsize=1)
def default_knowledge_base() -> KnowledgeBase:
    return load_knowledge_base()


def classify_feature_status(name: str, value: float, kb: KnowledgeBase) -> tuple[str, str]:
    """Status of one observed value: (NORMAL|ABNORMAL|SEVERE, HIGH|LOW|NONE).

    The most severe satisfied threshold wins; the deviation side comes from
    that threshold's comparator.
    """
    if name not in kb.entries:
        raise UnknownFeature(name)
    best: Optional[Threshold] = None
    for t in kb.entries[name].thresholds:
        if t.holds(value):
            if best is None or _SEVERITY_RANK[t.severity] > _SEVERITY_RANK[best.severity]:
                best = t
    if best is None:
        return STATUS_NORMAL, DEVIATION_NONE
    return best.severity, best.deviation


@lru_cache(maxsize=1)
def default_lexicon() -> dict[str, list[str]]:
    with open(LEXICON_FILE, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _synonym_pattern(synonym: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(synonym) + r"(?!\w)", re.IGNORECASE)


@lru_cache(maxsize=4)
def _compiled_lexicon(lexicon_key: str = "default") -> dict[str, list[re.Pattern]]:
    lex = default_lexicon()
    return {feat: [_synonym_pattern(s) for s in syns] for feat, syns in lex.items()}


# --- claim extraction -----------------------------------------------------------

@dataclass
class Claim:
    feature: str
    value: Optional[float]
    status: Optional[str]     # NORMAL | ABNORMAL | SEVERE, None = no assertion
    direction: Optional[str]  # RISK_UP | RISK_DOWN, None = no assertion
    sentence: str = ""


# numbers must not start inside a word, so the digit in "SpO2" never counts
_NUMBER_RE = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?")

_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+|\n")

_STATUS_PATTERNS = [
    (STATUS_SEVERE, re.compile(r"severe|critical", re.IGNORECASE)),
    (STATUS_ABNORMAL, re.compile(
        r"abnormal|elevated|raised|reduced|prolonged|(?<![\w])low(?![\w])|(?<![\w])high(?![\w])",
        re.IGNORECASE)),
    (STATUS_NORMAL, re.compile(
        r"within typical range|within normal|(?<![\w])normal(?![\w])|reassuring|unremarkable",
        re.IGNORECASE)),
]

_DIR_UP_WORDS = ("increases predicted risk", "raises risk", "increases risk", "higher risk")
_DIR_DOWN_WORDS = ("decreases predicted risk", "lowers risk", "reduces risk", "lower risk", "protective")


def extract_claims(text: str, kb: KnowledgeBase,
                   lexicon: Optional[dict[str, list[str]]] = None) -> list[Claim]:
    """Deterministic claim extraction by pattern matching over sentences.

    A claim is one sentence that names a knowledge-base feature; the
    asserted status, value, and risk direction are read from keyword and
    number patterns in that sentence.
    """
    lex = lexicon or default_lexicon()
    patterns = {feat: [_synonym_pattern(s) for s in syns] for feat, syns in lex.items()}
    claims: list[Claim] = []
    for sentence in _SENTENCE_SPLIT_RE.split(text):
        low = sentence.lower()
        if not low.strip():
            continue
        for feature in lex:
            if feature not in kb.entries:
                continue
            if not any(p.search(sentence) for p in patterns[feature]):
                continue

            status: Optional[str] = None
            for candidate, pattern in _STATUS_PATTERNS:
                if pattern.search(sentence):
                    status = candidate
                    break

            value: Optional[float] = None
            if feature in BINARY_KB_FEATURES:
                if "not in use" in low or "no use" in low:
                    value, status = 0.0, STATUS_NORMAL
                elif "in use" in low or "administered" in low:
                    value, status = 1.0, STATUS_ABNORMAL
            else:
                nums = _NUMBER_RE.findall(sentence)
                if nums:
                    value = float(nums[0])

            direction: Optional[str] = None
            if any(w in low for w in _DIR_UP_WORDS):
                direction = "RISK_UP"
            elif any(w in low for w in _DIR_DOWN_WORDS):
                direction = "RISK_DOWN"

            claims.append(Claim(feature=feature, value=value, status=status,
                                direction=direction, sentence=sentence.strip()))
    return claims

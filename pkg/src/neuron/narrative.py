"""Retrieval-grounded narrative assembly and LLM clients.

The prompt carries five evidence sections (ranked drivers, tabular values,
ontology evidence, knowledge-base excerpts, patient notes), each sanitized
and clipped to a character budget, under a fixed global-rules block loaded
from the bundled template. The driver section is rendered fully
deterministically and doubles as the attribution-side narrative when the
two explanation modalities are compared.

Clients speak a chat-completions JSON shape over HTTP; a deterministic
stub client and judge keep the whole pipeline runnable offline.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import requests

from .attribution import DriverList, GROUP_EMBEDDING, GROUP_ONTOLOGY, NEUTRAL, RISK_DOWN, RISK_UP
from .cohort import TABULAR_FEATURES
from .errors import (
    ClientTimeout,
    JudgeUnavailable,
    MalformedJudgeResponse,
    MalformedResponse,
    SectionParseFailure,
)
from .knowledge import (
    BINARY_KB_FEATURES,
    DEVIATION_HIGH,
    DISPLAY_NAMES,
    KnowledgeBase,
    STATUS_ABNORMAL,
    STATUS_NORMAL,
    STATUS_SEVERE,
    classify_feature_status,
    default_lexicon,
)

_DATA_DIR = Path(__file__).parent / "data"
PROMPT_TEMPLATE_FILE = _DATA_DIR / "prompt_template.txt"

# tokens that must never survive sanitization, plus model-mechanics vocabulary
FORBIDDEN_TOKENS = ("SHAP", "attribution", "coefficient")
MECHANICS_TOKENS = ("Shapley", "logit", "log-odds", "kernel", "gradient", "hyperparameter")

TRUNCATION_MARKER = "...[truncated]"

DEFAULT_BUDGETS = {"A": 1200, "B": 1200, "C": 1500, "D": 1500, "E": 1200}

_DIRECTION_PHRASES = {
    RISK_UP: "increases predicted risk",
    RISK_DOWN: "decreases predicted risk",
    NEUTRAL: "no net effect on predicted risk",
}


def sanitize_text(text: str) -> tuple[str, bool]:
    """Remove forbidden and mechanics tokens, iterating to a fixed point.

    Single-pass removal can splice fragments into a new forbidden token, so
    substitution repeats until no pattern matches anywhere.
    """
    patterns = [
        re.compile(re.escape(tok), re.IGNORECASE)
        for tok in FORBIDDEN_TOKENS + MECHANICS_TOKENS
    ]
    changed = False
    while True:
        hit = False
        for pattern in patterns:
            text, n = pattern.subn("", text)
            if n:
                hit = True
                changed = True
        if not hit:
            return text, changed


def clip_text(text: str, budget: int) -> str:
    """Clip to ``budget`` characters at a word boundary with a marker."""
    if budget < 1:
        raise ValueError("budget must be positive")
    if len(text) <= budget:
        return text
    room = budget - len(TRUNCATION_MARKER) - 1
    if room <= 0:
        return TRUNCATION_MARKER[:budget]
    head = text[: room + 1]
    cut = head.rfind(" ")
    if cut <= 0:
        cut = room
    return head[:cut].rstrip() + " " + TRUNCATION_MARKER


@dataclass
class Prompt:
    sections: dict[str, str]          # keys A-E
    budgets: dict[str, int]
    sanitized: bool
    template: str

    def render(self) -> str:
        return self.template.format(
            section_a=self.sections["A"],
            section_b=self.sections["B"],
            section_c=self.sections["C"],
            section_d=self.sections["D"],
            section_e=self.sections["E"],
        )


def assemble_prompt(
    driver_text: str,
    tabular_text: str,
    ontology_evidence: str,
    kb_text: str,
    notes_text: str,
    budgets: Optional[dict[str, int]] = None,
    template_path: str | Path = PROMPT_TEMPLATE_FILE,
) -> Prompt:
    """Sanitize, clip, and mount the five evidence sections on the template."""
    budgets = dict(budgets or DEFAULT_BUDGETS)
    for key, value in budgets.items():
        if value < 1:
            raise ValueError(f"budget for section {key} must be positive")
    raw_sections = {
        "A": driver_text, "B": tabular_text, "C": ontology_evidence,
        "D": kb_text, "E": notes_text,
    }
    sections: dict[str, str] = {}
    sanitized = False
    for key, text in raw_sections.items():
        clean, changed = sanitize_text(text or "")
        sanitized = sanitized or changed
        clean = clean.strip()
        if not clean:
            clean = "(no evidence available)"
        sections[key] = clip_text(clean, budgets[key])
    with open(template_path, "r", encoding="utf-8") as fh:
        template = fh.read()
    return Prompt(sections=sections, budgets=budgets, sanitized=sanitized, template=template)


# --- deterministic evidence renderers ---------------------------------------------

def _format_value(feature: str, value: float, unit: str) -> str:
    if feature in BINARY_KB_FEATURES:
        return "in use" if value >= 0.5 else "not in use"
    return f"{value:.4g} {unit}".strip()


def _status_phrase(feature: str, value: float, kb: KnowledgeBase) -> str:
    status, deviation = classify_feature_status(feature, value, kb)
    if feature in BINARY_KB_FEATURES:
        return "abnormal" if status != STATUS_NORMAL else "within typical range"
    if status == STATUS_NORMAL:
        return "within typical range"
    side = "elevated" if deviation == DEVIATION_HIGH else "reduced"
    if status == STATUS_SEVERE:
        return f"severely {side} (severe)"
    return f"{side} (abnormal)"


def build_driver_section(drivers: DriverList, features: dict, kb: KnowledgeBase) -> str:
    """Render ranked drivers as deterministic text, one line per driver.

    ``features`` maps canonical tabular names to raw imputed values and
    ontology anchor terms to their category counts. Byte-identical for
    identical inputs.
    """
    if not drivers.entries:
        raise ValueError("driver list is empty")
    lines = ["Key drivers of the predicted risk:"]
    for entry in drivers.entries:
        phrase = _DIRECTION_PHRASES[entry.direction]
        if entry.group == GROUP_EMBEDDING:
            lines.append(f"- Knowledge graph embedding (latent profile of mapped concepts); {phrase}")
            continue
        if entry.group == GROUP_ONTOLOGY:
            count = features.get(entry.name)
            count_text = "several" if count is None else f"{count:g}"
            lines.append(f"- Ontology category '{entry.name}': {count_text} mapped codes; {phrase}")
            continue
        name = entry.feature_key or entry.name
        display = DISPLAY_NAMES.get(name, entry.name)
        value = features.get(name)
        if value is None:
            lines.append(f"- {display}: value unavailable (imputed); {phrase}")
            continue
        unit = kb.entries[name].unit if name in kb.entries else ""
        value_text = _format_value(name, float(value), unit)
        status_text = _status_phrase(name, float(value), kb)
        lines.append(f"- {display}: {value_text}, {status_text}; {phrase}")
    return "\n".join(lines)


def build_tabular_section(features: dict, kb: KnowledgeBase) -> str:
    lines = []
    for name in TABULAR_FEATURES:
        value = features.get(name)
        display = DISPLAY_NAMES.get(name, name)
        if value is None:
            lines.append(f"{display}: unavailable (imputed)")
            continue
        unit = kb.entries[name].unit if name in kb.entries else ""
        lines.append(f"{display}: {_format_value(name, float(value), unit)}, "
                     f"{_status_phrase(name, float(value), kb)}")
    return "\n".join(lines)


def build_kb_section(feature_names: Sequence[str], kb: KnowledgeBase) -> str:
    lines = []
    for name in feature_names:
        entry = kb.entries.get(name)
        if entry is None:
            continue
        lo, hi = entry.normal_range
        thresholds = "; ".join(f"{t.op}{t.value:g} {t.severity.lower()}" for t in entry.thresholds)
        lines.append(
            f"{DISPLAY_NAMES.get(name, name)} [{entry.unit}] typical {lo:g}-{hi:g}; "
            f"thresholds: {thresholds}. {entry.note}"
        )
    return "\n".join(lines)


# --- narrative bundle ----------------------------------------------------------------

@dataclass
class NarrativeBundle:
    raw: str
    sections: dict[str, str]
    mention_vector: np.ndarray
    driver_tokens_covered: set[str] = field(default_factory=set)


def extract_feature_mentions(text: str, lexicon: Optional[dict[str, list[str]]] = None) -> np.ndarray:
    """Binary mention vector over the 18 tabular features.

    Synonym matching is case-insensitive and word-boundary aware, so a
    phrase like "heart failure" never triggers the heart-rate feature.
    """
    lex = lexicon or default_lexicon()
    missing = [f for f in TABULAR_FEATURES if f not in lex]
    if missing:
        raise ValueError(f"lexicon missing features: {missing}")
    out = np.zeros(len(TABULAR_FEATURES), dtype=np.int8)
    for i, feature in enumerate(TABULAR_FEATURES):
        for synonym in lex[feature]:
            pattern = re.compile(r"(?<!\w)" + re.escape(synonym) + r"(?!\w)", re.IGNORECASE)
            if pattern.search(text):
                out[i] = 1
                break
    return out


_SECTION_HEAD_RE = re.compile(r"(?m)^([A-E])\)\s*[^\n]*:\s*$")
_INTEGRATION_RE = re.compile(r"(?mi)^integrated interpretation\s*:\s*$")


def parse_narrative_sections(raw: str) -> dict[str, str]:
    """Split a narrative into its labeled sections plus the integration text."""
    integration = _INTEGRATION_RE.search(raw)
    if integration is None:
        raise SectionParseFailure("integrated interpretation", raw)
    marks = [(m.start(), m.end(), m.group(1)) for m in _SECTION_HEAD_RE.finditer(raw)]
    sections: dict[str, str] = {}
    bounds = [m[0] for m in marks] + [integration.start()]
    for i, (start, end, label) in enumerate(marks):
        sections[label] = raw[end : bounds[i + 1]].strip()
    sections["integration"] = raw[integration.end():].strip()
    return sections


def generate_narrative(client, prompt: Prompt, drivers: Optional[DriverList] = None,
                       lexicon: Optional[dict[str, list[str]]] = None) -> NarrativeBundle:
    """Run the client on the rendered prompt and structure its answer."""
    raw = client.generate(prompt.render())
    sections = parse_narrative_sections(raw)
    mention_vector = extract_feature_mentions(raw, lexicon)
    covered: set[str] = set()
    if drivers is not None:
        lex = lexicon or default_lexicon()
        mentioned = {
            TABULAR_FEATURES[i] for i in range(len(TABULAR_FEATURES)) if mention_vector[i]
        }
        for token, entry in zip(drivers.tokens, drivers.entries):
            if entry.feature_key is not None:
                if entry.feature_key in mentioned:
                    covered.add(token)
            else:
                pattern = re.compile(r"(?<!\w)" + re.escape(entry.name) + r"(?!\w)", re.IGNORECASE)
                if pattern.search(raw):
                    covered.add(token)
        del lex
    return NarrativeBundle(raw=raw, sections=sections,
                           mention_vector=mention_vector, driver_tokens_covered=covered)


# --- clients --------------------------------------------------------------------------

def _append_jsonl(path: Optional[str | Path], payload: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True) + "\n")


class HttpLLMClient:
    """Chat-completions JSON over HTTP: {model, messages[], temperature}."""

    def __init__(self, url: str, model: str = "generator", temperature: float = 0.2,
                 timeout: float = 30.0, max_retries: int = 2,
                 log_path: Optional[str | Path] = None):
        self.url = url
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.log_path = log_path

    def generate(self, prompt_text: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": "You write grounded clinical explanations."},
                {"role": "user", "content": prompt_text},
            ],
            "temperature": self.temperature,
        }
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.url, json=payload, timeout=self.timeout)
                break
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_exc = exc
        else:
            raise ClientTimeout(self.max_retries + 1) from last_exc
        _append_jsonl(self.log_path, {
            "ts": time.time(), "url": self.url, "request": payload,
            "status": resp.status_code,
        })
        if resp.status_code != 200:
            raise MalformedResponse(f"HTTP {resp.status_code}")
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(str(exc)) from exc
        _append_jsonl(self.log_path, {"ts": time.time(), "url": self.url, "response": content})
        return content


class StubLLMClient:
    """Deterministic offline generator: echoes the evidence back in narrative form."""

    def __init__(self, log_path: Optional[str | Path] = None):
        self.log_path = log_path

    @staticmethod
    def _prompt_section(prompt_text: str, label: str) -> str:
        pattern = re.compile(
            r"(?ms)^" + re.escape(label) + r"\)[^\n]*:\n(.*?)(?=^\w\)|^Integrated interpretation:)"
        )
        match = pattern.search(prompt_text)
        return match.group(1).strip() if match else ""

    def generate(self, prompt_text: str) -> str:
        _append_jsonl(self.log_path, {"ts": time.time(), "client": "stub",
                                      "request_chars": len(prompt_text)})
        section_a = self._prompt_section(prompt_text, "A")
        parts = ["A) MODEL DRIVERS:", section_a or "(no evidence available)"]
        summaries = {
            "B": ("B) TABULAR PATIENT FEATURES:", "Structured values reviewed:"),
            "C": ("C) ONTOLOGY EVIDENCE:", "Mapped concepts reviewed:"),
            "D": ("D) CLINICAL KNOWLEDGE:", "Reference thresholds applied:"),
            "E": ("E) PATIENT NOTES:", "Notes reviewed:"),
        }
        for label, (header, lead) in summaries.items():
            body = self._prompt_section(prompt_text, label)
            head_lines = "\n".join(body.splitlines()[:3]) if body else "(no evidence available)"
            parts.append(header)
            parts.append(f"{lead}\n{head_lines}")

        driver_names = []
        for line in (section_a or "").splitlines():
            if line.startswith("- "):
                driver_names.append(line[2:].split(";")[0].split(":")[0].strip())
        listing = "; ".join(driver_names) if driver_names else "the recorded findings"
        parts.append("Integrated interpretation:")
        parts.append(
            "The overall clinical context integrates the ranked drivers with the "
            "ontology evidence and the reference thresholds above. "
            f"The leading factors are: {listing}. "
            "Recommended plan: monitor the flagged values against their clinical "
            "thresholds and reassess the predicted risk as the picture evolves."
        )
        narrative = "\n".join(parts)
        _append_jsonl(self.log_path, {"ts": time.time(), "client": "stub",
                                      "response_chars": len(narrative)})
        return narrative


# --- judges ---------------------------------------------------------------------------

STUB_JUDGE_RUBRIC = {
    "faithfulness": ("driver", "risk"),
    "plausibility": ("clinical", "threshold"),
    "usefulness": ("monitor", "recommend"),
    "sensemaking": ("overall", "context"),
    "coherence": ("integrat",),
}


class StubJudge:
    """Deterministic keyword-rubric judge for offline runs and tests.

    Each dimension scores the fraction of its rubric keywords present, so a
    narrative containing every keyword scores 1.0 and an empty one 0.0.
    """

    def score(self, text: str, context: str = "") -> dict[str, float]:
        low = text.lower()
        return {
            dim: sum(1 for kw in keywords if kw in low) / len(keywords)
            for dim, keywords in STUB_JUDGE_RUBRIC.items()
        }


class HttpJudgeClient:
    """LLM-as-a-judge over the same chat-completions wire shape."""

    _RUBRIC = (
        "Rate the explanation on faithfulness, plausibility, usefulness, "
        "sensemaking, and coherence, each in [0, 1]. Respond with a single "
        "JSON object holding those five keys."
    )

    def __init__(self, url: str, model: str = "judge", timeout: float = 30.0,
                 log_path: Optional[str | Path] = None):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.log_path = log_path

    def score(self, text: str, context: str = "") -> dict[str, float]:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": self._RUBRIC},
                {"role": "user", "content": f"Context:\n{context}\n\nExplanation:\n{text}"},
            ],
            "temperature": 0.0,
        }
        try:
            resp = requests.post(self.url, json=payload, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise JudgeUnavailable(str(exc)) from exc
        _append_jsonl(self.log_path, {"ts": time.time(), "url": self.url,
                                      "judge_status": resp.status_code})
        if resp.status_code != 200:
            raise JudgeUnavailable(f"HTTP {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedJudgeResponse(resp.text) from exc
        match = re.search(r"\{.*\}", content, re.DOTALL)
        if match is None:
            raise MalformedJudgeResponse(content)
        try:
            scores = json.loads(match.group(0))
            return {k: float(v) for k, v in scores.items()}
        except (ValueError, TypeError) as exc:
            raise MalformedJudgeResponse(content) from exc

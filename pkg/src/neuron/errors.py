"""Exception hierarchy.

Two broad branches matter for the CLI exit-code mapping: ``DataError``
(malformed or inconsistent inputs, exit code 2) and
``ExternalServiceError`` (LLM / judge endpoints misbehaving, exit code 3).
Everything inherits from ``NeuronError`` so callers can catch the whole
family at once.
"""

from __future__ import annotations


class NeuronError(Exception):
    """Base class for all package-specific errors."""


class DataError(NeuronError):
    """Invalid, malformed, or internally inconsistent data."""


class ExternalServiceError(NeuronError):
    """A remote LLM or judge endpoint failed or returned garbage."""


# --- ontology ---------------------------------------------------------------

class MalformedRow(DataError):
    def __init__(self, path: str, line_no: int, reason: str = ""):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: malformed row{': ' + reason if reason else ''}")


class CycleDetected(DataError):
    def __init__(self, concept_id: str):
        self.concept_id = concept_id
        super().__init__(f"is-a graph contains a cycle through {concept_id!r}")


class DanglingEdge(DataError):
    def __init__(self, child: str, parent: str):
        self.child = child
        self.parent = parent
        super().__init__(f"edge ({child!r} -> {parent!r}) references an unknown concept")


class NoRoot(DataError):
    def __init__(self) -> None:
        super().__init__("graph has no root concept")


class MultipleRoots(DataError):
    def __init__(self, roots: list):
        self.roots = list(roots)
        super().__init__(f"graph has multiple root concepts: {sorted(self.roots)}")


# --- embeddings -------------------------------------------------------------

class EmptyGraph(DataError):
    def __init__(self) -> None:
        super().__init__("cannot generate walks over an empty graph")


class EmptyCorpus(DataError):
    def __init__(self, what: str = "corpus"):
        super().__init__(f"empty {what}")


# --- cohort -----------------------------------------------------------------

class InvalidSpec(DataError):
    def __init__(self, field: str, reason: str = ""):
        self.field = field
        super().__init__(f"invalid cohort spec field {field!r}{': ' + reason if reason else ''}")


class AllMissingFeature(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"feature {name!r} has no observed value in the training records")


class ConfigMismatch(DataError):
    pass


# --- predictors -------------------------------------------------------------

class DegenerateLabels(DataError):
    def __init__(self) -> None:
        super().__init__("training labels contain a single class")


class DimensionMismatch(DataError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected {expected} features, got {got}")


class SingleClassValidation(DataError):
    def __init__(self) -> None:
        super().__init__("validation labels contain a single class; AUC undefined")


# --- attribution ------------------------------------------------------------

class TooManyFeatures(DataError):
    def __init__(self, d: int, limit: int = 20):
        self.d = d
        self.limit = limit
        super().__init__(f"exact enumeration over {d} features exceeds the 2^{limit} guard")


class SingularSystem(DataError):
    def __init__(self) -> None:
        super().__init__("coalition regression is singular even after ridge fallback")


class LayoutMismatch(DataError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"column layout covers {expected} columns but attribution has {got}")


# --- metrics ----------------------------------------------------------------

class EmptyTopK(DataError):
    def __init__(self) -> None:
        super().__init__("top-K driver set is empty or carries zero attribution mass")


class TooFewRuns(DataError):
    def __init__(self, n: int):
        super().__init__(f"need at least 2 runs to aggregate, got {n}")


class NoClaims(DataError):
    def __init__(self) -> None:
        super().__init__("no clinical claims could be extracted from the narrative")


# --- knowledge base / narrative ---------------------------------------------

class UnknownFeature(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"feature {name!r} is not in the knowledge base")


class DuplicateId(DataError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"duplicate document id {doc_id!r}")


class EmbedderFailure(ExternalServiceError):
    def __init__(self, doc_id: str, cause: Exception):
        self.doc_id = doc_id
        self.cause = cause
        super().__init__(f"embedder failed on document {doc_id!r}: {cause}")


class ClientTimeout(ExternalServiceError):
    def __init__(self, retries: int):
        self.retries = retries
        super().__init__(f"LLM endpoint timed out after {retries} retries")


class MalformedResponse(ExternalServiceError):
    def __init__(self, detail: str):
        super().__init__(f"malformed LLM response: {detail}")


class SectionParseFailure(ExternalServiceError):
    def __init__(self, missing: str, raw: str):
        self.missing = missing
        self.raw = raw
        super().__init__(f"narrative is missing the {missing!r} section (raw text retained)")


class JudgeUnavailable(ExternalServiceError):
    def __init__(self, detail: str = ""):
        super().__init__(f"judge endpoint unavailable{': ' + detail if detail else ''}")


class MalformedJudgeResponse(ExternalServiceError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__("judge returned an unparseable response (raw retained)")

"""Is-a concept graph: loading, level discovery, code mapping, and text slices.

The graph is a directed acyclic "child is-a parent" hierarchy loaded from two
tab-separated files (a minimal terminology snapshot format):

    concepts file:       id <TAB> term <TAB> active
    relationships file:  child <TAB> parent <TAB> active

Both carry a header row; ``active`` is 0 or 1 and inactive rows are ignored.
Anchor categories live at the first two levels below the root: level 1 anchors
are the root's direct children, level 2 anchors are their direct children.
Every other concept is assigned to its nearest anchors by upward traversal,
with ties broken by smallest anchor id so the mapping is deterministic.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import (
    CycleDetected,
    DanglingEdge,
    MalformedRow,
    MultipleRoots,
    NoRoot,
)

log = logging.getLogger(__name__)

_DATA_DIR = Path(__file__).parent / "data"
TOY_CONCEPTS_FILE = _DATA_DIR / "toy_ontology_concepts.tsv"
TOY_RELATIONSHIPS_FILE = _DATA_DIR / "toy_ontology_relationships.tsv"


@dataclass(frozen=True)
class Document:
    """A retrievable text unit with provenance metadata."""

    doc_id: str
    text: str
    metadata: dict = field(default_factory=dict)


@dataclass
class ConceptGraph:
    """Immutable after construction; safe for concurrent readers.

    ``root`` is the unique concept without a parent, or None when the graph
    has zero or several parentless concepts (level discovery will then fail
    with a specific error).
    """

    concepts: dict[str, str]
    is_a_edges: set[tuple[str, str]]
    root: Optional[str] = None

    def __post_init__(self) -> None:
        self._parents: dict[str, list[str]] = {c: [] for c in self.concepts}
        self._children: dict[str, list[str]] = {c: [] for c in self.concepts}
        for child, parent in sorted(self.is_a_edges):
            self._parents[child].append(parent)
            self._children[parent].append(child)
        if self.root is None:
            parentless = [c for c in sorted(self.concepts) if not self._parents[c]]
            if len(parentless) == 1:
                self.root = parentless[0]

    def parents(self, concept_id: str) -> list[str]:
        return self._parents[concept_id]

    def children(self, concept_id: str) -> list[str]:
        return self._children[concept_id]

    def roots(self) -> list[str]:
        return [c for c in sorted(self.concepts) if not self._parents[c]]

    def ancestors(self, concept_id: str) -> set[str]:
        """All strict ancestors of ``concept_id``."""
        seen: set[str] = set()
        queue = deque(self._parents[concept_id])
        while queue:
            node = queue.popleft()
            if node in seen:
                continue
            seen.add(node)
            queue.extend(self._parents[node])
        return seen

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConceptGraph):
            return NotImplemented
        return (
            self.concepts == other.concepts
            and self.is_a_edges == other.is_a_edges
            and self.root == other.root
        )


@dataclass
class LevelMap:
    """Anchor categories and the concept -> anchor assignment."""

    level1: set[str]
    level2: set[str]
    assignment: dict[str, tuple[str, Optional[str]]]

    def anchor_ids(self) -> list[str]:
        """All anchors in the canonical column order: level 1 then level 2, each sorted."""
        return sorted(self.level1) + sorted(self.level2)


@dataclass
class CategoryCounts:
    """Per-anchor tallies for one admission's concept codes."""

    stay_id: str
    counts: dict[str, int]
    unmapped: int = 0


def _read_tsv_rows(path: str | Path) -> Iterable[tuple[int, list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line_no == 1:
                continue  # header
            line = line.rstrip("\n")
            if not line:
                continue
            yield line_no, line.split("\t")


def _parse_active(value: str, path: str, line_no: int) -> bool:
    if value not in ("0", "1"):
        raise MalformedRow(str(path), line_no, f"active must be 0 or 1, got {value!r}")
    return value == "1"


def _check_acyclic(concepts: dict[str, str], edges: set[tuple[str, str]]) -> None:
    # Kahn's algorithm on the child -> parent direction; leftovers form cycles.
    out_degree = {c: 0 for c in concepts}
    incoming: dict[str, list[str]] = {c: [] for c in concepts}
    for child, parent in edges:
        out_degree[child] += 1
        incoming[parent].append(child)
    queue = deque(c for c in sorted(concepts) if out_degree[c] == 0)
    visited = 0
    while queue:
        node = queue.popleft()
        visited += 1
        for child in incoming[node]:
            out_degree[child] -= 1
            if out_degree[child] == 0:
                queue.append(child)
    if visited != len(concepts):
        stuck = sorted(c for c in concepts if out_degree[c] > 0)
        raise CycleDetected(stuck[0])


def load_concept_graph(concepts_file: str | Path, relationships_file: str | Path) -> ConceptGraph:
    """Parse the two snapshot files into a validated ConceptGraph.

    Raises MalformedRow for rows with the wrong arity or a bad active flag,
    DanglingEdge when a relationship references an id that is not an active
    concept, and CycleDetected when the is-a relation is not a DAG.
    """
    concepts: dict[str, str] = {}
    for line_no, fields in _read_tsv_rows(concepts_file):
        if len(fields) != 3:
            raise MalformedRow(str(concepts_file), line_no, f"expected 3 columns, got {len(fields)}")
        cid, term, active = fields
        if not cid:
            raise MalformedRow(str(concepts_file), line_no, "empty concept id")
        if _parse_active(active, str(concepts_file), line_no):
            concepts[cid] = term

    edges: set[tuple[str, str]] = set()
    for line_no, fields in _read_tsv_rows(relationships_file):
        if len(fields) != 3:
            raise MalformedRow(str(relationships_file), line_no, f"expected 3 columns, got {len(fields)}")
        child, parent, active = fields
        if not _parse_active(active, str(relationships_file), line_no):
            continue
        if child not in concepts or parent not in concepts:
            raise DanglingEdge(child, parent)
        edges.add((child, parent))

    _check_acyclic(concepts, edges)
    return ConceptGraph(concepts=concepts, is_a_edges=edges)


def save_concept_graph(
    graph: ConceptGraph, concepts_file: str | Path, relationships_file: str | Path
) -> None:
    """Write the snapshot files back out; load(save(g)) == g."""
    with open(concepts_file, "w", encoding="utf-8") as fh:
        fh.write("id\tterm\tactive\n")
        for cid in sorted(graph.concepts):
            fh.write(f"{cid}\t{graph.concepts[cid]}\t1\n")
    with open(relationships_file, "w", encoding="utf-8") as fh:
        fh.write("child\tparent\tactive\n")
        for child, parent in sorted(graph.is_a_edges):
            fh.write(f"{child}\t{parent}\t1\n")


def _nearest_anchor(graph: ConceptGraph, start: str, anchors: set[str]) -> Optional[str]:
    """Nearest anchor among ancestors-or-self, ties broken by smallest id."""
    frontier = [start]
    seen = {start}
    while frontier:
        hits = sorted(node for node in frontier if node in anchors)
        if hits:
            return hits[0]
        nxt: list[str] = []
        for node in frontier:
            for parent in graph.parents(node):
                if parent not in seen:
                    seen.add(parent)
                    nxt.append(parent)
        frontier = nxt
    return None


def discover_levels(graph: ConceptGraph) -> LevelMap:
    """Derive anchor categories from the top of the hierarchy.

    Level 1 anchors are the root's direct children; level 2 anchors are the
    union of the level 1 anchors' direct children (minus any concept already
    at level 1, keeping the two sets disjoint). Every concept that descends
    from an anchor is assigned to its nearest level 1 and level 2 anchors.
    """
    roots = graph.roots()
    if not roots:
        raise NoRoot()
    if len(roots) > 1:
        raise MultipleRoots(roots)
    root = roots[0]

    level1 = set(graph.children(root))
    level2: set[str] = set()
    for anchor in level1:
        level2.update(graph.children(anchor))
    level2 -= level1

    assignment: dict[str, tuple[str, Optional[str]]] = {}
    for cid in sorted(graph.concepts):
        l1 = _nearest_anchor(graph, cid, level1)
        if l1 is None:
            continue
        l2 = _nearest_anchor(graph, cid, level2)
        assignment[cid] = (l1, l2)
    return LevelMap(level1=level1, level2=level2, assignment=assignment)


def category_counts(
    graph: ConceptGraph,
    levels: LevelMap,
    codes: Sequence[str],
    stay_id: str = "",
) -> CategoryCounts:
    """Tally one admission's codes into anchor-category counts.

    Total function: unknown codes go to the ``unmapped`` tally and an empty
    code list yields all-zero counts.
    """
    counts = {anchor: 0 for anchor in levels.anchor_ids()}
    unmapped = 0
    for code in codes:
        if code not in graph.concepts:
            unmapped += 1
            continue
        assigned = levels.assignment.get(code)
        if assigned is None:
            continue
        l1, l2 = assigned
        counts[l1] += 1
        if l2 is not None:
            counts[l2] += 1
    return CategoryCounts(stay_id=stay_id, counts=counts, unmapped=unmapped)


def slice_documents(graph: ConceptGraph, allow_list: set[str]) -> list[Document]:
    """Render allowed concepts as one retrievable text document each.

    Unknown ids are skipped with a warning. Output is sorted by concept id.
    """
    docs: list[Document] = []
    for cid in sorted(allow_list):
        if cid not in graph.concepts:
            log.warning("slice_documents: skipping unknown concept id %r", cid)
            continue
        term = graph.concepts[cid]
        parents = graph.parents(cid)
        ancestors = graph.ancestors(cid)
        ancestor_terms = [f"{graph.concepts[a]} ({a})" for a in sorted(ancestors)]
        if parents:
            primary = min(parents)
            head = f"{term} ({cid}) is-a {graph.concepts[primary]}"
        else:
            head = f"{term} ({cid}) is the root concept"
        tail = "; ancestors: " + (", ".join(ancestor_terms) if ancestor_terms else "none")
        docs.append(
            Document(
                doc_id=cid,
                text=head + tail,
                metadata={"kind": "ontology", "concept_id": cid},
            )
        )
    return docs


def load_toy_ontology() -> ConceptGraph:
    """The bundled three-level clinical toy hierarchy used by tests and demos."""
    return load_concept_graph(TOY_CONCEPTS_FILE, TOY_RELATIONSHIPS_FILE)

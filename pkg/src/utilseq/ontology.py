"""Concept ontology: loading, validation, and equivalence-class mapping.

The ontology file is UTF-8 JSON-lines, one concept per line with fields
``id``, ``canonical`` (token list), ``synonyms`` (list of token lists),
``semantic_type``, ``parents`` (list of ids) and an optional ``selected``
flag (default true) marking the concept as eligible for utilization
analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import DomainError, ParseError, ValidationError

PHI_IDENTITY = "identity"
PHI_SEMANTIC = "semantic_type"
PHI_CUSTOM = "custom"


@dataclass(frozen=True)
class Concept:
    """A single concept: canonical surface form plus synonyms and hierarchy."""

    id: str
    canonical: tuple[str, ...]
    synonyms: tuple[tuple[str, ...], ...] = ()
    semantic_type: str = ""
    parents: tuple[str, ...] = ()

    def surface_forms(self) -> tuple[tuple[str, ...], ...]:
        """Canonical form first, then synonyms, duplicates removed."""
        forms: list[tuple[str, ...]] = [self.canonical]
        for syn in self.synonyms:
            if syn not in forms:
                forms.append(syn)
        return tuple(forms)


class Ontology:
    """Immutable, validated universe of concepts.

    Iteration order is sorted by concept id so that every downstream
    artifact derived from an ontology is deterministic.
    """

    def __init__(self, concepts: Iterable[Concept], selected: Iterable[str] | None = None):
        by_id: dict[str, Concept] = {}
        for concept in concepts:
            if concept.id in by_id:
                raise ValidationError(f"duplicate concept id {concept.id!r}")
            if not concept.canonical:
                raise ValidationError(f"concept {concept.id!r} has an empty canonical form")
            by_id[concept.id] = concept
        self._concepts: dict[str, Concept] = {cid: by_id[cid] for cid in sorted(by_id)}

        for concept in self._concepts.values():
            for parent in concept.parents:
                if parent not in self._concepts:
                    raise ValidationError(
                        f"concept {concept.id!r} lists unknown parent {parent!r}"
                    )
        self._ancestors = self._compute_ancestors()

        if selected is None:
            sel = frozenset(self._concepts)
        else:
            sel = frozenset(selected)
            unknown = sel - set(self._concepts)
            if unknown:
                raise ValidationError(f"selected ids not in ontology: {sorted(unknown)}")
        self._selected = sel
        self._semantic_types = frozenset(c.semantic_type for c in self._concepts.values())

    def _compute_ancestors(self) -> dict[str, frozenset[str]]:
        """Transitive parent closure; raises on a hierarchy cycle."""
        ancestors: dict[str, frozenset[str]] = {}
        visiting: set[str] = set()

        def visit(cid: str) -> frozenset[str]:
            if cid in ancestors:
                return ancestors[cid]
            if cid in visiting:
                raise ValidationError(f"hierarchy cycle through concept {cid!r}")
            visiting.add(cid)
            acc: set[str] = set()
            for parent in self._concepts[cid].parents:
                acc.add(parent)
                acc.update(visit(parent))
            visiting.discard(cid)
            if cid in acc:
                raise ValidationError(f"hierarchy cycle through concept {cid!r}")
            ancestors[cid] = frozenset(acc)
            return ancestors[cid]

        for cid in self._concepts:
            visit(cid)
        return ancestors

    @property
    def concepts(self) -> Mapping[str, Concept]:
        return self._concepts

    @property
    def selected(self) -> frozenset[str]:
        return self._selected

    @property
    def semantic_types(self) -> frozenset[str]:
        return self._semantic_types

    def __len__(self) -> int:
        return len(self._concepts)

    def __iter__(self) -> Iterator[Concept]:
        return iter(self._concepts.values())

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self._concepts

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ontology):
            return NotImplemented
        return self._concepts == other._concepts and self._selected == other._selected

    def ancestors(self, concept_id: str) -> frozenset[str]:
        return self._ancestors[concept_id]

    def is_ancestor(self, ancestor_id: str, descendant_id: str) -> bool:
        """True when ``ancestor_id`` is a proper ancestor of ``descendant_id``."""
        return ancestor_id in self._ancestors[descendant_id]


@dataclass(frozen=True)
class EquivalenceMap:
    """Total map from selected concepts to equivalence-class labels."""

    mode: str = PHI_SEMANTIC
    custom_table: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.mode not in (PHI_IDENTITY, PHI_SEMANTIC, PHI_CUSTOM):
            raise DomainError(f"unknown equivalence-map mode {self.mode!r}")
        if self.mode == PHI_CUSTOM and self.custom_table is None:
            raise DomainError("custom mode requires a custom_table")

    def apply(self, ontology: Ontology, concept_id: str) -> str:
        """Class label of a selected concept under this map."""
        if concept_id not in ontology.selected:
            raise DomainError(f"concept {concept_id!r} is not in the selected set")
        if self.mode == PHI_IDENTITY:
            return concept_id
        if self.mode == PHI_SEMANTIC:
            return ontology.concepts[concept_id].semantic_type
        table = self.custom_table
        assert table is not None
        if concept_id not in table:
            raise ValidationError(f"custom map has no entry for selected concept {concept_id!r}")
        return table[concept_id]

    def concept_classes(self, ontology: Ontology) -> dict[str, str]:
        """Class label per selected concept, sorted by concept id."""
        return {cid: self.apply(ontology, cid) for cid in sorted(ontology.selected)}


def apply_phi(phi: EquivalenceMap, ontology: Ontology, concept_id: str) -> str:
    return phi.apply(ontology, concept_id)


def load_ontology(path: str | Path) -> Ontology:
    """Load and validate a JSON-lines ontology file."""
    path = Path(path)
    concepts: list[Concept] = []
    selected: list[str] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", str(path), lineno) from exc
            if not isinstance(record, dict):
                raise ParseError("record is not an object", str(path), lineno)
            try:
                concept = Concept(
                    id=str(record["id"]),
                    canonical=tuple(str(t) for t in record["canonical"]),
                    synonyms=tuple(
                        tuple(str(t) for t in syn) for syn in record.get("synonyms", [])
                    ),
                    semantic_type=str(record.get("semantic_type", "")),
                    parents=tuple(str(p) for p in record.get("parents", [])),
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(f"missing or malformed field ({exc})", str(path), lineno) from exc
            concepts.append(concept)
            if record.get("selected", True):
                selected.append(concept.id)
    return Ontology(concepts, selected=selected)


def save_ontology(ontology: Ontology, path: str | Path) -> None:
    """Write an ontology in the same JSON-lines format ``load_ontology`` reads."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for concept in ontology:
            record = {
                "id": concept.id,
                "canonical": list(concept.canonical),
                "synonyms": [list(s) for s in concept.synonyms],
                "semantic_type": concept.semantic_type,
                "parents": list(concept.parents),
                "selected": concept.id in ontology.selected,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")

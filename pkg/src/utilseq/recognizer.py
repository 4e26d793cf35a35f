"""Dictionary-based concept mention extraction.

A sliding window scans the token sequence for maximal matches against the
pooled canonical forms and synonyms of an ontology.  Stop words inside a
window are skipped during comparison, but a window may neither start nor
end on one.  Overlaps are resolved in three fixed stages:

1. maximality - a match that can be extended to a longer match at the
   same start position is dropped;
2. agglomeration - of two overlapping matches whose concepts are
   hierarchically related, only the more specific (descendant) survives;
3. left priority - remaining overlaps are resolved greedily, preferring
   the leftmost start, then the longer span, then the smaller concept id.

Matching is case-insensitive on exact tokens; there is no stemming.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .ontology import Ontology


@dataclass(frozen=True)
class Mention:
    """One recognized concept occurrence over a half-open token span."""

    concept_id: str
    start: int
    end: int
    matched_via: tuple[str, ...] = ()

    def overlaps(self, other: "Mention") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class StopWordSet:
    words: frozenset[str] = frozenset()

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.words

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "StopWordSet":
        return cls(frozenset(t.lower() for t in tokens))


def load_stop_words(path: str | Path) -> StopWordSet:
    """Read a plain-text stop-word list, one token per line."""
    with Path(path).open("r", encoding="utf-8") as handle:
        return StopWordSet.from_tokens(line.strip() for line in handle if line.strip())


class ConceptDictionary:
    """Lowercased surface form -> concept ids, precomputed from an ontology."""

    def __init__(self, ontology: Ontology):
        self.ontology = ontology
        self._forms: dict[tuple[str, ...], list[tuple[str, tuple[str, ...]]]] = {}
        self.max_form_len = 0
        for concept in ontology:
            for form in concept.surface_forms():
                key = tuple(t.lower() for t in form)
                if not key:
                    continue
                entries = self._forms.setdefault(key, [])
                if all(cid != concept.id for cid, _ in entries):
                    entries.append((concept.id, form))
                self.max_form_len = max(self.max_form_len, len(key))

    def lookup(self, key: tuple[str, ...]) -> list[tuple[str, tuple[str, ...]]]:
        return self._forms.get(key, [])


def _candidates(
    tokens: Sequence[str], dictionary: ConceptDictionary, stops: StopWordSet
) -> list[Mention]:
    """All dictionary matches before overlap resolution.

    For each start position the scan keeps extending the window while the
    number of non-stop tokens stays within the longest dictionary form;
    stop words never begin or end a window.
    """
    lowered = [t.lower() for t in tokens]
    is_stop = [t in stops for t in lowered]
    found: list[Mention] = []
    n = len(tokens)
    for start in range(n):
        if is_stop[start]:
            continue
        content: list[str] = []
        for end in range(start + 1, n + 1):
            if not is_stop[end - 1]:
                content.append(lowered[end - 1])
                if len(content) > dictionary.max_form_len:
                    break
                for concept_id, form in dictionary.lookup(tuple(content)):
                    found.append(Mention(concept_id, start, end, matched_via=form))
    return found


def _apply_maximality(candidates: list[Mention]) -> list[Mention]:
    """Keep, per start position, only the candidates with the longest span."""
    max_end: dict[int, int] = {}
    for cand in candidates:
        max_end[cand.start] = max(max_end.get(cand.start, 0), cand.end)
    return [c for c in candidates if c.end == max_end[c.start]]


def _apply_agglomeration(candidates: list[Mention], ontology: Ontology) -> list[Mention]:
    """Drop any candidate overlapped by a proper descendant of its concept."""
    kept = []
    for cand in candidates:
        superseded = any(
            other is not cand
            and cand.overlaps(other)
            and ontology.is_ancestor(cand.concept_id, other.concept_id)
            for other in candidates
        )
        if not superseded:
            kept.append(cand)
    return kept


def _apply_left_priority(candidates: list[Mention]) -> list[Mention]:
    """Greedy non-overlapping selection: leftmost start, longer span, smaller id."""
    ordered = sorted(candidates, key=lambda m: (m.start, -(m.end - m.start), m.concept_id))
    chosen: list[Mention] = []
    for cand in ordered:
        if all(not cand.overlaps(taken) for taken in chosen):
            chosen.append(cand)
    return sorted(chosen, key=lambda m: m.start)


def recognize(
    tokens: Sequence[str],
    ontology: Ontology | ConceptDictionary,
    stops: StopWordSet | None = None,
) -> list[Mention]:
    """Extract non-overlapping concept mentions from a token sequence.

    Accepts a prebuilt :class:`ConceptDictionary` to amortize indexing
    when recognizing many sequences against the same ontology.
    """
    if stops is None:
        stops = StopWordSet()
    dictionary = ontology if isinstance(ontology, ConceptDictionary) else ConceptDictionary(ontology)
    candidates = _candidates(tokens, dictionary, stops)
    candidates = _apply_maximality(candidates)
    candidates = _apply_agglomeration(candidates, dictionary.ontology)
    return _apply_left_priority(candidates)


def concept_set(mentions: Iterable[Mention]) -> set[str]:
    """Deduplicated concept ids of a mention list from a single sequence."""
    return {m.concept_id for m in mentions}

"""Utilization-rate estimation and high-utilization concept identification.

The utilization rate of an equivalence class is the fraction of
source-occurrence events whose paired reference also contains the
concept, pooled over all concepts of the class.  Membership uses set
semantics: a concept mentioned twice in one sequence counts once.

Classes whose concepts never occur in any source have an undefined rate
and are reported as absent rather than zero, since zero would wrongly
mark a never-seen concept as never-utilized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .corpus import Corpus
from .errors import DomainError
from .ontology import EquivalenceMap, Ontology
from .recognizer import concept_set

DEFAULT_LIFT_THRESHOLD = 10.0


@dataclass
class UtilizationTable:
    """Per-class co-occurrence counts plus per-concept marginal estimates.

    ``class_counts`` maps class label -> (numerator, denominator);
    ``concept_marginals`` maps concept id -> share of references
    containing the concept; ``concept_class`` records the equivalence
    map the table was estimated under.
    """

    class_counts: dict[str, tuple[int, int]]
    concept_marginals: dict[str, float]
    concept_class: dict[str, str]
    n_pairs: int

    def rate(self, label: str) -> float | None:
        num, den = self.class_counts.get(label, (0, 0))
        return num / den if den > 0 else None

    def rate_for_concept(self, concept_id: str) -> float | None:
        label = self.concept_class.get(concept_id)
        return None if label is None else self.rate(label)

    def class_marginal(self, label: str) -> float:
        """Mean concept marginal over the class (reporting convenience)."""
        members = [c for c, lab in self.concept_class.items() if lab == label]
        if not members:
            return 0.0
        return sum(self.concept_marginals[c] for c in members) / len(members)

    def defined_classes(self) -> list[str]:
        return sorted(lab for lab, (_, den) in self.class_counts.items() if den > 0)


@dataclass(frozen=True)
class HighUtilSet:
    """Concept ids whose class rate exceeds their own marginal by the lift."""

    concept_ids: frozenset[str]
    lift_threshold: float

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.concept_ids


def estimate_from_concept_sets(
    pair_sets: Iterable[tuple[set[str], set[str]]],
    ontology: Ontology,
    phi: EquivalenceMap,
) -> UtilizationTable:
    """Count co-occurrence events from per-pair (source, reference) concept sets.

    Only selected concepts participate.  Every class in the image of the
    map gets an entry, so denominator-zero classes are visible as
    undefined rather than silently missing.
    """
    concept_class = phi.concept_classes(ontology)
    num: dict[str, int] = {label: 0 for label in concept_class.values()}
    den: dict[str, int] = {label: 0 for label in concept_class.values()}
    ref_hits: dict[str, int] = {cid: 0 for cid in concept_class}

    n = 0
    for src_concepts, ref_concepts in pair_sets:
        n += 1
        src = src_concepts & ontology.selected
        ref = ref_concepts & ontology.selected
        for cid in src:
            label = concept_class[cid]
            den[label] += 1
            if cid in ref:
                num[label] += 1
        for cid in ref:
            ref_hits[cid] += 1

    marginals = {cid: (ref_hits[cid] / n if n > 0 else 0.0) for cid in concept_class}
    counts = {label: (num[label], den[label]) for label in num}
    return UtilizationTable(
        class_counts=counts,
        concept_marginals=marginals,
        concept_class=concept_class,
        n_pairs=n,
    )


def estimate(corpus: Corpus, ontology: Ontology, phi: EquivalenceMap) -> UtilizationTable:
    """Utilization table of a corpus, using its precomputed mentions."""
    pair_sets = (
        (concept_set(pair.source_mentions), concept_set(pair.reference_mentions))
        for pair in corpus.pairs
    )
    return estimate_from_concept_sets(pair_sets, ontology, phi)


def identify_high_utilization(
    table: UtilizationTable, lift_threshold: float = DEFAULT_LIFT_THRESHOLD
) -> HighUtilSet:
    """Concepts whose class rate is at least ``lift_threshold`` times their marginal.

    Concepts with a zero marginal but positive rate have infinite lift and
    are included; undefined class rates exclude the concept.
    """
    if lift_threshold <= 1.0:
        raise DomainError("lift threshold must exceed 1")
    chosen: set[str] = set()
    for cid, label in table.concept_class.items():
        rate = table.rate(label)
        if rate is None:
            continue
        marginal = table.concept_marginals[cid]
        if marginal == 0.0:
            if rate > 0.0:
                chosen.add(cid)
        elif rate / marginal >= lift_threshold:
            chosen.add(cid)
    return HighUtilSet(frozenset(chosen), lift_threshold)


def all_selected_high_utilization(ontology: Ontology) -> HighUtilSet:
    """The explicit override that treats every selected concept as high-utilization."""
    return HighUtilSet(frozenset(ontology.selected), lift_threshold=1.0)


def semantic_relative_error(
    model_table: UtilizationTable, reference_table: UtilizationTable
) -> tuple[dict[str, float], list[str]]:
    """Per-class |model rate - reference rate| / reference rate.

    Classes whose reference rate is undefined or zero cannot be
    normalized; they are skipped and returned separately.
    """
    if set(model_table.class_counts) != set(reference_table.class_counts):
        raise DomainError("tables were estimated under different equivalence maps")
    errors: dict[str, float] = {}
    skipped: list[str] = []
    for label in sorted(reference_table.class_counts):
        ref_rate = reference_table.rate(label)
        if ref_rate is None or ref_rate == 0.0:
            skipped.append(label)
            continue
        model_rate = model_table.rate(label) or 0.0
        errors[label] = abs(model_rate - ref_rate) / ref_rate
    return errors, skipped


def write_table_csv(table: UtilizationTable, path: str | Path) -> None:
    """Serialize per-class counts: class, numerator, denominator, rate, marginal."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "numerator", "denominator", "rate", "marginal"])
        for label in sorted(table.class_counts):
            num, den = table.class_counts[label]
            rate = table.rate(label)
            writer.writerow(
                [
                    label,
                    num,
                    den,
                    "" if rate is None else f"{rate:.10g}",
                    f"{table.class_marginal(label):.10g}",
                ]
            )


def read_table_csv(path: str | Path) -> dict[str, float | None]:
    """Class -> rate mapping from a serialized table (rate column only)."""
    rates: dict[str, float | None] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            rates[row["class"]] = float(row["rate"]) if row["rate"] else None
    return rates

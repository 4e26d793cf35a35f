"""Quantitative diagnostics for decoded outputs and trained models.

Covers: utilization tables of generated text versus references, per-class
relative error, micro-averaged concept precision/recall/F1, per-timestep
entropy of the teacher-forced conditional distribution, the average rank
of reference concept tokens in that distribution (ranks above the beam
size flag tokens the beam can never surface), and counts of objectively
detectable degenerate outputs (empty, truncated at the length cap, or a
token repeated four or more times in a row).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .errors import DomainError
from .model import ModelConfig, forward
from .ontology import EquivalenceMap, Ontology
from .recognizer import ConceptDictionary, StopWordSet, concept_set, recognize
from .utilization import (
    UtilizationTable,
    estimate_from_concept_sets,
    semantic_relative_error,
)

REPEAT_RUN_THRESHOLD = 4


def generated_utilization(
    outputs: Sequence[Sequence[str]],
    corpus: Corpus,
    ontology: Ontology,
    phi: EquivalenceMap,
    stops: StopWordSet | None = None,
) -> tuple[UtilizationTable, UtilizationTable]:
    """Utilization tables with references replaced by model outputs.

    Returns (model table, reference table); both run through the same
    counting path so the reference table is identical to estimating the
    corpus directly.
    """
    if len(outputs) != len(corpus.pairs):
        raise DomainError(
            f"got {len(outputs)} outputs for {len(corpus.pairs)} test pairs"
        )
    dictionary = ConceptDictionary(ontology)
    model_sets = []
    ref_sets = []
    for output, pair in zip(outputs, corpus.pairs):
        src = concept_set(pair.source_mentions)
        out_mentions = recognize(list(output), dictionary, stops) if output else []
        model_sets.append((src, concept_set(out_mentions)))
        ref_sets.append((src, concept_set(pair.reference_mentions)))
    model_table = estimate_from_concept_sets(model_sets, ontology, phi)
    reference_table = estimate_from_concept_sets(ref_sets, ontology, phi)
    return model_table, reference_table


def concept_f1(
    outputs: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    ontology: Ontology,
    stops: StopWordSet | None = None,
) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over selected-concept sets per pair."""
    if len(outputs) != len(references):
        raise DomainError("outputs and references differ in length")
    dictionary = ConceptDictionary(ontology)

    def concepts(tokens: Sequence[str]) -> set[str]:
        if not tokens:
            return set()
        return concept_set(recognize(list(tokens), dictionary, stops)) & ontology.selected

    inter_sum = out_sum = ref_sum = 0
    for output, reference in zip(outputs, references):
        out_set = concepts(output)
        ref_set = concepts(reference)
        inter_sum += len(out_set & ref_set)
        out_sum += len(out_set)
        ref_sum += len(ref_set)
    precision = inter_sum / out_sum if out_sum else 0.0
    recall = inter_sum / ref_sum if ref_sum else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def stepwise_entropy(
    params, model_config: ModelConfig, corpus: Corpus, max_t: int
) -> list[tuple[int, float, int]]:
    """Mean entropy (nats) of the conditional distribution at steps 1..max_t.

    Step t averages over all pairs whose reference is at least t tokens
    long; rows come from teacher forcing on the reference.
    """
    sums = np.zeros(max_t)
    counts = np.zeros(max_t, dtype=int)
    for pair in corpus.pairs:
        reference = corpus.vocab.encode(pair.reference)
        rows = forward(params, model_config, corpus.vocab.encode(pair.source), reference).data
        limit = min(len(reference), max_t)
        entropy = -np.sum(np.exp(rows[:limit]) * rows[:limit], axis=1)
        sums[:limit] += entropy
        counts[:limit] += 1
    return [
        (t + 1, float(sums[t] / counts[t]) if counts[t] else 0.0, int(counts[t]))
        for t in range(max_t)
    ]


def token_rank(row: np.ndarray, token_id: int) -> int:
    """1-based position of a token in the probability-sorted vocabulary.

    Ties are broken by token id, so under a uniform distribution token k
    has rank k + 1.
    """
    order = np.argsort(-row, kind="stable")
    positions = np.empty_like(order)
    positions[order] = np.arange(len(order))
    return int(positions[token_id]) + 1


def average_concept_rank(
    params, model_config: ModelConfig, corpus: Corpus, ontology: Ontology
) -> tuple[float, int]:
    """Mean rank of reference concept tokens under teacher forcing."""
    total = 0
    count = 0
    for pair in corpus.pairs:
        if not pair.reference_mentions:
            continue
        reference = corpus.vocab.encode(pair.reference)
        rows = forward(params, model_config, corpus.vocab.encode(pair.source), reference).data
        for mention in pair.reference_mentions:
            for position in range(mention.start, mention.end):
                total += token_rank(rows[position], reference[position])
                count += 1
    return (total / count if count else 0.0, count)


@dataclass
class DegeneracyCounts:
    empty: int = 0
    truncated: int = 0
    repetitive: int = 0
    total: int = 0

    @property
    def fraction(self) -> float:
        flagged = self.empty + self.truncated + self.repetitive
        return flagged / self.total if self.total else 0.0


def _has_repeat_run(tokens: Sequence[str], threshold: int = REPEAT_RUN_THRESHOLD) -> bool:
    run = 1
    for prev, cur in zip(tokens, tokens[1:]):
        run = run + 1 if cur == prev else 1
        if run >= threshold:
            return True
    return False


def count_degenerate(
    outputs: Sequence[Sequence[str]], max_lens: Sequence[int]
) -> DegeneracyCounts:
    """Objectively detectable degeneracies; a proxy, not a human judgment."""
    if len(outputs) != len(max_lens):
        raise DomainError("outputs and max_lens differ in length")
    counts = DegeneracyCounts(total=len(outputs))
    for output, cap in zip(outputs, max_lens):
        if not output:
            counts.empty += 1
        elif len(output) >= cap:
            counts.truncated += 1
        elif _has_repeat_run(output):
            counts.repetitive += 1
    return counts


@dataclass
class MetricsReport:
    """Everything the ``eval`` stage writes, in one place."""

    concept_precision: float
    concept_recall: float
    concept_f1: float
    relative_errors: dict[str, float]
    skipped_classes: list[str]
    entropy: list[tuple[int, float, int]]
    mean_concept_rank: float
    rank_positions: int
    beam_size: int
    degeneracy: DegeneracyCounts

    @property
    def mean_relative_error(self) -> float:
        if not self.relative_errors:
            return 0.0
        return sum(self.relative_errors.values()) / len(self.relative_errors)

    @property
    def oversmoothed(self) -> bool:
        return self.mean_concept_rank > self.beam_size


def build_report(
    outputs: Sequence[Sequence[str]],
    corpus: Corpus,
    ontology: Ontology,
    phi: EquivalenceMap,
    params,
    model_config: ModelConfig,
    decode_beam_size: int,
    max_lens: Sequence[int],
    stops: StopWordSet | None = None,
    max_t: int = 10,
) -> MetricsReport:
    model_table, reference_table = generated_utilization(outputs, corpus, ontology, phi, stops)
    errors, skipped = semantic_relative_error(model_table, reference_table)
    precision, recall, f1 = concept_f1(
        outputs, [pair.reference for pair in corpus.pairs], ontology, stops
    )
    entropy = stepwise_entropy(params, model_config, corpus, max_t)
    mean_rank, rank_positions = average_concept_rank(params, model_config, corpus, ontology)
    degeneracy = count_degenerate(outputs, max_lens)
    return MetricsReport(
        concept_precision=precision,
        concept_recall=recall,
        concept_f1=f1,
        relative_errors=errors,
        skipped_classes=skipped,
        entropy=entropy,
        mean_concept_rank=mean_rank,
        rank_positions=rank_positions,
        beam_size=decode_beam_size,
        degeneracy=degeneracy,
    )


# ---------------------------------------------------------------------------
# CSV writers
# ---------------------------------------------------------------------------


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        rows = [
            ("concept_precision", report.concept_precision),
            ("concept_recall", report.concept_recall),
            ("concept_f1", report.concept_f1),
            ("mean_relative_error", report.mean_relative_error),
            ("mean_concept_rank", report.mean_concept_rank),
            ("rank_positions", report.rank_positions),
            ("beam_size", report.beam_size),
            ("oversmoothed", int(report.oversmoothed)),
            ("degenerate_empty", report.degeneracy.empty),
            ("degenerate_truncated", report.degeneracy.truncated),
            ("degenerate_repetitive", report.degeneracy.repetitive),
            ("degenerate_fraction", report.degeneracy.fraction),
            ("n_outputs", report.degeneracy.total),
        ]
        for name, value in rows:
            writer.writerow([name, f"{value:.10g}" if isinstance(value, float) else value])


def write_relative_error_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "relative_error", "skipped"])
        for label in sorted(report.relative_errors):
            writer.writerow([label, f"{report.relative_errors[label]:.10g}", 0])
        for label in report.skipped_classes:
            writer.writerow([label, "", 1])


def write_entropy_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "mean_entropy", "n_pairs"])
        for t, value, count in report.entropy:
            writer.writerow([t, f"{value:.10g}", count])


def write_rank_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["mean_concept_rank", "rank_positions", "beam_size", "oversmoothed"])
        writer.writerow(
            [
                f"{report.mean_concept_rank:.10g}",
                report.rank_positions,
                report.beam_size,
                int(report.oversmoothed),
            ]
        )

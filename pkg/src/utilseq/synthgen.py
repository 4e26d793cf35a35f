"""Synthetic parallel corpora with planted, known utilization rates.

Every source draws filler tokens plus one to three concept mentions;
each mentioned concept is copied into the reference independently with
its semantic type's configured utilization rate, so the type-level rate
is known exactly by construction.  Concept frequencies within a type
follow a long-tailed power law, and references occasionally use a
synonym instead of the canonical form so the recognizer is exercised on
both sides.

Concept and filler tokens live in disjoint namespaces, which makes every
planted mention exactly recoverable by the recognizer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import Corpus, ParallelPair, build_vocab, compute_mentions, save_corpus
from .errors import ValidationError
from .ontology import Concept, Ontology, save_ontology

FILLER_ZIPF_EXPONENT = 1.1
SYNONYM_COPY_PROBABILITY = 0.2
SPLIT_WEIGHTS = {"train": 44, "valid": 1, "test": 3}


@dataclass(frozen=True)
class TypeSpec:
    """One semantic type: its planted rate, size, and frequency skew."""

    label: str
    rate: float
    n_concepts: int
    weight: float = 1.1

    def validate(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"type {self.label!r}: rate must be in [0, 1]")
        if self.n_concepts <= 0:
            raise ValidationError(f"type {self.label!r}: need at least one concept")
        if self.weight <= 0:
            raise ValidationError(f"type {self.label!r}: frequency weight must be positive")


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int
    n_pairs: int
    semantic_types: tuple[TypeSpec, ...]
    filler_vocab_size: int = 50
    source_len_range: tuple[int, int] = (6, 10)
    reference_len_range: tuple[int, int] = (4, 8)

    def validate(self):
        if self.n_pairs <= 0:
            raise ValidationError("n_pairs must be positive")
        if not self.semantic_types:
            raise ValidationError("need at least one semantic type")
        if self.filler_vocab_size <= 0:
            raise ValidationError("filler_vocab_size must be positive")
        for lo, hi in (self.source_len_range, self.reference_len_range):
            if lo < 0 or hi < lo:
                raise ValidationError("length ranges must be nonempty")
        labels = [t.label for t in self.semantic_types]
        if len(set(labels)) != len(labels):
            raise ValidationError("duplicate semantic type label")
        for tspec in self.semantic_types:
            tspec.validate()


@dataclass(frozen=True)
class PlantedMention:
    concept_id: str
    start: int
    end: int


@dataclass
class GroundTruth:
    """What the generator planted: rates, expected marginals, mention spans."""

    type_rates: dict[str, float]
    concept_marginals: dict[str, float]
    concept_types: dict[str, str]
    planted: dict[str, list[tuple[tuple[PlantedMention, ...], tuple[PlantedMention, ...]]]]

    def type_expected_marginal(self, label: str) -> float:
        members = [c for c, t in self.concept_types.items() if t == label]
        if not members:
            return 0.0
        return sum(self.concept_marginals[c] for c in members) / len(members)


def _concept_id(label: str, k: int) -> str:
    return f"{label}-{k:03d}"


def _build_ontology(spec: GeneratorSpec) -> Ontology:
    concepts = []
    for tspec in spec.semantic_types:
        for k in range(tspec.n_concepts):
            base = f"{tspec.label.lower()}_{k}"
            if k % 3 == 2:
                canonical = (f"{base}a", f"{base}b")
            else:
                canonical = (f"{base}a",)
            concepts.append(
                Concept(
                    id=_concept_id(tspec.label, k),
                    canonical=canonical,
                    synonyms=((f"{base}s",),),
                    semantic_type=tspec.label,
                    parents=(),
                )
            )
    return Ontology(concepts)


def _concept_weights(tspec: TypeSpec) -> np.ndarray:
    raw = 1.0 / np.arange(1, tspec.n_concepts + 1) ** tspec.weight
    return raw / raw.sum()


def _expected_marginals(spec: GeneratorSpec) -> dict[str, float]:
    """Exact p(concept in reference) under the generative process.

    A concept is in the source iff it appears among the 1-3 i.i.d. draws,
    and in the reference iff additionally its independent copy event
    fires, so p(c in y) = rate * (1 - mean over m of (1 - q_c)^m).
    """
    n_types = len(spec.semantic_types)
    marginals: dict[str, float] = {}
    for tspec in spec.semantic_types:
        weights = _concept_weights(tspec)
        for k in range(tspec.n_concepts):
            q = weights[k] / n_types
            p_in_source = 1.0 - np.mean([(1.0 - q) ** m for m in (1, 2, 3)])
            marginals[_concept_id(tspec.label, k)] = float(tspec.rate * p_in_source)
    return marginals


def _split_sizes(n_pairs: int) -> dict[str, int]:
    total_weight = sum(SPLIT_WEIGHTS.values())
    n_valid = round(n_pairs * SPLIT_WEIGHTS["valid"] / total_weight)
    n_test = round(n_pairs * SPLIT_WEIGHTS["test"] / total_weight)
    n_train = n_pairs - n_valid - n_test
    return {"train": n_train, "valid": n_valid, "test": n_test}


def generate(spec: GeneratorSpec) -> tuple[dict[str, Corpus], Ontology, GroundTruth]:
    """Produce train/valid/test corpora with one shared vocabulary.

    Generation is a pure function of ``spec``: the same seed yields the
    same corpora token for token.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ontology = _build_ontology(spec)

    n_types = len(spec.semantic_types)
    type_weights = [_concept_weights(t) for t in spec.semantic_types]
    filler_probs = 1.0 / np.arange(1, spec.filler_vocab_size + 1) ** FILLER_ZIPF_EXPONENT
    filler_probs /= filler_probs.sum()

    def draw_filler(count: int) -> list[str]:
        ids = rng.choice(spec.filler_vocab_size, size=count, p=filler_probs)
        return [f"w{j}" for j in ids]

    raw_pairs: list[ParallelPair] = []
    planted_all: list[tuple[tuple[PlantedMention, ...], tuple[PlantedMention, ...]]] = []
    for _ in range(spec.n_pairs):
        n_draws = int(rng.integers(1, 4))
        drawn: list[tuple[int, int]] = []
        for _ in range(n_draws):
            t = int(rng.integers(0, n_types))
            k = int(rng.choice(spec.semantic_types[t].n_concepts, p=type_weights[t]))
            if (t, k) not in drawn:
                drawn.append((t, k))

        src_len = int(rng.integers(spec.source_len_range[0], spec.source_len_range[1] + 1))
        segments: list[tuple[str | None, tuple[str, ...]]] = []
        for t, k in drawn:
            cid = _concept_id(spec.semantic_types[t].label, k)
            segments.append((cid, ontology.concepts[cid].canonical))
        concept_token_count = sum(len(seg) for _, seg in segments)
        for token in draw_filler(max(src_len - concept_token_count, 0)):
            segments.append((None, (token,)))
        order = rng.permutation(len(segments))
        source: list[str] = []
        src_planted: list[PlantedMention] = []
        for idx in order:
            cid, seg = segments[idx]
            if cid is not None:
                src_planted.append(PlantedMention(cid, len(source), len(source) + len(seg)))
            source.extend(seg)
        src_planted.sort(key=lambda m: m.start)

        ref_len = int(
            rng.integers(spec.reference_len_range[0], spec.reference_len_range[1] + 1)
        )
        reference: list[str] = []
        ref_planted: list[PlantedMention] = []
        for t, k in drawn:
            tspec = spec.semantic_types[t]
            if rng.random() < tspec.rate:
                cid = _concept_id(tspec.label, k)
                concept = ontology.concepts[cid]
                if concept.synonyms and rng.random() < SYNONYM_COPY_PROBABILITY:
                    form = concept.synonyms[int(rng.integers(0, len(concept.synonyms)))]
                else:
                    form = concept.canonical
                ref_planted.append(
                    PlantedMention(cid, len(reference), len(reference) + len(form))
                )
                reference.extend(form)
        n_fill = max(ref_len - len(reference), 0)
        if not reference and n_fill == 0:
            n_fill = 1
        reference.extend(draw_filler(n_fill))

        raw_pairs.append(ParallelPair(source=tuple(source), reference=tuple(reference)))
        planted_all.append((tuple(src_planted), tuple(ref_planted)))

    sizes = _split_sizes(spec.n_pairs)
    boundaries = {
        "train": (0, sizes["train"]),
        "valid": (sizes["train"], sizes["train"] + sizes["valid"]),
        "test": (sizes["train"] + sizes["valid"], spec.n_pairs),
    }
    ontology_tokens = [t for c in ontology for form in c.surface_forms() for t in form]
    train_pairs = raw_pairs[boundaries["train"][0] : boundaries["train"][1]]
    vocab = build_vocab(train_pairs, extra_tokens=ontology_tokens)

    corpora: dict[str, Corpus] = {}
    planted: dict[str, list] = {}
    for split, (lo, hi) in boundaries.items():
        pairs = compute_mentions(raw_pairs[lo:hi], ontology)
        corpora[split] = Corpus(pairs=pairs, split=split, vocab=vocab)
        planted[split] = planted_all[lo:hi]

    truth = GroundTruth(
        type_rates={t.label: t.rate for t in spec.semantic_types},
        concept_marginals=_expected_marginals(spec),
        concept_types={
            _concept_id(t.label, k): t.label
            for t in spec.semantic_types
            for k in range(t.n_concepts)
        },
        planted=planted,
    )
    return corpora, ontology, truth


def describe(truth: GroundTruth) -> str:
    """CSV report: one row per semantic type with its planted rate and marginal."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["type", "true_rate", "expected_marginal"])
    for label in sorted(truth.type_rates):
        writer.writerow(
            [label, f"{truth.type_rates[label]:.10g}", f"{truth.type_expected_marginal(label):.10g}"]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Config round-trip and file emission
# ---------------------------------------------------------------------------


def spec_to_config(spec: GeneratorSpec) -> dict[str, str]:
    types = ",".join(
        f"{t.label}:{t.rate:g}:{t.n_concepts}:{t.weight:g}" for t in spec.semantic_types
    )
    return {
        "gen.seed": str(spec.seed),
        "gen.n_pairs": str(spec.n_pairs),
        "gen.semantic_types": types,
        "gen.filler_vocab_size": str(spec.filler_vocab_size),
        "gen.source_len_range": f"{spec.source_len_range[0]}:{spec.source_len_range[1]}",
        "gen.reference_len_range": f"{spec.reference_len_range[0]}:{spec.reference_len_range[1]}",
    }


def spec_from_config(config: Mapping[str, str]) -> GeneratorSpec:
    def parse_range(text: str) -> tuple[int, int]:
        lo, hi = text.split(":")
        return int(lo), int(hi)

    types = []
    for chunk in config["gen.semantic_types"].split(","):
        label, rate, n_concepts, weight = chunk.split(":")
        types.append(TypeSpec(label, float(rate), int(n_concepts), float(weight)))
    return GeneratorSpec(
        seed=int(config["gen.seed"]),
        n_pairs=int(config["gen.n_pairs"]),
        semantic_types=tuple(types),
        filler_vocab_size=int(config.get("gen.filler_vocab_size", "50")),
        source_len_range=parse_range(config.get("gen.source_len_range", "6:10")),
        reference_len_range=parse_range(config.get("gen.reference_len_range", "4:8")),
    )


def emit(spec: GeneratorSpec, outdir: str | Path) -> tuple[dict[str, Corpus], Ontology, GroundTruth]:
    """Generate and write all artifacts into ``outdir``."""
    from .config import write_config  # local import to avoid a cycle

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    corpora, ontology, truth = generate(spec)
    save_ontology(ontology, outdir / "ontology.jsonl")
    for split, corpus in corpora.items():
        save_corpus(corpus, outdir / f"corpus.{split}.jsonl")
    (outdir / "ground_truth.csv").write_text(describe(truth), encoding="utf-8")
    write_config(spec_to_config(spec), outdir / "gen.cfg")
    return corpora, ontology, truth

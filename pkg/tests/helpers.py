"""Shared builders for randomized test instances."""

from __future__ import annotations

import numpy as np

from utilseq.ontology import Concept, Ontology


def random_ontology(rng: np.random.Generator, max_concepts: int = 8, vocab=None) -> Ontology:
    """Small random ontology over a shared token pool, occasionally hierarchical.

    Surface forms are one or two tokens drawn from ``vocab``; about a
    third of the concepts also get a synonym, and some get a parent among
    the previously created concepts (never creating a cycle).
    """
    if vocab is None:
        vocab = [f"t{i}" for i in range(6)]
    n = int(rng.integers(1, max_concepts + 1))
    concepts: list[Concept] = []
    for i in range(n):
        length = int(rng.integers(1, 3))
        canonical = tuple(str(rng.choice(vocab)) for _ in range(length))
        synonyms = ()
        if rng.random() < 0.35:
            syn_len = int(rng.integers(1, 3))
            synonyms = (tuple(str(rng.choice(vocab)) for _ in range(syn_len)),)
        parents = ()
        if concepts and rng.random() < 0.3:
            parents = (concepts[int(rng.integers(0, len(concepts)))].id,)
        concepts.append(
            Concept(
                id=f"C{i}",
                canonical=canonical,
                synonyms=synonyms,
                semantic_type=f"T{int(rng.integers(0, 3))}",
                parents=parents,
            )
        )
    return Ontology(concepts)


def random_tokens(rng: np.random.Generator, max_len: int = 12, vocab=None) -> list[str]:
    if vocab is None:
        vocab = [f"t{i}" for i in range(6)]
    length = int(rng.integers(1, max_len + 1))
    return [str(rng.choice(vocab)) for _ in range(length)]

"""Parallel-corpus construction and persistence.

Pairing follows the embed-average / cosine-threshold recipe: every
sentence is embedded as the mean of its token vectors, each source is
mapped to the reference with the highest cosine similarity, and pairs
below the threshold are dropped.

The default embedding provider derives a deterministic unit vector from a
hash of the token, so pairing is reproducible without any trained
embedding model; a table of pretrained vectors can be swapped in.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError, ValidationError
from .ontology import Ontology
from .recognizer import ConceptDictionary, Mention, StopWordSet, recognize

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)

CORPUS_FORMAT = "utilseq-corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class ParallelPair:
    """A source/reference sentence pair with recognized concept mentions."""

    source: tuple[str, ...]
    reference: tuple[str, ...]
    source_mentions: tuple[Mention, ...] = ()
    reference_mentions: tuple[Mention, ...] = ()

    def __post_init__(self):
        if not self.source or not self.reference:
            raise ValidationError("parallel pair sides must be nonempty")


class Vocab:
    """Token table with fixed reserved ids 0=pad, 1=bos, 2=eos, 3=unk."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocab):
            return NotImplemented
        return self.id_to_token == other.id_to_token

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(pairs: Iterable[ParallelPair], extra_tokens: Iterable[str] = ()) -> Vocab:
    """Frequency-sorted vocabulary (ties lexicographic) over both pair sides.

    ``extra_tokens`` are appended with zero count so that, e.g., ontology
    surface tokens stay encodable even when absent from the pairs.
    """
    counts: dict[str, int] = {}
    for pair in pairs:
        for token in pair.source + pair.reference:
            counts[token] = counts.get(token, 0) + 1
    for token in extra_tokens:
        counts.setdefault(token, 0)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ordered)


@dataclass
class Corpus:
    pairs: list[ParallelPair]
    split: str
    vocab: Vocab

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise ValidationError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.pairs == other.pairs
            and self.split == other.split
            and self.vocab == other.vocab
        )


# ---------------------------------------------------------------------------
# Embeddings and pairing
# ---------------------------------------------------------------------------


class HashedEmbeddingProvider:
    """Deterministic per-token unit vectors derived from a keyed hash.

    Total on all tokens: unseen tokens get the same treatment as seen
    ones, so pairing never fails on out-of-vocabulary input.
    """

    def __init__(self, dimension: int = 16, seed: int = 0):
        if dimension <= 0:
            raise DomainError("embedding dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def lookup(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}:{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            raw = rng.standard_normal(self.dimension)
            norm = float(np.linalg.norm(raw))
            vec = raw / norm if norm > 0 else np.eye(1, self.dimension, 0)[0]
            self._cache[token] = vec
        return vec


class TableEmbeddingProvider:
    """Vectors from an explicit token table, hash fallback for OOV tokens."""

    def __init__(self, table: Mapping[str, Sequence[float]], dimension: int, seed: int = 0):
        self.dimension = dimension
        self._table = {t: np.asarray(v, dtype=float) for t, v in table.items()}
        for token, vec in self._table.items():
            if vec.shape != (dimension,):
                raise ValidationError(f"vector for {token!r} has shape {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"vector for {token!r} is not finite")
        self._fallback = HashedEmbeddingProvider(dimension, seed)

    def lookup(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        return vec if vec is not None else self._fallback.lookup(token)


def sentence_embedding(tokens: Sequence[str], provider) -> np.ndarray:
    """Mean of per-token vectors."""
    if not tokens:
        raise DomainError("cannot embed an empty token sequence")
    acc = np.zeros(provider.dimension)
    for token in tokens:
        acc += provider.lookup(token)
    return acc / len(tokens)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def pair_corpus(
    sources: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    provider,
    threshold: float = 0.85,
) -> list[tuple[int, int]]:
    """Map each source to its most-similar reference at or above ``threshold``.

    Several sources may share one reference; sources with no qualifying
    partner are omitted.  Ties go to the lower reference index.
    """
    if not 0.0 < threshold <= 1.0:
        raise DomainError("threshold must be in (0, 1]")
    ref_vecs = [sentence_embedding(r, provider) for r in references]
    pairs: list[tuple[int, int]] = []
    for si, source in enumerate(sources):
        src_vec = sentence_embedding(source, provider)
        best_ri, best_sim = -1, -np.inf
        for ri, ref_vec in enumerate(ref_vecs):
            sim = cosine(src_vec, ref_vec)
            if sim > best_sim:
                best_ri, best_sim = ri, sim
        if best_ri >= 0 and best_sim >= threshold:
            pairs.append((si, best_ri))
    return pairs


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def vocab_path_for(corpus_path: str | Path) -> Path:
    return Path(str(corpus_path) + ".vocab")


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """One token per line; line number equals id - 4 (reserved ids implicit)."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for token in vocab.id_to_token[len(RESERVED):]:
            handle.write(token + "\n")


def load_vocab(path: str | Path) -> Vocab:
    with Path(path).open("r", encoding="utf-8") as handle:
        return Vocab([line.rstrip("\n") for line in handle if line.rstrip("\n")])


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write pair records plus a sidecar ``<path>.vocab`` token file.

    Mentions are intentionally not persisted; they are recomputed on load
    so the recognizer stays the single source of truth.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "split": corpus.split}
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for pair in corpus.pairs:
            record = {"source": list(pair.source), "reference": list(pair.reference)}
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    save_vocab(corpus.vocab, vocab_path_for(path))


def compute_mentions(
    pairs: Iterable[ParallelPair],
    ontology: Ontology,
    stops: StopWordSet | None = None,
) -> list[ParallelPair]:
    """Return pairs with recognizer mentions filled in on both sides."""
    dictionary = ConceptDictionary(ontology)
    out = []
    for pair in pairs:
        out.append(
            ParallelPair(
                source=pair.source,
                reference=pair.reference,
                source_mentions=tuple(recognize(pair.source, dictionary, stops)),
                reference_mentions=tuple(recognize(pair.reference, dictionary, stops)),
            )
        )
    return out


def load_corpus(
    path: str | Path,
    ontology: Ontology | None = None,
    stops: StopWordSet | None = None,
) -> Corpus:
    """Read a corpus file; recomputes mentions when an ontology is given."""
    path = Path(path)
    pairs: list[ParallelPair] = []
    split = "train"
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", str(path), lineno) from exc
            if lineno == 1:
                if record.get("format") != CORPUS_FORMAT:
                    raise ParseError("not a corpus file (missing format header)", str(path), 1)
                if record.get("version") != CORPUS_VERSION:
                    raise ParseError(
                        f"unsupported corpus version {record.get('version')!r}", str(path), 1
                    )
                split = record.get("split", "train")
                continue
            try:
                pair = ParallelPair(
                    source=tuple(str(t) for t in record["source"]),
                    reference=tuple(str(t) for t in record["reference"]),
                )
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", str(path), lineno) from exc
            pairs.append(pair)
    if ontology is not None:
        pairs = compute_mentions(pairs, ontology, stops)
    vocab = load_vocab(vocab_path_for(path))
    return Corpus(pairs=pairs, split=split, vocab=vocab)

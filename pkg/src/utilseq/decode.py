"""Beam search and dynamic-beam-allocation constrained decoding.

In plain search the end-of-sequence token competes with ordinary tokens
for beam slots: a hypothesis finishes when its eos extension is selected
(never before the minimum length), and whatever is still live at the
length cap is force-finished.  Scores are raw cumulative
log-probabilities; there is no length normalization or penalty.  Beam
size 1 therefore reduces to greedy argmax decoding.

DBA partitions the beam into banks indexed by the number of constraint
tokens already fully satisfied.  Candidates come from normal top-k
extension plus a forced extension with each unmet constraint's next
token; each nonempty bank is granted one slot from the highest bank
down and the rest of the beam is filled by score.  A hypothesis may only
finish once every constraint is satisfied, so any fully-finished output
contains every constraint as a contiguous subsequence.  If nothing
satisfies all constraints within the length cap, the best partial
hypothesis is returned flagged as incomplete.

Both searches break every tie the same way (higher score, then
lexicographically smaller token sequence), which makes DBA with an empty
constraint set reproduce plain beam search exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import EOS_ID, Vocab
from .errors import ConfigError, DomainError
from .model import ModelConfig, next_token_logprobs
from .recognizer import Mention
from .utilization import UtilizationTable

logger = logging.getLogger("utilseq.decode")

StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    min_len: int = 0
    max_len_factor: float = 1.2
    max_len_offset: int = 10
    mode: str = "plain"
    tau: float = 0.6

    def validate(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be at least 1")
        if self.mode not in ("plain", "dba"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must be in [0, 1]")

    def max_len(self, source_len: int) -> int:
        return int(math.floor(self.max_len_factor * source_len)) + self.max_len_offset


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool


@dataclass(frozen=True)
class ConstraintState:
    """Progress over the constraint set: full matches and partial pointers."""

    satisfied: tuple[bool, ...]
    positions: tuple[int, ...]

    @classmethod
    def initial(cls, n_constraints: int) -> "ConstraintState":
        return cls((False,) * n_constraints, (0,) * n_constraints)

    def bank(self, constraints: Sequence[tuple[int, ...]]) -> int:
        """Fully-satisfied constraint tokens; monotone along any extension."""
        return sum(len(c) for c, done in zip(constraints, self.satisfied) if done)

    def advance(self, token: int, constraints: Sequence[tuple[int, ...]]) -> "ConstraintState":
        satisfied = list(self.satisfied)
        positions = list(self.positions)
        for i, constraint in enumerate(constraints):
            if satisfied[i]:
                continue
            pos = positions[i]
            if token == constraint[pos]:
                pos += 1
            elif token == constraint[0]:
                pos = 1
            else:
                pos = 0
            if pos == len(constraint):
                satisfied[i] = True
                pos = 0
            positions[i] = pos
        return ConstraintState(tuple(satisfied), tuple(positions))

    def pending_tokens(self, constraints: Sequence[tuple[int, ...]]) -> list[int]:
        """Next needed token of each unmet constraint."""
        return [
            constraint[self.positions[i]]
            for i, constraint in enumerate(constraints)
            if not self.satisfied[i]
        ]


def _order_key(hyp) -> tuple[float, tuple[int, ...]]:
    return (-hyp.logprob, hyp.tokens)


def _better(current, challenger):
    if current is None:
        return challenger
    return challenger if _order_key(challenger) < _order_key(current) else current


# ---------------------------------------------------------------------------
# Plain beam search
# ---------------------------------------------------------------------------


def beam_search_core(
    step_fn: StepFn, vocab_size: int, config: DecodeConfig, max_len: int
) -> Hypothesis:
    """End-of-sequence competes with ordinary tokens for beam slots.

    A hypothesis finishes only when its eos extension is selected into
    the beam, so beam size 1 reduces to greedy argmax decoding.
    """
    config.validate()
    live = [Hypothesis((), 0.0, False)]
    best: Hypothesis | None = None
    for _ in range(max_len):
        if not live:
            break
        candidates: list[Hypothesis] = []
        for hyp in live:
            row = step_fn(hyp.tokens)
            for v in range(vocab_size):
                if v == EOS_ID:
                    if len(hyp.tokens) >= config.min_len:
                        candidates.append(
                            Hypothesis(hyp.tokens, hyp.logprob + float(row[v]), True)
                        )
                    continue
                candidates.append(
                    Hypothesis(hyp.tokens + (v,), hyp.logprob + float(row[v]), False)
                )
        candidates.sort(key=_order_key)
        selected = candidates[: config.beam_size]
        live = [c for c in selected if not c.finished]
        for cand in selected:
            if cand.finished:
                best = _better(best, cand)
        if best is not None and all(h.logprob < best.logprob for h in live):
            return best
    for hyp in live:
        best = _better(best, Hypothesis(hyp.tokens, hyp.logprob, True))
    assert best is not None
    return best


def beam_search(
    params, model_config: ModelConfig, source: Sequence[int], config: DecodeConfig
) -> Hypothesis:
    """Highest cumulative log-probability finished hypothesis for one source."""
    if not source:
        raise DomainError("cannot decode an empty source")

    def step_fn(prefix: tuple[int, ...]) -> np.ndarray:
        return next_token_logprobs(params, model_config, source, prefix)

    return beam_search_core(step_fn, model_config.vocab_size, config, config.max_len(len(source)))


# ---------------------------------------------------------------------------
# DBA constrained search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _DbaHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    state: ConstraintState
    finished: bool = False


@dataclass(frozen=True)
class DbaResult:
    hypothesis: Hypothesis
    satisfied_tokens: int
    total_constraint_tokens: int
    complete: bool


def dba_search_core(
    step_fn: StepFn,
    vocab_size: int,
    constraints: Sequence[tuple[int, ...]],
    config: DecodeConfig,
    max_len: int,
) -> DbaResult:
    config.validate()
    constraints = [tuple(c) for c in constraints if c]
    total_tokens = sum(len(c) for c in constraints)
    live = [_DbaHypothesis((), 0.0, ConstraintState.initial(len(constraints)))]
    best_full: Hypothesis | None = None

    for _ in range(max_len):
        if not live:
            break
        candidates: list[_DbaHypothesis] = []
        for hyp in live:
            row = step_fn(hyp.tokens)
            bank = hyp.state.bank(constraints)
            eos_allowed = bank == total_tokens and len(hyp.tokens) >= config.min_len
            order = np.argsort(-row, kind="stable")
            picked: list[int] = []
            for v in order:
                v = int(v)
                if v == EOS_ID and not eos_allowed:
                    continue
                picked.append(v)
                if len(picked) == config.beam_size:
                    break
            for forced in sorted(set(hyp.state.pending_tokens(constraints))):
                if forced not in picked:
                    picked.append(forced)
            for v in picked:
                if v == EOS_ID:
                    candidates.append(
                        _DbaHypothesis(
                            hyp.tokens, hyp.logprob + float(row[v]), hyp.state, finished=True
                        )
                    )
                else:
                    candidates.append(
                        _DbaHypothesis(
                            hyp.tokens + (v,),
                            hyp.logprob + float(row[v]),
                            hyp.state.advance(v, constraints),
                        )
                    )
        candidates.sort(key=_order_key)

        by_bank: dict[int, list[_DbaHypothesis]] = {}
        for cand in candidates:
            by_bank.setdefault(cand.state.bank(constraints), []).append(cand)
        selected: list[_DbaHypothesis] = []
        taken: set[int] = set()
        for bank in sorted(by_bank, reverse=True):
            if len(selected) == config.beam_size:
                break
            top = by_bank[bank][0]
            selected.append(top)
            taken.add(id(top))
        for cand in candidates:
            if len(selected) == config.beam_size:
                break
            if id(cand) not in taken:
                selected.append(cand)
                taken.add(id(cand))
        selected.sort(key=_order_key)
        live = [c for c in selected if not c.finished]
        for cand in selected:
            if cand.finished:
                best_full = _better(best_full, Hypothesis(cand.tokens, cand.logprob, True))
        if best_full is not None and all(h.logprob < best_full.logprob for h in live):
            return DbaResult(best_full, total_tokens, total_tokens, complete=True)

    best_partial: tuple[Hypothesis, int] | None = None
    for hyp in live:
        bank = hyp.state.bank(constraints)
        forced = Hypothesis(hyp.tokens, hyp.logprob, True)
        if bank == total_tokens:
            best_full = _better(best_full, forced)
        elif best_partial is None or _order_key(forced) < _order_key(best_partial[0]):
            best_partial = (forced, bank)
    if best_full is not None:
        return DbaResult(best_full, total_tokens, total_tokens, complete=True)
    assert best_partial is not None
    return DbaResult(best_partial[0], best_partial[1], total_tokens, complete=False)


def dba_search(
    params,
    model_config: ModelConfig,
    source: Sequence[int],
    constraints: Sequence[tuple[int, ...]],
    config: DecodeConfig,
) -> DbaResult:
    """Constrained decode; the result records how much of the constraints it met."""
    if not source:
        raise DomainError("cannot decode an empty source")
    for constraint in constraints:
        for token in constraint:
            if not 0 <= token < model_config.vocab_size:
                raise ConfigError(f"constraint token id {token} outside the model vocabulary")

    def step_fn(prefix: tuple[int, ...]) -> np.ndarray:
        return next_token_logprobs(params, model_config, source, prefix)

    return dba_search_core(
        step_fn, model_config.vocab_size, constraints, config, config.max_len(len(source))
    )


# ---------------------------------------------------------------------------
# Constraint selection
# ---------------------------------------------------------------------------


def select_constraints(
    source_mentions: Sequence[Mention], table: UtilizationTable, tau: float
) -> list[tuple[str, ...]]:
    """Surface forms of source concepts whose identity-mode rate exceeds ``tau``.

    Concepts with an undefined rate are skipped (logged).  Duplicate
    surface forms are removed; order follows mention position.
    """
    if any(label != cid for cid, label in table.concept_class.items()):
        raise DomainError("constraint selection needs an identity-mode utilization table")
    out: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    for mention in sorted(source_mentions, key=lambda m: (m.start, m.concept_id)):
        rate = table.rate_for_concept(mention.concept_id)
        if rate is None:
            logger.warning(
                "skipping constraint for %s: utilization rate undefined", mention.concept_id
            )
            continue
        if rate > tau and mention.matched_via and mention.matched_via not in seen:
            out.append(mention.matched_via)
            seen.add(mention.matched_via)
    return out


def encode_constraints(
    constraints: Sequence[tuple[str, ...]], vocab: Vocab
) -> list[tuple[int, ...]]:
    """Map surface-form constraints to vocabulary ids; OOV tokens are an error."""
    encoded = []
    for constraint in constraints:
        ids = []
        for token in constraint:
            token_id = vocab.token_to_id.get(token)
            if token_id is None:
                raise ConfigError(f"constraint token {token!r} is not in the vocabulary")
            ids.append(token_id)
        encoded.append(tuple(ids))
    return encoded

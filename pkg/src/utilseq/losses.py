"""Marginal-probability proxy and utilization losses.

The marginal probability of a token given a source is approximated by
the uniform average of its per-step conditional probability under
teacher forcing.  The utilization losses push that proxy up for every
token of a high-utilization concept found in the source: unweighted, all
such tokens equally; weighted, each token carries its concept's class
utilization rate.

Marginals are clamped at ``LOG_FLOOR`` before the log so that a token
the model currently assigns zero mass does not produce an infinite loss.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .corpus import ParallelPair, Vocab
from .errors import ConfigError, DomainError
from .model import ModelConfig, forward, nll_loss
from .ontology import Ontology
from .tensor import DropoutStream, Tensor
from .utilization import HighUtilSet, UtilizationTable

LOG_FLOOR = 1e-12

MODE_NONE = "none"
MODE_UNWEIGHTED = "unweighted"
MODE_CONCEPT = "concept_weighted"
MODE_SEMANTIC = "semantic_weighted"
WEIGHTED_MODES = (MODE_CONCEPT, MODE_SEMANTIC)
ALL_MODES = (MODE_NONE, MODE_UNWEIGHTED) + WEIGHTED_MODES


@dataclass
class UtilLossConfig:
    """Which utilization loss to add and how strongly.

    Weighted modes need a rate table estimated under the matching
    equivalence map (identity for concept weighting, semantic type for
    semantic weighting) on the training split.
    """

    mode: str = MODE_NONE
    alpha: float = 0.0
    table: UtilizationTable | None = None
    high_util: HighUtilSet | None = None

    def validate(self):
        if self.mode not in ALL_MODES:
            raise ConfigError(f"unknown utilization-loss mode {self.mode!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.active and self.high_util is None:
            raise ConfigError("active utilization loss needs a high-utilization set")
        if self.mode in WEIGHTED_MODES and self.alpha > 0 and self.table is None:
            raise ConfigError(f"mode {self.mode!r} requires a utilization table")

    @property
    def active(self) -> bool:
        return self.mode != MODE_NONE and self.alpha > 0.0


@dataclass(frozen=True)
class IndexedToken:
    """One concept token to regularize, with its concept and class weight."""

    token_id: int
    concept_id: str
    weight: float


ConceptTokenIndex = tuple[IndexedToken, ...]


def build_concept_token_index(
    pair: ParallelPair,
    ontology: Ontology,
    vocab: Vocab,
    config: UtilLossConfig,
) -> ConceptTokenIndex:
    """Token ids to push up for one pair.

    Every source mention of a high-utilization concept contributes each
    token of the concept's canonical form (so a concept mentioned twice
    contributes twice, and a two-token concept contributes two terms).
    Concept tokens missing from the vocabulary are skipped.
    """
    assert config.high_util is not None
    indexed: list[IndexedToken] = []
    for mention in pair.source_mentions:
        cid = mention.concept_id
        if cid not in config.high_util or cid not in ontology.selected:
            continue
        if config.mode in WEIGHTED_MODES:
            assert config.table is not None
            rate = config.table.rate_for_concept(cid)
            if rate is None:
                label = config.table.concept_class.get(cid, cid)
                raise ConfigError(
                    f"no defined utilization rate for class {label!r} (concept {cid!r})"
                )
            weight = rate
        else:
            weight = 1.0
        for token in ontology.concepts[cid].canonical:
            token_id = vocab.token_to_id.get(token)
            if token_id is None:
                continue
            indexed.append(IndexedToken(token_id, cid, weight))
    return tuple(indexed)


def marginal_probability(log_probs: Tensor, token_id: int) -> Tensor:
    """Mean over reference steps of p(token | y_<t, x): a scalar tensor."""
    if log_probs.ndim != 2 or log_probs.shape[0] == 0:
        raise DomainError("marginal_probability needs at least one step row")
    if not 0 <= token_id < log_probs.shape[1]:
        raise DomainError("token id outside the vocabulary axis")
    column = T.slice2d(log_probs, slice(None), slice(token_id, token_id + 1))
    return T.mean_all(T.exp(column))


def _log_marginals(index: ConceptTokenIndex, log_probs: Tensor) -> list[Tensor]:
    out = []
    for item in index:
        marginal = marginal_probability(log_probs, item.token_id)
        out.append(T.log(T.clamp_min(marginal, LOG_FLOOR)))
    return out


def unweighted_utilization_loss(index: ConceptTokenIndex, log_probs: Tensor) -> Tensor:
    """Negative mean log marginal over the indexed tokens; zero when empty."""
    if not index:
        return Tensor(0.0)
    logs = _log_marginals(index, log_probs)
    return T.neg(T.mul(T.add_n(logs), 1.0 / len(index)))


def weighted_utilization_loss(index: ConceptTokenIndex, log_probs: Tensor) -> Tensor:
    """Rate-weighted negative mean log marginal; zero when weights vanish."""
    if not index:
        return Tensor(0.0)
    total_weight = sum(item.weight for item in index)
    if total_weight <= 0.0:
        return Tensor(0.0)
    logs = _log_marginals(index, log_probs)
    terms = [T.mul(lt, item.weight) for lt, item in zip(logs, index)]
    return T.neg(T.mul(T.add_n(terms), 1.0 / total_weight))


def utilization_loss(index: ConceptTokenIndex, log_probs: Tensor, mode: str) -> Tensor:
    if mode == MODE_UNWEIGHTED:
        return unweighted_utilization_loss(index, log_probs)
    if mode in WEIGHTED_MODES:
        return weighted_utilization_loss(index, log_probs)
    raise ConfigError(f"no utilization loss for mode {mode!r}")


@dataclass
class LossParts:
    total: Tensor
    nll_value: float
    util_value: float


def total_loss(
    pair: ParallelPair,
    params,
    model_config: ModelConfig,
    util_config: UtilLossConfig,
    ontology: Ontology,
    vocab: Vocab,
    label_smoothing: float = 0.0,
    mode: str = "eval",
    dropout_stream: DropoutStream | None = None,
) -> LossParts:
    """Per-pair objective: teacher-forced NLL plus alpha times the utilization loss.

    With alpha zero or mode ``none`` the result is exactly the NLL
    (no extra tape nodes are created).
    """
    util_config.validate()
    source = vocab.encode(pair.source)
    reference = vocab.encode(pair.reference)
    rows = forward(
        params, model_config, source, reference, mode=mode, dropout_stream=dropout_stream
    )
    nll = nll_loss(rows, reference, label_smoothing)
    if not util_config.active:
        return LossParts(total=nll, nll_value=nll.item(), util_value=0.0)
    index = build_concept_token_index(pair, ontology, vocab, util_config)
    if not index:
        return LossParts(total=nll, nll_value=nll.item(), util_value=0.0)
    util = utilization_loss(index, rows, util_config.mode)
    total = T.add(nll, T.mul(util, util_config.alpha))
    return LossParts(total=total, nll_value=nll.item(), util_value=util.item())

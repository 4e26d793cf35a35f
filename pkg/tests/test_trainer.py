"""Optimizer schedule, Adam recurrence, early stopping, determinism."""

import math

import numpy as np
import pytest

from utilseq.corpus import Corpus, ParallelPair, build_vocab
from utilseq.errors import DomainError
from utilseq.losses import MODE_NONE, UtilLossConfig
from utilseq.model import ModelConfig, forward, init_params, save_checkpoint
from utilseq.ontology import Concept, Ontology
from utilseq.trainer import AdamState, TrainConfig, lr_at, train


class TestSchedule:
    def test_peak_at_warmup(self):
        config = TrainConfig(base_lr=5e-4, warmup_steps=400)
        assert lr_at(400, config) == pytest.approx(5e-4)

    def test_half_way_up_the_ramp(self):
        config = TrainConfig(base_lr=5e-4, warmup_steps=400)
        assert lr_at(200, config) == pytest.approx(2.5e-4)

    def test_inverse_sqrt_after_peak(self):
        config = TrainConfig(base_lr=5e-4, warmup_steps=400)
        assert lr_at(1600, config) == pytest.approx(2.5e-4)

    def test_step_zero_rejected(self):
        with pytest.raises(DomainError):
            lr_at(0, TrainConfig())


class TestAdam:
    def test_matches_hand_stepped_recurrence(self):
        config = TrainConfig(beta1=0.9, beta2=0.98, weight_decay=0.0, adam_eps=1e-8)
        params = {"x": np.array([2.0])}
        state = AdamState(params)
        m = v = 0.0
        x = 2.0
        lr = 1e-2
        for t in range(1, 20):
            g = 2.0 * params["x"][0]  # d(x^2)/dx
            state.step(params, {"x": np.array([g])}, lr, config)
            gm = 2.0 * x
            m = 0.9 * m + 0.1 * gm
            v = 0.98 * v + 0.02 * gm * gm
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.98**t)
            x = x - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
            assert params["x"][0] == pytest.approx(x, abs=1e-12), f"step {t}"

    def test_decoupled_weight_decay_applied_to_weights(self):
        config = TrainConfig(weight_decay=0.1)
        params = {"x": np.array([1.0])}
        state = AdamState(params)
        state.step(params, {"x": np.array([0.0])}, lr=0.5, config=config)
        # zero gradient: only the decay term moves the weight
        assert params["x"][0] == pytest.approx(1.0 - 0.5 * 0.1 * 1.0)


def tiny_corpus(pairs, split="train", vocab=None):
    vocab = vocab or build_vocab(pairs)
    return Corpus(pairs=list(pairs), split=split, vocab=vocab)


def word_pairs():
    return [
        ParallelPair(("take", "aspirin", "daily"), ("aspirin", "daily")),
        ParallelPair(("rest", "and", "hydrate"), ("rest", "hydrate")),
        ParallelPair(("check", "blood", "pressure"), ("check", "pressure")),
        ParallelPair(("take", "rest", "daily"), ("rest", "daily")),
    ]


EMPTY_ONTOLOGY = Ontology([Concept("C0", ("unused-token",), (), "T", ())])


def desk_model_config(vocab_size, dropout=0.0):
    return ModelConfig(
        vocab_size=vocab_size, embed_dim=16, hidden_dim=24, n_encoder_layers=1,
        n_decoder_layers=1, n_heads=1, dropout_rate=dropout, max_positions=16,
    )


class TestTrainLoop:
    def test_max_steps_zero_returns_initial_params(self):
        pairs = word_pairs()
        corpus = tiny_corpus(pairs)
        valid = tiny_corpus(pairs[:1], "valid", corpus.vocab)
        config = desk_model_config(len(corpus.vocab))
        params = init_params(config, 3)
        out, log = train(
            corpus, valid, params, config, TrainConfig(max_steps=0),
            UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY,
        )
        assert log == []
        for name in params:
            assert np.array_equal(out[name], params[name])

    def test_constant_objective_stops_at_second_evaluation(self):
        pairs = word_pairs()
        corpus = tiny_corpus(pairs)
        valid = tiny_corpus(pairs[:1], "valid", corpus.vocab)
        config = desk_model_config(len(corpus.vocab))
        params = init_params(config, 3)
        # lr 0 freezes the parameters, so the validation objective never moves
        train_config = TrainConfig(
            base_lr=0.0, max_steps=1000, eval_every=2, patience=1, seed=1,
            label_smoothing=0.0, weight_decay=0.0,
        )
        _, log = train(
            corpus, valid, params, config, train_config,
            UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY,
        )
        evals = [row for row in log if row.valid_objective is not None]
        assert len(evals) == 2
        assert log[-1].step == 4

    def test_memorizes_single_pair(self):
        """Overfitting one pair: NLL falls >=90% and per-step prob >=0.9."""
        pair = ParallelPair(("alpha", "beta", "gamma"), ("beta", "gamma", "delta"))
        corpus = tiny_corpus([pair])
        valid = tiny_corpus([pair], "valid", corpus.vocab)
        config = desk_model_config(len(corpus.vocab))
        params = init_params(config, 11)
        train_config = TrainConfig(
            base_lr=3e-3, warmup_steps=50, max_steps=500, eval_every=100,
            patience=50, batch_size=1, label_smoothing=0.0, weight_decay=0.0, seed=2,
        )
        best, log = train(
            corpus, valid, params, config, train_config,
            UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY,
        )
        assert log[-1].train_nll <= 0.1 * log[0].train_nll
        reference = corpus.vocab.encode(pair.reference)
        rows = forward(best, config, corpus.vocab.encode(pair.source), reference).data
        per_step = np.exp(rows[np.arange(len(reference)), reference])
        assert np.all(per_step >= 0.9), per_step

    def test_best_checkpoint_not_last(self):
        """The returned parameters match the minimal observed validation objective."""
        pairs = word_pairs()
        corpus = tiny_corpus(pairs)
        valid = tiny_corpus(pairs[:2], "valid", corpus.vocab)
        config = desk_model_config(len(corpus.vocab), dropout=0.2)
        params = init_params(config, 5)
        train_config = TrainConfig(
            base_lr=5e-3, warmup_steps=10, max_steps=60, eval_every=10,
            patience=100, batch_size=2, seed=3, label_smoothing=0.0,
        )
        best, log = train(
            corpus, valid, params, config, train_config,
            UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY,
        )
        evals = [row.valid_objective for row in log if row.valid_objective is not None]
        from utilseq.trainer import validation_objective

        best_obj = validation_objective(
            valid, best, config, UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY, 0.0
        )
        assert best_obj == pytest.approx(min(evals), abs=1e-9)

    def test_deterministic_given_seed(self, tmp_path):
        pairs = word_pairs()
        corpus = tiny_corpus(pairs)
        valid = tiny_corpus(pairs[:1], "valid", corpus.vocab)
        config = desk_model_config(len(corpus.vocab), dropout=0.3)
        train_config = TrainConfig(
            base_lr=1e-3, warmup_steps=10, max_steps=25, eval_every=10,
            patience=10, batch_size=2, seed=17,
        )

        def run(path):
            params = init_params(config, 9)
            best, _ = train(
                corpus, valid, params, config, train_config,
                UtilLossConfig(mode=MODE_NONE), EMPTY_ONTOLOGY,
            )
            save_checkpoint(path, config, best)

        run(tmp_path / "a.ckpt")
        run(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

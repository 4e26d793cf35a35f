"""Acceptance criteria: one test per criterion, each printing PASS or FAIL.

Criteria 5-7 share one trained-model matrix (5 seeds x {baseline,
semantic-weighted alpha grid} plus constrained decoding of the baseline),
so the expensive training happens once per session.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from utilseq import tensor as T
from utilseq.cli import main
from utilseq.config import write_config
from utilseq.decode import (
    DecodeConfig,
    beam_search,
    dba_search,
    encode_constraints,
    select_constraints,
)
from utilseq.evaluation import concept_f1, generated_utilization, stepwise_entropy
from utilseq.losses import (
    MODE_NONE,
    MODE_SEMANTIC,
    IndexedToken,
    UtilLossConfig,
    unweighted_utilization_loss,
    weighted_utilization_loss,
)
from utilseq.model import ModelConfig, bind_params, forward, init_params, nll_loss
from utilseq.ontology import PHI_IDENTITY, PHI_SEMANTIC, EquivalenceMap
from utilseq.recognizer import StopWordSet, recognize
from utilseq.synthgen import GeneratorSpec, TypeSpec, generate
from utilseq.tensor import Tape, Tensor, backward
from utilseq.trainer import TrainConfig, train
from utilseq.utilization import (
    all_selected_high_utilization,
    estimate,
    estimate_from_concept_sets,
    semantic_relative_error,
)

import test_tensor
from helpers import random_ontology, random_tokens
from oracles import (
    finite_difference_grad,
    oracle_recognize,
    oracle_utilization_counts,
    relative_grad_error,
)


def report(criterion: int, name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {criterion:2d} {name}: {status} {detail}")
    assert passed, f"criterion {criterion} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# 1. Utilization estimator equals the literal counting definition
# ---------------------------------------------------------------------------


def test_criterion_1_utilization_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(20240501)
    from utilseq.ontology import Concept, Ontology

    for trial in range(1000):
        n_concepts = int(rng.integers(1, 7))
        concepts = [
            Concept(f"C{i}", (f"tok{i}",), (), f"T{int(rng.integers(0, 3))}", ())
            for i in range(n_concepts)
        ]
        onto = Ontology(concepts)
        ids = [c.id for c in concepts]
        n_pairs = int(rng.integers(1, 6))
        pair_sets = [
            (
                {cid for cid in ids if rng.random() < 0.4},
                {cid for cid in ids if rng.random() < 0.3},
            )
            for _ in range(n_pairs)
        ]
        for mode in (PHI_IDENTITY, PHI_SEMANTIC):
            phi = EquivalenceMap(mode=mode)
            table = estimate_from_concept_sets(pair_sets, onto, phi)
            expected = oracle_utilization_counts(
                pair_sets, ids, lambda cid: phi.apply(onto, cid)
            )
            assert table.class_counts == expected, f"trial {trial} mode {mode}"
    elapsed = time.time() - start
    report(1, "utilization-oracle-equivalence", elapsed < 10.0, f"({elapsed:.1f}s, 1000 corpora)")


# ---------------------------------------------------------------------------
# 2. Recognizer equals the enumerate-all-subspans oracle
# ---------------------------------------------------------------------------


def test_criterion_2_recognizer_oracle_equivalence():
    start = time.time()
    from utilseq.ontology import Concept, Ontology

    # the two structured cases: hierarchy agglomeration and left priority
    hier = Ontology(
        [
            Concept("C_A", ("abdominal", "pain"), (), "F", ()),
            Concept("C_LA", ("lower", "abdominal", "pain"), (), "F", ("C_A",)),
        ]
    )
    got = recognize(["lower", "abdominal", "pain"], hier)
    assert [(m.concept_id, m.start, m.end) for m in got] == [("C_LA", 0, 3)]
    flat = Ontology(
        [Concept("C1", ("a", "b"), (), "F", ()), Concept("C2", ("b", "c"), (), "F", ())]
    )
    got = recognize(["a", "b", "c"], flat)
    assert [(m.concept_id, m.start, m.end) for m in got] == [("C1", 0, 2)]

    rng = np.random.default_rng(20240502)
    for trial in range(500):
        onto = random_ontology(rng, max_concepts=8)
        tokens = random_tokens(rng, max_len=12)
        use_stops = rng.random() < 0.5
        stops = StopWordSet.from_tokens(["t0"]) if use_stops else StopWordSet()
        got = [(m.concept_id, m.start, m.end) for m in recognize(tokens, onto, stops)]
        expected = oracle_recognize(tokens, onto, {"t0"} if use_stops else set())
        assert got == expected, f"trial {trial}: {tokens}"
    elapsed = time.time() - start
    report(2, "recognizer-oracle-equivalence", elapsed < 10.0, f"({elapsed:.1f}s, 500 cases)")


# ---------------------------------------------------------------------------
# 3. Gradient correctness: every op and the full objective
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_correctness():
    start = time.time()
    cases = test_tensor.TestGradientChecks.CASES
    for name, build in sorted(cases.items()):
        for seed in range(20):
            rng = np.random.default_rng(3000 + seed)
            x0 = rng.normal(size=(4, 3)) * 0.7
            if name == "relu":
                x0 = x0 + 0.05 * np.sign(x0) + (x0 == 0) * 0.1
            if name == "clamp_min":
                x0 = x0 + np.where(np.abs(x0 - 0.25) < 0.02, 0.1, 0.0)
            test_tensor._gradcheck(build, x0)

    # full objective (NLL + alpha * weighted utilization loss) end to end
    config = ModelConfig(
        vocab_size=7, embed_dim=4, hidden_dim=6, n_encoder_layers=1,
        n_decoder_layers=1, n_heads=1, dropout_rate=0.0, max_positions=8,
    )
    src, ref = [4, 5, 6], [5, 6, 4]
    index = (IndexedToken(5, "c5", 0.8), IndexedToken(6, "c6", 0.4))
    for seed in range(20):
        params = init_params(config, 4000 + seed)
        name = ["src_embed", "out.proj", "dec0.cross.wq", "enc0.ff.w2"][seed % 4]

        def objective(arr):
            trial = dict(params)
            trial[name] = arr
            rows = forward(trial, config, src, ref)
            loss = T.add(
                nll_loss(rows, ref, 0.1),
                T.mul(weighted_utilization_loss(index, rows), 0.7),
            )
            return loss.item()

        tape = Tape()
        bound = bind_params(tape, params)
        rows = forward(bound, config, src, ref)
        loss = T.add(
            nll_loss(rows, ref, 0.1), T.mul(weighted_utilization_loss(index, rows), 0.7)
        )
        analytic = backward(tape, loss).wrt(bound[name])
        numeric = finite_difference_grad(objective, params[name].copy(), eps=1e-4)
        err = relative_grad_error(analytic, numeric)
        assert err < 1e-4, f"objective grad wrt {name}: {err}"
    elapsed = time.time() - start
    report(3, "gradient-correctness", elapsed < 60.0, f"({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 4. Ground-truth recovery on a 5000-pair synthetic corpus
# ---------------------------------------------------------------------------

TRUE_RATES = (0.9, 0.7, 0.4, 0.1)


def test_criterion_4_ground_truth_recovery():
    start = time.time()
    spec = GeneratorSpec(
        seed=404,
        n_pairs=5000,
        semantic_types=tuple(
            TypeSpec(f"T{i}", rate, 10, 1.2) for i, rate in enumerate(TRUE_RATES)
        ),
        filler_vocab_size=50,
        source_len_range=(5, 9),
        reference_len_range=(3, 7),
    )
    corpora, onto, truth = generate(spec)
    pair_sets = [
        (
            {m.concept_id for m in pair.source_mentions},
            {m.concept_id for m in pair.reference_mentions},
        )
        for split in ("train", "valid", "test")
        for pair in corpora[split].pairs
    ]
    table = estimate_from_concept_sets(pair_sets, onto, EquivalenceMap(mode=PHI_SEMANTIC))
    detail = []
    ok = True
    for i, rate in enumerate(TRUE_RATES):
        num, den = table.class_counts[f"T{i}"]
        assert den >= 200, f"type T{i} has only {den} source events"
        estimate_value = num / den
        detail.append(f"T{i}: {estimate_value:.3f} vs {rate}")
        ok = ok and abs(estimate_value - rate) <= 0.05
    elapsed = time.time() - start
    report(4, "ground-truth-recovery", ok and elapsed < 30.0, f"({elapsed:.1f}s; {'; '.join(detail)})")


# ---------------------------------------------------------------------------
# The shared training matrix for criteria 5-8
# ---------------------------------------------------------------------------

SEEDS = (1, 2, 3, 4, 5)
SEMANTIC_ALPHAS = (0.5, 0.75, 1.0)
DBA_TAU = 0.6

EXPERIMENT_SPEC = GeneratorSpec(
    seed=7,
    n_pairs=720,
    semantic_types=tuple(TypeSpec(f"T{i}", r, 10, 1.2) for i, r in enumerate(TRUE_RATES)),
    filler_vocab_size=50,
    source_len_range=(5, 9),
    reference_len_range=(3, 7),
)


def experiment_model_config(vocab_size):
    return ModelConfig(
        vocab_size=vocab_size, embed_dim=48, hidden_dim=96,
        n_encoder_layers=1, n_decoder_layers=1,
    )


def experiment_train_config(seed):
    return TrainConfig(
        base_lr=2e-3, warmup_steps=80, batch_size=16, max_steps=700,
        eval_every=100, patience=5, seed=seed,
    )


@pytest.fixture(scope="session")
def experiment():
    """Train the full matrix once; returns per-seed metrics and DBA traces."""
    corpora, onto, _ = generate(EXPERIMENT_SPEC)
    train_c, valid_c, test_c = corpora["train"], corpora["valid"], corpora["test"]
    vocab = train_c.vocab
    model_cfg = experiment_model_config(len(vocab))
    phi_sem = EquivalenceMap(mode=PHI_SEMANTIC)
    sem_table = estimate(train_c, onto, phi_sem)
    id_table = estimate(train_c, onto, EquivalenceMap(mode=PHI_IDENTITY))
    hu = all_selected_high_utilization(onto)
    references = [pair.reference for pair in test_c.pairs]

    def fit(mode, alpha, seed):
        params = init_params(model_cfg, 100 + seed)
        util = UtilLossConfig(
            mode=mode,
            alpha=alpha,
            table=sem_table if mode == MODE_SEMANTIC else None,
            high_util=hu if mode != MODE_NONE else None,
        )
        best, _ = train(
            train_c, valid_c, params, model_cfg, experiment_train_config(seed), util, onto
        )
        return best

    def decode_plain(params):
        config = DecodeConfig(beam_size=5)
        return [
            tuple(
                vocab.decode(
                    beam_search(params, model_cfg, vocab.encode(p.source), config).tokens
                )
            )
            for p in test_c.pairs
        ]

    def decode_dba(params):
        config = DecodeConfig(beam_size=5, mode="dba", tau=DBA_TAU)
        traces = []
        for pair in test_c.pairs:
            constraints = select_constraints(pair.source_mentions, id_table, DBA_TAU)
            encoded = encode_constraints(constraints, vocab)
            result = dba_search(params, model_cfg, vocab.encode(pair.source), encoded, config)
            traces.append((tuple(vocab.decode(result.hypothesis.tokens)), constraints, result))
        return traces

    def mean_relative_error(outputs):
        model_table, ref_table = generated_utilization(outputs, test_c, onto, phi_sem)
        errors, _ = semantic_relative_error(model_table, ref_table)
        return sum(errors.values()) / len(errors)

    def early_entropy(params):
        series = stepwise_entropy(params, model_cfg, test_c, max_t=3)
        values = [value for _, value, count in series if count > 0]
        return float(np.mean(values))

    results = {}
    for seed in SEEDS:
        baseline = fit(MODE_NONE, 0.0, seed)
        base_outputs = decode_plain(baseline)
        dba_traces = decode_dba(baseline)
        dba_outputs = [tokens for tokens, _, _ in dba_traces]
        per_alpha = {}
        for alpha in SEMANTIC_ALPHAS:
            model = fit(MODE_SEMANTIC, alpha, seed)
            outputs = decode_plain(model)
            per_alpha[alpha] = {
                "relerr": mean_relative_error(outputs),
                "f1": concept_f1(outputs, references, onto)[2],
                "early_entropy": early_entropy(model),
            }
        results[seed] = {
            "baseline": {
                "relerr": mean_relative_error(base_outputs),
                "f1": concept_f1(base_outputs, references, onto)[2],
                "early_entropy": early_entropy(baseline),
            },
            "dba": {
                "f1": concept_f1(dba_outputs, references, onto)[2],
                "traces": dba_traces,
            },
            "semantic": per_alpha,
        }
    return results


def test_criterion_5_regularization_closes_utilization_gap(experiment):
    wins = sum(
        experiment[seed]["semantic"][1.0]["relerr"] < experiment[seed]["baseline"]["relerr"]
        for seed in SEEDS
    )
    detail = ", ".join(
        f"seed{seed}: {experiment[seed]['semantic'][1.0]['relerr']:.3f}<{experiment[seed]['baseline']['relerr']:.3f}"
        for seed in SEEDS
    )
    report(5, "regularization-closes-utilization-gap", wins >= 4, f"({wins}/5 seeds; {detail})")


def test_criterion_6_concept_f1_ordering(experiment):
    sem_wins = sum(
        max(experiment[seed]["semantic"][a]["f1"] for a in SEMANTIC_ALPHAS)
        > experiment[seed]["baseline"]["f1"]
        for seed in SEEDS
    )
    dba_wins = sum(
        experiment[seed]["dba"]["f1"] > experiment[seed]["baseline"]["f1"] for seed in SEEDS
    )
    detail = ", ".join(
        f"seed{seed}: base={experiment[seed]['baseline']['f1']:.3f} "
        f"sem={max(experiment[seed]['semantic'][a]['f1'] for a in SEMANTIC_ALPHAS):.3f} "
        f"dba={experiment[seed]['dba']['f1']:.3f}"
        for seed in SEEDS
    )
    report(
        6,
        "concept-f1-ordering",
        sem_wins >= 4 and dba_wins >= 4,
        f"(semantic {sem_wins}/5, dba {dba_wins}/5; {detail})",
    )


def test_criterion_7_early_entropy_reduction(experiment):
    wins = sum(
        experiment[seed]["semantic"][1.0]["early_entropy"]
        < experiment[seed]["baseline"]["early_entropy"]
        for seed in SEEDS
    )
    detail = ", ".join(
        f"seed{seed}: {experiment[seed]['semantic'][1.0]['early_entropy']:.3f}"
        f"<{experiment[seed]['baseline']['early_entropy']:.3f}"
        for seed in SEEDS
    )
    report(7, "early-entropy-reduction", wins >= 4, f"({wins}/5 seeds; {detail})")


def test_criterion_8_dba_hard_guarantee(experiment):
    total = complete = violations = 0
    for seed in SEEDS:
        for tokens, constraints, result in experiment[seed]["dba"]["traces"]:
            total += 1
            if not result.complete:
                continue
            complete += 1
            for constraint in constraints:
                if not any(
                    tokens[i : i + len(constraint)] == constraint
                    for i in range(len(tokens) - len(constraint) + 1)
                ):
                    violations += 1
    flagged = total - complete
    report(
        8,
        "dba-hard-guarantee",
        violations == 0,
        f"({complete}/{total} complete, {flagged} flagged partial "
        f"({flagged / total:.1%}), {violations} violations)",
    )


# ---------------------------------------------------------------------------
# 9. Reduction identities
# ---------------------------------------------------------------------------


def test_criterion_9_reduction_identities():
    # (a) an alpha=0 training run equals a pure-NLL run bitwise
    corpora, onto, _ = generate(replace(EXPERIMENT_SPEC, n_pairs=80))
    train_c, valid_c = corpora["train"], corpora["valid"]
    model_cfg = ModelConfig(
        vocab_size=len(train_c.vocab), embed_dim=12, hidden_dim=16,
        n_encoder_layers=1, n_decoder_layers=1,
    )
    hu = all_selected_high_utilization(onto)
    sem_table = estimate(train_c, onto, EquivalenceMap(mode=PHI_SEMANTIC))
    config = TrainConfig(base_lr=1e-3, warmup_steps=5, batch_size=8, max_steps=4,
                         eval_every=2, patience=5, seed=9)

    def run(util):
        params = init_params(model_cfg, 77)
        best, _ = train(train_c, valid_c, params, model_cfg, config, util, onto)
        return best

    pure = run(UtilLossConfig(mode=MODE_NONE, alpha=0.0))
    zeroed = run(UtilLossConfig(mode=MODE_SEMANTIC, alpha=0.0, table=sem_table, high_util=hu))
    bitwise = all(np.array_equal(pure[k], zeroed[k]) for k in pure)

    # (b) equal weights make the weighted loss equal the unweighted loss
    rng = np.random.default_rng(5)
    weights_ok = True
    for _ in range(50):
        raw = rng.uniform(-3.0, 0.0, size=(5, 8))
        rows = Tensor(raw - np.log(np.exp(raw).sum(axis=1, keepdims=True)))
        index = tuple(IndexedToken(int(t), f"c{t}", 0.42) for t in rng.integers(0, 8, size=3))
        lw = weighted_utilization_loss(index, rows).item()
        lu = unweighted_utilization_loss(index, rows).item()
        weights_ok = weights_ok and abs(lw - lu) < 1e-12

    # (c) empty constraints make dba output equal plain beam search exactly
    model_params = init_params(model_cfg, 12)
    decode_cfg = DecodeConfig(beam_size=4)
    search_ok = True
    for pair in corpora["test"].pairs[:5]:
        source = train_c.vocab.encode(pair.source)
        plain = beam_search(model_params, model_cfg, source, decode_cfg)
        via_dba = dba_search(model_params, model_cfg, source, [], decode_cfg)
        search_ok = search_ok and via_dba.hypothesis == plain and via_dba.complete

    report(
        9,
        "reduction-identities",
        bitwise and weights_ok and search_ok,
        f"(alpha0-bitwise={bitwise}, equal-weights={weights_ok}, empty-dba={search_ok})",
    )


# ---------------------------------------------------------------------------
# 10. Byte-identical reruns of every pipeline stage
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path):
    cfg = {
        "gen.seed": "21",
        "gen.n_pairs": "60",
        "gen.semantic_types": "T0:0.9:4:1.1,T1:0.3:4:1.1",
        "gen.filler_vocab_size": "15",
        "gen.source_len_range": "4:7",
        "gen.reference_len_range": "3:5",
        "model.embed_dim": "12",
        "model.hidden_dim": "16",
        "model.n_encoder_layers": "1",
        "model.n_decoder_layers": "1",
        "train.base_lr": "0.002",
        "train.warmup_steps": "10",
        "train.batch_size": "8",
        "train.max_steps": "6",
        "train.eval_every": "3",
        "util.all_selected": "1",
    }
    cfg_path = tmp_path / "exp.cfg"
    write_config(cfg, cfg_path)

    def pipeline(root):
        data = root / "data"
        main(["gen-data", "--spec", str(cfg_path), "--out", str(data)])
        run = root / "run"
        main(
            ["train", "--train", str(data / "corpus.train.jsonl"),
             "--valid", str(data / "corpus.valid.jsonl"),
             "--ontology", str(data / "ontology.jsonl"),
             "--out", str(run), "--config", str(cfg_path),
             "--util-loss", "semantic", "--alpha", "0.5", "--all-selected", "--seed", "3"]
        )
        dec = root / "dec"
        main(
            ["decode", "--ckpt", str(run / "checkpoint.bin"),
             "--corpus", str(data / "corpus.test.jsonl"), "--out", str(dec),
             "--mode", "dba", "--beam", "3", "--ontology", str(data / "ontology.jsonl"),
             "--train-corpus", str(data / "corpus.train.jsonl")]
        )
        ev = root / "eval"
        main(
            ["eval", "--outputs", str(dec / "outputs.txt"),
             "--corpus", str(data / "corpus.test.jsonl"),
             "--ontology", str(data / "ontology.jsonl"),
             "--ckpt", str(run / "checkpoint.bin"), "--out", str(ev), "--beam", "3"]
        )
        return {
            "corpus": (data / "corpus.train.jsonl").read_bytes(),
            "ontology": (data / "ontology.jsonl").read_bytes(),
            "truth": (data / "ground_truth.csv").read_bytes(),
            "checkpoint": (run / "checkpoint.bin").read_bytes(),
            "log": (run / "train_log.csv").read_bytes(),
            "outputs": (dec / "outputs.txt").read_bytes(),
            "meta": (dec / "decode_meta.csv").read_bytes(),
            "metrics": (ev / "metrics.csv").read_bytes(),
            "entropy": (ev / "entropy.csv").read_bytes(),
        }

    first = pipeline(tmp_path / "a")
    second = pipeline(tmp_path / "b")
    mismatched = [name for name in first if first[name] != second[name]]
    report(10, "byte-identical-reruns", not mismatched, f"(mismatched: {mismatched or 'none'})")

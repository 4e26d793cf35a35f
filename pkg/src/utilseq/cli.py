"""Command-line entry point.

Subcommands cover the full experiment pipeline: ``gen-data`` materializes
a synthetic corpus with known utilization rates, ``analyze`` estimates
utilization tables, ``train`` fits a model under a chosen regularizer,
``decode`` runs plain or constrained beam search, ``eval`` computes all
diagnostics, ``report`` renders plots, ``recognize`` exposes the concept
recognizer, and ``grid`` sweeps the alpha/mode/seed matrix and aggregates
mean and standard deviation per cell.

Every stage writes its resolved configuration (plus tool version and
seed) into the run directory, and every artifact is deterministic given
that configuration: rerunning a stage reproduces its outputs byte for
byte.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import parse_config, write_config
from .corpus import Corpus, load_corpus
from .decode import (
    DecodeConfig,
    beam_search,
    dba_search,
    encode_constraints,
    select_constraints,
)
from .errors import ConfigError, DomainError, NumericError, ParseError, UtilseqError, ValidationError
from .evaluation import (
    build_report,
    write_entropy_csv,
    write_metrics_csv,
    write_rank_csv,
    write_relative_error_csv,
)
from .losses import (
    MODE_CONCEPT,
    MODE_NONE,
    MODE_SEMANTIC,
    MODE_UNWEIGHTED,
    UtilLossConfig,
)
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .ontology import PHI_CUSTOM, PHI_IDENTITY, PHI_SEMANTIC, EquivalenceMap, load_ontology
from .recognizer import StopWordSet, load_stop_words, recognize
from .synthgen import emit, spec_from_config
from .trainer import TrainConfig, train, write_log_csv
from .utilization import (
    DEFAULT_LIFT_THRESHOLD,
    all_selected_high_utilization,
    estimate,
    identify_high_utilization,
    write_table_csv,
)

MODE_BY_FLAG = {
    "none": MODE_NONE,
    "unweighted": MODE_UNWEIGHTED,
    "concept": MODE_CONCEPT,
    "semantic": MODE_SEMANTIC,
}


def derive_seed(root: int, label: str) -> int:
    """Deterministic per-module seed split from one root seed."""
    digest = hashlib.blake2b(f"{root}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**63)


def _phi_from_flag(value: str) -> EquivalenceMap:
    if value == "identity":
        return EquivalenceMap(mode=PHI_IDENTITY)
    if value == "semantic":
        return EquivalenceMap(mode=PHI_SEMANTIC)
    if value.startswith("custom:"):
        table = parse_config(value.split(":", 1)[1])
        return EquivalenceMap(mode=PHI_CUSTOM, custom_table=table)
    raise ConfigError(f"unknown phi {value!r} (expected identity|semantic|custom:<path>)")


def _load_stops(path: str | None) -> StopWordSet | None:
    return load_stop_words(path) if path else None


def _echo_config(outdir: Path, stage: str, settings: dict[str, str]) -> None:
    payload = dict(settings)
    payload["run.stage"] = stage
    payload["run.version"] = __version__
    write_config(payload, outdir / f"{stage}.echo.cfg")


def _read_outputs(path: Path) -> list[list[str]]:
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return [line.split() if line else [] for line in lines]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_gen_data(spec_path: str, outdir: str, seed_override: int | None = None) -> Path:
    config = parse_config(spec_path)
    if seed_override is not None:
        config["gen.seed"] = str(seed_override)
    spec = spec_from_config(config)
    out = Path(outdir)
    emit(spec, out)
    _echo_config(out, "gen-data", config)
    return out


def run_recognize(ontology_path: str, stops_path: str | None, input_path: str | None, out_path: str | None) -> None:
    ontology = load_ontology(ontology_path)
    stops = _load_stops(stops_path)
    source = Path(input_path).open("r", encoding="utf-8") if input_path else sys.stdin
    sink = Path(out_path).open("w", encoding="utf-8") if out_path else sys.stdout
    try:
        for index, line in enumerate(source):
            tokens = line.split()
            if not tokens:
                continue
            for mention in recognize(tokens, ontology, stops):
                sink.write(f"{index}\t{mention.concept_id}\t{mention.start}\t{mention.end}\n")
    finally:
        if input_path:
            source.close()
        if out_path:
            sink.close()


def run_analyze(
    corpus_path: str,
    ontology_path: str,
    phi_flag: str,
    out_path: str,
    stops_path: str | None = None,
    lift_threshold: float = DEFAULT_LIFT_THRESHOLD,
    all_selected: bool = False,
    hu_out: str | None = None,
) -> None:
    ontology = load_ontology(ontology_path)
    stops = _load_stops(stops_path)
    corpus = load_corpus(corpus_path, ontology, stops)
    phi = _phi_from_flag(phi_flag)
    table = estimate(corpus, ontology, phi)
    write_table_csv(table, out_path)
    if hu_out:
        if all_selected:
            hu = all_selected_high_utilization(ontology)
        else:
            hu = identify_high_utilization(table, lift_threshold)
        with Path(hu_out).open("w", encoding="utf-8") as handle:
            for cid in sorted(hu.concept_ids):
                handle.write(cid + "\n")


def _build_util_config(
    mode_flag: str,
    alpha: float,
    train_corpus: Corpus,
    ontology,
    all_selected: bool,
    lift_threshold: float,
) -> UtilLossConfig:
    """Assemble the loss config; tables always come from the training split."""
    mode = MODE_BY_FLAG[mode_flag]
    config = UtilLossConfig(mode=mode, alpha=alpha)
    if not config.active:
        return UtilLossConfig(mode=mode, alpha=alpha, high_util=None, table=None)
    if all_selected:
        hu = all_selected_high_utilization(ontology)
    else:
        semantic_table = estimate(train_corpus, ontology, EquivalenceMap(mode=PHI_SEMANTIC))
        hu = identify_high_utilization(semantic_table, lift_threshold)
    table = None
    if mode == MODE_CONCEPT:
        table = estimate(train_corpus, ontology, EquivalenceMap(mode=PHI_IDENTITY))
    elif mode == MODE_SEMANTIC:
        table = estimate(train_corpus, ontology, EquivalenceMap(mode=PHI_SEMANTIC))
    return UtilLossConfig(mode=mode, alpha=alpha, table=table, high_util=hu)


def run_train(
    train_path: str,
    valid_path: str,
    ontology_path: str,
    outdir: str,
    stops_path: str | None = None,
    util_mode: str = "none",
    alpha: float = 0.0,
    seed: int = 0,
    all_selected: bool = False,
    lift_threshold: float = DEFAULT_LIFT_THRESHOLD,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    resume: str | None = None,
    settings: dict[str, str] | None = None,
) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ontology = load_ontology(ontology_path)
    stops = _load_stops(stops_path)
    train_corpus = load_corpus(train_path, ontology, stops)
    valid_corpus = load_corpus(valid_path, ontology, stops)

    if model_config is None:
        model_config = ModelConfig(vocab_size=len(train_corpus.vocab))
    if train_config is None:
        train_config = TrainConfig()
    train_config.seed = derive_seed(seed, "train")

    util_config = _build_util_config(
        util_mode, alpha, train_corpus, ontology, all_selected, lift_threshold
    )
    if resume:
        ckpt_config, params = load_checkpoint(resume)
        if ckpt_config != model_config:
            raise ConfigError("resume checkpoint was trained with a different model config")
    else:
        params = init_params(model_config, derive_seed(seed, "init"))

    best_params, log = train(
        train_corpus, valid_corpus, params, model_config, train_config, util_config, ontology
    )
    save_checkpoint(out / "checkpoint.bin", model_config, best_params)
    write_log_csv(log, out / "train_log.csv")
    echo = dict(settings or {})
    echo.update(
        {
            "run.seed": str(seed),
            "util.mode": util_mode,
            "util.alpha": f"{alpha:g}",
            "util.all_selected": str(int(all_selected)),
            "util.lift_threshold": f"{lift_threshold:g}",
        }
    )
    _echo_config(out, "train", echo)
    return out / "checkpoint.bin"


def run_decode(
    ckpt_path: str,
    corpus_path: str,
    outdir: str,
    ontology_path: str | None = None,
    stops_path: str | None = None,
    train_corpus_path: str | None = None,
    decode_config: DecodeConfig | None = None,
    settings: dict[str, str] | None = None,
) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    config = decode_config or DecodeConfig()
    config.validate()
    model_config, params = load_checkpoint(ckpt_path)
    ontology = load_ontology(ontology_path) if ontology_path else None
    stops = _load_stops(stops_path)
    corpus = load_corpus(corpus_path, ontology, stops)
    vocab = corpus.vocab
    if len(vocab) != model_config.vocab_size:
        raise ConfigError(
            f"corpus vocabulary ({len(vocab)}) does not match the checkpoint "
            f"({model_config.vocab_size})"
        )

    identity_table = None
    if config.mode == "dba":
        if ontology is None or train_corpus_path is None:
            raise ConfigError("dba mode needs --ontology and --train-corpus for rate estimation")
        train_corpus = load_corpus(train_corpus_path, ontology, stops)
        identity_table = estimate(train_corpus, ontology, EquivalenceMap(mode=PHI_IDENTITY))

    lines: list[str] = []
    meta_rows: list[list] = []
    for index, pair in enumerate(corpus.pairs):
        source = vocab.encode(pair.source)
        if config.mode == "plain":
            hyp = beam_search(params, model_config, source, config)
            satisfied, total, complete = 0, 0, 1
        else:
            assert identity_table is not None
            constraints = select_constraints(pair.source_mentions, identity_table, config.tau)
            encoded = encode_constraints(constraints, vocab)
            result = dba_search(params, model_config, source, encoded, config)
            hyp = result.hypothesis
            satisfied, total = result.satisfied_tokens, result.total_constraint_tokens
            complete = int(result.complete)
        lines.append(" ".join(vocab.decode(hyp.tokens)))
        meta_rows.append([index, f"{hyp.logprob:.10g}", satisfied, total, complete])

    (out / "outputs.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with (out / "decode_meta.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "logprob", "constraints_satisfied", "constraints_total", "complete"])
        writer.writerows(meta_rows)
    echo = dict(settings or {})
    echo.update(
        {
            "decode.mode": config.mode,
            "decode.beam_size": str(config.beam_size),
            "decode.tau": f"{config.tau:g}",
        }
    )
    _echo_config(out, "decode", echo)
    return out / "outputs.txt"


def run_eval(
    outputs_path: str,
    corpus_path: str,
    ontology_path: str,
    ckpt_path: str,
    outdir: str,
    stops_path: str | None = None,
    phi_flag: str = "semantic",
    decode_config: DecodeConfig | None = None,
    max_t: int = 10,
    settings: dict[str, str] | None = None,
) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ontology = load_ontology(ontology_path)
    stops = _load_stops(stops_path)
    corpus = load_corpus(corpus_path, ontology, stops)
    model_config, params = load_checkpoint(ckpt_path)
    outputs = _read_outputs(Path(outputs_path))
    config = decode_config or DecodeConfig()
    max_lens = [config.max_len(len(pair.source)) for pair in corpus.pairs]
    report = build_report(
        outputs,
        corpus,
        ontology,
        _phi_from_flag(phi_flag),
        params,
        model_config,
        config.beam_size,
        max_lens,
        stops=stops,
        max_t=max_t,
    )
    write_metrics_csv(report, out / "metrics.csv")
    write_relative_error_csv(report, out / "relative_error.csv")
    write_entropy_csv(report, out / "entropy.csv")
    write_rank_csv(report, out / "rank.csv")
    echo = dict(settings or {})
    echo["eval.phi"] = phi_flag
    _echo_config(out, "eval", echo)
    return out / "metrics.csv"


def run_report(eval_dirs: list[str], outdir: str) -> None:
    """Render entropy and relative-error curves as deterministic SVG files."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "utilseq"
    import matplotlib.pyplot as plt

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    for eval_dir in eval_dirs:
        label = Path(eval_dir).name
        with (Path(eval_dir) / "entropy.csv").open("r", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        ts = [int(r["t"]) for r in rows if int(r["n_pairs"]) > 0]
        values = [float(r["mean_entropy"]) for r in rows if int(r["n_pairs"]) > 0]
        ax.plot(ts, values, marker="o", label=label)
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mean entropy (nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "entropy.svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(eval_dirs), 1)
    all_classes: list[str] = []
    series = []
    for eval_dir in eval_dirs:
        with (Path(eval_dir) / "relative_error.csv").open("r", encoding="utf-8") as handle:
            rows = [r for r in csv.DictReader(handle) if r["skipped"] == "0"]
        errors = {r["class"]: float(r["relative_error"]) for r in rows}
        series.append((Path(eval_dir).name, errors))
        for label in errors:
            if label not in all_classes:
                all_classes.append(label)
    all_classes.sort()
    xs = np.arange(len(all_classes))
    for offset, (name, errors) in enumerate(series):
        heights = [errors.get(label, 0.0) for label in all_classes]
        ax.bar(xs + offset * width, heights, width=width, label=name)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(all_classes, rotation=45, ha="right")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "relative_error.svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def _model_config_from(config: dict[str, str], vocab_size: int) -> ModelConfig:
    def geti(key: str, default: int) -> int:
        return int(config.get(key, default))

    return ModelConfig(
        vocab_size=vocab_size,
        embed_dim=geti("model.embed_dim", 32),
        hidden_dim=geti("model.hidden_dim", 64),
        n_encoder_layers=geti("model.n_encoder_layers", 2),
        n_decoder_layers=geti("model.n_decoder_layers", 2),
        n_heads=geti("model.n_heads", 1),
        dropout_rate=float(config.get("model.dropout_rate", 0.3)),
        share_embeddings=bool(int(config.get("model.share_embeddings", "0"))),
        max_positions=geti("model.max_positions", 64),
    )


def _train_config_from(config: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        beta1=float(config.get("train.beta1", 0.9)),
        beta2=float(config.get("train.beta2", 0.98)),
        base_lr=float(config.get("train.base_lr", 5e-4)),
        warmup_steps=int(config.get("train.warmup_steps", 400)),
        weight_decay=float(config.get("train.weight_decay", 1e-4)),
        batch_size=int(config.get("train.batch_size", 16)),
        max_steps=int(config.get("train.max_steps", 1000)),
        eval_every=int(config.get("train.eval_every", 200)),
        patience=int(config.get("train.patience", 5)),
        label_smoothing=float(config.get("train.label_smoothing", 0.1)),
    )


def _decode_config_from(config: dict[str, str], mode: str) -> DecodeConfig:
    return DecodeConfig(
        beam_size=int(config.get("decode.beam_size", 5)),
        min_len=int(config.get("decode.min_len", 0)),
        max_len_factor=float(config.get("decode.max_len_factor", 1.2)),
        max_len_offset=int(config.get("decode.max_len_offset", 10)),
        mode=mode,
        tau=float(config.get("decode.tau", 0.6)),
    )


def _read_cell_metrics(eval_dir: Path) -> dict[str, float]:
    metrics: dict[str, float] = {}
    with (eval_dir / "metrics.csv").open("r", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            metrics[row["metric"]] = float(row["value"])
    with (eval_dir / "entropy.csv").open("r", encoding="utf-8") as handle:
        rows = [r for r in csv.DictReader(handle) if int(r["t"]) <= 3 and int(r["n_pairs"]) > 0]
    if rows:
        metrics["early_entropy"] = sum(float(r["mean_entropy"]) for r in rows) / len(rows)
    else:
        metrics["early_entropy"] = 0.0
    return metrics


def aggregate_mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (zero for a single value)."""
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def run_grid(
    config_path: str,
    outdir: str,
    seeds: list[int],
    alphas: list[float],
    modes: list[str],
) -> Path:
    config = parse_config(config_path)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    run_gen_data(config_path, str(data_dir))

    ontology_path = str(data_dir / "ontology.jsonl")
    train_path = str(data_dir / "corpus.train.jsonl")
    valid_path = str(data_dir / "corpus.valid.jsonl")
    test_path = str(data_dir / "corpus.test.jsonl")
    ontology = load_ontology(ontology_path)
    train_corpus = load_corpus(train_path, ontology)
    model_config = _model_config_from(config, len(train_corpus.vocab))
    base_train = _train_config_from(config)
    all_selected = bool(int(config.get("util.all_selected", "1")))
    lift_threshold = float(config.get("util.lift_threshold", str(DEFAULT_LIFT_THRESHOLD)))

    cells: dict[tuple[str, float], dict[str, list[float]]] = {}

    def record(cell: tuple[str, float], eval_dir: Path) -> None:
        metrics = _read_cell_metrics(eval_dir)
        bucket = cells.setdefault(cell, {})
        for key, value in metrics.items():
            bucket.setdefault(key, []).append(value)

    def run_cell(seed: int, name: str, mode_flag: str, alpha: float, ckpt: Path | None = None) -> Path:
        cell_dir = out / f"seed{seed}" / name
        if ckpt is None:
            train_config = dataclasses.replace(base_train)
            ckpt = run_train(
                train_path,
                valid_path,
                ontology_path,
                str(cell_dir),
                util_mode=mode_flag,
                alpha=alpha,
                seed=seed,
                all_selected=all_selected,
                lift_threshold=lift_threshold,
                model_config=model_config,
                train_config=train_config,
                settings=config,
            )
        decode_mode = "dba" if name == "dba" else "plain"
        run_decode(
            str(ckpt),
            test_path,
            str(cell_dir / "decode"),
            ontology_path=ontology_path,
            train_corpus_path=train_path,
            decode_config=_decode_config_from(config, decode_mode),
            settings=config,
        )
        run_eval(
            str(cell_dir / "decode" / "outputs.txt"),
            test_path,
            ontology_path,
            str(ckpt),
            str(cell_dir / "eval"),
            decode_config=_decode_config_from(config, decode_mode),
            settings=config,
        )
        return ckpt

    for seed in seeds:
        baseline_ckpt = run_cell(seed, "baseline", "none", 0.0)
        record(("baseline", 0.0), out / f"seed{seed}" / "baseline" / "eval")
        run_cell(seed, "dba", "none", 0.0, ckpt=baseline_ckpt)
        record(("dba", 0.0), out / f"seed{seed}" / "dba" / "eval")
        for mode_flag in modes:
            for alpha in alphas:
                if alpha == 0.0:
                    continue
                name = f"{mode_flag}-a{alpha:g}"
                run_cell(seed, name, mode_flag, alpha)
                record((mode_flag, alpha), out / f"seed{seed}" / name / "eval")

    metric_names = ["concept_f1", "mean_relative_error", "early_entropy", "degenerate_fraction"]
    with (out / "aggregate.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        header = ["model", "alpha"]
        for name in metric_names:
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)

        def cell_order(key: tuple[str, float]):
            order = {"baseline": 0, "dba": 1, "unweighted": 2, "concept": 3, "semantic": 4}
            return (order.get(key[0], 9), key[1])

        for cell in sorted(cells, key=cell_order):
            row: list = [cell[0], f"{cell[1]:g}"]
            for name in metric_names:
                values = cells[cell].get(name, [])
                if values:
                    mean, std = aggregate_mean_std(values)
                    row += [f"{mean:.10g}", f"{std:.10g}"]
                else:
                    row += ["", ""]
            writer.writerow(row)
    return out / "aggregate.csv"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utilseq", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"utilseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus with known rates")
    p.add_argument("--spec", required=True, help="generator config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override gen.seed")

    p = sub.add_parser("recognize", help="extract concept mentions from token lines")
    p.add_argument("--ontology", required=True)
    p.add_argument("--stops", default=None)
    p.add_argument("--input", default=None, help="default stdin")
    p.add_argument("--out", default=None, help="default stdout")

    p = sub.add_parser("analyze", help="estimate utilization rates of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--phi", default="semantic", help="identity|semantic|custom:<path>")
    p.add_argument("--stops", default=None)
    p.add_argument("--lift-threshold", type=float, default=DEFAULT_LIFT_THRESHOLD)
    p.add_argument("--all-selected", action="store_true")
    p.add_argument("--out", required=True, help="utilization table CSV")
    p.add_argument("--hu-out", default=None, help="write high-utilization concept ids here")

    p = sub.add_parser("train", help="train a model with the chosen regularizer")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--stops", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="config file; flags override")
    p.add_argument("--util-loss", choices=sorted(MODE_BY_FLAG), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--all-selected", action="store_true")
    p.add_argument("--lift-threshold", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("decode", help="beam-search decode a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["plain", "dba"], default="plain")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--min-len", type=int, default=0)
    p.add_argument("--ontology", default=None)
    p.add_argument("--stops", default=None)
    p.add_argument("--train-corpus", default=None, help="rates source for dba constraints")

    p = sub.add_parser("eval", help="compute all diagnostics for decoded outputs")
    p.add_argument("--outputs", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stops", default=None)
    p.add_argument("--phi", default="semantic")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-t", type=int, default=10)

    p = sub.add_parser("report", help="render entropy and relative-error plots")
    p.add_argument("--eval-dir", action="append", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid", help="run the alpha x mode x seed matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--modes", default="unweighted,concept,semantic")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        if stage == "gen-data":
            run_gen_data(args.spec, args.out, args.seed)
        elif stage == "recognize":
            run_recognize(args.ontology, args.stops, args.input, args.out)
        elif stage == "analyze":
            run_analyze(
                args.corpus, args.ontology, args.phi, args.out,
                stops_path=args.stops, lift_threshold=args.lift_threshold,
                all_selected=args.all_selected, hu_out=args.hu_out,
            )
        elif stage == "train":
            config = parse_config(args.config) if args.config else {}
            ontology = load_ontology(args.ontology)
            train_corpus = load_corpus(args.train, ontology, _load_stops(args.stops))
            model_config = _model_config_from(config, len(train_corpus.vocab))
            train_config = _train_config_from(config)
            if args.max_steps is not None:
                train_config.max_steps = args.max_steps
            util_mode = args.util_loss or config.get("util.mode", "none")
            alpha = args.alpha if args.alpha is not None else float(config.get("util.alpha", "0"))
            seed = args.seed if args.seed is not None else int(config.get("run.seed", "0"))
            all_selected = args.all_selected or bool(int(config.get("util.all_selected", "0")))
            lift = (
                args.lift_threshold
                if args.lift_threshold is not None
                else float(config.get("util.lift_threshold", str(DEFAULT_LIFT_THRESHOLD)))
            )
            run_train(
                args.train, args.valid, args.ontology, args.out,
                stops_path=args.stops, util_mode=util_mode, alpha=alpha, seed=seed,
                all_selected=all_selected, lift_threshold=lift,
                model_config=model_config, train_config=train_config,
                resume=args.resume, settings=config,
            )
        elif stage == "decode":
            run_decode(
                args.ckpt, args.corpus, args.out,
                ontology_path=args.ontology, stops_path=args.stops,
                train_corpus_path=args.train_corpus,
                decode_config=DecodeConfig(
                    beam_size=args.beam, min_len=args.min_len, mode=args.mode, tau=args.tau
                ),
            )
        elif stage == "eval":
            run_eval(
                args.outputs, args.corpus, args.ontology, args.ckpt, args.out,
                stops_path=args.stops, phi_flag=args.phi,
                decode_config=DecodeConfig(beam_size=args.beam), max_t=args.max_t,
            )
        elif stage == "report":
            run_report(args.eval_dir, args.out)
        elif stage == "grid":
            run_grid(
                args.config,
                args.out,
                seeds=[int(s) for s in args.seeds.split(",") if s],
                alphas=[float(a) for a in args.alphas.split(",") if a],
                modes=[m for m in args.modes.split(",") if m],
            )
    except ConfigError as exc:
        print(f"utilseq {stage}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, DomainError, FileNotFoundError) as exc:
        print(f"utilseq {stage}: data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"utilseq {stage}: numeric failure: {exc}", file=sys.stderr)
        return 4
    except UtilseqError as exc:
        print(f"utilseq {stage}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

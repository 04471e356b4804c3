"""Command-line entry point.

Subcommands wire the library into reproducible experiments:

    gen-data       synthesize in-domain and out-of-domain corpora
    train          train the recognizer and the fusion LM
    train-lenpred  train the output-length predictor
    decode         beam-search a manifest (optionally truncating)
    analyze        per-utterance report CSV + summary JSON
    sweep          one-axis hyperparameter sweep table

Every run is a pure function of (config, seed): outputs under --out-dir are
byte-identical across re-runs; wall-clock timestamps only ever go to
run.log. Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

import argparse
import datetime
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from echotrap import corpus, decode, experiment, lenpred, metrics, model, train
from echotrap.errors import (
    ConfigurationError,
    DataError,
    EchotrapError,
    NumericalError,
)
from echotrap.util import substream
from echotrap.vocab import build_vocab

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib


def load_default_config() -> dict:
    text = resources.files("echotrap").joinpath("default_config.toml").read_text()
    return tomllib.loads(text)


def _merge_strict(defaults, overrides, path=""):
    merged = dict(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {path + key!r} must be a table")
            merged[key] = _merge_strict(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def load_config(path=None) -> dict:
    config = load_default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            user = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"bad config file {path}: {exc}") from exc
        config = _merge_strict(config, user)
    return config


class _Run:
    """Output directory bookkeeping: produced-file manifest plus run.log."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, relative: str) -> Path:
        self.files.append(relative)
        p = self.out_dir / relative
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def log(self, message: str) -> None:
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        with open(self.out_dir / "run.log", "a") as fh:
            fh.write(f"{stamp} {message}\n")

    def finish(self) -> None:
        manifest = self.out_dir / "files.json"
        with open(manifest, "w") as fh:
            json.dump({"files": sorted(self.files)}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _corpus_specs(config, seed):
    c = config["corpus"]
    for key in ("n_train", "n_dev", "n_test", "n_ood"):
        if c[key] < 1:
            raise ConfigurationError(f"corpus.{key} must be at least 1, got {c[key]}")
    common = dict(
        vocab_size=c["vocab_size"],
        feature_dim=c["feature_dim"],
        motif_frames=c["motif_frames"],
        frame_period_ms=c["frame_period_ms"],
        seed=seed,
        ood_bias=c["ood_bias"],
        ood_perturbation=c["ood_perturbation"],
    )
    spec_in = corpus.CorpusSpec(
        n_utterances=c["n_train"] + c["n_dev"] + c["n_test"],
        duration_range=tuple(c["in_duration"]),
        domain=corpus.IN_DOMAIN,
        noise_level=c["in_noise"],
        repeat_prob=c["in_repeat_prob"],
        **common,
    )
    spec_ood = corpus.CorpusSpec(
        n_utterances=c["n_ood"],
        duration_range=tuple(c["ood_duration"]),
        domain=corpus.OUT_OF_DOMAIN,
        noise_level=c["ood_noise"],
        repeat_prob=c["ood_repeat_prob"],
        **common,
    )
    return spec_in, spec_ood


def _train_config(section: dict) -> train.TrainConfig:
    return train.TrainConfig(
        epochs=section["epochs"],
        lr=section["lr"],
        batch_size=section["batch_size"],
        clip_norm=section["clip_norm"],
        plateau_patience=section["plateau_patience"],
        plateau_min_delta=section["plateau_min_delta"],
        lr_decay=section["lr_decay"],
        min_lr=section["min_lr"],
        feature_noise=section["feature_noise"],
    )


def _decoder_config(config, args) -> decode.DecoderConfig:
    d = config["decode"]
    cfg = decode.DecoderConfig(
        beam_width=d["beam_width"],
        k=d["k"],
        alpha=d["alpha"],
        lm_weight=d["lm_weight"],
        max_output_tokens=d["max_output_tokens"],
    )
    if getattr(args, "beam", None) is not None:
        cfg = replace(cfg, beam_width=args.beam)
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if getattr(args, "lm_weight", None) is not None:
        cfg = replace(cfg, lm_weight=args.lm_weight)
    if getattr(args, "max_tokens", None) is not None:
        cfg = replace(cfg, max_output_tokens=args.max_tokens)
    cfg.validate()
    return cfg


def _threshold(config, args):
    value = config["metrics"]["threshold_chars"]
    if getattr(args, "threshold_chars", None) is not None:
        value = args.threshold_chars
    if value == "auto":
        return "auto"
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"threshold-chars must be an integer or 'auto', got {value!r}"
        ) from None


def _write_loss_csv(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,step,train_loss,dev_loss,lr\n")
        for rec in history:
            fh.write(
                f"{rec.epoch},{rec.step},{rec.train_loss!r},{rec.dev_loss!r},{rec.lr!r}\n"
            )


def cmd_gen_data(args, config) -> int:
    seed = args.seed if args.seed is not None else config["seed"]
    c = config["corpus"]
    spec_in, spec_ood = _corpus_specs(config, seed)
    run = _Run(args.out_dir)
    run.log(f"gen-data seed={seed}")
    utts = corpus.generate_corpus(spec_in)
    train_set, dev_set, test_set = corpus.split_corpus(
        utts, [c["n_train"], c["n_dev"], c["n_test"]]
    )
    ood_set = corpus.generate_corpus(spec_ood)
    for name, subset in (
        ("train", train_set), ("dev", dev_set), ("test", test_set), ("ood", ood_set),
    ):
        manifest = run.path(f"{name}.jsonl")
        corpus.write_manifest(subset, manifest, feature_dir_name=f"features_{name}")
        for utt in subset:
            run.files.append(f"features_{name}/{utt.utterance_id}.feat")
        print(f"wrote {manifest} ({len(subset)} utterances)")
    run.finish()
    return 0


def cmd_train(args, config) -> int:
    seed = args.seed if args.seed is not None else config["seed"]
    data_dir = Path(args.data)
    train_set = corpus.read_manifest(data_dir / "train.jsonl")
    dev_path = data_dir / "dev.jsonl"
    dev_set = corpus.read_manifest(dev_path) if dev_path.exists() else None
    c = config["corpus"]
    m = config["model"]
    model_config = model.Seq2SeqConfig(
        vocab_size=c["vocab_size"],
        feature_dim=c["feature_dim"] * m["stack"],
        hidden=m["hidden"],
        embed=m["embed"],
        stack=m["stack"],
        label_smoothing=m["label_smoothing"],
    )
    run = _Run(args.out_dir)
    run.log(f"train seed={seed} n_train={len(train_set)}")
    params, history = train.train_seq2seq(
        train_set, model_config, _train_config(config["train"]),
        substream(seed, "seq2seq"), dev_corpus=dev_set,
    )
    model.save_seq2seq(run.path("seq2seq.ckpt"), params)
    _write_loss_csv(history, run.path("train_loss.csv"))
    print(f"seq2seq: {params.n_parameters()} parameters, "
          f"{len(history)} epochs, final dev loss {history[-1].dev_loss:.4f}")

    lm_params, lm_history = train.train_lm(
        [utt.reference_tokens for utt in train_set], c["vocab_size"],
        _train_config(config["train_lm"]), substream(seed, "lm"),
        embed=m["lm_embed"], hidden=m["lm_hidden"],
    )
    model.save_lm(run.path("lm.ckpt"), lm_params)
    _write_loss_csv(lm_history, run.path("lm_loss.csv"))
    print(f"lm: {len(lm_history)} epochs, final loss {lm_history[-1].train_loss:.4f}")
    run.finish()
    return 0


def cmd_train_lenpred(args, config) -> int:
    seed = args.seed if args.seed is not None else config["seed"]
    data_dir = Path(args.data)
    train_set = corpus.read_manifest(data_dir / "train.jsonl")
    dev_path = data_dir / "dev.jsonl"
    dev_set = corpus.read_manifest(dev_path) if dev_path.exists() else None
    run = _Run(args.out_dir)
    run.log(f"train-lenpred seed={seed}")
    if args.init_encoder:
        seq2seq = model.load_seq2seq(args.init_encoder)
        init = lenpred.init_from_encoder(seq2seq)
        encoder_count = sum(
            getattr(seq2seq, name).size for name in model.Seq2SeqParams.ENCODER_FIELDS
        )
        feature_count = init.feature_net_parameter_count()
        match = "match" if feature_count == encoder_count else "MISMATCH"
        print(f"feature net initialized from encoder: {feature_count} parameters "
              f"({match} with encoder's {encoder_count})")
    else:
        c = config["corpus"]
        m = config["model"]
        init = lenpred.init_random(
            c["feature_dim"] * m["stack"], m["hidden"], m["stack"],
            substream(seed, "lenpred-init"),
        )
    params, history = lenpred.train_length_predictor(
        train_set, init, _train_config(config["train_lenpred"]),
        substream(seed, "lenpred"), dev_corpus=dev_set,
    )
    lenpred.save_length_predictor(run.path("lenpred.ckpt"), params)
    _write_loss_csv(history, run.path("lenpred_loss.csv"))
    eval_set = dev_set if dev_set else train_set
    mae = lenpred.mean_absolute_error(params, eval_set)
    mean_len = float(np.mean([lenpred.length_target(u) for u in eval_set]))
    with open(run.path("lenpred_eval.json"), "w") as fh:
        json.dump(
            {"mae": mae, "mean_reference_tokens": mean_len, "n_utterances": len(eval_set)},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    print(f"length predictor MAE {mae:.3f} tokens (mean reference {mean_len:.2f})")
    run.finish()
    return 0


_WORKER_STATE = {}


def _init_decode_worker(seq2seq_path, lm_path, lenpred_path, dcfg, eta, truncate_flag):
    params = model.load_seq2seq(seq2seq_path)
    vocab = build_vocab(params.config.vocab_size)
    _WORKER_STATE["scorer"] = model.Seq2SeqScorer(params, vocab)
    _WORKER_STATE["lm"] = (
        model.LanguageModel(model.load_lm(lm_path)) if lm_path else None
    )
    lp = lenpred.load_length_predictor(lenpred_path) if lenpred_path else None
    _WORKER_STATE["n_hat_fn"] = (
        (lambda feats: (lenpred.lambda_forward(lp, feats), lenpred.predict_length(lp, feats)))
        if (lp is not None and truncate_flag) else None
    )
    _WORKER_STATE["config"] = dcfg
    _WORKER_STATE["eta"] = eta if truncate_flag else None


def _decode_task(utt):
    record, trace = experiment.decode_utterance(
        _WORKER_STATE["scorer"], utt, _WORKER_STATE["config"], _WORKER_STATE["lm"],
        _WORKER_STATE["n_hat_fn"], _WORKER_STATE["eta"],
    )
    return record, np.asarray(trace)


def cmd_decode(args, config) -> int:
    utterances = corpus.read_manifest(args.manifest)
    dcfg = _decoder_config(config, args)
    if args.lm is None and dcfg.lm_weight > 0:
        dcfg = replace(dcfg, lm_weight=0.0)  # no LM given: fusion is off
    eta = args.eta if args.eta is not None else config["truncation"]["eta"]
    if args.truncate and not args.lenpred:
        raise ConfigurationError("--truncate needs --lenpred CHECKPOINT")
    workers = args.workers if args.workers is not None else config["workers"]
    if workers == 0:
        workers = os.cpu_count() or 1
    run = _Run(args.out_dir)
    run.log(f"decode manifest={args.manifest} beam={dcfg.beam_width} alpha={dcfg.alpha} "
            f"lm_weight={dcfg.lm_weight} truncate={args.truncate} workers={workers}")

    lm_path = args.lm if (args.lm and dcfg.lm_weight > 0) else None
    init_args = (args.seq2seq, lm_path, args.lenpred, dcfg, eta, args.truncate)
    if workers > 1 and len(utterances) > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_decode_worker, initargs=init_args
        ) as pool:
            outcomes = list(pool.map(_decode_task, utterances, chunksize=4))
    else:
        _init_decode_worker(*init_args)
        outcomes = [_decode_task(utt) for utt in utterances]
    outcomes.sort(key=lambda pair: pair[0]["utterance_id"])

    records = [record for record, _ in outcomes]
    decode.write_results_jsonl(records, run.path("results.jsonl"))
    for record, trace in outcomes:
        decode.write_attention_csv(trace, run.path(f"attention/{record['utterance_id']}.csv"))
    if args.truncate:
        with open(run.path("predictions.jsonl"), "w") as fh:
            for record in records:
                fh.write(json.dumps(
                    {"utterance_id": record["utterance_id"],
                     "lambda": record["lambda"], "n_hat": record["n_hat"]},
                    sort_keys=True,
                ) + "\n")
    print(f"decoded {len(records)} utterances -> {run.out_dir / 'results.jsonl'}")
    run.finish()
    return 0


def cmd_analyze(args, config) -> int:
    references = corpus.read_manifest(args.manifest)
    records = decode.read_results_jsonl(args.results)
    attention_dir = Path(args.attention_dir) if args.attention_dir else (
        Path(args.results).parent / "attention"
    )
    decoded = []
    for record in records:
        trace = None
        trace_path = attention_dir / f"{record['utterance_id']}.csv"
        if trace_path.exists():
            trace = decode.read_attention_csv(trace_path)
        decoded.append(metrics.DecodedUtterance(
            utterance_id=record["utterance_id"],
            transcript=record["transcript"],
            attention_trace=trace,
        ))
    reports, summary = metrics.corpus_report(
        decoded, references,
        threshold_chars=_threshold(config, args),
        stall_radius=config["metrics"]["stall_radius"],
    )
    run = _Run(args.out_dir)
    run.log(f"analyze results={args.results}")
    metrics.write_report_csv(reports, run.path("report.csv"))
    metrics.write_summary_json(summary, run.path("summary.json"))
    print(f"{summary['n_utterances']} utterances, {summary['n_flagged']} flagged "
          f"(threshold {summary['threshold_chars']} chars)"
          + (f", mean WER {summary['mean_wer']:.3f}" if summary["mean_wer"] is not None else ""))
    run.finish()
    return 0


def cmd_sweep(args, config) -> int:
    in_utts = corpus.read_manifest(args.in_manifest)
    ood_utts = corpus.read_manifest(args.ood_manifest)
    params = model.load_seq2seq(args.seq2seq)
    vocab = build_vocab(params.config.vocab_size)
    scorer = model.Seq2SeqScorer(params, vocab)
    lm = model.LanguageModel(model.load_lm(args.lm)) if args.lm else None
    n_hat_fn = None
    if args.lenpred:
        lp = lenpred.load_length_predictor(args.lenpred)
        n_hat_fn = lambda feats: (
            lenpred.lambda_forward(lp, feats), lenpred.predict_length(lp, feats)
        )
    dcfg = _decoder_config(config, args)
    if lm is None and args.axis != "lm_weight" and dcfg.lm_weight > 0:
        dcfg = replace(dcfg, lm_weight=0.0)  # no LM given: fusion is off
    values = config["sweep"][args.axis]
    run = _Run(args.out_dir)
    run.log(f"sweep axis={args.axis} values={values}")
    rows = experiment.run_sweep(
        args.axis, values, scorer, in_utts, ood_utts, dcfg,
        lm=lm, n_hat_fn=n_hat_fn, threshold_chars=_threshold(config, args),
    )
    out_path = run.path(f"sweep_{args.axis}.csv")
    experiment.write_sweep_csv(rows, out_path)
    for row in rows:
        print(f"{args.axis}={row['value']}: flagged={row['flagged_count']} "
              f"in_wer={row['in_domain_wer']} ood_wer={row['out_of_domain_wer']}")
    run.finish()
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="echotrap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file overriding the defaults")
        p.add_argument("--seed", type=int, help="experiment seed (overrides config)")
        p.add_argument("--out-dir", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="synthesize corpora and write manifests")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the recognizer and fusion LM")
    common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl/dev.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lenpred", help="train the output-length predictor")
    common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl/dev.jsonl")
    p.add_argument("--init-encoder", help="seq2seq checkpoint to warm-start the feature net")
    p.set_defaults(func=cmd_train_lenpred)

    p = sub.add_parser("decode", help="beam-search decode a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seq2seq", required=True, help="recognizer checkpoint")
    p.add_argument("--lm", help="language-model checkpoint for shallow fusion")
    p.add_argument("--lenpred", help="length-predictor checkpoint")
    p.add_argument("--truncate", action="store_true",
                   help="truncate outputs at eta times the predicted length")
    p.add_argument("--eta", type=float, help="truncation multiple (overrides config)")
    p.add_argument("--alpha", type=float, help="length-normalization exponent")
    p.add_argument("--beam", type=int, help="beam width")
    p.add_argument("--lm-weight", type=float, help="shallow-fusion weight")
    p.add_argument("--max-tokens", type=int, help="output-length cap")
    p.add_argument("--workers", type=int, help="worker processes (0 = all cores)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("analyze", help="report CSV + summary JSON from decode results")
    common(p)
    p.add_argument("--results", required=True, help="results.jsonl from decode")
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--attention-dir", help="attention CSVs (default: next to results)")
    p.add_argument("--threshold-chars", help="echographic threshold or 'auto'")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="decode across one hyperparameter axis")
    common(p)
    p.add_argument("--axis", required=True, choices=experiment.SWEEP_AXES)
    p.add_argument("--in-manifest", required=True)
    p.add_argument("--ood-manifest", required=True)
    p.add_argument("--seq2seq", required=True)
    p.add_argument("--lm")
    p.add_argument("--lenpred")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--lm-weight", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--threshold-chars", help="echographic threshold or 'auto'")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config)
        return args.func(args, config)
    except ConfigurationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (EchotrapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

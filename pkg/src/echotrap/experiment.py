"""Corpus-level experiment plumbing: decode a corpus, sweep one axis.

These run sequentially over utterances; the CLI adds an optional process
pool on top for corpus decoding. Everything here is a pure function of its
arguments, so parallel and sequential runs produce identical outputs.
"""

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from echotrap import decode, lenpred, metrics
from echotrap.errors import ConfigurationError


def decode_utterance(scorer, utt, config, lm=None, n_hat_fn=None, eta=None):
    """Decode one utterance; returns (jsonl record, attention trace).

    When `n_hat_fn` and `eta` are given, the record's transcript is the
    truncated one and carries the predicted rate and length. The attention
    trace is always the raw best hypothesis's trace.
    """
    result = decode.beam_search(scorer, utt.features, config, lm)
    record = decode.result_record(utt.utterance_id, result)
    if n_hat_fn is not None and eta is not None:
        lam, n_hat = n_hat_fn(utt.features)
        kept = lenpred.truncate(result.best.tokens, n_hat, eta)
        transcript = decode.detokenize(kept, scorer.vocab)
        record.update({
            "lambda": lam,
            "n_hat": n_hat,
            "raw_char_count": record["char_count"],
            "transcript": transcript,
            "char_count": len(transcript),
        })
    return record, result.best.attention_trace


def _mean_wer(records_by_id, references):
    values = []
    for ref in references:
        ref_words = metrics.transcript_words(ref.reference_text)
        if not ref_words:
            continue
        hyp = metrics.transcript_words(records_by_id[ref.utterance_id]["transcript"])
        values.append(metrics.wer(ref_words, hyp))
    return float(np.mean(values)) if values else None


def _flag_count(records_by_id, references, threshold):
    return sum(
        metrics.is_echographic(records_by_id[ref.utterance_id]["char_count"], threshold)
        for ref in references
    )


def _row(records_by_id, value, in_utterances, ood_utterances, threshold):
    return {
        "value": value,
        "flagged_count": _flag_count(records_by_id, ood_utterances, threshold),
        "in_domain_wer": _mean_wer(records_by_id, in_utterances),
        "out_of_domain_wer": _mean_wer(records_by_id, ood_utterances),
    }


SWEEP_AXES = ("alpha", "eta", "beam", "lm_weight")


def run_sweep(axis, values, scorer, in_utterances, ood_utterances, base_config,
              lm=None, n_hat_fn=None, threshold_chars="auto"):
    """One row per grid value: (value, flagged_count, in/out-of-domain WER).

    flagged_count counts echographic decodes among the out-of-domain
    utterances, which is how the phenomenon is tallied against an
    out-of-domain evaluation set. The flagging threshold is resolved once
    from the references, so rows are comparable. For the eta axis the corpus
    is decoded once and only the truncation multiple varies; other axes
    re-decode per value with otherwise-identical settings.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigurationError(f"empty sweep grid for axis {axis!r}")
    if axis == "eta" and n_hat_fn is None:
        raise ConfigurationError("eta sweep needs a length predictor")
    if axis == "lm_weight" and lm is None and any(v > 0 for v in values):
        raise ConfigurationError("lm_weight sweep needs a language model")
    if threshold_chars == "auto":
        threshold_chars = metrics.auto_threshold(list(in_utterances) + list(ood_utterances))
    threshold_chars = int(threshold_chars)
    everything = list(in_utterances) + list(ood_utterances)

    rows = []
    if axis == "eta":
        raw = {
            utt.utterance_id: decode.beam_search(scorer, utt.features, base_config, lm)
            for utt in everything
        }
        n_hats = {utt.utterance_id: n_hat_fn(utt.features)[1] for utt in everything}
        for eta in sorted(values):
            records = {}
            for utt_id, result in raw.items():
                kept = lenpred.truncate(result.best.tokens, n_hats[utt_id], eta)
                transcript = decode.detokenize(kept, scorer.vocab)
                records[utt_id] = {
                    "utterance_id": utt_id,
                    "transcript": transcript,
                    "char_count": len(transcript),
                }
            rows.append(_row(records, eta, in_utterances, ood_utterances, threshold_chars))
        return rows

    for value in sorted(values):
        if axis == "alpha":
            config = replace(base_config, alpha=float(value))
        elif axis == "beam":
            config = replace(base_config, beam_width=int(value))
        else:
            config = replace(base_config, lm_weight=float(value))
        records = {}
        for utt in everything:
            record, _ = decode_utterance(scorer, utt, config, lm)
            records[utt.utterance_id] = record
        rows.append(_row(records, value, in_utterances, ood_utterances, threshold_chars))
    return rows


def write_sweep_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "flagged_count", "in_domain_wer", "out_of_domain_wer"])
        for row in rows:
            writer.writerow([
                row["value"],
                row["flagged_count"],
                "" if row["in_domain_wer"] is None else repr(row["in_domain_wer"]),
                "" if row["out_of_domain_wer"] is None else repr(row["out_of_domain_wer"]),
            ])

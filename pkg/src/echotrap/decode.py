"""Beam-search decoding with length normalization and shallow LM fusion.

Hypotheses are ranked by their accumulated fused log-probability divided by
the length-normalization term LP(|Y|) = (K + |Y|)^alpha / (K + 1)^alpha,
where |Y| counts emitted tokens (EOS included, BOS not). With alpha = 0 the
ranking falls back to the raw log-probability.

EOS policy: a hypothesis that emits EOS moves to a finished pool and never
competes for beam slots; active beams keep expanding until they hit the
output-length cap. The best hypothesis is chosen from the finished pool by
normalized score, falling back to the unfinished survivors only when nothing
ever finished. Ties break toward shorter, then lexicographically smaller
token sequences, which makes the search exactly reproducible and directly
comparable to brute-force enumeration.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from echotrap.corpus import FeatureSequence
from echotrap.errors import ConfigurationError, DataError, NumericalError
from echotrap.util import log_softmax
from echotrap.vocab import TokenVocab


@dataclass(frozen=True)
class DecoderConfig:
    beam_width: int = 4
    k: float = 5.0
    alpha: float = 1.0
    lm_weight: float = 0.25
    max_output_tokens: int = 150

    def validate(self):
        if self.beam_width < 1:
            raise ConfigurationError(f"beam width must be >= 1, got {self.beam_width}")
        if self.k < 0:
            raise ConfigurationError(f"K must be nonnegative, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lm_weight < 0:
            raise ConfigurationError(f"lm weight must be nonnegative, got {self.lm_weight}")
        if self.max_output_tokens < 1:
            raise ConfigurationError(
                f"max output tokens must be >= 1, got {self.max_output_tokens}"
            )


def length_penalty(length: int, k: float = 5.0, alpha: float = 1.0) -> float:
    """LP(length) = (k + length)^alpha / (k + 1)^alpha."""
    return (k + length) ** alpha / (k + 1.0) ** alpha


def fused_step_scores(am_logits, lm_logprobs=None, lm_weight: float = 0.0) -> np.ndarray:
    """Shallow fusion: log_softmax(acoustic logits) + lm_weight * LM log-probs."""
    scores = log_softmax(np.asarray(am_logits, dtype=np.float64))
    if lm_logprobs is None or lm_weight == 0.0:
        return scores
    return scores + lm_weight * np.asarray(lm_logprobs, dtype=np.float64)


@dataclass(frozen=True)
class Hypothesis:
    """One beam entry; tokens start at BOS and may end with EOS."""

    tokens: tuple
    log_prob: float
    normalized_score: float
    finished: bool
    attention_rows: tuple = ()
    scorer_state: object = field(default=None, repr=False, compare=False)
    lm_state: object = field(default=None, repr=False, compare=False)

    @property
    def length(self) -> int:
        """|Y|: emitted tokens, EOS included, BOS excluded."""
        return len(self.tokens) - 1

    @property
    def attention_trace(self) -> np.ndarray:
        if not self.attention_rows:
            return np.zeros((0, 0))
        return np.vstack(self.attention_rows)


def hypothesis_sort_key(hyp: Hypothesis):
    return (-hyp.normalized_score, hyp.length, hyp.tokens)


@dataclass(frozen=True)
class DecodeResult:
    best: Hypothesis
    n_best: tuple
    transcript: str
    char_count: int


def detokenize(tokens, vocab: TokenVocab) -> str:
    """Space-joined surfaces; BOS/EOS render empty; unknown ids raise."""
    return vocab.detokenize(tokens)


def _result(pool, beam_width, vocab) -> DecodeResult:
    ranked = sorted(pool, key=hypothesis_sort_key)
    best = ranked[0]
    transcript = detokenize(best.tokens, vocab)
    return DecodeResult(
        best=best,
        n_best=tuple(ranked[:beam_width]),
        transcript=transcript,
        char_count=len(transcript),
    )


def beam_search(scorer, features: FeatureSequence, config: DecoderConfig,
                lm=None) -> DecodeResult:
    """Length-normalized beam search over a Scorer (optionally LM-fused)."""
    config.validate()
    if features.n_frames < 1:
        raise ValueError("cannot decode an empty feature sequence")
    vocab = scorer.vocab
    expand_ids = [v for v in range(vocab.size) if v != vocab.bos_id]
    root = Hypothesis(
        tokens=(vocab.bos_id,),
        log_prob=0.0,
        normalized_score=0.0,
        finished=False,
        scorer_state=scorer.encode(features),
        lm_state=lm.initial_state() if lm is not None else None,
    )
    active = [root]
    finished = []
    for step in range(1, config.max_output_tokens + 1):
        lp = length_penalty(step, config.k, config.alpha)
        candidates = []
        for hyp in active:
            out = scorer.step(hyp.scorer_state, hyp.tokens[-1])
            if lm is not None:
                lm_logp, lm_next = lm.step(hyp.lm_state, hyp.tokens[-1])
            else:
                lm_logp, lm_next = None, None
            fused = fused_step_scores(out.logits, lm_logp, config.lm_weight)
            rows = hyp.attention_rows + (out.attention,)
            for v in expand_ids:
                log_prob = hyp.log_prob + float(fused[v])
                if log_prob == -np.inf:
                    continue  # zero-probability continuation, not a hypothesis
                child = Hypothesis(
                    tokens=hyp.tokens + (v,),
                    log_prob=log_prob,
                    normalized_score=log_prob / lp,
                    finished=v == vocab.eos_id,
                    attention_rows=rows,
                    scorer_state=out.decoder_state,
                    lm_state=lm_next,
                )
                if child.finished:
                    finished.append(child)
                else:
                    candidates.append(child)
        if not candidates:
            active = []
            break
        candidates.sort(key=hypothesis_sort_key)
        active = candidates[: config.beam_width]
    pool = finished if finished else active
    if not pool:
        raise NumericalError("no hypothesis with nonzero probability")
    return _result(pool, config.beam_width, vocab)


def greedy_decode(scorer, features: FeatureSequence, config: DecoderConfig,
                  lm=None) -> DecodeResult:
    """Single-path decoding under the same fused, normalized score.

    Follows the locally best content token at every step while recording the
    EOS continuation as a finished candidate; selection and tie-breaking are
    the beam-width-1 policy, against which this is tested.
    """
    config.validate()
    if features.n_frames < 1:
        raise ValueError("cannot decode an empty feature sequence")
    vocab = scorer.vocab
    state = scorer.encode(features)
    lm_state = lm.initial_state() if lm is not None else None
    tokens = [vocab.bos_id]
    log_prob = 0.0
    rows = ()
    best_finished = None
    content_mask = np.zeros(vocab.size, dtype=bool)
    content_mask[list(vocab.content_ids)] = True
    for step in range(1, config.max_output_tokens + 1):
        out = scorer.step(state, tokens[-1])
        if lm is not None:
            lm_logp, lm_state_next = lm.step(lm_state, tokens[-1])
        else:
            lm_logp, lm_state_next = None, None
        fused = fused_step_scores(out.logits, lm_logp, config.lm_weight)
        lp = length_penalty(step, config.k, config.alpha)
        rows_here = rows + (out.attention,)

        eos_log_prob = log_prob + float(fused[vocab.eos_id])
        if eos_log_prob > -np.inf:
            eos_hyp = Hypothesis(
                tokens=tuple(tokens) + (vocab.eos_id,),
                log_prob=eos_log_prob,
                normalized_score=eos_log_prob / lp,
                finished=True,
                attention_rows=rows_here,
            )
            if best_finished is None or (
                hypothesis_sort_key(eos_hyp) < hypothesis_sort_key(best_finished)
            ):
                best_finished = eos_hyp

        masked = np.where(content_mask, fused, -np.inf)
        v = int(np.argmax(masked))
        if masked[v] == -np.inf:
            break
        tokens.append(v)
        log_prob += float(fused[v])
        rows = rows_here
        state = out.decoder_state
        lm_state = lm_state_next
    if best_finished is not None:
        return _result([best_finished], 1, vocab)
    survivor = Hypothesis(
        tokens=tuple(tokens),
        log_prob=log_prob,
        normalized_score=log_prob / length_penalty(len(tokens) - 1, config.k, config.alpha),
        finished=False,
        attention_rows=rows,
    )
    return _result([survivor], 1, vocab)


def result_record(utterance_id: str, result: DecodeResult) -> dict:
    """JSON-lines record for one decoded utterance."""
    return {
        "utterance_id": utterance_id,
        "transcript": result.transcript,
        "char_count": result.char_count,
        "n_best": [
            {
                "normalized_score": h.normalized_score,
                "log_prob": h.log_prob,
                "n_tokens": h.length,
                "finished": h.finished,
            }
            for h in result.n_best
        ],
    }


def write_results_jsonl(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_results_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    records = []
    with open(path) as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"bad results record at line {line_number}: {exc.msg}") from exc
    return records


ATTENTION_CSV_HEADER = (
    "# attention trace: rows = output steps (one per emitted token), "
    "columns = encoded frame indices"
)


def write_attention_csv(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace = np.asarray(trace, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(ATTENTION_CSV_HEADER + "\n")
        for row in trace:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_attention_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"attention trace not found: {path}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows, dtype=np.float64)

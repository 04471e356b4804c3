"""Toy attention encoder-decoder, fusion LM, and oracle scorers.

The acoustic model is a one-layer bidirectional tanh RNN encoder with a
single-head additive-attention recurrent decoder, small enough to train on a
synthetic motif corpus in seconds yet exhibiting the same decoding pathologies
as full-scale attention models. Everything runs in float64 and is
deterministic given the parameters.

The decoder side of the package talks to models through the `Scorer`
interface (encode once, then step token by token), which is also implemented
by a provably-looping pathological oracle and by a replay adapter over
externally dumped per-step logs.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from echotrap import checkpoint, kernels
from echotrap.corpus import FeatureSequence, stack_frames
from echotrap.errors import DataError
from echotrap.util import log_softmax, softmax
from echotrap.vocab import TokenVocab, build_vocab


@dataclass(frozen=True)
class Seq2SeqConfig:
    vocab_size: int = 32
    feature_dim: int = 32  # input dim seen by the encoder, after stacking
    hidden: int = 32  # encoder output width; decoder state is half this
    embed: int = 16
    stack: int = 4
    label_smoothing: float = 0.05

    def __post_init__(self):
        if self.hidden % 2:
            raise ValueError(f"hidden must be even (bidirectional), got {self.hidden}")

    @property
    def hidden_per_direction(self) -> int:
        return self.hidden // 2

    @property
    def decoder_hidden(self) -> int:
        return self.hidden // 2


@dataclass
class Seq2SeqParams:
    """All weights of the toy model, float64, checkpointable in field order."""

    config: Seq2SeqConfig
    embed: np.ndarray
    enc_fwd_wx: np.ndarray
    enc_fwd_wh: np.ndarray
    enc_fwd_b: np.ndarray
    enc_bwd_wx: np.ndarray
    enc_bwd_wh: np.ndarray
    enc_bwd_b: np.ndarray
    att_w: np.ndarray
    att_u: np.ndarray
    att_v: np.ndarray
    att_b: np.ndarray
    dec_wi: np.ndarray
    dec_wc: np.ndarray
    dec_ws: np.ndarray
    dec_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    ARRAY_FIELDS = (
        "embed",
        "enc_fwd_wx", "enc_fwd_wh", "enc_fwd_b",
        "enc_bwd_wx", "enc_bwd_wh", "enc_bwd_b",
        "att_w", "att_u", "att_v", "att_b",
        "dec_wi", "dec_wc", "dec_ws", "dec_b",
        "out_w", "out_b",
    )
    ENCODER_FIELDS = (
        "enc_fwd_wx", "enc_fwd_wh", "enc_fwd_b",
        "enc_bwd_wx", "enc_bwd_wh", "enc_bwd_b",
    )

    def named_arrays(self):
        return [(name, getattr(self, name)) for name in self.ARRAY_FIELDS]

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


def _orthogonal(rng: np.random.Generator, n: int, scale: float = 0.9) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return scale * (q * np.sign(np.diag(r)))


def init_seq2seq(config: Seq2SeqConfig, rng: np.random.Generator) -> Seq2SeqParams:
    """Small uniform init; recurrent matrices orthogonal for stable plain SGD."""
    d, h, e, v = config.feature_dim, config.hidden, config.embed, config.vocab_size
    hd = config.hidden_per_direction
    s = config.decoder_hidden

    def u(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    return Seq2SeqParams(
        config=config,
        embed=u(v, e),
        enc_fwd_wx=u(d, hd), enc_fwd_wh=_orthogonal(rng, hd), enc_fwd_b=np.zeros(hd),
        enc_bwd_wx=u(d, hd), enc_bwd_wh=_orthogonal(rng, hd), enc_bwd_b=np.zeros(hd),
        att_w=u(h, s), att_u=u(s, s), att_v=u(s), att_b=np.zeros(s),
        dec_wi=u(e, s), dec_wc=u(h, s), dec_ws=_orthogonal(rng, s), dec_b=np.zeros(s),
        out_w=u(s + h, v), out_b=np.zeros(v),
    )


@dataclass(frozen=True)
class EncoderState:
    """Encoded frames (T', hidden) plus precomputed attention keys (T', hidden)."""

    enc: np.ndarray
    keys: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.enc.shape[0]


@dataclass(frozen=True)
class StepOutput:
    """One decoder step: V logits, attention over encoded frames, next state."""

    logits: np.ndarray
    attention: np.ndarray
    decoder_state: object


def encode(params: Seq2SeqParams, features: FeatureSequence) -> EncoderState:
    """Bidirectional encoder pass over (already stacked) features."""
    x = features.frames.astype(np.float64)
    if x.shape[1] != params.config.feature_dim:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match model dim {params.config.feature_dim}"
        )
    h_fwd = kernels.rnn_tanh_forward(x, params.enc_fwd_wx, params.enc_fwd_wh, params.enc_fwd_b)
    h_bwd = kernels.rnn_tanh_forward(
        x[::-1], params.enc_bwd_wx, params.enc_bwd_wh, params.enc_bwd_b
    )[::-1]
    enc = np.concatenate([h_fwd, h_bwd], axis=1)
    keys = enc @ params.att_w + params.att_b
    return EncoderState(enc=enc, keys=keys)


def attention_forward(params: Seq2SeqParams, enc_state: EncoderState, s: np.ndarray):
    """Additive attention given the current decoder state: (u, alpha, context)."""
    u = np.tanh(enc_state.keys + s @ params.att_u)
    alpha = softmax(u @ params.att_v)
    context = alpha @ enc_state.enc
    return u, alpha, context


def cell_forward(params: Seq2SeqParams, emb_vec, context, s_prev):
    return np.tanh(
        emb_vec @ params.dec_wi
        + context @ params.dec_wc
        + s_prev @ params.dec_ws
        + params.dec_b
    )


def decode_step(
    params: Seq2SeqParams,
    enc_state: EncoderState,
    decoder_state: np.ndarray,
    prev_token: int,
) -> StepOutput:
    """One additive-attention decoder step; attention sums to 1 by construction."""
    v = params.config.vocab_size
    if not 0 <= prev_token < v:
        raise ValueError(f"token id {prev_token} out of range [0, {v})")
    _, alpha, context = attention_forward(params, enc_state, decoder_state)
    s = cell_forward(params, params.embed[prev_token], context, decoder_state)
    logits = np.concatenate([s, context]) @ params.out_w + params.out_b
    return StepOutput(logits=logits, attention=alpha, decoder_state=s)


class Scorer(Protocol):
    """What the beam-search decoder needs from any model."""

    vocab: TokenVocab

    def encode(self, features: FeatureSequence): ...

    def step(self, state, prev_token: int) -> StepOutput: ...


@dataclass(frozen=True)
class _ToyState:
    enc_state: EncoderState
    s: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.enc_state.n_frames


class Seq2SeqScorer:
    """Scorer view of trained Seq2SeqParams; stacks raw frames internally."""

    def __init__(self, params: Seq2SeqParams, vocab: TokenVocab | None = None):
        self.params = params
        self.vocab = vocab if vocab is not None else build_vocab(params.config.vocab_size)

    def encode(self, features: FeatureSequence) -> _ToyState:
        stacked = stack_frames(features, self.params.config.stack)
        enc_state = encode(self.params, stacked)
        return _ToyState(enc_state=enc_state, s=np.zeros(self.params.config.decoder_hidden))

    def step(self, state: _ToyState, prev_token: int) -> StepOutput:
        out = decode_step(self.params, state.enc_state, state.s, prev_token)
        return StepOutput(
            logits=out.logits,
            attention=out.attention,
            decoder_state=_ToyState(enc_state=state.enc_state, s=out.decoder_state),
        )


@dataclass
class LMParams:
    """Single-layer recurrent token LM used for shallow fusion."""

    vocab_size: int
    embed: np.ndarray
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    ARRAY_FIELDS = ("embed", "wx", "wh", "b", "out_w", "out_b")

    def named_arrays(self):
        return [(name, getattr(self, name)) for name in self.ARRAY_FIELDS]

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


def init_lm(vocab_size: int, rng: np.random.Generator | None = None,
            embed: int = 16, hidden: int = 16) -> LMParams:
    """Random init, or the uniform (all-zero) LM when rng is None."""
    if rng is None:
        def u(*shape):
            return np.zeros(shape)
    else:
        def u(*shape):
            return rng.uniform(-0.08, 0.08, size=shape)

    return LMParams(
        vocab_size=vocab_size,
        embed=u(vocab_size, embed),
        wx=u(embed, hidden), wh=u(hidden, hidden), b=np.zeros(hidden),
        out_w=u(hidden, vocab_size), out_b=np.zeros(vocab_size),
    )


def lm_initial_state(params: LMParams) -> np.ndarray:
    return np.zeros(params.hidden)


def lm_step(params: LMParams, state: np.ndarray, prev_token: int):
    """Normalized next-token log-probabilities and the updated LM state."""
    if not 0 <= prev_token < params.vocab_size:
        raise ValueError(f"token id {prev_token} out of range [0, {params.vocab_size})")
    s = np.tanh(params.embed[prev_token] @ params.wx + state @ params.wh + params.b)
    return log_softmax(s @ params.out_w + params.out_b), s


class LanguageModel:
    """Stateful-interface wrapper over LMParams for the decoder."""

    def __init__(self, params: LMParams):
        self.params = params

    def initial_state(self) -> np.ndarray:
        return lm_initial_state(self.params)

    def step(self, state, prev_token: int):
        return lm_step(self.params, state, prev_token)


@dataclass(frozen=True)
class _PathologicalState:
    step: int
    n_frames: int


class PathologicalScorer:
    """Deterministic oracle that loops by construction.

    Emits `trap_after` forced tokens, then at every later step assigns
    probability `p_loop` to `loop_token`, `(1 - p_loop) * eos_share` to EOS,
    and spreads the rest uniformly over the remaining content tokens. The
    post-trap distribution is stationary. Attention is a one-hot stall on a
    single frame, mimicking a decoder stuck on one stretch of audio.
    """

    def __init__(self, vocab: TokenVocab, loop_token: int, trap_after: int,
                 p_loop: float, eos_share: float = 0.5,
                 stall_frame: int | None = None):
        if not 0.0 < p_loop < 1.0:
            raise ValueError(f"p_loop must be in (0, 1), got {p_loop}")
        if loop_token not in vocab.content_ids:
            raise ValueError(f"loop token {loop_token} is not a content token")
        if not 0.0 <= eos_share <= 1.0:
            raise ValueError(f"eos_share must be in [0, 1], got {eos_share}")
        self.vocab = vocab
        self.loop_token = loop_token
        self.trap_after = trap_after
        self.p_loop = p_loop
        self.eos_share = eos_share
        self.stall_frame = stall_frame
        others = [t for t in vocab.content_ids if t != loop_token]
        self.forced_tokens = tuple(
            others[i % len(others)] if others else loop_token for i in range(trap_after)
        )
        logp = np.full(vocab.size, -np.inf)
        logp[loop_token] = np.log(p_loop)
        eos_mass = (1.0 - p_loop) * eos_share if others else (1.0 - p_loop)
        if eos_mass > 0:
            logp[vocab.eos_id] = np.log(eos_mass)
        if others:
            rest = (1.0 - p_loop) * (1.0 - eos_share)
            if rest > 0:
                logp[others] = np.log(rest / len(others))
        self._post_trap_logp = logp

    def encode(self, features: FeatureSequence) -> _PathologicalState:
        return _PathologicalState(step=0, n_frames=features.n_frames)

    def step(self, state: _PathologicalState, prev_token: int) -> StepOutput:
        if state.step < self.trap_after:
            logits = np.full(self.vocab.size, -np.inf)
            logits[self.forced_tokens[state.step]] = 0.0
        else:
            logits = self._post_trap_logp.copy()
        frame = self.stall_frame if self.stall_frame is not None else state.n_frames - 1
        frame = min(max(frame, 0), state.n_frames - 1)
        attention = np.zeros(state.n_frames)
        attention[frame] = 1.0
        return StepOutput(
            logits=logits,
            attention=attention,
            decoder_state=_PathologicalState(step=state.step + 1, n_frames=state.n_frames),
        )


def pathological_scorer(vocab: TokenVocab, loop_token: int, trap_after: int = 0,
                        p_loop: float = 0.9, eos_share: float = 0.5,
                        stall_frame: int | None = None) -> PathologicalScorer:
    return PathologicalScorer(vocab, loop_token, trap_after, p_loop, eos_share, stall_frame)


def dump_step_log(path, steps) -> None:
    """Write per-step (logits, attention) rows as JSON lines."""
    with open(path, "w") as fh:
        for out in steps:
            fh.write(json.dumps({
                "logits": [float(x) for x in out.logits],
                "attention": [float(x) for x in out.attention],
            }) + "\n")


class ReplayScorer:
    """Scorer that replays an externally dumped per-step (logits, attention) log.

    The replayed distributions depend only on the step index, not on the
    token history, so any decode over the log is well-defined; decoding past
    the end of the log is a data error.
    """

    def __init__(self, path, vocab: TokenVocab):
        self.vocab = vocab
        self.logits = []
        self.attention = []
        path = Path(path)
        if not path.exists():
            raise DataError(f"step log not found: {path}")
        with open(path) as fh:
            for line_number, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    self.logits.append(np.asarray(record["logits"], dtype=np.float64))
                    self.attention.append(np.asarray(record["attention"], dtype=np.float64))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"bad step-log record at line {line_number}: {exc}") from exc
        if not self.logits:
            raise DataError(f"step log is empty: {path}")

    def encode(self, features: FeatureSequence) -> int:
        return 0

    def step(self, state: int, prev_token: int) -> StepOutput:
        if state >= len(self.logits):
            raise DataError(f"replay log exhausted at step {state}")
        return StepOutput(
            logits=self.logits[state],
            attention=self.attention[state],
            decoder_state=state + 1,
        )


def save_seq2seq(path, params: Seq2SeqParams) -> None:
    meta = {
        "vocab_size": params.config.vocab_size,
        "feature_dim": params.config.feature_dim,
        "hidden": params.config.hidden,
        "embed": params.config.embed,
        "stack": params.config.stack,
        "label_smoothing": params.config.label_smoothing,
    }
    checkpoint.save_checkpoint(path, "seq2seq", meta, params.named_arrays())


def load_seq2seq(path) -> Seq2SeqParams:
    kind, meta, tensors = checkpoint.load_checkpoint(path)
    if kind != "seq2seq":
        raise DataError(f"expected a seq2seq checkpoint, found {kind!r}: {path}")
    config = Seq2SeqConfig(
        vocab_size=int(meta["vocab_size"]),
        feature_dim=int(meta["feature_dim"]),
        hidden=int(meta["hidden"]),
        embed=int(meta["embed"]),
        stack=int(meta["stack"]),
        label_smoothing=float(meta["label_smoothing"]),
    )
    return Seq2SeqParams(config=config, **tensors)


def save_lm(path, params: LMParams) -> None:
    meta = {"vocab_size": params.vocab_size}
    checkpoint.save_checkpoint(path, "lm", meta, params.named_arrays())


def load_lm(path) -> LMParams:
    kind, meta, tensors = checkpoint.load_checkpoint(path)
    if kind != "lm":
        raise DataError(f"expected an lm checkpoint, found {kind!r}: {path}")
    return LMParams(vocab_size=int(meta["vocab_size"]), **tensors)

"""Poisson output-length prediction and truncation.

The number of output tokens N for an input X is modeled as Poisson with rate
Lambda(X) = sum_t ReLU(a0 + b . f(X)_t), where f is a small bidirectional
recurrent feature net (initialized from the recognizer's encoder) and (a0, b)
an affine head. The predicted length is the integer nearest the rate, and a
decode longer than eta times the prediction is cut back to that multiple.
"""

import math
from dataclasses import dataclass

import numpy as np

from echotrap import checkpoint, kernels, model, train
from echotrap.corpus import FeatureSequence, stack_frames
from echotrap.errors import ConfigurationError, DataError
from echotrap.util import round_half_away_from_zero
from echotrap.vocab import BOS_ID, EOS_ID

LAMBDA_FLOOR = 1e-8


@dataclass(frozen=True)
class TruncationPolicy:
    """Cut decodes back to eta times the predicted length (eta >= 1)."""

    eta: float = 1.3

    def __post_init__(self):
        if not self.eta >= 1.0:
            raise ConfigurationError(f"length multiple eta must be >= 1, got {self.eta}")

    def apply(self, tokens, n_hat: int):
        return truncate(tokens, n_hat, self.eta)


@dataclass
class LengthPredictorParams:
    """Bidirectional recurrent feature net plus the affine rate head."""

    feature_dim: int
    hidden: int  # feature-net output width (both directions concatenated)
    stack: int
    fwd_wx: np.ndarray
    fwd_wh: np.ndarray
    fwd_b: np.ndarray
    bwd_wx: np.ndarray
    bwd_wh: np.ndarray
    bwd_b: np.ndarray
    slope: np.ndarray
    intercept: np.ndarray  # 0-d

    ARRAY_FIELDS = (
        "fwd_wx", "fwd_wh", "fwd_b",
        "bwd_wx", "bwd_wh", "bwd_b",
        "slope", "intercept",
    )

    def named_arrays(self):
        return [(name, getattr(self, name)) for name in self.ARRAY_FIELDS]

    @property
    def hidden_per_direction(self) -> int:
        return self.fwd_wh.shape[0]

    def feature_net_parameter_count(self) -> int:
        return sum(
            getattr(self, name).size
            for name in ("fwd_wx", "fwd_wh", "fwd_b", "bwd_wx", "bwd_wh", "bwd_b")
        )


def init_from_encoder(seq2seq: model.Seq2SeqParams,
                      intercept: float = 1.0) -> LengthPredictorParams:
    """Warm-start the feature net from a trained recognizer encoder."""
    cfg = seq2seq.config
    return LengthPredictorParams(
        feature_dim=cfg.feature_dim,
        hidden=cfg.hidden,
        stack=cfg.stack,
        fwd_wx=seq2seq.enc_fwd_wx.copy(),
        fwd_wh=seq2seq.enc_fwd_wh.copy(),
        fwd_b=seq2seq.enc_fwd_b.copy(),
        bwd_wx=seq2seq.enc_bwd_wx.copy(),
        bwd_wh=seq2seq.enc_bwd_wh.copy(),
        bwd_b=seq2seq.enc_bwd_b.copy(),
        slope=np.zeros(cfg.hidden),
        intercept=np.asarray(float(intercept)),
    )


def init_random(feature_dim: int, hidden: int, stack: int,
                rng: np.random.Generator, intercept: float = 1.0) -> LengthPredictorParams:
    if hidden % 2:
        raise ConfigurationError(f"hidden must be even (bidirectional), got {hidden}")
    hd = hidden // 2

    def u(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    return LengthPredictorParams(
        feature_dim=feature_dim, hidden=hidden, stack=stack,
        fwd_wx=u(feature_dim, hd), fwd_wh=u(hd, hd), fwd_b=np.zeros(hd),
        bwd_wx=u(feature_dim, hd), bwd_wh=u(hd, hd), bwd_b=np.zeros(hd),
        slope=np.zeros(hidden),
        intercept=np.asarray(float(intercept)),
    )


def _feature_pass(params: LengthPredictorParams, features: FeatureSequence):
    stacked = stack_frames(features, params.stack)
    x = stacked.frames.astype(np.float64)
    if x.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match predictor dim {params.feature_dim}"
        )
    h_fwd = kernels.rnn_tanh_forward(x, params.fwd_wx, params.fwd_wh, params.fwd_b)
    h_bwd = kernels.rnn_tanh_forward(x[::-1], params.bwd_wx, params.bwd_wh, params.bwd_b)[::-1]
    enc = np.concatenate([h_fwd, h_bwd], axis=1)
    pre = enc @ params.slope + params.intercept
    return x, h_fwd, h_bwd, enc, pre


def lambda_forward(params: LengthPredictorParams, features: FeatureSequence) -> float:
    """Poisson rate: sum over frames of ReLU(a0 + b . f_t); nonnegative."""
    _, _, _, _, pre = _feature_pass(params, features)
    return float(np.maximum(pre, 0.0).sum())


def poisson_log_pmf(n: int, lam: float) -> float:
    """log p(N = n) for a Poisson rate lam, via n log(lam) - lam - logGamma(n+1)."""
    if n < 0 or n != int(n):
        raise ValueError(f"count must be a nonnegative integer, got {n}")
    if lam < 0:
        raise ValueError(f"rate must be nonnegative, got {lam}")
    if lam == 0:
        return 0.0 if n == 0 else -math.inf
    return n * math.log(lam) - lam - math.lgamma(n + 1)


def poisson_nll(n: int, lam: float, floor: float = LAMBDA_FLOOR) -> float:
    """Negative Poisson log-likelihood with the rate floored away from 0."""
    return -poisson_log_pmf(n, max(lam, floor))


def predict_length(params: LengthPredictorParams, features: FeatureSequence) -> int:
    """round(Lambda), half away from zero."""
    return round_half_away_from_zero(lambda_forward(params, features))


def length_target(utt) -> int:
    """Reference token count; BOS/EOS never count."""
    return sum(1 for t in utt.reference_tokens if t not in (BOS_ID, EOS_ID))


def nll_batch_loss(params: LengthPredictorParams, batch) -> float:
    return float(np.mean([
        poisson_nll(length_target(utt), lambda_forward(params, utt.features))
        for utt in batch
    ]))


def nll_batch_grads(params: LengthPredictorParams, batch, freeze_slope: bool = False):
    grads = {name: np.zeros_like(a) for name, a in params.named_arrays()}
    scale = 1.0 / len(batch)
    loss = 0.0
    hd = params.hidden_per_direction
    for utt in batch:
        x, h_fwd, h_bwd, enc, pre = _feature_pass(params, utt.features)
        active = pre > 0.0  # ReLU subgradient at 0 is 0
        lam = float(np.where(active, pre, 0.0).sum())
        n = length_target(utt)
        loss += poisson_nll(n, lam) * scale
        # NLL is flat in lam under the floor; otherwise dNLL/dlam = 1 - n/lam
        dlam = (1.0 - n / lam) if lam > LAMBDA_FLOOR else 0.0
        dpre = np.where(active, dlam * scale, 0.0)
        grads["intercept"] += dpre.sum()
        if not freeze_slope:
            grads["slope"] += enc.T @ dpre
        denc = np.outer(dpre, params.slope)
        zeros = np.zeros(hd)
        _, dwx, dwh, db, _ = kernels.rnn_tanh_backward(
            x, h_fwd, zeros, params.fwd_wx, params.fwd_wh, denc[:, :hd]
        )
        grads["fwd_wx"] += dwx
        grads["fwd_wh"] += dwh
        grads["fwd_b"] += db
        _, dwx, dwh, db, _ = kernels.rnn_tanh_backward(
            x[::-1], h_bwd[::-1], zeros, params.bwd_wx, params.bwd_wh, denc[::-1, hd:]
        )
        grads["bwd_wx"] += dwx
        grads["bwd_wh"] += dwh
        grads["bwd_b"] += db
    return loss, grads


def train_length_predictor(corpus, init: LengthPredictorParams,
                           train_config: train.TrainConfig, rng: np.random.Generator,
                           dev_corpus=None, freeze_slope: bool = False):
    """Finetune the predictor on reference lengths; returns (params, history)."""
    train_config.validate()
    if not corpus:
        raise ConfigurationError("cannot train on an empty corpus")
    params = init

    def batch_grads(p, batch):
        return nll_batch_grads(p, batch, freeze_slope=freeze_slope)

    history = train.run_gd(
        params=params,
        corpus=list(corpus),
        dev_corpus=dev_corpus,
        batch_grads=batch_grads,
        batch_loss=nll_batch_loss,
        train_config=train_config,
        rng=rng,
    )
    return params, history


def mean_absolute_error(params: LengthPredictorParams, utterances) -> float:
    errors = [
        abs(predict_length(params, utt.features) - length_target(utt))
        for utt in utterances
    ]
    return float(np.mean(errors))


def truncate(tokens, n_hat: int, eta: float):
    """Keep at most floor(eta * n_hat) content tokens, re-appending EOS.

    Inputs shorter than the allowance are returned unchanged; an exact
    multiple is retained in full (epsilon guard on the floor). BOS/EOS never
    count toward the kept total.
    """
    if eta < 1.0:
        raise ConfigurationError(f"length multiple eta must be >= 1, got {eta}")
    if n_hat < 0:
        raise ConfigurationError(f"predicted length must be nonnegative, got {n_hat}")
    tokens = tuple(tokens)
    if math.isinf(eta):
        return tokens
    keep = int(math.floor(eta * n_hat + 1e-9))
    content = [t for t in tokens if t not in (BOS_ID, EOS_ID)]
    if len(content) <= keep:
        return tokens
    had_bos = bool(tokens) and tokens[0] == BOS_ID
    head = (BOS_ID,) if had_bos else ()
    return head + tuple(content[:keep]) + (EOS_ID,)


def save_length_predictor(path, params: LengthPredictorParams) -> None:
    meta = {"feature_dim": params.feature_dim, "hidden": params.hidden, "stack": params.stack}
    checkpoint.save_checkpoint(path, "lenpred", meta, params.named_arrays())


def load_length_predictor(path) -> LengthPredictorParams:
    kind, meta, tensors = checkpoint.load_checkpoint(path)
    if kind != "lenpred":
        raise DataError(f"expected a lenpred checkpoint, found {kind!r}: {path}")
    return LengthPredictorParams(
        feature_dim=int(meta["feature_dim"]),
        hidden=int(meta["hidden"]),
        stack=int(meta["stack"]),
        **tensors,
    )

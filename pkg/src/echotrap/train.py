"""Training for the toy seq2seq model and the fusion LM.

Plain gradient descent with global-norm clipping and a halve-on-plateau
learning-rate schedule; no adaptive optimizer state, so runs are exactly
reproducible from the seed. Gradients are hand-derived and checked against
central finite differences in the test suite.
"""

from dataclasses import dataclass, replace

import numpy as np

from echotrap import kernels, model
from echotrap.corpus import FeatureSequence, stack_frames
from echotrap.errors import ConfigurationError, TrainingDivergenceError
from echotrap.util import global_norm, log_softmax, softmax
from echotrap.vocab import BOS_ID, EOS_ID


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1.0
    batch_size: int = 4
    clip_norm: float = 5.0
    plateau_patience: int = 8
    plateau_min_delta: float = 1e-3
    lr_decay: float = 0.5
    min_lr: float = 1.0 / 64
    feature_noise: float = 0.0  # train-time Gaussian augmentation of input frames

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigurationError("lr and clip_norm must be positive")
        if self.feature_noise < 0:
            raise ConfigurationError("feature_noise must be nonnegative")


def smoothed_targets(target_id: int, vocab_size: int, label_smoothing: float) -> np.ndarray:
    """Label-smoothed target distribution, mass spread over all classes."""
    q = np.full(vocab_size, label_smoothing / vocab_size)
    q[target_id] += 1.0 - label_smoothing
    return q


def _prep_example(params: model.Seq2SeqParams, utt):
    stacked = stack_frames(utt.features, params.config.stack)
    x = stacked.frames.astype(np.float64)
    tokens_in = [BOS_ID] + list(utt.reference_tokens)
    targets = list(utt.reference_tokens) + [EOS_ID]
    return x, tokens_in, targets


def _forward_cached(params: model.Seq2SeqParams, x, tokens_in):
    """Teacher-forced decoder pass keeping everything backprop needs."""
    h_fwd = kernels.rnn_tanh_forward(x, params.enc_fwd_wx, params.enc_fwd_wh, params.enc_fwd_b)
    h_bwd = kernels.rnn_tanh_forward(
        x[::-1], params.enc_bwd_wx, params.enc_bwd_wh, params.enc_bwd_b
    )[::-1]
    enc = np.concatenate([h_fwd, h_bwd], axis=1)
    keys = enc @ params.att_w + params.att_b
    enc_state = model.EncoderState(enc=enc, keys=keys)

    s_prev = np.zeros(params.config.decoder_hidden)
    steps = []
    for tok in tokens_in:
        u, alpha, context = model.attention_forward(params, enc_state, s_prev)
        emb_vec = params.embed[tok]
        s = model.cell_forward(params, emb_vec, context, s_prev)
        z = np.concatenate([s, context])
        logits = z @ params.out_w + params.out_b
        steps.append((s_prev, u, alpha, context, s, z, logits))
        s_prev = s
    return h_fwd, h_bwd, enc_state, steps


def seq2seq_example_loss(params: model.Seq2SeqParams, utt) -> tuple[float, int]:
    """(Summed smoothed cross-entropy, number of target tokens)."""
    x, tokens_in, targets = _prep_example(params, utt)
    _, _, _, steps = _forward_cached(params, x, tokens_in)
    ls = params.config.label_smoothing
    v = params.config.vocab_size
    total = 0.0
    for (_, _, _, _, _, _, logits), tgt in zip(steps, targets):
        q = smoothed_targets(tgt, v, ls)
        total += float(-(q * log_softmax(logits)).sum())
    return total, len(targets)


def seq2seq_batch_loss(params: model.Seq2SeqParams, batch) -> float:
    """Mean per-token smoothed cross-entropy over a batch of utterances."""
    total, count = 0.0, 0
    for utt in batch:
        loss, n = seq2seq_example_loss(params, utt)
        total += loss
        count += n
    return total / count


def _zero_grads(params) -> dict:
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def seq2seq_batch_grads(params: model.Seq2SeqParams, batch):
    """(loss, grads) for the mean per-token loss over the batch."""
    v = params.config.vocab_size
    sd = params.config.decoder_hidden
    ls = params.config.label_smoothing
    grads = _zero_grads(params)
    n_total = sum(len(utt.reference_tokens) + 1 for utt in batch)
    scale = 1.0 / n_total
    loss = 0.0

    for utt in batch:
        x, tokens_in, targets = _prep_example(params, utt)
        h_fwd, h_bwd, enc_state, steps = _forward_cached(params, x, tokens_in)
        enc, keys = enc_state.enc, enc_state.keys

        denc = np.zeros_like(enc)
        dkeys = np.zeros_like(keys)
        ds_next = np.zeros(sd)
        for t in range(len(tokens_in) - 1, -1, -1):
            s_prev, u, alpha, context, s, z, logits = steps[t]
            p = softmax(logits)
            q = smoothed_targets(targets[t], v, ls)
            loss += float(-(q * log_softmax(logits)).sum()) * scale

            dlogits = (p - q) * scale
            grads["out_w"] += np.outer(z, dlogits)
            grads["out_b"] += dlogits
            dz = params.out_w @ dlogits
            ds = dz[:sd] + ds_next
            dcontext = dz[sd:].copy()

            # decoder cell
            dpre = ds * (1.0 - s * s)
            grads["dec_wi"] += np.outer(params.embed[tokens_in[t]], dpre)
            grads["embed"][tokens_in[t]] += params.dec_wi @ dpre
            grads["dec_wc"] += np.outer(context, dpre)
            dcontext += params.dec_wc @ dpre
            grads["dec_ws"] += np.outer(s_prev, dpre)
            grads["dec_b"] += dpre
            ds_prev = params.dec_ws @ dpre

            # attention
            dalpha = enc @ dcontext
            denc += np.outer(alpha, dcontext)
            de = alpha * (dalpha - float(alpha @ dalpha))
            grads["att_v"] += u.T @ de
            darg = np.outer(de, params.att_v) * (1.0 - u * u)
            dkeys += darg
            darg_sum = darg.sum(axis=0)
            grads["att_u"] += np.outer(s_prev, darg_sum)
            ds_prev = ds_prev + params.att_u @ darg_sum

            ds_next = ds_prev

        grads["att_w"] += enc.T @ dkeys
        grads["att_b"] += dkeys.sum(axis=0)
        denc += dkeys @ params.att_w.T

        hd = params.config.hidden_per_direction
        zeros = np.zeros(hd)
        _, dwx, dwh, db, _ = kernels.rnn_tanh_backward(
            x, h_fwd, zeros, params.enc_fwd_wx, params.enc_fwd_wh, denc[:, :hd]
        )
        grads["enc_fwd_wx"] += dwx
        grads["enc_fwd_wh"] += dwh
        grads["enc_fwd_b"] += db
        _, dwx, dwh, db, _ = kernels.rnn_tanh_backward(
            x[::-1], h_bwd[::-1], zeros, params.enc_bwd_wx, params.enc_bwd_wh,
            denc[::-1, hd:],
        )
        grads["enc_bwd_wx"] += dwx
        grads["enc_bwd_wh"] += dwh
        grads["enc_bwd_b"] += db

    return loss, grads


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale gradients in place to the given global norm; returns the norm."""
    norm = global_norm(grads.values())
    if norm > clip_norm and norm > 0:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _apply_update(params, grads, lr, step):
    for name, array in params.named_arrays():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(step, "non-finite gradient")
        array -= lr * g


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    dev_loss: float
    lr: float


class PlateauSchedule:
    """Halve the learning rate when the monitored loss stops improving."""

    def __init__(self, lr, patience, min_delta, decay, min_lr):
        self.lr = lr
        self.patience = patience
        self.min_delta = min_delta
        self.decay = decay
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        """Feed one epoch's monitored loss; returns False when lr bottomed out."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.decay
                self.bad_epochs = 0
        return self.lr >= self.min_lr


def _with_feature_noise(utt, level: float, rng: np.random.Generator):
    features = utt.features
    noisy = features.frames + level * rng.standard_normal(features.frames.shape)
    return replace(
        utt,
        features=FeatureSequence(
            frames=noisy.astype(np.float32),
            frame_period_ms=features.frame_period_ms,
            utterance_id=features.utterance_id,
        ),
    )


def train_seq2seq(corpus, model_config: model.Seq2SeqConfig, train_config: TrainConfig,
                  rng: np.random.Generator, dev_corpus=None):
    """Train from scratch; returns (params, per-epoch history)."""
    train_config.validate()
    if not corpus:
        raise ConfigurationError("cannot train on an empty corpus")
    for utt in corpus:
        if not utt.reference_tokens:
            raise ConfigurationError(f"utterance {utt.utterance_id} has no reference")
    params = model.init_seq2seq(model_config, rng)

    def batch_grads(p, batch):
        if train_config.feature_noise > 0:
            batch = [_with_feature_noise(u, train_config.feature_noise, rng) for u in batch]
        return seq2seq_batch_grads(p, batch)

    history = run_gd(
        params=params,
        corpus=corpus,
        dev_corpus=dev_corpus,
        batch_grads=batch_grads,
        batch_loss=seq2seq_batch_loss,
        train_config=train_config,
        rng=rng,
    )
    return params, history


def run_gd(params, corpus, dev_corpus, batch_grads, batch_loss, train_config, rng):
    """Shared plain-GD loop used by the seq2seq, LM, and length-predictor trainers."""
    schedule = PlateauSchedule(
        train_config.lr, train_config.plateau_patience, train_config.plateau_min_delta,
        train_config.lr_decay, train_config.min_lr,
    )
    history = []
    step = 0
    n = len(corpus)
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_config.batch_size):
            batch = [corpus[i] for i in order[start : start + train_config.batch_size]]
            loss, grads = batch_grads(params, batch)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergenceError(step)
            clip_gradients(grads, train_config.clip_norm)
            _apply_update(params, grads, schedule.lr, step)
            epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses))
        dev_loss = batch_loss(params, dev_corpus) if dev_corpus else train_loss
        history.append(EpochRecord(epoch, step, train_loss, dev_loss, schedule.lr))
        if not schedule.update(dev_loss):
            break
    return history


def lm_batch_loss(params: model.LMParams, sequences) -> float:
    total, count = 0.0, 0
    for ref in sequences:
        tokens_in = [BOS_ID] + list(ref)
        targets = list(ref) + [EOS_ID]
        x = params.embed[tokens_in]
        hidden = kernels.rnn_tanh_forward(x, params.wx, params.wh, params.b)
        logits = hidden @ params.out_w + params.out_b
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total += float(-logp[np.arange(len(targets)), targets].sum())
        count += len(targets)
    return total / count


def lm_batch_grads(params: model.LMParams, sequences):
    grads = _zero_grads(params)
    n_total = sum(len(ref) + 1 for ref in sequences)
    scale = 1.0 / n_total
    loss = 0.0
    for ref in sequences:
        tokens_in = [BOS_ID] + list(ref)
        targets = list(ref) + [EOS_ID]
        x = params.embed[tokens_in]
        hidden = kernels.rnn_tanh_forward(x, params.wx, params.wh, params.b)
        logits = hidden @ params.out_w + params.out_b
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(len(targets))
        loss += float(-logp[rows, targets].sum()) * scale

        dlogits = np.exp(logp)
        dlogits[rows, targets] -= 1.0
        dlogits *= scale
        grads["out_w"] += hidden.T @ dlogits
        grads["out_b"] += dlogits.sum(axis=0)
        dhidden = dlogits @ params.out_w.T
        dx, dwx, dwh, db, _ = kernels.rnn_tanh_backward(
            x, hidden, np.zeros(params.hidden), params.wx, params.wh, dhidden
        )
        grads["wx"] += dwx
        grads["wh"] += dwh
        grads["b"] += db
        np.add.at(grads["embed"], tokens_in, dx)
    return loss, grads


def train_lm(sequences, vocab_size: int, train_config: TrainConfig,
             rng: np.random.Generator, embed: int = 16, hidden: int = 16):
    """Train the fusion LM on reference token sequences."""
    train_config.validate()
    if not sequences:
        raise ConfigurationError("cannot train an LM on no text")
    params = model.init_lm(vocab_size, rng, embed=embed, hidden=hidden)
    history = run_gd(
        params=params,
        corpus=list(sequences),
        dev_corpus=None,
        batch_grads=lm_batch_grads,
        batch_loss=lm_batch_loss,
        train_config=train_config,
        rng=rng,
    )
    return params, history


def greedy_token_accuracy(scorer, utterances, config=None) -> float:
    """Mean per-utterance 1 - edit_distance/len(ref) under greedy decoding."""
    from echotrap import decode

    if config is None:
        config = decode.DecoderConfig(beam_width=1, lm_weight=0.0)
    scores = []
    for utt in utterances:
        result = decode.greedy_decode(scorer, utt.features, config)
        hyp = [t for t in result.best.tokens if t not in (BOS_ID, EOS_ID)]
        dist = kernels.levenshtein(list(utt.reference_tokens), hyp)
        scores.append(max(0.0, 1.0 - dist / len(utt.reference_tokens)))
    return float(np.mean(scores))

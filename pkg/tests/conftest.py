import numpy as np
import pytest

from echotrap import corpus, decode, lenpred, model, train
from echotrap.util import substream
from echotrap.vocab import TokenVocab, build_vocab


class RandomScorer:
    """Deterministic random scorer: logits are a pure function of the prefix.

    Vocabulary is (BOS, EOS, content...); BOS is never predicted. Used to
    compare beam search against brute-force enumeration.
    """

    def __init__(self, vocab: TokenVocab, seed: int, n_frames: int = 4, spread: float = 2.0):
        self.vocab = vocab
        self.seed = seed
        self.n_frames = n_frames
        self.spread = spread

    def encode(self, features):
        return ()

    def step(self, state, prev_token):
        prefix = state + (int(prev_token),)
        key = abs(hash((self.seed,) + prefix)) % (2**31)
        rng = np.random.default_rng(key)
        logits = rng.standard_normal(self.vocab.size) * self.spread
        logits[self.vocab.bos_id] = -np.inf
        attention = rng.dirichlet(np.ones(self.n_frames))
        return model.StepOutput(logits=logits, attention=attention, decoder_state=prefix)


def tiny_features(n_frames: int = 4, dim: int = 2, utterance_id: str = "utt-0"):
    return corpus.FeatureSequence(
        frames=np.zeros((n_frames, dim), dtype=np.float32),
        frame_period_ms=10.0,
        utterance_id=utterance_id,
    )


def brute_force_decode(scorer, features, config):
    """Exhaustive reference search matching beam_search's selection rules.

    Enumerates every token sequence up to the length cap (BOS never
    expanded, EOS terminal), scores finished and unfinished hypotheses by
    log-probability over LP, and applies the same shorter-then-lexicographic
    tie-breaking. Zero-probability continuations are not hypotheses.
    """
    vocab = scorer.vocab
    eos = vocab.eos_id
    expand = [v for v in range(vocab.size) if v != vocab.bos_id]

    def log_softmax(x):
        z = x - np.max(x)
        return z - np.log(np.exp(z).sum())

    def lp(length):
        return (config.k + length) ** config.alpha / (config.k + 1.0) ** config.alpha

    best = {"finished": None, "unfinished": None}

    def key(entry):
        tokens, score = entry
        return (-score, len(tokens) - 1, tokens)

    def consider(kind, tokens, score):
        entry = (tokens, score)
        if best[kind] is None or key(entry) < key(best[kind]):
            best[kind] = entry

    def walk(tokens, log_prob, state, depth):
        if depth == config.max_output_tokens:
            consider("unfinished", tuple(tokens), log_prob / lp(depth))
            return
        out = scorer.step(state, tokens[-1])
        scores = log_softmax(np.asarray(out.logits, dtype=np.float64))
        for v in expand:
            child_lp = log_prob + float(scores[v])
            if child_lp == -np.inf:
                continue
            if v == eos:
                consider("finished", tuple(tokens) + (eos,), child_lp / lp(depth + 1))
            else:
                tokens.append(v)
                walk(tokens, child_lp, out.decoder_state, depth + 1)
                tokens.pop()

    walk([vocab.bos_id], 0.0, scorer.encode(features), 0)
    return best["finished"] if best["finished"] is not None else best["unfinished"]


QUICK_SEED = 11


@pytest.fixture(scope="session")
def quick_vocab():
    return build_vocab(32)


@pytest.fixture(scope="session")
def trained_pipeline(quick_vocab):
    """One fully trained toy setup shared across the suite.

    Noise-free corpus (train-time feature augmentation only), recognizer,
    fusion LM, and length predictor, plus held-out in-domain and
    out-of-domain evaluation sets.
    """
    seed = QUICK_SEED
    spec_in = corpus.CorpusSpec(
        n_utterances=300 + 40 + 200,
        duration_range=(0.16, 0.48),
        vocab_size=32,
        noise_level=0.0,
        seed=seed,
        feature_dim=8,
        motif_frames=4,
    )
    train_set, dev_set, eval_set = corpus.split_corpus(
        corpus.generate_corpus(spec_in), [300, 40, 200]
    )
    spec_ood = corpus.CorpusSpec(
        n_utterances=50,
        duration_range=(0.6, 1.0),
        vocab_size=32,
        domain=corpus.OUT_OF_DOMAIN,
        noise_level=0.15,
        seed=seed,
        feature_dim=8,
        motif_frames=4,
        repeat_prob=1.0,
        ood_bias=0.4,
        ood_perturbation=0.6,
    )
    ood_set = corpus.generate_corpus(spec_ood)

    model_config = model.Seq2SeqConfig(
        vocab_size=32, feature_dim=32, hidden=64, embed=16, stack=4, label_smoothing=0.05
    )
    train_config = train.TrainConfig(
        epochs=250, lr=1.0, batch_size=4, plateau_patience=10,
        min_lr=1.0 / 64, feature_noise=0.05,
    )
    params, history = train.train_seq2seq(
        train_set, model_config, train_config, substream(seed, "seq2seq"), dev_corpus=dev_set
    )
    lm_params, _ = train.train_lm(
        [utt.reference_tokens for utt in train_set], 32,
        train.TrainConfig(epochs=30, lr=0.5, batch_size=4, min_lr=0.5 / 64),
        substream(seed, "lm"),
    )
    lp_params, _ = lenpred.train_length_predictor(
        train_set,
        lenpred.init_from_encoder(params),
        train.TrainConfig(epochs=50, lr=0.05, batch_size=4, plateau_patience=6, min_lr=0.05 / 64),
        substream(seed, "lenpred"),
        dev_corpus=dev_set,
    )
    return {
        "seed": seed,
        "vocab": quick_vocab,
        "params": params,
        "history": history,
        "scorer": model.Seq2SeqScorer(params, quick_vocab),
        "lm_params": lm_params,
        "lm": model.LanguageModel(lm_params),
        "lenpred": lp_params,
        "train": train_set,
        "dev": dev_set,
        "eval": eval_set,
        "ood": ood_set,
        "spec_in": spec_in,
        "spec_ood": spec_ood,
    }

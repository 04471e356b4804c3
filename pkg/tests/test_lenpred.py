import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echotrap import corpus, lenpred, model, train
from echotrap.errors import ConfigurationError, DataError
from echotrap.util import substream
from echotrap.vocab import BOS_ID, EOS_ID


def _features(frames, period=10.0):
    return corpus.FeatureSequence(
        frames=np.asarray(frames, dtype=np.float32), frame_period_ms=period, utterance_id="u"
    )


class TestLambdaForward:
    def test_all_negative_preactivations_give_zero(self):
        params = lenpred.init_random(3, 4, 1, substream(0, "lp"), intercept=-100.0)
        feats = _features(np.random.default_rng(0).standard_normal((6, 3)))
        assert lenpred.lambda_forward(params, feats) == 0.0

    def test_zero_slope_constant_intercept_gives_t_times_c(self):
        params = lenpred.init_random(3, 4, 1, substream(0, "lp"), intercept=0.75)
        feats = _features(np.random.default_rng(1).standard_normal((9, 3)))
        assert lenpred.lambda_forward(params, feats) == pytest.approx(9 * 0.75, abs=1e-12)

    def test_matches_straight_line_reimplementation(self):
        # independent forward: explicit per-step loops, no kernel calls
        rng = substream(5, "case")
        params = lenpred.init_random(3, 4, 1, rng)
        params.slope[:] = rng.uniform(-0.5, 0.5, params.slope.shape)
        frames = rng.standard_normal((3, 3))
        feats = _features(frames)

        def manual():
            x = feats.frames.astype(np.float64)
            hd = params.fwd_wh.shape[0]
            hf = []
            prev = np.zeros(hd)
            for t in range(3):
                prev = np.tanh(x[t] @ params.fwd_wx + prev @ params.fwd_wh + params.fwd_b)
                hf.append(prev)
            hb = [None] * 3
            prev = np.zeros(hd)
            for t in range(2, -1, -1):
                prev = np.tanh(x[t] @ params.bwd_wx + prev @ params.bwd_wh + params.bwd_b)
                hb[t] = prev
            total = 0.0
            for t in range(3):
                f = np.concatenate([hf[t], hb[t]])
                pre = float(params.intercept) + float(f @ params.slope)
                total += max(pre, 0.0)
            return total

        assert lenpred.lambda_forward(params, feats) == pytest.approx(manual(), abs=1e-10)

    def test_dimension_mismatch(self):
        params = lenpred.init_random(3, 4, 1, substream(0, "lp"))
        with pytest.raises(ValueError):
            lenpred.lambda_forward(params, _features(np.zeros((4, 5))))


class TestPoissonLogPmf:
    def test_reference_points(self):
        assert lenpred.poisson_log_pmf(0, 1.0) == pytest.approx(-1.0, abs=1e-15)
        assert lenpred.poisson_log_pmf(1, 1.0) == pytest.approx(-1.0, abs=1e-15)

    def test_matches_exact_factorial_oracle(self):
        # oracle via exact big-integer factorials rather than lgamma
        for lam in (0.5, 1.0, 5.0, 20.0):
            for n in range(0, 201, 7):
                expected = n * math.log(lam) - lam - math.log(math.factorial(n))
                assert lenpred.poisson_log_pmf(n, lam) == pytest.approx(expected, abs=1e-10)

    def test_partial_sums_normalize(self):
        for lam in (0.5, 1.0, 5.0, 20.0):
            total = sum(math.exp(lenpred.poisson_log_pmf(n, lam)) for n in range(300))
            assert abs(total - 1.0) < 1e-9

    def test_zero_rate_edge(self):
        assert lenpred.poisson_log_pmf(0, 0.0) == 0.0
        assert lenpred.poisson_log_pmf(3, 0.0) == -math.inf

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            lenpred.poisson_log_pmf(-1, 1.0)
        with pytest.raises(ValueError):
            lenpred.poisson_log_pmf(2, -0.5)

    def test_nll_gradient_is_one_minus_n_over_lambda(self):
        eps = 1e-6
        for n, lam in ((0, 0.7), (3, 2.5), (12, 5.0), (40, 33.0)):
            fd = (lenpred.poisson_nll(n, lam + eps) - lenpred.poisson_nll(n, lam - eps)) / (2 * eps)
            assert fd == pytest.approx(1.0 - n / lam, abs=1e-6)

    def test_nll_convex_in_lambda(self):
        for n in (1, 5, 17):
            lams = np.linspace(0.5, 3 * n + 1, 40)
            vals = [lenpred.poisson_nll(n, l) for l in lams]
            second = np.diff(vals, 2)
            assert np.all(second > -1e-9)


class TestPredictLength:
    def test_rounding(self):
        assert lenpred.predict_length is not None
        from echotrap.util import round_half_away_from_zero as r

        assert r(10.4) == 10
        assert r(10.5) == 11
        assert r(0.0) == 0

    def test_predict_equals_rounded_lambda(self):
        params = lenpred.init_random(3, 4, 1, substream(2, "lp"), intercept=0.9)
        feats = _features(np.random.default_rng(3).standard_normal((7, 3)))
        lam = lenpred.lambda_forward(params, feats)
        from echotrap.util import round_half_away_from_zero

        assert lenpred.predict_length(params, feats) == round_half_away_from_zero(lam)


def _tiny_corpus(n=6, seed=5, noise=0.0):
    spec = corpus.CorpusSpec(
        n_utterances=n, duration_range=(0.12, 0.4), vocab_size=8,
        noise_level=noise, seed=seed, feature_dim=3, motif_frames=2,
    )
    return corpus.generate_corpus(spec), spec


class TestTraining:
    def test_gradients_match_finite_differences(self):
        utts, _ = _tiny_corpus()
        params = lenpred.init_random(6, 4, 2, substream(1, "lp"))
        params.slope[:] = substream(2, "s").uniform(-0.3, 0.3, params.slope.shape)
        loss, grads = lenpred.nll_batch_grads(params, utts)
        eps = 1e-5
        for name, arr in params.named_arrays():
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + eps
                up = lenpred.nll_batch_loss(params, utts)
                arr[idx] = orig - eps
                down = lenpred.nll_batch_loss(params, utts)
                arr[idx] = orig
                fd = (up - down) / (2 * eps)
                g = grads[name][idx]
                assert abs(g - fd) <= 1e-4 * max(abs(g), abs(fd), 1e-6), (name, idx)
                it.iternext()

    def test_single_utterance_frozen_slope_reaches_stationary_point(self):
        # with b frozen at 0 the NLL stationary point is T * ReLU(a0) = N
        utts, _ = _tiny_corpus(n=1, seed=9)
        utt = utts[0]
        n_frames = corpus.stack_frames(utt.features, 2).n_frames
        target = lenpred.length_target(utt)
        params = lenpred.init_random(6, 4, 2, substream(3, "lp"), intercept=0.2)
        params, _ = lenpred.train_length_predictor(
            [utt], params,
            train.TrainConfig(epochs=300, lr=0.02, batch_size=1, plateau_patience=50,
                              min_lr=0.02, feature_noise=0.0),
            substream(3, "t"), freeze_slope=True,
        )
        lam = lenpred.lambda_forward(params, utt.features)
        assert lam == pytest.approx(target, rel=1e-3)
        assert n_frames * max(float(params.intercept), 0.0) == pytest.approx(target, rel=1e-3)
        assert float(np.abs(params.slope).max()) == 0.0

    def test_nll_decreases_over_fifty_steps(self):
        utts, _ = _tiny_corpus(n=4)
        params = lenpred.init_random(6, 4, 2, substream(4, "lp"), intercept=0.1)
        first = lenpred.nll_batch_loss(params, utts)
        for step in range(1, 51):
            _, grads = lenpred.nll_batch_grads(params, utts)
            train.clip_gradients(grads, 5.0)
            train._apply_update(params, grads, 0.02, step)
        assert lenpred.nll_batch_loss(params, utts) < first

    def test_mae_small_on_noise_free_task(self):
        utts, _ = _tiny_corpus(n=40, seed=12)
        held_out = utts[32:]
        params = lenpred.init_random(6, 4, 2, substream(6, "lp"))
        params, _ = lenpred.train_length_predictor(
            utts[:32], params,
            train.TrainConfig(epochs=60, lr=0.05, batch_size=4, plateau_patience=8,
                              min_lr=0.05 / 64),
            substream(6, "t"), dev_corpus=held_out,
        )
        mae = lenpred.mean_absolute_error(params, held_out)
        mean_len = np.mean([lenpred.length_target(u) for u in held_out])
        assert mae <= 0.1 * mean_len


class TestTruncate:
    def test_worked_example_eleven_kept(self):
        tokens = (BOS_ID,) + tuple(range(2, 8)) * 25 + (EOS_ID,)
        out = lenpred.truncate(tokens, 10, 1.1)
        content = [t for t in out if t not in (BOS_ID, EOS_ID)]
        assert len(content) == 11
        assert out[0] == BOS_ID and out[-1] == EOS_ID
        assert content == list(tokens[1:12])

    def test_short_output_unchanged(self):
        tokens = (BOS_ID, 4, 5, EOS_ID)
        assert lenpred.truncate(tokens, 10, 1.1) == tokens

    def test_eta_one_nhat_zero_empties_output(self):
        tokens = (BOS_ID, 4, 5, 6, EOS_ID)
        out = lenpred.truncate(tokens, 0, 1.0)
        assert [t for t in out if t not in (BOS_ID, EOS_ID)] == []

    def test_exact_multiple_retained(self):
        tokens = (BOS_ID,) + (3,) * 11 + (EOS_ID,)
        out = lenpred.truncate(tokens, 10, 1.1)
        assert len([t for t in out if t not in (BOS_ID, EOS_ID)]) == 11
        assert out == tokens

    def test_eta_infinity_is_identity(self):
        tokens = (BOS_ID,) + (3,) * 40 + (EOS_ID,)
        assert lenpred.truncate(tokens, 1, math.inf) == tokens

    def test_eta_below_one_rejected(self):
        with pytest.raises(ConfigurationError):
            lenpred.truncate((BOS_ID, 3, EOS_ID), 5, 0.9)
        with pytest.raises(ConfigurationError):
            lenpred.TruncationPolicy(eta=0.5)

    @given(
        n_content=st.integers(0, 40),
        n_hat=st.integers(0, 30),
        eta=st.floats(1.0, 3.0),
        with_bos=st.booleans(),
        with_eos=st.booleans(),
    )
    @settings(max_examples=200, deadline=None)
    def test_idempotent_and_never_lengthens(self, n_content, n_hat, eta, with_bos, with_eos):
        rng = np.random.default_rng(n_content * 1000 + n_hat)
        tokens = tuple(int(t) for t in rng.integers(2, 9, size=n_content))
        if with_bos:
            tokens = (BOS_ID,) + tokens
        if with_eos:
            tokens = tokens + (EOS_ID,)
        once = lenpred.truncate(tokens, n_hat, eta)
        twice = lenpred.truncate(once, n_hat, eta)
        assert twice == once

        def content_len(seq):
            return sum(1 for t in seq if t not in (BOS_ID, EOS_ID))

        assert content_len(once) <= content_len(tokens)
        assert content_len(once) <= math.floor(eta * n_hat + 1e-9)
        kept = [t for t in once if t not in (BOS_ID, EOS_ID)]
        original = [t for t in tokens if t not in (BOS_ID, EOS_ID)]
        assert kept == original[: len(kept)]

    def test_policy_apply(self):
        policy = lenpred.TruncationPolicy(eta=1.3)
        tokens = (BOS_ID,) + (5,) * 20 + (EOS_ID,)
        out = policy.apply(tokens, 10)
        assert len([t for t in out if t not in (BOS_ID, EOS_ID)]) == 13


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = lenpred.init_random(6, 4, 2, substream(8, "lp"), intercept=0.7)
        params.slope[:] = 0.25
        path = tmp_path / "lp.ckpt"
        lenpred.save_length_predictor(path, params)
        loaded = lenpred.load_length_predictor(path)
        assert (loaded.feature_dim, loaded.hidden, loaded.stack) == (6, 4, 2)
        for (name, a), (_, b) in zip(params.named_arrays(), loaded.named_arrays()):
            npt.assert_allclose(a, b, atol=1e-6)
        lenpred.save_length_predictor(path, loaded)
        again = lenpred.load_length_predictor(path)
        for (name, a), (_, b) in zip(loaded.named_arrays(), again.named_arrays()):
            npt.assert_array_equal(a, b)

    def test_wrong_kind(self, tmp_path):
        lm = model.init_lm(8, rng=None)
        model.save_lm(tmp_path / "x.ckpt", lm)
        with pytest.raises(DataError):
            lenpred.load_length_predictor(tmp_path / "x.ckpt")


def test_init_from_encoder_matches_encoder_weights():
    config = model.Seq2SeqConfig(vocab_size=8, feature_dim=6, hidden=8, embed=4, stack=2)
    seq2seq = model.init_seq2seq(config, substream(1, "init"))
    lp = lenpred.init_from_encoder(seq2seq)
    npt.assert_array_equal(lp.fwd_wx, seq2seq.enc_fwd_wx)
    npt.assert_array_equal(lp.bwd_wh, seq2seq.enc_bwd_wh)
    assert lp.slope.shape == (8,)
    assert lp.feature_net_parameter_count() == sum(
        getattr(seq2seq, n).size for n in model.Seq2SeqParams.ENCODER_FIELDS
    )
    # warm start is a copy, not a view
    lp.fwd_wx[0, 0] += 1.0
    assert lp.fwd_wx[0, 0] != seq2seq.enc_fwd_wx[0, 0]

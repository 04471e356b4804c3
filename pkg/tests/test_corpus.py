import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echotrap import corpus
from echotrap.errors import ConfigurationError, DataError, ManifestParseError
from echotrap.vocab import build_vocab


def small_spec(**overrides):
    base = dict(
        n_utterances=10,
        duration_range=(0.16, 0.4),
        vocab_size=12,
        noise_level=0.05,
        seed=42,
        feature_dim=4,
        motif_frames=4,
    )
    base.update(overrides)
    return corpus.CorpusSpec(**base)


def test_generate_is_deterministic_given_seed():
    a = corpus.generate_corpus(small_spec(seed=7))
    b = corpus.generate_corpus(small_spec(seed=7))
    assert len(a) == len(b) == 10
    for ua, ub in zip(a, b):
        assert ua.utterance_id == ub.utterance_id
        assert ua.reference_tokens == ub.reference_tokens
        assert ua.reference_text == ub.reference_text
        npt.assert_array_equal(ua.features.frames, ub.features.frames)


def test_different_seeds_differ():
    a = corpus.generate_corpus(small_spec(seed=1))
    b = corpus.generate_corpus(small_spec(seed=2))
    assert any(
        ua.reference_tokens != ub.reference_tokens
        or not np.array_equal(ua.features.frames, ub.features.frames)
        for ua, ub in zip(a, b)
    )


def test_noise_free_corpus_decodes_under_nearest_motif_oracle():
    # independent inverse map: split frames into motif-sized groups and
    # classify each against the motif bank by squared distance
    spec = small_spec(noise_level=0.0, n_utterances=20)
    motifs = corpus.token_motifs(spec).astype(np.float64)
    flat = motifs.reshape(spec.vocab_size, -1)
    errors = 0
    for utt in corpus.generate_corpus(spec):
        frames = utt.features.frames.astype(np.float64)
        groups = frames.reshape(-1, spec.motif_frames * spec.feature_dim)
        decoded = []
        for g in groups:
            d2 = ((flat[2:] - g) ** 2).sum(axis=1)
            decoded.append(2 + int(np.argmin(d2)))
        errors += decoded != list(utt.reference_tokens)
    assert errors == 0


def test_durations_respect_requested_range():
    spec = small_spec(duration_range=(5.0, 15.0), n_utterances=10)
    for utt in corpus.generate_corpus(spec):
        assert 5.0 <= utt.features.duration_seconds <= 15.0


def test_repeat_prob_one_gives_single_token_runs():
    spec = small_spec(repeat_prob=1.0, n_utterances=5)
    for utt in corpus.generate_corpus(spec):
        assert len(set(utt.reference_tokens)) == 1


def test_ood_motifs_disjoint_and_shifted():
    spec_in = small_spec()
    spec_ood = small_spec(domain=corpus.OUT_OF_DOMAIN, ood_bias=1.5)
    m_in = corpus.token_motifs(spec_in)
    m_ood = corpus.token_motifs(spec_ood)
    for t in range(2, spec_in.vocab_size):
        assert not np.array_equal(m_in[t], m_ood[t])
    shift = float(m_ood[2:].mean() - m_in[2:].mean())
    assert abs(shift - 1.5) < 0.5


def test_reference_text_matches_tokens():
    vocab = build_vocab(12)
    for utt in corpus.generate_corpus(small_spec()):
        assert vocab.detokenize(utt.reference_tokens) == utt.reference_text
        assert tuple(vocab.tokenize(utt.reference_text)) == utt.reference_tokens


@pytest.mark.parametrize(
    "overrides",
    [
        dict(n_utterances=0),
        dict(vocab_size=2),
        dict(duration_range=(0.4, 0.16)),
        dict(duration_range=(-1.0, 0.4)),
        dict(noise_level=-0.1),
        dict(domain="other"),
        dict(repeat_prob=1.5),
        dict(duration_range=(0.001, 0.002)),  # cannot fit one whole token
    ],
)
def test_invalid_specs_rejected(overrides):
    with pytest.raises(ConfigurationError):
        corpus.generate_corpus(small_spec(**overrides))


def _features(frames, period=10.0, utt_id="u1"):
    return corpus.FeatureSequence(
        frames=np.asarray(frames, dtype=np.float32), frame_period_ms=period, utterance_id=utt_id
    )


class TestStackFrames:
    def test_shape_arithmetic(self):
        feats = _features(np.arange(36).reshape(9, 4))
        out = corpus.stack_frames(feats, 3)
        assert out.frames.shape == (3, 12)
        assert out.frame_period_ms == 30.0

    def test_stack_one_is_identity(self):
        feats = _features(np.arange(8).reshape(4, 2))
        out = corpus.stack_frames(feats, 1)
        assert out is feats

    def test_final_group_zero_padded_hand_case(self):
        # 10x2 matrix stacked by 3: T'=4 and the last row ends in 2*d zeros
        frames = np.arange(20, dtype=np.float32).reshape(10, 2)
        out = corpus.stack_frames(_features(frames), 3)
        assert out.frames.shape == (4, 6)
        expected_last = np.array([18.0, 19.0, 0.0, 0.0, 0.0, 0.0], dtype=np.float32)
        npt.assert_array_equal(out.frames[3], expected_last)
        npt.assert_array_equal(out.frames[0], np.array([0, 1, 2, 3, 4, 5], dtype=np.float32))

    def test_zero_stack_rejected(self):
        with pytest.raises(ConfigurationError):
            corpus.stack_frames(_features(np.zeros((4, 2))), 0)

    @given(
        n_frames=st.integers(1, 40),
        dim=st.integers(1, 5),
        stack=st.integers(1, 7),
    )
    @settings(max_examples=40, deadline=None)
    def test_content_sum_and_duration_preserved(self, n_frames, dim, stack):
        rng = np.random.default_rng(n_frames * 100 + dim * 10 + stack)
        feats = _features(rng.standard_normal((n_frames, dim)).astype(np.float32))
        out = corpus.stack_frames(feats, stack)
        assert out.frames.shape[0] == -(-n_frames // stack)
        npt.assert_allclose(
            out.frames.astype(np.float64).sum(),
            feats.frames.astype(np.float64).sum(),
            rtol=1e-12, atol=1e-12,
        )
        assert 0 <= out.duration_seconds - feats.duration_seconds < out.frame_period_ms / 1000.0


class TestManifestRoundTrip:
    def test_empty_corpus_header_only(self, tmp_path):
        path = corpus.write_manifest([], tmp_path / "manifest.jsonl")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["format"] == "echotrap-manifest"
        assert corpus.read_manifest(path) == []

    def test_round_trip_bit_exact(self, tmp_path):
        utts = corpus.generate_corpus(small_spec(n_utterances=3))
        path = corpus.write_manifest(utts, tmp_path / "manifest.jsonl")
        loaded = corpus.read_manifest(path)
        assert len(loaded) == 3
        for orig, back in zip(utts, loaded):
            assert back.utterance_id == orig.utterance_id
            assert back.reference_tokens == orig.reference_tokens
            assert back.reference_text == orig.reference_text
            assert back.features.frame_period_ms == orig.features.frame_period_ms
            assert back.features.duration_seconds == orig.features.duration_seconds
            npt.assert_array_equal(back.features.frames, orig.features.frames)
            assert back.features.frames.dtype == orig.features.frames.dtype

    def test_truncated_feature_file_names_utterance(self, tmp_path):
        utts = corpus.generate_corpus(small_spec(n_utterances=2))
        path = corpus.write_manifest(utts, tmp_path / "manifest.jsonl")
        victim = tmp_path / "features" / f"{utts[1].utterance_id}.feat"
        victim.write_bytes(victim.read_bytes()[:-7])
        with pytest.raises(DataError, match=utts[1].utterance_id):
            corpus.read_manifest(path)

    def test_malformed_record_names_line_number(self, tmp_path):
        utts = corpus.generate_corpus(small_spec(n_utterances=2))
        path = corpus.write_manifest(utts, tmp_path / "manifest.jsonl")
        lines = path.read_text().splitlines()
        lines[2] = '{"oops": not json'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestParseError, match="line 3"):
            corpus.read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            corpus.read_manifest(tmp_path / "nope.jsonl")


def test_feature_file_header_and_payload(tmp_path):
    feats = _features(np.arange(6, dtype=np.float32).reshape(3, 2))
    path = tmp_path / "x.feat"
    corpus.write_features(feats, path)
    raw = path.read_bytes()
    assert raw[:8] == corpus.FEATURE_MAGIC
    assert len(raw) == 16 + 3 * 2 * 4
    back = corpus.read_features(path, 10.0, "x")
    npt.assert_array_equal(back.frames, feats.frames)


def test_feature_csv_export(tmp_path):
    feats = _features([[1.5, -2.0], [0.25, 3.0]])
    path = tmp_path / "x.csv"
    corpus.features_to_csv(feats, path)
    rows = [line.split(",") for line in path.read_text().strip().splitlines()]
    assert [[float(v) for v in row] for row in rows] == [[1.5, -2.0], [0.25, 3.0]]


def test_feature_sequence_invariants():
    with pytest.raises(ValueError):
        _features(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        _features([[np.nan, 1.0]])
    with pytest.raises(ValueError):
        _features([[1.0]], period=0.0)
    feats = _features(np.ones((50, 2)))
    assert feats.duration_seconds == pytest.approx(0.5)


def test_split_corpus():
    utts = corpus.generate_corpus(small_spec(n_utterances=10))
    a, b, c = corpus.split_corpus(utts, [5, 3, 2])
    assert [len(a), len(b), len(c)] == [5, 3, 2]
    with pytest.raises(ConfigurationError):
        corpus.split_corpus(utts, [8, 8])

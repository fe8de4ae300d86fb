import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portraitnerf.metrics import (Embedder, RandomProjectionEmbedder,
                                  eval_report, pixel_mse_consistency,
                                  temporal_embedding_consistency,
                                  text_alignment)


def _frames(n=4, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size, 3)) for _ in range(n)]


class TestPixelMse:
    def test_constant_sequence_is_zero(self):
        frame = np.full((8, 8, 3), 0.3)
        assert pixel_mse_consistency([frame, frame.copy(), frame.copy()]) == 0.0

    def test_constant_offset_pair(self):
        a = np.full((8, 8, 3), 0.2)
        assert abs(pixel_mse_consistency([a, a + 0.1]) - 0.01) < 1e-12

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            pixel_mse_consistency([np.zeros((4, 4, 3))])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 1000), k=st.integers(0, 3))
    def test_duplicating_a_frame_never_increases(self, seed, k):
        frames = _frames(4, seed)
        value = pixel_mse_consistency(frames)
        duplicated = frames[:k + 1] + [frames[k].copy()] + frames[k + 1:]
        assert pixel_mse_consistency(duplicated) <= value + 1e-15

    def test_order_sensitive(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.5)
        ordered = pixel_mse_consistency([a, a, b, b])
        shuffled = pixel_mse_consistency([a, b, a, b])
        assert shuffled > ordered


class _ConstantEmbedder(Embedder):
    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return np.array([1.0, 0.0])


class _OrthogonalEmbedder(Embedder):
    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return np.array([0.0, 1.0])


class TestEmbeddingMetrics:
    def test_constant_sequence_scores_one(self):
        frame = np.full((16, 16, 3), 0.4)
        value = temporal_embedding_consistency(
            [frame, frame.copy()], RandomProjectionEmbedder())
        assert abs(value - 1.0) < 1e-6

    def test_bounded(self):
        embedder = RandomProjectionEmbedder(seed=2)
        for seed in range(5):
            value = temporal_embedding_consistency(_frames(5, seed), embedder)
            assert -1.0 <= value <= 1.0
            value = text_alignment(_frames(3, seed), "prompt", embedder)
            assert -1.0 <= value <= 1.0

    def test_degenerate_embedder_scores_one(self):
        assert text_alignment(_frames(3), "x", _ConstantEmbedder()) == 1.0

    def test_orthogonal_embedder_scores_zero(self):
        assert abs(text_alignment(_frames(3), "x", _OrthogonalEmbedder())) < 1e-6

    def test_single_frame_alignment_equals_cosine(self):
        embedder = RandomProjectionEmbedder(seed=1)
        frame = _frames(1, 4)[0]
        direct = float(np.dot(embedder.embed_image(frame),
                              embedder.embed_text("p")))
        assert text_alignment([frame], "p", embedder) == pytest.approx(direct)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            text_alignment([], "x", RandomProjectionEmbedder())
        with pytest.raises(ValueError):
            temporal_embedding_consistency([np.zeros((8, 8, 3))],
                                           RandomProjectionEmbedder())


class TestRandomProjectionEmbedder:
    def test_unit_norm(self):
        embedder = RandomProjectionEmbedder(dim=32, seed=0)
        for seed in range(3):
            v = embedder.embed_image(_frames(1, seed)[0])
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9
            t = embedder.embed_text(f"prompt {seed}")
            assert abs(np.linalg.norm(t) - 1.0) < 1e-9

    def test_deterministic(self):
        frame = _frames(1, 7)[0]
        a = RandomProjectionEmbedder(seed=3).embed_image(frame)
        b = RandomProjectionEmbedder(seed=3).embed_image(frame)
        assert np.array_equal(a, b)
        assert np.array_equal(RandomProjectionEmbedder().embed_text("x"),
                              RandomProjectionEmbedder().embed_text("x"))

    def test_distinct_texts_distinct_embeddings(self):
        e = RandomProjectionEmbedder()
        assert not np.array_equal(e.embed_text("a"), e.embed_text("b"))


def test_eval_report_contents():
    frames = _frames(4, 1)
    report = eval_report(frames, prompt="turn the hair pink")
    assert report["n_frames"] == 4
    assert set(report) == {"n_frames", "pixel_mse", "tem_con", "clip_text"}
    no_prompt = eval_report(frames)
    assert "clip_text" not in no_prompt

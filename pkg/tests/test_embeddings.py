import numpy as np
import pytest

from fdylka.embeddings import (
    EmbeddingIOError,
    align,
    provide,
    read_embedding,
    stub_embedding,
    write_embedding,
)
from fdylka.errors import FormatError, InputError


class TestAlign:
    def test_identity_at_target_length(self):
        e = np.random.default_rng(0).standard_normal((250, 4))
        np.testing.assert_array_equal(align(e), e)
        np.testing.assert_array_equal(align(e, "nearest_interpolation"), e)

    def test_integer_ratio_average(self):
        e = np.random.default_rng(1).standard_normal((500, 3))
        np.testing.assert_allclose(align(e), e.reshape(250, 2, 3).mean(axis=1), rtol=1e-12)

    def test_uneven_bins_match_loop(self):
        e = np.random.default_rng(2).standard_normal((496, 5))
        ref = np.array([e[(i * 496) // 250 : ((i + 1) * 496) // 250].mean(axis=0) for i in range(250)])
        np.testing.assert_allclose(align(e), ref, rtol=1e-12)

    def test_short_sequence_falls_back_to_nearest(self):
        e = np.arange(10.0)[:, None]
        out = align(e)
        assert out.shape == (250, 1)
        assert out[0, 0] == 0 and out[-1, 0] == 9
        np.testing.assert_array_equal(out, align(e, "nearest_interpolation"))

    def test_single_row(self):
        out = align(np.ones((1, 768)))
        assert out.shape == (250, 768)

    def test_empty(self):
        with pytest.raises(InputError):
            align(np.zeros((0, 768)))


class TestFiles:
    def test_round_trip(self, tmp_path):
        e = np.random.default_rng(3).standard_normal((496, 768))
        write_embedding(tmp_path / "c1.emb", e)
        np.testing.assert_array_equal(read_embedding(tmp_path / "c1.emb"), e.astype(np.float32))
        np.testing.assert_array_equal(provide("c1", "file", directory=tmp_path), e.astype(np.float32))

    def test_wrong_dimension_names_expected(self, tmp_path):
        write_embedding(tmp_path / "c.emb", np.zeros((4, 512)))
        with pytest.raises(FormatError, match="768"):
            read_embedding(tmp_path / "c.emb")

    def test_missing_file_names_clip(self, tmp_path):
        with pytest.raises(EmbeddingIOError, match="clip7"):
            provide("clip7", "file", directory=tmp_path)

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "c.emb").write_bytes(b"EMB1" + bytes(4))
        with pytest.raises(EmbeddingIOError):
            read_embedding(tmp_path / "c.emb")


class TestStub:
    def test_deterministic_per_clip_and_seed(self):
        a, b = stub_embedding("x", 0), stub_embedding("x", 0)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (496, 768)
        assert not np.array_equal(a, stub_embedding("y", 0))
        assert not np.array_equal(a, stub_embedding("x", 1))

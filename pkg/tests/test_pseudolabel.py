import numpy as np
import pytest

from fdylka.errors import InputError
from fdylka.model import ClipPrediction
from fdylka.pseudolabel import ensemble, label_external, label_in_domain


def pred(strong, weak):
    return ClipPrediction(np.asarray(strong, float), np.asarray(weak, float), "c")


class TestEnsemble:
    def test_mean(self):
        out = ensemble([pred([[0.2]], [0.1]), pred([[0.6]], [0.5])])
        np.testing.assert_allclose(out.strong, [[0.4]])
        np.testing.assert_allclose(out.weak, [0.3])

    def test_single_and_identical(self):
        p = pred(np.random.default_rng(0).random((250, 10)), np.random.default_rng(1).random(10))
        np.testing.assert_array_equal(ensemble([p]).strong, p.strong)
        np.testing.assert_array_equal(ensemble([p, p, p]).strong, p.strong)

    def test_empty(self):
        with pytest.raises(InputError):
            ensemble([])


class TestThresholds:
    def test_in_domain_strict(self):
        g = label_in_domain(pred([[0.51, 0.49, 0.5]], [0, 0, 0]))
        np.testing.assert_array_equal(g.labels, [[1, 0, 0]])
        assert g.source == "in_domain"

    @pytest.mark.parametrize(
        "frame,clip,given,expected",
        [(0.6, 0.8, 1, 1), (0.6, 0.65, 1, 0), (0.9, 0.9, 0, 0), (0.5, 0.9, 1, 0), (0.9, 0.7, 1, 0)],
    )
    def test_external_gates(self, frame, clip, given, expected):
        g = label_external(pred([[frame]], [clip]), [given])
        assert g.labels[0, 0] == expected

    def test_external_below_in_domain_and_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            s, w, l = rng.random((250, 10)), rng.random(10), rng.integers(0, 2, 10)
            ext = label_external(pred(s, w), l).labels
            assert np.all(ext <= label_in_domain(pred(s, w)).labels)
            bump = np.minimum(s + 0.1 * rng.random(s.shape), 1)
            assert np.all(label_external(pred(bump, np.minimum(w + 0.05, 1)), l).labels >= ext)

    def test_rethresholding_is_idempotent(self):
        s = np.random.default_rng(3).random((250, 10))
        once = label_in_domain(pred(s, np.zeros(10))).labels
        np.testing.assert_array_equal(label_in_domain(pred(once, np.zeros(10))).labels, once)

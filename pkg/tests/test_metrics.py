import logging

import numpy as np
import pytest

from dualdit.datagen import edit_distance, normalize_text
from dualdit.errors import ShapeError
from dualdit.metrics import clap_score, embedding_stats, frechet_distance, wer_report
from tests.oracles import frechet_gaussian


class TestFrechet:
    def test_identical(self, rng):
        x = rng.standard_normal((100, 5))
        assert frechet_distance(x, x) == pytest.approx(0, abs=1e-9)

    def test_unit_shift(self, rng):
        x = rng.standard_normal((50, 3))
        assert frechet_distance(x, x + np.array([0, 1.0, 0])) == pytest.approx(1.0, abs=1e-6)

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((80, 4)), 2 * rng.standard_normal((60, 4)) + 1
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)

    def test_against_closed_form_oracle(self, rng):
        a = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 3))
        b = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 3)) + 0.3
        expect = frechet_gaussian(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
        assert frechet_distance(a, b) == pytest.approx(expect, rel=1e-8)

    def test_scipy_sqrtm_oracle(self, rng):
        from scipy.linalg import sqrtm

        a, b = rng.standard_normal((30, 3)), rng.standard_normal((30, 3)) * [1, 2, 3]
        sa, sb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        expect = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(sa + sb - 2 * np.real(sqrtm(sa @ sb)))
        assert frechet_distance(a, b) == pytest.approx(expect, rel=1e-6)

    def test_ridge_for_small_sets(self, caplog):
        caplog.set_level(logging.INFO)
        _, sigma = embedding_stats(np.ones((2, 4)))
        assert np.allclose(np.diag(sigma), 1e-6)
        assert "ridge" in caplog.text

    def test_errors(self):
        with pytest.raises(ShapeError):
            frechet_distance(np.zeros((0, 3)), np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            frechet_distance(np.zeros((5, 3)), np.zeros((5, 2)))


class TestClap:
    def test_identical_and_orthogonal(self):
        e = np.eye(4)
        assert clap_score(e, e) == pytest.approx(1.0)
        assert clap_score(e, np.roll(e, 1, axis=0)) == pytest.approx(0.0)

    def test_concentration(self, rng):
        a, b = rng.standard_normal((1000, 32)), rng.standard_normal((1000, 32))
        assert abs(clap_score(a, b)) < 0.1

    def test_scale_invariant(self, rng):
        a, b = rng.standard_normal((10, 5)), rng.standard_normal((10, 5))
        assert clap_score(3 * a, 0.5 * b) == pytest.approx(clap_score(a, b), rel=1e-12)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            clap_score(np.ones((3, 2)), np.ones((2, 2)))


class TestWerReport:
    def test_pooled(self):
        rep = wer_report([("x", "a b", "a x"), ("y", "c", "c")])
        assert rep.corpus_wer == pytest.approx(1 / 3)
        assert rep.per_entry == {"x": 0.5, "y": 0.0}

    def test_exact_and_single(self):
        assert wer_report([("a", "one two", "one two")]).corpus_wer == 0
        rep = wer_report([("a", "one two three", "one three")])
        assert rep.corpus_wer == rep.per_entry["a"]

    def test_missing_pairs_skipped(self, caplog):
        rep = wer_report([("a", "x y", None), ("b", " ", "z"), ("c", "x", "x")])
        assert rep.skipped == 2 and rep.corpus_wer == 0
        assert "skipped 2" in caplog.text

    def test_pooled_brute_force(self, rng):
        vocab = ["a", "b", "c", "d"]
        rows = []
        for i in range(30):
            ref = " ".join(rng.choice(vocab, size=rng.integers(1, 6)))
            hyp = " ".join(rng.choice(vocab, size=rng.integers(0, 6)))
            rows.append((i, ref, hyp))
        edits = sum(edit_distance(normalize_text(r), normalize_text(h)) for _, r, h in rows)
        words = sum(len(normalize_text(r)) for _, r, _ in rows)
        assert wer_report(rows).corpus_wer == edits / words

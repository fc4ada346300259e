"""Metric tests.

The fixed-pair BLEU/ROUGE-L/CIDEr expectations below were hand-derived
from n-gram count tables before the implementation was written; the
comments record the counting.  Comparisons use float-roundoff tolerance
(different but algebraically equal expression trees).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmil.metrics import (
    EvalReport,
    auc_score,
    bleu,
    cider,
    cider_scores,
    classification_metrics,
    rouge_l,
)
from graphmil.numerics import ContractError

from helpers import pairwise_auc

C1, R1 = "the cat sat".split(), "the cat sat down".split()
C2 = R2 = "malignant tissue found in stomach".split()
C3, R3 = "no tumor seen".split(), "benign glands only".split()


class TestClassification:
    def test_perfect_separation(self):
        m = classification_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert (m.precision, m.recall, m.f1, m.auc) == (1.0, 1.0, 1.0, 1.0)

    def test_constant_scores_auc_half(self):
        m = classification_metrics([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert m.auc == 0.5

    def test_auc_hand_case(self):
        assert auc_score([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]) == pytest.approx(0.75)

    def test_degenerate_denominator_flagged(self):
        m = classification_metrics([0.1, 0.2, 0.3], [0, 0, 1], threshold=0.9)
        assert m.precision == 0.0 and "precision" in m.degenerate
        assert m.recall == 0.0 and m.f1 == 0.0

    def test_one_class_auc_rejected(self):
        with pytest.raises(ContractError, match="AUC"):
            auc_score([0.1, 0.9], [1, 1])

    @given(st.integers(0, 10_000))
    @settings(max_examples=60)
    def test_auc_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 20))
        scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        fast = auc_score(scores, labels)
        slow = pairwise_auc(scores.tolist(), labels.tolist())
        assert abs(fast - slow) <= 1e-12

    def test_f1_is_harmonic_mean(self):
        m = classification_metrics([0.9, 0.9, 0.1, 0.9], [1, 1, 0, 0])
        expect = 2 * m.precision * m.recall / (m.precision + m.recall)
        assert m.f1 == pytest.approx(expect, abs=1e-15)


class TestBleu:
    def test_identity_is_one(self):
        for k in range(1, 5):
            assert bleu(C2, [R2], n=k) == 1.0

    def test_disjoint_hits_smoothing_floor(self):
        assert bleu(C3, [R3], n=4) == pytest.approx(1e-9, rel=1e-9)

    def test_hand_oracle_cat_pair(self):
        # counts: p1=3/3, p2=2/2, p3=1/1, p4 has no 4-grams -> 1e-9 floor;
        # brevity: c=3 < r=4 -> exp(1 - 4/3)
        bp = math.exp(1.0 - 4.0 / 3.0)
        assert bleu(C1, [R1], n=1) == pytest.approx(bp, abs=1e-15)
        assert bleu(C1, [R1], n=2) == pytest.approx(bp, abs=1e-15)
        assert bleu(C1, [R1], n=3) == pytest.approx(bp, abs=1e-15)
        assert bleu(C1, [R1], n=4) == pytest.approx(bp * 1e-9 ** 0.25, rel=1e-12)

    def test_empty_candidate_scores_zero(self):
        assert bleu([], [R1]) == 0.0

    def test_reference_order_invariance(self):
        refs = [R1, R2, R3]
        a = bleu(C1, refs, n=4)
        b = bleu(C1, refs[::-1], n=4)
        assert a == b

    @given(st.integers(0, 5_000))
    @settings(max_examples=40)
    def test_monotone_nonincreasing_in_n(self, seed):
        rng = np.random.default_rng(seed)
        vocab = list("abcdef")
        cand = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 12))]
        ref = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 12))]
        scores = [bleu(cand, [ref], n=k) for k in range(1, 5)]
        for lo, hi in zip(scores[1:], scores):
            assert lo <= hi + 1e-12


class TestRougeL:
    def test_identity(self):
        assert rouge_l(C2, R2) == 1.0

    def test_hand_oracle_cat_pair(self):
        # LCS=3, recall 3/4, precision 1, beta=1.2
        b2 = 1.2 ** 2
        expect = (1 + b2) * 0.75 * 1.0 / (0.75 + b2 * 1.0)
        assert rouge_l(C1, R1) == pytest.approx(expect, abs=1e-15)

    def test_disjoint_and_empty(self):
        assert rouge_l(C3, R3) == 0.0
        assert rouge_l([], R3) == 0.0


class TestCider:
    def test_three_fixed_pairs(self):
        cands = [C1, C2, C3]
        refs = [R1, R2, R3]
        got = cider_scores(cands, refs)
        # Every n-gram present in any reference occurs in exactly one of the
        # three documents, so idf is log 3 throughout and cancels in the
        # cosine.  Pair 1: cos(1-gram)=3/sqrt(3*4), cos(2-gram)=2/sqrt(2*3),
        # cos(3-gram)=1/sqrt(1*2), no candidate 4-grams.  Pair 2 is identical
        # 5-token sentences (all four orders cosine 1).  Pair 3 is disjoint.
        p1 = 10.0 * (math.sqrt(3) / 2 + 2 / math.sqrt(6) + 1 / math.sqrt(2)) / 4
        assert got[0] == pytest.approx(p1, abs=1e-12)
        assert got[1] == pytest.approx(10.0, abs=1e-12)
        assert got[2] == 0.0
        assert cider(cands, refs) == pytest.approx(sum([p1, 10.0, 0.0]) / 3,
                                                   abs=1e-12)

    def test_empty_candidate_scores_zero(self):
        assert cider_scores([[], C2], [R1, R2])[0] == 0.0

    def test_range(self):
        rng = np.random.default_rng(3)
        vocab = list("abcdefgh")
        cands, refs = [], []
        for _ in range(6):
            cands.append([vocab[i] for i in rng.integers(0, 8, size=6)])
            refs.append([vocab[i] for i in rng.integers(0, 8, size=6)])
        for s in cider_scores(cands, refs):
            assert 0.0 <= s <= 10.0 + 1e-12


def test_report_rendering():
    m = classification_metrics([0.9, 0.2], [1, 0])
    rep = EvalReport(task="classify", n_bags=2, classification=m)
    assert '"auc": 1.0' in rep.to_json()
    table = rep.to_table()
    assert "precision" in table and "auc" in table
    cap = EvalReport(task="caption", n_bags=2, bleu=(1.0, 1.0, 1.0, 1.0),
                     rouge_l=1.0, cider=10.0)
    assert "bleu-4" in cap.to_table() and '"cider": 10.0' in cap.to_json()

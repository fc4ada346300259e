"""Classification and caption-quality metrics.

Classification: precision/recall/F1 at a threshold plus rank-based AUC
(Mann-Whitney with ties counting one half).  Captioning: clipped n-gram
BLEU with epsilon smoothing, LCS-based ROUGE-L, and TF-IDF n-gram CIDEr
with the conventional x10 scaling.  All caption metrics take pre-tokenized
sequences.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import ContractError

BLEU_SMOOTHING = 1e-9
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    auc: float
    degenerate: tuple[str, ...] = ()   # metrics forced to 0 by empty denominators


@dataclass(frozen=True)
class EvalReport:
    task: str
    n_bags: int
    classification: ClassificationMetrics | None = None
    bleu: tuple[float, float, float, float] | None = None
    rouge_l: float | None = None
    cider: float | None = None

    def to_dict(self) -> dict:
        doc: dict = {"task": self.task, "n_bags": self.n_bags}
        if self.classification is not None:
            c = self.classification
            doc.update(precision=c.precision, recall=c.recall, f1=c.f1,
                       auc=c.auc, degenerate=list(c.degenerate))
        if self.bleu is not None:
            doc["bleu"] = list(self.bleu)
        if self.rouge_l is not None:
            doc["rouge_l"] = self.rouge_l
        if self.cider is not None:
            doc["cider"] = self.cider
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        rows = [("task", self.task), ("bags", str(self.n_bags))]
        if self.classification is not None:
            c = self.classification
            rows += [("precision", f"{c.precision:.6f}"),
                     ("recall", f"{c.recall:.6f}"),
                     ("f1", f"{c.f1:.6f}"),
                     ("auc", f"{c.auc:.6f}")]
            if c.degenerate:
                rows.append(("degenerate", ",".join(c.degenerate)))
        if self.bleu is not None:
            for i, b in enumerate(self.bleu, start=1):
                rows.append((f"bleu-{i}", f"{b:.6f}"))
        if self.rouge_l is not None:
            rows.append(("rouge-l", f"{self.rouge_l:.6f}"))
        if self.cider is not None:
            rows.append(("cider", f"{self.cider:.6f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def auc_score(scores, labels) -> float:
    """Rank-statistic AUC; ties between a positive and a negative score
    contribute one half.  Needs at least one example of each class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC undefined: need both a positive and a negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0   # average rank, 1-based
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(scores, labels,
                           threshold: float = 0.5) -> ClassificationMetrics:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    pred = (s >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    degenerate = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, _ = 0.0, degenerate.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, _ = 0.0, degenerate.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, _ = 0.0, degenerate.append("f1")
    return ClassificationMetrics(precision=precision, recall=recall, f1=f1,
                                 auc=auc_score(s, y),
                                 degenerate=tuple(degenerate))


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, references, n: int = 4) -> float:
    """Brevity-penalized geometric mean of clipped 1..n-gram precisions.

    Zero-count precisions (including orders longer than the candidate) take
    the 1e-9 smoothing floor.  The reference length is the one closest to
    the candidate's, shorter on ties, so the score does not depend on
    reference order."""
    if not candidate:
        return 0.0
    if not references or any(not r for r in references):
        raise ContractError("bleu: empty reference")
    precisions = []
    for k in range(1, n + 1):
        cand = _ngrams(candidate, k)
        total = sum(cand.values())
        if total == 0:
            precisions.append(BLEU_SMOOTHING)
            continue
        best = Counter()
        for ref in references:
            for g, c in _ngrams(ref, k).items():
                if c > best[g]:
                    best[g] = c
        clipped = sum(min(c, best[g]) for g, c in cand.items())
        precisions.append(clipped / total if clipped else BLEU_SMOOTHING)
    c_len = len(candidate)
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(math.log(p) for p in precisions) / n)


def _lcs_length(a, b) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, 1):
        for j, y in enumerate(b, 1):
            table[i][j] = table[i - 1][j - 1] + 1 if x == y \
                else max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """Longest-common-subsequence F-measure."""
    if not candidate:
        return 0.0
    if not reference:
        raise ContractError("rouge_l: empty reference")
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    rec = lcs / len(reference)
    prec = lcs / len(candidate)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


def cider_scores(candidates, references, n: int = 4) -> list[float]:
    """Per-candidate CIDEr: x10-scaled mean over 1..n-grams of the cosine
    similarity between TF-IDF vectors.  Document frequency is counted over
    the reference corpus (one reference document per candidate)."""
    if len(candidates) != len(references) or not candidates:
        raise ContractError("cider: one reference per candidate required")
    n_docs = len(references)
    doc_freq = [Counter() for _ in range(n + 1)]
    for ref in references:
        for k in range(1, n + 1):
            for g in _ngrams(ref, k):
                doc_freq[k][g] += 1

    def tfidf(tokens, k):
        vec = {}
        for g, c in _ngrams(tokens, k).items():
            vec[g] = c * math.log(n_docs / max(1.0, doc_freq[k][g]))
        return vec

    scores = []
    for cand, ref in zip(candidates, references):
        if not cand:
            scores.append(0.0)
            continue
        total = 0.0
        for k in range(1, n + 1):
            cv = tfidf(cand, k)
            rv = tfidf(ref, k)
            dot = sum(v * rv.get(g, 0.0) for g, v in cv.items())
            nc = math.sqrt(sum(v * v for v in cv.values()))
            nr = math.sqrt(sum(v * v for v in rv.values()))
            if nc > 0 and nr > 0:
                total += dot / (nc * nr)
        scores.append(10.0 * total / n)
    return scores


def cider(candidates, references, n: int = 4) -> float:
    return float(np.mean(cider_scores(candidates, references, n)))

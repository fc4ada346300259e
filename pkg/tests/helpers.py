"""Independent scalar oracles shared by unit and acceptance tests.

Everything here is deliberately written with plain Python loops over
lists, so it cannot share a code path (or a bug) with the package.
"""

import math


def student_t_assignments(points, centroids, alpha=1.0):
    """Direct per-element evaluation of the soft-assignment formula."""
    out = []
    for f in points:
        kernels = []
        for mu in centroids:
            d2 = sum((fi - mi) ** 2 for fi, mi in zip(f, mu))
            kernels.append((1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0))
        s = sum(kernels)
        out.append([k / s for k in kernels])
    return out


def sharpened_targets(q_rows):
    """Direct evaluation of the mass-balanced sharpened target."""
    n = len(q_rows)
    k = len(q_rows[0])
    mass = [sum(q_rows[i][j] for i in range(n)) for j in range(k)]
    out = []
    for i in range(n):
        nums = [q_rows[i][j] ** 2 / mass[j] for j in range(k)]
        s = sum(nums)
        out.append([v / s for v in nums])
    return out


def kl_divergence(t_rows, q_rows):
    total = 0.0
    for trow, qrow in zip(t_rows, q_rows):
        for t, q in zip(trow, qrow):
            total += t * math.log(t / q)
    return total


def purity(hard, truth_regions):
    """Fraction of points whose cluster's majority ground-truth region is
    their own region."""
    clusters = {}
    for idx, c in enumerate(hard):
        clusters.setdefault(int(c), []).append(truth_regions[idx])
    correct = 0
    for members in clusters.values():
        counts = {}
        for r in members:
            counts[r] = counts.get(r, 0) + 1
        correct += max(counts.values())
    return correct / len(hard)


def pairwise_auc(scores, labels):
    """Brute-force AUC over all positive/negative pairs, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("AUC needs both classes")
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))

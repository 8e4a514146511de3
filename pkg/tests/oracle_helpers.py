"""Independent reference implementations used by several test modules.

Everything here is deliberately plain Python (math module, loops,
itertools): these are the oracles the fast numpy paths are checked
against, so they must not share code with the package.
"""

import itertools
import math

EPS = 1e-8


def oracle_cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = max(math.sqrt(sum(a * a for a in u)), EPS)
    nv = max(math.sqrt(sum(b * b for b in v)), EPS)
    return dot / (nu * nv)


def oracle_quantize_chunk(row, sub_cb, n, temperature=1.0):
    """Enumerate every n-subset of primitives; keep the one with the
    largest similarity sum (lexicographically first among maximizers),
    order it by descending similarity with index tiebreaks, and weight by
    softmax of similarity/temperature."""
    codes = [list(map(float, c)) for c in sub_cb]
    sims = [oracle_cosine(list(map(float, row)), c) for c in codes]
    best = None
    for subset in itertools.combinations(range(len(codes)), n):
        score = sum(sims[i] for i in subset)
        if best is None or score > best[0] + 1e-15:
            best = (score, subset)
    ordered = sorted(best[1], key=lambda i: (-sims[i], i))
    top = max(sims[i] / temperature for i in ordered)
    exps = [math.exp(sims[i] / temperature - top) for i in ordered]
    total = sum(exps)
    weights = [e / total for e in exps]
    out = [0.0] * len(row)
    for w, i in zip(weights, ordered):
        for d in range(len(row)):
            out[d] += w * codes[i][d]
    return out, list(ordered), weights


def oracle_spearman(a, b):
    """Rank-then-Pearson with average ranks, all via plain loops."""

    def ranks(values):
        out = []
        for v in values:
            less = sum(1 for u in values if u < v)
            equal = sum(1 for u in values if u == v)
            out.append(less + (equal + 1) / 2.0)
        return out

    ra, rb = ranks(list(a)), ranks(list(b))
    n = len(ra)
    ma = sum(ra) / n
    mb = sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / (va * vb) ** 0.5

"""Independent reference implementations used by the tests.

Each one is written the slow, literal way (Python loops, exact fractions)
and shares no code with the package beyond plain data containers.
"""

import math
from fractions import Fraction

import numpy as np

from trafficsem import contrastive


def _cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def _rows_loss(anchors, others, tau, mode):
    total = 0.0
    b = len(anchors)
    for i in range(b):
        s = [_cos(anchors[i], others[j]) / tau for j in range(b)]
        terms = [s[j] for j in range(b) if mode == "standard" or j != i]
        m = max(terms)
        total += m + math.log(sum(math.exp(t - m) for t in terms)) - s[i]
    return total / b


def loop_info_nce(x_t, x_p, heads, tau, mode="standard", symmetric=False):
    """Mean in-batch InfoNCE evaluated row by row."""
    def proj(x, head):
        if head is None:
            return [list(r) for r in x]
        return [[sum(head.weight[i, j] * r[j] for j in range(len(r))) + head.bias[i]
                 for i in range(head.weight.shape[0])] for r in x]

    z_t, z_p = proj(x_t, heads.text), proj(x_p, heads.packet)
    loss = _rows_loss(z_t, z_p, tau, mode)
    if symmetric:
        loss = 0.5 * (loss + _rows_loss(z_p, z_t, tau, mode))
    return loss


def fd_check(x_t, x_p, heads, tau, mode, symmetric, h=1e-5):
    """Worst ``|analytic - central FD| / (1 + |analytic|)`` over every head parameter."""
    _, grads = contrastive.info_nce_grad(x_t, x_p, heads, tau, mode, symmetric)
    params = contrastive.head_params(heads)
    assert set(grads) == set(params)
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = contrastive.batch_loss(x_t, x_p, heads, tau, mode, symmetric)
            p[idx] = old - h
            down = contrastive.batch_loss(x_t, x_p, heads, tau, mode, symmetric)
            p[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / (1 + abs(g[idx])))
    return worst


def longest_path_levels(n, edges):
    """Hierarchy level of each node by repeated relaxation (no topological sort)."""
    level = [0] * n
    for _ in range(n):
        changed = False
        for u, v in edges:
            if level[v] < level[u] + 1:
                level[v] = level[u] + 1
                changed = True
        if not changed:
            break
    return level


def dense_message_pass(n, edges, x, act):
    """Literal evaluation: for every node v with predecessors one level up,
    x_v <- (1/|N(v)|) sum_u act(x_v * x_u), from pre-pass values."""
    level = longest_path_levels(n, edges)
    d = len(x[0])
    out = [list(row) for row in x]
    for v in range(n):
        preds = [u for u, w in edges if w == v and level[u] == level[v] - 1]
        if not preds:
            continue
        acc = [0.0] * d
        for u in preds:
            for k in range(d):
                acc[k] += act(x[v][k] * x[u][k])
        out[v] = [a / len(preds) for a in acc]
    return out


def brute_auc(scores, labels):
    """Exact pairwise concordance as a Fraction."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                wins += Fraction(1, 2)
    return wins / (len(pos) * len(neg))


def random_dag(rng, max_nodes=10, p=0.35):
    """Random DAG on ``n`` nodes: edges only go from lower to higher index,
    then node ids are shuffled so index order says nothing."""
    n = int(rng.integers(2, max_nodes + 1))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    perm = rng.permutation(n)
    return n, [(int(perm[u]), int(perm[v])) for u, v in edges]

"""Independent reference computations used by the test-suite."""
from __future__ import annotations

import numpy as np

from wsed import autodiff as ad


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"], op_flags=["readwrite"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, *arrays, seed=0, h=1e-5):
    """Compare autodiff gradients of ``sum(op(*inputs) * w)`` against finite differences.

    A fixed random weighting ``w`` makes every output element matter.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    w = None

    def value():
        nonlocal w
        out = op(*[ad.Tensor(a) for a in arrays]).data
        if w is None:
            w = rng.standard_normal(out.shape)
        return float((out * w).sum())

    value()
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = ad.tsum(out * w)
    ad.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(value, arrays, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def sliding_sort_median(b, width):
    """Median filter by sorting each edge-replicated window."""
    b = list(b)
    half = width // 2
    padded = [b[0]] * half + b + [b[-1]] * half
    return [sorted(padded[i:i + width])[half] for i in range(len(b))]


def brute_force_matching(adj) -> int:
    """Maximum one-to-one matching size by exhaustive search.

    Every ref is either left unmatched or paired with each still-unused
    compatible est in turn; all such partial injections are enumerated.
    """
    adj = np.asarray(adj, dtype=bool)
    n_ref, n_est = adj.shape

    def search(r, used):
        if r == n_ref:
            return 0
        best = search(r + 1, used)
        for e in range(n_est):
            if adj[r, e] and not used & (1 << e):
                best = max(best, 1 + search(r + 1, used | (1 << e)))
        return best

    return search(0, 0)

"""Independent reference implementations used as test oracles.

Nothing here calls into the package's differentiable ops: loops, scalar
arithmetic and finite differences only.
"""

import itertools
import math
from collections import Counter

import numpy as np

from gramhead import autodiff as ad


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    p = len(b[0])
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, stride=1, padding=0):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride + u - padding
                                q = j * stride + v - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    s += x[b, ch, r, q] * w[o, ch, u, v]
                    out[b, o, i, j] = s
    return out


def naive_grouped_gramian(v, cardinality):
    """v: HW x C single instance -> list in group/row-major order."""
    hw, c = v.shape
    g = c // cardinality
    out = []
    for grp in range(cardinality):
        cols = range(grp * g, (grp + 1) * g)
        for a in cols:
            for b in cols:
                out.append(sum(v[t, a] * v[t, b] for t in range(hw)))
    return np.array(out)


def scalar_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def scalar_layernorm(x, gamma, beta, eps):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return [gamma[i] * (x[i] - mu) / math.sqrt(var + eps) + beta[i] for i in range(n)]


def scalar_class_attention(token, feats, wq, wk, wv, wo, gamma, beta, heads, eps):
    """One instance: token (D,), feats (HW, D)."""
    d = len(token)
    dh = d // heads
    seq = [list(r) for r in feats] + [list(token)]
    q = naive_matmul([token], wq)[0]
    k = naive_matmul(seq, wk)
    v = naive_matmul(seq, wv)
    attended = [0.0] * d
    for a in range(heads):
        sl = range(a * dh, (a + 1) * dh)
        scores = [sum(q[i] * k[t][i] for i in sl) / math.sqrt(dh) for t in range(len(seq))]
        w = scalar_softmax(scores)
        for i in sl:
            attended[i] = sum(w[t] * v[t][i] for t in range(len(seq)))
    proj = naive_matmul([attended], wo)[0]
    return scalar_layernorm([token[i] + proj[i] for i in range(d)], gamma, beta, eps)


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` for every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = f(*arrays)
            arr[idx] = old - h
            fm = f(*arrays)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Max abs difference over the larger of the two inf-norms (floored at 1e-8)."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, rng, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build`` maps a list of Tensors to an output Tensor; the scalar objective
    is ``sum(out * R)`` for a fixed random ``R``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.no_grad():
        shape = build([ad.Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(shape)

    def objective(*arrs):
        with ad.no_grad():
            out = build([ad.Tensor(a) for a in arrs])
        return float(np.sum(out.data * weights))

    params = [ad.parameter(a.copy()) for a in arrays]
    with ad.Tape() as tape:
        out = build(params)
        loss = ad.sum_(ad.mul(out, ad.Tensor(weights)))
    tape.backward(loss)
    numeric = numeric_grad(objective, arrays, h)
    return max(rel_error(p.grad, n) for p, n in zip(params, numeric))


def jacobi_eigenvalues(a, sweeps=100, tol=1e-14):
    """Cyclic Jacobi rotations for a small symmetric matrix."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.diag(a).copy()


def kl_double_sum(probs):
    """sum_i sum_j (f_j / h) . (log sum_k f_k / h - log f_i), one sample, lists."""
    h = len(probs)
    k = len(probs[0])
    mean = [sum(p[c] for p in probs) / h for c in range(k)]
    total = 0.0
    for i in range(h):
        for j in range(h):
            for c in range(k):
                total += probs[j][c] / h * (math.log(mean[c]) - math.log(probs[i][c]))
    return total


def kl(p, q):
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))


# --- diagnostics -----------------------------------------------------------


def brute_diagnostics(preds, labels, k):
    """Enumerate votes per example; Pearson from its definition.

    Means and sums use math.fsum like the implementation, so results compare
    exactly.
    """
    m, h = len(preds), len(preds[0])
    margins, psi = [], []
    for row, y in zip(preds, labels):
        counts = Counter(row)
        share = {c: counts.get(c, 0) / h for c in range(k)}
        wrong = [c for c in range(k) if c != y]
        j_hat = min(wrong, key=lambda c: (-share[c], c))
        margins.append(share[y] - share[j_hat])
        psi.append([(1 if v == y else 0) - (1 if v == j_hat else 0) for v in row])
    s = math.fsum(margins) / m

    def pearson(a, b):
        ma = math.fsum(a) / len(a)
        mb = math.fsum(b) / len(b)
        da = [x - ma for x in a]
        db = [x - mb for x in b]
        va = math.fsum(x * x for x in da)
        vb = math.fsum(x * x for x in db)
        if va == 0.0 or vb == 0.0:
            return 0.0
        return math.fsum(x * y for x, y in zip(da, db)) / math.sqrt(va * vb)

    pairs = []
    for i, j in itertools.combinations(range(h), 2):
        pairs.append(pearson([float(r[i]) for r in psi], [float(r[j]) for r in psi]))
    rho = math.fsum(pairs) / len(pairs) if pairs else None
    bound = rho * (1 - s * s) / (s * s) if (rho is not None and s > 0) else None
    return margins, psi, s, rho, pairs, bound

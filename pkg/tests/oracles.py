"""Straight-line reference implementations used as test oracles.

Everything here is scalar Python over plain nested loops (numpy only for
storage), written independently of the library's vectorised kernels.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def matmul(x, w):
    n, k = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += x[i, t] * w[t, j]
            out[i, j] = s
    return out


def affine(x, w, b=None):
    out = matmul(np.atleast_2d(x), w)
    if b is not None:
        out = out + b
    return out


def softmax_row(row):
    top = max(row)
    e = [math.exp(v - top) if v != -math.inf else 0.0 for v in row]
    s = sum(e)
    return [v / s for v in e]


def layer_norm_row(row, gamma, beta, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]


def layer_norm(x, gamma, beta, eps=1e-5):
    return np.array([layer_norm_row(list(r), gamma, beta, eps) for r in np.atleast_2d(x)])


def gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def mlp(x, w1, b1, w2, b2):
    h = affine(x, w1, b1)
    h = np.vectorize(gelu)(h)
    return affine(h, w2, b2)


def rel_index(m, i, j):
    """Table row for the displacement from window token ``j`` to token ``i``."""
    ri, ci = divmod(i, m)
    rj, cj = divmod(j, m)
    return (ri - rj + m - 1) * (2 * m - 1) + (ci - cj + m - 1)


def attention(q_rows, k_rows, v_rows, p, heads, bias=None, mask=None):
    """Multi-head attention with projections, per-element.

    ``p`` maps names ``wq, bq, wk, bk, wv, bv, wo, bo`` to arrays; ``bias``
    is a callable ``(head, i, j) -> float``; ``mask[i][j]`` true drops a pair.
    Returns (output rows, weights[head][i][j]).
    """
    c = q_rows.shape[1]
    d = c // heads
    q = affine(q_rows, p["wq"], p["bq"])
    k = affine(k_rows, p["wk"], p["bk"])
    v = affine(v_rows, p["wv"], p["bv"])
    nq, nk = q.shape[0], k.shape[0]
    concat = np.zeros((nq, c))
    weights = []
    for h in range(heads):
        wh = []
        for i in range(nq):
            logits = []
            for j in range(nk):
                s = 0.0
                for t in range(h * d, (h + 1) * d):
                    s += q[i, t] * k[j, t]
                s /= math.sqrt(d)
                if bias is not None:
                    s += bias(h, i, j)
                if mask is not None and mask[i][j]:
                    s = -math.inf
                logits.append(s)
            a = softmax_row(logits)
            wh.append(a)
            for t in range(h * d, (h + 1) * d):
                concat[i, t] = sum(a[j] * v[j, t] for j in range(nk))
        weights.append(wh)
    return affine(concat, p["wo"], p["bo"]), weights


def wsa(x, p, heads, table, m, mask=None):
    """Window self-attention on one window ``x`` of ``m*m`` rows."""
    bias = None if table is None else (lambda h, i, j: table[rel_index(m, i, j), h])
    return attention(x, x, x, p, heads, bias, mask)


def wmca(own, other, p, heads, t_self, t_other, m, ln_own, ln_other, mask=None):
    """Cross-attention of one window: queries from own, keys/values from [own; other]."""
    a = layer_norm(own, *ln_own)
    o = layer_norm(other, *ln_other)
    kv = np.concatenate([a, o], axis=0)
    n = m * m

    def bias(h, i, j):
        return t_self[rel_index(m, i, j), h] if j < n else t_other[rel_index(m, i, j - n), h]

    full_mask = None if mask is None else [list(r) + list(r) for r in mask]
    return attention(a, kv, kv, p, heads, bias, full_mask)


def windows_of(grid, m):
    """Row-major list of (window rows as [m*m, C], list of (r, c) positions)."""
    h, w, _ = grid.shape
    out = []
    for wr in range(h // m):
        for wc in range(w // m):
            pos = [(wr * m + i, wc * m + j) for i in range(m) for j in range(m)]
            out.append((np.array([grid[r, c] for r, c in pos]), pos))
    return out


def hmt_block(der, cli, params, heads, m):
    """Unshifted dual-branch block on ``[H, W, C]`` grids.

    ``params[branch]`` holds ``attn`` (projection dict), ``t_self``,
    ``t_other``, ``ln_own``, ``ln_other``, ``ln`` and ``mlp`` (w1, b1, w2, b2);
    branch ``der`` updates der using cli, ``cli`` the reverse.
    """
    outs = {}
    for branch, own_grid, other_grid in (("der", der, cli), ("cli", cli, der)):
        bp = params[branch]
        ca = np.array(own_grid, dtype=float)
        for (own_w, pos), (other_w, _) in zip(windows_of(own_grid, m), windows_of(other_grid, m)):
            out, _ = wmca(own_w, other_w, bp["attn"], heads, bp["t_self"], bp["t_other"], m,
                          bp["ln_own"], bp["ln_other"])
            for (r, c), row in zip(pos, out):
                ca[r, c] = own_grid[r, c] + row
        h, w, ch = ca.shape
        flat = ca.reshape(h * w, ch)
        y = flat + mlp(layer_norm(flat, *bp["ln"]), *bp["mlp"])
        outs[branch] = y.reshape(h, w, ch)
    return outs["der"], outs["cli"]


def mtp(f0, f_cli, f_der, p, heads, ln_meta, ln_img, ln, mlp_params):
    q = layer_norm(f0, *ln_meta)
    kv = np.concatenate([q, layer_norm(f_cli, *ln_img), layer_norm(f_der, *ln_img)], axis=0)
    out, _ = attention(q, kv, kv, p, heads)
    ca = out + f0
    return ca + mlp(layer_norm(ca, *ln), *mlp_params), ca


def cross_entropy(logits, y):
    top = max(logits)
    lse = top + math.log(sum(math.exp(v - top) for v in logits))
    return lse - logits[y]


def shift_mask_bruteforce(h, w, m, dy, dx):
    """Masked (query, key) pairs per window after rolling the grid by ``(-dy, -dx)``.

    Labels the rolled grid by region: along each axis the last window is cut
    at ``-d`` into the part that wrapped around and the part that did not.
    Two tokens of one window may attend iff they carry the same label.
    """
    def cuts(n, d):
        return [(0, n - m), (n - m, n - d), (n - d, n)] if d else [(0, n)]

    label = [[0] * w for _ in range(h)]
    count = 0
    for r0, r1 in cuts(h, dy):
        for c0, c1 in cuts(w, dx):
            for r in range(r0, r1):
                for c in range(c0, c1):
                    label[r][c] = count
            count += 1
    masks = []
    for wr in range(h // m):
        for wc in range(w // m):
            pos = [(wr * m + i, wc * m + j) for i in range(m) for j in range(m)]
            masks.append([[label[a[0]][a[1]] != label[b[0]][b[1]] for b in pos] for a in pos])
    return np.array(masks)


def bayes_enumerate(priors, table, noise, k, observed):
    """Optimal accuracy by explicit enumeration over latent cells and classes."""
    groups = {}
    for bits in itertools.product((0, 1), repeat=3):
        p = 1.0
        for b, pr in zip(bits, priors):
            p *= pr if b else 1 - pr
        key = tuple(bits[a] for a in observed)
        for y in range(k):
            py = (1 - noise) * (y == table[4 * bits[0] + 2 * bits[1] + bits[2]]) + noise / k
            groups.setdefault(key, [0.0] * k)[y] += p * py
    return sum(max(v) for v in groups.values())

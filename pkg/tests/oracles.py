"""Brute-force loop references. Deliberately naive; share no code with the package."""
import math

import numpy as np


def conv4d_loops(x, w, b):
    c_in, A, B, C, D = x.shape
    c_out, _, k1, k2, k3, k4 = w.shape
    r1, r2, r3, r4 = k1 // 2, k2 // 2, k3 // 2, k4 // 2
    out = np.zeros((c_out, A, B, C, D))
    for o in range(c_out):
        for p1 in range(A):
            for p2 in range(B):
                for p3 in range(C):
                    for p4 in range(D):
                        acc = b[o]
                        for c in range(c_in):
                            for d1 in range(k1):
                                q1 = p1 + d1 - r1
                                if not 0 <= q1 < A:
                                    continue
                                for d2 in range(k2):
                                    q2 = p2 + d2 - r2
                                    if not 0 <= q2 < B:
                                        continue
                                    for d3 in range(k3):
                                        q3 = p3 + d3 - r3
                                        if not 0 <= q3 < C:
                                            continue
                                        for d4 in range(k4):
                                            q4 = p4 + d4 - r4
                                            if not 0 <= q4 < D:
                                                continue
                                            acc += w[o, c, d1, d2, d3, d4] * x[c, q1, q2, q3, q4]
                        out[o, p1, p2, p3, p4] = acc
    return out


def conv4d_shift_add(x, w, b):
    """Same result as conv4d_loops, one zero-padded shifted copy per tap.

    Fast enough for multi-channel stacks on 6^4 volumes.
    """
    c_in = x.shape[0]
    c_out, _, k1, k2, k3, k4 = w.shape
    r = (k1 // 2, k2 // 2, k3 // 2, k4 // 2)
    xp = np.pad(x, [(0, 0)] + [(q, q) for q in r])
    A, B, C, D = x.shape[1:]
    out = np.zeros((c_out, A, B, C, D)) + np.asarray(b).reshape(-1, 1, 1, 1, 1)
    for d1 in range(k1):
        for d2 in range(k2):
            for d3 in range(k3):
                for d4 in range(k4):
                    win = xp[:, d1:d1 + A, d2:d2 + B, d3:d3 + C, d4:d4 + D]
                    for o in range(c_out):
                        for c in range(c_in):
                            out[o] += w[o, c, d1, d2, d3, d4] * win[c]
    return out


def self_similarity_loops(z, k):
    d, h, w = z.shape
    r = k // 2
    out = np.zeros((k * k, h, w))
    for i in range(h):
        for j in range(w):
            t = 0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        out[t, i, j] = sum(z[c, i, j] * z[c, ii, jj] for c in range(d))
                    t += 1
    return out


def correlation_loops(fa, fb):
    d, ha, wa = fa.shape
    _, hb, wb = fb.shape
    out = np.zeros((ha, wa, hb, wb))
    for i in range(ha):
        for j in range(wa):
            for m in range(hb):
                for n in range(wb):
                    out[i, j, m, n] = sum(fa[c, i, j] * fb[c, m, n] for c in range(d))
    return out


def mutual_nn_loops(c, eps=1e-12):
    ha, wa, hb, wb = c.shape
    r = np.maximum(c, 0)
    # pass 1: slice maxima
    max_src = np.zeros((hb, wb))
    max_tgt = np.zeros((ha, wa))
    for i in range(ha):
        for j in range(wa):
            for m in range(hb):
                for n in range(wb):
                    max_src[m, n] = max(max_src[m, n], r[i, j, m, n])
                    max_tgt[i, j] = max(max_tgt[i, j], r[i, j, m, n])
    # pass 2: rescale
    out = np.zeros_like(r)
    for i in range(ha):
        for j in range(wa):
            for m in range(hb):
                for n in range(wb):
                    v = r[i, j, m, n]
                    ra = v / max_src[m, n] if max_src[m, n] >= eps else 0.0
                    rb = v / max_tgt[i, j] if max_tgt[i, j] >= eps else 0.0
                    out[i, j, m, n] = v * ra * rb
    return out


def soft_score_loops(c):
    """Return (s_a, s_b) by explicit softmax and argmax scans."""
    ha, wa, hb, wb = c.shape
    sb = 0.0
    for m in range(hb):
        for n in range(wb):
            vals = [c[i, j, m, n] for i in range(ha) for j in range(wa)]
            top = max(vals)
            z = sum(math.exp(v - top) for v in vals)
            sb += 1.0 / z  # probability of the argmax
    sa = 0.0
    for i in range(ha):
        for j in range(wa):
            vals = [c[i, j, m, n] for m in range(hb) for n in range(wb)]
            top = max(vals)
            z = sum(math.exp(v - top) for v in vals)
            sa += 1.0 / z
    return sa / (ha * wa), sb / (hb * wb)


def argmax_loops(c):
    """a->b hard assignment: first (row-major) maximum over source cells."""
    ha, wa, hb, wb = c.shape
    out = {}
    for m in range(hb):
        for n in range(wb):
            best, arg = -np.inf, None
            for i in range(ha):
                for j in range(wa):
                    if c[i, j, m, n] > best:
                        best, arg = c[i, j, m, n], (i, j)
            out[(m, n)] = arg
    return out


def consensus_loops(c, kernels, symmetric=True, conv=conv4d_loops):
    """(conv -> relu) stack via a reference conv, plus the exchanged branch."""
    def stack(v):
        x = v[None]
        for w, b in kernels:
            x = np.maximum(conv(x, w, b), 0)
        return x[0]

    out = stack(c)
    if symmetric:
        out = out + stack(c.transpose(2, 3, 0, 1)).transpose(2, 3, 0, 1)
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

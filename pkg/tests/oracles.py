"""Independent brute-force oracles used to pin expected values.

Everything here is written as plain nested loops (or direct summation) over
numpy arrays, deliberately ignoring how the library implements the same
operations, so the two sides of each comparison stay independent.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for nn in range(n):
        for oc in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[nn, c, i * stride + u, j * stride + v] * w[oc, c, u, v]
                    out[nn, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def conv_transpose2d_loops(x, w, b=None):
    # fixed kernel 2, stride 2
    n, ci, h, wd = x.shape
    _, co, _, _ = w.shape
    out = np.zeros((n, co, 2 * h, 2 * wd), dtype=np.float64)
    for nn in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    for oc in range(co):
                        for u in range(2):
                            for v in range(2):
                                out[nn, oc, 2 * i + u, 2 * j + v] += x[nn, c, i, j] * w[c, oc, u, v]
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def maxpool2x2_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=np.float64)
    for nn in range(n):
        for cc in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[nn, cc, i, j] = max(x[nn, cc, 2 * i, 2 * j], x[nn, cc, 2 * i, 2 * j + 1],
                                            x[nn, cc, 2 * i + 1, 2 * j], x[nn, cc, 2 * i + 1, 2 * j + 1])
    return out


def mask_mean3x3_loops(m):
    n, c, h, w = m.shape
    out = np.zeros_like(m, dtype=np.float64)
    for nn in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in (-1, 0, 1):
                        for v in (-1, 0, 1):
                            ii, jj = i + u, j + v
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += m[nn, cc, ii, jj]
                    out[nn, cc, i, j] = acc / 9.0
    return out


def block_mean_loops(x, block):
    n, c, h, w = x.shape
    hb, wb = h // block, w // block
    out = np.zeros((n, c, hb, wb), dtype=np.float64)
    for nn in range(n):
        for cc in range(c):
            for i in range(hb):
                for j in range(wb):
                    out[nn, cc, i, j] = x[nn, cc, i * block:(i + 1) * block, j * block:(j + 1) * block].mean()
    return out


def partial_conv_loops(f, m, w, b, eps=1e-8, renorm=True):
    """Direct per-pixel evaluation of the mask-renormalized convolution.

    out = (w * (f o m)) o (1/mbar) + b where mbar > eps, else 0, with mbar the
    zero-padded 3x3 mean of m (divisor 9).  Kernel 3, stride 1, pad 1.
    """
    fm = f * m
    raw = conv2d_loops(fm, w, b=None, stride=1, pad=1)
    mbar = mask_mean3x3_loops(m)
    n, co, h, wd = raw.shape
    out = np.zeros_like(raw)
    for nn in range(n):
        for c in range(co):
            for i in range(h):
                for j in range(wd):
                    if mbar[nn, c, i, j] > eps:
                        val = raw[nn, c, i, j]
                        if renorm:
                            val = val / mbar[nn, c, i, j]
                        out[nn, c, i, j] = val + b[c]
                    else:
                        out[nn, c, i, j] = 0.0
    return out


def exclusion_loss_script(t, r, n_scales=2, lambda_t=0.5, fixed_lambda=False):
    """Standalone scripted multi-scale gradient-correlation penalty."""
    def grads(a):
        gx = np.zeros_like(a)
        gy = np.zeros_like(a)
        gx[:, :, :, :-1] = a[:, :, :, 1:] - a[:, :, :, :-1]
        gy[:, :, :-1, :] = a[:, :, 1:, :] - a[:, :, :-1, :]
        return gx, gy

    def down(a):
        nn, cc, hh, ww = a.shape
        return a.reshape(nn, cc, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))

    total = 0.0
    for s in range(n_scales + 1):
        tx, ty = grads(t)
        rx, ry = grads(r)
        l1_t = np.abs(tx).sum() + np.abs(ty).sum()
        l1_r = np.abs(rx).sum() + np.abs(ry).sum()
        if l1_r < 1e-8:
            t, r = down(t), down(r)
            continue
        lam_r = lambda_t if fixed_lambda else l1_t / l1_r
        psi_x = np.tanh(lambda_t * np.abs(tx)) * np.tanh(lam_r * np.abs(rx))
        psi_y = np.tanh(lambda_t * np.abs(ty)) * np.tanh(lam_r * np.abs(ry))
        fro = np.sqrt((psi_x ** 2).sum() + (psi_y ** 2).sum())
        total += np.sqrt(fro)
        t, r = down(t), down(r)
    return total / (n_scales + 1)


def psnr_direct(a, b, peak=1.0):
    mse = ((a.astype(np.float64) - b.astype(np.float64)) ** 2).mean()
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)

"""Independent naive oracles the engine is checked against.

Everything here is written for obviousness, not speed: explicit loops,
textbook formulas, no code shared with the package under test.
"""

import numpy as np


def conv_naive(x, weight, bias, padding):
    """Loop convolution; per-output-pixel channel dot in float64."""
    n, c_in, h, w = x.shape
    c_out, _, h_k, w_k = weight.shape
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = h + 2 * padding - h_k + 1
    ow = w + 2 * padding - w_k + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    w64 = weight.astype(np.float64)
    for b in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ky in range(h_k):
                        for kx in range(w_k):
                            acc += float(
                                np.dot(xp[b, :, oy + ky, ox + kx], w64[co, :, ky, kx])
                            )
                    out[b, co, oy, ox] = acc + float(bias[co])
    return out.astype(np.float32)


def conv_naive_scalar(x, weight, bias, padding):
    """Fully scalar seven-deep loop version for small cases."""
    n, c_in, h, w = x.shape
    c_out, _, h_k, w_k = weight.shape
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = h + 2 * padding - h_k + 1
    ow = w + 2 * padding - w_k + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ky in range(h_k):
                        for kx in range(w_k):
                            for ci in range(c_in):
                                acc += float(xp[b, ci, oy + ky, ox + kx]) * float(
                                    weight[co, ci, ky, kx]
                                )
                    out[b, co, oy, ox] = acc + float(bias[co])
    return out.astype(np.float32)


def group_norm_naive(x, groups, gamma, beta, eps):
    n, c, h, w = x.shape
    per = c // groups
    out = np.zeros_like(x, dtype=np.float64)
    means = np.zeros((n, groups))
    varis = np.zeros((n, groups))
    for b in range(n):
        for g in range(groups):
            sl = x[b, g * per : (g + 1) * per].astype(np.float64)
            mean = sl.sum() / sl.size
            var = ((sl - mean) ** 2).sum() / sl.size
            means[b, g] = mean
            varis[b, g] = var
            out[b, g * per : (g + 1) * per] = (sl - mean) / np.sqrt(var + eps)
    out = out * gamma.astype(np.float64)[None, :, None, None]
    out = out + beta.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32), means.astype(np.float32), varis.astype(np.float32)


def attention_naive(q, k, v, scale):
    """Per-row two-pass softmax attention in float64."""
    tq = q.shape[0]
    out = np.zeros((tq, v.shape[1]), dtype=np.float64)
    for i in range(tq):
        logits = np.array(
            [float(np.dot(q[i].astype(np.float64), k[j].astype(np.float64))) * scale for j in range(k.shape[0])]
        )
        m = logits.max()
        weights = np.exp(logits - m)
        weights /= weights.sum()
        for j in range(k.shape[0]):
            out[i] += weights[j] * v[j].astype(np.float64)
    return out.astype(np.float32)


def otsu_exhaustive(values, n_candidates=256):
    """Brute-force search over the candidate grid; first max wins."""
    v = np.asarray(values, dtype=np.float64).ravel()
    total = v.size
    best_eps, best_obj = None, -np.inf
    for i in range(n_candidates):
        eps = (i + 0.5) / n_candidates
        above = v >= eps
        n2 = int(above.sum())
        n1 = total - n2
        if n1 == 0 or n2 == 0:
            continue
        mean1 = v[~above].sum() / n1
        mean2 = v[above].sum() / n2
        obj = (n1 * n2) / total**2 * (mean1 - mean2) ** 2
        if obj > best_obj:
            best_obj, best_eps = obj, eps
    return best_eps, best_obj


def plan_cost(mask_bits, kernel, block):
    """Tile-by-tile active count for one candidate block size."""
    h_k, w_k = kernel
    bh, bw = block
    th, tw = bh - h_k + 1, bw - w_k + 1
    h, w = mask_bits.shape
    n_active = 0
    for oy in range(0, h, th):
        for ox in range(0, w, tw):
            if mask_bits[oy : oy + th, ox : ox + tw].any():
                n_active += 1
    return th * tw * n_active, n_active


def plan_exhaustive(mask_bits, kernel, candidates=(2, 4, 8, 16, 32)):
    """Enumerate every (h, w) candidate pair; ties to smaller block area."""
    h_k, w_k = kernel
    best = None
    for bh in sorted(candidates):
        for bw in sorted(candidates):
            if bh < h_k or bw < w_k:
                continue
            if not mask_bits.any():
                f, n = 0, 0
            else:
                f, n = plan_cost(mask_bits, kernel, (bh, bw))
            key = (f, bh * bw, bh, bw)
            if best is None or key < best[0]:
                best = (key, (bh, bw), f, n)
    if best is None:
        raise ValueError("no candidate fits the kernel")
    return {"block": best[1], "cost": best[2], "tiles": best[3]}


def orpool_naive(bits):
    h, w = bits.shape
    out = np.zeros((h // 2, w // 2), dtype=bool)
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = bool(bits[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].any())
    return out

"""Independent reference implementations used by the tests.

Everything here is deliberately written as plain scalar loops, sharing no
code with the package.
"""
import math
from fractions import Fraction


def clahe_bruteforce(img, tile, clip, nbins):
    """Tiled CLAHE, pixel by pixel.

    ``img`` is a list of rows of floats in [0, 1]. Per tile: histogram, clip at
    ``clip * pixels``, spread the clipped mass evenly, take the CDF over the
    tile pixel count. Each pixel blends the four nearest tile-center mappings.
    """
    h, w = len(img), len(img[0])

    def bin_of(v):
        return min(int(v * nbins), nbins - 1)

    row_tiles = [(r, min(r + tile, h)) for r in range(0, h, tile)]
    col_tiles = [(c, min(c + tile, w)) for c in range(0, w, tile)]
    maps = {}
    for ti, (r0, r1) in enumerate(row_tiles):
        for tj, (c0, c1) in enumerate(col_tiles):
            hist = [0] * nbins
            for r in range(r0, r1):
                for c in range(c0, c1):
                    hist[bin_of(img[r][c])] += 1
            n = (r1 - r0) * (c1 - c0)
            cap = Fraction(clip) * n
            clipped = []
            excess = Fraction(0)
            for count in hist:
                if count > cap:
                    excess += count - cap
                    clipped.append(cap)
                else:
                    clipped.append(Fraction(count))
            cdf = []
            acc = Fraction(0)
            for b in range(nbins):
                acc += clipped[b] + excess / nbins
                cdf.append(float(acc / n))
            maps[ti, tj] = cdf

    def neighbours(pos, tiles):
        centers = [(a + b) / 2.0 for a, b in tiles]
        if pos <= centers[0]:
            return 0, 0, 0.0
        if pos >= centers[-1]:
            last = len(centers) - 1
            return last, last, 0.0
        k = 0
        while centers[k + 1] <= pos:
            k += 1
        return k, k + 1, (pos - centers[k]) / (centers[k + 1] - centers[k])

    out = []
    for r in range(h):
        i0, i1, wy = neighbours(r + 0.5, row_tiles)
        row = []
        for c in range(w):
            j0, j1, wx = neighbours(c + 0.5, col_tiles)
            b = bin_of(img[r][c])
            top = maps[i0, j0][b] + wx * (maps[i0, j1][b] - maps[i0, j0][b])
            bottom = maps[i1, j0][b] + wx * (maps[i1, j1][b] - maps[i1, j0][b])
            v = top + wy * (bottom - top)
            row.append(min(max(v, 0.0), 1.0))
        out.append(row)
    return out


def histogram_equalize(img, nbins):
    """Classical global histogram equalization: v -> CDF(bin(v)) / N."""
    flat = [v for row in img for v in row]
    hist = [0] * nbins
    for v in flat:
        hist[min(int(v * nbins), nbins - 1)] += 1
    cdf, acc = [], 0
    for count in hist:
        acc += count
        cdf.append(acc / len(flat))
    return [[cdf[min(int(v * nbins), nbins - 1)] for v in row] for row in img]


def sq_mean_loop(a, b):
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) * (u - v)
    return total / len(a)


def abs_mean_loop(a, b):
    return math.fsum(abs(u - v) for u, v in zip(a, b)) / len(a)


def auc_pairwise(scores, positive):
    """P(score_pos > score_neg) + 0.5 P(tie), over all pairs."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def youden_exhaustive(scores, positive):
    """Best J over every threshold ``t`` in the scores plus +inf, rule score >= t."""
    npos = sum(1 for p in positive if p)
    nneg = len(positive) - npos
    best = -2.0
    for t in sorted(set(scores)) + [math.inf]:
        tp = sum(1 for s, p in zip(scores, positive) if p and s >= t)
        tn = sum(1 for s, p in zip(scores, positive) if not p and s < t)
        best = max(best, tp / npos + tn / nneg - 1.0)
    return best


def central_difference(f, params, h=1e-6):
    """Gradient of scalar ``f()`` w.r.t. each entry of each tensor in ``params``."""
    import torch

    def nudge(flat, i, value):
        with torch.no_grad():
            flat[i] = value

    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            nudge(flat, i, orig + h)
            up = f().item()
            nudge(flat, i, orig - h)
            down = f().item()
            nudge(flat, i, orig)
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads

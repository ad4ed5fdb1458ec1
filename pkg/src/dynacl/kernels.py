"""Hot numeric kernels, each in a numba and a numpy flavour.

The public names at the bottom dispatch on ``dynacl._accel.USE_NUMBA``. Both
flavours are importable directly (``*_nb`` / ``*_np``) so they can be checked
against each other and benchmarked.
"""
import numpy as np

from ._accel import njit, pick

# ---------------------------------------------------------------------------
# crop + bilinear resize (half-pixel centres, no antialiasing)
# ---------------------------------------------------------------------------


def _source_coords(out_len, in_len):
    scale = in_len / out_len
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_len - 1)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    return i0, i1, frac


def crop_resize_np(img, top, left, height, width, out_h, out_w):
    patch = img[:, top:top + height, left:left + width].astype(np.float64)
    y0, y1, fy = _source_coords(out_h, height)
    x0, x1, fx = _source_coords(out_w, width)
    rows0 = patch[:, y0, :]
    rows1 = patch[:, y1, :]
    top_row = rows0[:, :, x0] * (1.0 - fx) + rows0[:, :, x1] * fx
    bot_row = rows1[:, :, x0] * (1.0 - fx) + rows1[:, :, x1] * fx
    out = top_row * (1.0 - fy)[:, None] + bot_row * fy[:, None]
    return out.astype(img.dtype)


@njit
def crop_resize_nb(img, top, left, height, width, out_h, out_w):
    c = img.shape[0]
    out = np.empty((c, out_h, out_w), dtype=img.dtype)
    sy = height / out_h
    sx = width / out_w
    for oy in range(out_h):
        src_y = (oy + 0.5) * sy - 0.5
        if src_y < 0.0:
            src_y = 0.0
        y0 = int(np.floor(src_y))
        if y0 > height - 1:
            y0 = height - 1
        y1 = y0 + 1 if y0 < height - 1 else y0
        fy = src_y - y0
        for ox in range(out_w):
            src_x = (ox + 0.5) * sx - 0.5
            if src_x < 0.0:
                src_x = 0.0
            x0 = int(np.floor(src_x))
            if x0 > width - 1:
                x0 = width - 1
            x1 = x0 + 1 if x0 < width - 1 else x0
            fx = src_x - x0
            for ch in range(c):
                v00 = np.float64(img[ch, top + y0, left + x0])
                v01 = np.float64(img[ch, top + y0, left + x1])
                v10 = np.float64(img[ch, top + y1, left + x0])
                v11 = np.float64(img[ch, top + y1, left + x1])
                t = v00 * (1.0 - fx) + v01 * fx
                b = v10 * (1.0 - fx) + v11 * fx
                out[ch, oy, ox] = t * (1.0 - fy) + b * fy
    return out


# ---------------------------------------------------------------------------
# hue rotation through HSV
# ---------------------------------------------------------------------------


def hue_shift_np(img, shift):
    r, g, b = (img[0].astype(np.float64), img[1].astype(np.float64), img[2].astype(np.float64))
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    eqc = maxc == minc
    cr = maxc - minc
    s = cr / np.where(eqc, 1.0, maxc)
    div = np.where(eqc, 1.0, cr)
    rc = (maxc - r) / div
    gc = (maxc - g) / div
    bc = (maxc - b) / div
    hr = (maxc == r) * (bc - gc)
    hg = ((maxc == g) & (maxc != r)) * (2.0 + rc - bc)
    hb = ((maxc != g) & (maxc != r)) * (4.0 + gc - rc)
    h = np.mod((hr + hg + hb) / 6.0 + 1.0, 1.0)
    h = np.mod(h + shift, 1.0)
    v = maxc

    h6 = h * 6.0
    i = np.floor(h6)
    f = h6 - i
    i = i.astype(np.int64) % 6
    p = np.clip(v * (1.0 - s), 0.0, 1.0)
    q = np.clip(v * (1.0 - s * f), 0.0, 1.0)
    t = np.clip(v * (1.0 - s * (1.0 - f)), 0.0, 1.0)
    rr = np.choose(i, [v, q, p, p, t, v])
    gg = np.choose(i, [t, v, v, q, p, p])
    bb = np.choose(i, [p, p, t, v, v, q])
    return np.stack([rr, gg, bb]).astype(img.dtype)


@njit
def hue_shift_nb(img, shift):
    _, hgt, wid = img.shape
    out = np.empty_like(img)
    for y in range(hgt):
        for x in range(wid):
            r = np.float64(img[0, y, x])
            g = np.float64(img[1, y, x])
            b = np.float64(img[2, y, x])
            maxc = max(r, g, b)
            minc = min(r, g, b)
            cr = maxc - minc
            if maxc == minc:
                s = 0.0
                div = 1.0
            else:
                s = cr / maxc
                div = cr
            rc = (maxc - r) / div
            gc = (maxc - g) / div
            bc = (maxc - b) / div
            if maxc == r:
                h = bc - gc
            elif maxc == g:
                h = 2.0 + rc - bc
            else:
                h = 4.0 + gc - rc
            h = (h / 6.0 + 1.0) % 1.0
            h = (h + shift) % 1.0
            v = maxc
            h6 = h * 6.0
            fi = np.floor(h6)
            f = h6 - fi
            i = int(fi) % 6
            p = min(max(v * (1.0 - s), 0.0), 1.0)
            q = min(max(v * (1.0 - s * f), 0.0), 1.0)
            t = min(max(v * (1.0 - s * (1.0 - f)), 0.0), 1.0)
            if i == 0:
                rr, gg, bb = v, t, p
            elif i == 1:
                rr, gg, bb = q, v, p
            elif i == 2:
                rr, gg, bb = p, v, t
            elif i == 3:
                rr, gg, bb = p, q, v
            elif i == 4:
                rr, gg, bb = t, p, v
            else:
                rr, gg, bb = v, p, q
            out[0, y, x] = rr
            out[1, y, x] = gg
            out[2, y, x] = bb
    return out


# ---------------------------------------------------------------------------
# pairwise squared euclidean distances
# ---------------------------------------------------------------------------


def sq_dists_np(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


@njit
def sq_dists_nb(a, b):
    n, dim = a.shape
    m = b.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(dim):
                diff = np.float64(a[i, k]) - np.float64(b[j, k])
                acc += diff * diff
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# nearest centroid assignment (k-means E-step)
# ---------------------------------------------------------------------------


def assign_nearest_np(x, centroids):
    d = sq_dists_np(x, centroids)
    labels = np.argmin(d, axis=1)
    return labels.astype(np.int64), d[np.arange(len(x)), labels]


@njit
def assign_nearest_nb(x, centroids):
    n, dim = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        bi = 0
        bd = np.inf
        for c in range(k):
            acc = 0.0
            for j in range(dim):
                diff = x[i, j] - centroids[c, j]
                acc += diff * diff
            if acc < bd:
                bd = acc
                bi = c
        labels[i] = bi
        best[i] = bd
    return labels, best


# ---------------------------------------------------------------------------
# minimum cross-class L-infinity distance
#
# Three levels, each a lower bound on the next: global mean (sort order and
# band cut-off), average-pooled vector, full vector. All inner loops abandon
# as soon as the running max reaches the current per-row bound.
# ---------------------------------------------------------------------------


def pooled_summary(x, channels, height, width, cells=4):
    """Per-channel average pooling to ``cells x cells``; L-inf on it lower-bounds L-inf on ``x``."""
    n = x.shape[0]
    imgs = x.reshape(n, channels, height, width)
    cy = max(1, min(cells, height))
    cx = max(1, min(cells, width))
    ys = np.linspace(0, height, cy + 1).astype(np.int64)
    xs = np.linspace(0, width, cx + 1).astype(np.int64)
    out = np.empty((n, channels, cy, cx), dtype=np.float32)
    for a in range(cy):
        for b in range(cx):
            out[:, :, a, b] = imgs[:, :, ys[a]:ys[a + 1], xs[b]:xs[b + 1]].mean(axis=(2, 3))
    return np.ascontiguousarray(out.reshape(n, -1))


@njit
def _row_bound(best, ci, k):
    m = 0.0
    for c in range(k):
        if c != ci and best[ci, c] > m:
            m = best[ci, c]
    return m


@njit
def min_cross_class_linf_nb(x, pooled, means, labels, n_classes):
    order = np.argsort(means)
    n, dim = x.shape
    pdim = pooled.shape[1]
    best = np.full((n_classes, n_classes), np.inf)
    for oi in range(n):
        i = order[oi]
        ci = labels[i]
        bound = _row_bound(best, ci, n_classes)
        for oj in range(oi + 1, n):
            j = order[oj]
            if means[j] - means[i] >= bound:
                break
            cj = labels[j]
            if cj == ci:
                continue
            cur = best[ci, cj]
            m = 0.0
            for d in range(pdim):
                diff = abs(pooled[i, d] - pooled[j, d])
                if diff > m:
                    m = diff
                    if m >= cur:
                        break
            if m >= cur:
                continue
            m = 0.0
            for d in range(dim):
                diff = abs(x[i, d] - x[j, d])
                if diff > m:
                    m = diff
                    if m >= cur:
                        break
            if m < cur:
                best[ci, cj] = m
                best[cj, ci] = m
                bound = _row_bound(best, ci, n_classes)
    return best


def min_cross_class_linf_np(x, pooled, means, labels, n_classes, chunk=512):
    order = np.argsort(means, kind="stable")
    sorted_means = means[order]
    n = x.shape[0]
    best = np.full((n_classes, n_classes), np.inf)
    offdiag = ~np.eye(n_classes, dtype=bool)

    def row_bound(ci):
        row = best[ci][offdiag[ci]]
        return row.max() if row.size else 0.0

    for oi in range(n):
        i = order[oi]
        ci = labels[i]
        start = oi + 1
        while start < n:
            bound = row_bound(ci)
            stop = np.searchsorted(sorted_means, means[i] + bound, side="left") if np.isfinite(bound) else n
            stop = min(stop, start + chunk)
            if stop <= start:
                break
            cand = order[start:stop]
            cand = cand[labels[cand] != ci]
            if cand.size:
                cur = best[ci, labels[cand]]
                coarse = np.abs(pooled[cand] - pooled[i]).max(axis=1)
                keep = coarse < cur
                cand = cand[keep]
                if cand.size:
                    fine = np.abs(x[cand] - x[i]).max(axis=1).astype(np.float64)
                    np.minimum.at(best[ci], labels[cand], fine)
                    best[:, ci] = best[ci]
            start = stop
    return best


crop_resize = pick(crop_resize_nb, crop_resize_np)
hue_shift = pick(hue_shift_nb, hue_shift_np)
# BLAS beats the direct loop by ~20x here, so the expansion is used on both
# paths; the loop stays as the cancellation-free reference.
sq_dists = sq_dists_np
assign_nearest = pick(assign_nearest_nb, assign_nearest_np)
min_cross_class_linf = pick(min_cross_class_linf_nb, min_cross_class_linf_np)

"""Pure-numpy rasterizer with the same interface as the compiled ``_raster``.

Instead of walking pixels one at a time it enumerates every (Gaussian, pixel)
pair inside the footprint bounding boxes and composites them level by level:
level ``k`` holds the k-th closest candidate of every pixel. The arithmetic per
pixel matches the compiled kernel operation for operation.
"""

import numpy as np


def _candidates(order, bbox, means2d, conics, opacities, width, max_mahalanobis_sq):
    x0, x1, y0, y1 = (bbox[order, i] for i in range(4))
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    n = nx * ny
    total = int(n.sum())
    rank = np.repeat(np.arange(len(order)), n)
    local = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    px = x0[rank] + local % nx[rank]
    py = y0[rank] + local // nx[rank]
    g = order[rank]
    dx = px - means2d[g, 0]
    dy = py - means2d[g, 1]
    m = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
    keep = m <= max_mahalanobis_sq
    g, rank, px, py, m = g[keep], rank[keep], px[keep], py[keep], m[keep]
    pix = py * width + px
    srt = np.lexsort((rank, pix))
    g, pix, m = g[srt], pix[srt], m[srt]
    alpha = opacities[g] * np.exp(-0.5 * m)
    return g, pix, alpha


def rasterize_forward(
    order, bbox, means2d, conics, opacities, features, width, height, tile, min_transmittance, max_mahalanobis_sq
):
    del tile  # the whole image is one work unit here
    npix = width * height
    nfeat = features.shape[1]
    g, pix, alpha = _candidates(order, bbox, means2d, conics, opacities, width, max_mahalanobis_sq)
    counts = np.bincount(pix, minlength=npix)
    starts = np.cumsum(counts) - counts

    image = np.zeros((npix, nfeat))
    T = np.ones(npix)
    alive = np.ones(npix, dtype=bool)
    rec_T = np.empty(len(g))
    keep = np.zeros(len(g), dtype=bool)
    for k in range(int(counts.max()) if len(g) else 0):
        p = np.flatnonzero((counts > k) & alive)
        if len(p) == 0:
            break
        idx = starts[p] + k
        a = alpha[idx]
        Tp = T[p]
        rec_T[idx] = Tp
        keep[idx] = True
        image[p] += features[g[idx]] * a[:, None] * Tp[:, None]
        T[p] = Tp * (1.0 - a)
        alive[p] = T[p] >= min_transmittance

    rec_index = g[keep]
    rec_alpha = alpha[keep]
    rec_trans = rec_T[keep]
    rec_count = np.bincount(pix[keep], minlength=npix).astype(np.int64)
    rec_start = (np.cumsum(rec_count) - rec_count).astype(np.int64)
    return (
        image.reshape(height, width, nfeat),
        (1.0 - T).reshape(height, width),
        T.reshape(height, width),
        rec_start,
        rec_count,
        rec_index.astype(np.int64),
        rec_alpha,
        rec_trans,
    )


def rasterize_backward(
    rec_start,
    rec_count,
    rec_index,
    rec_alpha,
    rec_trans,
    means2d,
    conics,
    opacities,
    features,
    grad_image,
    grad_opacity,
    width,
    height,
    tile,
):
    del tile
    G = len(means2d)
    nfeat = features.shape[1]
    npix = width * height
    grad_image = grad_image.reshape(npix, nfeat)
    grad_opacity = grad_opacity.reshape(npix)
    n = len(rec_index)

    d_alpha = np.zeros(n)
    back = np.zeros((npix, nfeat))
    back_op = np.zeros(npix)
    for k in range(int(rec_count.max()) - 1 if n else -1, -1, -1):
        p = np.flatnonzero(rec_count > k)
        idx = rec_start[p] + k
        a = rec_alpha[idx]
        T = rec_trans[idx]
        f = features[rec_index[idx]]
        da = grad_opacity[p] * T * (1.0 - back_op[p])
        da += np.sum(grad_image[p] * T[:, None] * (f - back[p]), axis=1)
        d_alpha[idx] = da
        back[p] = a[:, None] * f + (1.0 - a[:, None]) * back[p]
        back_op[p] = a + (1.0 - a) * back_op[p]

    pix = np.repeat(np.arange(npix), rec_count)
    px = (pix % width).astype(float)
    py = (pix // width).astype(float)
    g = rec_index
    dx = px - means2d[g, 0]
    dy = py - means2d[g, 1]
    c0, c1, c2 = conics[g, 0], conics[g, 1], conics[g, 2]
    gauss = np.exp(-0.5 * (c0 * dx * dx + 2.0 * c1 * dx * dy + c2 * dy * dy))
    d_m = -0.5 * rec_alpha * d_alpha
    w = rec_alpha * rec_trans

    def acc(values):
        return np.bincount(g, weights=values, minlength=G)

    g_feat = np.stack([acc(grad_image[pix, f] * w) for f in range(nfeat)], axis=1)
    g_opac = acc(d_alpha * gauss)
    g_conics = np.stack([acc(d_m * dx * dx), acc(d_m * 2.0 * dx * dy), acc(d_m * dy * dy)], axis=1)
    g_means = np.stack(
        [acc(-d_m * 2.0 * (c0 * dx + c1 * dy)), acc(-d_m * 2.0 * (c1 * dx + c2 * dy))],
        axis=1,
    )
    return g_means, g_conics, g_opac, g_feat

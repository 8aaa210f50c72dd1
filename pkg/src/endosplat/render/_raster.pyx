# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: front-to-back compositing and its adjoint.

Tiles are visited in row-major order and pixels inside a tile in row-major
order, so gradient accumulation order is fixed and results are deterministic.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef cnp.int64_t i64


def bin_tiles(const i64[::1] order, const i64[:, ::1] bbox, int width, int height, int tile):
    """CSR lists of Gaussians (front-to-back) overlapping each tile."""
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef Py_ssize_t n = order.shape[0]
    cdef cnp.ndarray[i64, ndim=1] counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    cdef i64[::1] cnt = counts
    cdef Py_ssize_t k, g
    cdef int tx, ty
    for k in range(n):
        g = order[k]
        for ty in range(bbox[g, 2] // tile, bbox[g, 3] // tile + 1):
            for tx in range(bbox[g, 0] // tile, bbox[g, 1] // tile + 1):
                cnt[ty * ntx + tx + 1] += 1
    cdef cnp.ndarray[i64, ndim=1] offsets = np.cumsum(counts)
    cdef i64[::1] off = offsets
    cdef cnp.ndarray[i64, ndim=1] lists = np.empty(off[ntx * nty], dtype=np.int64)
    cdef i64[::1] lst = lists
    cdef cnp.ndarray[i64, ndim=1] fill = offsets[:-1].copy()
    cdef i64[::1] fl = fill
    cdef int t
    for k in range(n):
        g = order[k]
        for ty in range(bbox[g, 2] // tile, bbox[g, 3] // tile + 1):
            for tx in range(bbox[g, 0] // tile, bbox[g, 1] // tile + 1):
                t = ty * ntx + tx
                lst[fl[t]] = g
                fl[t] += 1
    return offsets, lists


def rasterize_forward(
    const i64[::1] order,
    const i64[:, ::1] bbox,
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opacities,
    const double[:, ::1] features,
    int width,
    int height,
    int tile,
    double min_transmittance,
    double max_mahalanobis_sq,
):
    cdef Py_ssize_t nfeat = features.shape[1]
    cdef cnp.ndarray[i64, ndim=1] tile_off
    cdef cnp.ndarray[i64, ndim=1] tile_list
    tile_off, tile_list = bin_tiles(order, bbox, width, height, tile)
    cdef i64[::1] toff = tile_off
    cdef i64[::1] tlist = tile_list

    # upper bound on records: every (Gaussian, pixel-in-bbox) pair
    cdef Py_ssize_t cap = 0
    cdef Py_ssize_t k, g
    for k in range(order.shape[0]):
        g = order[k]
        cap += (bbox[g, 1] - bbox[g, 0] + 1) * (bbox[g, 3] - bbox[g, 2] + 1)

    image_arr = np.zeros((height, width, nfeat), dtype=np.float64)
    opacity_arr = np.zeros((height, width), dtype=np.float64)
    trans_arr = np.ones((height, width), dtype=np.float64)
    start_arr = np.zeros(height * width, dtype=np.int64)
    count_arr = np.zeros(height * width, dtype=np.int64)
    rec_index_arr = np.empty(cap, dtype=np.int64)
    rec_alpha_arr = np.empty(cap, dtype=np.float64)
    rec_trans_arr = np.empty(cap, dtype=np.float64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] opacity = opacity_arr
    cdef double[:, ::1] trans_out = trans_arr
    cdef i64[::1] rec_start = start_arr
    cdef i64[::1] rec_count = count_arr
    cdef i64[::1] rec_index = rec_index_arr
    cdef double[::1] rec_alpha = rec_alpha_arr
    cdef double[::1] rec_trans = rec_trans_arr

    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int tx, ty, px, py, x_end, y_end
    cdef Py_ssize_t n_rec = 0, p, f, j
    cdef double T, alpha, dx, dy, m
    for ty in range(nty):
        for tx in range(ntx):
            y_end = min((ty + 1) * tile, height)
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                for px in range(tx * tile, x_end):
                    p = py * width + px
                    rec_start[p] = n_rec
                    T = 1.0
                    for j in range(toff[ty * ntx + tx], toff[ty * ntx + tx + 1]):
                        g = tlist[j]
                        dx = px - means2d[g, 0]
                        dy = py - means2d[g, 1]
                        m = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                        if m > max_mahalanobis_sq:
                            continue
                        alpha = opacities[g] * exp(-0.5 * m)
                        rec_index[n_rec] = g
                        rec_alpha[n_rec] = alpha
                        rec_trans[n_rec] = T
                        n_rec += 1
                        for f in range(nfeat):
                            image[py, px, f] += features[g, f] * alpha * T
                        T = T * (1.0 - alpha)
                        if T < min_transmittance:
                            break
                    rec_count[p] = n_rec - rec_start[p]
                    trans_out[py, px] = T
                    opacity[py, px] = 1.0 - T
    return (
        image_arr,
        opacity_arr,
        trans_arr,
        start_arr,
        count_arr,
        rec_index_arr[:n_rec].copy(),
        rec_alpha_arr[:n_rec].copy(),
        rec_trans_arr[:n_rec].copy(),
    )


def rasterize_backward(
    const i64[::1] rec_start,
    const i64[::1] rec_count,
    const i64[::1] rec_index,
    const double[::1] rec_alpha,
    const double[::1] rec_trans,
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opacities,
    const double[:, ::1] features,
    const double[:, :, ::1] grad_image,
    const double[:, ::1] grad_opacity,
    int width,
    int height,
    int tile,
):
    cdef Py_ssize_t G = means2d.shape[0]
    cdef Py_ssize_t nfeat = features.shape[1]
    g_means_arr = np.zeros((G, 2), dtype=np.float64)
    g_conics_arr = np.zeros((G, 3), dtype=np.float64)
    g_opac_arr = np.zeros(G, dtype=np.float64)
    g_feat_arr = np.zeros((G, nfeat), dtype=np.float64)
    cdef double[:, ::1] g_means = g_means_arr
    cdef double[:, ::1] g_conics = g_conics_arr
    cdef double[::1] g_opac = g_opac_arr
    cdef double[:, ::1] g_feat = g_feat_arr

    cdef double[16] back
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int tx, ty, px, py, x_end, y_end
    cdef Py_ssize_t p, r, f, g
    cdef double alpha, T, w, d_alpha, gauss, d_m, dx, dy, gop, back_op
    if nfeat > 16:
        raise ValueError("at most 16 feature channels supported")
    for ty in range(nty):
        for tx in range(ntx):
            y_end = min((ty + 1) * tile, height)
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                for px in range(tx * tile, x_end):
                    p = py * width + px
                    if rec_count[p] == 0:
                        continue
                    for f in range(nfeat):
                        back[f] = 0.0
                    back_op = 0.0
                    gop = grad_opacity[py, px]
                    for r in range(rec_start[p] + rec_count[p] - 1, rec_start[p] - 1, -1):
                        g = rec_index[r]
                        alpha = rec_alpha[r]
                        T = rec_trans[r]
                        w = alpha * T
                        d_alpha = gop * T * (1.0 - back_op)
                        for f in range(nfeat):
                            g_feat[g, f] += grad_image[py, px, f] * w
                            d_alpha += grad_image[py, px, f] * T * (features[g, f] - back[f])
                            back[f] = alpha * features[g, f] + (1.0 - alpha) * back[f]
                        back_op = alpha + (1.0 - alpha) * back_op
                        dx = px - means2d[g, 0]
                        dy = py - means2d[g, 1]
                        gauss = exp(-0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy))
                        g_opac[g] += d_alpha * gauss
                        d_m = -0.5 * alpha * d_alpha
                        g_conics[g, 0] += d_m * dx * dx
                        g_conics[g, 1] += d_m * 2.0 * dx * dy
                        g_conics[g, 2] += d_m * dy * dy
                        g_means[g, 0] -= d_m * 2.0 * (conics[g, 0] * dx + conics[g, 1] * dy)
                        g_means[g, 1] -= d_m * 2.0 * (conics[g, 1] * dx + conics[g, 2] * dy)
    return g_means_arr, g_conics_arr, g_opac_arr, g_feat_arr

# Compiled hot kernels: direct convolution (forward + backward) and
# 8-connected component labeling.  Semantics match numpy_backend exactly;
# the numpy module is the fallback when this extension is not built.

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != cin:
        raise ValueError(
            f"channel mismatch: input has {cin}, weights expect {w.shape[1]}")
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1

    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, cout, oh, ow), dtype=dtype)
    patch_arr = np.empty(cin * kh * kw, dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[::1] patch = patch_arr

    cdef Py_ssize_t b, oc, oy, ox, ic, ky, kx, iy, ix, idx, klen
    cdef real acc
    cdef const real *wp
    klen = cin * kh * kw
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    # gather the receptive field once, reuse for every filter
                    idx = 0
                    for ic in range(cin):
                        for ky in range(kh):
                            iy = oy * stride - padding + ky
                            if iy < 0 or iy >= h:
                                for kx in range(kw):
                                    patch[idx] = 0
                                    idx += 1
                                continue
                            for kx in range(kw):
                                ix = ox * stride - padding + kx
                                if ix < 0 or ix >= wd:
                                    patch[idx] = 0
                                else:
                                    patch[idx] = x[b, ic, iy, ix]
                                idx += 1
                    for oc in range(cout):
                        # weights for one filter are contiguous in (ic,ky,kx)
                        # order, exactly the patch gather order
                        wp = &w[oc, 0, 0, 0]
                        acc = 0
                        for idx in range(klen):
                            acc += wp[idx] * patch[idx]
                        out[b, oc, oy, ox] = acc
    return out_arr


def conv2d_backward(real[:, :, :, ::1] grad, real[:, :, :, ::1] x,
                    real[:, :, :, ::1] w, int stride, int padding,
                    bint need_gx=True, bint need_gw=True):
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]

    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, cin, h, wd), dtype=dtype) if need_gx else None
    gw_arr = np.zeros((cout, cin, kh, kw), dtype=dtype) if need_gw else None
    cdef real[:, :, :, ::1] gx = gx_arr if need_gx else x[:0]
    cdef real[:, :, :, ::1] gw = gw_arr if need_gw else w[:0]

    cdef Py_ssize_t b, oc, oy, ox, ic, ky, kx, iy, ix
    cdef real g
    with nogil:
        for b in range(n):
            for oc in range(cout):
                for oy in range(oh):
                    for ox in range(ow):
                        g = grad[b, oc, oy, ox]
                        if g == 0:
                            continue
                        for ic in range(cin):
                            for ky in range(kh):
                                iy = oy * stride - padding + ky
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(kw):
                                    ix = ox * stride - padding + kx
                                    if ix < 0 or ix >= wd:
                                        continue
                                    if need_gx:
                                        gx[b, ic, iy, ix] += g * w[oc, ic, ky, kx]
                                    if need_gw:
                                        gw[oc, ic, ky, kx] += g * x[b, ic, iy, ix]
    return gx_arr, gw_arr


def label_regions(mask):
    """8-connected labeling; labels numbered from 1 in row-major first-pixel
    order, matching numpy_backend.label_regions."""
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, cast=True] m = np.ascontiguousarray(
        mask, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = labels_arr
    parent_arr = np.zeros(h * w // 2 + 2, dtype=np.int32)
    cdef cnp.int32_t[::1] parent = parent_arr

    cdef Py_ssize_t y, x
    cdef cnp.int32_t next_label = 1, lab, p, a, bb, tmp
    cdef cnp.int32_t neighbor[4]
    cdef int i, nn

    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            nn = 0
            if x > 0 and m[y, x - 1]:
                neighbor[nn] = labels[y, x - 1]; nn += 1
            if y > 0:
                if m[y - 1, x]:
                    neighbor[nn] = labels[y - 1, x]; nn += 1
                if x > 0 and m[y - 1, x - 1]:
                    neighbor[nn] = labels[y - 1, x - 1]; nn += 1
                if x + 1 < w and m[y - 1, x + 1]:
                    neighbor[nn] = labels[y - 1, x + 1]; nn += 1
            if nn == 0:
                parent[next_label] = next_label
                labels[y, x] = next_label
                next_label += 1
                continue
            lab = 0
            for i in range(nn):
                p = neighbor[i]
                while parent[p] != p:
                    p = parent[p]
                if lab == 0 or p < lab:
                    if lab != 0 and p != lab:
                        parent[lab] = p
                    lab = p
                elif p != lab:
                    parent[p] = lab
            labels[y, x] = lab

    if next_label == 1:
        return labels_arr, 0
    # path-compress all roots
    roots = np.zeros(next_label, dtype=np.int32)
    cdef cnp.int32_t[::1] rv = roots
    for a in range(1, next_label):
        p = a
        while parent[p] != p:
            p = parent[p]
        rv[a] = p
    flat = roots[labels_arr]
    uniq, first = np.unique(flat, return_index=True)
    keep = uniq != 0
    uniq, first = uniq[keep], first[keep]
    remap = np.zeros(next_label, dtype=np.int32)
    remap[uniq[np.argsort(first, kind="stable")]] = np.arange(
        1, len(uniq) + 1, dtype=np.int32)
    return remap[flat], len(uniq)

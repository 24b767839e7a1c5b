"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or forced via
HISTOSEG_BACKEND=numpy).  Convolutions accumulate one kernel offset at a
time, so the reduction order is fixed and results are reproducible
run-to-run.
"""

import numpy as np


def conv2d_forward(x, w, stride, padding):
    """Direct convolution, NCHW input against OIHW weights.

    Output spatial size is floor((in + 2*pad - k) / stride) + 1.
    """
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if padding > 0:
        xp = np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wdt] = x
    else:
        xp = x
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            view = xp[:, :, ky:ky + stride * (oh - 1) + 1:stride,
                      kx:kx + stride * (ow - 1) + 1:stride]
            # (N,Cin,OH,OW) x (Cout,Cin) summed over Cin
            out += np.einsum("nchw,oc->nohw", view, w[:, :, ky, kx], optimize=True)
    return out


def conv2d_backward(grad, x, w, stride, padding, need_gx=True, need_gw=True):
    """Gradients of conv2d_forward w.r.t. input and weights.

    Either output can be skipped (returned as None) to save work, e.g. the
    input gradient of the first layer.
    """
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = grad.shape[2], grad.shape[3]
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if padding > 0:
        xp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wdt] = x
    else:
        xp = x
    gxp = np.zeros((n, cin, hp, wp), dtype=x.dtype) if need_gx else None
    gw = np.zeros_like(w) if need_gw else None
    for ky in range(kh):
        for kx in range(kw):
            ys = slice(ky, ky + stride * (oh - 1) + 1, stride)
            xs = slice(kx, kx + stride * (ow - 1) + 1, stride)
            if need_gw:
                view = xp[:, :, ys, xs]
                gw[:, :, ky, kx] = np.einsum("nohw,nchw->oc", grad, view,
                                             optimize=True)
            if need_gx:
                gxp[:, :, ys, xs] += np.einsum("nohw,oc->nchw", grad,
                                               w[:, :, ky, kx], optimize=True)
    gx = None
    if need_gx:
        if padding > 0:
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h,
                                          padding:padding + wdt])
        else:
            gx = gxp
    return gx, gw


def label_regions(mask):
    """8-connected component labeling of a boolean mask.

    Returns an int32 label raster (0 = background, regions numbered from 1
    in row-major order of their first pixel) and the region count.

    Row-run union-find: foreground runs per row are merged with runs of the
    previous row that overlap under 8-connectivity.
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]  # parent[i] for union-find; index 0 unused

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    prev_runs = []  # (x0, x1, label) of previous row, half-open
    next_label = 1
    for y in range(h):
        row = mask[y]
        if not row.any():
            prev_runs = []
            continue
        # run boundaries via transitions
        diff = np.diff(row.astype(np.int8))
        starts = list(np.where(diff == 1)[0] + 1)
        ends = list(np.where(diff == -1)[0] + 1)
        if row[0]:
            starts.insert(0, 0)
        if row[-1]:
            ends.append(w)
        runs = []
        for x0, x1 in zip(starts, ends):
            lab = 0
            for px0, px1, plab in prev_runs:
                # 8-connectivity: overlap after dilating by one pixel
                if px0 < x1 + 1 and x0 < px1 + 1:
                    proot = find(plab)
                    if lab == 0:
                        lab = proot
                    elif proot != lab:
                        # merge, keep the smaller root
                        a, b = sorted((find(lab), proot))
                        parent[b] = a
                        lab = a
            if lab == 0:
                lab = next_label
                parent.append(lab)
                next_label += 1
            labels[y, x0:x1] = lab
            runs.append((x0, x1, lab))
        prev_runs = runs

    if next_label == 1:
        return labels, 0
    # resolve unions and renumber by first row-major appearance
    roots = np.array([find(i) for i in range(next_label)], dtype=np.int32)
    flat = roots[labels]
    uniq, first = np.unique(flat, return_index=True)
    keep = uniq != 0
    uniq, first = uniq[keep], first[keep]
    remap = np.zeros(next_label, dtype=np.int32)
    remap[uniq[np.argsort(first, kind="stable")]] = np.arange(
        1, len(uniq) + 1, dtype=np.int32)
    return remap[flat], len(uniq)

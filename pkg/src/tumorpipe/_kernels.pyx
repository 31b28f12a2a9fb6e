# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: 3D connected-component labeling and cubic dilation."""
import numpy as np

cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint8_t

cnp.import_array()


cdef inline int32_t _find(int32_t* parent, int32_t x) noexcept nogil:
    cdef int32_t root = x
    while parent[root] != root:
        root = parent[root]
    cdef int32_t nxt
    # path compression
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline int32_t _union(int32_t* parent, int32_t a, int32_t b) noexcept nogil:
    cdef int32_t ra = _find(parent, a)
    cdef int32_t rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
        return ra
    elif rb < ra:
        parent[ra] = rb
        return rb
    return ra


def _backward_offsets(int connectivity):
    offs = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                if (di, dj, dk) >= (0, 0, 0):
                    continue
                order = abs(di) + abs(dj) + abs(dk)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((di, dj, dk))
    return np.asarray(offs, dtype=np.int64)


def label_components(mask, int connectivity=26):
    """Label foreground components; ids follow first appearance in C-order scan.

    Returns ``(labels, n)`` with ``labels`` an int32 array of the mask's shape.
    """
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    labels_arr = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef int32_t[:, :, ::1] lab = labels_arr

    cdef int64_t[:, ::1] offs = _backward_offsets(connectivity)
    cdef Py_ssize_t n_off = offs.shape[0]

    # provisional labels are bounded by foreground count + 1
    cdef Py_ssize_t n_fg = int(np.count_nonzero(mask))
    parent_arr = np.zeros(n_fg + 1, dtype=np.int32)
    cdef int32_t[::1] parent_view = parent_arr
    cdef int32_t* parent = &parent_view[0]

    cdef Py_ssize_t i, j, k, o, ii, jj, kk
    cdef int32_t cur, nb, next_label = 1

    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if m[i, j, k] == 0:
                        continue
                    cur = 0
                    for o in range(n_off):
                        ii = i + offs[o, 0]
                        jj = j + offs[o, 1]
                        kk = k + offs[o, 2]
                        if ii < 0 or jj < 0 or kk < 0 or jj >= ny or kk >= nz:
                            continue
                        nb = lab[ii, jj, kk]
                        if nb == 0:
                            continue
                        if cur == 0:
                            cur = nb
                        elif nb != cur:
                            cur = _union(parent, cur, nb)
                    if cur == 0:
                        cur = next_label
                        parent[cur] = cur
                        next_label += 1
                    lab[i, j, k] = cur

    # roots are the smallest provisional label of each set, i.e. the first one seen
    remap_arr = np.zeros(next_label, dtype=np.int32)
    cdef int32_t[::1] remap = remap_arr
    cdef int32_t n = 0, p
    for p in range(1, next_label):
        if _find(parent, p) == p:
            n += 1
            remap[p] = n
    for p in range(1, next_label):
        remap[p] = remap[_find(parent, p)]

    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if lab[i, j, k] != 0:
                        lab[i, j, k] = remap[lab[i, j, k]]
    return labels_arr, int(n)


cdef void _dilate_axis(cnp.uint8_t[:, :, ::1] src, cnp.uint8_t[:, :, ::1] dst, int axis, int r) noexcept nogil:
    cdef Py_ssize_t n0 = src.shape[0], n1 = src.shape[1], n2 = src.shape[2]
    cdef Py_ssize_t a, b, c, length, t, lo, hi
    cdef Py_ssize_t count
    # running count of true voxels in the window [c - r, c + r] along the axis
    if axis == 2:
        for a in range(n0):
            for b in range(n1):
                count = 0
                for t in range(min(r, n2)):
                    count += src[a, b, t]
                for c in range(n2):
                    hi = c + r
                    if hi < n2:
                        count += src[a, b, hi]
                    lo = c - r - 1
                    if lo >= 0:
                        count -= src[a, b, lo]
                    dst[a, b, c] = 1 if count > 0 else 0
    elif axis == 1:
        for a in range(n0):
            for c in range(n2):
                count = 0
                for t in range(min(r, n1)):
                    count += src[a, t, c]
                for b in range(n1):
                    hi = b + r
                    if hi < n1:
                        count += src[a, hi, c]
                    lo = b - r - 1
                    if lo >= 0:
                        count -= src[a, lo, c]
                    dst[a, b, c] = 1 if count > 0 else 0
    else:
        for b in range(n1):
            for c in range(n2):
                count = 0
                for t in range(min(r, n0)):
                    count += src[t, b, c]
                for a in range(n0):
                    hi = a + r
                    if hi < n0:
                        count += src[hi, b, c]
                    lo = a - r - 1
                    if lo >= 0:
                        count -= src[lo, b, c]
                    dst[a, b, c] = 1 if count > 0 else 0


def dilate_cube(mask, int radius):
    """Dilation by a (2r+1)^3 cube, clipped at the borders. Returns a bool array."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    src_arr = np.array(mask, dtype=np.uint8, order="C", copy=True)
    if radius == 0 or src_arr.size == 0:
        return src_arr.astype(bool)
    tmp_arr = np.empty_like(src_arr)
    cdef cnp.uint8_t[:, :, ::1] src = src_arr
    cdef cnp.uint8_t[:, :, ::1] tmp = tmp_arr
    with nogil:
        _dilate_axis(src, tmp, 2, radius)
        _dilate_axis(tmp, src, 1, radius)
        _dilate_axis(src, tmp, 0, radius)
    return tmp_arr.view(bool)

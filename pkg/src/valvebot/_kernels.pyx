# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror :mod:`valvebot._kernels_py`."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef double _select(double* buf, Py_ssize_t n, Py_ssize_t kth) noexcept nogil:
    # Hoare quickselect, in place
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = buf[(lo + hi) >> 1]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                tmp = buf[i]; buf[i] = buf[j]; buf[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            hi = j
        elif kth >= i:
            lo = i
        else:
            break
    return buf[kth]


def ring_medians(double[::1] ranges, long[::1] noise_k, long[::1] bg_k):
    cdef Py_ssize_t n = ranges.shape[0]
    out_n = np.empty(n, dtype=np.float64)
    out_b = np.empty(n, dtype=np.float64)
    cdef double[::1] mn = out_n
    cdef double[::1] mb = out_b
    if n == 0:
        return out_n, out_b
    cdef Py_ssize_t kmax = 1, i, j, k, h, idx
    for i in range(n):
        if noise_k[i] > kmax:
            kmax = noise_k[i]
        if bg_k[i] > kmax:
            kmax = bg_k[i]
    cdef double* buf = <double*> malloc(kmax * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                k = noise_k[i]
                h = k >> 1
                for j in range(k):
                    idx = (i - h + j) % n
                    if idx < 0:
                        idx += n
                    buf[j] = ranges[idx]
                mn[i] = _select(buf, k, h)
                k = bg_k[i]
                h = k >> 1
                for j in range(k):
                    idx = (i - h + j) % n
                    if idx < 0:
                        idx += n
                    buf[j] = ranges[idx]
                mb[i] = _select(buf, k, h)
    finally:
        free(buf)
    return out_n, out_b


def label_depth_gated(cnp.uint8_t[:, ::1] mask, double[:, ::1] depth, double tol):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    cdef Py_ssize_t* stack = <Py_ssize_t*> malloc((h * w + 1) * sizeof(Py_ssize_t))
    if stack == NULL:
        raise MemoryError()
    cdef Py_ssize_t r, c, top, p, pr, pc, nr, nc
    cdef int dr, dc
    cdef int current = 0
    cdef double d0
    try:
        with nogil:
            for r in range(h):
                for c in range(w):
                    if mask[r, c] == 0 or labels[r, c] != 0:
                        continue
                    current += 1
                    labels[r, c] = current
                    top = 0
                    stack[top] = r * w + c
                    top += 1
                    while top > 0:
                        top -= 1
                        p = stack[top]
                        pr = p // w
                        pc = p - pr * w
                        d0 = depth[pr, pc]
                        for dr in range(-1, 2):
                            nr = pr + dr
                            if nr < 0 or nr >= h:
                                continue
                            for dc in range(-1, 2):
                                if dr == 0 and dc == 0:
                                    continue
                                nc = pc + dc
                                if nc < 0 or nc >= w:
                                    continue
                                if mask[nr, nc] == 0 or labels[nr, nc] != 0:
                                    continue
                                if depth[nr, nc] - d0 > tol or d0 - depth[nr, nc] > tol:
                                    continue
                                labels[nr, nc] = current
                                stack[top] = nr * w + nc
                                top += 1
    finally:
        free(stack)
    return labels_arr

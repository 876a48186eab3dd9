"""Pure numpy/scipy versions of the compiled kernels.

Used when the extension is not built, and as the reference the compiled
path is tested against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def _windowed_median(ranges, ks):
    n = ranges.shape[0]
    out = np.empty(n, dtype=np.float64)
    for k in np.unique(ks):
        k = int(k)
        h = k // 2
        idx = np.nonzero(ks == k)[0]
        # circular padding; a window may exceed the ring length, so tile as needed
        reps = (h // n) + 1
        padded = np.concatenate([np.tile(ranges, 2 * reps + 1)])
        start = reps * n - h
        windows = sliding_window_view(padded, k)
        out[idx] = np.median(windows[start + idx], axis=1)
    return out


def ring_medians(ranges, noise_k, bg_k):
    """Circular median responses for per-sample odd kernel sizes.

    :param ranges: ring ranges, shape (n,)
    :param noise_k: noise kernel size per sample (odd)
    :param bg_k: background kernel size per sample (odd)
    :return: (noise medians, background medians)
    """
    ranges = np.ascontiguousarray(ranges, dtype=np.float64)
    if ranges.size == 0:
        return np.empty(0), np.empty(0)
    return _windowed_median(ranges, np.asarray(noise_k)), _windowed_median(ranges, np.asarray(bg_k))


_OFFSETS = ((0, 1), (1, -1), (1, 0), (1, 1))


def label_depth_gated(mask, depth, tol):
    """8-connected components of ``mask``; neighbours join only if their depths differ by <= tol.

    Labels are 1..n in order of each component's first pixel in row-major order; 0 is background.
    """
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    flat = np.flatnonzero(mask)
    if flat.size == 0:
        return labels
    index = np.full(h * w, -1, dtype=np.int64)
    index[flat] = np.arange(flat.size)
    rows, cols = np.divmod(flat, w)
    src, dst = [], []
    for dr, dc in _OFFSETS:
        nr, nc = rows + dr, cols + dc
        ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        a = flat[ok]
        b = nr[ok] * w + nc[ok]
        ok2 = mask.ravel()[b]
        a, b = a[ok2], b[ok2]
        close = np.abs(depth.ravel()[a] - depth.ravel()[b]) <= tol
        src.append(index[a[close]])
        dst.append(index[b[close]])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    graph = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(flat.size, flat.size))
    _, comp = connected_components(graph, directed=False)
    # renumber by first occurrence so labels match the scan-order flood fill
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(1, order.size + 1)
    labels.ravel()[flat] = remap[comp]
    return labels

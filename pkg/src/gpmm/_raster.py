"""Z-buffer triangle fill kernels.

Two implementations with identical arithmetic: a numba-jitted scalar loop
and a vectorized numpy fallback. Expression order matches between them so
results are bit-identical; tests rely on that.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install requirement
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _fill_jit(xs, ys, zs, ids, width, height, depth, tri_map, bary):
    # xs, ys, zs: (m, 3) screen x, screen y, camera z per triangle vertex
    for k in range(xs.shape[0]):
        x0, x1, x2 = xs[k, 0], xs[k, 1], xs[k, 2]
        y0, y1, y2 = ys[k, 0], ys[k, 1], ys[k, 2]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area2 == 0.0:
            continue
        lo_x = min(x0, min(x1, x2))
        hi_x = max(x0, max(x1, x2))
        lo_y = min(y0, min(y1, y2))
        hi_y = max(y0, max(y1, y2))
        cx0 = max(0, int(np.ceil(lo_x)))
        cx1 = min(width - 1, int(np.floor(hi_x)))
        cy0 = max(0, int(np.ceil(lo_y)))
        cy1 = min(height - 1, int(np.floor(hi_y)))
        if cx0 > cx1 or cy0 > cy1:
            continue
        iz0 = 1.0 / zs[k, 0]
        iz1 = 1.0 / zs[k, 1]
        iz2 = 1.0 / zs[k, 2]
        for py in range(cy0, cy1 + 1):
            fy = float(py)
            for px in range(cx0, cx1 + 1):
                fx = float(px)
                e0 = (x2 - x1) * (fy - y1) - (y2 - y1) * (fx - x1)
                e1 = (x0 - x2) * (fy - y2) - (y0 - y2) * (fx - x2)
                e2 = (x1 - x0) * (fy - y0) - (y1 - y0) * (fx - x0)
                l0 = e0 / area2
                l1 = e1 / area2
                l2 = e2 / area2
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                denom = l0 * iz0 + l1 * iz1 + l2 * iz2
                if denom <= 0.0:
                    continue
                d = 1.0 / denom
                if d < depth[py, px]:
                    depth[py, px] = d
                    tri_map[py, px] = ids[k]
                    bary[py, px, 0] = l0 * iz0 * d
                    bary[py, px, 1] = l1 * iz1 * d
                    bary[py, px, 2] = l2 * iz2 * d


def _fill_numpy(xs, ys, zs, ids, width, height, depth, tri_map, bary):
    for k in range(xs.shape[0]):
        x0, x1, x2 = xs[k, 0], xs[k, 1], xs[k, 2]
        y0, y1, y2 = ys[k, 0], ys[k, 1], ys[k, 2]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area2 == 0.0:
            continue
        cx0 = max(0, int(np.ceil(min(x0, x1, x2))))
        cx1 = min(width - 1, int(np.floor(max(x0, x1, x2))))
        cy0 = max(0, int(np.ceil(min(y0, y1, y2))))
        cy1 = min(height - 1, int(np.floor(max(y0, y1, y2))))
        if cx0 > cx1 or cy0 > cy1:
            continue
        iz0 = 1.0 / zs[k, 0]
        iz1 = 1.0 / zs[k, 1]
        iz2 = 1.0 / zs[k, 2]
        fy, fx = np.meshgrid(
            np.arange(cy0, cy1 + 1, dtype=np.float64),
            np.arange(cx0, cx1 + 1, dtype=np.float64),
            indexing="ij",
        )
        e0 = (x2 - x1) * (fy - y1) - (y2 - y1) * (fx - x1)
        e1 = (x0 - x2) * (fy - y2) - (y0 - y2) * (fx - x2)
        e2 = (x1 - x0) * (fy - y0) - (y1 - y0) * (fx - x0)
        l0 = e0 / area2
        l1 = e1 / area2
        l2 = e2 / area2
        denom = l0 * iz0 + l1 * iz1 + l2 * iz2
        with np.errstate(divide="ignore"):
            d = 1.0 / denom
        window = depth[cy0 : cy1 + 1, cx0 : cx1 + 1]
        hit = (
            (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
            & (denom > 0.0) & (d < window)
        )
        if not hit.any():
            continue
        window[hit] = d[hit]
        tri_map[cy0 : cy1 + 1, cx0 : cx1 + 1][hit] = ids[k]
        bwin = bary[cy0 : cy1 + 1, cx0 : cx1 + 1]
        bwin[..., 0][hit] = (l0 * iz0 * d)[hit]
        bwin[..., 1][hit] = (l1 * iz1 * d)[hit]
        bwin[..., 2][hit] = (l2 * iz2 * d)[hit]


def fill_triangles(xs, ys, zs, ids, width, height, use_numba=None):
    """Rasterize triangles into fresh depth / triangle-id / barycentric maps.

    Inclusive edge rule (barycentrics >= 0 after signed-area division), so
    either winding fills; ties at equal depth keep the earlier triangle.
    """
    depth = np.full((height, width), np.inf, dtype=np.float64)
    tri_map = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    if xs.shape[0]:
        if use_numba is None:
            use_numba = HAVE_NUMBA and not os.environ.get("GPMM_NO_NUMBA")
        fn = _fill_jit if use_numba else _fill_numpy
        fn(
            np.ascontiguousarray(xs, dtype=np.float64),
            np.ascontiguousarray(ys, dtype=np.float64),
            np.ascontiguousarray(zs, dtype=np.float64),
            np.ascontiguousarray(ids, dtype=np.int32),
            width, height, depth, tri_map, bary,
        )
    return depth, tri_map, bary

"""Compiled inner loops: BVH construction, ray/box and ray/triangle tests,
two-level (instance -> mesh) closest-hit traversal.

Everything here works on flat float64/int64 arrays so numba can compile it
in nopython mode. The Python-facing wrappers live in ``accel.py``.
"""

import numpy as np
from numba import njit

STACK_SIZE = 96
# Möller–Trumbore parallel-ray rejection, relative to |e1||e2|
PARALLEL_EPS = 1e-14


@njit(cache=True)
def build_bvh(lo, hi, leaf_size, pad):
    """Median split on the longest centroid axis.

    Returns node bounds, child links (-1 for leaves), leaf ranges into the
    permutation ``order`` and the permutation itself. Node 0 is the root.
    """
    n = lo.shape[0]
    max_nodes = max(1, 2 * n - 1)
    node_lo = np.empty((max_nodes, 3))
    node_hi = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n).astype(np.int64)
    centroid = 0.5 * (lo + hi)

    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_start = np.empty(max_nodes, dtype=np.int64)
    stack_end = np.empty(max_nodes, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = stack_start[sp]
        e = stack_end[sp]
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for k in range(s, e):
            p = order[k]
            for a in range(3):
                if lo[p, a] < bmin[a]:
                    bmin[a] = lo[p, a]
                if hi[p, a] > bmax[a]:
                    bmax[a] = hi[p, a]
                c = centroid[p, a]
                if c < cmin[a]:
                    cmin[a] = c
                if c > cmax[a]:
                    cmax[a] = c
        for a in range(3):
            scale = max(abs(bmin[a]), abs(bmax[a]), 1.0)
            node_lo[node, a] = bmin[a] - pad * scale
            node_hi[node, a] = bmax[a] + pad * scale
        cnt = e - s
        if cnt <= leaf_size:
            start[node] = s
            count[node] = cnt
            continue
        axis = 0
        ext = cmax[0] - cmin[0]
        for a in range(1, 3):
            if cmax[a] - cmin[a] > ext:
                ext = cmax[a] - cmin[a]
                axis = a
        keys = np.empty(cnt)
        seg = order[s:e].copy()
        for k in range(cnt):
            keys[k] = centroid[seg[k], axis]
        perm = np.argsort(keys, kind="mergesort")
        for k in range(cnt):
            order[s + k] = seg[perm[k]]
        mid = s + cnt // 2
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        stack_node[sp] = rchild
        stack_start[sp] = mid
        stack_end[sp] = e
        sp += 1
        stack_node[sp] = lchild
        stack_start[sp] = s
        stack_end[sp] = mid
        sp += 1
    return (
        node_lo[:n_nodes].copy(),
        node_hi[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        start[:n_nodes].copy(),
        count[:n_nodes].copy(),
        order,
    )


@njit(cache=True, inline="always")
def ray_box(ox, oy, oz, dx, dy, dz, lo, hi, node, tmin, tmax):
    """Slab test. Returns the entry distance or +inf when the box is missed."""
    t0 = tmin
    t1 = tmax
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        da = d[a]
        oa = o[a]
        if da == 0.0:
            if oa < lo[node, a] or oa > hi[node, a]:
                return np.inf
            continue
        inv = 1.0 / da
        ta = (lo[node, a] - oa) * inv
        tb = (hi[node, a] - oa) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return np.inf
    return t0


@njit(cache=True, inline="always")
def ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, f):
    """Two-sided Möller–Trumbore. Returns the ray parameter or +inf."""
    e1x, e1y, e1z = e1[f, 0], e1[f, 1], e1[f, 2]
    e2x, e2y, e2z = e2[f, 0], e2[f, 1], e2[f, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z) * np.sqrt(e2x * e2x + e2y * e2y + e2z * e2z)
    if abs(det) <= PARALLEL_EPS * scale:
        return np.inf
    inv = 1.0 / det
    sx = ox - v0[f, 0]
    sy = oy - v0[f, 1]
    sz = oz - v0[f, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit(cache=True)
def intersect_single(origin, direction, v0, e1, e2):
    """Python-callable wrapper around the triangle test for one face."""
    return ray_triangle(
        origin[0], origin[1], origin[2], direction[0], direction[1], direction[2], v0, e1, e2, 0
    )


@njit(cache=True)
def cast_rays(
    origins,
    dirs,
    tmin,
    tmax,
    top_lo,
    top_hi,
    top_left,
    top_right,
    top_start,
    top_count,
    top_order,
    inst_rot,
    inst_trans,
    inst_root,
    inst_key,
    inst_enabled,
    node_lo,
    node_hi,
    node_left,
    node_right,
    node_start,
    node_count,
    v0,
    e1,
    e2,
    tri_normal,
    tri_valid,
    tri_face,
    out_t,
    out_slot,
    out_face,
    out_normal,
):
    """Closest hit for every ray over a two-level BVH.

    ``inst_rot``/``inst_trans`` map instance-local coordinates to world.
    Ties in range resolve to the smaller (instance key, face id).
    Misses leave ``out_t`` at +inf and ``out_slot``/``out_face`` at -1.
    """
    n = origins.shape[0]
    top_stack = np.empty(STACK_SIZE, dtype=np.int64)
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best_t = tmax
        best_slot = -1
        best_face = -1
        best_key = -1
        best_prim = -1
        tsp = 0
        top_stack[0] = 0
        tsp = 1
        while tsp > 0:
            tsp -= 1
            tn = top_stack[tsp]
            if ray_box(ox, oy, oz, dx, dy, dz, top_lo, top_hi, tn, tmin, best_t) == np.inf:
                continue
            if top_count[tn] == 0:
                top_stack[tsp] = top_right[tn]
                tsp += 1
                top_stack[tsp] = top_left[tn]
                tsp += 1
                continue
            for k in range(top_start[tn], top_start[tn] + top_count[tn]):
                slot = top_order[k]
                if not inst_enabled[slot]:
                    continue
                key = inst_key[slot]
                # world -> local: R^T (o - t), R^T d
                rx = ox - inst_trans[slot, 0]
                ry = oy - inst_trans[slot, 1]
                rz = oz - inst_trans[slot, 2]
                lox = inst_rot[slot, 0, 0] * rx + inst_rot[slot, 1, 0] * ry + inst_rot[slot, 2, 0] * rz
                loy = inst_rot[slot, 0, 1] * rx + inst_rot[slot, 1, 1] * ry + inst_rot[slot, 2, 1] * rz
                loz = inst_rot[slot, 0, 2] * rx + inst_rot[slot, 1, 2] * ry + inst_rot[slot, 2, 2] * rz
                ldx = inst_rot[slot, 0, 0] * dx + inst_rot[slot, 1, 0] * dy + inst_rot[slot, 2, 0] * dz
                ldy = inst_rot[slot, 0, 1] * dx + inst_rot[slot, 1, 1] * dy + inst_rot[slot, 2, 1] * dz
                ldz = inst_rot[slot, 0, 2] * dx + inst_rot[slot, 1, 2] * dy + inst_rot[slot, 2, 2] * dz
                sp = 0
                stack[0] = inst_root[slot]
                sp = 1
                while sp > 0:
                    sp -= 1
                    node = stack[sp]
                    tb = ray_box(lox, loy, loz, ldx, ldy, ldz, node_lo, node_hi, node, tmin, best_t)
                    if tb == np.inf:
                        continue
                    cnt = node_count[node]
                    if cnt == 0:
                        stack[sp] = node_right[node]
                        sp += 1
                        stack[sp] = node_left[node]
                        sp += 1
                        continue
                    for p in range(node_start[node], node_start[node] + cnt):
                        if not tri_valid[p]:
                            continue
                        t = ray_triangle(lox, loy, loz, ldx, ldy, ldz, v0, e1, e2, p)
                        if t == np.inf or t < tmin or t > best_t:
                            continue
                        face = tri_face[p]
                        if best_slot >= 0 and t == best_t:
                            if key > best_key or (key == best_key and face >= best_face):
                                continue
                        best_t = t
                        best_slot = slot
                        best_face = face
                        best_key = key
                        best_prim = p
        if best_slot >= 0:
            out_t[r] = best_t
            out_slot[r] = best_slot
            out_face[r] = best_face
            nx = tri_normal[best_prim, 0]
            ny = tri_normal[best_prim, 1]
            nz = tri_normal[best_prim, 2]
            for a in range(3):
                out_normal[r, a] = (
                    inst_rot[best_slot, a, 0] * nx + inst_rot[best_slot, a, 1] * ny + inst_rot[best_slot, a, 2] * nz
                )
        else:
            out_t[r] = np.inf
            out_slot[r] = -1
            out_face[r] = -1
            out_normal[r, 0] = np.nan
            out_normal[r, 1] = np.nan
            out_normal[r, 2] = np.nan


@njit(cache=True)
def brute_force_cast(origins, dirs, tmin, tmax, v0, e1, e2, valid, out_t, out_face):
    """Exhaustive closest hit over every face of one mesh (face order = id)."""
    n = origins.shape[0]
    m = v0.shape[0]
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best_t = np.inf
        best_f = -1
        for f in range(m):
            if not valid[f]:
                continue
            t = ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, f)
            if t < tmin or t > tmax:
                continue
            if t < best_t:
                best_t = t
                best_f = f
        out_t[r] = best_t
        out_face[r] = best_f

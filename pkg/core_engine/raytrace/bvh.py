"""
Bounding volume hierarchy over mesh triangles with numba ray queries.

The tree is built on the host by median splits along the widest centroid
axis (leaves hold at most `leaf_size` triangles). Queries run in compiled
kernels; every kernel is compiled twice from one implementation, serially and
with `prange` over rays. Rays are independent, so both variants return the
same answers; the serial one is used in deterministic mode.

Intersection is Moller-Trumbore with inclusive edges. When two triangles are
hit at exactly the same distance the lower triangle index wins, the same
rule the brute-force oracle applies by scanning in index order.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numba import njit, prange

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
STACK_DEPTH = 128
BOX_PADDING = 1e-7
DET_EPSILON = 1e-18


@dataclass
class Bvh:
    """
    Flattened tree. Node k is a leaf when `left[k] < 0`; its triangles are
    `order[first[k]:first[k] + count[k]]`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.left)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def closest_hit(self, origins: np.ndarray, directions: np.ndarray, t_min=0.0, t_max=np.inf,
                    deterministic: bool = True) -> "Hits":
        origins, directions, t_min, t_max = _ray_arrays(origins, directions, t_min, t_max)
        n = len(directions)
        t = np.full(n, np.inf)
        tri = np.full(n, -1, dtype=np.int64)
        u = np.zeros(n)
        v = np.zeros(n)
        kernel = _closest_hit_serial if deterministic else _closest_hit_parallel
        kernel(origins, directions, t_min, t_max, self.vertices, self.triangles, self.order,
               self.lo, self.hi, self.left, self.right, self.first, self.count, t, tri, u, v)
        return Hits(t=t, tri_id=tri, u=u, v=v)

    def occluded(self, origins: np.ndarray, directions: np.ndarray, t_min=0.0, t_max=np.inf,
                 deterministic: bool = True) -> np.ndarray:
        """True where any triangle is hit with t in (t_min, t_max)."""
        origins, directions, t_min, t_max = _ray_arrays(origins, directions, t_min, t_max)
        out = np.zeros(len(directions), dtype=np.bool_)
        kernel = _any_hit_serial if deterministic else _any_hit_parallel
        kernel(origins, directions, t_min, t_max, self.vertices, self.triangles, self.order,
               self.lo, self.hi, self.left, self.right, self.first, self.count, out)
        return out


@dataclass
class Hits:
    """Nearest hit per ray: distance (inf on a miss), triangle (-1) and MT coordinates u, v."""

    t: np.ndarray
    tri_id: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.tri_id >= 0

    @property
    def bary(self) -> np.ndarray:
        return np.stack([1.0 - self.u - self.v, self.u, self.v], axis=-1)


def _ray_arrays(origins, directions, t_min, t_max):
    directions = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    n = len(directions)
    origins = np.ascontiguousarray(np.broadcast_to(origins, (n, 3)), dtype=np.float64)
    t_min = np.ascontiguousarray(np.broadcast_to(t_min, (n,)), dtype=np.float64)
    t_max = np.ascontiguousarray(np.broadcast_to(t_max, (n,)), dtype=np.float64)
    return origins, directions, t_min, t_max


def build_bvh(vertices: np.ndarray, triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> Bvh:
    """
    Build a median-split BVH.

    Args:
        vertices: (N, 3) positions
        triangles: (F, 3) vertex indices
        leaf_size: maximum triangles per leaf

    Returns:
        Bvh with boxes padded slightly so boundary hits are never culled
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    corners = vertices[triangles]
    tri_lo = corners.min(axis=1)
    tri_hi = corners.max(axis=1)
    centroids = corners.mean(axis=1)
    order = np.arange(len(triangles), dtype=np.int64)
    pad = BOX_PADDING * (1.0 + float(np.abs(vertices).max(initial=0.0)))

    lo: List[np.ndarray] = []
    hi: List[np.ndarray] = []
    left: List[int] = []
    right: List[int] = []
    first: List[int] = []
    count: List[int] = []

    def build(start: int, stop: int) -> int:
        node = len(left)
        members = order[start:stop]
        lo.append(tri_lo[members].min(axis=0) - pad)
        hi.append(tri_hi[members].max(axis=0) + pad)
        left.append(-1)
        right.append(-1)
        first.append(start)
        count.append(stop - start)
        if stop - start <= leaf_size:
            return node
        spread = centroids[members].max(axis=0) - centroids[members].min(axis=0)
        axis = int(np.argmax(spread))
        order[start:stop] = members[np.argsort(centroids[members, axis], kind="stable")]
        mid = start + (stop - start) // 2
        left[node] = build(start, mid)
        right[node] = build(mid, stop)
        count[node] = 0
        return node

    if len(triangles):
        build(0, len(triangles))
    else:
        lo.append(np.zeros(3))
        hi.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        first.append(0)
        count.append(0)

    bvh = Bvh(
        vertices=vertices,
        triangles=triangles,
        lo=np.ascontiguousarray(lo),
        hi=np.ascontiguousarray(hi),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        first=np.asarray(first, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        order=order,
    )
    logger.debug("built BVH over %d triangles: %d nodes, %d leaves", len(triangles), bvh.node_count,
                 len(bvh.leaves()))
    return bvh


@njit(cache=True)
def _intersect(ox, oy, oz, dx, dy, dz, vertices, triangles, tri):
    """Moller-Trumbore; returns (t, u, v) with t = inf on a miss."""
    i0 = triangles[tri, 0]
    i1 = triangles[tri, 1]
    i2 = triangles[tri, 2]
    ax = vertices[i0, 0]
    ay = vertices[i0, 1]
    az = vertices[i0, 2]
    e1x = vertices[i1, 0] - ax
    e1y = vertices[i1, 1] - ay
    e1z = vertices[i1, 2] - az
    e2x = vertices[i2, 0] - ax
    e2y = vertices[i2, 1] - ay
    e2z = vertices[i2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < DET_EPSILON:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - ax
    sy = oy - ay
    sz = oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@njit(cache=True)
def _safe_inverse(d):
    if abs(d) < 1e-30:
        return 1e30 if d >= 0.0 else -1e30
    return 1.0 / d


@njit(cache=True)
def _box_entry(ox, oy, oz, ix, iy, iz, lo, hi, node, t_min, t_max):
    """Entry distance of the ray into the node's box, or inf if it misses within [t_min, t_max]."""
    t1 = (lo[node, 0] - ox) * ix
    t2 = (hi[node, 0] - ox) * ix
    near = min(t1, t2)
    far = max(t1, t2)
    t1 = (lo[node, 1] - oy) * iy
    t2 = (hi[node, 1] - oy) * iy
    near = max(near, min(t1, t2))
    far = min(far, max(t1, t2))
    t1 = (lo[node, 2] - oz) * iz
    t2 = (hi[node, 2] - oz) * iz
    near = max(near, min(t1, t2))
    far = min(far, max(t1, t2))
    near = max(near, t_min)
    far = min(far, t_max)
    if near <= far:
        return near
    return np.inf


@njit(cache=True)
def _closest_one(ox, oy, oz, dx, dy, dz, t_min, t_max, vertices, triangles, order, lo, hi, left, right,
                 first, count, stack):
    best_t = np.inf
    best_tri = -1
    best_u = 0.0
    best_v = 0.0
    ix = _safe_inverse(dx)
    iy = _safe_inverse(dy)
    iz = _safe_inverse(dz)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_entry(ox, oy, oz, ix, iy, iz, lo, hi, node, t_min, min(t_max, best_t)) == np.inf:
            continue
        if left[node] < 0:
            for k in range(first[node], first[node] + count[node]):
                tri = order[k]
                t, u, v = _intersect(ox, oy, oz, dx, dy, dz, vertices, triangles, tri)
                if t > t_min and t < t_max:
                    if t < best_t or (t == best_t and tri < best_tri):
                        best_t = t
                        best_tri = tri
                        best_u = u
                        best_v = v
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return best_t, best_tri, best_u, best_v


@njit(cache=True)
def _any_one(ox, oy, oz, dx, dy, dz, t_min, t_max, vertices, triangles, order, lo, hi, left, right,
             first, count, stack):
    ix = _safe_inverse(dx)
    iy = _safe_inverse(dy)
    iz = _safe_inverse(dz)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_entry(ox, oy, oz, ix, iy, iz, lo, hi, node, t_min, t_max) == np.inf:
            continue
        if left[node] < 0:
            for k in range(first[node], first[node] + count[node]):
                t, u, v = _intersect(ox, oy, oz, dx, dy, dz, vertices, triangles, order[k])
                if t > t_min and t < t_max:
                    return True
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return False


def _closest_hit_impl(origins, directions, t_min, t_max, vertices, triangles, order, lo, hi, left, right,
                      first, count, t_out, tri_out, u_out, v_out):
    for r in prange(directions.shape[0]):
        stack = np.empty(STACK_DEPTH, dtype=np.int64)
        t, tri, u, v = _closest_one(origins[r, 0], origins[r, 1], origins[r, 2],
                                    directions[r, 0], directions[r, 1], directions[r, 2],
                                    t_min[r], t_max[r], vertices, triangles, order, lo, hi, left, right,
                                    first, count, stack)
        t_out[r] = t
        tri_out[r] = tri
        u_out[r] = u
        v_out[r] = v


def _any_hit_impl(origins, directions, t_min, t_max, vertices, triangles, order, lo, hi, left, right,
                  first, count, out):
    for r in prange(directions.shape[0]):
        stack = np.empty(STACK_DEPTH, dtype=np.int64)
        out[r] = _any_one(origins[r, 0], origins[r, 1], origins[r, 2],
                          directions[r, 0], directions[r, 1], directions[r, 2],
                          t_min[r], t_max[r], vertices, triangles, order, lo, hi, left, right,
                          first, count, stack)


_closest_hit_serial = njit(cache=True)(_closest_hit_impl)
_closest_hit_parallel = njit(cache=True, parallel=True)(_closest_hit_impl)
_any_hit_serial = njit(cache=True)(_any_hit_impl)
_any_hit_parallel = njit(cache=True, parallel=True)(_any_hit_impl)


@njit(cache=True)
def _brute_force_kernel(origins, directions, t_min, t_max, vertices, triangles, t_out, tri_out, any_out):
    for r in range(directions.shape[0]):
        best_t = np.inf
        best_tri = -1
        for tri in range(triangles.shape[0]):
            t, u, v = _intersect(origins[r, 0], origins[r, 1], origins[r, 2],
                                 directions[r, 0], directions[r, 1], directions[r, 2], vertices, triangles, tri)
            if t > t_min[r] and t < t_max[r]:
                any_out[r] = True
                if t < best_t:
                    best_t = t
                    best_tri = tri
        t_out[r] = best_t
        tri_out[r] = best_tri


def brute_force(vertices: np.ndarray, triangles: np.ndarray, origins: np.ndarray, directions: np.ndarray,
                t_min=0.0, t_max=np.inf) -> Tuple[Hits, np.ndarray]:
    """
    Test every ray against every triangle in index order.

    Returns:
        (nearest hits with u = v = 0, occlusion flags)
    """
    origins, directions, t_min, t_max = _ray_arrays(origins, directions, t_min, t_max)
    n = len(directions)
    t = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    hit_any = np.zeros(n, dtype=np.bool_)
    _brute_force_kernel(origins, directions, t_min, t_max, np.ascontiguousarray(vertices, dtype=np.float64),
                        np.ascontiguousarray(triangles, dtype=np.int64), t, tri, hit_any)
    return Hits(t=t, tri_id=tri, u=np.zeros(n), v=np.zeros(n)), hit_any


def shadow_query(bvh: Bvh, origin: np.ndarray, direction: np.ndarray, t_max: float = np.inf,
                 epsilon: float = 0.0) -> bool:
    """True iff no triangle is hit along the ray with t in (epsilon, t_max)."""
    return not bool(bvh.occluded(np.asarray(origin, dtype=np.float64)[None], np.asarray(direction)[None],
                                 epsilon, t_max)[0])

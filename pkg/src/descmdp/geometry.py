"""Rigid transforms and small geometric kernels shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


def _as_rotation(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    return m


@dataclass(frozen=True)
class Pose:
    """A rigid transform in SE(3); maps local coordinates to the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector) into the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) < tol)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0, 1.0, 0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def ray_triangle_intersect(origins, dirs, v0, e1, e2, eps=1e-12):
    """Moller-Trumbore over all (ray, triangle) pairs.

    ``origins``/``dirs`` are (R, 3); ``v0``/``e1``/``e2`` are (T, 3).
    Returns (R, T) hit distances (inf for misses) and the (R, T) sign of
    det (positive = front face, i.e. ray against triangle normal).
    """
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("rtk,tk->rt", pvec, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = origins[:, None, :] - v0[None, :, :]
        u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", dirs, qvec) * inv
        t = np.einsum("rtk,tk->rt", qvec, e2) * inv
        ok = (np.abs(det) > eps) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
    t = np.where(ok, t, np.inf)
    return t, det


def first_hits(origins, dirs, triangles, chunk=2_000_000):
    """Nearest hit per ray against a triangle soup (T, 3, 3).

    Returns (t, tri_index, det_sign); misses give t=inf, index -1.
    """
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    best_d = np.zeros(n)
    if n == 0 or len(triangles) == 0:
        return best_t, best_i, best_d
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    step = max(1, chunk // max(1, n))
    for s in range(0, len(triangles), step):
        t, det = ray_triangle_intersect(origins, dirs, v0[s:s + step],
                                        e1[s:s + step], e2[s:s + step])
        j = np.argmin(t, axis=1)
        tj = t[np.arange(n), j]
        better = tj < best_t
        best_t[better] = tj[better]
        best_i[better] = j[better] + s
        best_d[better] = det[np.arange(n), j][better]
    return best_t, best_i, best_d


@numba.njit(cache=True, nogil=True)
def _first_hits_kernel(origins, dirs, tris, out_t, out_i, out_d, eps):
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        bi = -1
        bd = 0.0
        for k in range(tris.shape[0]):
            ax, ay, az = tris[k, 0, 0], tris[k, 0, 1], tris[k, 0, 2]
            e1x, e1y, e1z = tris[k, 1, 0] - ax, tris[k, 1, 1] - ay, tris[k, 1, 2] - az
            e2x, e2y, e2z = tris[k, 2, 0] - ax, tris[k, 2, 1] - ay, tris[k, 2, 2] - az
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) <= eps:
                continue
            inv = 1.0 / det
            tx, ty, tz = ox - ax, oy - ay, oz - az
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if t > eps and t < best:
                best = t
                bi = k
                bd = det
        out_t[r] = best
        out_i[r] = bi
        out_d[r] = bd


def batch_rays_first_hits(origins, dirs, triangles):
    """Nearest hit per ray against a triangle soup (compiled loop).

    Returns (t, tri_index, det); misses give t=inf and index -1.  A positive
    det means the ray meets the triangle's front (outward) face.
    """
    n = len(origins)
    out_t = np.full(n, np.inf)
    out_i = np.full(n, -1, dtype=np.int64)
    out_d = np.zeros(n)
    if n == 0 or len(triangles) == 0:
        return out_t, out_i, out_d
    _first_hits_kernel(np.ascontiguousarray(origins, dtype=np.float64),
                       np.ascontiguousarray(dirs, dtype=np.float64),
                       np.ascontiguousarray(triangles, dtype=np.float64),
                       out_t, out_i, out_d, 1e-12)
    return out_t, out_i, out_d


def segment_triangle_hits(p0, p1, triangles) -> bool:
    """True when any segment (S, 2 endpoints) crosses any triangle (T, 3, 3)."""
    d = p1 - p0
    length = np.linalg.norm(d, axis=1)
    keep = length > 0
    if not keep.any() or len(triangles) == 0:
        return False
    p0, d, length = p0[keep], d[keep] / length[keep, None], length[keep]
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    step = max(1, 2_000_000 // len(triangles))
    for s in range(0, len(p0), step):
        t, _ = ray_triangle_intersect(p0[s:s + step], d[s:s + step], v0, e1, e2)
        if np.any(t <= length[s:s + step, None]):
            return True
    return False


def triangles_intersect(tris_a, tris_b) -> bool:
    """Brute-force triangle-soup intersection: does any edge of one cross the other?"""
    def edges(t):
        a = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        b = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        return a, b

    lo = np.maximum(tris_a.reshape(-1, 3).min(0), tris_b.reshape(-1, 3).min(0))
    hi = np.minimum(tris_a.reshape(-1, 3).max(0), tris_b.reshape(-1, 3).max(0))
    if np.any(lo > hi):
        return False

    def near(t):
        tmin, tmax = t.min(1), t.max(1)
        return t[np.all((tmax >= lo) & (tmin <= hi), axis=1)]

    a, b = near(tris_a), near(tris_b)
    if len(a) == 0 or len(b) == 0:
        return False
    ea0, ea1 = edges(a)
    eb0, eb1 = edges(b)
    return segment_triangle_hits(ea0, ea1, b) or segment_triangle_hits(eb0, eb1, a)

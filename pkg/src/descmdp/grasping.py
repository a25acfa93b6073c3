"""Geometric antipodal grasp sampling and simulated grasp evaluation.

Hand frame convention: +x is the approach direction, +y the closing axis and
+z the hand axis.  The origin sits at the center of the closing region, so the
fingers occupy ``-depth/2 <= x <= depth/2`` and the palm lies behind them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, batch_rays_first_hits
from .sensing import OccupancyGrid, PointCloud

STABLE, UNSTABLE, MISS = "stable", "unstable", "miss"


@dataclass(frozen=True)
class HandModel:
    finger_width: float = 0.01
    max_aperture: float = 0.10
    finger_depth: float = 0.05
    hand_height: float = 0.02
    palm_depth: float = 0.03

    def __post_init__(self):
        for name in ("finger_width", "max_aperture", "finger_depth", "hand_height", "palm_depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def boxes(self, aperture: float | None = None) -> tuple:
        """(centers, half_extents) of the two fingers and the palm, hand frame."""
        ap = self.max_aperture if aperture is None else aperture
        d, w, h = self.finger_depth, self.finger_width, self.hand_height
        centers = np.array([
            [0.0, ap / 2 + w / 2, 0.0],
            [0.0, -ap / 2 - w / 2, 0.0],
            [-d / 2 - self.palm_depth / 2, 0.0, 0.0],
        ])
        halves = np.array([
            [d / 2, w / 2, h / 2],
            [d / 2, w / 2, h / 2],
            [self.palm_depth / 2, ap / 2 + w, h / 2],
        ])
        return centers, halves

    def closing_region(self, aperture: float | None = None) -> np.ndarray:
        """Half extents of the box swept by the fingers when they close."""
        ap = self.max_aperture if aperture is None else aperture
        return np.array([self.finger_depth / 2, ap / 2, self.hand_height / 2])

    @property
    def reach(self) -> float:
        """Radius of a sphere about the hand origin enclosing every hand box."""
        c, hw = self.boxes()
        return float(np.linalg.norm(np.abs(c) + hw, axis=1).max())


@dataclass(frozen=True)
class GraspCandidate:
    pose: Pose
    aperture: float
    point: np.ndarray = None  # sampled surface point (world)
    normal: np.ndarray = None  # its outward normal estimate
    orientation: int = 0  # sweep index about the normal

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "aperture": self.aperture,
                "point": None if self.point is None else self.point.tolist(),
                "normal": None if self.normal is None else self.normal.tolist(),
                "orientation": self.orientation}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspCandidate":
        pt = None if d.get("point") is None else np.array(d["point"])
        nm = None if d.get("normal") is None else np.array(d["normal"])
        return cls(Pose.from_dict(d["pose"]), d["aperture"], pt, nm, d.get("orientation", 0))


# ------------------------------------------------------------------- normals

def estimate_normals(points, radius: float = 0.01, view_mask=None, camera_origins=None):
    """PCA normals over a ball neighborhood, flipped to face the observing camera.

    Points seen by neither camera (or when no cameras are known) are oriented
    away from the cloud centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros((0, 3))
    tree = cKDTree(points)
    # voxel-center clouds put many neighbours exactly on the radius; include them all
    nbrs = tree.query_ball_point(points, radius + 1e-9)
    counts = np.fromiter((len(x) for x in nbrs), dtype=np.int64, count=n)
    flat = np.fromiter((j for x in nbrs for j in x), dtype=np.int64, count=int(counts.sum()))
    owner = np.repeat(np.arange(n), counts)
    q = points[flat]
    mean = np.stack([np.bincount(owner, q[:, k], n) for k in range(3)], 1) / counts[:, None]
    dq = q - mean[owner]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(owner, dq[:, a] * dq[:, b], n)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    toward = points - points.mean(0)
    if view_mask is not None and camera_origins is not None:
        vm = np.asarray(view_mask, dtype=np.uint8)
        seen = np.zeros((n, 3))
        for bit, cam in enumerate(np.asarray(camera_origins)):
            sel = (vm >> bit) & 1 == 1
            v = cam - points[sel]
            seen[sel] += v / np.linalg.norm(v, axis=1, keepdims=True)
        have = np.linalg.norm(seen, axis=1) > 0
        toward[have] = seen[have]
    flip = np.einsum("ij,ij->i", normals, toward) < 0
    normals[flip] *= -1
    return normals


# ----------------------------------------------------------------- collisions

# Voxel centers sit on a lattice that hand boxes often touch exactly; contacts
# within this distance count as touching (not colliding) and region bounds are
# inclusive by the same margin, so ties never depend on rounding.
TOUCH_EPS = 1e-9


@numba.njit(cache=True, nogil=True)
def _box_hits_cubes(q, shift, vh, c, e, rw):
    """Separating-axis test of one hand box against axis-aligned voxel cubes.

    ``q`` holds voxel centers in the hand frame (plus ``shift``), where the box
    (center ``c``, half extents ``e``) is axis-aligned.  ``rw`` maps world to
    hand coordinates, so column k of ``rw`` is world axis k seen from the hand.
    """
    ar = np.abs(rw)
    eps = TOUCH_EPS
    for i in range(q.shape[0]):
        t0 = q[i, 0] + shift[0] - c[0]
        t1 = q[i, 1] + shift[1] - c[1]
        t2 = q[i, 2] + shift[2] - c[2]
        # hand axes
        if abs(t0) > e[0] + vh * (ar[0, 0] + ar[0, 1] + ar[0, 2]) - eps:
            continue
        if abs(t1) > e[1] + vh * (ar[1, 0] + ar[1, 1] + ar[1, 2]) - eps:
            continue
        if abs(t2) > e[2] + vh * (ar[2, 0] + ar[2, 1] + ar[2, 2]) - eps:
            continue
        sep = False
        # world axes
        for k in range(3):
            proj = abs(t0 * rw[0, k] + t1 * rw[1, k] + t2 * rw[2, k])
            if proj > e[0] * ar[0, k] + e[1] * ar[1, k] + e[2] * ar[2, k] + vh - eps:
                sep = True
                break
        # cross products hand axis j x world axis k
        j = 0
        while not sep and j < 3:
            for k in range(3):
                a0, a1, a2 = rw[0, k], rw[1, k], rw[2, k]
                if j == 0:
                    l0, l1, l2 = 0.0, -a2, a1
                elif j == 1:
                    l0, l1, l2 = a2, 0.0, -a0
                else:
                    l0, l1, l2 = -a1, a0, 0.0
                if abs(l0) + abs(l1) + abs(l2) < 1e-9:
                    continue
                proj = abs(t0 * l0 + t1 * l1 + t2 * l2)
                rb = e[0] * abs(l0) + e[1] * abs(l1) + e[2] * abs(l2)
                rc = 0.0
                for m_ in range(3):
                    rc += abs(l0 * rw[0, m_] + l1 * rw[1, m_] + l2 * rw[2, m_])
                if proj > rb + vh * rc - eps:
                    sep = True
                    break
            j += 1
        if not sep:
            return True
    return False


@numba.njit(cache=True, nogil=True)
def _sweep_depths(rel, rots, depths, ph_y, box_c, box_h, vh):
    """For each orientation, the deepest depth index reached before the first collision."""
    n_k = rots.shape[0]
    best = np.full(n_k, -1, dtype=np.int64)
    q = np.empty_like(rel)
    shift = np.zeros(3)
    for k in range(n_k):
        r = rots[k]
        rw = np.ascontiguousarray(r.T)
        for i in range(rel.shape[0]):
            for a in range(3):
                q[i, a] = rel[i, 0] * r[0, a] + rel[i, 1] * r[1, a] + rel[i, 2] * r[2, a]
        for j in range(depths.shape[0]):
            shift[0] = depths[j]
            shift[1] = ph_y
            hit = False
            for b in range(box_c.shape[0]):
                if _box_hits_cubes(q, shift, vh, box_c[b], box_h[b], rw):
                    hit = True
                    break
            if hit:
                break
            best[k] = j
    return best


def hand_collides(pose: Pose, hand: HandModel, occupied_centers, voxel_size: float,
                  aperture: float | None = None) -> bool:
    """Does any hand box overlap any occupied voxel cube?"""
    occ = np.asarray(occupied_centers, dtype=np.float64)
    if len(occ) == 0:
        return False
    q = np.ascontiguousarray(pose.apply_inverse(occ))
    centers, halves = hand.boxes(aperture)
    rw = np.ascontiguousarray(pose.rotation.T)
    return any(_box_hits_cubes(q, np.zeros(3), 0.5 * voxel_size, centers[b], halves[b], rw)
               for b in range(len(centers)))


# ------------------------------------------------------------------- sampling

N_SWEEP = 12  # approach orientations about the normal, 30 degrees apart
ANTIPODAL_HALF_ANGLE = np.deg2rad(15.0)
FIRST_TOUCH_HALF_ANGLE = np.deg2rad(25.0)
SURFACE_MARGIN = 0.008  # gap between the sampled point and the +y finger


def sweep_frames(p, n, center_xy) -> np.ndarray:
    """(N_SWEEP, 3, 3) hand rotations with closing axis +y = n, swept about n.

    Sweep zero puts the hand axis along world up projected off the normal; for
    a vertical normal the horizontal direction from the workspace center is used.
    """
    up = np.array([0.0, 0.0, 1.0])
    ref = up - (up @ n) * n
    if np.linalg.norm(ref) < 1e-6:
        ref = np.array([p[0] - center_xy[0], p[1] - center_xy[1], 0.0])
        ref -= (ref @ n) * n
        if np.linalg.norm(ref) < 1e-6:
            ref = np.cross(n, [1.0, 0, 0])
    ref = ref / np.linalg.norm(ref)
    side = np.cross(n, ref)
    ang = np.arange(N_SWEEP) * 2 * np.pi / N_SWEEP
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    z = ref * c + side * s
    x = side * c - ref * s  # n x z
    y = np.broadcast_to(n, z.shape)
    return np.stack([x, y, z], axis=2)


def _canonical_order(points, center_xy) -> np.ndarray:
    """Yaw-equivariant point ordering: height, radius about the center, relative angle."""
    rel = points[:, :2] - center_xy
    r2 = np.round((rel ** 2).sum(1), 9)
    mean = rel.mean(0)
    base = np.arctan2(mean[1], mean[0]) if np.linalg.norm(mean) > 1e-9 else 0.0
    ang = np.round((np.arctan2(rel[:, 1], rel[:, 0]) - base) % (2 * np.pi), 6)
    return np.lexsort((ang, r2, np.round(points[:, 2], 9)))


def _antipodal_in_region(y, ny, cos_ap, tol) -> bool:
    """Antipodal test on the visible points inside the closing region.

    ``y`` are their closing-axis coordinates and ``ny`` the closing-axis
    components of their normals.  Some point must face each finger within
    the sampling half-angle, and the points each finger would meet first
    (within ``tol`` of the extreme) must lie on surfaces roughly perpendicular
    to the closing axis (unsigned normals within FIRST_TOUCH_HALF_ANGLE).
    """
    if len(y) == 0:
        return False
    if not (np.any(ny >= cos_ap) and np.any(ny <= -cos_ap)):
        return False
    top = y >= y.max() - tol - TOUCH_EPS
    bot = y <= y.min() + tol + TOUCH_EPS
    cos_touch = np.cos(FIRST_TOUCH_HALF_ANGLE)
    # unsigned: one-voxel-thick shells are seen from one side only
    return bool(np.abs(ny[top]).mean() >= cos_touch and np.abs(ny[bot]).mean() >= cos_touch)


def sample_grasps(cloud: PointCloud, grid: OccupancyGrid, hand: HandModel = HandModel(),
                  m: int = 100, seed: int = 0, normal_radius: float = 0.01,
                  max_attempts: int | None = None) -> list:
    """Up to ``m`` collision-free antipodal grasp candidates on the visible surface."""
    if m < 1:
        raise ValueError("m must be >= 1")
    pts = cloud.visible_points
    if len(pts) == 0:
        return []
    vm = None if cloud.view_mask is None else cloud.view_mask[cloud.visible]
    normals = estimate_normals(pts, normal_radius, vm, cloud.camera_origins)
    spec = grid.spec
    center_xy = (spec.origin + 0.5 * np.asarray(spec.dims) * spec.resolution)[:2]
    occ = grid.occupied_centers()
    hidden = cloud.occluded_points

    rng = np.random.default_rng(seed)
    order = _canonical_order(pts, center_xy)[rng.permutation(len(pts))]
    if max_attempts is None:
        max_attempts = 4 * m
    ap = hand.max_aperture
    d = hand.finger_depth
    res = spec.resolution
    box_c, box_h = hand.boxes(ap)
    region = hand.closing_region(ap)
    ph_y = ap / 2 - SURFACE_MARGIN  # p's closing-axis coordinate in the hand frame
    # every hand box and the closing region lie within this distance of p
    reach2 = (hand.reach + float(np.hypot(d / 2, ph_y)) + res) ** 2
    cos_ap = np.cos(ANTIPODAL_HALF_ANGLE)
    depths = np.arange(d / 2, -d / 2 - 1e-12, -res)  # shallow to deep

    out = []
    for idx in order[:max_attempts]:
        if len(out) >= m:
            break
        p, n = pts[idx], normals[idx]
        # one draw per attempt so a local tie cannot shift later choices
        u = rng.random()
        rots = np.ascontiguousarray(sweep_frames(p, n, center_xy))
        rel = occ - p
        rel = np.ascontiguousarray(rel[np.einsum("ij,ij->i", rel, rel) <= reach2])
        best = _sweep_depths(rel, rots, depths, ph_y, box_c, box_h, 0.5 * res)
        ok = np.nonzero(best >= 0)[0]
        if len(ok) == 0:
            continue
        vis_rel = pts - p
        near = np.einsum("ij,ij->i", vis_rel, vis_rel) <= reach2
        vis_rel, vis_n = vis_rel[near], normals[near]
        hid_rel = hidden - p
        hid_rel = hid_rel[np.einsum("ij,ij->i", hid_rel, hid_rel) <= reach2]
        rk = rots[ok]  # (K, 3, 3)
        ph = np.zeros((len(ok), 3))
        ph[:, 0] = depths[best[ok]]
        ph[:, 1] = ph_y
        vh = np.matmul(vis_rel[None], rk) + ph[:, None, :]
        vny = rk[:, :, 1] @ vis_n.T
        inside = np.all(np.abs(vh) <= region + TOUCH_EPS, axis=2)
        valid = []
        for j, k in enumerate(ok):
            y = vh[j, inside[j], 1]
            if not _antipodal_in_region(y, vny[j, inside[j]], cos_ap, res):
                continue
            # unseen space nearer a finger than its predicted contact could hide geometry
            if hid_rel.size:
                hh = hid_rel @ rk[j] + ph[j]
                hy = hh[np.all(np.abs(hh) <= region + TOUCH_EPS, axis=1), 1]
                if len(hy) and (hy.max() > y.max() + res + TOUCH_EPS
                                or hy.min() < y.min() - res - TOUCH_EPS):
                    continue
            rot = rk[j]
            valid.append((int(k), rot, p - rot @ ph[j]))
        if valid:
            k, rot, origin = valid[min(int(u * len(valid)), len(valid) - 1)]
            out.append(GraspCandidate(Pose(rot, origin), ap, p.copy(), n.copy(), k))
    return out


# ----------------------------------------------------------------- evaluation

FRICTION_COEFF = 0.3
PAD_SAMPLES = 9
PATCH_TOL = 0.002


@dataclass(frozen=True)
class GraspOutcome:
    quality: str
    object_id: int | None = None
    contacts: np.ndarray = None  # (2, 3) patch centers (world), +y finger first
    normals: np.ndarray = None


def _finger_contact(scene, origins, dirs, max_t):
    best_t = np.full(len(origins), np.inf)
    best_obj = np.full(len(origins), -1, dtype=np.int64)
    best_n = np.zeros((len(origins), 3))
    best_det = np.zeros(len(origins))
    for obj in scene.objects:
        c, rad = obj.bounding_sphere()
        w = c - origins
        tp = np.einsum("ij,ij->i", w, dirs)
        dist2 = np.einsum("ij,ij->i", w, w) - tp ** 2
        cand = np.nonzero((dist2 <= rad * rad) & (tp + rad > 0) & (tp - rad < max_t))[0]
        if len(cand) == 0:
            continue
        tris = obj.world_triangles()
        t, tri, det = batch_rays_first_hits(origins[cand], dirs[cand], tris)
        better = (t < best_t[cand]) & (t <= max_t)
        sel = cand[better]
        best_t[sel] = t[better]
        best_obj[sel] = obj.id
        best_det[sel] = det[better]
        tr = tris[tri[better]]
        nn = np.cross(tr[:, 1] - tr[:, 0], tr[:, 2] - tr[:, 0])
        best_n[sel] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
    return best_t, best_obj, best_n, best_det


def _unit(v):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def _pair_antipodal(pa, na, pb, nb, y_axis, cos_cone) -> bool:
    """Is there a point pair whose connecting line lies inside both friction cones?"""
    ga = na @ y_axis >= cos_cone
    gb = -(nb @ y_axis) >= cos_cone
    if not (ga.any() and gb.any()):
        return False
    pa, na, pb, nb = pa[ga], na[ga], pb[gb], nb[gb]
    line = _unit(pb[None, :, :] - pa[:, None, :])  # (A, B, 3), +y patch toward -y patch
    ok_a = np.einsum("abk,ak->ab", line, -na) >= cos_cone
    ok_b = np.einsum("abk,bk->ab", line, nb) >= cos_cone
    return bool(np.any(ok_a & ok_b))


def evaluate_grasp(scene, candidate: GraspCandidate, hand: HandModel = HandModel(),
                   mu: float = FRICTION_COEFF) -> GraspOutcome:
    """Close both fingers against the true meshes and classify the result.

    Each pad is sampled by a grid of rays cast along the closing direction; a
    finger's contact patch is the set of hits within PATCH_TOL of its first
    touch.  The grasp is stable when some pair of patch points (one per
    finger) has its connecting line inside both friction cones and both
    normals inside the cone about the pad pressing direction.  The test runs
    once with per-point normals and once with each patch's mean normal.
    """
    pose = candidate.pose
    ap = candidate.aperture
    d, h = hand.finger_depth, hand.hand_height
    xs = np.linspace(-d / 2, d / 2, PAD_SAMPLES)
    zs = np.linspace(-h / 2, h / 2, PAD_SAMPLES)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    gx, gz = gx.ravel(), gz.ravel()
    cos_cone = np.cos(np.arctan(mu))
    y_axis = pose.rotation[:, 1]
    patches = []
    for sign in (1.0, -1.0):
        local = np.stack([gx, np.full_like(gx, sign * ap / 2), gz], 1)
        o = pose.apply(local)
        dirs = np.broadcast_to(-sign * y_axis, o.shape).copy()
        t, obj, nrm, det = _finger_contact(scene, o, dirs, ap)
        ok = np.isfinite(t)
        if not ok.any():
            return GraspOutcome(MISS)
        tmin = t[ok].min()
        first = int(np.nonzero(ok & (t == tmin))[0][0])
        oid = int(obj[first])
        patch = ok & (obj == oid) & (t <= tmin + PATCH_TOL)
        pts = o[patch] + t[patch, None] * dirs[patch]
        patches.append((oid, pts, nrm[patch], bool(np.any(det[patch] < 0))))
    (oa, pa, na, ba), (ob, pb, nb, bb) = patches
    if oa != ob:
        return GraspOutcome(MISS)
    contacts = np.stack([pa.mean(0), pb.mean(0)])
    normals = _unit(np.stack([na.sum(0), nb.sum(0)]))
    if ba or bb:
        # a finger started inside the object
        return GraspOutcome(UNSTABLE, None, contacts, normals)
    if _pair_antipodal(pa, na, pb, nb, y_axis, cos_cone):
        return GraspOutcome(STABLE, oa, contacts, normals)
    # symmetric multi-point contacts (e.g. a flat pad inside a concave wall)
    ma, mb = normals[:1], normals[1:]
    if _pair_antipodal(pa, np.repeat(ma, len(pa), 0), pb, np.repeat(mb, len(pb), 0),
                       y_axis, cos_cone):
        return GraspOutcome(STABLE, oa, contacts, normals)
    return GraspOutcome(UNSTABLE, None, contacts, normals)


def grasp_quality(scene, candidate: GraspCandidate, hand: HandModel = HandModel()) -> str:
    return evaluate_grasp(scene, candidate, hand).quality


def grasped_object(scene, candidate: GraspCandidate, hand: HandModel = HandModel()):
    """Id of the object held by a stable grasp, else None."""
    out = evaluate_grasp(scene, candidate, hand)
    return out.object_id if out.quality == STABLE else None


def nearest_object(scene, candidate: GraspCandidate) -> int | None:
    """Object whose surface lies closest to the closing-region center."""
    if not scene.objects:
        return None
    c = candidate.pose.translation
    dists = [np.linalg.norm(o.world_vertices() - c, axis=1).min() for o in scene.objects]
    return int(scene.objects[int(np.argmin(dists))].id)


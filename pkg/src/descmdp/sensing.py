"""Synthetic depth views, two-view occupancy fusion, and point-cloud extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy.ndimage import distance_transform_edt

from .geometry import Pose, batch_rays_first_hits, rot_z

FREE, OCCUPIED, UNKNOWN = 0, 1, 2

TABLE_ID = -1
NO_HIT = -2
TABLE_MARGIN = 0.10  # the table top extends this far beyond the workspace footprint


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(width, height, f, f, width / 2.0, height / 2.0)


DEFAULT_INTRINSICS = Intrinsics.from_fov(140, 140, 44.0)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with optical axis +z toward ``target``, +x right, +y down."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def camera_rig(center, distance: float = 0.5, elevation_deg: float = 45.0,
               yaw_deg: float = 0.0, table_height: float = 0.0, aim_height: float = 0.05):
    """Two cameras 90 degrees apart about the vertical through ``center``."""
    center = np.asarray(center, float)
    target = np.array([center[0], center[1], table_height + aim_height])
    el = np.deg2rad(elevation_deg)
    poses = []
    for yaw in (yaw_deg, yaw_deg + 90.0):
        back = rot_z(np.deg2rad(yaw)) @ np.array([-np.cos(el), 0.0, np.sin(el)])
        poses.append(look_at(target + distance * back, target))
    return tuple(poses)


@dataclass(frozen=True)
class DepthImage:
    depths: np.ndarray  # (height, width); range along the ray, inf = no hit
    camera_pose: Pose
    intrinsics: Intrinsics
    hit_ids: np.ndarray = None  # object id per pixel, TABLE_ID or NO_HIT
    far: float = 2.0

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def rays(self):
        return pixel_rays(self.camera_pose, self.intrinsics)

    def points(self) -> np.ndarray:
        o, d = self.rays()
        t = self.depths.ravel()
        ok = np.isfinite(t)
        return o[ok] + t[ok, None] * d[ok]


def pixel_rays(camera_pose: Pose, intr: Intrinsics):
    """World-frame ray origins and unit directions, row-major over pixels."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    dc = np.stack([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy,
                   np.ones_like(u, dtype=float)], axis=-1).reshape(-1, 3)
    dc /= np.linalg.norm(dc, axis=1, keepdims=True)
    d = dc @ camera_pose.rotation.T
    o = np.broadcast_to(camera_pose.translation, d.shape).copy()
    return o, d


def render_depth(scene, camera_pose: Pose, intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                 far: float = 2.0, include_table: bool = True) -> DepthImage:
    """Nearest ray-triangle hit per pixel against every object and the table plane."""
    o, d = pixel_rays(camera_pose, intrinsics)
    n = len(d)
    best = np.full(n, np.inf)
    ids = np.full(n, NO_HIT, dtype=np.int64)
    if include_table:
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (scene.table_height - o[:, 2]) / d[:, 2]
        ok = (d[:, 2] < 0) & (tt > 0) & (o[:, 2] > scene.table_height)
        lo, hi = (np.asarray(w, float)[:2] for w in scene.workspace)
        with np.errstate(invalid="ignore"):
            pxy = o[:, :2] + np.where(ok, tt, 0.0)[:, None] * d[:, :2]
        ok &= np.all((pxy >= lo - TABLE_MARGIN) & (pxy <= hi + TABLE_MARGIN), axis=1)
        best[ok] = tt[ok]
        ids[ok] = TABLE_ID
    for obj in scene.objects:
        c, rad = obj.bounding_sphere()
        w = c - o
        tp = np.einsum("ij,ij->i", w, d)
        dist2 = np.einsum("ij,ij->i", w, w) - tp ** 2
        cand = np.nonzero((dist2 <= rad * rad) & (tp + rad > 0) & (tp - rad < best))[0]
        if len(cand) == 0:
            continue
        t, _, _ = batch_rays_first_hits(o[cand], d[cand], obj.world_triangles())
        better = t < best[cand]
        best[cand[better]] = t[better]
        ids[cand[better]] = obj.id
    best[best > far] = np.inf
    ids[~np.isfinite(best)] = NO_HIT
    return DepthImage(best.reshape(intrinsics.height, intrinsics.width), camera_pose,
                      intrinsics, ids.reshape(intrinsics.height, intrinsics.width), far)


# ------------------------------------------------------------------ occupancy

@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray  # world position of the grid's low corner
    resolution: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def centers(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def covers(self, workspace, table_height: float) -> bool:
        lo, hi = (np.asarray(w, float) for w in workspace)
        lo = np.array([lo[0], lo[1], max(lo[2], table_height)])
        # the top face may fall short by under half a voxel (table sits inside layer 0)
        return bool(np.all(self.origin <= lo + 1e-9)
                    and np.all(self.upper >= hi - 0.5 * self.resolution - 1e-9))


def default_grid_spec(workspace, table_height: float = 0.0, resolution: float = 0.005) -> GridSpec:
    """Grid over the workspace; the table plane sits inside the lowest voxel layer."""
    lo, hi = (np.asarray(w, float) for w in workspace)
    origin = np.array([lo[0], lo[1], table_height - 0.25 * resolution])
    ext = hi - np.array([lo[0], lo[1], table_height])
    dims = tuple(int(np.ceil(e / resolution - 1e-9)) for e in ext)
    return GridSpec(origin, resolution, dims)


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    labels: np.ndarray  # uint8 FREE / OCCUPIED / UNKNOWN, shape dims
    view_mask: np.ndarray = None  # uint8 bit per view that hit an occupied voxel
    camera_origins: np.ndarray = None  # (2, 3)

    @property
    def origin(self):
        return self.spec.origin

    @property
    def resolution(self):
        return self.spec.resolution

    @property
    def dims(self):
        return self.spec.dims

    def counts(self) -> dict:
        return {name: int((self.labels == v).sum())
                for name, v in (("free", FREE), ("occupied", OCCUPIED), ("unknown", UNKNOWN))}

    def occupied_centers(self) -> np.ndarray:
        return self.spec.centers(np.argwhere(self.labels == OCCUPIED))


def _hit_voxels(o, d, t, spec: GridSpec):
    ok = np.isfinite(t)
    p = o[ok] + t[ok, None] * d[ok]
    idx = np.floor((p - spec.origin) / spec.resolution).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx[inside]


@numba.njit(cache=True, nogil=True)
def _walk_kernel(o, d, t_start, t_stop, t_end, g0, res, dims, free):
    n1, n2 = dims[1], dims[2]
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    for r in range(o.shape[0]):
        t_cur = t_start[r]
        if not t_cur < t_stop[r]:
            continue
        for k in range(3):
            step[k] = 1 if d[r, k] > 0 else (-1 if d[r, k] < 0 else 0)
            i = int(np.floor((o[r, k] + t_cur * d[r, k] - g0[k]) / res))
            idx[k] = min(max(i, 0), dims[k] - 1)
        while True:
            # exit time through the nearest boundary; ties resolve to the lowest axis
            best = np.inf
            axis = 0
            for k in range(3):
                if step[k] == 0:
                    continue
                b = g0[k] + (idx[k] + (1 if step[k] > 0 else 0)) * res
                tk = (b - o[r, k]) / d[r, k]
                if tk < best:
                    best = tk
                    axis = k
            if best > t_cur and t_cur < t_end[r]:
                free[(idx[0] * n1 + idx[1]) * n2 + idx[2]] = True
            idx[axis] += step[axis]
            t_cur = best
            if (idx[axis] < 0 or idx[axis] >= dims[axis]) or not t_cur < t_stop[r]:
                break


def _free_voxels(o, d, t_end, spec: GridSpec) -> np.ndarray:
    """Voxel-walk every ray up to ``t_end``; boolean mask of traversed voxels.

    Boundary crossing times are evaluated as (boundary - origin) / direction so
    they agree bit-for-bit with a per-voxel slab test.
    """
    dims = np.asarray(spec.dims, dtype=np.int64)
    res = spec.resolution
    g0 = spec.origin
    lo, hi = g0, g0 + dims * res
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    ta = np.where(d == 0, np.where((o > lo) & (o < hi), -np.inf, np.inf), ta)
    tb = np.where(d == 0, np.where((o > lo) & (o < hi), np.inf, -np.inf), tb)
    t_in = np.minimum(ta, tb).max(1)
    t_out = np.maximum(ta, tb).min(1)
    t_start = np.maximum(t_in, 0.0)
    t_stop = np.minimum(t_out, t_end)
    free = np.zeros(spec.size, dtype=bool)
    _walk_kernel(np.ascontiguousarray(o, dtype=np.float64),
                 np.ascontiguousarray(d, dtype=np.float64),
                 t_start, t_stop, np.asarray(t_end, dtype=np.float64),
                 np.asarray(g0, dtype=np.float64), float(res), dims, free)
    return free.reshape(spec.dims)


def view_labels(view: DepthImage, spec: GridSpec):
    """(occupied mask, free mask) contributed by a single depth view."""
    o, d = view.rays()
    t = view.depths.ravel()
    t_end = np.where(np.isfinite(t), t, view.far)
    free = _free_voxels(o, d, t_end, spec)
    occ = np.zeros(spec.dims, dtype=bool)
    hv = _hit_voxels(o, d, t, spec)
    occ[hv[:, 0], hv[:, 1], hv[:, 2]] = True
    return occ, free


def _yaw_of(pose: Pose) -> float:
    z = pose.rotation[:, 2]
    return float(np.arctan2(z[1], z[0]))


def check_rig(view_a: DepthImage, view_b: DepthImage, tol: float = 1e-6):
    """The two cameras must be 90 degrees apart about a common vertical axis."""
    ya, yb = _yaw_of(view_a.camera_pose), _yaw_of(view_b.camera_pose)
    diff = abs((yb - ya + np.pi) % (2 * np.pi) - np.pi)
    if abs(diff - np.pi / 2) > tol:
        raise ValueError(f"camera views must be 90 degrees apart, got {np.rad2deg(diff):.4f}")


def fuse_views(view_a: DepthImage, view_b: DepthImage, grid_spec: GridSpec,
               workspace=None, table_height: float = 0.0, check: bool = True) -> OccupancyGrid:
    """Three-label occupancy from two registered views; occupied beats free."""
    if workspace is not None and not grid_spec.covers(workspace, table_height):
        raise ValueError("grid spec does not cover the workspace")
    if check:
        check_rig(view_a, view_b)
    occ_a, free_a = view_labels(view_a, grid_spec)
    occ_b, free_b = view_labels(view_b, grid_spec)
    occ = occ_a | occ_b
    labels = np.full(grid_spec.dims, UNKNOWN, dtype=np.uint8)
    labels[free_a | free_b] = FREE
    labels[occ] = OCCUPIED
    mask = occ_a.astype(np.uint8) | (occ_b.astype(np.uint8) << 1)
    cams = np.stack([view_a.camera_pose.translation, view_b.camera_pose.translation])
    return OccupancyGrid(grid_spec, labels, mask, cams)


def observe(scene, grid_spec: GridSpec = None, intrinsics: Intrinsics = DEFAULT_INTRINSICS,
            rig=None) -> OccupancyGrid:
    """Render the standard two-camera rig and fuse it."""
    if grid_spec is None:
        grid_spec = default_grid_spec(scene.workspace, scene.table_height)
    if rig is None:
        rig = camera_rig(scene.center, table_height=scene.table_height)
    va = render_depth(scene, rig[0], intrinsics)
    vb = render_depth(scene, rig[1], intrinsics)
    return fuse_views(va, vb, grid_spec, scene.workspace, scene.table_height)


# ---------------------------------------------------------------- point clouds

@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3)
    visible: np.ndarray  # (n,) bool; False = occluded
    view_mask: np.ndarray = None  # (n,) uint8, which camera saw a visible point
    camera_origins: np.ndarray = None

    def __len__(self):
        return len(self.points)

    @property
    def visible_points(self) -> np.ndarray:
        return self.points[self.visible]

    @property
    def occluded_points(self) -> np.ndarray:
        return self.points[~self.visible]

    def subset(self, mask) -> "PointCloud":
        vm = None if self.view_mask is None else self.view_mask[mask]
        return PointCloud(self.points[mask], self.visible[mask], vm, self.camera_origins)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, bool), np.zeros(0, np.uint8))


# descriptor half-diagonal of the standard 10 x 10 x 20 cm cuboid
DEFAULT_DILATION = float(np.linalg.norm([0.05, 0.05, 0.10]))


def extract_cloud(grid: OccupancyGrid, dilation: float = DEFAULT_DILATION) -> PointCloud:
    """Visible points at occupied voxel centers plus nearby unknown voxels as occluded points."""
    occ = grid.labels == OCCUPIED
    vis_idx = np.argwhere(occ)
    if len(vis_idx) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, bool), np.zeros(0, np.uint8),
                          grid.camera_origins)
    dist = distance_transform_edt(~occ, sampling=grid.resolution)
    unk_idx = np.argwhere((grid.labels == UNKNOWN) & (dist <= dilation))
    pts = grid.spec.centers(np.concatenate([vis_idx, unk_idx]))
    visible = np.zeros(len(pts), bool)
    visible[:len(vis_idx)] = True
    vm = np.zeros(len(pts), np.uint8)
    if grid.view_mask is not None:
        vm[:len(vis_idx)] = grid.view_mask[tuple(vis_idx.T)]
    return PointCloud(pts, visible, vm, grid.camera_origins)


def remove_table_plane(cloud: PointCloud, table_height: float, band: float = 0.005) -> PointCloud:
    if band <= 0:
        raise ValueError("band must be positive")
    keep = np.abs(cloud.points[:, 2] - table_height) > band
    return cloud.subset(keep)


# ------------------------------------------------------------------- grid dump

_GRID_HEADER = struct.Struct("<3id3d")


def dump_grid(grid: OccupancyGrid, path) -> None:
    """Flat binary: dims, resolution, origin, then one label byte per voxel (C order)."""
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(*grid.dims, grid.resolution, *grid.origin))
        fh.write(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        head = fh.read(_GRID_HEADER.size)
        if len(head) != _GRID_HEADER.size:
            raise ValueError("truncated grid header")
        vals = _GRID_HEADER.unpack(head)
        dims, res, origin = vals[:3], vals[3], vals[4:]
        payload = fh.read()
    if len(payload) != int(np.prod(dims)):
        raise ValueError("grid payload size does not match header dims")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
    return OccupancyGrid(GridSpec(np.array(origin), res, dims), labels)

"""Procedural bottles and mugs, and randomized tabletop scenes built from them.

Objects are lathed (surface-of-revolution) meshes in an object frame whose
origin is the center of the base and whose +z axis is the canonical "up".
Scenes are pure functions of their seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

from .geometry import Pose, rot_z, rotation_between

BOTTLE = "bottle"
MUG = "mug"
CATEGORIES = (BOTTLE, MUG)
HEIGHT_RANGE = {BOTTLE: (0.10, 0.20), MUG: (0.06, 0.12)}

UPRIGHT, UPSIDE_DOWN, SIDEWAYS = "upright", "upside_down", "sideways"

# train/test object seed ranges (disjoint)
TRAIN_SEEDS = range(0, 75)
TEST_SEEDS = range(75, 100)

DEFAULT_WORKSPACE = (np.array([0.0, 0.0, 0.0]), np.array([0.4, 0.4, 0.3]))


class SceneGenerationError(RuntimeError):
    """Raised when clutter placement runs out of retries; reseed and retry."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3) int, counter-clockwise seen from outside

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def center_of_mass(self) -> np.ndarray:
        t = self.triangles
        vol = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])) / 6.0
        return (vol[:, None] * t.sum(axis=1) / 4.0).sum(0) / vol.sum()

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def edge_use_counts(self) -> dict:
        counts: dict = {}
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_closed(self) -> bool:
        return all(c == 2 for c in self.edge_use_counts().values())

    @cached_property
    def hull(self) -> ConvexHull:
        return ConvexHull(self.vertices)

    @cached_property
    def resting_faces(self) -> list:
        return stable_faces(self)

    @cached_property
    def com(self) -> np.ndarray:
        return self.center_of_mass()


def _merge(*meshes: Mesh) -> Mesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def lathe(profile, segments: int = 24) -> Mesh:
    """Revolve a closed (r, z) profile about the z axis.

    The profile must start and end on the axis (r == 0) and run
    counter-clockwise in the (r, z) half-plane.
    """
    profile = np.asarray(profile, dtype=np.float64)
    if profile[0, 0] != 0 or profile[-1, 0] != 0:
        raise ValueError("profile must start and end on the axis")
    ring_prof = profile[1:-1]
    phi = 2 * np.pi * np.arange(segments) / segments
    c, s = np.cos(phi), np.sin(phi)
    verts = [np.array([[0.0, 0.0, profile[0, 1]]])]
    for r, z in ring_prof:
        verts.append(np.stack([r * c, r * s, np.full(segments, z)], axis=1))
    verts.append(np.array([[0.0, 0.0, profile[-1, 1]]]))
    verts = np.concatenate(verts)
    n_rings = len(ring_prof)
    ring = lambda k, j: 1 + k * segments + (j % segments)  # noqa: E731
    top = len(verts) - 1
    faces = []
    for j in range(segments):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for k in range(n_rings - 1):
        for j in range(segments):
            a0, a1 = ring(k, j), ring(k, j + 1)
            b0, b1 = ring(k + 1, j), ring(k + 1, j + 1)
            faces.append((a0, a1, b1))
            faces.append((a0, b1, b0))
    for j in range(segments):
        faces.append((top, ring(n_rings - 1, j), ring(n_rings - 1, j + 1)))
    mesh = Mesh(verts, np.array(faces, dtype=np.int64))
    if mesh.signed_volume() < 0:
        mesh = Mesh(verts, mesh.faces[:, ::-1].copy())
    return mesh


def torus_segment(center, major: float, minor: float, half_angle: float,
                  n_arc: int = 12, n_tube: int = 8) -> Mesh:
    """Closed tube swept along an arc in the xz-plane, ends capped."""
    center = np.asarray(center, float)
    th = np.linspace(-half_angle, half_angle, n_arc + 1)
    psi = 2 * np.pi * np.arange(n_tube) / n_tube
    verts = []
    for t in th:
        radial = np.array([np.cos(t), 0.0, np.sin(t)])
        p = center + major * radial
        ring = p + minor * (np.cos(psi)[:, None] * radial + np.sin(psi)[:, None] * np.array([0, 1.0, 0]))
        verts.append(ring)
    verts = np.concatenate(verts)
    idx = lambda a, b: a * n_tube + (b % n_tube)  # noqa: E731
    faces = []
    for a in range(n_arc):
        for b in range(n_tube):
            faces.append((idx(a, b), idx(a, b + 1), idx(a + 1, b + 1)))
            faces.append((idx(a, b), idx(a + 1, b + 1), idx(a + 1, b)))
    c0 = len(verts)
    c1 = c0 + 1
    ends = np.array([verts[:n_tube].mean(0), verts[-n_tube:].mean(0)])
    verts = np.concatenate([verts, ends])
    for b in range(n_tube):
        faces.append((c0, idx(0, b + 1), idx(0, b)))
        faces.append((c1, idx(n_arc, b), idx(n_arc, b + 1)))
    mesh = Mesh(verts, np.array(faces, dtype=np.int64))
    if mesh.signed_volume() < 0:
        mesh = Mesh(verts, mesh.faces[:, ::-1].copy())
    return mesh


@dataclass(frozen=True)
class RigidObject:
    category: str
    mesh: Mesh
    height: float
    pose: Pose = field(default_factory=Pose)
    id: int = 0
    shape_seed: int = 0
    params: dict = field(default_factory=dict, compare=False)

    def world_vertices(self) -> np.ndarray:
        return self.pose.apply(self.mesh.vertices)

    def world_triangles(self) -> np.ndarray:
        return self.world_vertices()[self.mesh.faces]

    def with_pose(self, pose: Pose) -> "RigidObject":
        return replace(self, pose=pose)

    @property
    def hull(self) -> ConvexHull:
        return self.mesh.hull

    @property
    def resting_faces(self) -> list:
        return self.mesh.resting_faces

    def bounding_sphere(self):
        v = self.world_vertices()
        c = 0.5 * (v.min(0) + v.max(0))
        return c, float(np.linalg.norm(v - c, axis=1).max())


def _check_height(category: str, height: float):
    lo, hi = HEIGHT_RANGE[category]
    if not (lo - 1e-12 <= height <= hi + 1e-12):
        raise ValueError(f"{category} height {height} outside [{lo}, {hi}] m")


def generate_bottle(seed: int, height: float, segments: int = 24) -> RigidObject:
    """Lathed bottle: straight body, curved shoulder, cylindrical neck."""
    _check_height(BOTTLE, height)
    rng = np.random.default_rng([int(seed), 0xB0771E])
    base_r = rng.uniform(0.02, 0.045)
    neck_r = base_r * rng.uniform(0.35, 0.70)
    body_h = height * rng.uniform(0.45, 0.62)
    shoulder_h = height * rng.uniform(0.10, 0.22)
    curve = rng.uniform(0.6, 2.0)
    prof = [(0.0, 0.0), (base_r, 0.0)]
    for f in (0.5, 1.0):
        prof.append((base_r, body_h * f))
    for u in np.linspace(0, 1, 6)[1:]:
        w = 0.5 * (1 - np.cos(np.pi * u ** curve))
        prof.append((base_r + (neck_r - base_r) * w, body_h + shoulder_h * u))
    prof.append((neck_r, height))
    prof.append((0.0, height))
    mesh = lathe(prof, segments)
    params = dict(base_radius=base_r, neck_radius=neck_r, body_height=body_h,
                  shoulder_height=shoulder_h)
    return RigidObject(BOTTLE, mesh, float(height), shape_seed=int(seed), params=params)


def generate_mug(seed: int, height: float, segments: int = 24) -> RigidObject:
    """Open-topped lathed shell with a torus-segment handle on the +x side."""
    _check_height(MUG, height)
    rng = np.random.default_rng([int(seed), 0x3C6])
    radius = rng.uniform(0.03, 0.042)
    wall = rng.uniform(0.003, 0.006)
    floor = rng.uniform(0.004, 0.008)
    prof = [(0.0, 0.0), (radius, 0.0), (radius, 0.5 * height), (radius, height),
            (radius - wall, height), (radius - wall, 0.5 * height),
            (radius - wall, floor), (0.0, floor)]
    body = lathe(prof, segments)
    tube = rng.uniform(0.004, 0.006)
    major = height * rng.uniform(0.26, 0.34)
    half = np.deg2rad(70.0)
    cx = radius - major * np.cos(half) - 0.5 * wall
    handle = torus_segment((cx, 0.0, 0.5 * height), major, tube, half)
    mesh = _merge(body, handle)
    params = dict(radius=radius, wall=wall, floor=floor, handle_major=major,
                  handle_tube=tube, handle_reach=cx + major + tube)
    return RigidObject(MUG, mesh, float(height), shape_seed=int(seed), params=params)


GENERATORS = {BOTTLE: generate_bottle, MUG: generate_mug}


# ---------------------------------------------------------------- resting poses

@dataclass(frozen=True)
class RestingFace:
    normal: np.ndarray  # outward, object frame
    offset: float
    polygon: np.ndarray  # (k, 3) vertices, object frame
    margin: float  # distance from projected COM to polygon boundary
    kind: str


def _face_margin(normal, polygon, com) -> float:
    # in-plane basis
    u = np.cross(normal, [1.0, 0, 0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    pts = np.stack([polygon @ u, polygon @ v], axis=1)
    q = np.array([com @ u, com @ v])
    ctr = pts.mean(0)
    order = np.argsort(np.arctan2(pts[:, 1] - ctr[1], pts[:, 0] - ctr[0]))
    pts = pts[order]
    margin = np.inf
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        e = b - a
        if np.linalg.norm(e) < 1e-12:
            continue
        # inward normal for CCW polygon
        nrm = np.array([-e[1], e[0]]) / np.linalg.norm(e)
        margin = min(margin, float((q - a) @ nrm))
    return margin


def stable_faces(mesh: Mesh, margin: float = 2e-3, class_cos: float = np.cos(np.deg2rad(30))):
    """Enumerate convex-hull faces the object can statically rest on."""
    hull = mesh.hull
    eq = hull.equations
    com = mesh.com
    used = np.zeros(len(eq), bool)
    faces = []
    for i in range(len(eq)):
        if used[i]:
            continue
        same = (np.abs(eq[:, :3] - eq[i, :3]).max(1) < 1e-7) & (np.abs(eq[:, 3] - eq[i, 3]) < 1e-8)
        used |= same
        vids = np.unique(hull.simplices[same].ravel())
        n = eq[i, :3] / np.linalg.norm(eq[i, :3])
        poly = mesh.vertices[vids]
        if len(poly) < 3:
            continue
        m = _face_margin(n, poly, com)
        if m <= margin:
            continue
        if n[2] < -class_cos:
            kind = UPRIGHT
        elif n[2] > class_cos:
            kind = UPSIDE_DOWN
        else:
            kind = SIDEWAYS
        faces.append(RestingFace(n, float(eq[i, 3]), poly, m, kind))
    return faces


def resting_rotation(face_normal) -> np.ndarray:
    return rotation_between(face_normal, [0.0, 0.0, -1.0])


def classify_rest(obj: RigidObject) -> str:
    up = obj.pose.rotation[:, 2]
    if up[2] > np.cos(np.deg2rad(30)):
        return UPRIGHT
    if up[2] < -np.cos(np.deg2rad(30)):
        return UPSIDE_DOWN
    return SIDEWAYS


def drop_to_table(obj: RigidObject, rotation: np.ndarray, xy, table_height: float) -> RigidObject:
    """Pose ``obj`` with ``rotation`` so its lowest vertex touches the table at ``xy`` (COM)."""
    v = obj.mesh.vertices @ rotation.T
    com = obj.mesh.com @ rotation.T
    t = np.array([xy[0] - com[0], xy[1] - com[1], table_height - v[:, 2].min()])
    return obj.with_pose(Pose(rotation, t))


def settle(obj: RigidObject, table_height: float) -> RigidObject:
    """Quasi-static settling: tip onto the stable face closest to facing down."""
    faces = obj.resting_faces
    world_n = np.array([obj.pose.rotation @ f.normal for f in faces])
    k = int(np.argmin(world_n[:, 2]))
    align = rotation_between(world_n[k], [0.0, 0.0, -1.0])
    rot = align @ obj.pose.rotation
    com = obj.pose.apply(obj.mesh.com)
    return drop_to_table(obj, rot, com[:2], table_height)


# ---------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Scene:
    objects: tuple
    table_height: float = 0.0
    workspace: tuple = DEFAULT_WORKSPACE
    rng_seed: int = 0
    category: str = BOTTLE

    def get(self, object_id: int) -> RigidObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def replace_object(self, obj: RigidObject) -> "Scene":
        objs = tuple(obj if o.id == obj.id else o for o in self.objects)
        return replace(self, objects=objs)

    def without(self, object_id: int) -> "Scene":
        return replace(self, objects=tuple(o for o in self.objects if o.id != object_id))

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.workspace
        return 0.5 * (np.asarray(lo) + np.asarray(hi))

    def to_record(self) -> dict:
        return {
            "category": self.category,
            "table_height": self.table_height,
            "rng_seed": int(self.rng_seed),
            "workspace": [np.asarray(w).tolist() for w in self.workspace],
            "objects": [{"id": o.id, "category": o.category, "shape_seed": o.shape_seed,
                         "height": o.height, "pose": o.pose.to_dict()} for o in self.objects],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        objs = []
        for o in rec["objects"]:
            base = GENERATORS[o["category"]](o["shape_seed"], o["height"])
            objs.append(replace(base, id=o["id"], pose=Pose.from_dict(o["pose"])))
        ws = tuple(np.array(w) for w in rec["workspace"])
        return cls(tuple(objs), rec["table_height"], ws, rec["rng_seed"], rec["category"])


def _inside_workspace(obj: RigidObject, workspace, table_height) -> bool:
    v = obj.world_vertices()
    lo, hi = workspace
    return bool(np.all(v[:, :2] >= lo[:2]) and np.all(v[:, :2] <= hi[:2])
                and v[:, 2].max() <= hi[2] and v[:, 2].min() >= table_height - 1e-9)


def _sample_rest(obj: RigidObject, rng, table_height, xy_lo, xy_hi, kind=None):
    faces = obj.resting_faces
    kinds = sorted({f.kind for f in faces}, key=[UPRIGHT, UPSIDE_DOWN, SIDEWAYS].index)
    if kind is None:
        kind = kinds[rng.integers(len(kinds))]
    pool = [f for f in faces if f.kind == kind]
    face = pool[rng.integers(len(pool))]
    rot = rot_z(rng.uniform(0, 2 * np.pi)) @ resting_rotation(face.normal)
    xy = rng.uniform(xy_lo, xy_hi)
    return drop_to_table(obj, rot, xy, table_height)


def _object_for(category, rng, object_seed, oid):
    lo, hi = HEIGHT_RANGE[category]
    height = float(rng.uniform(lo, hi))
    obj = GENERATORS[category](object_seed, height)
    return replace(obj, id=oid)


def spawn_isolation(category: str, object_seed: int, pose_seed: int, table_height: float = 0.0,
                    workspace=DEFAULT_WORKSPACE, kind: str | None = None,
                    height: float | None = None) -> Scene:
    """One object at rest in a random stable pose, position and yaw."""
    rng = np.random.default_rng([int(pose_seed), int(object_seed), 1])
    if height is None:
        obj = _object_for(category, rng, object_seed, 0)
    else:
        obj = GENERATORS[category](object_seed, height)
    lo, hi = (np.asarray(w, float) for w in workspace)
    ctr = 0.5 * (lo + hi)
    for _ in range(100):
        placed = _sample_rest(obj, rng, table_height, ctr[:2] - 0.08, ctr[:2] + 0.08, kind)
        if _inside_workspace(placed, (lo, hi), table_height):
            return Scene((placed,), table_height, (lo, hi), int(pose_seed), category)
    raise SceneGenerationError("could not place object inside workspace")


def _world_hull_eq(obj: RigidObject) -> np.ndarray:
    eq = obj.hull.equations
    n = eq[:, :3] @ obj.pose.rotation.T
    d = eq[:, 3] - n @ obj.pose.translation
    return np.column_stack([n, d])


def hulls_overlap(a: RigidObject, b: RigidObject, tol: float = 1e-6) -> bool:
    """True when the convex hulls share a point deeper than ``tol`` inside both."""
    ca, ra = a.bounding_sphere()
    cb, rb = b.bounding_sphere()
    if np.linalg.norm(ca - cb) > ra + rb:
        return False
    eq = np.concatenate([_world_hull_eq(a), _world_hull_eq(b)])
    # maximize s subject to n.x + d + s <= 0
    c = np.array([0, 0, 0, -1.0])
    a_ub = np.column_stack([eq[:, :3], np.ones(len(eq))])
    res = linprog(c, A_ub=a_ub, b_ub=-eq[:, 3], bounds=[(None, None)] * 3 + [(None, 1.0)],
                  method="highs")
    return bool(res.status == 0 and -res.fun > tol)


def spawn_clutter(category: str, n: int = 7, object_seeds=None, pose_seed: int = 0,
                  table_height: float = 0.0, workspace=DEFAULT_WORKSPACE,
                  max_retries: int = 100) -> Scene:
    """``n`` objects dropped one after another into a pile near the table center."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if object_seeds is None:
        object_seeds = list(range(n))
    object_seeds = list(object_seeds)
    if n == 1:
        return spawn_isolation(category, object_seeds[0], pose_seed, table_height, workspace)
    if len(object_seeds) < n:
        raise ValueError("need one object seed per object")
    rng = np.random.default_rng([int(pose_seed), 7, n])
    lo, hi = (np.asarray(w, float) for w in workspace)
    ctr = 0.5 * (lo + hi)
    placed: list = []
    for oid, seed in enumerate(object_seeds[:n]):
        obj = _object_for(category, rng, seed, oid)
        for _ in range(max_retries):
            cand = _sample_rest(obj, rng, table_height, ctr[:2] - 0.11, ctr[:2] + 0.11)
            if not _inside_workspace(cand, (lo, hi), table_height):
                continue
            if any(hulls_overlap(cand, o) for o in placed):
                continue
            placed.append(cand)
            break
        else:
            raise SceneGenerationError(f"could not place object {oid} after {max_retries} tries")
    return Scene(tuple(placed), table_height, (lo, hi), int(pose_seed), category)


def settle_state(scene: Scene, object_id: int):
    """(clearance above the table, tilt of the canonical up axis) for one object."""
    obj = scene.get(object_id)
    clearance = float(obj.world_vertices()[:, 2].min() - scene.table_height)
    up = obj.pose.rotation[:, 2]
    tilt = float(np.arccos(np.clip(up[2], -1.0, 1.0)))
    return clearance, tilt


# ------------------------------------------------------------------------ export

def write_stl(path, meshes_or_objects, name: str = "scene"):
    """ASCII STL of one or more objects (world frame) or raw meshes."""
    lines = [f"solid {name}"]
    for item in meshes_or_objects:
        tris = item.world_triangles() if isinstance(item, RigidObject) else item.triangles
        n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
        for nn, t in zip(n, tris):
            lines.append(f"  facet normal {nn[0]:.6e} {nn[1]:.6e} {nn[2]:.6e}")
            lines.append("    outer loop")
            for v in t:
                lines.append(f"      vertex {v[0]:.6e} {v[1]:.6e} {v[2]:.6e}")
            lines.append("    endloop")
            lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def mesh_digest(obj: RigidObject) -> bytes:
    return struct.pack("<I", len(obj.mesh.vertices)) + obj.world_vertices().tobytes()

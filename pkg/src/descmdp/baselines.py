"""Comparison policies: uniform random, and a cylinder shape-primitive heuristic.

The shape-primitive policy segments the visible cloud with k-means, fits a
cylinder to the most isolated cluster with MLESAC, grasps near the middle
with the hand axis along the cylinder, and places so that the half holding
fewer points ends up on top.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans

from . import mdp
from .grasping import estimate_normals

log = logging.getLogger(__name__)


class FitError(ValueError):
    """Cylinder fitting failed (degenerate or too few points)."""


# ------------------------------------------------------------------ random

def random_policy(actions, rng):
    if not actions:
        raise ValueError("no legal actions")
    return actions[int(rng.integers(len(actions)))]


def random_agent(env, state, legal, rng):
    return random_policy(legal, rng)


# -------------------------------------------------------------- clustering

def kmeans_segment(points, k: int, seed: int = 0, max_iter: int = 100, shift_tol: float = 1e-6):
    """Lloyd k-means with k-means++ seeding; returns (labels, centroids).

    Stops when the total centroid movement falls below ``shift_tol`` meters.
    """
    points = np.asarray(points, float)
    if k < 1 or len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    if k == 1:
        return np.zeros(len(points), int), points.mean(0, keepdims=True)
    # sklearn's tol is relative to the mean per-axis variance of the data
    var = float(np.mean(np.var(points, axis=0)))
    tol = shift_tol ** 2 / var if var > 0 else 0.0
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=tol,
                random_state=seed, algorithm="lloyd").fit(points)
    return km.labels_.astype(int), km.cluster_centers_


def most_isolated_cluster(centroids) -> int:
    """Index with the largest distance to its nearest other centroid; ties to the lowest index."""
    c = np.asarray(centroids, float)
    if len(c) == 0:
        raise ValueError("no clusters")
    if len(c) == 1:
        return 0
    d = np.linalg.norm(c[:, None] - c[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return int(np.argmax(d.min(axis=1)))


# --------------------------------------------------------------- cylinders

@dataclass(frozen=True)
class CylinderFit:
    axis_point: np.ndarray  # midpoint of the inlier extent on the axis
    axis_dir: np.ndarray
    radius: float
    length: float
    inlier_count: int
    inlier_fraction: float
    inliers: np.ndarray  # bool mask over the fitted points

    def residuals(self, points) -> np.ndarray:
        return np.abs(_axis_distance(points, self.axis_point, self.axis_dir) - self.radius)

    def axial(self, points) -> np.ndarray:
        return (np.asarray(points) - self.axis_point) @ self.axis_dir


def _axis_distance(points, c, a) -> np.ndarray:
    rel = np.asarray(points) - c
    return np.linalg.norm(rel - np.outer(rel @ a, a), axis=1)


def _orthobasis(a):
    h = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(a, h)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def _hypothesis(p1, n1, p2, n2, max_radius):
    a = np.cross(n1, n2)
    na = np.linalg.norm(a)
    if na < 0.05:
        return None
    a /= na
    u, v = _orthobasis(a)
    # intersect the two normal lines inside the plane orthogonal to the axis
    q1, q2 = np.array([p1 @ u, p1 @ v]), np.array([p2 @ u, p2 @ v])
    m1, m2 = np.array([n1 @ u, n1 @ v]), np.array([n2 @ u, n2 @ v])
    A = np.column_stack([m1, -m2])
    if abs(np.linalg.det(A)) < 1e-9:
        return None
    t = np.linalg.solve(A, q2 - q1)
    c2 = q1 + t[0] * m1
    r = 0.5 * (np.linalg.norm(q1 - c2) + np.linalg.norm(q2 - c2))
    if not 1e-3 < r < max_radius:
        return None
    c = c2[0] * u + c2[1] * v + (p1 @ a) * a
    return c, a, r


def _mlesac_cost(res, sigma, span, em_steps: int = 5):
    """Negative log-likelihood under an inlier Gaussian / outlier uniform mixture."""
    p_in = np.exp(-0.5 * (res / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)
    p_out = 1.0 / span
    mix = 0.5
    for _ in range(em_steps):
        w = mix * p_in / (mix * p_in + (1 - mix) * p_out)
        mix = float(np.clip(w.mean(), 1e-6, 1 - 1e-6))
    return float(-np.sum(np.log(mix * p_in + (1 - mix) * p_out)))


def _axial_extent(t, bin_width: float):
    """Extent of the densest connected run of axial coordinates (ignores sparse stragglers)."""
    lo, hi = t.min(), t.max()
    nb = max(1, int(np.ceil((hi - lo) / bin_width)))
    counts, edges = np.histogram(t, bins=nb, range=(lo, lo + nb * bin_width))
    good = counts >= 0.2 * np.median(counts[counts > 0])
    runs, start = [], None
    for i, g in enumerate(np.append(good, False)):
        if g and start is None:
            start = i
        elif not g and start is not None:
            runs.append((int(counts[start:i].sum()), start, i - 1))
            start = None
    _, i0, i1 = max(runs, key=lambda r: (r[0], -r[1]))
    sel = t[(t >= edges[i0]) & (t <= edges[i1 + 1])]
    return float(sel.min()), float(sel.max())


class MLESACCylinder(BaseEstimator):
    """Robust cylinder fit: two-point hypotheses from normals, MLESAC scoring, least-squares refine."""

    def __init__(self, iterations: int = 500, inlier_tol: float = 0.005, seed: int = 0,
                 normal_radius: float = 0.01, max_radius: float = 0.2):
        self.iterations = iterations
        self.inlier_tol = inlier_tol
        self.seed = seed
        self.normal_radius = normal_radius
        self.max_radius = max_radius

    def fit(self, X, y=None, normals=None):
        pts = np.asarray(X, float)
        if len(pts) < 6:
            raise FitError("cylinder fit needs at least 6 points")
        centered = pts - pts.mean(0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] < 1e-9 * max(1.0, sv[0]):
            raise FitError("points are collinear")
        if normals is None:
            normals = estimate_normals(pts, self.normal_radius)
        rng = np.random.default_rng(self.seed)
        sigma = self.inlier_tol / 2
        span = float(np.linalg.norm(pts.max(0) - pts.min(0))) + self.inlier_tol
        best, best_cost = None, np.inf
        for _ in range(self.iterations):
            i, j = rng.choice(len(pts), size=2, replace=False)
            hyp = _hypothesis(pts[i], normals[i], pts[j], normals[j], self.max_radius)
            if hyp is None:
                continue
            c, a, r = hyp
            cost = _mlesac_cost(np.abs(_axis_distance(pts, c, a) - r), sigma, span)
            if cost < best_cost:
                best, best_cost = hyp, cost
        if best is None:
            raise FitError("no valid cylinder hypothesis")
        c, a, r = self._refine(pts, *best)
        res = np.abs(_axis_distance(pts, c, a) - r)
        inl = res <= self.inlier_tol
        if inl.sum() < 2:
            raise FitError("refined cylinder has no inliers")
        t = (pts[inl] - c) @ a
        t0, t1 = _axial_extent(t, max(self.inlier_tol / 2, 1e-4))
        mid = c + 0.5 * (t0 + t1) * a
        self.fit_ = CylinderFit(mid, a, float(r), float(t1 - t0), int(inl.sum()),
                                float(inl.mean()), inl)
        return self

    def _refine(self, pts, c, a, r, rounds: int = 3):
        for _ in range(rounds):
            inl = np.abs(_axis_distance(pts, c, a) - r) <= self.inlier_tol
            if inl.sum() < 6:
                break
            sub = pts[inl]
            u, v = _orthobasis(a)
            x0 = np.array([0.0, 0.0, 0.0, 0.0, r])

            def resid(x):
                ax = a + x[0] * u + x[1] * v
                ax /= np.linalg.norm(ax)
                cc = c + x[2] * u + x[3] * v
                return _axis_distance(sub, cc, ax) - x[4]

            sol = least_squares(resid, x0, method="lm")
            x = sol.x
            a = a + x[0] * u + x[1] * v
            a /= np.linalg.norm(a)
            c = c + x[2] * u + x[3] * v
            r = abs(float(x[4]))
        return c, a, r


def fit_cylinder(cluster, iterations: int = 500, inlier_tol: float = 0.005, seed: int = 0,
                 normals=None) -> CylinderFit:
    return MLESACCylinder(iterations, inlier_tol, seed).fit(cluster, normals=normals).fit_


# ---------------------------------------------------------- shape primitive

ALIGN_MIN = 0.9
PLACE_CLEARANCE = 0.01


def up_direction(fit: CylinderFit, points) -> np.ndarray:
    """Axis direction pointing into the half holding fewer points."""
    t = fit.axial(points)
    return fit.axis_dir if np.sum(t > 0) < np.sum(t < 0) else -fit.axis_dir


def choose_grasp(candidates, fit: CylinderFit, align_min: float = ALIGN_MIN) -> int:
    """Hand axis aligned with the cylinder first, then nearest to its midpoint."""
    if not candidates:
        raise ValueError("no candidates")
    z = np.array([c.pose.rotation[:, 2] for c in candidates])
    align = np.abs(z @ fit.axis_dir)
    dist = np.array([np.linalg.norm(c.pose.translation - fit.axis_point) for c in candidates])
    pool = np.flatnonzero(align > align_min)
    if len(pool) == 0:
        pool = np.flatnonzero(align >= align.max() - 1e-12)
    return int(pool[np.argmin(dist[pool])])


def choose_place(hand_pose, fit: CylinderFit, up, place_set: mdp.PlaceSet, table_height: float,
                 clearance: float = PLACE_CLEARANCE) -> int:
    """Final place that turns the estimated up axis upward, at a height that seats the base."""
    up_hand = hand_pose.rotation.T @ up
    bottom = fit.axis_point - 0.5 * fit.length * up
    target = float((hand_pose.translation - bottom) @ up) + clearance
    n_temp = place_set.n_temp
    best, key = None, None
    for i, p in enumerate(place_set.final_places):
        upness = float((p.rotation @ up_hand)[2])
        k = (-round(upness, 6), abs(p.translation[2] - table_height - target))
        if key is None or k < key:
            best, key = i, k
    return n_temp + best


class ShapePrimitivePolicy:
    """Stateful across one episode: the cylinder fitted at grasp time is reused at place time."""

    def __init__(self, k: int = 1, iterations: int = 200, inlier_tol: float = 0.005, seed: int = 0):
        self.k = k
        self.iterations = iterations
        self.inlier_tol = inlier_tol
        self.seed = seed
        self.fit = None
        self.up = None
        self.fallbacks = 0

    def _fit_scene(self, env):
        pts = env.observation.cloud.visible_points
        labels, cents = kmeans_segment(pts, min(self.k, len(pts)), self.seed)
        cluster = pts[labels == most_isolated_cluster(cents)]
        fit = fit_cylinder(cluster, self.iterations, self.inlier_tol, self.seed)
        return fit, up_direction(fit, cluster)

    def __call__(self, env, state, legal, rng):
        if not legal:
            raise ValueError("no legal actions")
        try:
            if legal[0].kind == mdp.REACH_GRASP:
                self.fit, self.up = self._fit_scene(env)
                return legal[choose_grasp(env.candidates, self.fit)]
            if self.fit is None:
                raise FitError("no cylinder from the grasp step")
            idx = choose_place(env.held_candidate.pose, self.fit, self.up, env.place_set,
                               env.table_height)
            for a in legal:
                if a.place_index == idx:
                    return a
            raise FitError("chosen place is not legal")
        except (FitError, ValueError) as exc:
            log.info("shape primitive fallback to random: %s", exc)
            self.fallbacks += 1
            return random_policy(legal, rng)


def shape_primitive_policy(k: int = 1, seed: int = 0) -> ShapePrimitivePolicy:
    return ShapePrimitivePolicy(k=k, seed=seed)

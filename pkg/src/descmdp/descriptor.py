"""Reach-grasp descriptors: the cloud cropped to a hand-aligned cuboid, and its image encoding.

The image is stored height x width x channels.  Views are taken along the
hand-frame x, y and z axes; each view contributes four channels in the order
visible density, visible mean depth, occluded density, occluded mean depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import Pose
from .sensing import PointCloud

VIEW_NAMES = ("x", "y", "z")
CHANNEL_NAMES = ("visible_density", "visible_depth", "occluded_density", "occluded_depth")
# image (row, col) axes for each view direction
_VIEW_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


@dataclass(frozen=True)
class DescriptorConfig:
    cuboid: tuple = (0.10, 0.10, 0.20)
    image_size: int = 60
    channels_per_view: int = 4

    def __post_init__(self):
        cub = tuple(float(v) for v in self.cuboid)
        if len(cub) != 3 or min(cub) <= 0:
            raise ValueError(f"cuboid dims must be three positive lengths, got {self.cuboid}")
        if int(self.image_size) < 8:
            raise ValueError("image_size must be at least 8")
        if self.channels_per_view != 4:
            raise ValueError("only the four-channel view encoding is implemented")
        object.__setattr__(self, "cuboid", cub)
        object.__setattr__(self, "image_size", int(self.image_size))

    @property
    def n_channels(self) -> int:
        return 3 * self.channels_per_view

    @property
    def shape(self) -> tuple:
        return (self.image_size, self.image_size, self.n_channels)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.linalg.norm(self.cuboid))

    def with_image_size(self, size: int) -> "DescriptorConfig":
        return DescriptorConfig(self.cuboid, size, self.channels_per_view)

    def to_dict(self) -> dict:
        return {"cuboid": list(self.cuboid), "image_size": self.image_size,
                "channels_per_view": self.channels_per_view}

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorConfig":
        return cls(tuple(d["cuboid"]), d["image_size"], d.get("channels_per_view", 4))


STANDARD = DescriptorConfig((0.10, 0.10, 0.20))
LARGE_VOLUME = DescriptorConfig((0.20, 0.20, 0.40))
PRESETS = {"standard": STANDARD, "lv": LARGE_VOLUME}


def preset(name: str, image_size: int | None = None) -> DescriptorConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown descriptor preset {name!r}") from None
    return cfg if image_size is None else cfg.with_image_size(image_size)


@dataclass(frozen=True)
class Descriptor:
    points: np.ndarray  # (n, 3) hand-frame coordinates
    visible: np.ndarray  # (n,) bool
    source_pose: Pose
    config: DescriptorConfig

    def __len__(self):
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


def inside_cuboid(q, cuboid) -> np.ndarray:
    half = 0.5 * np.asarray(cuboid)
    return np.all(np.abs(q) <= half, axis=1)


def extract(cloud: PointCloud, T: Pose, config: DescriptorConfig = STANDARD,
            index: cKDTree | None = None) -> Descriptor:
    """Points of ``cloud`` expressed in frame ``T`` and cropped to the cuboid.

    ``index`` is an optional KD-tree over ``cloud.points`` used to skip far points.
    """
    pts, vis = cloud.points, cloud.visible
    if index is not None and len(pts):
        near = index.query_ball_point(T.translation, config.half_diagonal + 1e-9)
        near = np.sort(np.asarray(near, dtype=np.int64))
        pts, vis = pts[near], vis[near]
    q = T.apply_inverse(pts)
    keep = inside_cuboid(q, config.cuboid)
    return Descriptor(q[keep], np.asarray(vis[keep], bool), T, config)


def _bins(u, extent, size):
    """Floor binning of coordinates in [-extent/2, extent/2]; the right edge joins the last bin."""
    b = np.floor((u / extent + 0.5) * size).astype(np.int64)
    return np.clip(b, 0, size - 1)


def encode_image(desc: Descriptor, dtype=np.float32) -> np.ndarray:
    cfg = desc.config
    S = cfg.image_size
    out = np.zeros(cfg.shape, dtype=dtype)
    if desc.empty:
        return out
    cub = np.asarray(cfg.cuboid)
    bins = [_bins(desc.points[:, k], cub[k], S) for k in range(3)]
    depth = np.clip(desc.points / cub + 0.5, 0.0, 1.0)
    for view in range(3):
        r_ax, c_ax = _VIEW_AXES[view]
        flat = bins[r_ax] * S + bins[c_ax]
        for j, mask in enumerate((desc.visible, ~desc.visible)):
            if not mask.any():
                continue
            counts = np.bincount(flat[mask], minlength=S * S)
            sums = np.bincount(flat[mask], weights=depth[mask, view], minlength=S * S)
            hit = counts > 0
            dens = counts / counts.max()
            mean = np.zeros(S * S)
            mean[hit] = sums[hit] / counts[hit]
            ch = view * cfg.channels_per_view + 2 * j
            out[:, :, ch] = dens.reshape(S, S)
            out[:, :, ch + 1] = np.clip(mean, 0.0, 1.0).reshape(S, S)
    return out


def channel_name(ch: int) -> str:
    return f"view_{VIEW_NAMES[ch // 4]}_{CHANNEL_NAMES[ch % 4]}"


def write_pgm(path, channel: np.ndarray) -> None:
    """Binary 8-bit PGM of a single [0, 1] channel."""
    img = np.round(np.clip(channel, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def dump_image(image: np.ndarray, out_dir, prefix: str = "descriptor") -> list:
    """Write every channel as ``<prefix>_<view>_<channel>.pgm``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ch in range(image.shape[2]):
        p = out_dir / f"{prefix}_{channel_name(ch)}.pgm"
        write_pgm(p, image[:, :, ch])
        paths.append(p)
    return paths


class DescriptorEncoder(TransformerMixin, BaseEstimator):
    """Maps (cloud, pose) pairs to stacked descriptor images.

    Stateless: ``fit`` only validates the configuration.  ``transform`` accepts
    either a sequence of ``Descriptor`` objects or a cloud plus list of poses
    via :meth:`encode_poses`.
    """

    def __init__(self, cuboid=(0.10, 0.10, 0.20), image_size: int = 60):
        self.cuboid = cuboid
        self.image_size = image_size

    @property
    def config_(self) -> DescriptorConfig:
        return DescriptorConfig(tuple(self.cuboid), self.image_size)

    def fit(self, X=None, y=None):
        self.n_channels_ = self.config_.n_channels
        return self

    def transform(self, X) -> np.ndarray:
        cfg = self.config_
        out = np.zeros((len(X),) + cfg.shape, dtype=np.float32)
        for i, d in enumerate(X):
            if d.config != cfg:
                d = Descriptor(d.points, d.visible, d.source_pose, cfg)
                keep = inside_cuboid(d.points, cfg.cuboid)
                d = Descriptor(d.points[keep], d.visible[keep], d.source_pose, cfg)
            out[i] = encode_image(d)
        return out

    def encode_poses(self, cloud: PointCloud, poses) -> np.ndarray:
        cfg = self.config_
        index = cKDTree(cloud.points) if len(cloud.points) else None
        return self.transform([extract(cloud, p, cfg, index) for p in poses])

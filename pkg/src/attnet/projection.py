"""Spherical range-image projection of LiDAR point clouds."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, EmptyCloudError, EmptyImageError, ParseError
from .tensor import Tensor

FILL_VALUE = -1.0
CHANNELS = ("range", "x", "y", "z", "remission")
ARNG_MAGIC = b"ARNG"
ARNG_VERSION = 1
_ARNG_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ProjectionConfig:
    """Image size and vertical field of view (radians, ``fov_down`` stored positive)."""

    width: int = 900
    height: int = 64
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.height}x{self.width}")
        if self.fov <= 0:
            raise ConfigError(f"total vertical field of view must be positive, got {self.fov}")

    @property
    def fov(self):
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, width=900, height=64, fov_up=3.0, fov_down=25.0):
        return cls(int(width), int(height), math.radians(fov_up), math.radians(fov_down))


@dataclass
class RangeImage:
    """``data`` is ``[5, h, w]`` float32 with channels (range, x, y, z, remission)."""

    data: np.ndarray
    valid_mask: np.ndarray
    frame_id: int = 0

    @property
    def tensor(self):
        return Tensor(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def valid_fraction(self):
        return float(self.valid_mask.mean())


def pixel_coordinates(xyz, config):
    """Continuous ``(u, v)`` image coordinates and elevation for ``(n, 3)`` points."""
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.sqrt((xyz * xyz).sum(axis=1))
    azimuth = np.arctan2(xyz[:, 1], xyz[:, 0])
    elevation = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    u = 0.5 * (1.0 - azimuth / np.pi) * config.width
    v = (1.0 - (elevation + config.fov_up) / config.fov) * config.height
    return u, v, elevation, r


def project(cloud, config=None):
    """Project ``cloud`` to a :class:`RangeImage`.

    Each pixel keeps its closest point; equal ranges are resolved by the
    point's coordinates and remission, so the image does not depend on
    the order of the input points.
    """
    config = config or ProjectionConfig()
    pts = np.asarray(cloud.points)
    if len(pts) == 0:
        raise EmptyCloudError("cannot project an empty cloud")
    u, v, elevation, r = pixel_coordinates(pts[:, :3], config)
    if not (r > 0).all():
        raise ConfigError("every point must have positive range")
    inside = (elevation >= -config.fov_down) & (elevation <= config.fov_up)
    if not inside.any():
        raise EmptyImageError(f"frame {cloud.frame_id}: every point lies outside the vertical field of view")
    pts, u, v, r = pts[inside], u[inside], v[inside], r[inside]
    col = np.clip(np.floor(u).astype(np.int64), 0, config.width - 1)
    row = np.clip(np.floor(v).astype(np.int64), 0, config.height - 1)
    pixel = row * config.width + col

    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], r, pixel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    keep = order[first]

    h, w = config.height, config.width
    data = np.full((5, h * w), FILL_VALUE, dtype=np.float32)
    data[0, pixel[keep]] = r[keep]
    data[1:, pixel[keep]] = pts[keep].T
    mask = np.zeros(h * w, dtype=bool)
    mask[pixel[keep]] = True
    return RangeImage(data.reshape(5, h, w), mask.reshape(h, w), frame_id=cloud.frame_id)


def project_many(clouds, config=None):
    """Stack projections into a ``[n, 5, h, w]`` float32 array."""
    return np.stack([project(c, config).data for c in clouds])


def yaw_shift_reference(image, columns):
    """Circularly shift every channel by ``columns`` along the width."""
    return RangeImage(
        np.roll(image.data, columns, axis=2),
        np.roll(image.valid_mask, columns, axis=1),
        frame_id=image.frame_id,
    )


def rotate_yaw(cloud, angle):
    """Rotate a cloud about the vertical axis by ``angle`` radians."""
    from .data import PointCloud

    c, s = math.cos(angle), math.sin(angle)
    pts = cloud.points.astype(np.float64)
    x, y = pts[:, 0], pts[:, 1]
    out = pts.copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return PointCloud(out, cloud.frame_id, cloud.landmark_ids)


def save_range_image(path, image):
    _, h, w = image.data.shape
    with open(path, "wb") as fh:
        fh.write(_ARNG_HEADER.pack(ARNG_MAGIC, ARNG_VERSION, h, w))
        fh.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())


def load_range_image(path):
    raw = Path(path).read_bytes()
    if len(raw) < _ARNG_HEADER.size:
        raise ParseError("truncated range-image header", offset=len(raw))
    magic, version, h, w = _ARNG_HEADER.unpack_from(raw)
    if magic != ARNG_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != ARNG_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    expected = _ARNG_HEADER.size + 5 * h * w * 4
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=_ARNG_HEADER.size).reshape(5, h, w).astype(np.float32)
    return RangeImage(data, data[0] > 0)

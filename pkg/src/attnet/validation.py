"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numpy as np

from .data import PointCloud
from .exceptions import DimensionError


def check_point_cloud(cloud, frame_id=0):
    """Coerce a PointCloud or an ``(n, 3|4)`` array into a :class:`PointCloud`."""
    if isinstance(cloud, PointCloud):
        return cloud
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise DimensionError(f"point array must be (n, 3) or (n, 4), got {arr.shape}")
    if arr.shape[1] == 3:
        arr = np.column_stack([arr, np.zeros(len(arr))])
    if not np.isfinite(arr).all():
        raise ValueError("point cloud contains non-finite values")
    return PointCloud(arr, frame_id=frame_id)


def check_clouds(X):
    return [check_point_cloud(c, i) for i, c in enumerate(X)]


def check_positions(y, n_frames):
    pos = np.asarray(y, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] not in (2, 3):
        raise DimensionError(f"positions must be (n, 2) or (n, 3), got {pos.shape}")
    if len(pos) != n_frames:
        raise DimensionError(f"{len(pos)} positions for {n_frames} clouds")
    if pos.shape[1] == 2:
        pos = np.column_stack([pos, np.zeros(len(pos))])
    if not np.isfinite(pos).all():
        raise ValueError("positions contain non-finite values")
    return pos


def check_descriptors(X, dim=None):
    arr = np.asarray(getattr(X, "values", X), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise DimensionError(f"descriptors must be (n, m), got {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"descriptor length {arr.shape[1]} != expected {dim}")
    if not np.isfinite(arr).all():
        raise ValueError("descriptors contain non-finite values")
    return arr

"""KITTI odometry ingestion, loop ground truth, pair sampling and synthetic courses."""

from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, EmptyCloudError, ParseError, SamplingError

logger = logging.getLogger(__name__)

RECORD_BYTES = 16
NEGATIVE_MIN_DISTANCE = 20.0


@dataclass
class PointCloud:
    """One LiDAR sweep: ``points`` is ``(n, 4)`` float32 ``(x, y, z, remission)``."""

    points: np.ndarray
    frame_id: int = 0
    landmark_ids: np.ndarray | None = None
    dropped_nonfinite: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self):
        return len(self.points)

    @property
    def ranges(self):
        xyz = self.points[:, :3].astype(np.float64)
        return np.sqrt((xyz * xyz).sum(axis=1))


@dataclass
class Trajectory:
    positions: np.ndarray
    frame_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.frame_ids is None:
            self.frame_ids = np.arange(len(self.positions), dtype=np.int64)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        if len(self.frame_ids) != len(self.positions):
            raise ConfigError(
                f"{len(self.frame_ids)} frame ids for {len(self.positions)} positions"
            )

    def __len__(self):
        return len(self.positions)

    def translated(self, offset):
        return Trajectory(self.positions + np.asarray(offset, dtype=np.float64), self.frame_ids.copy())


@dataclass(frozen=True)
class LoopGroundTruth:
    """Query frames and, for each, the earlier frames within ``r_th`` metres."""

    r_th: float
    min_frame_gap: int
    queries: tuple
    loops: dict
    num_frames: int = 0

    @property
    def is_empty(self):
        return not self.queries

    def is_loop(self, query_id, reference_id):
        return reference_id in self.loops.get(query_id, ())


@dataclass(frozen=True)
class PairSample:
    query_id: int
    other_id: int
    label: str  # "positive" | "negative"


@dataclass
class Sequence:
    """A named sequence of sweeps with aligned trajectory."""

    name: str
    clouds: list
    trajectory: Trajectory

    def __post_init__(self):
        if len(self.clouds) != len(self.trajectory):
            raise ConfigError(
                f"sequence {self.name!r}: {len(self.clouds)} scans but {len(self.trajectory)} poses"
            )


# --------------------------------------------------------------------- KITTI


def load_kitti_scan(path, frame_id=None):
    """Parse a Velodyne ``.bin`` scan (little-endian float32 x, y, z, remission)."""
    path = Path(path)
    raw = path.read_bytes()
    if frame_id is None:
        frame_id = int(path.stem) if path.stem.isdigit() else 0
    return parse_scan_bytes(raw, frame_id)


def parse_scan_bytes(raw, frame_id=0):
    if len(raw) == 0:
        raise EmptyCloudError("scan file is empty", offset=0)
    if len(raw) % RECORD_BYTES:
        cut = len(raw) - len(raw) % RECORD_BYTES
        raise ParseError(
            f"truncated record: {len(raw)} bytes is not a multiple of {RECORD_BYTES}", offset=cut
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(pts).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        warnings.warn(f"frame {frame_id}: dropped {dropped} non-finite records", stacklevel=3)
    pts = pts[finite]
    xyz = pts[:, :3].astype(np.float64)
    pts = pts[(xyz * xyz).sum(axis=1) > 0]
    if len(pts) == 0:
        raise EmptyCloudError(f"frame {frame_id}: no valid points", offset=0)
    return PointCloud(pts, frame_id=frame_id, dropped_nonfinite=dropped)


def write_kitti_scan(path, cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def load_poses(path):
    """Read a KITTI pose file: 12 reals per line, a row-major 3x4 matrix."""
    try:
        text = Path(path).read_bytes().decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("pose file is not ASCII text", offset=exc.start) from None
    lines = text.split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    positions = []
    for lineno, line in enumerate(lines, start=1):
        fields_ = line.split()
        if len(fields_) != 12:
            raise ParseError(f"expected 12 fields, found {len(fields_)}", line=lineno)
        try:
            values = [float(v) for v in fields_]
        except ValueError:
            raise ParseError("non-numeric field", line=lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite field", line=lineno)
        positions.append((values[3], values[7], values[11]))
    return Trajectory(np.array(positions, dtype=np.float64).reshape(-1, 3))


def write_poses(path, positions, rotations=None):
    """Write positions (and optional 3x3 rotations) as KITTI pose lines."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    out = []
    for i, p in enumerate(positions):
        rot = np.eye(3) if rotations is None else np.asarray(rotations[i])
        mat = np.hstack([rot, p[:, None]])
        out.append(" ".join(repr(float(v)) for v in mat.reshape(-1)))
    Path(path).write_text("\n".join(out) + "\n")


def normalize_remission(clouds, percentile=99.0):
    """Clamp remission at the sequence-wide percentile and rescale to [0, 1]."""
    if not clouds:
        return clouds
    values = np.concatenate([c.points[:, 3] for c in clouds])
    top = float(np.percentile(values, percentile))
    out = []
    for c in clouds:
        pts = c.points.copy()
        if top > 0:
            pts[:, 3] = np.clip(pts[:, 3] / top, 0.0, 1.0)
        else:
            pts[:, 3] = 0.0
        out.append(PointCloud(pts, c.frame_id, c.landmark_ids, c.dropped_nonfinite))
    return out


def data_root(root=None):
    root = root or os.environ.get("ATTNET_DATA_ROOT")
    if not root:
        raise ConfigError("no dataset root given and ATTNET_DATA_ROOT is unset")
    return Path(root)


def sequence_paths(root, name):
    root = Path(root)
    return root / "sequences" / name / "velodyne", root / "poses" / f"{name}.txt"


def load_sequence(root, name, normalize=True, limit=None):
    scan_dir, pose_file = sequence_paths(root, name)
    trajectory = load_poses(pose_file)
    files = sorted(scan_dir.glob("*.bin"))
    if limit is not None:
        files = files[:limit]
        trajectory = Trajectory(trajectory.positions[:limit], trajectory.frame_ids[:limit])
    clouds = [load_kitti_scan(f, frame_id=i) for i, f in enumerate(files)]
    if normalize:
        clouds = normalize_remission(clouds)
    return Sequence(name, clouds, trajectory)


def save_sequence(root, sequence):
    scan_dir, pose_file = sequence_paths(root, sequence.name)
    scan_dir.mkdir(parents=True, exist_ok=True)
    pose_file.parent.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(sequence.clouds):
        write_kitti_scan(scan_dir / f"{i:06d}.bin", cloud)
    write_poses(pose_file, sequence.trajectory.positions)


# -------------------------------------------------------------- ground truth


def build_ground_truth(traj, r_th=6.0, min_frame_gap=100, chunk=512):
    """Loop labels: reference ``r`` counts for query ``q`` iff it lies at least
    ``min_frame_gap`` frames earlier and ``|P_q - P_r| < r_th``."""
    n = len(traj)
    if n == 0:
        raise ConfigError("trajectory is empty")
    if min_frame_gap < 1:
        raise ConfigError(f"min_frame_gap must be >= 1, got {min_frame_gap}")
    if r_th <= 0:
        raise ConfigError(f"r_th must be positive, got {r_th}")
    pos = traj.positions
    ids = traj.frame_ids
    loops = {}
    if min_frame_gap >= n:
        warnings.warn(
            f"min_frame_gap {min_frame_gap} >= trajectory length {n}: ground truth is empty",
            stacklevel=2,
        )
    for start in range(min_frame_gap, n, chunk):
        stop = min(n, start + chunk)
        limit = stop - min_frame_gap
        diff = pos[start:stop, None, :] - pos[None, :limit, :]
        close = np.sqrt((diff * diff).sum(axis=-1)) < r_th
        allowed = np.arange(limit)[None, :] <= (np.arange(start, stop) - min_frame_gap)[:, None]
        hits = close & allowed
        for k in np.flatnonzero(hits.any(axis=1)):
            loops[int(ids[start + k])] = frozenset(int(v) for v in ids[np.flatnonzero(hits[k])])
    return LoopGroundTruth(
        r_th=float(r_th),
        min_frame_gap=int(min_frame_gap),
        queries=tuple(sorted(loops)),
        loops=loops,
        num_frames=n,
    )


def sample_pairs(gt, traj, count, seed=0, negative_distance=NEGATIVE_MIN_DISTANCE, max_retries=64):
    """Draw ``count`` (positive, negative) pair couples around random queries.

    Returns ``2 * count`` samples, alternating positive then negative, each
    couple sharing its query.
    """
    if gt.is_empty:
        raise SamplingError("ground truth has no query with a loop")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    index = {int(f): i for i, f in enumerate(traj.frame_ids)}
    pos = traj.positions
    queries = gt.queries
    samples = []
    for _ in range(count):
        for _attempt in range(max_retries):
            q = queries[int(rng.integers(len(queries)))]
            d = np.linalg.norm(pos - pos[index[q]], axis=1)
            negatives = np.flatnonzero(d > negative_distance)
            if len(negatives):
                break
        else:
            raise SamplingError(
                f"no frame lies more than {negative_distance} m from any sampled query "
                f"after {max_retries} retries"
            )
        refs = sorted(gt.loops[q])
        p = refs[int(rng.integers(len(refs)))]
        n = int(traj.frame_ids[negatives[int(rng.integers(len(negatives)))]])
        samples.append(PairSample(q, p, "positive"))
        samples.append(PairSample(q, n, "negative"))
    return samples


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale simulated course.  ``course`` is ``circle`` or ``out_and_back``."""

    course: str = "circle"
    landmarks: int = 400
    noise: float = 0.0
    seed: int = 0
    name: str = "synthetic"
    radius: float = 40.0
    laps: float = 2.0
    leg_length: float = 150.0
    spacing: float = 1.0
    lap_offset: float = 1.5
    max_range: float = 25.0
    points_per_landmark: int = 32
    sensor_height: float = 1.7

    def __post_init__(self):
        if self.course not in ("circle", "out_and_back"):
            raise ConfigError(f"unknown course {self.course!r}")
        if self.landmarks < 1:
            raise ConfigError("synthetic world needs at least one landmark")
        if self.course == "circle" and self.laps <= 1.0:
            raise ConfigError("a circular course needs laps > 1 to close a loop")
        if self.noise < 0 or self.spacing <= 0 or self.max_range <= 0:
            raise ConfigError("noise must be >= 0; spacing and max_range must be positive")


def read_manifest(path):
    """Parse a ``key=value`` synthetic manifest into a dict of strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def synthetic_config_from_mapping(mapping):
    known = {f.name: f.type for f in fields(SyntheticConfig)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown synthetic manifest key {key!r}")
        default = getattr(SyntheticConfig, key)
        try:
            kwargs[key] = type(default)(value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return SyntheticConfig(**kwargs)


def write_manifest(path, config):
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SyntheticWorld:
    """Fixed random landmarks (vertical cylinders) that a virtual sensor observes."""

    centers: np.ndarray
    surface: np.ndarray  # (L, P, 3) world-frame surface points
    reflectance: np.ndarray  # (L,)
    config: SyntheticConfig = field(default_factory=SyntheticConfig)

    @classmethod
    def generate(cls, config, extent):
        rng = np.random.default_rng([config.seed, 0])
        (xmin, ymin), (xmax, ymax) = extent
        n = config.landmarks
        centers = np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])
        radius = rng.uniform(0.2, 2.0, n)
        height = rng.uniform(1.0, 6.0, n)
        p = config.points_per_landmark
        angles = rng.uniform(0, 2 * np.pi, (n, p))
        frac = rng.uniform(0, 1, (n, p))
        surface = np.stack(
            [
                centers[:, None, 0] + radius[:, None] * np.cos(angles),
                centers[:, None, 1] + radius[:, None] * np.sin(angles),
                -config.sensor_height + frac * height[:, None],
            ],
            axis=-1,
        )
        reflectance = rng.uniform(0.05, 1.0, n)
        return cls(centers, surface, reflectance, config)

    def visible(self, position):
        d = np.linalg.norm(self.centers - np.asarray(position)[:2], axis=1)
        return np.flatnonzero(d < self.config.max_range)

    def scan(self, position, heading, frame_id=0, noise=None, rng=None):
        noise = self.config.noise if noise is None else noise
        ids = self.visible(position)
        if len(ids) == 0:
            raise EmptyCloudError(f"frame {frame_id}: no landmark within range")
        pts = self.surface[ids].reshape(-1, 3) - np.array([position[0], position[1], 0.0])
        c, s = math.cos(heading), math.sin(heading)
        local = np.column_stack(
            [c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1], pts[:, 2]]
        )
        if noise > 0:
            rng = rng or np.random.default_rng()
            r = np.linalg.norm(local, axis=1)
            local = local * ((r + rng.normal(0.0, noise, len(r))) / r)[:, None]
        rem = np.repeat(self.reflectance[ids], self.surface.shape[1])
        labels = np.repeat(ids, self.surface.shape[1])
        return PointCloud(np.column_stack([local, rem]), frame_id=frame_id, landmark_ids=labels)


def course_poses(config):
    """Positions ``(n, 3)`` and headings ``(n,)`` along the configured course."""
    if config.course == "circle":
        circumference = 2 * np.pi * config.radius
        s = np.arange(0.0, config.laps * circumference, config.spacing)
        lap = np.floor(s / circumference)
        r = config.radius + config.lap_offset * (lap % 2)
        theta = s / config.radius
        xy = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        heading = theta + np.pi / 2
    else:
        s = np.arange(0.0, 2 * config.leg_length, config.spacing)
        back = s >= config.leg_length
        x = np.where(back, 2 * config.leg_length - s, s)
        y = np.where(back, config.lap_offset, 0.0)
        xy = np.column_stack([x, y])
        heading = np.where(back, np.pi, 0.0)
    return np.column_stack([xy, np.zeros(len(xy))]), heading


def generate_synthetic_sequence(config):
    """Simulate a course through a random landmark field.

    Returns ``(clouds, trajectory)``.  Each point cloud carries the landmark
    id of every point in ``landmark_ids``.
    """
    positions, headings = course_poses(config)
    margin = config.max_range + 5.0
    lo = positions[:, :2].min(axis=0) - margin
    hi = positions[:, :2].max(axis=0) + margin
    world = SyntheticWorld.generate(config, (lo, hi))
    clouds = []
    for i, (p, h) in enumerate(zip(positions, headings)):
        rng = np.random.default_rng([config.seed, 1, i])
        clouds.append(world.scan(p, h, frame_id=i, rng=rng))
    return clouds, Trajectory(positions)


def synthetic_sequence(config):
    clouds, traj = generate_synthetic_sequence(config)
    return Sequence(config.name, clouds, traj)

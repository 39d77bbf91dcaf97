"""LiDAR polar BEV and vision-LiDAR fusion.

Points are binned on a cylindrical grid aligned with the visual polar BEV,
then the height axis is compressed to two channels (point density and the
normalised index of the highest occupied height bin). Fusion is a plain
channel concatenation, visual channels first.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .spectral import PolarBev

PC_MAGIC = b"PCXYZ"
PC_VERSION = 1
_FLAG_INTENSITY = 1


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length must match the number of points")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]

    def rotated(self, yaw_deg):
        a = np.deg2rad(yaw_deg)
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return PointCloud(self.points @ R.T, self.intensity)


@dataclass(frozen=True)
class CylGridSpec:
    theta_bins: int = 120
    r_bins: int = 40
    z_bins: int = 8
    r_max: float = 20.0
    z_min: float = -0.5
    z_max: float = 3.5

    def __post_init__(self):
        if self.theta_bins < 4 or self.theta_bins % 2:
            raise ConfigurationError(f"theta_bins must be even and >= 4, got {self.theta_bins}")
        if self.r_bins < 1 or self.z_bins < 1:
            raise ConfigurationError("r_bins and z_bins must be >= 1")
        if not self.r_max > 0 or not self.z_max > self.z_min:
            raise ConfigurationError("need r_max > 0 and z_max > z_min")


def bin_indices(points, spec):
    """Integer ``(t, s, z)`` bin indices and the in-range mask.

    Angle bins are centred on ``t * 2pi / Theta`` to line up with the visual
    polar sampling; an angle of exactly ``2pi`` wraps to bin 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.hypot(pts[:, 0], pts[:, 1])
    z = pts[:, 2]
    keep = (r < spec.r_max) & (z >= spec.z_min) & (z < spec.z_max)
    theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
    dt = 2.0 * np.pi / spec.theta_bins
    t = np.floor(theta / dt + 0.5).astype(np.int64) % spec.theta_bins
    s = np.floor(r / (spec.r_max / spec.r_bins)).astype(np.int64)
    zi = np.floor((z - spec.z_min) / ((spec.z_max - spec.z_min) / spec.z_bins)).astype(np.int64)
    # guard float rounding at the half-open upper edges
    keep &= (s >= 0) & (s < spec.r_bins) & (zi >= 0) & (zi < spec.z_bins)
    return t, s, zi, keep


def cylindrical_binning(pc, spec=CylGridSpec()):
    """Point counts on the ``Theta x R x Z`` cylindrical grid."""
    grid = np.zeros((spec.theta_bins, spec.r_bins, spec.z_bins))
    if len(pc) == 0:
        return grid
    t, s, z, keep = bin_indices(pc.points, spec)
    np.add.at(grid, (t[keep], s[keep], z[keep]), 1.0)
    return grid


def compress_height_lidar(grid, r_max=20.0):
    """Density (sum over height) and top-occupied-height (``k / (Z - 1)``) channels."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[2] < 1:
        raise ValueError(f"expected a Theta x R x Z grid, got shape {g.shape}")
    Z = g.shape[2]
    density = g.sum(axis=2)
    occupied = g > 0
    top = Z - 1 - np.argmax(occupied[..., ::-1], axis=2)
    height = np.where(occupied.any(axis=2), top / (Z - 1) if Z > 1 else 0.0, 0.0)
    return PolarBev(np.stack([density, height], axis=-1), r_max)


def lidar_polar_bev(pc, spec=CylGridSpec()):
    return compress_height_lidar(cylindrical_binning(pc, spec), spec.r_max)


def fuse_concat(visual, lidar, normalize=False):
    """Concatenate channels of two polar BEVs on the same grid.

    ``normalize`` scales each modality to unit Frobenius norm first (zero
    grids are left untouched).
    """
    if visual.data.shape[:2] != lidar.data.shape[:2]:
        raise ValueError(f"polar grids differ: {visual.data.shape[:2]} vs {lidar.data.shape[:2]}")
    a, b = visual.data, lidar.data
    if normalize:
        a = _unit(a)
        b = _unit(b)
    return PolarBev(np.concatenate([a, b], axis=-1), visual.r_max)


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def encode_cloud(pc):
    has_i = pc.intensity is not None
    out = PC_MAGIC + struct.pack("<HHQ", PC_VERSION, _FLAG_INTENSITY if has_i else 0, len(pc))
    out += np.ascontiguousarray(pc.points, dtype="<f4").tobytes()
    if has_i:
        out += np.ascontiguousarray(pc.intensity, dtype="<f4").tobytes()
    return out


def decode_cloud(buf):
    head = len(PC_MAGIC) + 12
    if len(buf) < head or buf[: len(PC_MAGIC)] != PC_MAGIC:
        raise DataError("not a PCXYZ point cloud (bad magic)")
    version, flags, n = struct.unpack_from("<HHQ", buf, len(PC_MAGIC))
    if version != PC_VERSION:
        raise DataError(f"unsupported PCXYZ version {version}")
    expect = head + 12 * n + (4 * n if flags & _FLAG_INTENSITY else 0)
    if len(buf) != expect:
        raise DataError(f"PCXYZ size mismatch: expected {expect} bytes, got {len(buf)}")
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=head).reshape(n, 3).astype(np.float64)
    inten = None
    if flags & _FLAG_INTENSITY:
        inten = np.frombuffer(buf, dtype="<f4", count=n, offset=head + 12 * n).astype(np.float64)
    try:
        return PointCloud(pts, inten)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def save_cloud(path, pc):
    with open(path, "wb") as f:
        f.write(encode_cloud(pc))


def load_cloud(path):
    with open(path, "rb") as f:
        return decode_cloud(f.read())

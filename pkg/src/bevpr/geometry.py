"""Pinhole camera rigs, projection and bilinear feature sampling.

Frames
------
Rig frame: x forward, y left, z up; the BEV plane is z = 0.
Camera frame: x right, y down, z along the optical axis.
Extrinsics map rig to camera: ``x_cam = R @ x_rig + t``.

Pixel coordinates are continuous with ``u = 0`` at the centre of the first
column and ``v = 0`` at the centre of the first row. A pixel is inside the
image when ``0 <= u < width`` and ``0 <= v < height``.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ConfigurationError("extrinsics must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ConfigurationError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ConfigurationError("extrinsic rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera centre in the rig frame."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics


@dataclass(frozen=True)
class CameraRig:
    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise ConfigurationError("a camera rig needs at least one view")
        object.__setattr__(self, "views", views)

    def __len__(self):
        return len(self.views)

    def view(self, k):
        if not 0 <= k < len(self.views):
            raise IndexError(f"view index {k} out of range for rig with {len(self.views)} views")
        return self.views[k]

    def project(self, points, k):
        """Project rig-frame points ``(..., 3)`` into view ``k``.

        Returns ``(uv, valid)`` where ``uv`` has shape ``(..., 2)`` and
        ``valid`` marks points with positive depth that land inside the image.
        """
        cam = self.view(k)
        intr, extr = cam.intrinsics, cam.extrinsics
        pts = np.asarray(points, dtype=np.float64)
        pc = pts @ extr.rotation.T + extr.translation
        z = pc[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = intr.cx + intr.fx * pc[..., 0] / zs
        v = intr.cy + intr.fy * pc[..., 1] / zs
        valid = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        return np.stack([u, v], axis=-1), valid


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``H x W x C`` feature grid; ``scale`` is feature / image resolution."""

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ConfigurationError(f"feature map must be H x W x C with positive sizes, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("feature map contains non-finite values")
        if not self.scale > 0:
            raise ConfigurationError(f"feature scale must be positive, got {self.scale}")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def to_feature_coords(self, u, v):
        """Map image pixel coordinates to feature-grid coordinates (cell centres aligned)."""
        s = self.scale
        return (np.asarray(u) + 0.5) * s - 0.5, (np.asarray(v) + 0.5) * s - 0.5


def project_point(rig, p, k):
    """Pixel ``(u, v)`` of rig-frame point ``p`` in view ``k``, or ``None`` outside the frustum."""
    uv, valid = rig.project(np.asarray(p, dtype=np.float64).reshape(3), k)
    if not bool(valid):
        return None
    return float(uv[0]), float(uv[1])


def sample_bilinear_grid(data, u, v):
    """Vectorised bilinear lookup of ``data`` (H x W x C) at coordinates ``u`` (column), ``v`` (row).

    Coordinates are clamped to the grid, which amounts to border replication.
    Returns an array of shape ``u.shape + (C,)``.
    """
    H, W = data.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, W - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, H - 1)
    u0 = np.minimum(np.floor(u).astype(np.intp), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.intp), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    au = (u - u0)[..., None]
    av = (v - v0)[..., None]
    top = data[v0, u0] * (1.0 - au) + data[v0, u1] * au
    bottom = data[v1, u0] * (1.0 - au) + data[v1, u1] * au
    return top * (1.0 - av) + bottom * av


def bilinear_sample(f, u, v):
    """Bilinear interpolation of feature map ``f`` at feature coordinates ``(u, v)``.

    Raises ``ValueError`` when the point is outside ``[0, W-1] x [0, H-1]``.
    """
    if not (0.0 <= u <= f.width - 1 and 0.0 <= v <= f.height - 1):
        raise ValueError(f"sample ({u}, {v}) outside feature map {f.width}x{f.height}")
    return sample_bilinear_grid(f.data, np.float64(u), np.float64(v))


def backproject_ray(rig, k, u, v):
    """Ray ``(origin, direction)`` in the rig frame through pixel ``(u, v)`` of view ``k``.

    The direction has unit length; points ``origin + t * direction`` with
    ``t > 0`` project back onto ``(u, v)``.
    """
    cam = rig.view(k)
    intr, extr = cam.intrinsics, cam.extrinsics
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d = extr.rotation.T @ d_cam
    return extr.center, d / np.linalg.norm(d)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_extrinsics(yaw, pitch=0.0, center=(0.0, 0.0, 0.0)):
    """Extrinsics of a camera at ``center`` looking along rig yaw ``yaw``, tilted down by ``pitch`` (radians)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    c = np.asarray(center, dtype=np.float64)
    return CameraExtrinsics(R, -R @ c)


def surround_rig(n_views=4, width=384, height=224, focal=160.0, mount_height=1.5, pitch_deg=10.0):
    """Evenly spaced ring of identical cameras, view 0 looking forward."""
    intr = CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    views = []
    for k in range(n_views):
        extr = look_extrinsics(2 * np.pi * k / n_views, np.deg2rad(pitch_deg), (0.0, 0.0, mount_height))
        views.append(CameraView(intr, extr))
    return CameraRig(tuple(views))


def rig_to_dict(rig):
    return {
        "views": [
            {
                "intrinsics": {
                    "fx": v.intrinsics.fx,
                    "fy": v.intrinsics.fy,
                    "cx": v.intrinsics.cx,
                    "cy": v.intrinsics.cy,
                    "width": v.intrinsics.width,
                    "height": v.intrinsics.height,
                },
                "extrinsics": {
                    "rotation": v.extrinsics.rotation.reshape(-1).tolist(),
                    "translation": v.extrinsics.translation.tolist(),
                },
            }
            for v in rig.views
        ]
    }


def rig_from_dict(doc):
    try:
        views = []
        for i, entry in enumerate(doc["views"]):
            intr = entry["intrinsics"]
            extr = entry["extrinsics"]
            rot = [float(x) for x in extr["rotation"]]
            trans = [float(x) for x in extr["translation"]]
            if len(rot) != 9 or len(trans) != 3:
                raise DataError(f"view {i}: rotation needs 9 values and translation 3")
            try:
                views.append(
                    CameraView(
                        CameraIntrinsics(
                            float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                            int(intr["width"]), int(intr["height"]),
                        ),
                        CameraExtrinsics(np.array(rot).reshape(3, 3), np.array(trans)),
                    )
                )
            except ConfigurationError as exc:
                raise DataError(f"view {i}: {exc}") from exc
        return CameraRig(tuple(views))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed rig document: missing or invalid field {exc}") from exc
    except ConfigurationError as exc:
        raise DataError(str(exc)) from exc


def save_rig(path, rig):
    with open(path, "w") as f:
        json.dump(rig_to_dict(rig), f, indent=2)


def load_rig(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return rig_from_dict(doc)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc

"""Vanilla BEV construction from multi-view feature maps.

Every voxel centre of a rig-fixed volume is projected into each camera,
bilinearly sampled where it lands inside the frustum, and the samples are
averaged over the views that see it. The height axis is then compressed and
the channels are reduced to a single layer for aggregation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .geometry import FeatureMap, sample_bilinear_grid


@dataclass(frozen=True)
class VolumeSpec:
    x_min: float = -20.0
    x_max: float = 20.0
    y_min: float = -20.0
    y_max: float = 20.0
    cell: float = 0.5
    heights: tuple = (-1.0, 0.0, 1.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "heights", tuple(float(h) for h in self.heights))
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ConfigurationError("volume extent must have x_max > x_min and y_max > y_min")
        if not self.cell > 0:
            raise ConfigurationError(f"cell size must be positive, got {self.cell}")
        if len(self.heights) < 1:
            raise ConfigurationError("volume needs at least one sample height")
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError("volume grid must have at least one cell per axis")

    @property
    def nx(self):
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def ny(self):
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self):
        return self.nx, self.ny

    def cell_centers(self):
        """``(X, Y, 2)`` array of planar cell centres in metres."""
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.cell
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def grid_points(self):
        """``(X, Y, N_h, 3)`` voxel centres."""
        xy = self.cell_centers()
        X, Y = self.shape
        pts = np.empty((X, Y, len(self.heights), 3))
        pts[..., :2] = xy[:, :, None, :]
        pts[..., 2] = np.asarray(self.heights)[None, None, :]
        return pts

    def to_dict(self):
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "cell": self.cell, "heights": list(self.heights),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: doc[k] for k in ("x_min", "x_max", "y_min", "y_max", "cell", "heights") if k in doc})


@dataclass(frozen=True, eq=False)
class BevFeature:
    """BEV grid ``X x Y x C`` (or ``X x Y x N_h x C`` before height compression)."""

    data: np.ndarray
    spec: VolumeSpec = field(default_factory=VolumeSpec)
    coverage: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.shape[:2] != self.spec.shape:
            raise ConfigurationError(f"BEV grid {data.shape[:2]} does not match volume {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("BEV contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass(frozen=True)
class SimpleExtractorConfig:
    downsample: int = 4
    include_gradients: bool = False

    def __post_init__(self):
        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise ConfigurationError(f"downsample factor must be an integer >= 1, got {self.downsample}")

    @property
    def channels(self):
        return 3 + (4 if self.include_gradients else 0)


def extract_features_simple(image, cfg=SimpleExtractorConfig()):
    """Box-downsampled RGB, optionally followed by central-difference gradients of the grey level.

    With gradients enabled the layout is ``R, G, B, gx, gy, |gx|, |gy|``, i.e.
    two channels per gradient axis.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty H x W x 3 image, got shape {img.shape}")
    if img.shape[2] != 3:
        raise ValueError(f"expected 3 colour channels, got {img.shape[2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    d = int(cfg.downsample)
    H, W = img.shape[0] // d, img.shape[1] // d
    if H == 0 or W == 0:
        raise ValueError(f"image {img.shape[:2]} too small for downsample factor {d}")
    if d == 1:
        rgb = img.copy()
    else:
        rgb = img[: H * d, : W * d].reshape(H, d, W, d, 3).mean(axis=(1, 3))
    chans = [rgb]
    if cfg.include_gradients:
        grey = rgb.mean(axis=2)
        gx = np.zeros_like(grey)
        gy = np.zeros_like(grey)
        if W > 2:
            gx[:, 1:-1] = 0.5 * (grey[:, 2:] - grey[:, :-2])
        if H > 2:
            gy[1:-1] = 0.5 * (grey[2:] - grey[:-2])
        chans.append(np.stack([gx, gy, np.abs(gx), np.abs(gy)], axis=-1))
    return FeatureMap(np.concatenate(chans, axis=-1), scale=1.0 / d)


def _check_feats(rig, feats):
    if len(feats) != len(rig):
        raise ConfigurationError(f"got {len(feats)} feature maps for a rig with {len(rig)} views")
    chans = {f.channels for f in feats}
    if len(chans) != 1:
        raise ConfigurationError(f"feature maps disagree on channel count: {sorted(chans)}")
    return chans.pop()


def project_to_features(rig, feats, k, points):
    """Feature-grid coordinates of ``points`` in view ``k`` plus the frustum mask."""
    uv, valid = rig.project(points, k)
    fu, fv = feats[k].to_feature_coords(uv[..., 0], uv[..., 1])
    return fu, fv, valid


def build_vanilla_bev(rig, feats, spec=VolumeSpec()):
    """Average of bilinear samples over the views seeing each voxel centre.

    Returns a :class:`BevFeature` whose data is ``X x Y x N_h x C`` and whose
    coverage is ``X x Y x N_h`` view counts. Voxels no view sees stay zero.
    """
    C = _check_feats(rig, feats)
    pts = spec.grid_points()
    acc = np.zeros(pts.shape[:3] + (C,))
    count = np.zeros(pts.shape[:3], dtype=np.int64)
    for k in range(len(rig)):
        fu, fv, valid = project_to_features(rig, feats, k, pts)
        if not valid.any():
            continue
        acc[valid] += sample_bilinear_grid(feats[k].data, fu[valid], fv[valid])
        count += valid
    out = np.divide(acc, count[..., None], out=np.zeros_like(acc), where=count[..., None] > 0)
    return BevFeature(out, spec, count)


def compress_height(vol, weights=None, bias=0.0):
    """Collapse the height axis of an ``X x Y x N_h x C`` volume.

    The default is the mean over heights. Passing ``weights`` (length N_h)
    applies ``sum_h weights[h] * vol[..., h, :] + bias`` instead.
    """
    is_bev = isinstance(vol, BevFeature)
    data = vol.data if is_bev else np.asarray(vol, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"expected an X x Y x N_h x C volume, got shape {data.shape}")
    if weights is None:
        out = data.mean(axis=2)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (data.shape[2],):
            raise ValueError(f"height weights must have length {data.shape[2]}, got {w.shape}")
        out = np.tensordot(data, w, axes=([2], [0])) + bias
    if not is_bev:
        return out
    cov = None if vol.coverage is None else (vol.coverage.max(axis=2) if vol.coverage.ndim == 3 else vol.coverage)
    return BevFeature(out, vol.spec, cov)


def reduce_channels(bev, weights, bias=0.0):
    """Per-cell affine map ``C -> 1``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != bev.channels:
        raise ValueError(f"channel weights must have length {bev.channels}, got shape {w.shape}")
    out = bev.data @ w + bias
    return BevFeature(out[..., None], bev.spec, bev.coverage)

"""Per-place feature computation shared by the CLI and the end-to-end tests."""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .bev import SimpleExtractorConfig, VolumeSpec, build_vanilla_bev, compress_height, extract_features_simple
from .deform import BevQueryGrid, build_deformable_bev
from .errors import ConfigurationError
from .lidar import CylGridSpec, fuse_concat, lidar_polar_bev
from .spectral import place_feature, polar_transform

log = logging.getLogger(__name__)

STAGES = ("image_feature", "bev_feature", "aggregation")


@dataclass(frozen=True)
class PolarSpec:
    theta_bins: int = 120
    r_bins: int = 40
    r_max: float = 20.0


@dataclass(frozen=True)
class PipelineConfig:
    rig: str = None
    volume: VolumeSpec = field(default_factory=VolumeSpec)
    polar: PolarSpec = field(default_factory=PolarSpec)
    mode: str = "vanilla"
    weights: str = None
    fuse: bool = False
    normalize_modalities: bool = False
    extractor: SimpleExtractorConfig = field(default_factory=SimpleExtractorConfig)
    visual_weights: tuple = None
    lidar_weights: tuple = (1.0, 1.0)
    lidar_z_bins: int = 8
    lidar_z_min: float = -0.5
    lidar_z_max: float = 3.5
    yaw_temperature: float = 1.0
    yaw_offset: float = 0.0
    topn: int = 25
    criterion: float = 2.0

    def __post_init__(self):
        if self.mode not in ("vanilla", "deformable"):
            raise ConfigurationError(f"mode must be 'vanilla' or 'deformable', got {self.mode!r}")
        if self.mode == "deformable" and not self.weights:
            raise ConfigurationError("deformable mode needs a weights file")

    @property
    def cyl_spec(self):
        return CylGridSpec(self.polar.theta_bins, self.polar.r_bins, self.lidar_z_bins,
                           self.polar.r_max, self.lidar_z_min, self.lidar_z_max)

    def to_dict(self):
        d = asdict(self)
        d["volume"]["heights"] = list(d["volume"]["heights"])
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "volume" in doc:
            doc["volume"] = VolumeSpec.from_dict(doc["volume"])
        if "polar" in doc:
            doc["polar"] = PolarSpec(**doc["polar"])
        if "extractor" in doc:
            doc["extractor"] = SimpleExtractorConfig(**doc["extractor"])
        for k in ("visual_weights", "lidar_weights"):
            if doc.get(k) is not None:
                doc[k] = tuple(doc[k])
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def hash(self):
        """Stable 64-bit digest of the parameters that shape the place feature."""
        d = self.to_dict()
        for k in ("rig", "weights", "topn", "criterion", "yaw_temperature", "yaw_offset"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class PlaceOutput:
    feature: object
    polar: object
    timings: dict


class PlaceEncoder:
    """Images (+ optional cloud) of one place -> place feature and polar BEV."""

    def __init__(self, config, rig, weights=None):
        self.config = config
        self.rig = rig
        self.weights = weights
        self.provenance = config.hash()
        if config.mode == "deformable":
            if weights is None:
                raise ConfigurationError("deformable mode needs DeformableWeights")
            self.grid = BevQueryGrid(config.volume, weights.queries)

    def channel_weights(self, c_visual):
        cfg = self.config
        if cfg.visual_weights is not None:
            wv = np.asarray(cfg.visual_weights, dtype=np.float64)
            if wv.shape != (c_visual,):
                raise ConfigurationError(f"visual_weights needs {c_visual} entries, got {wv.shape[0]}")
        else:
            wv = np.full(c_visual, 1.0 / c_visual)
        if not cfg.fuse:
            return wv
        return np.concatenate([wv, np.asarray(cfg.lidar_weights, dtype=np.float64)])

    def visual_bev(self, feats):
        cfg = self.config
        if cfg.mode == "vanilla":
            return compress_height(build_vanilla_bev(self.rig, feats, cfg.volume))
        return build_deformable_bev(self.rig, feats, self.grid, self.weights)

    def encode(self, images, cloud=None):
        cfg = self.config
        timings = {}
        t0 = time.perf_counter()
        feats = [extract_features_simple(im, cfg.extractor) for im in images]
        t1 = time.perf_counter()
        bev = self.visual_bev(feats)
        t2 = time.perf_counter()
        pol = polar_transform(bev, cfg.polar.theta_bins, cfg.polar.r_bins, cfg.polar.r_max)
        if cfg.fuse:
            if cloud is None:
                raise ConfigurationError("fusion enabled but no point cloud given")
            pol = fuse_concat(pol, lidar_polar_bev(cloud, cfg.cyl_spec), normalize=cfg.normalize_modalities)
        single = pol.reduce(self.channel_weights(pol.channels - (2 if cfg.fuse else 0)))
        feat = place_feature(single, self.provenance)
        t3 = time.perf_counter()
        timings["image_feature"] = t1 - t0
        timings["bev_feature"] = t2 - t1
        timings["aggregation"] = t3 - t2
        return PlaceOutput(feat, pol, timings)


def gap_descriptor(images, rig, config):
    """Global-average-pooled BEV comparator: one mean value per channel."""
    feats = [extract_features_simple(im, config.extractor) for im in images]
    bev = compress_height(build_vanilla_bev(rig, feats, config.volume))
    return bev.data.reshape(-1, bev.channels).mean(axis=0)

"""BEV-based 360-degree place recognition."""

from .bev import BevFeature, SimpleExtractorConfig, VolumeSpec, build_vanilla_bev, compress_height, extract_features_simple, reduce_channels
from .deform import BevQueryGrid, DeformableWeights, build_deformable_bev, deformable_attend, load_weights, random_weights, save_weights
from .geometry import CameraExtrinsics, CameraIntrinsics, CameraRig, CameraView, FeatureMap, backproject_ray, bilinear_sample, load_rig, project_point
from .lidar import CylGridSpec, PointCloud, compress_height_lidar, cylindrical_binning, fuse_concat
from .objectives import TripletBatch, batch_hard_mine, joint_loss, kld_yaw_loss, triplet_margin_loss
from .retrieval import EvalReport, PlaceDatabase, PlaceRecord, build_database, dedup_trajectory, recall_at_n, recall_vs_criterion, yaw_error_quartiles
from .spectral import PlaceFeature, PolarBev, YawEstimate, estimate_yaw, feature_distance, place_feature, polar_transform

__version__ = "0.1.0"

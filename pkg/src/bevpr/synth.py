"""Synthetic landmark worlds for desk-scale end-to-end checks.

A world is a flat ground plane with procedural value-noise colour texture
and a set of coloured spheres resting on it. Images are rendered per rig
view by exact ray/ground intersection for the ground and painter-ordered
disc splats for the spheres. LiDAR scans are analytic ray casts.

Poses are ``(x, y, yaw_degrees)`` of the rig origin on the ground plane.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import rot_z
from .lidar import PointCloud


@dataclass(frozen=True, eq=False)
class Landmark:
    position: np.ndarray
    radius: float
    color: np.ndarray


@dataclass(frozen=True, eq=False)
class Scene:
    landmarks: tuple = ()
    texture_seed: int = 0
    extent: float = 200.0
    texture_contrast: float = 0.35
    texture_scales: tuple = (6.0, 2.0)
    ground_color: tuple = (0.45, 0.42, 0.38)
    sky_color: tuple = (0.65, 0.75, 0.9)
    has_ground: bool = True

    def __post_init__(self):
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        half = 0.5 * self.extent
        for lm in self.landmarks:
            if not lm.radius > 0:
                raise ValueError("landmark radii must be positive")
            if np.abs(lm.position[:2]).max() > half:
                raise ValueError("landmark outside scene extent")
        object.__setattr__(self, "_noise", _ValueNoise(self.texture_seed, self.extent, self.texture_scales))
        if self.landmarks:
            object.__setattr__(self, "_centers", np.stack([lm.position for lm in self.landmarks]))
            object.__setattr__(self, "_radii", np.array([lm.radius for lm in self.landmarks]))
            object.__setattr__(self, "_colors", np.stack([lm.color for lm in self.landmarks]))
        else:
            object.__setattr__(self, "_centers", np.zeros((0, 3)))
            object.__setattr__(self, "_radii", np.zeros(0))
            object.__setattr__(self, "_colors", np.zeros((0, 3)))

    def ground(self, x, y):
        """Ground colour at world points; ``(..., 3)``."""
        n = self._noise(x, y)
        return np.clip(np.asarray(self.ground_color) + self.texture_contrast * n, 0.0, 1.0)

    def to_dict(self):
        return {
            "landmarks": [
                {"position": lm.position.tolist(), "radius": lm.radius, "color": lm.color.tolist()}
                for lm in self.landmarks
            ],
            "texture_seed": self.texture_seed,
            "extent": self.extent,
            "texture_contrast": self.texture_contrast,
            "texture_scales": list(self.texture_scales),
            "ground_color": list(self.ground_color),
            "sky_color": list(self.sky_color),
            "has_ground": self.has_ground,
        }

    @classmethod
    def from_dict(cls, doc):
        lms = tuple(
            Landmark(np.asarray(d["position"], float), float(d["radius"]), np.asarray(d["color"], float))
            for d in doc.get("landmarks", [])
        )
        kw = {k: doc[k] for k in ("texture_seed", "extent", "texture_contrast", "has_ground") if k in doc}
        for k in ("texture_scales", "ground_color", "sky_color"):
            if k in doc:
                kw[k] = tuple(doc[k])
        return cls(lms, **kw)


class _ValueNoise:
    """Sum of bilinearly smoothed random lattices, zero mean, roughly in [-1, 1]."""

    def __init__(self, seed, extent, scales):
        rng = np.random.default_rng(seed)
        self.origin = -0.5 * extent - 8.0
        self.layers = []
        for s in scales:
            n = int(np.ceil((extent + 16.0) / s)) + 2
            self.layers.append((float(s), rng.uniform(-1.0, 1.0, size=(n, n, 3))))
        self.norm = 1.0 / max(len(self.layers), 1)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(x.shape + (3,))
        for s, lat in self.layers:
            n = lat.shape[0]
            gx = np.clip((x - self.origin) / s, 0.0, n - 1.000001)
            gy = np.clip((y - self.origin) / s, 0.0, n - 1.000001)
            i0 = np.floor(gx).astype(np.intp)
            j0 = np.floor(gy).astype(np.intp)
            fx = gx - i0
            fy = gy - j0
            fx = (fx * fx * (3.0 - 2.0 * fx))[..., None]
            fy = (fy * fy * (3.0 - 2.0 * fy))[..., None]
            a = lat[i0, j0] * (1 - fx) + lat[i0 + 1, j0] * fx
            b = lat[i0, j0 + 1] * (1 - fx) + lat[i0 + 1, j0 + 1] * fx
            out += a * (1 - fy) + b * fy
        return out * self.norm


def make_scene(n_landmarks=400, extent=200.0, seed=0, radius_range=(0.4, 1.5), landmark_color=None, **kwargs):
    """Random world with ``n_landmarks`` spheres resting on the ground.

    ``landmark_color`` paints every sphere the same colour (a visually
    degraded world); the random draws are unchanged so layouts match.
    """
    rng = np.random.default_rng(seed)
    half = 0.5 * extent
    lms = []
    for _ in range(n_landmarks):
        r = rng.uniform(*radius_range)
        xy = rng.uniform(-half, half, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        if landmark_color is not None:
            color = np.array(landmark_color, dtype=np.float64)
        lms.append(Landmark(np.array([xy[0], xy[1], r]), float(r), color))
    return Scene(tuple(lms), texture_seed=int(rng.integers(2**31)), extent=extent, **kwargs)


def pose_matrix(pose):
    """Rotation and translation taking rig-frame points to world frame."""
    x, y, yaw = pose
    return rot_z(np.deg2rad(yaw)), np.array([x, y, 0.0])


def _pixel_rays(intr):
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)


def render_view(scene, rig, pose, k, max_landmark_range=80.0):
    """Render view ``k`` of ``rig`` at ``pose`` as an ``H x W x 3`` image in [0, 1]."""
    view = rig.view(k)
    intr, extr = view.intrinsics, view.extrinsics
    Rw, tw = pose_matrix(pose)
    # camera -> world
    R_cw = Rw @ extr.rotation.T
    c_w = Rw @ extr.center + tw
    d_w = _pixel_rays(intr) @ R_cw.T
    img = np.empty((intr.height, intr.width, 3))
    img[:] = scene.sky_color
    if scene.has_ground and c_w[2] > 0:
        hit = d_w[..., 2] < -1e-9
        t = -c_w[2] / d_w[hit][:, 2]
        gx = c_w[0] + t * d_w[hit][:, 0]
        gy = c_w[1] + t * d_w[hit][:, 1]
        img[hit] = scene.ground(gx, gy)
    if len(scene.landmarks):
        centers_cam = (scene._centers - c_w) @ R_cw
        depth = centers_cam[:, 2]
        dist = np.linalg.norm(centers_cam, axis=1)
        keep = np.nonzero((depth > 0.1) & (dist < max_landmark_range))[0]
        for i in keep[np.argsort(-depth[keep], kind="stable")]:
            x, y, z = centers_cam[i]
            u = intr.cx + intr.fx * x / z
            v = intr.cy + intr.fy * y / z
            rad = intr.fx * scene._radii[i] / z
            u0, u1 = int(np.floor(u - rad)), int(np.ceil(u + rad))
            v0, v1 = int(np.floor(v - rad)), int(np.ceil(v + rad))
            if u1 < 0 or v1 < 0 or u0 >= intr.width or v0 >= intr.height:
                continue
            u0, v0 = max(u0, 0), max(v0, 0)
            u1, v1 = min(u1, intr.width - 1), min(v1, intr.height - 1)
            uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
            inside = (uu - u) ** 2 + (vv - v) ** 2 <= rad * rad
            img[vv[inside], uu[inside]] = scene._colors[i]
    return img


def render_views(scene, rig, pose, gain=1.0, **kwargs):
    """All rig views at ``pose``; ``gain`` scales brightness to mimic appearance change."""
    imgs = [render_view(scene, rig, pose, k, **kwargs) for k in range(len(rig))]
    if gain != 1.0:
        imgs = [np.clip(im * gain, 0.0, 1.0) for im in imgs]
    return imgs


@dataclass(frozen=True)
class LidarConfig:
    n_azimuth: int = 360
    elevations_deg: tuple = tuple(np.linspace(-15.0, 15.0, 16).tolist())
    mount_height: float = 1.8
    max_range: float = 60.0


def sample_lidar(scene, pose, cfg=LidarConfig()):
    """Ray-cast a spinning LiDAR at ``pose``; returns the hit cloud in the rig frame."""
    az = np.arange(cfg.n_azimuth) * (2.0 * np.pi / cfg.n_azimuth)
    el = np.deg2rad(np.asarray(cfg.elevations_deg, dtype=np.float64))
    A, E = np.meshgrid(az, el, indexing="ij")
    d_rig = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    o_rig = np.array([0.0, 0.0, cfg.mount_height])
    Rw, tw = pose_matrix(pose)
    o_w = Rw @ o_rig + tw
    d_w = d_rig @ Rw.T
    t_best = np.full(d_w.shape[0], np.inf)
    if scene.has_ground:
        down = d_w[:, 2] < -1e-12
        t_best[down] = -o_w[2] / d_w[down, 2]
    if len(scene.landmarks):
        oc = o_w - scene._centers
        near = np.linalg.norm(oc, axis=1) < cfg.max_range + scene._radii
        if near.any():
            oc = oc[near]
            rad = scene._radii[near]
            b = d_w @ oc.T
            c = (oc * oc).sum(axis=1) - rad * rad
            disc = b * b - c[None, :]
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.nan))
            t = np.where(np.isnan(t), np.inf, t)
            t_best = np.minimum(t_best, t.min(axis=1))
    hit = t_best <= cfg.max_range
    pts = o_rig + t_best[hit, None] * d_rig[hit]
    return PointCloud(pts)


@dataclass(frozen=True)
class Visit:
    id: int
    x: float
    y: float
    yaw: float

    @property
    def pose(self):
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    timestamps: tuple


@dataclass
class RevisitSet:
    database: list
    queries: list
    ground_truth: dict
    yaw_deltas: dict = field(default_factory=dict)

    @property
    def db_trajectory(self):
        return Trajectory(tuple(v.pose for v in self.database), tuple(float(i) for i in range(len(self.database))))


def _path(n, spacing, half, rng):
    pts = np.empty((n, 2))
    heading = np.empty(n)
    p = rng.uniform(-0.5 * half, 0.5 * half, size=2)
    h = rng.uniform(0, 2 * np.pi)
    for i in range(n):
        pts[i] = p
        heading[i] = h
        h += rng.normal(0.0, np.deg2rad(25.0))
        step = spacing * np.array([np.cos(h), np.sin(h)])
        nxt = p + step
        for ax in range(2):
            if abs(nxt[ax]) > half:
                step[ax] = -step[ax]
                h = np.arctan2(step[1], step[0])
        p = p + step
    return pts, heading


def make_revisit_set(scene, n_places, yaw_range=180.0, translation_jitter=0.5, seed=0,
                     spacing=8.0, margin=25.0):
    """Database traversal along a random path plus one rotated, jittered revisit per place.

    Database ids are ``0..n-1``; query ``n + i`` revisits database place ``i``
    with a yaw delta of magnitude uniform in ``[0, yaw_range]`` degrees
    (random sign) and a planar offset of at most ``translation_jitter`` metres.
    """
    if n_places < 1:
        raise ValueError("n_places must be at least 1")
    rng = np.random.default_rng(seed)
    half = 0.5 * scene.extent - margin
    pts, heading = _path(n_places, spacing, half, rng)
    db, qs, gt, deltas = [], [], {}, {}
    for i in range(n_places):
        yaw = float(np.rad2deg(heading[i]) % 360.0)
        db.append(Visit(i, float(pts[i, 0]), float(pts[i, 1]), yaw))
        mag = rng.uniform(0.0, yaw_range)
        delta = float(mag * rng.choice([-1.0, 1.0]))
        rj = translation_jitter * np.sqrt(rng.uniform())
        aj = rng.uniform(0, 2 * np.pi)
        qid = n_places + i
        qs.append(Visit(qid, float(pts[i, 0] + rj * np.cos(aj)), float(pts[i, 1] + rj * np.sin(aj)),
                        float((yaw + delta) % 360.0)))
        gt[qid] = i
        deltas[qid] = delta
    return RevisitSet(db, qs, gt, deltas)

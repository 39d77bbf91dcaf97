"""Polar BEV, rotation-invariant DFT place features and phase-correlation yaw.

A rotation of the rig about the vertical axis rotates the Cartesian BEV,
which becomes a cyclic shift along the angle axis of the polar BEV. The 2-D
DFT magnitude is invariant to that shift, and the phase of the cross-power
spectrum along the angle axis recovers it.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import sample_bilinear_grid

PATCH = 16
NOISE_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class PolarBev:
    """``Theta x R x C`` grid; row ``t`` is angle ``t * 2pi / Theta``, column ``s`` is radius ``(s + 0.5) * r_max / R``."""

    data: np.ndarray
    r_max: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3:
            raise ConfigurationError(f"polar BEV must be Theta x R x C, got shape {data.shape}")
        T, R = data.shape[:2]
        if T < 4 or T % 2:
            raise ConfigurationError(f"angle bins must be even and >= 4, got {T}")
        if R < 1:
            raise ConfigurationError("polar BEV needs at least one range bin")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("polar BEV contains non-finite values")
        if not self.r_max > 0:
            raise ConfigurationError(f"r_max must be positive, got {self.r_max}")
        object.__setattr__(self, "data", data)

    @property
    def theta_bins(self):
        return self.data.shape[0]

    @property
    def r_bins(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def shifted(self, k):
        """Cyclic shift by ``k`` angle bins: ``out[t] = self[t - k]``."""
        return PolarBev(np.roll(self.data, k, axis=0), self.r_max)

    def reduce(self, weights, bias=0.0):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self.channels,):
            raise ValueError(f"channel weights must have length {self.channels}, got {w.shape}")
        return PolarBev(self.data @ w + bias, self.r_max)


@dataclass(frozen=True, eq=False)
class PlaceFeature:
    values: np.ndarray
    provenance: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != PATCH * PATCH:
            raise ConfigurationError(f"place feature needs {PATCH * PATCH} values, got {v.size}")
        v = v.reshape(PATCH, PATCH)
        if not np.all(np.isfinite(v)) or (v < 0).any():
            raise ConfigurationError("place feature values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def vector(self):
        return self.values.reshape(-1)

    def to_bytes(self):
        return struct.pack("<Q", self.provenance & 0xFFFFFFFFFFFFFFFF) + self.vector.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) != 8 + 4 * PATCH * PATCH:
            raise ValueError(f"place feature record must be {8 + 4 * PATCH * PATCH} bytes, got {len(buf)}")
        (prov,) = struct.unpack_from("<Q", buf, 0)
        vals = np.frombuffer(buf, dtype="<f4", offset=8).astype(np.float64)
        return cls(vals, prov)


@dataclass(frozen=True, eq=False)
class YawEstimate:
    distribution: np.ndarray
    argmax_bin: int
    argmax_angle: float
    temperature: float = 1.0
    offset: float = 0.0
    correlation: np.ndarray = None


def polar_transform(bev, theta_bins=120, r_bins=40, r_max=None):
    """Resample a square rig-centred Cartesian BEV onto an angle x range grid."""
    spec = bev.spec
    data = bev.data
    if data.ndim != 3:
        raise ValueError(f"expected a compressed X x Y x C BEV, got shape {data.shape}")
    X, Y = spec.shape
    if X != Y or not np.isclose(spec.x_max - spec.x_min, spec.y_max - spec.y_min):
        raise ValueError(f"polar transform needs a square BEV, got {X}x{Y} cells")
    half = 0.5 * min(spec.x_max - spec.x_min, spec.y_max - spec.y_min)
    if r_max is None:
        r_max = half
    theta = np.arange(theta_bins) * (2.0 * np.pi / theta_bins)
    radius = (np.arange(r_bins) + 0.5) * (r_max / r_bins)
    x = radius[None, :] * np.cos(theta)[:, None]
    y = radius[None, :] * np.sin(theta)[:, None]
    fi = (x - spec.x_min) / spec.cell - 0.5
    fj = (y - spec.y_min) / spec.cell - 0.5
    # rows of the Cartesian grid are x, so x plays the role of the row coordinate
    out = sample_bilinear_grid(data, fj, fi)
    outside = (fi < 0) | (fi > X - 1) | (fj < 0) | (fj > Y - 1)
    out[outside] = 0.0
    return PolarBev(out, float(r_max))


def polar_spectrum(pb):
    """Centred 2-D DFT magnitude of a single-channel polar BEV."""
    if pb.channels != 1:
        raise ValueError(f"place features need a single-channel polar BEV, got {pb.channels} channels")
    return np.fft.fftshift(np.abs(np.fft.fft2(pb.data[..., 0])))


def place_feature(pb, provenance=0):
    T, R = pb.theta_bins, pb.r_bins
    if T < PATCH or R < PATCH:
        raise ValueError(f"polar BEV {T}x{R} is smaller than the {PATCH}x{PATCH} feature patch")
    mag = polar_spectrum(pb)
    ct, cr = T // 2, R // 2
    h = PATCH // 2
    return PlaceFeature(mag[ct - h: ct + h, cr - h: cr + h], provenance)


def feature_distance(a, b):
    return float(np.linalg.norm(a.vector - b.vector))


def softmax(x):
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def phase_correlation(query, match, noise_floor=NOISE_FLOOR):
    """Phase-correlation surface over angle shifts.

    ``corr[a]`` peaks where ``match(theta) = query(theta - a)``. Cross-power
    spectra are taken per range bin and channel along theta and summed
    before the phase is extracted.

    Frequencies whose cross-power is below ``noise_floor`` times the strongest
    one carry interpolation noise rather than phase and are left out. If the
    whole spectrum is zero every phase is taken as 1, giving a peak at 0.
    """
    if query.data.shape != match.data.shape:
        raise ValueError(f"polar BEV shapes differ: {query.data.shape} vs {match.data.shape}")
    fq = np.fft.fft(query.data, axis=0)
    fm = np.fft.fft(match.data, axis=0)
    cross = (np.conj(fq) * fm).sum(axis=(1, 2))
    mag = np.abs(cross)
    top = mag.max()
    if top <= np.finfo(np.float64).tiny:
        return np.fft.ifft(np.ones_like(cross)).real
    keep = mag > max(noise_floor * top, np.finfo(np.float64).tiny)
    phase = np.where(keep, cross / np.where(keep, mag, 1.0), 0.0)
    return np.fft.ifft(phase).real


def estimate_yaw(query, match, W=1.0, b=0.0, noise_floor=NOISE_FLOOR):
    """Relative yaw between two visits, as a softmax distribution over angle bins.

    The returned angle ``a`` satisfies ``match(theta) ~ query(theta - a)``;
    for a query rig rotated by ``+a`` relative to the matched visit this is ``a``.
    """
    corr = phase_correlation(query, match, noise_floor)
    p = softmax(W * corr + b)
    k = int(np.argmax(p))
    return YawEstimate(p, k, k * 360.0 / query.theta_bins, float(W), float(b), corr)

"""Deformable-attention BEV construction (forward pass only).

Each BEV query ``q`` sits on a grid cell. For every sample height and every
view that sees it, the projected feature-map position ``p`` is refined by
per-head, per-key offsets predicted from ``q``, the shifted samples are
mixed with softmax attention weights, passed through per-head value and
output maps, and summed over heads::

    psi(q, p, F) = sum_i W_i sum_j A_ij(q) * W'_i F(p + dp_ij(q))

The cell feature sums ``psi`` over heights, each height averaged over the
views that see it.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .bev import BevFeature, project_to_features, _check_feats
from .errors import ConfigurationError, DataError
from .geometry import sample_bilinear_grid

MAGIC = b"BEVW"
VERSION = 1
_DIMS = ("n_head", "n_key", "c_in", "c_v", "c_out", "c_q", "grid_x", "grid_y")


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class DeformableWeights:
    """Parameters of the deformable sampler.

    Shapes: ``value_weights`` (H, C_v, C), ``output_weights`` (H, C_out, C_v),
    ``attn_weight`` (H*K, C_q), ``attn_bias`` (H*K,), ``offset_weight``
    (H*K*2, C_q), ``offset_bias`` (H*K*2,), optional ``queries`` (X, Y, C_q).
    All values are held at float32 precision so files round-trip exactly.
    """

    value_weights: np.ndarray
    output_weights: np.ndarray
    attn_weight: np.ndarray
    attn_bias: np.ndarray
    offset_weight: np.ndarray
    offset_bias: np.ndarray
    rho_max: float = 8.0
    queries: np.ndarray = None

    def __post_init__(self):
        for name in ("value_weights", "output_weights", "attn_weight", "attn_bias", "offset_weight", "offset_bias"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        if self.queries is not None:
            object.__setattr__(self, "queries", _f32(self.queries))
        object.__setattr__(self, "rho_max", float(np.float32(self.rho_max)))
        self._validate()

    def _validate(self):
        Wv, Wo = self.value_weights, self.output_weights
        if Wv.ndim != 3 or Wo.ndim != 3:
            raise ConfigurationError("value/output weights must be 3-D (head, out, in)")
        H, Cv, _ = Wv.shape
        if Wo.shape[0] != H or Wo.shape[2] != Cv:
            raise ConfigurationError(f"output weights {Wo.shape} incompatible with value weights {Wv.shape}")
        if self.attn_weight.ndim != 2 or self.attn_weight.shape[0] % H:
            raise ConfigurationError("attention weight rows must be a multiple of the head count")
        K = self.attn_weight.shape[0] // H
        Cq = self.attn_weight.shape[1]
        if K < 1:
            raise ConfigurationError("need at least one key per head")
        if self.attn_bias.shape != (H * K,):
            raise ConfigurationError(f"attention bias must have length {H * K}")
        if self.offset_weight.shape != (H * K * 2, Cq) or self.offset_bias.shape != (H * K * 2,):
            raise ConfigurationError(f"offset predictor must map C_q={Cq} to {H * K * 2} values")
        if self.queries is not None and (self.queries.ndim != 3 or self.queries.shape[2] != Cq):
            raise ConfigurationError(f"queries must be X x Y x {Cq}")
        if not self.rho_max > 0:
            raise ConfigurationError("rho_max must be positive")
        for name in ("value_weights", "output_weights", "attn_weight", "attn_bias", "offset_weight", "offset_bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigurationError(f"{name} contains non-finite values")
        if self.queries is not None and not np.all(np.isfinite(self.queries)):
            raise ConfigurationError("queries contain non-finite values")

    @property
    def n_head(self):
        return self.value_weights.shape[0]

    @property
    def n_key(self):
        return self.attn_weight.shape[0] // self.n_head

    @property
    def c_in(self):
        return self.value_weights.shape[2]

    @property
    def c_v(self):
        return self.value_weights.shape[1]

    @property
    def c_out(self):
        return self.output_weights.shape[1]

    @property
    def c_q(self):
        return self.attn_weight.shape[1]

    def attention(self, q):
        """Softmax attention ``(..., n_head, n_key)``; each head sums to one."""
        q = np.asarray(q, dtype=np.float64)
        logits = (q @ self.attn_weight.T + self.attn_bias).reshape(q.shape[:-1] + (self.n_head, self.n_key))
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def offsets(self, q):
        """Sampling offsets ``(..., n_head, n_key, 2)`` in feature pixels, norm-clamped to ``rho_max``."""
        q = np.asarray(q, dtype=np.float64)
        off = (q @ self.offset_weight.T + self.offset_bias).reshape(q.shape[:-1] + (self.n_head, self.n_key, 2))
        norm = np.linalg.norm(off, axis=-1, keepdims=True)
        scale = np.where(norm > self.rho_max, self.rho_max / np.where(norm > 0, norm, 1.0), 1.0)
        return off * scale


def _psi(q, fu, fv, data, w):
    """Vectorised deformable attention for ``M`` queries at feature coordinates ``(fu, fv)``."""
    A = w.attention(q)
    off = w.offsets(q)
    H, W = data.shape[:2]
    su = np.clip(fu[:, None, None] + off[..., 0], 0.0, W - 1)
    sv = np.clip(fv[:, None, None] + off[..., 1], 0.0, H - 1)
    samples = sample_bilinear_grid(data, su, sv)
    mixed = np.einsum("mhk,mhkc->mhc", A, samples)
    values = np.einsum("hvc,mhc->mhv", w.value_weights, mixed)
    return np.einsum("hov,mhv->mo", w.output_weights, values)


def deformable_attend(q, p, f, w):
    """Deformable attention of one query ``q`` around feature-map position ``p = (u, v)``."""
    if f.channels != w.c_in:
        raise ConfigurationError(f"feature map has {f.channels} channels, weights expect {w.c_in}")
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != w.c_q:
        raise ConfigurationError(f"query has {q.shape[1]} dims, weights expect {w.c_q}")
    u, v = p
    if not (0.0 <= u <= f.width - 1 and 0.0 <= v <= f.height - 1):
        raise ValueError(f"reference point ({u}, {v}) outside feature map {f.width}x{f.height}")
    return _psi(q, np.array([u], float), np.array([v], float), f.data, w)[0]


@dataclass(frozen=True, eq=False)
class BevQueryGrid:
    spec: object
    queries: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.float64)
        if q.ndim != 3 or q.shape[:2] != self.spec.shape:
            raise ConfigurationError(f"query grid {q.shape} does not match volume {self.spec.shape}")
        object.__setattr__(self, "queries", q)


def build_deformable_bev(rig, feats, grid, w, per_height=False):
    """Deformable BEV ``X x Y x C_out``.

    With ``per_height`` the height-wise view averages are returned stacked
    as ``X x Y x N_h x C_out`` instead of summed.
    """
    C = _check_feats(rig, feats)
    if C != w.c_in:
        raise ConfigurationError(f"feature maps have {C} channels, weights expect {w.c_in}")
    if grid.queries.shape[2] != w.c_q:
        raise ConfigurationError(f"queries have {grid.queries.shape[2]} dims, weights expect {w.c_q}")
    spec = grid.spec
    pts = spec.grid_points()
    X, Y, Nh = pts.shape[:3]
    acc = np.zeros((X, Y, Nh, w.c_out))
    count = np.zeros((X, Y, Nh), dtype=np.int64)
    for k in range(len(rig)):
        fu, fv, valid = project_to_features(rig, feats, k, pts)
        if not valid.any():
            continue
        ix, iy, ih = np.nonzero(valid)
        acc[ix, iy, ih] += _psi(grid.queries[ix, iy], fu[valid], fv[valid], feats[k].data, w)
        count += valid
    out = np.divide(acc, count[..., None], out=np.zeros_like(acc), where=count[..., None] > 0)
    if not per_height:
        out = out.sum(axis=2)
    return BevFeature(out, spec, count)


def degenerate_weights(channels, grid_shape=None):
    """One head, one key, zero offsets, identity maps: reduces to fixed bilinear sampling."""
    eye = np.eye(channels)[None]
    q = None if grid_shape is None else np.zeros(tuple(grid_shape) + (channels,))
    return DeformableWeights(eye, eye, np.zeros((1, channels)), np.zeros(1),
                             np.zeros((2, channels)), np.zeros(2), 8.0, q)


def random_weights(seed, c_in, n_head=4, n_key=4, c_v=None, c_out=None, c_q=None,
                   grid_shape=None, rho_max=8.0, offset_scale=1.0):
    rng = np.random.default_rng(seed)
    c_v = c_in if c_v is None else c_v
    c_out = c_in if c_out is None else c_out
    c_q = c_in if c_q is None else c_q
    HK = n_head * n_key
    q = None if grid_shape is None else rng.normal(size=tuple(grid_shape) + (c_q,))
    return DeformableWeights(
        value_weights=rng.normal(scale=1.0 / np.sqrt(c_in), size=(n_head, c_v, c_in)),
        output_weights=rng.normal(scale=1.0 / np.sqrt(c_v * n_head), size=(n_head, c_out, c_v)),
        attn_weight=rng.normal(size=(HK, c_q)),
        attn_bias=rng.normal(size=HK),
        offset_weight=rng.normal(scale=offset_scale, size=(2 * HK, c_q)),
        offset_bias=rng.normal(scale=offset_scale, size=2 * HK),
        rho_max=rho_max,
        queries=q,
    )


def encode_weights(w):
    gx, gy = (0, 0) if w.queries is None else w.queries.shape[:2]
    dims = (w.n_head, w.n_key, w.c_in, w.c_v, w.c_out, w.c_q, gx, gy)
    out = MAGIC + struct.pack("<H8If", VERSION, *dims, w.rho_max)
    blocks = [w.value_weights, w.output_weights, w.attn_weight, w.attn_bias, w.offset_weight, w.offset_bias]
    if w.queries is not None:
        blocks.append(w.queries)
    for b in blocks:
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    return out


def decode_weights(buf):
    head = struct.calcsize("<H8If")
    if len(buf) < 4 + head or buf[:4] != MAGIC:
        raise DataError("not a BEVW weight file (bad magic)")
    version, *rest = struct.unpack_from("<H8If", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported BEVW version {version}")
    H, K, C, Cv, Co, Cq, gx, gy = rest[:8]
    rho = rest[8]
    shapes = [(H, Cv, C), (H, Co, Cv), (H * K, Cq), (H * K,), (H * K * 2, Cq), (H * K * 2,)]
    if gx and gy:
        shapes.append((gx, gy, Cq))
    off = 4 + head
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        if len(buf) < off + 4 * n:
            raise DataError("truncated BEVW weight file")
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shp))
        off += 4 * n
    if off != len(buf):
        raise DataError(f"BEVW weight file has {len(buf) - off} trailing bytes")
    q = arrays[6] if len(arrays) == 7 else None
    try:
        return DeformableWeights(*arrays[:6], rho_max=rho, queries=q)
    except ConfigurationError as exc:
        raise DataError(f"invalid weights: {exc}") from exc


def save_weights(path, w):
    with open(path, "wb") as f:
        f.write(encode_weights(w))


def load_weights(path):
    with open(path, "rb") as f:
        return decode_weights(f.read())

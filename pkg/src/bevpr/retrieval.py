"""Place database, exact top-N retrieval and the Recall@N evaluation protocol.

Database file layout (little-endian)::

    b"BEVDB" | version u16 | config hash u64 | count u64 | count * (id u64, x f64, y f64, yaw f64, feature 256 * f32)
"""

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .spectral import PATCH, PlaceFeature, PolarBev

log = logging.getLogger(__name__)

DB_MAGIC = b"BEVDB"
DB_VERSION = 1
DIM = PATCH * PATCH
_REC = struct.Struct("<Q3d")
DEDUP_SPACING = 0.20


@dataclass(frozen=True, eq=False)
class PlaceRecord:
    id: int
    pose: tuple
    feature: PlaceFeature
    polar: PolarBev = None

    def __post_init__(self):
        pose = tuple(float(p) for p in self.pose)
        if len(pose) != 3 or not np.all(np.isfinite(pose)):
            raise ValueError(f"record {self.id}: pose must be three finite numbers")
        object.__setattr__(self, "pose", pose)

    @property
    def xy(self):
        return np.array(self.pose[:2])


class EmptyDatabaseError(LookupError):
    pass


class PlaceDatabase:
    """Records plus a KD-tree over their 256-dim place features.

    Features are held at float32 precision, the same as on disk, so a saved
    and reloaded database answers queries identically. Queries are rounded
    to the same precision before comparison.
    """

    def __init__(self, records=()):
        self.records = list(records)
        provs = {r.feature.provenance for r in self.records}
        self.provenance = provs.pop() if len(provs) == 1 else 0
        self.ids = np.array([r.id for r in self.records], dtype=np.int64)
        if len(set(self.ids.tolist())) != len(self.ids):
            seen, dup = set(), None
            for i in self.ids.tolist():
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ValueError(f"duplicate place id {dup}")
        self._by_id = {int(i): n for n, i in enumerate(self.ids)}
        if self.records:
            self.matrix = np.stack([r.feature.vector for r in self.records]).astype(np.float32).astype(np.float64)
            self.poses = np.array([r.pose for r in self.records])
            self.tree = cKDTree(self.matrix)
        else:
            self.matrix = np.zeros((0, DIM))
            self.poses = np.zeros((0, 3))
            self.tree = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, place_id):
        return self.records[self._by_id[int(place_id)]]

    def query_top_n(self, q, n):
        """The ``n`` nearest records as ``[(id, distance), ...]``, ascending, ties by smaller id."""
        if self.tree is None:
            raise EmptyDatabaseError("cannot query an empty place database")
        if n < 1:
            raise ValueError(f"N must be >= 1, got {n}")
        qv = np.asarray(q.vector if isinstance(q, PlaceFeature) else q, dtype=np.float64).reshape(-1)
        # compare at the stored precision
        qv = qv.astype(np.float32).astype(np.float64)
        if qv.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"query has {qv.shape[0]} dims, database {self.matrix.shape[1]}")
        k = min(n, len(self))
        dk, _ = self.tree.query(qv, k=k)
        radius = float(np.max(dk))
        # pull in everything tied with the k-th neighbour so the id tie-break is exact
        cand = np.asarray(self.tree.query_ball_point(qv, radius * (1 + 1e-9) + 1e-12), dtype=np.intp)
        dist = np.linalg.norm(self.matrix[cand] - qv, axis=1)
        order = np.lexsort((self.ids[cand], dist))[:k]
        return [(int(self.ids[cand[i]]), float(dist[i])) for i in order]

    def save(self, path, with_polar=True):
        with open(path, "wb") as f:
            f.write(DB_MAGIC + struct.pack("<HQQ", DB_VERSION, self.provenance, len(self)))
            for r, row in zip(self.records, self.matrix):
                f.write(_REC.pack(r.id, *r.pose))
                f.write(row.astype("<f4").tobytes())
        polars = [r.polar for r in self.records]
        if with_polar and self.records and all(p is not None for p in polars):
            np.savez(polar_sidecar(path), ids=self.ids, r_max=np.array([polars[0].r_max]),
                     polar=np.stack([p.data for p in polars]).astype(np.float32))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            buf = f.read()
        head = len(DB_MAGIC) + 18
        if len(buf) < head or buf[: len(DB_MAGIC)] != DB_MAGIC:
            raise DataError(f"{path}: not a BEVDB database (bad magic)")
        version, prov, count = struct.unpack_from("<HQQ", buf, len(DB_MAGIC))
        if version != DB_VERSION:
            raise DataError(f"{path}: unsupported database version {version}")
        rec_size = _REC.size + 4 * DIM
        if len(buf) != head + count * rec_size:
            raise DataError(f"{path}: expected {count} records ({head + count * rec_size} bytes), got {len(buf)} bytes")
        polar = _load_polar(path)
        records = []
        off = head
        for n in range(count):
            pid, x, y, yaw = _REC.unpack_from(buf, off)
            vals = np.frombuffer(buf, dtype="<f4", count=DIM, offset=off + _REC.size).astype(np.float64)
            off += rec_size
            try:
                feat = PlaceFeature(vals, prov)
            except ValueError as exc:
                raise DataError(f"{path}: record {pid}: {exc}") from exc
            pb = polar.get(pid) if polar else None
            records.append(PlaceRecord(pid, (x, y, yaw), feat, pb))
        try:
            return cls(records)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc


def polar_sidecar(path):
    return str(path) + ".polar.npz"


def _load_polar(path):
    side = polar_sidecar(path)
    if not os.path.exists(side):
        return None
    with np.load(side) as z:
        r_max = float(z["r_max"][0])
        return {int(i): PolarBev(p.astype(np.float64), r_max) for i, p in zip(z["ids"], z["polar"])}


def build_database(records):
    return PlaceDatabase(records)


def dedup_trajectory(records, spacing=DEDUP_SPACING):
    """Drop records closer than ``spacing`` metres (planar) to the last kept one."""
    kept = []
    last = None
    for r in records:
        xy = np.asarray(r.pose[:2], dtype=np.float64)
        # tolerance so that exactly-at-threshold spacing survives float rounding
        if last is None or np.hypot(*(xy - last)) >= spacing - 1e-9:
            kept.append(r)
            last = xy
    return kept


@dataclass
class EvalReport:
    recall: dict
    criterion: float
    retrievals: list = field(default_factory=list)
    yaw_quartiles: tuple = None
    curve: list = None

    def recall_rows(self):
        return [(n, self.recall[n]) for n in sorted(self.recall)]


def _planar(a, b):
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def recall_at_n(db, queries, n_max=25, d=2.0):
    """Recall@N for ``N = 1..n_max``: a query is localised at N when one of its top-N lies within ``d`` metres."""
    if len(db) == 0:
        raise EmptyDatabaseError("cannot evaluate against an empty database")
    if not queries:
        raise ValueError("need at least one query")
    hits = np.zeros(n_max, dtype=np.int64)
    retrievals = []
    for q in queries:
        top = db.query_top_n(q.feature, n_max)
        retrievals.append((q.id, [i for i, _ in top], [dist for _, dist in top]))
        ok = np.array([_planar(db[i].pose, q.pose) <= d for i, _ in top])
        first = np.argmax(ok) if ok.any() else None
        if first is not None:
            hits[first:] += 1
    recall = {n + 1: float(hits[n]) / len(queries) for n in range(n_max)}
    return EvalReport(recall, float(d), retrievals)


def recall_vs_criterion(db, queries, n=1, d_list=tuple(range(2, 21))):
    """``[(d, recall@n), ...]`` for each revisit distance ``d``."""
    ranked = [(q, db.query_top_n(q.feature, n)) for q in queries]
    curve = []
    for d in d_list:
        hit = sum(any(_planar(db[i].pose, q.pose) <= d for i, _ in top) for q, top in ranked)
        curve.append((float(d), hit / len(queries)))
    return curve


def angular_error(est, truth):
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    return np.abs((np.asarray(est, dtype=np.float64) - truth + 180.0) % 360.0 - 180.0)


def yaw_error_quartiles(estimates):
    """``(q25, q50, q75)`` of wrapped absolute yaw errors for ``[(estimated, truth), ...]`` in degrees."""
    if len(estimates) == 0:
        raise ValueError("need at least one yaw estimate")
    est = np.array([e for e, _ in estimates], dtype=np.float64)
    gt = np.array([t for _, t in estimates], dtype=np.float64)
    err = angular_error(est, gt)
    q = np.percentile(err, [25, 50, 75], method="linear")
    return float(q[0]), float(q[1]), float(q[2])

"""Command-line entry points: ``synth``, ``build-db``, ``query`` and ``eval``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .deform import load_weights
from .errors import ConfigurationError, DataError
from .geometry import load_rig, save_rig, surround_rig
from .lidar import load_cloud, save_cloud
from .manifest import ManifestEntry, load_image, read_manifest, save_image, write_manifest
from .pipeline import STAGES, PipelineConfig, PlaceEncoder
from .retrieval import (
    EmptyDatabaseError,
    PlaceDatabase,
    PlaceRecord,
    dedup_trajectory,
    recall_at_n,
    recall_vs_criterion,
    yaw_error_quartiles,
)
from .spectral import estimate_yaw
from .synth import LidarConfig, make_revisit_set, make_scene, render_views, sample_lidar

log = logging.getLogger("bevpr")

STAGE_LABELS = {"image_feature": "Image Feature", "bev_feature": "BEV Feature", "aggregation": "Aggregation"}


class UsageError(Exception):
    pass


def load_config(path, mode=None, fuse=None, topn=None, criterion=None):
    if not path:
        raise UsageError("--config is required")
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    base = os.path.dirname(os.path.abspath(path))
    for key in ("rig", "weights"):
        if doc.get(key):
            doc[key] = os.path.join(base, doc[key])
    overrides = {"mode": mode, "fuse": fuse, "topn": topn, "criterion": criterion}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = PipelineConfig.from_dict(doc)
    except (ConfigurationError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not cfg.rig or not os.path.exists(cfg.rig):
        raise DataError(f"{path}: rig file not found: {cfg.rig}")
    if cfg.mode == "deformable" and not os.path.exists(cfg.weights):
        raise DataError(f"{path}: weights file not found: {cfg.weights}")
    return cfg


def make_encoder(cfg):
    rig = load_rig(cfg.rig)
    weights = load_weights(cfg.weights) if cfg.mode == "deformable" else None
    try:
        return PlaceEncoder(cfg, rig, weights)
    except ConfigurationError as exc:
        raise DataError(str(exc)) from exc


def _encode_entry(encoder, entry):
    images = [load_image(p) for p in entry.images]
    cloud = None
    if encoder.config.fuse:
        if not entry.cloud:
            raise DataError(f"entry {entry.id}: fusion enabled but no cloud path given")
        if not os.path.exists(entry.cloud):
            raise DataError(f"entry {entry.id}: cloud not found: {entry.cloud}")
        cloud = load_cloud(entry.cloud)
    try:
        out = encoder.encode(images, cloud)
    except (ValueError, ConfigurationError) as exc:
        raise DataError(f"entry {entry.id}: {exc}") from exc
    return PlaceRecord(entry.id, entry.pose, out.feature, out.polar), out.timings


def encode_manifest(encoder, entries, workers=1):
    """Records in manifest order; feature computation optionally threaded."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda e: _encode_entry(encoder, e), entries))
    return [_encode_entry(encoder, e) for e in entries]


def cmd_build_db(cfg, manifest, out, workers=1):
    encoder = make_encoder(cfg)
    entries = read_manifest(manifest, len(encoder.rig))
    kept = dedup_trajectory(entries)
    if len(kept) < len(entries):
        log.info("dedup: kept %d of %d entries (>= 0.20 m spacing)", len(kept), len(entries))
    results = encode_manifest(encoder, kept, workers)
    records = sorted((r for r, _ in results), key=lambda r: r.id)
    db = PlaceDatabase(records)
    db.save(out)
    with open(out + ".timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id"] + [f"{s}_ms" for s in STAGES])
        for r, t in results:
            w.writerow([r.id] + ["%.3f" % (1e3 * t[s]) for s in STAGES])
    for s in STAGES:
        mean = 1e3 * np.mean([t[s] for _, t in results]) if results else 0.0
        log.info("%s: %.2f ms per place", STAGE_LABELS[s], mean)
    log.info("wrote %d records to %s", len(db), out)
    return db


def _load_db(path, encoder):
    if not path or not os.path.exists(path):
        raise DataError(f"database not found: {path}")
    db = PlaceDatabase.load(path)
    if len(db) == 0:
        raise DataError(f"{path}: database is empty")
    if db.provenance != encoder.provenance:
        raise DataError(f"{path}: database was built with a different pipeline config "
                        f"(hash {db.provenance:016x}, current {encoder.provenance:016x})")
    return db


def query_rows(cfg, db, records, topn):
    """One row per query: id, ``topn`` (id, distance) pairs, top-1 yaw estimate."""
    rows = []
    for q in records:
        top = db.query_top_n(q.feature, topn)
        row = [q.id]
        for i in range(topn):
            row += [top[i][0], "%.9g" % top[i][1]] if i < len(top) else ["", ""]
        best = db[top[0][0]]
        if q.polar is not None and best.polar is not None:
            est = estimate_yaw(q.polar, best.polar, cfg.yaw_temperature, cfg.yaw_offset)
            row.append("%.6g" % est.argmax_angle)
        else:
            row.append("")
        rows.append(row)
    return rows


def cmd_query(cfg, db_path, manifest, out, topn=None, workers=1):
    topn = topn or cfg.topn
    encoder = make_encoder(cfg)
    db = _load_db(db_path, encoder)
    entries = read_manifest(manifest, len(encoder.rig))
    records = [r for r, _ in encode_manifest(encoder, entries, workers)]
    rows = query_rows(cfg, db, records, topn)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id"] + sum(([f"id_{i}", f"dist_{i}"] for i in range(1, topn + 1)), []) + ["yaw_deg"])
        w.writerows(rows)
    return rows


def cmd_eval(cfg, db_path, manifest, out_dir, topn=None, criterion=None, plot=False, workers=1):
    topn = topn or cfg.topn
    d = cfg.criterion if criterion is None else criterion
    encoder = make_encoder(cfg)
    db = _load_db(db_path, encoder)
    entries = read_manifest(manifest, len(encoder.rig))
    if not entries:
        raise DataError(f"{manifest}: no query entries with ground truth")
    queries = [r for r, _ in encode_manifest(encoder, entries, workers)]
    report = recall_at_n(db, queries, topn, d)
    report.curve = recall_vs_criterion(db, queries, 1, range(2, 21))
    pairs = []
    for q, (_, ids, _) in zip(queries, report.retrievals):
        best = db[ids[0]]
        if q.polar is None or best.polar is None:
            continue
        if np.hypot(best.pose[0] - q.pose[0], best.pose[1] - q.pose[1]) > d:
            continue
        est = estimate_yaw(q.polar, best.polar, cfg.yaw_temperature, cfg.yaw_offset).argmax_angle
        pairs.append((est, (q.pose[2] - best.pose[2]) % 360.0))
    report.yaw_quartiles = yaw_error_quartiles(pairs) if pairs else (float("nan"),) * 3
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "recall.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["N", "recall"])
        w.writerows([n, "%.6f" % r] for n, r in report.recall_rows())
    with open(os.path.join(out_dir, "criterion.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["d", "recall@1"])
        w.writerows(["%g" % dd, "%.6f" % r] for dd, r in report.curve)
    with open(os.path.join(out_dir, "yaw_quartiles.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["q25", "q50", "q75"])
        w.writerow(["%.4f" % v for v in report.yaw_quartiles])
    if plot:
        _plot(report, out_dir)
    log.info("Recall@1 %.4f  Recall@5 %.4f  yaw quartiles %s", report.recall[1],
             report.recall[min(5, topn)], "/".join("%.2f" % v for v in report.yaw_quartiles))
    return report


def _plot(report, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    n, r = zip(*report.recall_rows())
    ax[0].plot(n, r, marker="o")
    ax[0].set_xlabel("N")
    ax[0].set_ylabel("Recall@N")
    d, rc = zip(*report.curve)
    ax[1].plot(d, rc, marker="o")
    ax[1].set_xlabel("revisit criterion d [m]")
    ax[1].set_ylabel("Recall@1")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "recall.png"), dpi=100)
    plt.close(fig)


def _write_session(out_dir, name, scene, rig, visits, image_ext, lidar):
    img_dir = os.path.join(out_dir, "images")
    pc_dir = os.path.join(out_dir, "clouds")
    entries = []
    for v in visits:
        ims = render_views(scene, rig, v.pose)
        paths = []
        for k, im in enumerate(ims):
            p = os.path.join(img_dir, f"{name}_{v.id:05d}_{k}{image_ext}")
            save_image(p, im)
            paths.append(p)
        cloud = None
        if lidar:
            cloud = os.path.join(pc_dir, f"{name}_{v.id:05d}.pcxyz")
            save_cloud(cloud, sample_lidar(scene, v.pose, LidarConfig()))
        entries.append(ManifestEntry(v.id, v.pose, tuple(paths), cloud))
    write_manifest(os.path.join(out_dir, f"{name}.csv"), entries, len(rig))


def cmd_synth(out_dir, places, seed=0, yaw_range=180.0, jitter=0.5, spacing=5.0, lidar=True,
              texture_contrast=0.35, image_ext=".png", n_landmarks=400, config=None):
    if places < 1:
        raise UsageError("--places must be at least 1")
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory is not writable: {out_dir}")
    scene = make_scene(n_landmarks=n_landmarks, seed=seed, texture_contrast=texture_contrast)
    rig = surround_rig()
    rs = make_revisit_set(scene, places, yaw_range, jitter, seed=seed + 1, spacing=spacing)
    save_rig(os.path.join(out_dir, "rig.json"), rig)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(scene.to_dict(), f)
    cfg = config or replace(PipelineConfig(), fuse=False)
    doc = cfg.to_dict()
    doc["rig"] = "rig.json"
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    _write_session(out_dir, "database", scene, rig, rs.database, image_ext, lidar)
    _write_session(out_dir, "queries", scene, rig, rs.queries, image_ext, lidar)
    with open(os.path.join(out_dir, "ground_truth.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "db_id", "yaw_delta_deg"])
        for q in rs.queries:
            w.writerow([q.id, rs.ground_truth[q.id], repr(rs.yaw_deltas[q.id])])
    return rs


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bevpr", description="BEV place recognition: build databases, query, evaluate")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, db=False, manifest=True):
        sp.add_argument("--config", help="pipeline config JSON")
        if db:
            sp.add_argument("--db", help="database file")
        if manifest:
            sp.add_argument("--manifest", help="session manifest CSV")
        sp.add_argument("--out", required=True)
        sp.add_argument("--mode", choices=("vanilla", "deformable"))
        sp.add_argument("--fuse", action="store_true", default=None, help="fuse LiDAR polar BEV channels")
        sp.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("build-db", help="encode a session manifest into a place database"))
    q = sub.add_parser("query", help="retrieve top-N places for each query")
    common(q, db=True)
    q.add_argument("--topn", type=int)
    e = sub.add_parser("eval", help="Recall@N, recall vs. revisit criterion and yaw quartiles")
    common(e, db=True)
    e.add_argument("--topn", type=int)
    e.add_argument("--criterion-meters", type=float)
    e.add_argument("--plot", action="store_true")
    s = sub.add_parser("synth", help="generate a synthetic world with database/query manifests")
    s.add_argument("--config", help="JSON with synth options (places, yaw_range, jitter, spacing, ...)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--places", type=int)
    s.add_argument("--yaw-range", type=float)
    s.add_argument("--jitter", type=float)
    s.add_argument("--no-lidar", action="store_true")
    return p


SYNTH_KEYS = ("places", "yaw_range", "jitter", "spacing", "texture_contrast", "n_landmarks", "image_ext")


def _synth_from_args(args):
    opts = {}
    if args.config:
        if not os.path.exists(args.config):
            raise DataError(f"synth config not found: {args.config}")
        with open(args.config) as f:
            doc = json.load(f)
        unknown = set(doc) - set(SYNTH_KEYS) - {"seed", "lidar"}
        if unknown:
            raise UsageError(f"unknown synth config keys: {sorted(unknown)}")
        opts.update(doc)
    for k in ("places", "yaw_range", "jitter"):
        if getattr(args, k) is not None:
            opts[k] = getattr(args, k)
    if args.no_lidar:
        opts["lidar"] = False
    if args.seed is not None:
        opts["seed"] = args.seed
    if "places" not in opts:
        raise UsageError("--places is required")
    return cmd_synth(args.out, **opts)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "synth":
            _synth_from_args(args)
            return 0
        if not args.manifest:
            raise UsageError("--manifest is required")
        cfg = load_config(args.config, args.mode, args.fuse, getattr(args, "topn", None),
                          getattr(args, "criterion_meters", None))
        if args.command == "build-db":
            cmd_build_db(cfg, args.manifest, args.out, args.workers)
        elif args.command == "query":
            cmd_query(cfg, args.db, args.manifest, args.out, args.topn, args.workers)
        elif args.command == "eval":
            cmd_eval(cfg, args.db, args.manifest, args.out, args.topn, args.criterion_meters,
                     args.plot, args.workers)
    except UsageError as exc:
        print(f"bevpr: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, EmptyDatabaseError, ConfigurationError) as exc:
        print(f"bevpr: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

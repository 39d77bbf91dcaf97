"""Session manifests: one place per CSV row.

Columns: ``id, x, y, yaw, image_0 .. image_{K-1}, cloud``. Paths are
relative to the manifest's directory; ``cloud`` may be empty. Images are
PNG (scaled to [0, 1]) or ``.bevt`` float tensors.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .tensorio import TensorFormatError, load_tensor, save_tensor


@dataclass(frozen=True)
class ManifestEntry:
    id: int
    pose: tuple
    images: tuple
    cloud: str = None


def header(n_views):
    return ["id", "x", "y", "yaw"] + [f"image_{k}" for k in range(n_views)] + ["cloud"]


def write_manifest(path, entries, n_views):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header(n_views))
        for e in entries:
            rel = [os.path.relpath(p, base) for p in e.images]
            cloud = os.path.relpath(e.cloud, base) if e.cloud else ""
            w.writerow([e.id, repr(float(e.pose[0])), repr(float(e.pose[1])), repr(float(e.pose[2]))] + rel + [cloud])


def read_manifest(path, n_views=None):
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:4] != ["id", "x", "y", "yaw"]:
        raise DataError(f"{path}: missing header row 'id,x,y,yaw,image_0,...,cloud'")
    n_img = len(rows[0]) - 5
    if n_img < 1 or rows[0][-1] != "cloud":
        raise DataError(f"{path}: header must end with image columns and 'cloud'")
    if n_views is not None and n_img != n_views:
        raise DataError(f"{path}: manifest lists {n_img} views, rig has {n_views}")
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n_img + 5:
            raise DataError(f"{path}:{line}: expected {n_img + 5} columns, got {len(row)}")
        try:
            pid = int(row[0])
            pose = tuple(float(v) for v in row[1:4])
        except ValueError as exc:
            raise DataError(f"{path}:{line}: bad id or pose ({exc})") from exc
        if not np.all(np.isfinite(pose)):
            raise DataError(f"{path}:{line}: entry {pid} has a non-finite pose")
        if pid in seen:
            raise DataError(f"{path}:{line}: duplicate place id {pid}")
        seen.add(pid)
        imgs = tuple(os.path.join(base, p) for p in row[4: 4 + n_img])
        cloud = os.path.join(base, row[-1]) if row[-1] else None
        entries.append(ManifestEntry(pid, pose, imgs, cloud))
    return entries


def load_image(path):
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    try:
        if path.endswith(".bevt"):
            img = load_tensor(path).astype(np.float64)
        else:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, TensorFormatError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return img


def save_image(path, img):
    if path.endswith(".bevt"):
        save_tensor(path, img)
        return
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, optimize=False)

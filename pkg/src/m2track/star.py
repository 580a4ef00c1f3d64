"""Optional ingestion of externally provided retinal tracking cases.

The core test suite runs entirely on bundled synthetic phantoms; real-image
evaluation is gated behind a local directory the user populates (for
example from the STAR retinal annotations).  Expected layout, one case per
index N:

    imageN.png          grayscale fundus image
    imageN_mask.png     binary vessel ground-truth mask
    imageN_points.json  {"seeds": [[x, y], ...], "tips": [...],
                         "bifurcations": [...], "crossings": [...]}
    checksums.json      optional {filename: sha256-hex} manifest

Point coordinates follow this package's convention: x = column, y = row,
in pixels.
"""

from __future__ import annotations

import hashlib
import json
import os

from .grid import load_image


class DatasetError(RuntimeError):
    pass


def verify_manifest(directory) -> int:
    """Check every file listed in checksums.json; returns the count checked.

    Missing manifest means nothing to verify (returns 0); a digest mismatch
    raises DatasetError.
    """
    manifest = os.path.join(directory, "checksums.json")
    if not os.path.exists(manifest):
        return 0
    with open(manifest) as f:
        wanted = json.load(f)
    for name, digest in sorted(wanted.items()):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DatasetError(f"manifest lists {name} but it is missing")
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            h.update(fh.read())
        if h.hexdigest() != digest:
            raise DatasetError(f"checksum mismatch for {name}")
    return len(wanted)


def load_case(directory, index: int):
    """Load (image, mask, points) for one annotated case."""
    img_path = os.path.join(directory, f"image{index}.png")
    mask_path = os.path.join(directory, f"image{index}_mask.png")
    pts_path = os.path.join(directory, f"image{index}_points.json")
    for p in (img_path, mask_path, pts_path):
        if not os.path.exists(p):
            raise DatasetError(f"case {index}: missing {os.path.basename(p)}")
    image = load_image(img_path)
    mask = load_image(mask_path) > 0.5
    with open(pts_path) as f:
        points = json.load(f)
    for key in ("seeds", "tips"):
        if key not in points:
            raise DatasetError(f"case {index}: points file lacks {key!r}")
    points.setdefault("bifurcations", [])
    points.setdefault("crossings", [])
    return image, mask, points

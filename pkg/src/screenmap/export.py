"""Deterministic CSV / JSON / GeoJSON artifact writers.

Every artifact carries the run's config hash and master seed: CSV files in a
leading ``#`` comment line, JSON and GeoJSON documents under a top-level
``"meta"`` key. Floats are written with the shortest round-trip repr, so
identical inputs give identical bytes.
"""

import csv
import hashlib
import io
import json
import math
import os
import re
import tempfile

import numpy as np


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj, compact=False):
    """Canonical JSON text: sorted keys, NaN written as null; 2-space indent unless compact."""
    if compact:
        return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def canonical_digest(obj):
    text = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return sha256_bytes(text.encode())


def fmt_float(v):
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def meta_line(meta):
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items())


def csv_text(header, rows, meta=None):
    out = io.StringIO()
    if meta:
        out.write(meta_line(meta) + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()


def read_csv(path):
    """Read a CSV artifact. Returns ``(meta, header, rows)``; meta parsed from the comment line."""
    meta = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        else:
            body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    return meta, header, list(reader)


def json_artifact(payload, meta, compact=False):
    doc = dict(payload)
    doc["meta"] = meta
    return dumps(doc, compact=compact)


def write_atomic(path, text):
    """Write text via a temporary file and rename, so readers never see a partial artifact."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(name))


# --- GeoJSON -----------------------------------------------------------------

def load_geometry(path, id_property="id"):
    """Map unit id -> GeoJSON geometry from a FeatureCollection (polygons or anything else)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    out = {}
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        key = props.get(id_property, feat.get("id"))
        if key is None:
            raise ValueError(f"{path}: feature without {id_property!r} property")
        out[str(key)] = feat.get("geometry")
    return out


def feature_collection(ids, lat, lon, properties, geometry=None, meta=None):
    """FeatureCollection keyed by unit id.

    Units use the supplied geometry when ``geometry`` has their id, else a
    Point at the centroid (GeoJSON order: lon, lat).
    """
    features = []
    for i, uid in enumerate(ids):
        geom = geometry.get(str(uid)) if geometry else None
        if geom is None:
            geom = {"type": "Point", "coordinates": [float(lon[i]), float(lat[i])]}
        props = {"id": str(uid)}
        props.update(properties[i])
        features.append({"type": "Feature", "id": str(uid), "geometry": geom, "properties": props})
    doc = {"type": "FeatureCollection", "features": features}
    if meta is not None:
        doc["meta"] = meta
    return dumps(doc)

"""Command-line interface: batch pipeline plus one subcommand per stage.

Stages read their inputs from the output directory and write their
artifacts back into it::

    impute   -> validation.json imputation.json summary.json units_prepared.csv
    hotspot  -> hotspots.csv hotspots.geojson (+ hotspots_rate_y1.csv, hotspots_rate_y2.csv)
    classify -> classes.csv jenks.json map.geojson
    train    -> split.json cv_table.json comparison.json forest.json
    explain  -> shap_importance.csv shap_values.csv shap_scatter_<feature>.csv explanation.json

``pipeline`` runs them in that order. Exit codes: 0 success, 2 validation
failure, 3 stage failure, 4 configuration error.
"""

import argparse
import copy
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .explain import mean_abs_shap, sample_background, shap_forest, shap_scatter_export, top_features
from .export import (
    csv_text,
    dumps,
    feature_collection,
    fmt_float,
    json_artifact,
    load_geometry,
    read_csv,
    safe_name,
    sha256_file,
    canonical_digest,
    write_atomic,
)
from .geo import accessibility_features
from .impute import impute_knn
from .ingest import (
    ACCESSIBILITY_SCHEMA,
    INPUT_SCHEMA,
    SchemaError,
    build_response,
    filter_eligible,
    parse_facilities,
    parse_units,
    schema_from_config,
    serialize_facilities,
    serialize_units,
    summary_stats,
)
from .models import ForestConfig, ForestModel, SvrParams, compare_models, train_test_split
from .rng import derive_seed
from .spatial_stats import GetisOrdGiStar, assign_classes, jenks_breaks
from .synth import SCENARIOS, synth_generate

log = logging.getLogger("screenmap")

CONFIG_ENV = "SCREENMAP_CONFIG"
LOCK_NAME = ".screenmap.lock"
MANIFEST = "manifest.json"
PREPARED = "units_prepared.csv"

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3, 4

# sub-seed keys under the master seed
SPLIT_KEY, FOREST_KEY, CV_KEY, SVR_KEY, BACKGROUND_KEY = 10, 11, 12, 13, 14

DEFAULT_CONFIG = {
    "inputs": {"units": "units.csv", "facilities": "facilities.csv", "geometry": None},
    "schema": None,
    "accessibility": {"radius_miles": 10.0},
    "impute": {"k": 20},
    "hotspot": {"variable": "response", "weights": "knn", "k": 8, "distance_miles": None, "fdr": False,
                "per_rate": True},
    "classify": {"variable": "response", "k": 5},
    "model": {
        "split_fraction": 0.75,
        "cv_folds": 5,
        "grid": {"n_trees": [100, 300, 500], "mtry": [2, 4, 6, 8]},
        "min_leaf": 5,
        "max_depth": None,
        "svr": {"C": 1.0, "epsilon": 0.1, "epochs": 50, "eta0": 0.05},
    },
    "explain": {"background_size": 100, "threshold": 0.3, "partition": "test", "scatter": "top"},
    "map": {"id_property": "id"},
    "seed": 0,
    "n_jobs": 1,
    "output_dir": "screenmap_out",
}

# settings that change how a run executes but never what it computes
EXECUTION_KEYS = ("n_jobs", "output_dir")
PATH_KEYS = (("inputs", "units"), ("inputs", "facilities"), ("inputs", "geometry"), ("output_dir",))


class ConfigError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


class UpstreamMissing(Exception):
    pass


# --- configuration -----------------------------------------------------------

def _merge(base, update, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{path}'")
        if isinstance(base[key], dict) and key != "grid":
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key '{path}' must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _get(cfg, path):
    node = cfg
    for part in path:
        node = node[part]
    return node


def _set(cfg, path, value):
    node = cfg
    for part in path[:-1]:
        node = node[part]
    node[path[-1]] = value


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], value); the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _apply_override(cfg, path, value):
    node = cfg
    for i, part in enumerate(path[:-1]):
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown configuration key '{'.'.join(path[:i + 1])}'")
        node = node[part]
    if not isinstance(node, dict) or path[-1] not in node:
        raise ConfigError(f"unknown configuration key '{'.'.join(path)}'")
    node[path[-1]] = value


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _is_int(v, low=None):
    return isinstance(v, int) and not isinstance(v, bool) and (low is None or v >= low)


def _is_num(v, positive=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
    return ok and (not positive or v > 0)


def validate_config(cfg):
    _check(isinstance(cfg["inputs"]["units"], str), "inputs.units must be a path")
    _check(cfg["inputs"]["facilities"] is None or isinstance(cfg["inputs"]["facilities"], str),
           "inputs.facilities must be a path or null")
    _check(_is_num(cfg["accessibility"]["radius_miles"], positive=True), "accessibility.radius_miles must be > 0")
    _check(_is_int(cfg["impute"]["k"], 1), "impute.k must be an integer >= 1")
    hs = cfg["hotspot"]
    _check(hs["weights"] in ("knn", "distance_band"), "hotspot.weights must be 'knn' or 'distance_band'")
    _check(_is_int(hs["k"], 1), "hotspot.k must be an integer >= 1")
    if hs["weights"] == "distance_band":
        _check(_is_num(hs["distance_miles"], positive=True), "hotspot.distance_miles must be > 0 for distance_band")
    _check(isinstance(hs["fdr"], bool), "hotspot.fdr must be true or false")
    _check(isinstance(hs["per_rate"], bool), "hotspot.per_rate must be true or false")
    _check(_is_int(cfg["classify"]["k"], 2), "classify.k must be an integer >= 2")
    m = cfg["model"]
    _check(_is_num(m["split_fraction"]) and 0 < m["split_fraction"] < 1, "model.split_fraction must lie in (0, 1)")
    _check(_is_int(m["cv_folds"], 2), "model.cv_folds must be an integer >= 2")
    grid = m["grid"]
    _check(isinstance(grid, dict) and set(grid) == {"n_trees", "mtry"}, "model.grid needs exactly n_trees and mtry")
    for key in ("n_trees", "mtry"):
        vals = grid[key]
        _check(isinstance(vals, list) and vals and all(_is_int(v, 1) for v in vals),
               f"model.grid.{key} must be a non-empty list of positive integers")
    _check(_is_int(m["min_leaf"], 1), "model.min_leaf must be an integer >= 1")
    _check(m["max_depth"] is None or _is_int(m["max_depth"], 0), "model.max_depth must be null or >= 0")
    svr = m["svr"]
    _check(_is_num(svr["C"], positive=True) and _is_num(svr["eta0"], positive=True), "model.svr C and eta0 must be > 0")
    _check(_is_num(svr["epsilon"]) and svr["epsilon"] >= 0, "model.svr.epsilon must be >= 0")
    _check(_is_int(svr["epochs"], 1), "model.svr.epochs must be an integer >= 1")
    ex = cfg["explain"]
    _check(_is_int(ex["background_size"], 1), "explain.background_size must be an integer >= 1")
    _check(_is_num(ex["threshold"]) and ex["threshold"] >= 0, "explain.threshold must be >= 0")
    _check(ex["partition"] in ("test", "train", "all"), "explain.partition must be 'test', 'train' or 'all'")
    _check(ex["scatter"] in ("top", "all"), "explain.scatter must be 'top' or 'all'")
    _check(_is_int(cfg["seed"], 0), "seed must be a non-negative integer")
    _check(_is_int(cfg["n_jobs"], 1), "n_jobs must be an integer >= 1")
    _check(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir must be a path")
    try:
        schema = input_schema(cfg)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad schema: {exc}") from None
    names = {f.name for f in schema}
    if cfg["inputs"]["facilities"] is not None:
        clash = names & {f.name for f in ACCESSIBILITY_SCHEMA}
        _check(not clash, f"schema feature(s) {sorted(clash)} are computed from facilities; rename or drop them")
    allowed = names | {"response", "rate_y1", "rate_y2"} | {f.name for f in ACCESSIBILITY_SCHEMA}
    for stage in ("hotspot", "classify"):
        _check(cfg[stage]["variable"] in allowed, f"{stage}.variable {cfg[stage]['variable']!r} is not a known column")


def input_schema(cfg):
    return INPUT_SCHEMA if cfg["schema"] is None else schema_from_config(cfg["schema"])


def full_schema(cfg):
    schema = tuple(input_schema(cfg))
    return schema + tuple(ACCESSIBILITY_SCHEMA) if cfg["inputs"]["facilities"] is not None else schema


class RunConfig:
    """Resolved configuration: defaults merged with a JSON file and overrides.

    Paths inside the file are relative to the file's directory; paths given
    as overrides are relative to the working directory.
    """

    def __init__(self, data):
        self.data = data

    @classmethod
    def load(cls, path=None, overrides=()):
        data = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError("config must be a JSON object")
            _merge(data, user)
            base = os.path.dirname(os.path.abspath(path))
        else:
            base = os.getcwd()
        for key in PATH_KEYS:
            value = _get(data, key)
            if isinstance(value, str):
                _set(data, key, os.path.normpath(os.path.join(base, value)))
        for text in overrides:
            keys, value = parse_override(text)
            if tuple(keys) in PATH_KEYS and isinstance(value, str):
                value = os.path.abspath(value)
            _apply_override(data, keys, value)
        validate_config(data)
        return cls(data)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return self.data["seed"]

    @property
    def n_jobs(self):
        return self.data["n_jobs"]

    @property
    def out(self):
        return self.data["output_dir"]

    def input_paths(self):
        return {k: v for k, v in self.data["inputs"].items() if v is not None}

    def input_hashes(self):
        hashes = {}
        for name, path in self.input_paths().items():
            if not os.path.isfile(path):
                raise ConfigError(f"input file not found: inputs.{name} = {path}")
            hashes[name] = sha256_file(path)
        return hashes

    def digest(self, input_hashes):
        """Hash of everything that determines the artifacts: analysis settings plus input contents."""
        analysis = {k: v for k, v in self.data.items() if k not in EXECUTION_KEYS}
        analysis = copy.deepcopy(analysis)
        analysis["inputs"] = dict(input_hashes)
        return canonical_digest(analysis)


# --- run context -------------------------------------------------------------

class Run:
    """One invocation against an output directory: lock, metadata, artifact bookkeeping."""

    def __init__(self, config):
        self.config = config
        self.out = config.out
        self.inputs = config.input_hashes()
        self.config_sha256 = config.digest(self.inputs)
        self.meta = {"config_sha256": self.config_sha256, "seed": config.seed}
        self.artifacts = {}
        self.timings = {}
        self._lock = None

    # lock ------------------------------------------------------------------
    def __enter__(self):
        os.makedirs(self.out, exist_ok=True)
        self._lock = os.path.join(self.out, LOCK_NAME)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            self._lock = None
            raise StageError("lock", f"output directory {self.out} is in use by another run "
                                     f"(delete {LOCK_NAME} there if no run is active)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        if self._lock is not None and os.path.exists(self._lock):
            os.unlink(self._lock)

    # artifacts -------------------------------------------------------------
    def path(self, name):
        return os.path.join(self.out, name)

    def write(self, stage, name, text):
        write_atomic(self.path(name), text)
        self.artifacts[name] = {"stage": stage, "sha256": sha256_file(self.path(name))}
        log.info("wrote %s", self.path(name))

    def require(self, name, stage):
        path = self.path(name)
        if not os.path.isfile(path):
            raise UpstreamMissing(f"{name} not found in {self.out}; run stage '{stage}' first")
        return path

    def write_manifest(self):
        path = self.path(MANIFEST)
        manifest = {}
        if os.path.isfile(path):
            try:
                with open(path, encoding="utf-8") as fh:
                    manifest = json.load(fh)
            except (OSError, json.JSONDecodeError):
                manifest = {}
            if manifest.get("config_sha256") != self.config_sha256:
                if manifest:
                    log.warning("configuration or inputs changed since the last run in %s; starting a new manifest",
                                self.out)
                manifest = {}
        artifacts = manifest.get("artifacts", {})
        artifacts.update(self.artifacts)
        timings = manifest.get("timings", {})
        timings.update(self.timings)
        manifest = {
            "toolkit_version": __version__,
            "config_sha256": self.config_sha256,
            "seed": self.config.seed,
            "config": self.config.data,
            "inputs": {k: {"path": p, "sha256": self.inputs[k]} for k, p in self.config.input_paths().items()},
            "artifacts": dict(sorted(artifacts.items())),
            "timings": timings,
        }
        write_atomic(path, dumps(manifest))
        return path


def run_stage(run, name, fn):
    log.info("stage %s: start", name)
    t0 = time.perf_counter()
    try:
        fn(run)
    except (ValidationFailed, StageError):
        raise
    except Exception as exc:  # any failure inside a stage aborts the run with its name
        log.debug("stage %s traceback", name, exc_info=True)
        raise StageError(name, exc) from exc
    run.timings[name] = round(time.perf_counter() - t0, 3)
    log.info("stage %s: done in %.2fs", name, run.timings[name])


# --- stages ------------------------------------------------------------------

def _read_units(run):
    cfg = run.config
    with open(cfg["inputs"]["units"], newline="", encoding="utf-8") as fh:
        try:
            return parse_units(fh, input_schema(cfg))
        except SchemaError as exc:
            raise ValidationFailed(f"units: {exc}") from None


def _read_facilities(run):
    path = run.config["inputs"]["facilities"]
    if path is None:
        return None, None
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return parse_facilities(fh)
        except SchemaError as exc:
            raise ValidationFailed(f"facilities: {exc}") from None


def _validation_doc(units_report, fac_report):
    return {"units": units_report.to_dict(), "facilities": None if fac_report is None else fac_report.to_dict()}


def stage_validate(run):
    """Parse and check the inputs; any fatal or row error is a validation failure."""
    try:
        ds, report = _read_units(run)
        fac, fac_report = _read_facilities(run)
    except ValidationFailed as exc:
        run.write("validate", "validation.json", json_artifact({"units": None, "facilities": None,
                                                                 "fatal": [str(exc)]}, run.meta))
        raise
    run.write("validate", "validation.json", json_artifact(_validation_doc(report, fac_report), run.meta))
    problems = len(report.errors) + len(report.fatal)
    if fac_report is not None:
        problems += len(fac_report.errors) + len(fac_report.fatal)
    if problems:
        raise ValidationFailed(f"{problems} validation error(s); see {run.path('validation.json')}")


def stage_impute(run):
    """Ingest, eligibility filter, accessibility features, spatial kNN imputation, summary statistics."""
    cfg = run.config
    ds, report = _read_units(run)
    fac, fac_report = _read_facilities(run)
    if report.errors:
        log.warning("%d unit row(s) rejected; see validation.json", len(report.errors))
    if fac_report is not None and fac_report.errors:
        log.warning("%d facility row(s) rejected; see validation.json", len(fac_report.errors))
    ds = filter_eligible(ds)
    log.info("%d eligible of %d parsed units", len(ds), report.n_rows - len(report.errors))
    if len(ds) == 0:
        raise ValueError("no eligible units (every unit lacks a yearly rate)")
    if fac is not None:
        nearest, counts = accessibility_features(ds.coords, fac.coords, cfg["accessibility"]["radius_miles"])
        ds = ds.with_features(ACCESSIBILITY_SCHEMA, [nearest, counts.astype(float)])
    missing = {name: int(np.isnan(ds.X[:, j]).sum()) for j, name in enumerate(ds.feature_names)}
    imputed, imp_report = impute_knn(ds, k=cfg["impute"]["k"])
    imputed = build_response(imputed)
    summary = summary_stats(imputed, missing_counts=missing)
    run.write("impute", "validation.json", json_artifact(_validation_doc(report, fac_report), run.meta))
    run.write("impute", "imputation.json", json_artifact(imp_report.to_dict(), run.meta))
    run.write("impute", "summary.json", json_artifact(summary, run.meta))
    meta = " ".join(f"{k}={v}" for k, v in run.meta.items())
    run.write("impute", PREPARED, serialize_units(imputed, comment=meta))


def load_prepared(run):
    path = run.require(PREPARED, "impute")
    with open(path, newline="", encoding="utf-8") as fh:
        ds, report = parse_units(fh, full_schema(run.config))
    if not report.ok:
        raise ValueError(f"{PREPARED} is corrupt: {report.errors[:1] or report.fatal[:1]}")
    return build_response(ds)


def _column(ds, name):
    if name == "response":
        return ds.response
    if name in ("rate_y1", "rate_y2"):
        return getattr(ds, name)
    return ds.column(name)


def _geometry(run):
    path = run.config["inputs"]["geometry"]
    return None if path is None else load_geometry(path, run.config["map"]["id_property"])


def stage_hotspot(run):
    cfg = run.config["hotspot"]
    ds = load_prepared(run)

    def gi_rows(name):
        est = GetisOrdGiStar(weights=cfg["weights"], k=cfg["k"], distance_miles=cfg["distance_miles"], fdr=cfg["fdr"])
        est.fit(_column(ds, name), coords=ds.coords, ids=ds.ids)
        classes = [c.value for c in est.classes_]
        return [(ds.ids[i], float(est.z_[i]), float(est.p_[i]), classes[i]) for i in range(len(ds))]

    rows = gi_rows(cfg["variable"])
    run.write("hotspot", "hotspots.csv", csv_text(["id", "z", "p", "class"], rows, run.meta))
    if cfg["per_rate"]:
        # each survey year gets its own map, alongside the combined variable
        for name in ("rate_y1", "rate_y2"):
            run.write("hotspot", f"hotspots_{name}.csv", csv_text(["id", "z", "p", "class"], gi_rows(name), run.meta))
    props = [{"z": r[1], "p": r[2], "class": r[3]} for r in rows]
    run.write("hotspot", "hotspots.geojson",
              feature_collection(ds.ids, ds.lat, ds.lon, props, _geometry(run), run.meta))


def stage_classify(run):
    cfg = run.config["classify"]
    ds = load_prepared(run)
    _, header, hot_rows = read_csv(run.require("hotspots.csv", "hotspot"))
    hot = {r[0]: r for r in hot_rows}
    if [r[0] for r in hot_rows] != [str(i) for i in ds.ids]:
        raise ValueError(f"hotspots.csv does not match {PREPARED}; rerun stage 'hotspot'")
    values = _column(ds, cfg["variable"])
    jb = jenks_breaks(values, cfg["k"])
    cls = assign_classes(values, jb.breaks) + 1
    rows = [(ds.ids[i], float(values[i]), int(cls[i])) for i in range(len(ds))]
    run.write("classify", "classes.csv", csv_text(["id", "value", "jenks_class"], rows, run.meta))
    run.write("classify", "jenks.json", json_artifact(
        {"variable": cfg["variable"], "k": jb.k, "breaks": list(jb.breaks), "ssd": jb.ssd,
         "lower_bound": float(np.min(values))}, run.meta))

    def num(text):
        return float(text) if text else None

    props = [{"z": num(hot[uid][1]), "p": num(hot[uid][2]), "class": hot[uid][3], "jenks_class": c, "value": v}
             for uid, v, c in rows]
    run.write("classify", "map.geojson", feature_collection(ds.ids, ds.lat, ds.lon, props, _geometry(run), run.meta))


def stage_train(run):
    cfg = run.config["model"]
    seed = run.config.seed
    ds = load_prepared(run)
    if len(ds) < 4:
        raise ValueError(f"need at least 4 units to split into train and test, found {len(ds)}")
    split = train_test_split(len(ds), cfg["split_fraction"], derive_seed(seed, SPLIT_KEY))
    tr, te = split.train, split.test
    if len(tr) < cfg["cv_folds"]:
        raise ValueError(f"training set has {len(tr)} rows, fewer than {cfg['cv_folds']} folds")
    d = ds.X.shape[1]
    too_big = [m for m in cfg["grid"]["mtry"] if m > d]
    if too_big:
        raise ValueError(f"grid mtry values {too_big} exceed the {d} available features")
    base = ForestConfig(min_leaf=cfg["min_leaf"], max_depth=cfg["max_depth"], seed=derive_seed(seed, FOREST_KEY))
    svr = SvrParams(seed=derive_seed(seed, SVR_KEY), **cfg["svr"])
    report = compare_models(ds.X[tr], ds.response[tr], ds.X[te], ds.response[te], forest_config=base,
                            grid=cfg["grid"], cv_folds=cfg["cv_folds"], svr_params=svr,
                            seed=derive_seed(seed, CV_KEY), sample_ids=ds.ids[tr], n_jobs=run.config.n_jobs)
    forest = report.models["random_forest"]
    forest = ForestModel(forest.trees, forest.config, forest.n_features, tuple(ds.feature_names))
    log.info("selected n_trees=%d mtry=%d; test R2: %s", forest.config.n_trees, forest.config.mtry,
             ", ".join(f"{r['model']}={r['r2']:.4f}" for r in report.rows))
    run.write("train", "split.json", json_artifact(
        {"fraction": cfg["split_fraction"], "train": [str(i) for i in ds.ids[tr]],
         "test": [str(i) for i in ds.ids[te]]}, run.meta))
    run.write("train", "cv_table.json", json_artifact(report.cv_table.to_dict(), run.meta))
    comparison = report.to_dict()
    comparison.pop("cv")
    comparison["n_train"] = int(len(tr))
    comparison["n_test"] = int(len(te))
    comparison["linear_model"] = report.models["linear_regression"].to_dict()
    comparison["svr_model"] = report.models["svr"].to_dict()
    run.write("train", "comparison.json", json_artifact(comparison, run.meta))
    run.write("train", "forest.json", json_artifact(json.loads(forest.to_json()), run.meta, compact=True))


def stage_explain(run):
    cfg = run.config["explain"]
    with open(run.require("forest.json", "train"), encoding="utf-8") as fh:
        forest = ForestModel.from_dict(json.load(fh))
    with open(run.require("split.json", "train"), encoding="utf-8") as fh:
        split = json.load(fh)
    ds = load_prepared(run)
    pos = {str(uid): i for i, uid in enumerate(ds.ids)}
    try:
        train = np.array([pos[u] for u in split["train"]], dtype=np.int64)
        test = np.array([pos[u] for u in split["test"]], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"split.json names unit {exc} absent from {PREPARED}; rerun stage 'train'") from None
    rows = {"test": test, "train": train, "all": np.arange(len(ds))}[cfg["partition"]]
    if len(rows) == 0:
        raise ValueError(f"the {cfg['partition']} partition is empty")
    background, bg_idx = sample_background(ds.X[train], cfg["background_size"], derive_seed(run.config.seed, BACKGROUND_KEY))
    shap = shap_forest(forest, ds.X[rows], background, n_jobs=run.config.n_jobs)
    pred = forest.predict(ds.X[rows])
    gap = float(np.max(np.abs(shap.reconstructed() - pred)))
    ranking = mean_abs_shap(shap)
    top = top_features(ranking, cfg["threshold"])
    names = list(ds.feature_names)

    run.write("explain", "shap_importance.csv",
              csv_text(["feature", "mean_abs_shap", "rank"], ranking.rows(), run.meta))
    ids = ds.ids[rows]
    run.write("explain", "shap_values.csv", csv_text(
        ["id"] + names, [[ids[i]] + [float(v) for v in shap.phi[i]] for i in range(len(rows))], run.meta))

    directions = {}
    for feature in (top if cfg["scatter"] == "top" else ranking.features):
        j = names.index(feature)
        table = shap_scatter_export(feature, ds.X[rows, j], shap.phi[:, j])
        directions[feature] = {"spearman_rho": table.rho, "direction": table.direction}
        meta = dict(run.meta, feature=feature, spearman_rho=fmt_float(table.rho) or "nan", direction=table.direction)
        run.write("explain", f"shap_scatter_{safe_name(feature)}.csv",
                  csv_text(["feature_value", "shap_value"], table.rows(), meta))

    run.write("explain", "explanation.json", json_artifact({
        "model_sha256": forest.digest(),
        "partition": cfg["partition"],
        "n_instances": int(len(rows)),
        "base_value": shap.base_value,
        "max_efficiency_gap": gap,
        "background": {"seed_key": BACKGROUND_KEY, "size": int(len(bg_idx)),
                       "ids": [str(i) for i in ds.ids[train][bg_idx]]},
        "threshold": cfg["threshold"],
        "importance": [{"feature": f, "mean_abs_shap": v, "rank": r} for f, v, r in ranking.rows()],
        "top_features": top,
        "directions": directions,
    }, run.meta))


STAGES = {
    "impute": stage_impute,
    "hotspot": stage_hotspot,
    "classify": stage_classify,
    "train": stage_train,
    "explain": stage_explain,
}
PIPELINE = ("impute", "hotspot", "classify", "train", "explain")


# --- commands ----------------------------------------------------------------

def execute(config, stages):
    """Run the named stages in order against ``config``; returns the manifest path."""
    with Run(config) as run:
        try:
            for name in stages:
                if name == "validate":
                    run_stage(run, name, stage_validate)
                else:
                    run_stage(run, name, STAGES[name])
        finally:
            if run.artifacts:
                run.write_manifest()
        return run.path(MANIFEST)


def cmd_synth(args):
    if args.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    ds, fac, truth = synth_generate(args.n_units, args.n_facilities, args.seed, args.scenario,
                                    missing_frac=args.missing_frac, ineligible_frac=args.ineligible_frac)
    os.makedirs(args.out, exist_ok=True)
    note = f"synthetic scenario={args.scenario} seed={args.seed}"
    write_atomic(os.path.join(args.out, "units.csv"), serialize_units(ds, comment=note))
    write_atomic(os.path.join(args.out, "facilities.csv"), serialize_facilities(fac))
    write_atomic(os.path.join(args.out, "truth.json"), dumps({
        "scenario": truth.scenario, "seed": truth.seed, "noise": truth.noise, "delta": truth.delta,
        "intercept": truth.intercept, "coefficients": truth.coefficients,
        "block_ids": list(truth.block_ids), "block_core_ids": list(truth.block_core_ids),
        "ineligible_ids": list(truth.ineligible_ids),
        "missing_cells": [[str(ds.ids[i]), ds.feature_names[j]] for i, j in truth.missing_cells],
    }))
    config = {"inputs": {"units": "units.csv", "facilities": "facilities.csv" if len(fac) else None},
              "seed": args.seed, "output_dir": "out"}
    write_atomic(os.path.join(args.out, "config.json"), dumps(config))
    log.info("wrote synthetic %s data (%d units, %d facilities) to %s", args.scenario, len(ds), len(fac), args.out)
    print(os.path.join(args.out, "config.json"))


def build_parser():
    parser = argparse.ArgumentParser(prog="screenmap", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. --set hotspot.k=6 (repeatable)")
    common.add_argument("-o", "--out", help="output directory (same as --set output_dir=...)")
    common.add_argument("--seed", type=int, help="master seed (same as --set seed=...)")
    common.add_argument("-j", "--n-jobs", type=int, help="worker threads; results do not depend on it")

    helps = {
        "validate": "check the input files and write validation.json",
        "pipeline": "run every stage and write the manifest",
        "impute": "ingest, filter, add accessibility features, impute, summarise",
        "hotspot": "Getis-Ord Gi* hot/cold spots",
        "classify": "Jenks natural-breaks classes and the combined map layer",
        "train": "split, grid search, fit and compare models",
        "explain": "SHAP attributions of the fitted forest",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)

    sp = sub.add_parser("synth", help="write a synthetic dataset with known ground truth",
                        description="write units.csv, facilities.csv, truth.json and a config.json")
    sp.add_argument("--scenario", default="planted_hotspot", help=f"one of {', '.join(SCENARIOS)}")
    sp.add_argument("--n-units", type=int, default=400)
    sp.add_argument("--n-facilities", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--missing-frac", type=float, default=0.05)
    sp.add_argument("--ineligible-frac", type=float, default=0.02)
    sp.add_argument("-o", "--out", required=True, help="directory to write into")
    return parser


def _config_from_args(args):
    path = args.config or os.environ.get(CONFIG_ENV) or None
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.n_jobs is not None:
        overrides.append(f"n_jobs={args.n_jobs}")
    return RunConfig.load(path, overrides)


def _setup_logging(level):
    """Progress goes to stderr through the package logger; the root logger is left alone."""
    log.setLevel(level)
    handler = next((h for h in log.handlers if getattr(h, "screenmap_cli", False)), None)
    if handler is None:
        handler = logging.StreamHandler()
        handler.screenmap_cli = True
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    handler.setStream(sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    _setup_logging(level)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return EXIT_OK
        config = _config_from_args(args)
        stages = PIPELINE if args.command == "pipeline" else (args.command,)
        manifest = execute(config, stages)
        print(manifest)
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ValidationFailed as exc:
        log.error("validation failed: %s", exc)
        return EXIT_VALIDATION
    except UpstreamMissing as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except StageError as exc:
        if isinstance(exc.__cause__, UpstreamMissing):
            log.error("%s", exc.__cause__)
        else:
            log.error("%s", exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

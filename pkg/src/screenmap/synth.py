"""Seeded synthetic datasets with recorded ground truth."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .ingest import INPUT_SCHEMA, Dataset, FacilitySet
from .rng import SplitMix64, derive_seed

SCENARIOS = ("planted_hotspot", "linear_response", "nonlinear_response")

# nominal centre/spread of each input feature; standardised features are (x - loc) / scale
FEATURE_LOC = np.array([0.5, 3000.0, 7.9, 16.0, 11.5, 28.0, 15.0, 12.7, 200000.0, 0.5, 0.5])
FEATURE_SCALE = np.array([0.5, 3000.0, 4.0, 10.0, 6.0, 15.0, 20.0, 15.0, 100000.0, 0.25, 0.5])

LINEAR_COEF = np.array([0.3, 0.0, 0.2, -0.6, -0.8, 1.2, 1.0, -0.7, 0.5, -0.4, 0.2])
BASE_RATE = 75.0
GRID_STEP_DEG = 0.05  # about 3.5 miles of latitude


@dataclass(frozen=True, eq=False)
class GroundTruth:
    scenario: str
    seed: int
    noise: float
    X_complete: np.ndarray
    response_true: np.ndarray
    grid_rc: np.ndarray
    intercept: float = BASE_RATE
    coefficients: np.ndarray = None
    block_ids: tuple = ()
    block_core_ids: tuple = ()
    delta: float = 0.0
    missing_cells: tuple = ()
    ineligible_ids: tuple = ()
    extra: dict = field(default_factory=dict)

    def response_function(self, X):
        """Noise-free response as a function of the (complete) feature matrix."""
        X = np.asarray(X, dtype=float)
        if self.scenario == "linear_response":
            return self.intercept + X @ self.coefficients
        if self.scenario == "nonlinear_response":
            return nonlinear_function(X)
        return np.full(len(X), self.intercept)


def standardize(X):
    return (np.asarray(X, dtype=float) - FEATURE_LOC) / FEATURE_SCALE


def nonlinear_function(X):
    """Interactions and thresholds a linear model cannot represent."""
    s = standardize(X)
    edu, black, pov, unins, hisp = s[:, 5], s[:, 6], s[:, 3], s[:, 4], s[:, 7]
    return (
        BASE_RATE
        + 2.0 * edu * black
        + 2.0 * np.where(pov > 0.0, 1.0, -1.0) * hisp
        + 1.5 * np.where(unins > 0.5, -1.0, 0.5)
        + 0.5 * edu
    )


def _features(z):
    x = np.empty_like(z)
    x[:, 0] = (z[:, 0] > -0.674).astype(float)
    x[:, 1] = np.round(np.exp(7.6 + 1.0 * z[:, 1]), 1)
    x[:, 2] = np.clip(7.9 + 4.0 * z[:, 2], 0.0, 100.0)
    x[:, 3] = np.clip(16.0 + 10.0 * z[:, 3], 0.0, 100.0)
    x[:, 4] = np.clip(11.5 + 6.0 * z[:, 4], 0.0, 100.0)
    x[:, 5] = np.clip(28.0 + 15.0 * z[:, 5], 0.0, 100.0)
    x[:, 6] = np.clip(15.0 + 20.0 * z[:, 6], 0.0, 100.0)
    x[:, 7] = np.clip(12.7 + 15.0 * z[:, 7], 0.0, 100.0)
    x[:, 8] = np.round(np.exp(12.1 + 0.5 * z[:, 8]), 0)
    x[:, 9] = ndtr(z[:, 9])
    x[:, 10] = (z[:, 10] > -0.18).astype(float)
    return x


def synth_generate(n_units, n_facilities, seed, scenario, *, noise=None, delta_sd=3.0,
                   block_frac=0.3, missing_frac=0.0, ineligible_frac=0.0):
    """Generate (Dataset, FacilitySet, GroundTruth); a pure function of its arguments.

    Units sit on a jittered square grid. ``planted_hotspot`` adds
    ``delta_sd * noise`` to the response inside a square block of grid cells;
    ``linear_response`` and ``nonlinear_response`` draw the response from a
    recorded function of the features plus Gaussian noise. Both yearly rates
    are response +/- a year-to-year wobble, so their mean is the response.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    if n_units < 4:
        raise ValueError("n_units must be at least 4")
    if n_facilities < 0:
        raise ValueError("n_facilities must be non-negative")
    if noise is None:
        noise = 1.0 if scenario == "planted_hotspot" else 0.5
    streams = {name: SplitMix64(derive_seed(seed, i)) for i, name in enumerate(
        ("grid", "features", "noise", "block", "missing", "facilities", "wobble"))}

    side = math.ceil(math.sqrt(n_units))
    cells = np.arange(n_units)
    rc = np.column_stack((cells // side, cells % side))
    lat0, lon0 = 35.0, -90.0
    lon_step = GRID_STEP_DEG / math.cos(math.radians(lat0))
    jitter = streams["grid"].random(2 * n_units).reshape(n_units, 2) - 0.5
    lat = lat0 + (rc[:, 0] + 0.5 * jitter[:, 0]) * GRID_STEP_DEG
    lon = lon0 + (rc[:, 1] + 0.5 * jitter[:, 1]) * lon_step
    width = len(str(n_units - 1))
    ids = [f"U{i:0{width}d}" for i in range(n_units)]

    z = streams["features"].normal(n_units * len(INPUT_SCHEMA)).reshape(n_units, len(INPUT_SCHEMA))
    X = _features(z)
    eps = streams["noise"].normal(n_units)
    wobble = streams["wobble"].normal(n_units)

    block_ids, core_ids, delta, coef = (), (), 0.0, None
    if scenario == "linear_response":
        coef = LINEAR_COEF / FEATURE_SCALE
        signal = BASE_RATE + X @ coef
    elif scenario == "nonlinear_response":
        signal = nonlinear_function(X)
    else:
        signal = np.full(n_units, BASE_RATE)
        b = max(2, round(side * block_frac))
        r0 = streams["block"].integers(max(1, side - b + 1))
        c0 = streams["block"].integers(max(1, side - b + 1))
        rows_used = (n_units + side - 1) // side
        r0 = min(r0, max(0, rows_used - b))
        in_block = (rc[:, 0] >= r0) & (rc[:, 0] < r0 + b) & (rc[:, 1] >= c0) & (rc[:, 1] < c0 + b)
        core = (rc[:, 0] > r0) & (rc[:, 0] < r0 + b - 1) & (rc[:, 1] > c0) & (rc[:, 1] < c0 + b - 1) & in_block
        delta = delta_sd * noise
        signal = signal + delta * in_block
        block_ids = tuple(np.array(ids, dtype=object)[in_block])
        core_ids = tuple(np.array(ids, dtype=object)[core])

    response = signal + noise * eps if noise else signal.copy()
    half = 0.5 * noise * wobble if noise else np.zeros(n_units)
    rate_y1 = np.clip(response + half, 0.0, 100.0)
    rate_y2 = np.clip(response - half, 0.0, 100.0)

    X_obs = X.copy()
    missing_cells = ()
    if missing_frac > 0:
        u = streams["missing"].random(X.size).reshape(X.shape)
        mask = u < missing_frac
        X_obs[mask] = np.nan
        missing_cells = tuple(zip(*np.nonzero(mask)))
    ineligible = ()
    if ineligible_frac > 0:
        u = streams["missing"].random(n_units)
        drop = u < ineligible_frac
        which = streams["missing"].integers(2, size=n_units)
        rate_y1 = np.where(drop & (which == 0), np.nan, rate_y1)
        rate_y2 = np.where(drop & (which == 1), np.nan, rate_y2)
        ineligible = tuple(np.array(ids, dtype=object)[drop])

    f_lat = lat.min() + streams["facilities"].random(n_facilities) * (lat.max() - lat.min())
    f_lon = lon.min() + streams["facilities"].random(n_facilities) * (lon.max() - lon.min())
    facilities = FacilitySet([f"F{i}" for i in range(n_facilities)], f_lat, f_lon)

    dataset = Dataset(INPUT_SCHEMA, ids, lat, lon, rate_y1, rate_y2, X_obs)
    truth = GroundTruth(
        scenario=scenario, seed=seed, noise=float(noise), X_complete=X, response_true=response,
        grid_rc=rc, coefficients=coef, block_ids=block_ids, block_core_ids=core_ids,
        delta=float(delta), missing_cells=missing_cells, ineligible_ids=ineligible,
    )
    return dataset, facilities, truth


def synth_mtry_gap(n=300, d=8, seed=0, noise=0.3):
    """Regression data where only feature 0 carries signal.

    ``y = 4 sin(2 pi x0) + 3 [x0 > 0.6] + noise``, with ``X ~ U(0, 1)^d``.
    Sampling more features per split can only help, so the best mtry in
    any grid is its largest value; with the default size, mtry = d beats
    mtry <= 2 by more than a factor of two in validation RMSE.

    Returns ``(X, y)``.
    """
    rng = SplitMix64(derive_seed(seed, 7))
    X = rng.random(n * d).reshape(n, d)
    x = X[:, 0]
    y = 4.0 * np.sin(2.0 * np.pi * x) + 3.0 * (x > 0.6) + noise * rng.normal(n)
    return X, y

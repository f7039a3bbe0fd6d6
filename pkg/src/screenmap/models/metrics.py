import numpy as np


def _pair(pred, obs):
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if len(pred) != len(obs):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(obs)} observations")
    if len(obs) == 0:
        raise ValueError("empty input")
    return pred, obs


def rmse(pred, obs):
    """Root mean squared error, in response units."""
    pred, obs = _pair(pred, obs)
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def r2(pred, obs):
    """Coefficient of determination 1 - SSE/SST."""
    pred, obs = _pair(pred, obs)
    sst = float(np.sum((obs - obs.mean()) ** 2))
    if sst == 0:
        raise ValueError("r2 undefined: observations have zero variance")
    return 1.0 - float(np.sum((pred - obs) ** 2)) / sst

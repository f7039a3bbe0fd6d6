"""Great-circle distances, an exact spatial index, and facility-access features."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS_MILES = 3958.7613  # mean radius 6371.0088 km / 1.609344
METERS_PER_MILE = 1609.344
CATCHMENT_MILES = 10.0

NEAREST_FEATURE = "nearest_facility_miles"
COUNT_FEATURE = "facilities_within_10mi"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not np.isfinite(lat) or not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat!r}")
        if not np.isfinite(lon) or not -180.0 < lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon!r}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


def haversine(lat1, lon1, lat2, lon2):
    """Vectorised great-circle (haversine) distance in miles; arguments broadcast.

    The central angle is evaluated as atan2(|u x v|, u . v), which equals the
    haversine angle but stays accurate for nearly antipodal points where the
    arcsin form loses digits.
    """
    lat1, lon1, lat2, lon2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lat1, lon1, lat2, lon2)))
    # evaluate each pair in a canonical order so the result is exactly symmetric
    swap = (lat1 > lat2) | ((lat1 == lat2) & (lon1 > lon2))
    lat1, lat2 = np.where(swap, lat2, lat1), np.where(swap, lat1, lat2)
    lon1, lon2 = np.where(swap, lon2, lon1), np.where(swap, lon1, lon2)
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dlam = np.radians(lon2) - np.radians(lon1)
    s1, c1 = np.sin(p1), np.cos(p1)
    s2, c2 = np.sin(p2), np.cos(p2)
    sd, cd = np.sin(dlam), np.cos(dlam)
    cross = np.hypot(c2 * sd, c1 * s2 - s1 * c2 * cd)
    dot = s1 * s2 + c1 * c2 * cd
    return EARTH_RADIUS_MILES * np.arctan2(cross, dot)


def haversine_miles(a, b):
    """Great-circle distance between two GeoPoints, in miles."""
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


def _unit_vectors(lat, lon):
    phi = np.radians(lat)
    lam = np.radians(lon)
    return np.column_stack((np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)))


def _chord(miles):
    # chord length on the unit sphere subtending an arc of `miles`
    theta = np.minimum(np.asarray(miles, dtype=float) / EARTH_RADIUS_MILES, np.pi)
    return 2.0 * np.sin(theta / 2.0)


def as_coords(points):
    """Coerce GeoPoints, (lat, lon) pairs or an (n, 2) array to a float array."""
    if len(points) and isinstance(points[0], GeoPoint):
        return np.array([[p.lat, p.lon] for p in points], dtype=float)
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.empty((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("coordinates must have shape (n, 2) as (lat, lon)")
    return arr


class SpatialIndex:
    """Exact k-nearest and radius queries under haversine distance.

    Points are embedded on the unit sphere and stored in a k-d tree; chord
    length is monotone in arc length, so the tree only proposes candidates
    and every answer is re-ranked by :func:`haversine` with ties broken by
    ascending id. Results are identical to a brute-force scan.
    """

    # candidate radius slack, covers chord/arc rounding disagreements
    _SLACK = 1e-9

    def __init__(self, coords, ids=None):
        self.coords = as_coords(coords)
        n = len(self.coords)
        if ids is None:
            ids = [str(i) for i in range(n)]
        ids = [str(i) for i in ids]
        if len(ids) != n:
            raise ValueError("ids and coordinates differ in length")
        if len(set(ids)) != n:
            raise ValueError("duplicate ids in spatial index")
        self.ids = np.array(ids, dtype=object)
        for lat, lon in self.coords:
            GeoPoint(lat, lon)
        # rank of each id in ascending id order, used for tie-breaking
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[np.argsort(self.ids.astype(str), kind="stable")] = np.arange(n)
        self._tree = cKDTree(_unit_vectors(self.coords[:, 0], self.coords[:, 1])) if n else None

    def __len__(self):
        return len(self.coords)

    def _ranked(self, lat, lon, cand):
        cand = np.asarray(cand, dtype=np.int64)
        d = haversine(lat, lon, self.coords[cand, 0], self.coords[cand, 1])
        order = np.lexsort((self._id_rank[cand], d))
        return cand[order], d[order]

    def k_nearest_idx(self, lat, lon, k):
        """Positions and distances of the k nearest points, ascending."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self)
        if n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        q = _unit_vectors(np.array([lat]), np.array([lon]))[0]
        k = min(int(k), n)
        dk, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(dk)[-1])
        cand = self._tree.query_ball_point(q, kth * (1 + self._SLACK) + self._SLACK)
        idx, d = self._ranked(lat, lon, cand)
        return idx[:k], d[:k]

    def within_radius_idx(self, lat, lon, r_miles):
        """Positions and distances of points with distance <= r, ascending."""
        if r_miles < 0:
            raise ValueError("radius must be non-negative")
        if len(self) == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        q = _unit_vectors(np.array([lat]), np.array([lon]))[0]
        cand = self._tree.query_ball_point(q, float(_chord(r_miles)) * (1 + self._SLACK) + self._SLACK)
        idx, d = self._ranked(lat, lon, cand)
        keep = d <= r_miles
        return idx[keep], d[keep]

    def k_nearest(self, p, k):
        idx, d = self.k_nearest_idx(p.lat, p.lon, k)
        return [(self.ids[i], float(x)) for i, x in zip(idx, d)]

    def count_within_radius(self, p, r_miles):
        return int(len(self.within_radius_idx(p.lat, p.lon, r_miles)[0]))

    def count_within_radius_many(self, coords, r_miles):
        coords = as_coords(coords)
        return np.array([len(self.within_radius_idx(la, lo, r_miles)[0]) for la, lo in coords], dtype=np.int64)


def build_index(points, ids=None):
    return SpatialIndex(points, ids)


def k_nearest(index, p, k):
    """k closest points to ``p`` as ``[(id, miles), ...]``; ties by ascending id."""
    return index.k_nearest(p, k)


def count_within_radius(index, p, r_miles):
    """Number of indexed points within ``r_miles`` of ``p`` (boundary inclusive)."""
    return index.count_within_radius(p, r_miles)


def accessibility_features(unit_coords, facility_coords, radius_miles=CATCHMENT_MILES):
    """Nearest-facility distance and facility count within ``radius_miles``.

    Returns two float arrays aligned with ``unit_coords``.
    """
    unit_coords = as_coords(unit_coords)
    facility_coords = as_coords(facility_coords)
    if len(facility_coords) == 0:
        raise ValueError("facility set is empty; nearest-facility distance is undefined")
    index = SpatialIndex(facility_coords)
    nearest = np.empty(len(unit_coords))
    for i, (lat, lon) in enumerate(unit_coords):
        nearest[i] = index.k_nearest_idx(lat, lon, 1)[1][0]
    counts = index.count_within_radius_many(unit_coords, radius_miles).astype(float)
    return nearest, counts

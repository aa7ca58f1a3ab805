"""Geohash bucketing with exact radius retrieval.

Cells at a given precision form a regular lon/lat grid: ``ceil(5l/2)``
longitude bits by ``floor(5l/2)`` latitude bits. Queries enumerate grid cells
ring by ring around the centre cell, collect bucket members and keep exactly
those within ``r_km`` by haversine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IntegrityError, ParameterError
from .model import EARTH_RADIUS_KM, GeoPoint, haversine_km_many

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
BASE32_INDEX = {c: i for i, c in enumerate(BASE32)}

MAX_QUERY_LAT = 85.0


def _bit_counts(precision: int) -> tuple[int, int]:
    total = 5 * precision
    return (total + 1) // 2, total // 2


def _check_precision(precision: int) -> None:
    if not 1 <= precision <= 12:
        raise ParameterError(f"geohash precision must be in 1..12, got {precision}")


def _bisect_bits(values: np.ndarray, lo: float, hi: float, nbits: int) -> np.ndarray:
    """Integer cell index per value by repeated halving; values >= mid go high."""
    if values.size <= 4:
        # scalar loop: same comparisons, far less overhead for single queries
        out = []
        for v in values.reshape(-1).tolist():
            a, b, idx = lo, hi, 0
            for _ in range(nbits):
                mid = (a + b) / 2.0
                if v >= mid:
                    idx, a = (idx << 1) | 1, mid
                else:
                    idx, b = idx << 1, mid
            out.append(idx)
        return np.array(out, dtype=np.int64).reshape(values.shape)
    lo = np.full(values.shape, lo)
    hi = np.full(values.shape, hi)
    idx = np.zeros(values.shape, dtype=np.int64)
    for _ in range(nbits):
        mid = (lo + hi) / 2.0
        upper = values >= mid
        idx = (idx << 1) | upper
        lo = np.where(upper, mid, lo)
        hi = np.where(upper, hi, mid)
    return idx


def cell_indices(lons, lats, precision: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid column/row of each point at ``precision``."""
    _check_precision(precision)
    nlon, nlat = _bit_counts(precision)
    ix = _bisect_bits(np.asarray(lons, dtype=np.float64), -180.0, 180.0, nlon)
    iy = _bisect_bits(np.asarray(lats, dtype=np.float64), -90.0, 90.0, nlat)
    return ix, iy


def cell_code(ix: int, iy: int, precision: int) -> str:
    """Geohash string of grid cell (ix, iy): interleave, longitude first."""
    nlon, nlat = _bit_counts(precision)
    value = 0
    for k in range(5 * precision):
        if k % 2 == 0:
            bit = (ix >> (nlon - 1 - k // 2)) & 1
        else:
            bit = (iy >> (nlat - 1 - k // 2)) & 1
        value = (value << 1) | bit
    chars = []
    for k in range(precision):
        chars.append(BASE32[(value >> (5 * (precision - 1 - k))) & 31])
    return "".join(chars)


def geohash_encode(p: GeoPoint, precision: int) -> str:
    ix, iy = cell_indices([p.lon], [p.lat], precision)
    return cell_code(int(ix[0]), int(iy[0]), precision)


def geohash_encode_many(lons, lats, precision: int) -> list:
    ix, iy = cell_indices(lons, lats, precision)
    return [cell_code(int(a), int(b), precision) for a, b in zip(ix, iy)]


def geohash_digits(p: GeoPoint, precision: int) -> np.ndarray:
    """Per-character base-32 values of the geohash (length ``precision``)."""
    return np.array([BASE32_INDEX[c] for c in geohash_encode(p, precision)], dtype=np.int64)


@dataclass(frozen=True)
class CellBox:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def contains(self, p: GeoPoint) -> bool:
        return self.min_lat <= p.lat <= self.max_lat and self.min_lon <= p.lon <= self.max_lon

    def contains_box(self, other: CellBox) -> bool:
        return (
            self.min_lat <= other.min_lat
            and other.max_lat <= self.max_lat
            and self.min_lon <= other.min_lon
            and other.max_lon <= self.max_lon
        )

    @property
    def center(self) -> GeoPoint:
        return GeoPoint((self.min_lon + self.max_lon) / 2.0, (self.min_lat + self.max_lat) / 2.0)


def geohash_decode_cell(code: str) -> CellBox:
    if not code or len(code) > 12:
        raise FormatError(f"geohash length must be 1..12: {code!r}")
    lat = [-90.0, 90.0]
    lon = [-180.0, 180.0]
    even = True
    for ch in code:
        try:
            v = BASE32_INDEX[ch]
        except KeyError:
            raise FormatError(f"invalid geohash character {ch!r}") from None
        for shift in range(4, -1, -1):
            bit = (v >> shift) & 1
            interval = lon if even else lat
            mid = (interval[0] + interval[1]) / 2.0
            if bit:
                interval[0] = mid
            else:
                interval[1] = mid
            even = not even
    return CellBox(min_lat=lat[0], max_lat=lat[1], min_lon=lon[0], max_lon=lon[1])


class SpatialIndex:
    """Immutable geohash-bucketed POI locations."""

    def __init__(self, ids, lons, lats, precision: int):
        _check_precision(precision)
        self.precision = precision
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.lons = np.asarray(lons, dtype=np.float64)
        self.lats = np.asarray(lats, dtype=np.float64)
        if len(self.ids) == 0:
            raise ParameterError("cannot index an empty POI list")
        if len(np.unique(self.ids)) != len(self.ids):
            raise IntegrityError("duplicate POI id")
        self._nlon, self._nlat = _bit_counts(precision)
        ix, iy = cell_indices(self.lons, self.lats, precision)
        keys = ix * (1 << self._nlat) + iy
        order = np.argsort(keys, kind="stable")
        uniq, starts = np.unique(keys[order], return_index=True)
        bounds = list(starts[1:]) + [len(order)]
        self._rows = {}
        for key, s, e in zip(uniq.tolist(), starts.tolist(), bounds):
            self._rows[(key >> self._nlat, key & ((1 << self._nlat) - 1))] = order[s:e]
        for rows in self._rows.values():
            rows.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    @property
    def buckets(self) -> dict:
        """Geohash code -> list of POI ids in that cell."""
        return {
            cell_code(ix, iy, self.precision): [int(i) for i in self.ids[rows]]
            for (ix, iy), rows in self._rows.items()
        }

    def location(self, poi_id: int) -> GeoPoint:
        row = int(np.flatnonzero(self.ids == np.uint64(poi_id))[0])
        return GeoPoint(float(self.lons[row]), float(self.lats[row]))

    def _cell_span(self) -> tuple[float, float]:
        return 360.0 / (1 << self._nlon), 180.0 / (1 << self._nlat)

    def covering_cells(self, center: GeoPoint, r_km: float) -> list:
        """Grid cells whose rectangle meets the circle's lon/lat bounding box.

        Rings of Chebyshev radius k are added around the centre cell until a
        ring contains no cell touching the box.
        """
        ang = r_km / EARTH_RADIUS_KM
        dlat = math.degrees(ang)
        s = math.sin(ang) / math.cos(math.radians(center.lat))
        dlon = 180.0 if s >= 1.0 else math.degrees(math.asin(s))
        pad = 1e-9
        box_lon = (center.lon - dlon - pad, center.lon + dlon + pad)
        box_lat = (center.lat - dlat - pad, center.lat + dlat + pad)
        if box_lon[0] <= -180.0 or box_lon[1] >= 180.0:
            raise ParameterError("query circle crosses the antimeridian")
        span_lon, span_lat = self._cell_span()
        n_x, n_y = 1 << self._nlon, 1 << self._nlat

        def touches(ix, iy):
            if not (0 <= ix < n_x and 0 <= iy < n_y):
                return False
            lon0 = -180.0 + ix * span_lon
            lat0 = -90.0 + iy * span_lat
            return (
                lon0 <= box_lon[1] and lon0 + span_lon >= box_lon[0]
                and lat0 <= box_lat[1] and lat0 + span_lat >= box_lat[0]
            )

        cx, cy = cell_indices([center.lon], [center.lat], self.precision)
        cx, cy = int(cx[0]), int(cy[0])
        cells = [(cx, cy)]
        k = 1
        while True:
            ring = []
            for dx in range(-k, k + 1):
                ring.append((cx + dx, cy - k))
                ring.append((cx + dx, cy + k))
            for dy in range(-k + 1, k):
                ring.append((cx - k, cy + dy))
                ring.append((cx + k, cy + dy))
            hit = [c for c in ring if touches(*c)]
            if not hit:
                break
            cells.extend(hit)
            k += 1
        return cells

    def radius_query(self, center: GeoPoint, r_km: float) -> list:
        """Ids within ``r_km`` (closed ball), nearest first, ties by id."""
        return [pid for pid, _ in self.radius_query_with_distance(center, r_km)]

    def radius_query_with_distance(self, center: GeoPoint, r_km: float) -> list:
        if not r_km > 0:
            raise ParameterError("r_km must be positive")
        if abs(center.lat) > MAX_QUERY_LAT:
            raise ParameterError(f"query latitude beyond +/-{MAX_QUERY_LAT} is unsupported")
        parts = [self._rows[c] for c in self.covering_cells(center, r_km) if c in self._rows]
        if not parts:
            return []
        rows = np.concatenate(parts)
        dist = haversine_km_many(center, self.lons[rows], self.lats[rows])
        keep = dist <= r_km
        rows, dist = rows[keep], dist[keep]
        ids = self.ids[rows]
        order = np.lexsort((ids, dist))
        return [(int(ids[i]), float(dist[i])) for i in order]


def build_spatial_index(pois, precision: int = 5) -> SpatialIndex:
    pois = list(pois)
    if not pois:
        raise ParameterError("cannot index an empty POI list")
    return SpatialIndex(
        [p.id for p in pois],
        [p.location.lon for p in pois],
        [p.location.lat for p in pois],
        precision,
    )


def radius_query(idx: SpatialIndex, center: GeoPoint, r_km: float) -> list:
    return idx.radius_query(center, r_km)


SPATIAL_MAGIC = b"PVGI"
SPATIAL_VERSION = 1


def save_spatial_index(idx: SpatialIndex, path) -> None:
    n = len(idx)
    header = SPATIAL_MAGIC + np.array([SPATIAL_VERSION, idx.precision, n], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(idx.ids.astype("<u8").tobytes())
        fh.write(idx.lons.astype("<f8").tobytes())
        fh.write(idx.lats.astype("<f8").tobytes())


def load_spatial_index(path) -> SpatialIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SPATIAL_MAGIC:
        raise FormatError("not a spatial index file")
    version, precision, n = np.frombuffer(raw, dtype="<u4", count=3, offset=4).tolist()
    if version != SPATIAL_VERSION:
        raise FormatError(f"unsupported spatial index version {version}")
    if len(raw) != 16 + 24 * n:
        raise FormatError("truncated spatial index file")
    off = 16
    ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off)
    lons = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 8 * n)
    lats = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 16 * n)
    return SpatialIndex(ids, lons, lats, precision)

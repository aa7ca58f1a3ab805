"""Domain types and great-circle helpers."""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParameterError

EARTH_RADIUS_KM = 6371.0088

SIGN_HEIGHT = 32
SIGN_WIDTH = 128

# 64 glyphs; a POI name is any non-empty string over this alphabet.
GLYPHS = string.digits + string.ascii_uppercase + string.ascii_lowercase + "#&"
GLYPH_INDEX = {g: i for i, g in enumerate(GLYPHS)}
MAX_NAME_LEN = 32

SPLITS = ("train", "valid", "test")


def validate_name(name: str) -> str:
    if not name or len(name) > MAX_NAME_LEN:
        raise ParameterError(f"name must have 1..{MAX_NAME_LEN} glyphs: {name!r}")
    for ch in name:
        if ch not in GLYPH_INDEX:
            raise ParameterError(f"glyph {ch!r} not in alphabet")
    return name


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 < self.lon < 180.0) or not (-90.0 < self.lat < 90.0):
            raise ParameterError(f"coordinates out of range: lon={self.lon}, lat={self.lat}")


@dataclass(frozen=True)
class BoundingBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self):
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise ParameterError("empty bounding box")
        GeoPoint(self.min_lon, self.min_lat)
        GeoPoint(self.max_lon, self.max_lat)


# ~43 km x 44 km: at 10^4 POIs a 1 km disk holds a few dozen candidates.
DEFAULT_REGION = BoundingBox(116.10, 39.75, 116.60, 40.15)


@dataclass(frozen=True, eq=False)
class SignboardImage:
    """A 32x128 grayscale signboard, stored quantised to 8 bits.

    ``pixels`` gives the intensities as floats in [0, 1]; ``data`` is the
    packed uint8 grid used for hashing and persistence.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.shape != (SIGN_HEIGHT, SIGN_WIDTH):
            raise ParameterError(f"signboard must be {SIGN_HEIGHT}x{SIGN_WIDTH}, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_pixels(cls, pixels) -> SignboardImage:
        px = np.asarray(pixels, dtype=np.float64)
        if px.shape != (SIGN_HEIGHT, SIGN_WIDTH):
            raise ParameterError(f"signboard must be {SIGN_HEIGHT}x{SIGN_WIDTH}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ParameterError("signboard intensities must lie in [0, 1]")
        return cls(np.rint(px * 255.0).astype(np.uint8))

    @classmethod
    def from_bytes(cls, raw: bytes) -> SignboardImage:
        if len(raw) != SIGN_HEIGHT * SIGN_WIDTH:
            raise ParameterError(f"packed signboard must be {SIGN_HEIGHT * SIGN_WIDTH} bytes")
        return cls(np.frombuffer(raw, dtype=np.uint8).reshape(SIGN_HEIGHT, SIGN_WIDTH))

    @property
    def pixels(self) -> np.ndarray:
        return self.data.astype(np.float64) / 255.0

    def to_bytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, SignboardImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash(self.data.tobytes())


@dataclass(frozen=True)
class PoiRecord:
    id: int
    name: str
    location: GeoPoint
    signboard: SignboardImage = field(repr=False)

    def __post_init__(self):
        validate_name(self.name)
        if not (0 <= self.id < 2**64):
            raise ParameterError(f"POI id must be an unsigned 64-bit integer: {self.id}")


@dataclass(frozen=True)
class StreetViewSubmission:
    truth_id: int
    shot_location: GeoPoint
    signboard: SignboardImage = field(repr=False)
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ParameterError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    pois: tuple
    submissions: tuple
    test_poi_ids: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "pois", tuple(self.pois))
        object.__setattr__(self, "submissions", tuple(self.submissions))
        object.__setattr__(self, "test_poi_ids", frozenset(self.test_poi_ids))
        by_id = {p.id: p for p in self.pois}
        if len(by_id) != len(self.pois):
            raise IntegrityError("POI ids must be unique within a corpus")
        if not self.test_poi_ids <= by_id.keys():
            raise IntegrityError("test split names POIs that are not in the corpus")
        for s in self.submissions:
            if s.truth_id not in by_id:
                raise IntegrityError(f"submission references unknown POI {s.truth_id}")
            if (s.split == "test") != (s.truth_id in self.test_poi_ids):
                raise IntegrityError("test submissions must depict exactly the test-split POIs")
        object.__setattr__(self, "_by_id", by_id)

    def poi_by_id(self) -> dict:
        return dict(self._by_id)

    def split_of(self, poi_id: int) -> str:
        return "test" if poi_id in self.test_poi_ids else "trainval"

    def submissions_in(self, split: str) -> list:
        return [s for s in self.submissions if s.split == split]

    def pois_in(self, split: str) -> list:
        want_test = split == "test"
        return [p for p in self.pois if (p.id in self.test_poi_ids) == want_test]


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance on a sphere of radius ``EARTH_RADIUS_KM``."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_km_many(center: GeoPoint, lons, lats) -> np.ndarray:
    """Vectorised haversine from ``center`` to arrays of coordinates.

    Elementwise it evaluates the same expression as :func:`haversine_km`.
    """
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    phi1 = math.radians(center.lat)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlam = np.radians(lons - center.lon)
    h = np.sin(dphi / 2.0) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def destination_point(origin: GeoPoint, bearing_rad: float, distance_km: float) -> GeoPoint:
    """Point reached by travelling ``distance_km`` along a great circle."""
    delta = distance_km / EARTH_RADIUS_KM
    phi1 = math.radians(origin.lat)
    lam1 = math.radians(origin.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    return GeoPoint(math.degrees(lam2), math.degrees(phi2))

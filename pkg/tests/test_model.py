import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poiverify.errors import IntegrityError, ParameterError
from poiverify.model import (
    EARTH_RADIUS_KM,
    BoundingBox,
    Corpus,
    GeoPoint,
    PoiRecord,
    SignboardImage,
    StreetViewSubmission,
    destination_point,
    haversine_km,
    haversine_km_many,
    validate_name,
)
from poiverify.render import render_canonical

lons = st.floats(-179.9, 179.9)
lats = st.floats(-89.9, 89.9)
points = st.builds(GeoPoint, lons, lats)


class TestGeoPoint:
    @pytest.mark.parametrize("lon,lat", [(180.0, 0.0), (-180.0, 0.0), (0.0, 90.0), (0.0, -90.0),
                                         (float("nan"), 0.0), (0.0, float("inf"))])
    def test_rejects_out_of_range(self, lon, lat):
        with pytest.raises(ParameterError):
            GeoPoint(lon, lat)

    def test_is_hashable_value(self):
        assert GeoPoint(1.0, 2.0) == GeoPoint(1.0, 2.0)
        assert len({GeoPoint(1.0, 2.0), GeoPoint(1.0, 2.0)}) == 1

    def test_bounding_box_orders_corners(self):
        with pytest.raises(ParameterError):
            BoundingBox(10.0, 0.0, 5.0, 1.0)


class TestHaversine:
    def test_quarter_meridian(self):
        d = haversine_km(GeoPoint(0.0, 0.0), GeoPoint(0.0, 89.9999999999))
        assert abs(d - EARTH_RADIUS_KM * math.pi / 2) < 0.01
        assert abs(d - 10007.557) < 0.01

    def test_small_arc_on_equator(self):
        d = haversine_km(GeoPoint(0.0, 0.0), GeoPoint(0.001, 0.0))
        assert d == pytest.approx(EARTH_RADIUS_KM * 0.001 * math.pi / 180, rel=1e-9)
        assert abs(d - 0.1112) < 1e-4

    @given(points, points)
    def test_symmetric_nonnegative(self, a, b):
        assert haversine_km(a, b) == pytest.approx(haversine_km(b, a), abs=1e-9)
        assert haversine_km(a, b) >= 0.0

    @given(points)
    def test_zero_on_identity(self, a):
        assert haversine_km(a, a) == 0.0

    @given(points, points, points)
    def test_triangle_inequality(self, a, b, c):
        assert haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9

    def test_vectorised_matches_scalar(self, rng):
        c = GeoPoint(116.3, 39.9)
        lo = rng.uniform(116, 117, 50)
        la = rng.uniform(39, 40, 50)
        many = haversine_km_many(c, lo, la)
        one = [haversine_km(c, GeoPoint(x, y)) for x, y in zip(lo, la)]
        np.testing.assert_allclose(many, one, rtol=0, atol=1e-9)

    @settings(max_examples=50)
    @given(points, st.floats(0, 2 * math.pi), st.floats(0.0, 5.0))
    def test_destination_point_distance(self, origin, bearing, dist):
        if abs(origin.lat) > 85:
            return
        dest = destination_point(origin, bearing, dist)
        assert haversine_km(origin, dest) == pytest.approx(dist, abs=1e-6)


class TestSignboardImage:
    def test_bytes_roundtrip(self):
        img = render_canonical("Abc#&9")
        assert SignboardImage.from_bytes(img.to_bytes()) == img
        assert hash(SignboardImage.from_bytes(img.to_bytes())) == hash(img)

    def test_wrong_size_rejected(self):
        with pytest.raises(ParameterError):
            SignboardImage.from_bytes(b"\0" * 17)

    def test_pixels_in_unit_interval(self):
        px = render_canonical("Q").pixels
        assert px.shape == (32, 128)
        assert px.min() >= 0.0 and px.max() <= 1.0

    def test_data_is_read_only(self):
        img = render_canonical("Q")
        with pytest.raises(ValueError):
            img.data[0, 0] = 1


class TestNames:
    @pytest.mark.parametrize("bad", ["", "has space", "x" * 33, "é"])
    def test_invalid_names(self, bad):
        with pytest.raises(ParameterError):
            validate_name(bad)

    def test_valid_name(self):
        assert validate_name("Cafe#1&2") == "Cafe#1&2"


class TestCorpusContainer:
    def _poi(self, pid, name="AB"):
        return PoiRecord(pid, name, GeoPoint(116.3, 39.9), render_canonical(name))

    def test_submission_must_reference_known_poi(self):
        sub = StreetViewSubmission(99, GeoPoint(116.3, 39.9), render_canonical("AB"), "train")
        with pytest.raises(IntegrityError):
            Corpus([self._poi(1)], [sub], frozenset())

    def test_duplicate_ids_rejected(self):
        with pytest.raises(IntegrityError):
            Corpus([self._poi(1), self._poi(1, "CD")], [], frozenset())

    def test_test_submissions_only_for_test_pois(self):
        sub = StreetViewSubmission(1, GeoPoint(116.3, 39.9), render_canonical("AB"), "test")
        with pytest.raises(IntegrityError):
            Corpus([self._poi(1)], [sub], frozenset())

    def test_split_of(self):
        c = Corpus([self._poi(1), self._poi(2)], [], frozenset({2}))
        assert c.split_of(1) == "trainval"
        assert c.split_of(2) == "test"

from collections import Counter

import numpy as np
import pytest

from poiverify.annindex import AnnQueryBudget, brute_force_knn, build_forest
from poiverify.embedder import embed
from poiverify.errors import DependencyError, IntegrityError, ParameterError
from poiverify.geoindex import build_spatial_index
from poiverify.model import GeoPoint, PoiRecord, destination_point
from poiverify.pipeline import (
    OutlineTable,
    VerificationRequest,
    VerificationResult,
    Verifier,
    poi_embeddings,
    verify_v1,
    verify_v1star,
    verify_v2,
    verify_v2star,
)
from poiverify.render import SignStyle, render_canonical
from poiverify.signboard import OcrChannel, fit_corrector

CENTER = GeoPoint(116.3, 39.9)
STYLES = {3: SignStyle(logo=1, frame=0, v_offset=-3), 4: SignStyle(logo=20, frame=2, v_offset=3)}


def at(km, bearing=0.0):
    return destination_point(CENTER, bearing, km)


@pytest.fixture(scope="module")
def world():
    specs = [
        (1, "ALPHA", at(0.0)),
        (2, "BRAVO", at(0.3, 1.0)),
        (3, "TWIN", at(0.2, 2.0)),
        (4, "TWIN", at(0.4, 4.0)),
        (5, "FAR", at(5.0, 3.0)),
        (6, "ALPHB", at(0.5, 5.0)),
    ]
    pois = [PoiRecord(i, n, loc, render_canonical(n, STYLES.get(i, SignStyle()))) for i, n, loc in specs]
    names = {p.id: p.name for p in pois}
    corrector = fit_corrector([(n, n) for n in names.values()], Counter(names.values()))
    return {
        "pois": pois,
        "names": names,
        "spatial": build_spatial_index(pois, precision=6),
        "channel": OcrChannel.identity(),
        "corrector": corrector,
        "outlines": OutlineTable.from_pois(pois),
    }


def v1(world, req, **kw):
    return verify_v1(req, world["spatial"], world["names"], world["channel"], world["corrector"], **kw)


def v1star(world, req, **kw):
    return verify_v1star(req, world["spatial"], world["names"], world["channel"], world["corrector"],
                         world["outlines"], **kw)


def request_for(poi, location=CENTER, text=None):
    return VerificationRequest(poi.signboard, location, poi.name if text is None else text)


class TestV1:
    def test_far_poi_is_never_returned(self, world):
        far = world["pois"][4]
        res = v1(world, request_for(far), k_out=10)
        assert 5 not in res.top_ids(10)
        assert set(res.top_ids(10)) == {1, 2, 3, 4, 6}

    def test_clean_unique_name_scores_one(self, world):
        res = v1(world, request_for(world["pois"][0]))
        assert res.ranked[0] == (1, 1.0)
        assert res.ranked[1][0] == 6  # one glyph away

    def test_same_name_tie_broken_by_id(self, world):
        res = v1(world, request_for(world["pois"][3]))
        assert res.ranked[:2] == ((3, 1.0), (4, 1.0))

    def test_k_out_truncates(self, world):
        assert len(v1(world, request_for(world["pois"][0]), k_out=2).ranked) == 2

    def test_no_candidates_gives_empty_result(self, world):
        res = v1(world, request_for(world["pois"][0], location=at(20.0)))
        assert res.ranked == ()
        assert set(res.stage_timings) == {"geo"}

    def test_missing_text_rejected(self, world):
        req = VerificationRequest(world["pois"][0].signboard, CENTER)
        with pytest.raises(ParameterError):
            v1(world, req)

    def test_stage_timings(self, world):
        res = v1(world, request_for(world["pois"][0]))
        assert list(res.stage_timings) == ["geo", "ocr", "rank"]
        assert all(t >= 0 for t in res.stage_timings.values())


class TestV1Star:
    def test_matches_v1_without_ties(self, world):
        req = request_for(world["pois"][0])
        assert v1star(world, req).ranked == v1(world, req).ranked

    @pytest.mark.parametrize("truth", [3, 4])
    def test_outline_separates_duplicate_names(self, world, truth):
        poi = world["pois"][truth - 1]
        res = v1star(world, request_for(poi))
        assert res.top_ids(1) == [truth]
        assert {i for i, _ in res.ranked[:2]} == {3, 4}

    def test_stage_names(self, world):
        res = v1star(world, request_for(world["pois"][3]))
        assert list(res.stage_timings) == ["geo", "ocr", "rank", "outline"]


@pytest.fixture(scope="module")
def embedded(world, tiny_params):
    ids, mat = poi_embeddings(world["pois"], tiny_params)
    return ids, mat


class TestV2:
    def test_archived_view_retrieves_itself(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=2, leaf_cap=2)
        for poi in world["pois"]:
            res = verify_v2(request_for(poi, location=poi.location), tiny_params, forest,
                            AnnQueryBudget(3, 64))
            assert res.ranked[0][0] == poi.id
            assert res.ranked[0][1] == pytest.approx(1.0)

    def test_single_leaf_equals_brute_force(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=1, leaf_cap=100)
        req = request_for(world["pois"][1], location=at(0.1))
        res = verify_v2(req, tiny_params, forest, AnnQueryBudget(6, 1))
        m = embed(req.signboard, req.shot_location, tiny_params)
        assert list(res.ranked) == brute_force_knn(embedded, m, 6)

    def test_does_not_need_text(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=1)
        req = VerificationRequest(world["pois"][0].signboard, CENTER)
        assert list(verify_v2(req, tiny_params, forest).stage_timings) == ["embed", "ann"]

    def test_dimension_mismatch(self, world, embedded):
        from poiverify.embedder import init_params

        forest = build_forest(embedded, n_trees=1)
        with pytest.raises(IntegrityError):
            verify_v2(request_for(world["pois"][0]), init_params(l=3, d=5), forest)


class TestV2Star:
    def run(self, world, params, forest, req, **kw):
        return verify_v2star(req, params, forest, world["names"], world["channel"], world["corrector"],
                             world["outlines"], **kw)

    def test_k_rerank_one_keeps_ann_top(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=2, leaf_cap=2)
        for poi in world["pois"]:
            req = request_for(poi, location=at(0.25, 0.5), text="BRAVO")
            top2 = verify_v2(req, tiny_params, forest, AnnQueryBudget(1, 64)).top_ids(1)
            top2s = self.run(world, tiny_params, forest, req, budget=AnnQueryBudget(1, 64), k_rerank=1)
            assert top2s.top_ids(1) == top2

    def test_name_match_promotes_ann_runner_up(self, world, tiny_params):
        req = request_for(world["pois"][0])  # text ALPHA
        m = embed(req.signboard, req.shot_location, tiny_params)
        rng = np.random.default_rng(0)
        nudge = m + 0.05 * rng.normal(size=m.shape)
        nudge /= np.linalg.norm(nudge)
        # id 2 (BRAVO) is the exact ANN hit, id 1 (ALPHA) only the runner-up
        forest = build_forest((np.array([2, 1]), np.stack([m, nudge])), n_trees=1)
        assert verify_v2(req, tiny_params, forest).top_ids(1) == [2]
        res = self.run(world, tiny_params, forest, req)
        assert res.top_ids(2) == [1, 2]
        assert res.ranked[0][1] == 1.0

    def test_equal_names_fall_back_to_outline(self, world, tiny_params):
        poi4 = world["pois"][3]
        req = request_for(poi4)
        m = embed(req.signboard, req.shot_location, tiny_params)
        other = -m
        forest = build_forest((np.array([4, 3]), np.stack([other, m])), n_trees=1)
        # ANN prefers 3; both read as TWIN; outline matches 4
        assert verify_v2(req, tiny_params, forest).top_ids(1) == [3]
        assert self.run(world, tiny_params, forest, req).top_ids(1) == [4]

    def test_reported_scores_are_name_similarities(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=2)
        res = self.run(world, tiny_params, forest, request_for(world["pois"][0]))
        assert res.ranked[0] == (1, 1.0)
        assert res.ranked[1] == (6, pytest.approx(0.8))
        assert list(res.stage_timings) == ["embed", "ann", "ocr", "rerank"]


class TestResultAndVerifier:
    def test_result_invariants(self):
        with pytest.raises(IntegrityError):
            VerificationResult(((1, 0.9), (1, 0.5)), {})
        with pytest.raises(IntegrityError):
            VerificationResult(((1, 0.5), (2, 0.9)), {})
        res = VerificationResult(((3, 0.9), (1, 0.9)), {"x": 0.1}, "v1")
        assert res.to_json() == {"variant": "v1", "ranked": [{"poi_id": 3, "score": 0.9},
                                                             {"poi_id": 1, "score": 0.9}],
                                 "stage_timings": {"x": 0.1}}

    def test_request_validation(self, world):
        with pytest.raises(ParameterError):
            VerificationRequest(world["pois"][0].signboard, CENTER, "bad name!")
        with pytest.raises(ParameterError):
            VerificationRequest("not an image", CENTER)

    def test_missing_artifact_is_named(self, world):
        ver = Verifier(spatial=world["spatial"], names=world["names"], channel=world["channel"],
                       corrector=world["corrector"])
        assert ver.verify(request_for(world["pois"][0]), "v1").top_ids(1) == [1]
        with pytest.raises(DependencyError) as exc:
            ver.verify(request_for(world["pois"][0]), "v1*")
        assert exc.value.artifact == "outlines"
        with pytest.raises(DependencyError) as exc:
            ver.require("v2")
        assert exc.value.artifact == "params"
        with pytest.raises(ParameterError):
            ver.require("v3")

    def test_verifier_dispatch_matches_functions(self, world, tiny_params, embedded):
        forest = build_forest(embedded, n_trees=2)
        ver = Verifier(params=tiny_params, forest=forest, outlines=world["outlines"], **{
            k: world[k] for k in ("spatial", "names", "channel", "corrector")})
        req = request_for(world["pois"][3])
        assert ver.verify(req, "v1*").ranked == v1star(world, req).ranked
        assert ver.verify(req, "v2").ranked == verify_v2(req, tiny_params, forest,
                                                         AnnQueryBudget(5, 256)).ranked
        assert ver.verify(req, "v2*").variant == "v2*"

    def test_concurrent_calls_agree(self, world):
        from concurrent.futures import ThreadPoolExecutor

        reqs = [request_for(p) for p in world["pois"]] * 5
        serial = [v1star(world, r).ranked for r in reqs]
        with ThreadPoolExecutor(4) as pool:
            parallel = list(pool.map(lambda r: v1star(world, r).ranked, reqs))
        assert parallel == serial

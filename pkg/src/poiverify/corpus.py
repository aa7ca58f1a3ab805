"""Deterministic synthetic corpus: archived POIs plus street-view submissions.

Split shape follows a 50k/12k train-valid/test POI design: ``n_pois``
train/valid POIs each get ``views_per_poi`` train submissions and
``views_per_poi // 2`` validation submissions; a disjoint set of
``round(0.24 * n_pois)`` test POIs gets ``round(1.5 * views_per_poi)``
submissions each.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import FormatError, ParameterError
from .model import (
    DEFAULT_REGION,
    GLYPHS,
    BoundingBox,
    Corpus,
    GeoPoint,
    PoiRecord,
    SignboardImage,
    StreetViewSubmission,
    destination_point,
)
from .render import NoiseParams, SignStyle, perturb, render_canonical

CORPUS_FORMAT = "poiverify-corpus"
CORPUS_VERSION = 1

TEST_POI_RATIO = 12_000 / 50_000
TEST_VIEW_RATIO = 1.5


@dataclass(frozen=True)
class CorpusShape:
    n_trainval_pois: int
    n_test_pois: int
    train_views: int
    valid_views: int
    test_views: int

    @property
    def n_pois(self) -> int:
        return self.n_trainval_pois + self.n_test_pois

    @property
    def n_train_submissions(self) -> int:
        return self.n_trainval_pois * self.train_views

    @property
    def n_valid_submissions(self) -> int:
        return self.n_trainval_pois * self.valid_views

    @property
    def n_test_submissions(self) -> int:
        return self.n_test_pois * self.test_views


def corpus_shape(n_pois: int, views_per_poi: int) -> CorpusShape:
    if n_pois < 1 or views_per_poi < 1:
        raise ParameterError("n_pois and views_per_poi must be >= 1")
    return CorpusShape(
        n_trainval_pois=n_pois,
        n_test_pois=int(round(n_pois * TEST_POI_RATIO)),
        train_views=views_per_poi,
        valid_views=views_per_poi // 2,
        test_views=int(round(views_per_poi * TEST_VIEW_RATIO)),
    )


def make_lexicon(rng: np.random.Generator, size: int, min_len: int = 3, max_len: int = 12) -> list:
    """``size`` distinct random glyph strings."""
    names = []
    seen = set()
    while len(names) < size:
        length = int(rng.integers(min_len, max_len + 1))
        name = "".join(GLYPHS[i] for i in rng.integers(len(GLYPHS), size=length))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def duplicate_name_rate(pois) -> float:
    """Fraction of POIs whose name is shared with at least one other POI."""
    counts = {}
    for p in pois:
        counts[p.name] = counts.get(p.name, 0) + 1
    return sum(1 for p in pois if counts[p.name] > 1) / max(1, len(pois))


def jitter_location(origin: GeoPoint, max_km: float, rng: np.random.Generator) -> GeoPoint:
    """Uniform sample from the disk of radius ``max_km`` around ``origin``."""
    if max_km == 0.0:
        return origin
    bearing = float(rng.uniform(0.0, 2.0 * math.pi))
    dist = max_km * math.sqrt(float(rng.random()))
    return destination_point(origin, bearing, dist)


def generate_corpus(
    seed: int,
    n_pois: int,
    views_per_poi: int,
    region: BoundingBox = DEFAULT_REGION,
    noise: NoiseParams = NoiseParams(),
    lexicon=None,
    zipf_exponent: float = 0.5,
    lexicon_ratio: int = 4,
) -> Corpus:
    """Generate a corpus deterministically from ``seed``.

    Names are drawn with Zipf weights from ``lexicon`` (by default a random
    lexicon of ``lexicon_ratio`` entries per POI), so popular names repeat;
    the defaults give a duplicate-name rate near 30%.
    """
    shape = corpus_shape(n_pois, views_per_poi)
    if not isinstance(region, BoundingBox):
        raise ParameterError("region must be a BoundingBox")
    ss = np.random.SeedSequence(seed)
    lex_rng, poi_rng, sub_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    total = shape.n_pois
    if lexicon is None:
        lexicon = make_lexicon(lex_rng, lexicon_ratio * total)
    lexicon = list(lexicon)
    if not lexicon:
        raise ParameterError("lexicon must be non-empty")
    weights = zipf_weights(len(lexicon), zipf_exponent)

    ids = set()
    while len(ids) < total:
        ids.update(int(x) for x in poi_rng.integers(1, 2**63, size=total - len(ids)))
    ids = sorted(ids)
    poi_rng.shuffle(ids)
    name_idx = poi_rng.choice(len(lexicon), size=total, p=weights)
    lons = poi_rng.uniform(region.min_lon, region.max_lon, size=total)
    lats = poi_rng.uniform(region.min_lat, region.max_lat, size=total)

    pois = []
    for k in range(total):
        style = SignStyle.sample(poi_rng)
        name = lexicon[name_idx[k]]
        pois.append(
            PoiRecord(
                id=int(ids[k]),
                name=name,
                location=GeoPoint(float(lons[k]), float(lats[k])),
                signboard=render_canonical(name, style),
            )
        )
    test_ids = frozenset(p.id for p in pois[shape.n_trainval_pois:])

    submissions = []
    for k, poi in enumerate(pois):
        if k < shape.n_trainval_pois:
            plan = ["train"] * shape.train_views + ["valid"] * shape.valid_views
        else:
            plan = ["test"] * shape.test_views
        for split in plan:
            submissions.append(
                StreetViewSubmission(
                    truth_id=poi.id,
                    shot_location=jitter_location(poi.location, noise.jitter_km, sub_rng),
                    signboard=perturb(poi.signboard, noise, sub_rng),
                    split=split,
                )
            )
    return Corpus(pois=pois, submissions=submissions, test_poi_ids=test_ids)


def encode_signboard(img: SignboardImage) -> str:
    return base64.b64encode(img.to_bytes()).decode("ascii")


def decode_signboard(text: str) -> SignboardImage:
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise FormatError("signboard is not valid base64") from exc
    try:
        return SignboardImage.from_bytes(raw)
    except ParameterError as exc:
        raise FormatError(str(exc)) from exc


def _corpus_records(corpus: Corpus):
    for p in corpus.pois:
        yield {
            "type": "poi",
            "id": p.id,
            "name": p.name,
            "lon": p.location.lon,
            "lat": p.location.lat,
            "split": corpus.split_of(p.id),
            "signboard": encode_signboard(p.signboard),
        }
    for s in corpus.submissions:
        yield {
            "type": "submission",
            "truth_id": s.truth_id,
            "lon": s.shot_location.lon,
            "lat": s.shot_location.lat,
            "split": s.split,
            "signboard": encode_signboard(s.signboard),
        }


def save_corpus(corpus: Corpus, path) -> None:
    write_container(
        Path(path),
        CORPUS_FORMAT,
        CORPUS_VERSION,
        _corpus_records(corpus),
        n_pois=len(corpus.pois),
        n_submissions=len(corpus.submissions),
    )


def load_corpus(path) -> Corpus:
    header, records = read_container(Path(path), CORPUS_FORMAT, CORPUS_VERSION)
    pois, subs, test_ids = [], [], set()
    try:
        for rec in records:
            kind = rec.get("type")
            if kind == "poi":
                pois.append(
                    PoiRecord(
                        id=int(rec["id"]),
                        name=rec["name"],
                        location=GeoPoint(float(rec["lon"]), float(rec["lat"])),
                        signboard=decode_signboard(rec["signboard"]),
                    )
                )
                if rec["split"] == "test":
                    test_ids.add(int(rec["id"]))
            elif kind == "submission":
                subs.append(
                    StreetViewSubmission(
                        truth_id=int(rec["truth_id"]),
                        shot_location=GeoPoint(float(rec["lon"]), float(rec["lat"])),
                        signboard=decode_signboard(rec["signboard"]),
                        split=rec["split"],
                    )
                )
            else:
                raise FormatError(f"unknown record type {kind!r}")
    except (KeyError, TypeError, ParameterError) as exc:
        raise FormatError(f"malformed corpus record: {exc}") from exc
    if len(pois) != header.get("n_pois") or len(subs) != header.get("n_submissions"):
        raise FormatError("corpus record counts do not match header")
    return Corpus(pois=pois, submissions=subs, test_poi_ids=test_ids)

"""The four verification pipelines over one shared set of artifacts.

``v1`` is staged: radius retrieval, simulated OCR plus name correction, then
ranking by name similarity. ``v1*`` adds an outline-feature tie-break for
same-name candidates at the top. ``v2`` embeds the request and runs one ANN
pass. ``v2*`` reranks the ANN top ``k_rerank`` with the ``v1*`` ranker.

All functions here are pure over immutable artifacts and safe to call from
many threads at once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .annindex import AnnForest, AnnQueryBudget
from .embedder import EmbedderParams, embed
from .errors import IntegrityError, ParameterError
from .geoindex import SpatialIndex
from .model import GeoPoint, SignboardImage, validate_name
from .signboard import NameCorrector, OcrChannel, correct_name, name_similarity, ocr_read, outline_feature

VARIANTS = ("v1", "v1*", "v2", "v2*")
DEFAULT_K_OUT = 5
DEFAULT_K_RERANK = 10
DEFAULT_R_KM = 1.0
DEFAULT_BEAM = 256


@dataclass(frozen=True)
class VerificationRequest:
    """A street-view observation to verify.

    ``text`` is the name painted on the signboard. Only the simulated OCR
    channel reads it (the image is synthetic, so there is no recogniser to
    run); variants that skip OCR ignore it.
    """

    signboard: SignboardImage
    shot_location: GeoPoint
    text: str | None = None

    def __post_init__(self):
        if not isinstance(self.signboard, SignboardImage):
            raise ParameterError("signboard must be a SignboardImage")
        if not isinstance(self.shot_location, GeoPoint):
            raise ParameterError("shot_location must be a GeoPoint")
        if self.text is not None:
            validate_name(self.text)


@dataclass(frozen=True)
class VerificationResult:
    ranked: tuple
    stage_timings: dict = field(compare=False)
    variant: str = ""

    def __post_init__(self):
        ranked = tuple((int(i), float(s)) for i, s in self.ranked)
        ids = [i for i, _ in ranked]
        if len(set(ids)) != len(ids):
            raise IntegrityError("ranked ids must be distinct")
        scores = [s for _, s in ranked]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise IntegrityError("ranked scores must be non-increasing")
        object.__setattr__(self, "ranked", ranked)

    def top_ids(self, k: int) -> list:
        return [i for i, _ in self.ranked[:k]]

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "ranked": [{"poi_id": i, "score": s} for i, s in self.ranked],
            "stage_timings": dict(self.stage_timings),
        }


class OutlineTable:
    """Precomputed outline descriptors of archived signboards, by POI id."""

    def __init__(self, ids, features):
        self.features = np.asarray(features, dtype=np.float64)
        self._row = {int(i): r for r, i in enumerate(ids)}
        if len(self._row) != len(self.features):
            raise IntegrityError("outline table ids must be distinct")

    @classmethod
    def from_pois(cls, pois, chunk: int = 2048) -> OutlineTable:
        from .signboard import outline_features

        pois = list(pois)
        feats = np.empty((len(pois), 64))
        for s in range(0, len(pois), chunk):
            feats[s:s + chunk] = outline_features(np.stack([p.signboard.pixels for p in pois[s:s + chunk]]))
        return cls([p.id for p in pois], feats)

    def __len__(self):
        return len(self._row)

    def __getitem__(self, poi_id: int) -> np.ndarray:
        return self.features[self._row[int(poi_id)]]


class _Clock:
    def __init__(self):
        self.timings = {}
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = now - self._t
        self._t = now


def _read_and_correct(req: VerificationRequest, channel: OcrChannel, corrector: NameCorrector, beam: int) -> str:
    if req.text is None:
        raise ParameterError("OCR-based variants need the request's depicted text")
    return correct_name(ocr_read(req.signboard, req.text, channel), corrector, beam).name


def _rank_by_name(corrected: str, cand_ids, names) -> list:
    scored = [(int(i), name_similarity(corrected, names[int(i)])) for i in cand_ids]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def _outline_tiebreak(ranked: list, query_outline: np.ndarray, outlines: OutlineTable, secondary=None) -> list:
    """Reorder the group tied at the top score by outline cosine.

    Remaining ties fall to ``secondary[id]`` (higher first) when given,
    then to id.
    """
    if len(ranked) < 2 or ranked[1][1] != ranked[0][1]:
        return ranked
    top = ranked[0][1]
    n_tied = sum(1 for _, s in ranked if s == top)
    group = ranked[:n_tied]
    cos = {i: float(np.dot(outlines[i], query_outline)) for i, _ in group}
    sec = secondary or {}
    group.sort(key=lambda t: (-cos[t[0]], -sec.get(t[0], 0.0), t[0]))
    return group + ranked[n_tied:]


def verify_v1(req: VerificationRequest, spatial: SpatialIndex, names, channel: OcrChannel,
              corrector: NameCorrector, r_km: float = DEFAULT_R_KM, k_out: int = DEFAULT_K_OUT,
              beam: int = DEFAULT_BEAM) -> VerificationResult:
    clock = _Clock()
    cands = spatial.radius_query(req.shot_location, r_km)
    clock.lap("geo")
    if not cands:
        return VerificationResult((), clock.timings, "v1")
    corrected = _read_and_correct(req, channel, corrector, beam)
    clock.lap("ocr")
    ranked = _rank_by_name(corrected, cands, names)[:k_out]
    clock.lap("rank")
    return VerificationResult(tuple(ranked), clock.timings, "v1")


def verify_v1star(req: VerificationRequest, spatial: SpatialIndex, names, channel: OcrChannel,
                  corrector: NameCorrector, outlines: OutlineTable, r_km: float = DEFAULT_R_KM,
                  k_out: int = DEFAULT_K_OUT, beam: int = DEFAULT_BEAM) -> VerificationResult:
    clock = _Clock()
    cands = spatial.radius_query(req.shot_location, r_km)
    clock.lap("geo")
    if not cands:
        return VerificationResult((), clock.timings, "v1*")
    corrected = _read_and_correct(req, channel, corrector, beam)
    clock.lap("ocr")
    ranked = _rank_by_name(corrected, cands, names)
    clock.lap("rank")
    ranked = _outline_tiebreak(ranked, outline_feature(req.signboard), outlines)[:k_out]
    clock.lap("outline")
    return VerificationResult(tuple(ranked), clock.timings, "v1*")


def _check_dims(params: EmbedderParams, forest: AnnForest) -> None:
    if params.embedding_dim != forest.dim:
        raise IntegrityError(
            f"embedding dim {params.embedding_dim} does not match forest dim {forest.dim}")


def verify_v2(req: VerificationRequest, params: EmbedderParams, forest: AnnForest,
              budget: AnnQueryBudget = AnnQueryBudget(k=DEFAULT_K_OUT)) -> VerificationResult:
    _check_dims(params, forest)
    clock = _Clock()
    m = embed(req.signboard, req.shot_location, params)
    clock.lap("embed")
    ranked = forest.query(m, budget)
    clock.lap("ann")
    return VerificationResult(tuple(ranked), clock.timings, "v2")


def verify_v2star(req: VerificationRequest, params: EmbedderParams, forest: AnnForest, names,
                  channel: OcrChannel, corrector: NameCorrector, outlines: OutlineTable,
                  budget: AnnQueryBudget = AnnQueryBudget(k=DEFAULT_K_RERANK),
                  k_rerank: int = DEFAULT_K_RERANK, k_out: int = DEFAULT_K_OUT,
                  beam: int = DEFAULT_BEAM) -> VerificationResult:
    """ANN top ``k_rerank``, reranked by name similarity of the corrected OCR
    read. The top tied name group is ordered by outline cosine, every other
    tie by ANN score, then id. Reported scores are name similarities."""
    if k_rerank < 1:
        raise ParameterError("k_rerank must be >= 1")
    _check_dims(params, forest)
    clock = _Clock()
    m = embed(req.signboard, req.shot_location, params)
    clock.lap("embed")
    hits = forest.query(m, AnnQueryBudget(k=k_rerank, search_nodes=budget.search_nodes))
    clock.lap("ann")
    if not hits:
        return VerificationResult((), clock.timings, "v2*")
    corrected = _read_and_correct(req, channel, corrector, beam)
    clock.lap("ocr")
    ann_score = dict(hits)
    ranked = [(i, name_similarity(corrected, names[i])) for i, _ in hits]
    ranked.sort(key=lambda t: (-t[1], -ann_score[t[0]], t[0]))
    ranked = _outline_tiebreak(ranked, outline_feature(req.signboard), outlines, ann_score)[:k_out]
    clock.lap("rerank")
    return VerificationResult(tuple(ranked), clock.timings, "v2*")


@dataclass(frozen=True, eq=False)
class Verifier:
    """All artifacts one deployment needs, dispatching by variant name.

    Any artifact may be ``None``; asking for a variant that needs a missing
    one raises :class:`DependencyError` naming it.
    """

    spatial: SpatialIndex | None = None
    names: dict | None = None
    channel: OcrChannel | None = None
    corrector: NameCorrector | None = None
    outlines: OutlineTable | None = None
    params: EmbedderParams | None = None
    forest: AnnForest | None = None
    r_km: float = DEFAULT_R_KM
    k_out: int = DEFAULT_K_OUT
    k_rerank: int = DEFAULT_K_RERANK
    search_nodes: int = 256
    beam: int = DEFAULT_BEAM

    REQUIRES = {
        "v1": ("spatial", "names", "channel", "corrector"),
        "v1*": ("spatial", "names", "channel", "corrector", "outlines"),
        "v2": ("params", "forest"),
        "v2*": ("params", "forest", "names", "channel", "corrector", "outlines"),
    }

    def __post_init__(self):
        if self.k_out < 1 or self.k_rerank < 1:
            raise ParameterError("k_out and k_rerank must be >= 1")
        if not self.r_km > 0:
            raise ParameterError("r_km must be positive")

    def require(self, variant: str) -> None:
        from .errors import DependencyError

        if variant not in self.REQUIRES:
            raise ParameterError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        for name in self.REQUIRES[variant]:
            if getattr(self, name) is None:
                raise DependencyError(name, f"variant {variant} needs the {name} artifact")

    def verify(self, req: VerificationRequest, variant: str) -> VerificationResult:
        self.require(variant)
        if variant == "v1":
            return verify_v1(req, self.spatial, self.names, self.channel, self.corrector,
                             self.r_km, self.k_out, self.beam)
        if variant == "v1*":
            return verify_v1star(req, self.spatial, self.names, self.channel, self.corrector,
                                 self.outlines, self.r_km, self.k_out, self.beam)
        if variant == "v2":
            return verify_v2(req, self.params, self.forest, AnnQueryBudget(self.k_out, self.search_nodes))
        return verify_v2star(req, self.params, self.forest, self.names, self.channel, self.corrector,
                             self.outlines, AnnQueryBudget(self.k_rerank, self.search_nodes),
                             self.k_rerank, self.k_out, self.beam)


DEFAULT_OCR_RATES = {"p_sub": 0.08, "p_delete": 0.02, "p_insert": 0.02}


def default_channel(seed: int = 0) -> OcrChannel:
    return OcrChannel.from_rates(seed=seed, **DEFAULT_OCR_RATES)


def poi_embeddings(pois, params: EmbedderParams, chunk: int = 256):
    """(ids, unit embedding matrix) of archived POIs: canonical signboard at
    the archived location."""
    from .embedder import embed_images

    pois = list(pois)
    mat = embed_images([p.signboard for p in pois], [p.location for p in pois], params, chunk)
    return np.array([p.id for p in pois], dtype=np.uint64), mat


def corrector_from_corpus(corpus, channel: OcrChannel) -> NameCorrector:
    """Fit a corrector on OCR reads of the training submissions; the lexicon
    is every archived name weighted by how many POIs carry it."""
    from collections import Counter

    from .signboard import fit_corrector

    names = {p.id: p.name for p in corpus.pois}
    pairs = [(ocr_read(s.signboard, names[s.truth_id], channel), names[s.truth_id])
             for s in corpus.submissions_in("train")]
    return fit_corrector(pairs, Counter(p.name for p in corpus.pois))


def requests_from(corpus, split: str = "test") -> list:
    """(request, truth id) pairs for every submission in ``split``."""
    names = {p.id: p.name for p in corpus.pois}
    return [(VerificationRequest(s.signboard, s.shot_location, names[s.truth_id]), s.truth_id)
            for s in corpus.submissions_in(split)]

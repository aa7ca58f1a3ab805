"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also collected in
the pytest terminal summary) before asserting. The large-scale checks share
one 10^4-POI corpus; the throughput check builds its own 10^5-POI index.
"""

import time
from collections import Counter

import numpy as np
import pytest

from conftest import random_unit_vectors
from oracles import exact_nn_sr1, fd_check_all
from poiverify.annindex import AnnQueryBudget, ann_query, brute_force_knn, build_forest, load_forest, save_forest
from poiverify.config import ArtifactManifest, RunConfig
from poiverify.corpus import generate_corpus, make_lexicon
from poiverify.embedder import (
    cross_attention_fuse,
    embed_images,
    init_params,
    load_params,
    save_params,
    train,
    triplet_loss_and_grads,
)
from poiverify.errors import CorruptionError
from poiverify.evalbench import BenchSettings, measure_qps, run_benchmark, sr_at_k
from poiverify.geoindex import build_spatial_index
from poiverify.model import GeoPoint, haversine_km
from poiverify.pipeline import (
    OutlineTable,
    VerificationResult,
    Verifier,
    corrector_from_corpus,
    default_channel,
    poi_embeddings,
    requests_from,
)
from poiverify.render import render_canonical
from poiverify.signboard import OcrChannel, correct_name, fit_corrector, ocr_read

pytestmark = pytest.mark.slow

DEFAULTS = RunConfig()


@pytest.fixture(scope="module")
def bench_corpus():
    c = DEFAULTS.corpus
    return generate_corpus(c.seed, 10_000, c.views, c.bounding_box(), c.noise_params())


def test_c01_gradients(criterion):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for d in (2, 4):
        for l in (2, 3):
            for seed in range(20):
                rng = np.random.default_rng(seed)
                params = init_params(l=l, d=d, seed=seed)
                pixels = rng.uniform(0.0, 1.0, size=(2, 32, 128))
                codes = rng.integers(0, 32, size=(2, l))
                for err, n in fd_check_all(params, pixels, codes, rng, n_coords=4).values():
                    worst = max(worst, err)
                    checked += n
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60 and checked > 0
    criterion(1, ok, f"max rel err {worst:.2e} over {checked} coords, 80 configs, {elapsed:.1f}s")
    assert ok


def test_c02_single_position_attention(criterion):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        p = init_params(l=1, d=d, seed=seed)
        g, i = rng.normal(size=(1, d)), rng.normal(size=(1, d))
        I, G = cross_attention_fuse(g, i, p)
        worst = max(worst, float(np.max(np.abs(I - i @ p.U))), float(np.max(np.abs(G - g @ p.W))))
    ok = worst <= 1e-12
    criterion(2, ok, f"max |fused - values| {worst:.1e}")
    assert ok


def test_c03_triplet_contract(criterion):
    rng = np.random.default_rng(3)
    m, mp, mn = (rng.normal(size=(10_000, 8)) for _ in range(3))
    # a slice of triples placed near the margin so both branches are exercised
    mp[:2000] = m[:2000] + 0.05 * rng.normal(size=(2000, 8))
    gamma = 0.5
    loss, _ = triplet_loss_and_grads(m, mp, mn, gamma)

    def cos(a, b):
        return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))

    gap = cos(m, mp) - cos(m, mn)
    clear = np.abs(gap - gamma) > 1e-12
    nonneg = bool(np.all(loss >= 0.0))
    zero_iff = bool(np.array_equal(loss[clear] == 0.0, gap[clear] >= gamma))
    ok = nonneg and zero_iff
    criterion(3, ok, f"{int(np.sum(loss == 0))} zero-loss of 10000, nonneg={nonneg}, zero iff gap>=gamma={zero_iff}")
    assert ok


def test_c04_radius_query_exact(criterion, bench_corpus):
    start = time.perf_counter()
    pois = bench_corpus.pois
    idx = build_spatial_index(pois, DEFAULTS.geo.precision)
    box = DEFAULTS.corpus.bounding_box()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        center = GeoPoint(float(rng.uniform(box.min_lon, box.max_lon)), float(rng.uniform(box.min_lat, box.max_lat)))
        r = float(rng.uniform(0.05, 3.0))
        want = {p.id for p in pois if haversine_km(center, p.location) <= r}
        mismatches += set(idx.radius_query(center, r)) != want
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    criterion(4, ok, f"{mismatches} mismatching queries of 100 over {len(pois)} POIs, {elapsed:.1f}s")
    assert ok


def test_c05_single_leaf_forest(criterion):
    rng = np.random.default_rng(5)
    vecs = random_unit_vectors(rng, 1000, 32)
    ids = np.arange(1000) * 7 + 3
    forest = build_forest((ids, vecs), n_trees=1, leaf_cap=1000)
    same = all(
        ann_query(forest, q, AnnQueryBudget(10, 1)) == brute_force_knn((ids, vecs), q, 10)
        for q in random_unit_vectors(rng, 100, 32)
    )
    criterion(5, same, "100 queries, top-10 ids and scores bit-identical" if same else "differs")
    assert same


def test_c06_ann_recall(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    vecs = random_unit_vectors(rng, 10_000, 64)
    ids = np.arange(10_000)
    forest = build_forest((ids, vecs), n_trees=16, leaf_cap=32, seed=0)
    queries = random_unit_vectors(rng, 100, 64)
    truth = [{i for i, _ in brute_force_knn((ids, vecs), q, 10)} for q in queries]

    def recall(nodes):
        return float(np.mean([len(t & {i for i, _ in ann_query(forest, q, AnnQueryBudget(10, nodes))}) / 10
                              for q, t in zip(queries, truth)]))

    at = {n: recall(n) for n in (256, 1024, 2048, 4096)}
    monotone = at[256] <= at[1024] + 0.01 and at[1024] <= at[4096] + 0.01
    elapsed = time.perf_counter() - start
    ok = at[2048] >= 0.90 and monotone and elapsed < 300
    criterion(6, ok, "recall@10 " + ", ".join(f"{n}:{r:.3f}" for n, r in at.items()) + f", {elapsed:.0f}s")
    assert ok


def test_c07_training(criterion):
    start = time.perf_counter()
    c, e = DEFAULTS.corpus, DEFAULTS.embedder
    data = generate_corpus(c.seed, c.n_pois, c.views, c.bounding_box(), c.noise_params())
    params = init_params(e.l, e.d, e.gamma, e.lr, e.seed)
    res = train(data.submissions_in("train"), params, epochs=e.epochs, batch=e.batch, seed=e.seed,
                triplets_per_anchor=e.triplets_per_anchor)
    db_ids, db = poi_embeddings(data.pois, res.params)
    tests = data.submissions_in("test")
    q = embed_images([s.signboard for s in tests], [s.shot_location for s in tests], res.params)
    sr1 = exact_nn_sr1(q, [s.truth_id for s in tests], db_ids, db)
    ratio = res.loss_trace[-1] / res.loss_trace[0]
    elapsed = time.perf_counter() - start
    ok = ratio < 0.2 and sr1 >= 0.90 and elapsed < 600
    criterion(7, ok, f"loss ratio {ratio:.3f}, held-out SR@1 {sr1:.4f} on {len(tests)} queries, {elapsed:.0f}s")
    assert ok


def _verifier(data, params, forest=None):
    channel = default_channel(DEFAULTS.ocr.seed)
    return Verifier(
        spatial=build_spatial_index(data.pois, DEFAULTS.geo.precision),
        names={p.id: p.name for p in data.pois},
        channel=channel,
        corrector=corrector_from_corpus(data, channel),
        outlines=OutlineTable.from_pois(data.pois),
        params=params,
        forest=forest,
    )


def test_c08_variant_ordering(criterion, bench_corpus):
    start = time.perf_counter()
    e, a = DEFAULTS.embedder, DEFAULTS.ann
    subs = bench_corpus.submissions_in("train")
    train_ids = sorted({s.truth_id for s in subs})
    keep = set(np.random.default_rng(e.seed).choice(train_ids, size=500, replace=False).tolist())
    params = train([s for s in subs if s.truth_id in keep], init_params(e.l, e.d, e.gamma, e.lr, e.seed),
                   epochs=e.epochs, batch=e.batch, seed=e.seed, triplets_per_anchor=e.triplets_per_anchor).params
    forest = build_forest(poi_embeddings(bench_corpus.pois, params), a.n_trees, a.leaf_cap, a.seed)
    report = run_benchmark(_verifier(bench_corpus, params, forest), requests_from(bench_corpus),
                           BenchSettings(n_queries=2000))
    sr = {r["variant"]: r["sr1"] for r in report.rows}
    monotone = all(r["sr1"] <= r["sr3"] <= r["sr5"] for r in report.rows)
    elapsed = time.perf_counter() - start
    ok = sr["v2*"] >= sr["v2"] and sr["v1*"] >= sr["v1"] and monotone and elapsed < 900
    criterion(8, ok, "SR@1 " + ", ".join(f"{v}:{s:.4f}" for v, s in sr.items()) + f" on 2000 queries, {elapsed:.0f}s")
    assert ok


def test_c09_throughput_ratio(criterion):
    start = time.perf_counter()
    c, a = DEFAULTS.corpus, DEFAULTS.ann
    data = generate_corpus(c.seed, 100_000, 1, c.bounding_box(), c.noise_params())
    # throughput does not depend on the weights, so untrained parameters suffice
    params = init_params(DEFAULTS.embedder.l, DEFAULTS.embedder.d, seed=0)
    forest = build_forest(poi_embeddings(data.pois, params), a.n_trees, a.leaf_cap, a.seed)
    verifier = _verifier(data, params, forest)
    requests = [req for req, _ in requests_from(data)[:300]]
    qps = {v: measure_qps(lambda r, v=v: verifier.verify(r, v), requests, workers=1) for v in ("v1", "v2")}
    ratio = qps["v2"].qps / qps["v1"].qps
    elapsed = time.perf_counter() - start
    ok = ratio >= 10 and all(q.valid for q in qps.values()) and elapsed < 600
    criterion(9, ok, f"QPS v1 {qps['v1'].qps:.1f}, v2 {qps['v2'].qps:.1f}, ratio {ratio:.1f} at "
                     f"{len(data.pois)} POIs, {elapsed:.0f}s")
    assert ok


def test_c10_sr_fixture_and_monotonicity(criterion):
    def res(*ids):
        return VerificationResult(tuple((i, 1.0 - 0.1 * r) for r, i in enumerate(ids)), {})

    fixture = [(res(1, 2, 3), 1)] * 6 + [(res(2, 1, 3), 1)] * 4
    exact = sr_at_k(fixture, 1) == 0.6 and sr_at_k(fixture, 3) == 1.0
    rng = np.random.default_rng(10)
    monotone = True
    for _ in range(200):
        pairs = [(res(*rng.permutation(8)[:int(rng.integers(0, 8))].tolist()), int(rng.integers(8)))
                 for _ in range(int(rng.integers(1, 30)))]
        s1, s3, s5 = (sr_at_k(pairs, k) for k in (1, 3, 5))
        monotone &= s1 <= s3 <= s5
    ok = exact and monotone
    criterion(10, ok, f"fixture SR@1={sr_at_k(fixture, 1)} SR@3={sr_at_k(fixture, 3)}, 200 random runs monotone={monotone}")
    assert ok


def test_c11_persistence(criterion, tmp_path):
    rng = np.random.default_rng(11)
    vecs = random_unit_vectors(rng, 3000, 16)
    forest = build_forest((np.arange(3000), vecs), n_trees=8, leaf_cap=16, seed=2)
    save_forest(forest, tmp_path / "forest.bin")
    loaded = load_forest(tmp_path / "forest.bin")
    budget = AnnQueryBudget(10, 128)
    forest_same = all(ann_query(forest, q, budget) == ann_query(loaded, q, budget)
                      for q in random_unit_vectors(rng, 50, 16))

    params = init_params(l=4, d=6, seed=5)
    save_params(params, tmp_path / "embedder.bin")
    imgs = [render_canonical(n) for n in ("Cafe", "Bank", "Hotel7")]
    pts = [GeoPoint(116.3 + 0.01 * k, 39.9) for k in range(3)]
    params_same = np.array_equal(embed_images(imgs, pts, params),
                                 embed_images(imgs, pts, load_params(tmp_path / "embedder.bin")))

    man = ArtifactManifest(tmp_path / "manifest.json")
    man.record("forest", tmp_path / "forest.bin", 1, "fp")
    raw = bytearray((tmp_path / "forest.bin").read_bytes())
    raw[int(rng.integers(len(raw)))] ^= 0x04
    (tmp_path / "forest.bin").write_bytes(bytes(raw))
    try:
        man.verify("forest")
        detected = False
    except CorruptionError:
        detected = True
    ok = forest_same and params_same and detected
    criterion(11, ok, f"forest identical={forest_same}, params identical={params_same}, flipped byte detected={detected}")
    assert ok


def test_c12_corrector_oracle(criterion):
    start = time.perf_counter()
    agree, total = 0, 0
    img = render_canonical("X")
    for seed in range(50):
        rng = np.random.default_rng(seed)
        names = make_lexicon(rng, int(rng.integers(5, 101)))
        lexicon = Counter({n: int(rng.integers(1, 6)) for n in names})
        ch = OcrChannel.from_rates(0.15, 0.05, 0.05, seed=seed)
        pairs = [(ocr_read(img, n, ch, rng), n) for n in names for _ in range(3)]
        corr = fit_corrector(pairs, lexicon)
        for truth in rng.choice(names, size=5):
            noisy = ocr_read(img, str(truth), ch, rng)
            post = {n: corr.log_posterior(noisy, n) for n in lexicon}
            top = max(post.values())
            oracle = min(n for n, s in post.items() if s == top)
            agree += correct_name(noisy, corr, beam=len(lexicon)).name == oracle
            total += 1
    elapsed = time.perf_counter() - start
    ok = agree == total and elapsed < 60
    criterion(12, ok, f"{agree}/{total} corrections equal the posterior argmax, 50 lexicons, {elapsed:.1f}s")
    assert ok

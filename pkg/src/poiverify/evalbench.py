"""Accuracy (SR@K) and closed-loop throughput (QPS) over the four variants.

Every variant sees the identical request list. Throughput runs a fixed pool
of workers, each issuing its next request as soon as the previous one
returns; the first ``warmup_fraction`` of requests is served before the
clock starts and excluded from QPS, but its results still count toward SR.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError
from .pipeline import VARIANTS, Verifier

REPORT_SCHEMA_VERSION = 1
SR_KS = (1, 3, 5)

# Human expert accuracy/throughput as published for the production system.
# Shown for framing only; nothing in this package measures it.
REFERENCE_ROWS = (
    {"variant": "expert mapper", "sr1": 0.9452, "qps": 0.007, "source": "published reference, not measured"},
)


def sr_at_k(results, k: int) -> float:
    """Fraction of (VerificationResult, truth_id) pairs with the truth in the top ``k``."""
    results = list(results)
    if not results:
        raise ParameterError("sr_at_k needs at least one result")
    if k < 1:
        raise ParameterError("k must be >= 1")
    hits = sum(1 for res, truth in results if int(truth) in res.top_ids(k))
    return hits / len(results)


@dataclass
class QpsReport:
    qps: float
    n_completed: int
    wall_seconds: float
    workers: int
    warmup: int
    per_worker: list = field(default_factory=list)
    valid: bool = True
    error: str | None = None
    results: list = field(default_factory=list, repr=False)


def measure_qps(verify, requests, workers: int = 1, warmup: int | None = None) -> QpsReport:
    """Closed-loop throughput of ``verify(request)`` over ``requests``.

    ``warmup`` requests (default 10%) are served first and excluded from the
    timed region. If any call raises, workers stop picking up new requests
    and the report comes back with ``valid=False`` and the partial counts.
    ``results`` holds every return value, indexed like ``requests``.
    """
    requests = list(requests)
    if not requests:
        raise ParameterError("measure_qps needs at least one request")
    if workers < 1:
        raise ParameterError("workers must be >= 1")
    if warmup is None:
        warmup = len(requests) // 10
    if not 0 <= warmup < len(requests):
        raise ParameterError("warmup must leave at least one timed request")

    results = [None] * len(requests)
    failure = []
    lock = threading.Lock()
    cursor = [0]

    def serve(stop_at, tally):
        while True:
            with lock:
                if failure or cursor[0] >= stop_at:
                    return
                i = cursor[0]
                cursor[0] += 1
            t0 = time.perf_counter()
            try:
                results[i] = verify(requests[i])
            except Exception as exc:  # recorded and reported, not swallowed
                with lock:
                    failure.append(f"request {i}: {type(exc).__name__}: {exc}")
                return
            tally[0] += 1
            tally[1] += time.perf_counter() - t0

    def run(stop_at):
        tallies = [[0, 0.0] for _ in range(workers)]
        threads = [threading.Thread(target=serve, args=(stop_at, tallies[w])) for w in range(workers)]
        start = time.perf_counter()
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        return time.perf_counter() - start, tallies

    run(warmup)
    if failure:
        return QpsReport(0.0, 0, 0.0, workers, warmup, valid=False, error=failure[0], results=results)
    wall, tallies = run(len(requests))
    done = sum(t[0] for t in tallies)
    per_worker = [
        {"worker": w, "completed": c, "busy_seconds": busy, "qps": c / busy if busy > 0 else 0.0}
        for w, (c, busy) in enumerate(tallies)
    ]
    return QpsReport(
        qps=done / wall if wall > 0 else 0.0,
        n_completed=done,
        wall_seconds=wall,
        workers=workers,
        warmup=warmup,
        per_worker=per_worker,
        valid=not failure,
        error=failure[0] if failure else None,
        results=results,
    )


@dataclass(frozen=True)
class BenchSettings:
    variants: tuple = VARIANTS
    n_queries: int | None = None
    query_seed: int = 0
    workers: int = 1
    warmup_fraction: float = 0.1

    def __post_init__(self):
        unknown = set(self.variants) - set(VARIANTS)
        if unknown or not self.variants:
            raise ParameterError(f"variants must be a non-empty subset of {VARIANTS}")
        if self.n_queries is not None and self.n_queries < 1:
            raise ParameterError("n_queries must be >= 1")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ParameterError("warmup_fraction must lie in [0, 1)")


@dataclass
class EvalReport:
    rows: list
    n_queries: int
    wall_seconds: float
    config_fingerprint: str
    corpus_stats: dict
    workers: int
    warmup_fraction: float
    schema_version: int = REPORT_SCHEMA_VERSION

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)

    def to_json(self) -> dict:
        out = asdict(self)
        out["reference_rows"] = [dict(r) for r in REFERENCE_ROWS]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ParameterError(f"unsupported report schema {obj.get('schema_version')!r}")
        fields_ = {k: obj[k] for k in ("rows", "n_queries", "wall_seconds", "config_fingerprint",
                                       "corpus_stats", "workers", "warmup_fraction")}
        return cls(**fields_)

    def table(self) -> str:
        head = f"{'variant':<16}{'SR@1':>8}{'SR@3':>8}{'SR@5':>8}{'QPS':>10}  note"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            note = "" if r["qps_valid"] else "QPS invalid"
            lines.append(f"{r['variant']:<16}{r['sr1']:>8.4f}{r['sr3']:>8.4f}{r['sr5']:>8.4f}{r['qps']:>10.2f}  {note}")
        for r in REFERENCE_ROWS:
            lines.append(f"{r['variant']:<16}{r['sr1']:>8.4f}{'-':>8}{'-':>8}{r['qps']:>10.3f}  {r['source']}")
        lines.append(
            f"{self.n_queries} queries, {self.workers} worker(s), "
            f"{self.warmup_fraction:.0%} warmup excluded from QPS, config {self.config_fingerprint}"
        )
        return "\n".join(lines)


def select_requests(pairs, settings: BenchSettings) -> list:
    """Deterministic subsample of (request, truth) pairs, in original order."""
    pairs = list(pairs)
    if settings.n_queries is None or settings.n_queries >= len(pairs):
        return pairs
    rng = np.random.default_rng(settings.query_seed)
    keep = np.sort(rng.choice(len(pairs), size=settings.n_queries, replace=False))
    return [pairs[i] for i in keep]


def run_benchmark(verifier: Verifier, pairs, settings: BenchSettings = BenchSettings(),
                  corpus_stats: dict | None = None, fingerprint: str = "", progress=None) -> EvalReport:
    """Evaluate every requested variant on the same (request, truth) list.

    Artifacts are checked for every variant before any timing starts, so a
    missing one fails fast with :class:`DependencyError`.
    """
    for v in settings.variants:
        verifier.require(v)
    pairs = select_requests(pairs, settings)
    if not pairs:
        raise ParameterError("benchmark needs at least one test request")
    requests = [req for req, _ in pairs]
    truths = [truth for _, truth in pairs]
    warmup = min(int(len(requests) * settings.warmup_fraction), len(requests) - 1)
    start = time.perf_counter()
    rows = []
    for variant in settings.variants:
        rep = measure_qps(lambda r, v=variant: verifier.verify(r, v), requests, settings.workers, warmup)
        scored = [(res, t) for res, t in zip(rep.results, truths) if res is not None]
        row = {"variant": variant, "n_queries": len(scored), "qps": rep.qps, "qps_valid": rep.valid}
        for k in SR_KS:
            row[f"sr{k}"] = sr_at_k(scored, k) if scored else 0.0
        if not rep.valid:
            row["error"] = rep.error
        rows.append(row)
        if progress is not None:
            progress(row)
    return EvalReport(
        rows=rows,
        n_queries=len(requests),
        wall_seconds=time.perf_counter() - start,
        config_fingerprint=fingerprint,
        corpus_stats=dict(corpus_stats or {}),
        workers=settings.workers,
        warmup_fraction=settings.warmup_fraction,
    )

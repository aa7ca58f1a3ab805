"""Command-line entry point.

Subcommands share one artifact directory and one manifest::

    poiverify generate     corpus.jsonl
    poiverify train        embedder.bin
    poiverify build-index  spatial.bin, channel.jsonl, corrector.jsonl, forest.bin
    poiverify verify       one VerificationResult as JSON on stdout
    poiverify bench        report.json plus a table on stdout
    poiverify serve        newline-delimited JSON over TCP

Exit codes: 0 success, 1 usage, 2 missing dependency, 3 corruption, 4 other
runtime failure.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import logging
import signal
import socket
import socketserver
import sys
import threading
from pathlib import Path

import numpy as np

from . import annindex, corpus as corpus_mod, embedder, geoindex, signboard
from .config import ArtifactManifest, RunConfig, load_config
from .errors import CorruptionError, DependencyError, FormatError, ParameterError, PoiVerifyError
from .evalbench import BenchSettings, run_benchmark
from .model import GeoPoint, SignboardImage
from .pipeline import (
    VARIANTS,
    OutlineTable,
    VerificationRequest,
    Verifier,
    corrector_from_corpus,
    poi_embeddings,
    requests_from,
)
from .signboard import OcrChannel

log = logging.getLogger("poiverify")

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_CORRUPTION, EXIT_RUNTIME = 0, 1, 2, 3, 4


class UsageError(PoiVerifyError):
    """Bad invocation: unknown flag, refused overwrite, malformed input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class Workspace:
    """Config plus artifact directory plus manifest."""

    def __init__(self, cfg: RunConfig, workdir):
        self.cfg = cfg
        self.dir = Path(workdir)
        self.fingerprint = cfg.fingerprint()

    def path(self, kind: str) -> Path:
        return self.dir / getattr(self.cfg.paths, kind)

    def manifest(self) -> ArtifactManifest:
        return ArtifactManifest.load(self.path("manifest"))

    def record(self, kind: str, version: int) -> None:
        man = self.manifest()
        man.record(kind, self.path(kind), version, self.fingerprint)
        man.save()


# ---------------------------------------------------------------- commands

def cmd_generate(ws: Workspace, force: bool = False) -> Path:
    out = ws.path("corpus")
    if out.exists() and not force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    c = ws.cfg.corpus
    ws.dir.mkdir(parents=True, exist_ok=True)
    data = corpus_mod.generate_corpus(c.seed, c.n_pois, c.views, c.bounding_box(), c.noise_params())
    corpus_mod.save_corpus(data, out)
    ws.record("corpus", corpus_mod.CORPUS_VERSION)
    log.info("wrote %d POIs and %d submissions to %s", len(data.pois), len(data.submissions), out)
    return out


def _load_corpus(ws: Workspace, man: ArtifactManifest):
    return corpus_mod.load_corpus(man.verify("corpus"))


def _training_submissions(data, e) -> list:
    subs = data.submissions_in("train")
    if e.max_train_pois is None:
        return subs
    poi_ids = sorted({s.truth_id for s in subs})
    if len(poi_ids) <= e.max_train_pois:
        return subs
    rng = np.random.default_rng(e.seed)
    keep = set(rng.choice(poi_ids, size=e.max_train_pois, replace=False).tolist())
    return [s for s in subs if s.truth_id in keep]


def cmd_train(ws: Workspace) -> Path:
    man = ws.manifest()
    data = _load_corpus(ws, man)
    e = ws.cfg.embedder
    params = embedder.init_params(e.l, e.d, e.gamma, e.lr, e.seed)
    result = embedder.train(
        _training_submissions(data, e), params, epochs=e.epochs, batch=e.batch, seed=e.seed,
        triplets_per_anchor=e.triplets_per_anchor,
        progress=lambda ep, loss: log.info("epoch %d mean triplet loss %.5f", ep + 1, loss),
    )
    embedder.save_params(result.params, ws.path("params"))
    ws.record("params", embedder.PARAMS_VERSION)
    return ws.path("params")


def _channel(ws: Workspace) -> OcrChannel:
    o = ws.cfg.ocr
    return OcrChannel.from_rates(o.p_sub, o.p_delete, o.p_insert, seed=o.seed)


def cmd_build_index(ws: Workspace) -> list:
    """Build the spatial index, OCR channel and corrector; the ANN forest
    too when trained parameters are recorded."""
    man = ws.manifest()
    data = _load_corpus(ws, man)
    built = []
    spatial = geoindex.build_spatial_index(data.pois, ws.cfg.geo.precision)
    geoindex.save_spatial_index(spatial, ws.path("spatial"))
    ws.record("spatial", geoindex.SPATIAL_VERSION)
    channel = _channel(ws)
    signboard.save_channel(channel, ws.path("channel"))
    ws.record("channel", signboard.OCR_VERSION)
    signboard.save_corrector(corrector_from_corpus(data, channel), ws.path("corrector"))
    ws.record("corrector", signboard.OCR_VERSION)
    built += ["spatial", "channel", "corrector"]
    if man.has("params"):
        params = embedder.load_params(man.verify("params"))
        a = ws.cfg.ann
        forest = annindex.build_forest(poi_embeddings(data.pois, params), a.n_trees, a.leaf_cap, a.seed)
        annindex.save_forest(forest, ws.path("forest"))
        ws.record("forest", annindex.FOREST_VERSION)
        built.append("forest")
    else:
        log.warning("no trained parameters recorded; skipping the ANN forest")
    return built


def load_verifier(ws: Workspace, variants=VARIANTS):
    """(Verifier, corpus) with only the artifacts ``variants`` need, each
    hash-checked against the manifest."""
    man = ws.manifest()
    needed = set()
    for v in variants:
        if v not in Verifier.REQUIRES:
            raise UsageError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        needed.update(Verifier.REQUIRES[v])
    data = _load_corpus(ws, man)
    parts = {}
    if "spatial" in needed:
        parts["spatial"] = geoindex.load_spatial_index(man.verify("spatial"))
    if "names" in needed:
        parts["names"] = {p.id: p.name for p in data.pois}
    if "channel" in needed:
        parts["channel"] = signboard.load_channel(man.verify("channel"))
    if "corrector" in needed:
        parts["corrector"] = signboard.load_corrector(man.verify("corrector"))
    if "outlines" in needed:
        parts["outlines"] = OutlineTable.from_pois(data.pois)
    if "params" in needed:
        parts["params"] = embedder.load_params(man.verify("params"))
    if "forest" in needed:
        parts["forest"] = annindex.load_forest(man.verify("forest"))
    g, p, a, o = ws.cfg.geo, ws.cfg.pipeline, ws.cfg.ann, ws.cfg.ocr
    verifier = Verifier(r_km=g.r_km, k_out=p.k_out, k_rerank=p.k_rerank, search_nodes=a.search_nodes,
                        beam=o.beam, **parts)
    return verifier, data


# ---------------------------------------------------------------- wire protocol

def parse_request(obj, default_variant: str):
    """Wire object -> (VerificationRequest, variant).

    Fields: ``signboard`` base64 of the 32x128 uint8 bitmap in row-major
    order, ``lon``, ``lat``, optional ``variant`` and optional ``text``.
    """
    if not isinstance(obj, dict):
        raise FormatError("request must be a JSON object")
    missing = [k for k in ("signboard", "lon", "lat") if k not in obj]
    if missing:
        raise FormatError(f"request is missing {missing}")
    try:
        raw = base64.b64decode(obj["signboard"], validate=True)
    except (binascii.Error, TypeError, ValueError) as exc:
        raise FormatError("signboard is not valid base64") from exc
    try:
        img = SignboardImage.from_bytes(raw)
        point = GeoPoint(float(obj["lon"]), float(obj["lat"]))
    except (TypeError, ValueError) as exc:
        raise FormatError(str(exc)) from exc
    variant = obj.get("variant", default_variant)
    if variant not in VARIANTS:
        raise FormatError(f"unknown variant {variant!r}")
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise FormatError("text must be a string")
    return VerificationRequest(img, point, text), variant


def request_to_wire(req: VerificationRequest, variant: str) -> dict:
    obj = {
        "signboard": base64.b64encode(req.signboard.to_bytes()).decode("ascii"),
        "lon": req.shot_location.lon,
        "lat": req.shot_location.lat,
        "variant": variant,
    }
    if req.text is not None:
        obj["text"] = req.text
    return obj


def dumps_wire(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def handle_line(verifier: Verifier, line: str, default_variant: str) -> str:
    """One request line -> one response line (without the LF).

    Every failure becomes ``{"error": {"type": ..., "message": ...}}``.
    """
    try:
        obj = json.loads(line)
        req, variant = parse_request(obj, default_variant)
        return dumps_wire(verifier.verify(req, variant).to_json())
    except json.JSONDecodeError as exc:
        return dumps_wire({"error": {"type": "FormatError", "message": f"invalid JSON: {exc.msg}"}})
    except Exception as exc:  # reported on the wire; the connection stays usable
        return dumps_wire({"error": {"type": type(exc).__name__, "message": str(exc)}})


def cmd_verify(ws: Workspace, request_obj: dict | None = None, test_index: int | None = None,
               variant: str | None = None) -> str:
    variant = variant or ws.cfg.pipeline.variant
    verifier, data = load_verifier(ws, [variant])
    if test_index is not None:
        pairs = requests_from(data, "test")
        if not 0 <= test_index < len(pairs):
            raise UsageError(f"test index must lie in 0..{len(pairs) - 1}")
        req = pairs[test_index][0]
    else:
        req, variant = parse_request(request_obj, variant)
    return dumps_wire(verifier.verify(req, variant).to_json())


def cmd_bench(ws: Workspace, variants=VARIANTS):
    verifier, data = load_verifier(ws, variants)
    b = ws.cfg.bench
    settings = BenchSettings(tuple(variants), b.n_queries, b.query_seed, b.workers, b.warmup_fraction)
    stats = {
        "n_pois": len(data.pois),
        "n_submissions": len(data.submissions),
        "n_test_submissions": len(data.submissions_in("test")),
        "duplicate_name_rate": corpus_mod.duplicate_name_rate(data.pois),
    }
    report = run_benchmark(verifier, requests_from(data, "test"), settings, stats, ws.fingerprint,
                           progress=lambda row: log.info("%s done: SR@1 %.4f", row["variant"], row["sr1"]))
    ws.path("report").write_text(report.dumps() + "\n", encoding="utf-8")
    ws.record("report", report.schema_version)
    return report


class VerificationServer(socketserver.ThreadingTCPServer):
    """Threaded NDJSON server. ``stop()`` stops accepting, lets every
    connection finish the line it is working on, then joins the handlers."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True
    poll_seconds = 0.2

    def __init__(self, address, verifier: Verifier, default_variant: str):
        super().__init__(address, _LineHandler)
        self.verifier = verifier
        self.default_variant = default_variant
        self.stopping = threading.Event()

    def stop(self) -> None:
        """Call from any thread other than the one running ``serve_forever``."""
        self.stopping.set()
        self.shutdown()
        self.server_close()


class _LineHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.settimeout(self.server.poll_seconds)
        buf = b""
        while not self.server.stopping.is_set():
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while b"\n" in buf:
                raw, buf = buf.split(b"\n", 1)
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                reply = handle_line(self.server.verifier, line, self.server.default_variant) + "\n"
                try:
                    sock.sendall(reply.encode("utf-8"))
                except OSError:
                    return


def make_server(verifier: Verifier, host: str = "127.0.0.1", port: int = 0,
                default_variant: str = "v2*") -> VerificationServer:
    return VerificationServer((host, port), verifier, default_variant)


def cmd_serve(ws: Workspace, host: str, port: int) -> None:
    verifier, _ = load_verifier(ws, VARIANTS if ws.manifest().has("forest") else ("v1", "v1*"))
    server = make_server(verifier, host, port, ws.cfg.pipeline.variant)
    done = threading.Event()

    def on_signal(signum, frame):
        if not done.is_set():
            done.set()
            server.stopping.set()
            threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    bound = server.server_address
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    server.serve_forever(poll_interval=0.2)
    server.server_close()  # joins handler threads once their current line is answered
    log.info("server stopped")


# ---------------------------------------------------------------- argv

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--workdir", default="artifacts", help="artifact directory (default: ./artifacts)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="poiverify", description="Synthetic POI verification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("generate", parents=[common], help="generate the synthetic corpus")
    gen.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    sub.add_parser("train", parents=[common], help="train the multimodal embedder")
    sub.add_parser("build-index", parents=[common], help="build spatial index, OCR models and ANN forest")
    ver = sub.add_parser("verify", parents=[common], help="verify one request, print JSON")
    src = ver.add_mutually_exclusive_group(required=True)
    src.add_argument("--request", help="wire-format request JSON file, or - for stdin")
    src.add_argument("--test-index", type=int, help="use the i-th test-split submission of the corpus")
    ver.add_argument("--variant", choices=VARIANTS)
    bench = sub.add_parser("bench", parents=[common], help="SR@K and QPS for every variant")
    bench.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    serve = sub.add_parser("serve", parents=[common], help="NDJSON verification service over TCP")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=7878)
    return parser


def _read_request(arg: str) -> dict:
    text = sys.stdin.read() if arg == "-" else Path(arg).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"request is not valid JSON: {exc.msg}") from exc


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
    except (ParameterError, FormatError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    ws = Workspace(cfg, args.workdir)
    if args.command == "generate":
        print(cmd_generate(ws, args.force))
    elif args.command == "train":
        print(cmd_train(ws))
    elif args.command == "build-index":
        print(" ".join(cmd_build_index(ws)))
    elif args.command == "verify":
        obj = _read_request(args.request) if args.request else None
        print(cmd_verify(ws, obj, args.test_index, args.variant))
    elif args.command == "bench":
        print(cmd_bench(ws, args.variants).table())
    elif args.command == "serve":
        cmd_serve(ws, args.host, args.port)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"poiverify: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"poiverify: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except CorruptionError as exc:
        print(f"poiverify: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPTION
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        print(f"poiverify: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

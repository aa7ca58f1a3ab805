"""Run configuration and the artifact manifest shared by CLI subcommands.

The config is a JSON document with a schema version and one object per
section. ``--set section.key=value`` flags override file values; values are
parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptionError, DependencyError, FormatError, ParameterError
from .model import BoundingBox
from .render import NoiseParams

CONFIG_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


@dataclass
class CorpusSection:
    seed: int = 0
    n_pois: int = 500
    views: int = 4
    noise: dict = field(default_factory=lambda: dataclasses.asdict(NoiseParams()))
    region: list = field(default_factory=lambda: [116.10, 39.75, 116.60, 40.15])

    def noise_params(self) -> NoiseParams:
        return NoiseParams(**self.noise)

    def bounding_box(self) -> BoundingBox:
        if len(self.region) != 4:
            raise ParameterError("region must be [min_lon, min_lat, max_lon, max_lat]")
        return BoundingBox(*map(float, self.region))


@dataclass
class GeoSection:
    precision: int = 5
    r_km: float = 1.0


@dataclass
class EmbedderSection:
    l: int = 8
    d: int = 32
    gamma: float = 0.5
    lr: float = 0.5
    epochs: int = 20
    batch: int = 64
    triplets_per_anchor: int = 2
    seed: int = 0
    max_train_pois: int | None = None


@dataclass
class AnnSection:
    n_trees: int = 16
    leaf_cap: int = 32
    search_nodes: int = 256
    seed: int = 0


@dataclass
class OcrSection:
    p_sub: float = 0.08
    p_delete: float = 0.02
    p_insert: float = 0.02
    seed: int = 0
    beam: int = 256


@dataclass
class PipelineSection:
    variant: str = "v2*"
    k_out: int = 5
    k_rerank: int = 10


@dataclass
class BenchSection:
    n_queries: int | None = None
    query_seed: int = 0
    workers: int = 1
    warmup_fraction: float = 0.1


@dataclass
class PathsSection:
    corpus: str = "corpus.jsonl"
    params: str = "embedder.bin"
    spatial: str = "spatial.bin"
    forest: str = "forest.bin"
    channel: str = "channel.jsonl"
    corrector: str = "corrector.jsonl"
    report: str = "report.json"
    manifest: str = "manifest.json"


SECTIONS = {
    "corpus": CorpusSection,
    "geo": GeoSection,
    "embedder": EmbedderSection,
    "ann": AnnSection,
    "ocr": OcrSection,
    "pipeline": PipelineSection,
    "bench": BenchSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    geo: GeoSection = field(default_factory=GeoSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    ann: AnnSection = field(default_factory=AnnSection)
    ocr: OcrSection = field(default_factory=OcrSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_SCHEMA_VERSION, **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        obj = dict(obj)
        version = obj.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise FormatError(f"unsupported config schema version {version!r}")
        unknown = set(obj) - set(SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in SECTIONS.items():
            values = obj.get(name, {})
            if not isinstance(values, dict):
                raise ParameterError(f"config section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - known
            if bad:
                raise ParameterError(f"unknown keys in {name!r}: {sorted(bad)}")
            sections[name] = klass(**values)
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Re-check the constraints owned by each module."""
        from .pipeline import VARIANTS

        c, g, e, a, o, p, b = self.corpus, self.geo, self.embedder, self.ann, self.ocr, self.pipeline, self.bench
        if c.n_pois < 1 or c.views < 1:
            raise ParameterError("corpus.n_pois and corpus.views must be >= 1")
        c.noise_params()
        c.bounding_box()
        if not 1 <= g.precision <= 12 or not g.r_km > 0:
            raise ParameterError("geo.precision must be in 1..12 and geo.r_km > 0")
        if min(e.l, e.d, e.epochs, e.batch, e.triplets_per_anchor) < 1 or e.l > 12:
            raise ParameterError("embedder l in 1..12; d, epochs, batch, triplets_per_anchor >= 1")
        if e.gamma <= 0 or e.lr < 0:
            raise ParameterError("embedder.gamma must be > 0 and embedder.lr >= 0")
        if e.max_train_pois is not None and e.max_train_pois < 2:
            raise ParameterError("embedder.max_train_pois must be >= 2")
        if a.n_trees < 1 or a.leaf_cap < 1 or a.search_nodes < a.n_trees:
            raise ParameterError("ann: n_trees, leaf_cap >= 1 and search_nodes >= n_trees")
        for prob in (o.p_sub, o.p_delete, o.p_insert):
            if not 0.0 <= prob <= 1.0:
                raise ParameterError("ocr rates must lie in [0, 1]")
        if o.beam < 1:
            raise ParameterError("ocr.beam must be >= 1")
        if p.variant not in VARIANTS:
            raise ParameterError(f"pipeline.variant must be one of {VARIANTS}")
        if p.k_out < 1 or p.k_rerank < 1:
            raise ParameterError("pipeline.k_out and pipeline.k_rerank must be >= 1")
        if b.workers < 1 or not 0.0 <= b.warmup_fraction < 1.0:
            raise ParameterError("bench.workers >= 1 and bench.warmup_fraction in [0, 1)")
        if b.n_queries is not None and b.n_queries < 1:
            raise ParameterError("bench.n_queries must be >= 1")
        names = list(dataclasses.asdict(self.paths).values())
        if len(set(names)) != len(names):
            raise ParameterError("artifact paths must be distinct")

    def fingerprint(self) -> str:
        """Short content hash of the effective config (paths excluded)."""
        body = self.to_dict()
        body.pop("paths")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, assignments) -> RunConfig:
        """Apply ``section.key=value`` strings and re-validate."""
        obj = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or section not in SECTIONS:
                raise ParameterError(f"override must look like section.key=value, got {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            target = obj[section]
            path = name.split(".")
            for part in path[:-1]:
                if not isinstance(target.get(part), dict):
                    raise ParameterError(f"unknown config key {key!r}")
                target = target[part]
            target[path[-1]] = value
        return RunConfig.from_dict(obj)


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: config is not valid JSON") from exc
        if not isinstance(obj, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        cfg = RunConfig.from_dict(obj)
    return cfg.with_overrides(overrides) if overrides else cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class ArtifactManifest:
    """Per-artifact record of path, format version, content hash and the
    fingerprint of the config that produced it, stored as JSON."""

    def __init__(self, path, entries=None):
        self.path = Path(path)
        self.entries = dict(entries or {})

    @classmethod
    def load(cls, path) -> ArtifactManifest:
        path = Path(path)
        if not path.exists():
            return cls(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptionError("manifest", f"{path}: manifest is not valid JSON") from exc
        if obj.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported manifest schema {obj.get('schema_version')!r}")
        return cls(path, obj.get("artifacts", {}))

    def save(self) -> None:
        body = {"schema_version": MANIFEST_SCHEMA_VERSION, "artifacts": self.entries}
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def record(self, kind: str, artifact_path, format_version: int, fingerprint: str) -> dict:
        artifact_path = Path(artifact_path)
        entry = {
            "kind": kind,
            "path": artifact_path.name,
            "format_version": int(format_version),
            "sha256": file_sha256(artifact_path),
            "config_fingerprint": fingerprint,
        }
        self.entries[kind] = entry
        return entry

    def has(self, kind: str) -> bool:
        return kind in self.entries

    def verify(self, kind: str) -> Path:
        """Path of a recorded artifact after checking its content hash."""
        entry = self.entries.get(kind)
        if entry is None:
            raise DependencyError(kind, f"artifact {kind!r} is not in the manifest; run the command that builds it")
        path = self.path.parent / entry["path"]
        if not path.exists():
            raise DependencyError(kind, f"artifact {kind!r} is recorded but {path} is missing")
        if file_sha256(path) != entry["sha256"]:
            raise CorruptionError(kind, f"artifact {kind!r} at {path} does not match its recorded sha256")
        return path

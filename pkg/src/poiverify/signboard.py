"""Simulated OCR channel, noisy-channel name corrector and outline descriptor.

Channel model, per ground-truth glyph: an optional leading insertion before
the first glyph, then for each glyph either a deletion (``p_delete``) or an
emission drawn from its confusion row, followed by an optional insertion
(``p_insert``) of a glyph drawn from the insertion distribution. The
corrector scores lexicon entries with the exact likelihood of this process.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .container import read_container, write_container
from .errors import ParameterError, StateError
from .model import GLYPH_INDEX, GLYPHS, SignboardImage
from .render import glyph_neighbours

N_GLYPHS = len(GLYPHS)
OCR_FORMAT = "poiverify-ocr"
OCR_VERSION = 1


def _check_stochastic(matrix: np.ndarray, what: str) -> None:
    if matrix.shape != (N_GLYPHS, N_GLYPHS):
        raise ParameterError(f"{what} must be {N_GLYPHS}x{N_GLYPHS}")
    if np.any(matrix < 0) or np.any(matrix > 1) or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9):
        raise ParameterError(f"{what} rows must be probability vectors")


def _check_prob(p: float, what: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"{what} must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class OcrChannel:
    confusion: np.ndarray
    p_delete: float = 0.0
    p_insert: float = 0.0
    seed: int = 0

    def __post_init__(self):
        conf = np.array(self.confusion, dtype=np.float64)
        _check_stochastic(conf, "confusion")
        _check_prob(self.p_delete, "p_delete")
        _check_prob(self.p_insert, "p_insert")
        conf.setflags(write=False)
        object.__setattr__(self, "confusion", conf)
        cdf = np.cumsum(conf, axis=1)
        cdf[:, -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @classmethod
    def from_rates(cls, p_sub: float, p_delete: float = 0.0, p_insert: float = 0.0,
                   seed: int = 0, spread: int = 3) -> OcrChannel:
        """Substitutions go to the ``spread`` most similar-looking glyphs, weighted 3:2:1-style."""
        _check_prob(p_sub, "p_sub")
        conf = np.zeros((N_GLYPHS, N_GLYPHS))
        weights = np.arange(spread, 0, -1, dtype=np.float64)
        weights /= weights.sum()
        nbrs = glyph_neighbours()
        for g in range(N_GLYPHS):
            conf[g, g] = 1.0 - p_sub
            conf[g, nbrs[g, :spread]] += p_sub * weights
        return cls(conf, p_delete, p_insert, seed)

    @classmethod
    def identity(cls, seed: int = 0) -> OcrChannel:
        return cls(np.eye(N_GLYPHS), 0.0, 0.0, seed)

    @property
    def substitution_rate(self) -> float:
        """Mean off-diagonal mass per emitted glyph (uniform over glyphs)."""
        return float(1.0 - np.mean(np.diag(self.confusion)))


def _content_rng(ch: OcrChannel, img: SignboardImage, truth_name: str) -> np.random.Generator:
    h = hashlib.blake2b(img.to_bytes(), digest_size=16)
    h.update(truth_name.encode("utf-8"))
    return np.random.default_rng([ch.seed, int.from_bytes(h.digest(), "little")])


def ocr_read(img: SignboardImage, truth_name: str, ch: OcrChannel, rng=None) -> str:
    """Corrupt ``truth_name`` through the channel.

    Without an explicit ``rng`` the draw is seeded from the channel seed and a
    hash of (image, name), so repeated calls on the same input agree.
    """
    idx = [GLYPH_INDEX[c] for c in truth_name]
    if rng is None:
        rng = _content_rng(ch, img, truth_name)
    u = rng.random((len(idx) + 1, 4))
    out = []
    if u[0, 2] < ch.p_insert:
        out.append(GLYPHS[int(u[0, 3] * N_GLYPHS)])
    for k, g in enumerate(idx, start=1):
        if u[k, 0] >= ch.p_delete:
            out.append(GLYPHS[int(np.searchsorted(ch._cdf[g], u[k, 1], side="right"))])
        if u[k, 2] < ch.p_insert:
            out.append(GLYPHS[int(u[k, 3] * N_GLYPHS)])
    return "".join(out)


def align(noisy: str, true: str) -> list:
    """Minimum-edit-distance alignment of ``true`` -> ``noisy``.

    Returns ops ``("sub", t, n)``, ``("del", t, None)`` or ``("ins", None, n)``
    in order. On equal cost the backtrace prefers substitution, then deletion.
    """
    n, m = len(true), len(noisy)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ti = true[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ti != noisy[j - 1]), prev[j] + 1, row[j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (true[i - 1] != noisy[j - 1]):
            ops.append(("sub", true[i - 1], noisy[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(("del", true[i - 1], None))
            i -= 1
        else:
            ops.append(("ins", None, noisy[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j - 1] + (ca != cb), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def name_similarity(a: str, b: str) -> float:
    """1 - Levenshtein(a, b) / max(len a, len b); 1.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass(frozen=True)
class Correction:
    name: str
    posterior: float
    log_score: float


@dataclass(frozen=True, eq=False)
class NameCorrector:
    """Unigram lexicon prior plus an estimated channel."""

    lexicon: dict
    confusion: np.ndarray
    p_delete: float
    p_insert: float
    insert_probs: np.ndarray
    _by_first: dict = field(init=False, repr=False)
    _order: list = field(init=False, repr=False)

    def __post_init__(self):
        lex = {str(k): int(v) for k, v in self.lexicon.items()}
        if any(v <= 0 for v in lex.values()):
            raise ParameterError("lexicon counts must be positive")
        conf = np.array(self.confusion, dtype=np.float64)
        _check_stochastic(conf, "channel estimate")
        ins = np.array(self.insert_probs, dtype=np.float64)
        if ins.shape != (N_GLYPHS,) or not math.isclose(ins.sum(), 1.0, abs_tol=1e-9):
            raise ParameterError("insert_probs must be a probability vector over glyphs")
        _check_prob(self.p_delete, "p_delete")
        _check_prob(self.p_insert, "p_insert")
        conf.setflags(write=False)
        ins.setflags(write=False)
        object.__setattr__(self, "lexicon", lex)
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "insert_probs", ins)
        # plain lists are much faster than ndarray indexing in the DP loop
        object.__setattr__(self, "_conf_rows", conf.tolist())
        object.__setattr__(self, "_ins", ins.tolist())
        total = sum(lex.values())
        object.__setattr__(self, "_total", total)
        order = sorted(lex, key=lambda nm: (-lex[nm], nm))
        object.__setattr__(self, "_order", order)
        by_first = {}
        for nm in order:
            by_first.setdefault(nm[0], []).append(nm)
        object.__setattr__(self, "_by_first", by_first)
        sources = np.argsort(-conf, axis=0, kind="stable")
        object.__setattr__(self, "_likely_sources", sources)

    def log_prior(self, name: str) -> float:
        return math.log(self.lexicon[name] / self._total)

    def likelihood(self, noisy: str, true: str) -> float:
        """P(noisy | true) summed over all channel paths."""
        pd, pi = self.p_delete, self.p_insert
        keep_del = pd * (1.0 - pi)
        del_ins = pd * pi
        emit_no = (1.0 - pd) * (1.0 - pi)
        emit_ins = (1.0 - pd) * pi
        ins = self._ins
        obs = [GLYPH_INDEX[c] for c in noisy]
        m = len(obs)
        ins_obs = [ins[o] for o in obs]
        prev = [0.0] * (m + 2)
        prev[0] = 1.0 - pi
        if m:
            prev[1] = pi * ins_obs[0]
        for ch in true:
            row = self._conf_rows[GLYPH_INDEX[ch]]
            cur = [0.0] * (m + 2)
            for j in range(m + 1):
                v = prev[j]
                if v == 0.0:
                    continue
                cur[j] += v * keep_del
                if j < m:
                    cur[j + 1] += v * del_ins * ins_obs[j]
                    e = v * row[obs[j]]
                    cur[j + 1] += e * emit_no
                    if j + 1 < m:
                        cur[j + 2] += e * emit_ins * ins_obs[j + 1]
            prev = cur
        return prev[m]

    def log_posterior(self, noisy: str, name: str) -> float:
        lik = self.likelihood(noisy, name)
        return self.log_prior(name) + (math.log(lik) if lik > 0.0 else -math.inf)

    def candidates(self, noisy: str, beam: int) -> list:
        """The ``beam`` highest-priority lexicon entries.

        Priority tiers: (0) length within +/-2 and first glyph in the bucket
        set of likely true first glyphs, (1) length within +/-2, (2) the rest.
        Within a tier: lexicon frequency, then name.
        """
        if beam >= len(self._order):
            return list(self._order)
        m = len(noisy)
        firsts = set()
        if m:
            firsts.add(noisy[0])
            for src in self._likely_sources[:3, GLYPH_INDEX[noisy[0]]]:
                firsts.add(GLYPHS[src])
        if m > 1:
            firsts.add(noisy[1])
        chosen, seen = [], set()
        for first in sorted(firsts):
            for nm in self._by_first.get(first, ()):
                if abs(len(nm) - m) <= 2:
                    chosen.append(nm)
        chosen.sort(key=lambda nm: (-self.lexicon[nm], nm))
        chosen = chosen[:beam]
        seen.update(chosen)
        if len(chosen) < beam:
            for nm in self._order:
                if nm not in seen and abs(len(nm) - m) <= 2:
                    chosen.append(nm)
                    seen.add(nm)
                    if len(chosen) == beam:
                        break
        if len(chosen) < beam:
            for nm in self._order:
                if nm not in seen:
                    chosen.append(nm)
                    if len(chosen) == beam:
                        break
        return chosen


def fit_corrector(parallel_pairs, lexicon) -> NameCorrector:
    """Add-one-smoothed channel estimate from (noisy, true) pairs.

    Identical pairs are aligned once and weighted by multiplicity.
    """
    pairs = Counter((str(n), str(t)) for n, t in parallel_pairs)
    if not pairs:
        raise ParameterError("need at least one (noisy, true) pair")
    lexicon = dict(lexicon)
    if not lexicon:
        raise ParameterError("lexicon must be non-empty")
    sub = np.zeros((N_GLYPHS, N_GLYPHS))
    ins_glyph = np.zeros(N_GLYPHS)
    n_del = n_ins = n_true = 0
    for (noisy, true), w in pairs.items():
        n_true += w * len(true)
        for op, t, n in align(noisy, true):
            if op == "sub":
                sub[GLYPH_INDEX[t], GLYPH_INDEX[n]] += w
            elif op == "del":
                n_del += w
            else:
                n_ins += w
                ins_glyph[GLYPH_INDEX[n]] += w
    confusion = (sub + 1.0) / (sub.sum(axis=1, keepdims=True) + N_GLYPHS)
    return NameCorrector(
        lexicon=lexicon,
        confusion=confusion,
        p_delete=(n_del + 1.0) / (n_true + 2.0),
        p_insert=(n_ins + 1.0) / (n_true + 2.0),
        insert_probs=(ins_glyph + 1.0) / (ins_glyph.sum() + N_GLYPHS),
    )


def correct_name(noisy: str, corr: NameCorrector, beam: int = 256) -> Correction:
    """MAP lexicon entry for ``noisy`` among the ``beam`` candidates scored.

    Ties on log-posterior go to the lexicographically smaller name. The
    returned posterior is normalised over the scored candidates.
    """
    if beam < 1:
        raise ParameterError("beam must be >= 1")
    if not corr.lexicon:
        raise StateError("corrector has an empty lexicon")
    best_name, best = None, -math.inf
    scores = []
    for nm in corr.candidates(noisy, beam):
        s = corr.log_posterior(noisy, nm)
        scores.append(s)
        if best_name is None or s > best or (s == best and nm < best_name):
            best_name, best = nm, s
    if best == -math.inf:
        return Correction(best_name, 0.0, best)
    z = sum(math.exp(s - best) for s in scores if s > -math.inf)
    return Correction(best_name, 1.0 / z, best)


def outline_features(pixels: np.ndarray) -> np.ndarray:
    """Batched outline descriptor for an (N, 32, 128) float stack -> (N, 64)."""
    px = np.asarray(pixels, dtype=np.float64)
    gx = ndimage.sobel(px, axis=2, mode="nearest")
    gy = ndimage.sobel(px, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    n = px.shape[0]
    grid = mag.reshape(n, 8, px.shape[1] // 8, 8, px.shape[2] // 8).mean(axis=(2, 4)).reshape(n, 64)
    norms = np.linalg.norm(grid, axis=1, keepdims=True)
    return np.divide(grid, norms, out=np.zeros_like(grid), where=norms > 0)


def outline_feature(img: SignboardImage) -> np.ndarray:
    """8x8 block means of Sobel gradient magnitude, L2-normalised (zeros if flat)."""
    return outline_features(img.pixels[None])[0]


def outline_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two outline vectors; 0.0 when either is the zero vector."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def save_channel(ch: OcrChannel, path) -> None:
    recs = [{"type": "channel", "p_delete": ch.p_delete, "p_insert": ch.p_insert, "seed": ch.seed}]
    recs += [{"type": "confusion_row", "glyph": GLYPHS[g], "probs": ch.confusion[g].tolist()}
             for g in range(N_GLYPHS)]
    write_container(path, OCR_FORMAT, OCR_VERSION, recs, kind="channel")


def load_channel(path) -> OcrChannel:
    header, records = read_container(path, OCR_FORMAT, OCR_VERSION)
    if header.get("kind") != "channel":
        raise ParameterError(f"{path} does not hold an OCR channel")
    meta, rows = None, {}
    for rec in records:
        if rec["type"] == "channel":
            meta = rec
        elif rec["type"] == "confusion_row":
            rows[GLYPH_INDEX[rec["glyph"]]] = rec["probs"]
    conf = np.array([rows[g] for g in range(N_GLYPHS)])
    return OcrChannel(conf, meta["p_delete"], meta["p_insert"], meta["seed"])


def save_corrector(corr: NameCorrector, path) -> None:
    recs = [{"type": "corrector", "p_delete": corr.p_delete, "p_insert": corr.p_insert,
             "insert_probs": corr.insert_probs.tolist()}]
    recs += [{"type": "estimate_row", "glyph": GLYPHS[g], "probs": corr.confusion[g].tolist()}
             for g in range(N_GLYPHS)]
    recs += [{"type": "lexicon", "name": nm, "count": c} for nm, c in sorted(corr.lexicon.items())]
    write_container(path, OCR_FORMAT, OCR_VERSION, recs, kind="corrector")


def load_corrector(path) -> NameCorrector:
    header, records = read_container(path, OCR_FORMAT, OCR_VERSION)
    if header.get("kind") != "corrector":
        raise ParameterError(f"{path} does not hold a name corrector")
    meta, rows, lex = None, {}, {}
    for rec in records:
        kind = rec["type"]
        if kind == "corrector":
            meta = rec
        elif kind == "estimate_row":
            rows[GLYPH_INDEX[rec["glyph"]]] = rec["probs"]
        elif kind == "lexicon":
            lex[rec["name"]] = rec["count"]
    conf = np.array([rows[g] for g in range(N_GLYPHS)])
    return NameCorrector(lex, conf, meta["p_delete"], meta["p_insert"], meta["insert_probs"])

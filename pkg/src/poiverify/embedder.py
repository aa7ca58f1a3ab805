"""Deep multimodal embedding with hand-written forward and backward passes.

Image branch: two stride-2 3x3 conv+ReLU stages (8 and 16 channels), adaptive
column pooling to ``l`` positions, linear map to ``d``  ->  G' (l x d).
Geo branch: geohash of length ``l``; character k at position j selects
``geo_table[k, j]``  ->  I' (l x d).
Fusion: A = G'W, B = I'U,
    I = softmax(A B^T / sqrt(d)) B,    G = softmax(B A^T / sqrt(d)) A,
then m = normalize(mean_rows(I) ++ mean_rows(G)).

Feature matrices keep positions on rows, so the projections are applied as
right-multiplications (G'W rather than W^T G').
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbeddingError, FormatError, ParameterError
from .geoindex import BASE32_INDEX, cell_code, cell_indices
from .model import SIGN_HEIGHT, SIGN_WIDTH, GeoPoint, SignboardImage

log = logging.getLogger(__name__)

CONV1_CHANNELS = 8
CONV2_CHANNELS = 16
POOL_ROWS = SIGN_HEIGHT // 4
POOL_COLS = SIGN_WIDTH // 4
POOLED_FEATURES = POOL_ROWS * CONV2_CHANNELS

TENSOR_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj_w", "proj_b", "geo_table", "W", "U")


@dataclass
class EmbedderParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    geo_table: np.ndarray
    W: np.ndarray
    U: np.ndarray
    l: int
    d: int
    gamma: float = 0.5
    lr: float = 0.5

    def __post_init__(self):
        if not 1 <= self.l <= 12:
            raise ParameterError("sequence length l must be in 1..12 (geohash precision)")
        if self.d < 1:
            raise ParameterError("model dim d must be >= 1")
        expected = self.shapes(self.l, self.d)
        for name in TENSOR_ORDER:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise ParameterError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @staticmethod
    def shapes(l: int, d: int) -> dict:
        return {
            "conv1_w": (CONV1_CHANNELS, 1, 3, 3),
            "conv1_b": (CONV1_CHANNELS,),
            "conv2_w": (CONV2_CHANNELS, CONV1_CHANNELS, 3, 3),
            "conv2_b": (CONV2_CHANNELS,),
            "proj_w": (POOLED_FEATURES, d),
            "proj_b": (d,),
            "geo_table": (32, l, d),
            "W": (d, d),
            "U": (d, d),
        }

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def replace(self, **tensors) -> EmbedderParams:
        kw = {**self.tensors(), "l": self.l, "d": self.d, "gamma": self.gamma, "lr": self.lr}
        kw.update(tensors)
        return EmbedderParams(**kw)

    def copy(self) -> EmbedderParams:
        return self.replace(**{k: v.copy() for k, v in self.tensors().items()})

    def snapped(self) -> EmbedderParams:
        """Round every tensor to float32 precision so the on-disk form is lossless."""
        return self.replace(**{k: v.astype(np.float32).astype(np.float64) for k, v in self.tensors().items()})

    @property
    def embedding_dim(self) -> int:
        return 2 * self.d


def init_params(l: int = 8, d: int = 32, gamma: float = 0.5, lr: float = 0.5, seed: int = 0) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    shapes = EmbedderParams.shapes(l, d)
    b_geo = 1.0 / math.sqrt(d)

    def he(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = EmbedderParams(
        conv1_w=he(shapes["conv1_w"], 9),
        conv1_b=np.zeros(shapes["conv1_b"]),
        conv2_w=he(shapes["conv2_w"], 9 * CONV1_CHANNELS),
        conv2_b=np.zeros(shapes["conv2_b"]),
        proj_w=rng.uniform(-1.0, 1.0, size=shapes["proj_w"]) / math.sqrt(POOLED_FEATURES),
        proj_b=np.zeros(shapes["proj_b"]),
        geo_table=rng.uniform(-b_geo, b_geo, size=shapes["geo_table"]),
        W=rng.uniform(-b_geo, b_geo, size=shapes["W"]),
        U=rng.uniform(-b_geo, b_geo, size=shapes["U"]),
        l=l,
        d=d,
        gamma=gamma,
        lr=lr,
    )
    return params.snapped()


# ---------------------------------------------------------------- conv layers

def _im2col(x: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N,H/2,W/2,9C) patches of a 3x3 stride-2 pad-1 conv."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, ho, wo, 9, c))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx, :] = xp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2, :]
    return cols.reshape(n, ho, wo, 9 * c)


def _col2im(dcols: np.ndarray, in_shape) -> np.ndarray:
    n, h, w, c = in_shape
    ho, wo = h // 2, w // 2
    dcols = dcols.reshape(n, ho, wo, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2, :] += dcols[:, :, :, 3 * ky + kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(O,C,3,3) -> (9C, O) matching the patch layout of ``_im2col``."""
    o, c = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * c, o)


def _kernel_grad(dmat: np.ndarray, shape) -> np.ndarray:
    o, c = shape[:2]
    return dmat.reshape(3, 3, c, o).transpose(3, 2, 0, 1)


def pool_matrix(l: int, width: int = POOL_COLS) -> np.ndarray:
    """(l, width) averaging weights for adaptive column pooling."""
    P = np.zeros((l, width))
    for j in range(l):
        start = (j * width) // l
        end = -(-((j + 1) * width) // l)
        P[j, start:end] = 1.0 / (end - start)
    return P


# ---------------------------------------------------------------- forward

def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch_pixels(images) -> np.ndarray:
    if isinstance(images, SignboardImage):
        return images.pixels[None]
    if isinstance(images, np.ndarray):
        px = images.astype(np.float64, copy=False)
        return px[None] if px.ndim == 2 else px
    return np.stack([img.pixels for img in images])


def image_features_batch(pixels: np.ndarray, params: EmbedderParams, keep_cache: bool = False):
    """(N,32,128) intensities -> G' of shape (N,l,d)."""
    x0 = pixels[..., None]
    cols1 = _im2col(x0)
    z1 = cols1 @ _kernel_matrix(params.conv1_w) + params.conv1_b
    h1 = np.maximum(z1, 0.0)
    cols2 = _im2col(h1)
    z2 = cols2 @ _kernel_matrix(params.conv2_w) + params.conv2_b
    h2 = np.maximum(z2, 0.0)  # (N, 8, 32, 16)
    pool = pool_matrix(params.l)
    pooled = np.einsum("jc,nrcf->njrf", pool, h2).reshape(len(pixels), params.l, POOLED_FEATURES)
    g_prime = pooled @ params.proj_w + params.proj_b
    if not keep_cache:
        return g_prime
    cache = {"x0_shape": x0.shape, "cols1": cols1, "z1": z1, "h1_shape": h1.shape, "cols2": cols2,
             "z2": z2, "pool": pool, "pooled": pooled}
    return g_prime, cache


def image_features(img: SignboardImage, params: EmbedderParams) -> np.ndarray:
    return image_features_batch(_as_batch_pixels(img), params)[0]


def geo_codes(lons, lats, l: int) -> np.ndarray:
    """(N, l) base-32 digit values of each point's length-l geohash."""
    ix, iy = cell_indices(lons, lats, l)
    out = np.empty((len(ix), l), dtype=np.int64)
    for k, (a, b) in enumerate(zip(ix.tolist(), iy.tolist())):
        out[k] = [BASE32_INDEX[ch] for ch in cell_code(a, b, l)]
    return out


def geo_features_from_codes(codes: np.ndarray, params: EmbedderParams) -> np.ndarray:
    return params.geo_table[codes, np.arange(params.l)]


def geo_features(p: GeoPoint, params: EmbedderParams) -> np.ndarray:
    return geo_features_from_codes(geo_codes([p.lon], [p.lat], params.l), params)[0]


def cross_attention_fuse(g_prime: np.ndarray, i_prime: np.ndarray, params: EmbedderParams, keep_cache=False):
    """Bidirectional cross-attention; works on (l,d) or batched (N,l,d) inputs."""
    if g_prime.shape != i_prime.shape or g_prime.shape[-1] != params.d:
        raise ParameterError(f"shape mismatch: {g_prime.shape} vs {i_prime.shape} (d={params.d})")
    scale = 1.0 / math.sqrt(params.d)
    A = g_prime @ params.W
    B = i_prime @ params.U
    BT = np.swapaxes(B, -1, -2)
    AT = np.swapaxes(A, -1, -2)
    P1 = _softmax_rows((A @ BT) * scale)
    P2 = _softmax_rows((B @ AT) * scale)
    I = P1 @ B
    G = P2 @ A
    if keep_cache:
        return I, G, {"A": A, "B": B, "P1": P1, "P2": P2}
    return I, G


def _normalize(v: np.ndarray):
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("pre-normalisation embedding is all zeros")
    return v / norms, norms


def forward(pixels: np.ndarray, codes: np.ndarray, params: EmbedderParams):
    """Batched embedding with everything the backward pass needs."""
    g_prime, img_cache = image_features_batch(pixels, params, keep_cache=True)
    i_prime = geo_features_from_codes(codes, params)
    I, G, att = cross_attention_fuse(g_prime, i_prime, params, keep_cache=True)
    v = np.concatenate([I.mean(axis=1), G.mean(axis=1)], axis=1)
    m, norms = _normalize(v)
    cache = {"img": img_cache, "att": att, "g_prime": g_prime, "i_prime": i_prime,
             "codes": codes, "m": m, "norms": norms}
    return m, cache


def embed_batch(pixels: np.ndarray, codes: np.ndarray, params: EmbedderParams, chunk: int = 256) -> np.ndarray:
    out = np.empty((len(pixels), params.embedding_dim))
    for s in range(0, len(pixels), chunk):
        g_prime = image_features_batch(pixels[s:s + chunk], params)
        i_prime = geo_features_from_codes(codes[s:s + chunk], params)
        I, G = cross_attention_fuse(g_prime, i_prime, params)
        out[s:s + chunk] = _normalize(np.concatenate([I.mean(axis=1), G.mean(axis=1)], axis=1))[0]
    return out


def embed(img: SignboardImage, p: GeoPoint, params: EmbedderParams) -> np.ndarray:
    """Unit-norm embedding of one (signboard, location) pair, length 2d."""
    return embed_batch(_as_batch_pixels(img), geo_codes([p.lon], [p.lat], params.l), params)[0]


def embed_images(images, points, params: EmbedderParams, chunk: int = 256) -> np.ndarray:
    """Embed parallel sequences of SignboardImage / GeoPoint, in chunks."""
    images, points = list(images), list(points)
    out = np.empty((len(images), params.embedding_dim))
    for s in range(0, len(images), chunk):
        px = np.stack([img.pixels for img in images[s:s + chunk]])
        pts = points[s:s + chunk]
        codes = geo_codes([p.lon for p in pts], [p.lat for p in pts], params.l)
        out[s:s + chunk] = embed_batch(px, codes, params, chunk=chunk)
    return out


# ---------------------------------------------------------------- backward

def backward(cache: dict, dm: np.ndarray, params: EmbedderParams) -> dict:
    """Gradients of sum(dm * m) with respect to every parameter tensor."""
    d, l = params.d, params.l
    scale = 1.0 / math.sqrt(d)
    m, norms = cache["m"], cache["norms"]
    dv = (dm - m * np.sum(m * dm, axis=1, keepdims=True)) / norms
    dI = np.repeat(dv[:, None, :d] / l, l, axis=1)
    dG = np.repeat(dv[:, None, d:] / l, l, axis=1)

    att = cache["att"]
    A, B, P1, P2 = att["A"], att["B"], att["P1"], att["P2"]
    BT, AT = np.swapaxes(B, 1, 2), np.swapaxes(A, 1, 2)
    # I = P1 B,  P1 = softmax(A B^T * scale)
    dP1 = dI @ BT
    dB = np.swapaxes(P1, 1, 2) @ dI
    dS1 = P1 * (dP1 - np.sum(dP1 * P1, axis=2, keepdims=True)) * scale
    dA = dS1 @ B
    dB += np.swapaxes(dS1, 1, 2) @ A
    # G = P2 A,  P2 = softmax(B A^T * scale)
    dP2 = dG @ AT
    dA += np.swapaxes(P2, 1, 2) @ dG
    dS2 = P2 * (dP2 - np.sum(dP2 * P2, axis=2, keepdims=True)) * scale
    dB += dS2 @ A
    dA += np.swapaxes(dS2, 1, 2) @ B

    g_prime, i_prime = cache["g_prime"], cache["i_prime"]
    grads = {
        "W": np.einsum("nld,nle->de", g_prime, dA),
        "U": np.einsum("nld,nle->de", i_prime, dB),
    }
    dg_prime = dA @ params.W.T
    di_prime = dB @ params.U.T
    dtable = np.zeros_like(params.geo_table)
    np.add.at(dtable, (cache["codes"], np.broadcast_to(np.arange(l), cache["codes"].shape)), di_prime)
    grads["geo_table"] = dtable

    ic = cache["img"]
    pooled = ic["pooled"]
    grads["proj_w"] = np.einsum("nlf,nld->fd", pooled, dg_prime)
    grads["proj_b"] = dg_prime.sum(axis=(0, 1))
    dpooled = (dg_prime @ params.proj_w.T).reshape(len(m), l, POOL_ROWS, CONV2_CHANNELS)
    dh2 = np.einsum("jc,njrf->nrcf", ic["pool"], dpooled)
    dz2 = dh2 * (ic["z2"] > 0)
    dz2_flat = dz2.reshape(-1, CONV2_CHANNELS)
    grads["conv2_w"] = _kernel_grad(ic["cols2"].reshape(-1, ic["cols2"].shape[-1]).T @ dz2_flat,
                                    params.conv2_w.shape)
    grads["conv2_b"] = dz2_flat.sum(axis=0)
    dh1 = _col2im(dz2 @ _kernel_matrix(params.conv2_w).T, ic["h1_shape"])
    dz1 = dh1 * (ic["z1"] > 0)
    dz1_flat = dz1.reshape(-1, CONV1_CHANNELS)
    grads["conv1_w"] = _kernel_grad(ic["cols1"].reshape(-1, 9).T @ dz1_flat, params.conv1_w.shape)
    grads["conv1_b"] = dz1_flat.sum(axis=0)
    return grads


def relu_pattern(pixels: np.ndarray, params: EmbedderParams) -> bytes:
    """Packed ReLU activation pattern; FD checks use it to detect kink crossings."""
    _, cache = image_features_batch(pixels, params, keep_cache=True)
    return np.packbits(cache["z1"] > 0).tobytes() + np.packbits(cache["z2"] > 0).tobytes()


# ---------------------------------------------------------------- triplet loss

def _cos_and_grads(x: np.ndarray, y: np.ndarray):
    nx, ny = np.linalg.norm(x, axis=-1, keepdims=True), np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise DegenerateEmbeddingError("cosine of a zero vector")
    c = np.sum(x * y, axis=-1, keepdims=True) / (nx * ny)
    gx = y / (nx * ny) - c * x / nx**2
    gy = x / (nx * ny) - c * y / ny**2
    return c[..., 0], gx, gy


def triplet_loss(m, m_pos, m_neg, gamma: float) -> float:
    """max(0, gamma - cos(m, m+) + cos(m, m-))."""
    if not gamma > 0:
        raise ParameterError("margin gamma must be positive")
    loss, _ = triplet_loss_and_grads(np.atleast_2d(m), np.atleast_2d(m_pos), np.atleast_2d(m_neg), gamma)
    return float(loss[0])


def triplet_loss_and_grads(m, m_pos, m_neg, gamma: float):
    """Per-row losses and (d/dm, d/dm+, d/dm-) subgradients of each row's loss."""
    c_pos, ga_pos, gp = _cos_and_grads(m, m_pos)
    c_neg, ga_neg, gn = _cos_and_grads(m, m_neg)
    gap = c_pos - c_neg
    # zero exactly when gap >= gamma; otherwise gamma - gap > 0 in floating point
    loss = np.where(gap >= gamma, 0.0, gamma - gap)
    active = (gap < gamma)[:, None].astype(np.float64)
    return loss, (active * (ga_neg - ga_pos), active * -gp, active * gn)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: EmbedderParams
    loss_trace: list = field(default_factory=list)
    skipped_pois: int = 0
    n_triplets: int = 0


def sample_triplets(groups: list, rng: np.random.Generator, per_anchor: int = 1) -> np.ndarray:
    """``per_anchor`` (anchor, positive, negative) row-index triples per submission.

    ``groups`` holds, per POI, the row indices of its submissions (>= 2 each).
    """
    triples = []
    n_groups = len(groups)
    for gi, rows in enumerate(groups):
        for a in [r for r in rows for _ in range(per_anchor)]:
            others = [r for r in rows if r != a]
            p = others[int(rng.integers(len(others)))]
            ng = int(rng.integers(n_groups - 1))
            ng += ng >= gi
            neg_rows = groups[ng]
            n = neg_rows[int(rng.integers(len(neg_rows)))]
            triples.append((a, p, n))
    return np.array(triples, dtype=np.int64).reshape(-1, 3)


def lr_at(base_lr: float, epoch: int, decay_every: int = 5, decay: float = 0.5) -> float:
    return base_lr * decay ** (epoch // decay_every)


def train(submissions, params: EmbedderParams, epochs: int = 20, batch: int = 64, seed: int = 0,
          triplets_per_anchor: int = 2, decay_every: int = 5, decay: float = 0.5,
          progress=None) -> TrainResult:
    """Mini-batch gradient descent on the mean triplet loss.

    ``submissions`` are the training-split StreetViewSubmission records. The
    triplet set is drawn once from ``seed``; every epoch visits it in a fresh
    order, and the recorded loss is that epoch's mean pre-update batch loss.
    """
    if epochs < 1 or batch < 1 or triplets_per_anchor < 1:
        raise ParameterError("epochs, batch and triplets_per_anchor must be >= 1")
    subs = list(submissions)
    by_poi = {}
    for k, s in enumerate(subs):
        by_poi.setdefault(s.truth_id, []).append(k)
    groups = [rows for _, rows in sorted(by_poi.items()) if len(rows) >= 2]
    skipped = len(by_poi) - len(groups)
    if skipped:
        log.warning("skipping %d POIs with fewer than two training views", skipped)
    if len(groups) < 2:
        raise ParameterError("training needs at least two POIs with two or more views")

    pixels = np.stack([s.signboard.pixels for s in subs])
    codes = geo_codes([s.shot_location.lon for s in subs], [s.shot_location.lat for s in subs], params.l)
    rng = np.random.default_rng(seed)
    triples = sample_triplets(groups, rng, triplets_per_anchor)
    params = params.copy()
    trace = []
    for epoch in range(epochs):
        lr = lr_at(params.lr, epoch, decay_every, decay)
        order = rng.permutation(len(triples))
        losses = np.empty(len(triples))
        for s in range(0, len(order), batch):
            sel = order[s:s + batch]
            b = len(sel)
            rows = triples[sel].T.reshape(-1)  # anchors, positives, negatives
            m, cache = forward(pixels[rows], codes[rows], params)
            loss, (ga, gp, gn) = triplet_loss_and_grads(m[:b], m[b:2 * b], m[2 * b:], params.gamma)
            losses[sel] = loss
            if lr == 0.0 or not np.any(loss > 0):
                continue
            dm = np.concatenate([ga, gp, gn]) / b
            grads = backward(cache, dm, params)
            for name, g in grads.items():
                setattr(params, name, getattr(params, name) - lr * g)
        trace.append(float(losses.mean()))
        if progress is not None:
            progress(epoch, trace[-1])
    return TrainResult(params=params.snapped(), loss_trace=trace, skipped_pois=skipped, n_triplets=len(triples))


# ---------------------------------------------------------------- persistence

PARAMS_MAGIC = b"PVEMBED\0"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<8sIIIdd")


def save_params(params: EmbedderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, params.l, params.d, params.gamma, params.lr))
        for name in TENSOR_ORDER:
            fh.write(getattr(params, name).astype("<f4").tobytes())


def load_params(path) -> EmbedderParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("parameter blob is truncated")
    magic, version, l, d, gamma, lr = _HEADER.unpack_from(raw)
    if magic != PARAMS_MAGIC:
        raise FormatError("not an embedder parameter blob")
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported parameter blob version {version} (expected {PARAMS_VERSION})")
    shapes = EmbedderParams.shapes(l, d)
    off = _HEADER.size
    tensors = {}
    for name in TENSOR_ORDER:
        count = int(np.prod(shapes[name]))
        if off + 4 * count > len(raw):
            raise FormatError("parameter blob is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        tensors[name] = arr.reshape(shapes[name])
        off += 4 * count
    if off != len(raw):
        raise FormatError("trailing bytes in parameter blob")
    return EmbedderParams(**tensors, l=l, d=d, gamma=gamma, lr=lr)

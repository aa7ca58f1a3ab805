"""Reference implementations the tests compare against."""

import numpy as np

from poiverify.embedder import TENSOR_ORDER, backward, forward, relu_pattern


def fd_check_block(params, pixels, codes, dm, name, rng, n_coords=6, h=1e-5):
    """Central differences of sum(dm * m) on sampled coordinates of one tensor.

    Returns (max relative error, coordinates checked). Coordinates where the
    ReLU activation pattern differs between the +h and -h evaluations sit on
    a kink where the derivative is undefined; those are skipped.
    """
    _, cache = forward(pixels, codes, params)
    grad = backward(cache, dm, params)[name]
    tensor = getattr(params, name)
    flat = tensor.reshape(-1)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst, checked = 0.0, 0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        f_plus = float(np.sum(dm * forward(pixels, codes, params)[0]))
        pat_plus = relu_pattern(pixels, params)
        flat[c] = orig - h
        f_minus = float(np.sum(dm * forward(pixels, codes, params)[0]))
        pat_minus = relu_pattern(pixels, params)
        flat[c] = orig
        if pat_plus != pat_minus:
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grad.reshape(-1)[c]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
        checked += 1
    return worst, checked


def fd_check_all(params, pixels, codes, rng, n_coords=6):
    """Max relative error per parameter block for a random upstream gradient."""
    dm = rng.normal(size=(len(pixels), params.embedding_dim))
    out = {}
    for name in TENSOR_ORDER:
        out[name] = fd_check_block(params, pixels, codes, dm, name, rng, n_coords)
    return out


def exact_nn_sr1(query_vecs, query_truth, db_ids, db_vecs):
    """SR@1 by exhaustive inner-product search."""
    best = np.argmax(query_vecs @ db_vecs.T, axis=1)
    return float(np.mean(np.asarray(db_ids)[best] == np.asarray(query_truth)))

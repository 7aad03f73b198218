"""Central finite-difference checks for the backward passes in ``nnkernel``."""
from __future__ import annotations

import numpy as np

from . import nnkernel as nk


def numeric_grad(f, x, step=1e-3):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def check_conv(rng, h=5, w=5, cin=1, cout=2, k=3, padding="valid", step=1e-3):
    spec = nk.LayerSpec.conv(k, k, cin, cout, padding)
    x = rng.standard_normal((1, h, w, cin))
    wt = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(cout)
    r = rng.standard_normal(spec.output_shape((h, w, cin)))[None]

    def loss():
        return float(np.sum(nk.conv2d_forward(x, spec, wt, b) * r))

    gx, gw, gb = nk.conv2d_backward(x, spec, wt, r)
    return max(
        rel_error(gx, numeric_grad(loss, x, step)),
        rel_error(gw, numeric_grad(loss, wt, step)),
        rel_error(gb, numeric_grad(loss, b, step)),
    )


def check_relu(rng, n=20, step=1e-3):
    # keep samples at least 10 steps away from the kink
    x = rng.standard_normal(n)
    x = np.where(np.abs(x) < 10 * step, np.sign(x + 1e-300) * 10 * step + x, x)
    r = rng.standard_normal(n)

    def loss():
        return float(np.sum(nk.relu_forward(x) * r))

    return rel_error(nk.relu_backward(x, r), numeric_grad(loss, x, step))


def check_maxpool(rng, h=5, w=5, c=2, window=2, stride=1, step=1e-3):
    # distinct values spaced well beyond the step keep argmaxes stable
    vals = rng.permutation(h * w * c).astype(np.float64) * 0.1
    x = vals.reshape(1, h, w, c)
    y, amap = nk.maxpool_forward(x, window, stride)
    r = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(nk.maxpool_forward(x, window, stride)[0] * r))

    return rel_error(nk.maxpool_backward(amap, r), numeric_grad(loss, x, step))


def check_dense(rng, n_in=6, n_out=4, batch=3, step=1e-3):
    x = rng.standard_normal((batch, n_in))
    wt = rng.standard_normal((n_in, n_out))
    b = rng.standard_normal(n_out)
    r = rng.standard_normal((batch, n_out))

    def loss():
        return float(np.sum(nk.dense_forward(x, wt, b) * r))

    gx, gw, gb = nk.dense_backward(x, wt, r)
    return max(
        rel_error(gx, numeric_grad(loss, x, step)),
        rel_error(gw, numeric_grad(loss, wt, step)),
        rel_error(gb, numeric_grad(loss, b, step)),
    )


def check_tansig(rng, n=20, step=1e-3):
    x = rng.standard_normal(n) * 2
    r = rng.standard_normal(n)

    def loss():
        return float(np.sum(nk.tansig(x) * r))

    return rel_error(nk.tansig_backward(nk.tansig(x), r), numeric_grad(loss, x, step))


def check_softmax_xent(rng, k=4, batch=3, step=1e-3):
    s = rng.standard_normal((batch, k)) * 2
    labels = rng.integers(1, k + 1, size=batch)

    def loss():
        return float(np.sum(nk.cross_entropy(nk.softmax(s), labels)))

    return rel_error(nk.cross_entropy_grad(nk.softmax(s), labels), numeric_grad(loss, s, step))


CHECKS = {
    "conv": check_conv,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "dense": check_dense,
    "tansig": check_tansig,
    "softmax_xent": check_softmax_xent,
}

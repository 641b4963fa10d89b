"""Central finite-difference verification of reverse-mode gradients.

Every primitive and every composite loss is checked by comparing the tape
gradient of a scalar probe against (f(x+eps) - f(x-eps)) / (2 eps) at
64-bit precision. Inputs are drawn away from documented kinks (abs/relu
at 0, clamp edges, trilinear cell boundaries) so the two-sided difference
estimates a true derivative.
"""

from __future__ import annotations

import time

import numpy as np

from . import diffcore as dc


def numeric_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar f at array x, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def relative_error(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|) over the two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / scale))


def check_gradient(build, arrays, eps=1e-5):
    """Compare tape gradients of ``build(tensors) -> scalar Tensor`` with FD.

    ``arrays`` maps names to float64 numpy arrays; every entry is treated
    as a differentiable leaf. Returns the max relative error across leaves.
    """
    tensors = {k: dc.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
               for k, v in arrays.items()}
    loss = build(tensors)
    grads = dc.gradients(loss, tensors)
    worst = 0.0
    for k, base in arrays.items():
        base = np.asarray(base, dtype=np.float64)

        def probe(x, _k=k):
            trial = {n: (x if n == _k else np.asarray(a, dtype=np.float64))
                     for n, a in arrays.items()}
            ts = {n: dc.Tensor(a, requires_grad=False) for n, a in trial.items()}
            return float(build(ts).data)

        worst = max(worst, relative_error(grads[k], numeric_gradient(probe, base, eps)))
    return worst


def _away_from_zero(rng, shape, margin=1e-2):
    """Uniform values in [-1, 1] with |x| >= margin (keeps kinks out of reach)."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _interior_points(rng, m, res, origin, h):
    """Points whose fractional cell offsets stay in [0.15, 0.85] on every axis."""
    cells = rng.integers(0, np.asarray(res) - 1, size=(m, 3))
    frac = rng.uniform(0.15, 0.85, size=(m, 3))
    return origin + (cells + frac) * h


# ---------------------------------------------------------------------------
# Per-primitive check builders. Each returns (name, callable(seed) -> error).
# ---------------------------------------------------------------------------

def _check_elementwise(op, rng, margin=0.0):
    shape = tuple(rng.integers(2, 5, size=rng.integers(1, 4)))
    x = rng.standard_normal(shape)
    if margin:
        x = np.where(np.abs(x) < margin, np.sign(x) * (margin + np.abs(x)), x)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum(op(t["x"]) * dc.constant(w)), {"x": x})


def check_add(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum((t["a"] + t["b"]) * dc.constant(w)), {"a": a, "b": b})


def check_sub(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum((t["a"] - t["b"]) * dc.constant(w)), {"a": a, "b": b})


def check_mul(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum(t["a"] * t["b"] * dc.constant(w)), {"a": a, "b": b})


def check_square(seed):
    return _check_elementwise(dc.square, np.random.default_rng(seed))


def check_abs(seed):
    return _check_elementwise(dc.absval, np.random.default_rng(seed), margin=1e-2)


def check_max0(seed):
    return _check_elementwise(dc.max0, np.random.default_rng(seed), margin=1e-2)


def check_relu(seed):
    return _check_elementwise(dc.relu, np.random.default_rng(seed), margin=1e-2)


def check_leaky_relu(seed):
    rng = np.random.default_rng(seed)
    slope = float(rng.uniform(0.005, 0.2))
    return _check_elementwise(lambda x: dc.leaky_relu(x, slope), rng, margin=1e-2)


def check_sigmoid(seed):
    return _check_elementwise(dc.sigmoid, np.random.default_rng(seed))


def check_exp(seed):
    return _check_elementwise(dc.exp, np.random.default_rng(seed))


def check_softplus(seed):
    return _check_elementwise(dc.softplus, np.random.default_rng(seed))


def check_sqrt(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    x = rng.uniform(0.2, 3.0, size=shape)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum(dc.sqrt(t["x"]) * dc.constant(w)), {"x": x})


def check_sin(seed):
    return _check_elementwise(dc.sin, np.random.default_rng(seed))


def check_cos(seed):
    return _check_elementwise(dc.cos, np.random.default_rng(seed))


def check_clamp(seed):
    rng = np.random.default_rng(seed)
    shape = (rng.integers(3, 7),)
    x = rng.uniform(-2.0, 2.0, size=shape)
    # Keep samples clear of the clamp edges at +/- 0.5.
    x = np.where(np.abs(np.abs(x) - 0.5) < 5e-2, x + 0.1, x)
    w = rng.standard_normal(shape)
    return check_gradient(
        lambda t: dc.reduce_sum(dc.clamp(t["x"], -0.5, 0.5) * dc.constant(w)), {"x": x})


def check_reduce_sum(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=3))
    x = rng.standard_normal(shape)
    axis = int(rng.integers(0, 3))
    wshape = list(shape)
    wshape.pop(axis)
    w = rng.standard_normal(tuple(wshape))
    return check_gradient(
        lambda t: dc.reduce_sum(dc.reduce_sum(t["x"], axis=axis) * dc.constant(w)), {"x": x})


def check_matmul(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(2, 5, size=3)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    w = rng.standard_normal((m, n))
    return check_gradient(
        lambda t: dc.reduce_sum((t["a"] @ t["b"]) * dc.constant(w)), {"a": a, "b": b})


def check_linear(seed):
    rng = np.random.default_rng(seed)
    b, fi, fo = rng.integers(2, 6, size=3)
    x = rng.standard_normal((b, fi))
    wgt = rng.standard_normal((fo, fi))
    bias = rng.standard_normal(fo)
    w = rng.standard_normal((b, fo))
    return check_gradient(
        lambda t: dc.reduce_sum(dc.linear(t["x"], t["w"], t["b"]) * dc.constant(w)),
        {"x": x, "w": wgt, "b": bias})


def check_softmax_rows(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 6, size=2)
    x = rng.standard_normal((n, m))
    w = rng.standard_normal((n, m))
    return check_gradient(
        lambda t: dc.reduce_sum(dc.softmax_rows(t["x"]) * dc.constant(w)), {"x": x})


def check_conv3d(seed):
    rng = np.random.default_rng(seed)
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    d = int(rng.integers(4, 6))
    x = rng.standard_normal((1, ci, d, d, d))
    kern = rng.standard_normal((co, ci, 3, 3, 3)) * 0.5
    bias = rng.standard_normal(co)

    def build(t):
        y = dc.conv3d(t["x"], t["k"], t["b"], stride=stride, padding=pad)
        return dc.reduce_sum(dc.square(y))

    return check_gradient(build, {"x": x, "k": kern, "b": bias})


def check_batchnorm3d(seed):
    rng = np.random.default_rng(seed)
    b, c, d = 2, int(rng.integers(1, 4)), 3
    x = rng.standard_normal((b, c, d, d, d))
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.standard_normal(c)
    w = rng.standard_normal((b, c, d, d, d))

    def build(t):
        rm = np.zeros(c)
        rv = np.ones(c)
        y = dc.batchnorm3d(t["x"], t["g"], t["be"], rm, rv, training=True)
        return dc.reduce_sum(y * dc.constant(w))

    return check_gradient(build, {"x": x, "g": gamma, "be": beta})


def check_trilinear_gather(seed):
    rng = np.random.default_rng(seed)
    res = (int(rng.integers(3, 7)),) * 3
    h = 1.0 / (res[0] - 1)
    vals = rng.standard_normal(res)
    pts = _interior_points(rng, int(rng.integers(2, 6)), res, np.zeros(3), h)
    w = rng.standard_normal(pts.shape[0])

    def build(t):
        s = dc.trilinear_gather(t["v"], t["p"], np.zeros(3), h)
        return dc.reduce_sum(s * dc.constant(w))

    return check_gradient(build, {"v": vals, "p": pts})


def check_rot_coeffs(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(1e-4, 9.0, size=6)

    def build(t):
        return dc.reduce_sum(dc.rot_coeff_a(t["s"]) + dc.rot_coeff_b(t["s"]))

    return check_gradient(build, {"s": s})


PRIMITIVE_CHECKS = [
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("square", check_square),
    ("abs", check_abs),
    ("max0", check_max0),
    ("relu", check_relu),
    ("leaky_relu", check_leaky_relu),
    ("sigmoid", check_sigmoid),
    ("exp", check_exp),
    ("softplus", check_softplus),
    ("sqrt", check_sqrt),
    ("sin", check_sin),
    ("cos", check_cos),
    ("clamp", check_clamp),
    ("reduce_sum", check_reduce_sum),
    ("matmul", check_matmul),
    ("linear", check_linear),
    ("softmax_rows", check_softmax_rows),
    ("conv3d", check_conv3d),
    ("batchnorm3d", check_batchnorm3d),
    ("trilinear_gather", check_trilinear_gather),
    ("rot_coeffs", check_rot_coeffs),
]


def run_primitive_suite(trials=50, seed=0):
    """Run every primitive check ``trials`` times; returns {name: max rel err}."""
    prev = dc.precision()
    dc.set_precision(64)
    try:
        results = {}
        for name, fn in PRIMITIVE_CHECKS:
            worst = 0.0
            for i in range(trials):
                worst = max(worst, fn(seed * 100003 + i))
            results[name] = worst
        return results
    finally:
        dc.set_precision(prev)


def composite_checks():
    """Name -> callable(seed) for every loss composite; defined lazily to
    avoid import cycles with the loss modules."""
    from . import losses_for_gradcheck as lg
    return lg.COMPOSITE_CHECKS


def run_composite_suite(trials=50, seed=0):
    prev = dc.precision()
    dc.set_precision(64)
    try:
        results = {}
        for name, fn in composite_checks():
            worst = 0.0
            for i in range(trials):
                worst = max(worst, fn(seed * 99991 + i))
            results[name] = worst
        return results
    finally:
        dc.set_precision(prev)


def run_full_suite(trials=50, seed=0, out=print):
    """Primitive + composite checks with a printed table; returns pass flag."""
    t0 = time.time()
    prim = run_primitive_suite(trials=trials, seed=seed)
    comp = run_composite_suite(trials=trials, seed=seed)
    ok = True
    out(f"{'kind':10s} {'op':24s} {'max rel err':>12s}  {'bound':>8s}  verdict")
    for name, err in prim.items():
        good = err < 1e-4
        ok = ok and good
        out(f"{'primitive':10s} {name:24s} {err:12.3e}  {1e-4:8.0e}  {'ok' if good else 'FAIL'}")
    for name, err in comp.items():
        good = err < 1e-3
        ok = ok and good
        out(f"{'composite':10s} {name:24s} {err:12.3e}  {1e-3:8.0e}  {'ok' if good else 'FAIL'}")
    out(f"total time {time.time() - t0:.1f}s")
    return ok

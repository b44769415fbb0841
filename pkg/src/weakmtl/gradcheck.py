"""Finite-difference verification of every hand-written backward pass.

Each registered check builds a small random problem in float64, computes the
analytic gradient through the op's backward function, and compares it against
central finite differences of the forward pass. The reported number is

    max over elements of |g_a - g_n| / max(1e-8, |g_a| + |g_n|)

Inputs are resampled when they land within 1e-3 of a max-pool or leaky-ReLU
kink, where the derivative is not defined.
"""

import numpy as np

from . import losses, milpool, model, nn
from .errors import InvalidInput
from .losses import LossWeights
from .model import ArchConfig

FD_H = 1e-4
KINK_MARGIN = 1e-3
KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3
DEFAULT_SEEDS = 20


def rel_err(ga, gn):
    ga = np.asarray(ga, dtype=np.float64).reshape(-1)
    gn = np.asarray(gn, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))))


def fd_grad(f, arr, h=FD_H):
    """Central finite differences of scalar f() w.r.t. every entry of arr."""
    flat = arr.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(arr.shape)


def fd_grad_coords(f, arr, coords, h=FD_H):
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def _compare_all(f, analytic_by_array, h=FD_H):
    errs = [rel_err(ga, fd_grad(f, arr, h)) for arr, ga in analytic_by_array]
    return max(errs)


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.standard_normal(shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x


def _window_gap_ok(x, kt, kf, margin):
    b, c, t, f = x.shape
    win = x.reshape(b, c, t // kt, kt, f // kf, kf).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, t // kt, f // kf, kt * kf)
    if win.shape[-1] == 1:
        return True
    top2 = np.sort(win, axis=-1)[..., -2:]
    return bool(np.all(top2[..., 1] - top2[..., 0] > margin))


# --------------------------------------------------------------------------
# per-op checks; each takes an rng, returns the max relative error


def check_linear(rng):
    x = rng.standard_normal((2, 3))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    u = rng.standard_normal((2, 4))
    y, cache = nn.linear_forward(x, w, b)
    dx, dw, db = nn.linear_backward(u, cache)

    def f():
        return float((nn.linear_forward(x, w, b)[0] * u).sum())

    return _compare_all(f, [(x, dx), (w, dw), (b, db)])


def check_conv2d(rng):
    x = rng.standard_normal((2, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    u = rng.standard_normal((2, 3, 4, 5))
    _, cache = nn.conv2d_forward(x, w, b)
    dx, dw, db = nn.conv2d_backward(u, cache)

    def f():
        return float((nn.conv2d_forward(x, w, b)[0] * u).sum())

    return _compare_all(f, [(x, dx), (w, dw), (b, db)])


def check_batch_norm(rng):
    errs = []
    for train in (True, False):
        x = rng.standard_normal((3, 2, 4, 3))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)
        rm = rng.standard_normal(2) * 0.1
        rv = rng.uniform(0.5, 1.5, 2)
        u = rng.standard_normal(x.shape)
        _, cache = nn.batch_norm_forward(x, gamma, beta, rm, rv, train)
        dx, dgamma, dbeta = nn.batch_norm_backward(u, cache)

        def f():
            return float((nn.batch_norm_forward(x, gamma, beta, rm, rv, train)[0] * u).sum())

        errs.append(_compare_all(f, [(x, dx), (gamma, dgamma), (beta, dbeta)]))
    return max(errs)


def check_leaky_relu(rng):
    x = _away_from_zero(rng, (3, 5))
    u = rng.standard_normal(x.shape)
    _, cache = nn.leaky_relu_forward(x)
    dx = nn.leaky_relu_backward(u, cache)

    def f():
        return float((nn.leaky_relu_forward(x)[0] * u).sum())

    return _compare_all(f, [(x, dx)])


def check_max_pool2d(rng):
    kt, kf = 2, 2
    x = rng.standard_normal((2, 2, 4, 6))
    while not _window_gap_ok(x, kt, kf, KINK_MARGIN):
        x = rng.standard_normal((2, 2, 4, 6))
    u = rng.standard_normal((2, 2, 2, 3))
    _, cache = nn.max_pool2d_forward(x, kt, kf)
    dx = nn.max_pool2d_backward(u, cache)

    def f():
        return float((nn.max_pool2d_forward(x, kt, kf)[0] * u).sum())

    return _compare_all(f, [(x, dx)])


def check_global_max_pool(rng):
    def sample():
        x = rng.standard_normal((2, 3, 3, 4))
        flat = np.sort(x.reshape(2, 3, -1), axis=-1)
        return x, bool(np.all(flat[..., -1] - flat[..., -2] > KINK_MARGIN))

    x, ok = sample()
    while not ok:
        x, ok = sample()
    u = rng.standard_normal((2, 3))
    _, cache = nn.global_max_pool_forward(x)
    dx = nn.global_max_pool_backward(u, cache)

    def f():
        return float((nn.global_max_pool_forward(x)[0] * u).sum())

    return _compare_all(f, [(x, dx)])


def check_sigmoid(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    u = rng.standard_normal(x.shape)
    _, cache = nn.sigmoid_forward(x)
    dx = nn.sigmoid_backward(u, cache)

    def f():
        return float((nn.sigmoid_forward(x)[0] * u).sum())

    return _compare_all(f, [(x, dx)])


def check_softmax(rng):
    x = rng.standard_normal((3, 5))
    u = rng.standard_normal(x.shape)
    _, cache = nn.softmax_forward(x)
    dx = nn.softmax_backward(u, cache)

    def f():
        return float((nn.softmax_forward(x)[0] * u).sum())

    return _compare_all(f, [(x, dx)])


def check_gru_bidirectional(rng):
    b, t, d_in, h = 2, 3, 3, 2
    x = rng.standard_normal((b, t, d_in))
    pf = (rng.standard_normal((d_in, 3 * h)), rng.standard_normal((h, 3 * h)), rng.standard_normal(3 * h))
    pb = (rng.standard_normal((d_in, 3 * h)), rng.standard_normal((h, 3 * h)), rng.standard_normal(3 * h))
    u = rng.standard_normal((b, t, 2 * h))
    _, cache = nn.gru_bidirectional_forward(x, pf, pb)
    dx, gf, gb = nn.gru_bidirectional_backward(u, cache)

    def f():
        return float((nn.gru_bidirectional_forward(x, pf, pb)[0] * u).sum())

    pairs = [(x, dx)]
    pairs += list(zip(pf, gf))
    pairs += list(zip(pb, gb))
    return _compare_all(f, pairs)


def _check_pool_vector(rng, kind):
    t = int(rng.integers(2, 12))
    x = rng.uniform(-3, 3, t)
    if kind == "mp":
        srt = np.sort(x)
        while srt[-1] - srt[-2] < KINK_MARGIN:
            x = rng.uniform(-3, 3, t)
            srt = np.sort(x)
    a = rng.uniform(-2, 2, t) if kind == "at" else None
    _, cache = milpool.pool_forward(kind, x, a)
    u = 1.0
    dx, da = milpool.pool_backward(u, cache)

    def f():
        return float(milpool.pool_forward(kind, x, a)[0])

    pairs = [(x, dx)]
    if a is not None:
        pairs.append((a, da))
    return _compare_all(f, pairs)


def check_pool_mp(rng):
    return _check_pool_vector(rng, "mp")


def check_pool_ap(rng):
    return _check_pool_vector(rng, "ap")


def check_pool_es(rng):
    return _check_pool_vector(rng, "es")


def check_pool_at(rng):
    return _check_pool_vector(rng, "at")


def check_loss_scene_ce(rng):
    n = 4
    raw = rng.uniform(0.05, 0.95, n)
    p = raw / raw.sum()  # not required to be normalized, but keep it natural
    z = np.zeros(n)
    z[rng.integers(0, n)] = 1.0
    ga = losses.scene_ce_grad(p, z)

    def f():
        return losses.scene_ce(p, z)

    return _compare_all(f, [(p, ga)])


def check_loss_event_bce_strong(rng):
    t, m = 3, 2
    p = rng.uniform(0.05, 0.95, (t, m))
    z = (rng.uniform(size=(t, m)) < 0.5).astype(np.float64)
    ga = losses.event_bce_strong_grad(p, z)

    def f():
        return losses.event_bce_strong(p, z)

    return _compare_all(f, [(p, ga)])


def check_loss_event_weak(rng):
    t, m = 4, 3
    fp = rng.uniform(0.05, 0.95, (t, m))
    bp = rng.uniform(0.05, 0.95, m)
    z = (rng.uniform(size=m) < 0.5).astype(np.float64)
    gamma, zeta = 0.7, 0.4
    gf, gb = losses.event_weak_loss_grads(fp, bp, z, gamma, zeta)

    def f():
        return losses.event_weak_loss(fp, bp, z, gamma, zeta)

    return _compare_all(f, [(fp, gf), (bp, gb)])


TINY_ARCH = ArchConfig(
    n_mels=8,
    n_frames=8,
    shared_channels=4,
    scene_channels=4,
    gru_hidden=4,
    fc_hidden=4,
    n_scenes=3,
    n_events=3,
    freq_pools=(2, 2, 2),
    scene_time_pool=4,
)


def _activation_signature(cache):
    """Byte string identifying which linear piece every kinked op is on."""
    parts = []
    for key in sorted(cache):
        val = cache[key]
        if key.endswith(".lrelu"):
            parts.append((val > 0.5).tobytes())
        elif key.startswith(("shared.pool", "scene.pool")):
            parts.append(val[0].tobytes())
        elif key == "scene.gmp":
            parts.append(val[0].tobytes())
        elif key == "event.pool":
            kind, inner = val
            if kind is milpool.PoolingKind.MP:
                parts.append(np.asarray(inner[0]).tobytes())
            elif kind is milpool.PoolingKind.AT:
                parts.append(inner[3].tobytes())
    return b"".join(parts)


def check_full_model(rng, max_coords_per_array=6, h=1e-5):
    """End-to-end chain rule through the tiny network and the weak MTL loss.

    Finite differences are taken at a random subset of coordinates of every
    parameter array. A coordinate whose two perturbed forwards land on
    different linear pieces (a max-pool or leaky-ReLU kink lies inside the
    probe interval) is not differentiable there and is resampled.
    """
    weights = LossWeights(alpha=0.3, beta=1.0, gamma=0.7, zeta=0.4)
    seed = int(rng.integers(0, 2**31))
    params = model.init_params(TINY_ARCH, "at", seed).astype(np.float64)
    x = rng.standard_normal((2, TINY_ARCH.n_frames, TINY_ARCH.n_mels))
    z_scene = np.zeros((2, TINY_ARCH.n_scenes))
    for i in range(2):
        z_scene[i, rng.integers(0, TINY_ARCH.n_scenes)] = 1.0
    z_weak = (rng.uniform(size=(2, TINY_ARCH.n_events)) < 0.5).astype(np.float64)

    def objective():
        out, cache = model.forward(params, x, mode="train")
        ls = losses.scene_ce(out.scene_probs, z_scene)
        le = losses.event_weak_loss(
            out.frame_probs, out.bag_probs, z_weak, weights.gamma, weights.zeta
        )
        return losses.total_loss(ls, le, weights), _activation_signature(cache)

    out, cache = model.forward(params, x, mode="train")
    d_scene = weights.alpha * losses.scene_ce_grad(out.scene_probs, z_scene)
    d_frame, d_bag = losses.event_weak_loss_grads(
        out.frame_probs, out.bag_probs, z_weak, weights.gamma, weights.zeta
    )
    grads = model.backward(
        params,
        cache,
        d_scene_probs=d_scene,
        d_frame_probs=weights.beta * d_frame,
        d_bag_probs=weights.beta * d_bag,
    )

    err = 0.0
    checked = 0
    for name, arr in params.arrays.items():
        ga_full = grads[name].reshape(-1)
        flat = arr.reshape(-1)
        size = arr.size
        k = min(max_coords_per_array, size)
        candidates = list(rng.permutation(size))
        taken = 0
        while taken < k and candidates:
            i = candidates.pop()
            orig = flat[i]
            flat[i] = orig + h
            fp, sig_p = objective()
            flat[i] = orig - h
            fm, sig_m = objective()
            flat[i] = orig
            if sig_p != sig_m:
                continue  # kink inside the probe interval
            gn = (fp - fm) / (2.0 * h)
            err = max(err, rel_err(ga_full[i : i + 1], np.array([gn])))
            taken += 1
            checked += 1
    if checked < len(params.arrays):
        raise InvalidInput("full-model gradient check skipped too many coordinates")
    return err


CHECKS = {
    "linear": (check_linear, KERNEL_TOL),
    "conv2d": (check_conv2d, KERNEL_TOL),
    "batch_norm": (check_batch_norm, KERNEL_TOL),
    "leaky_relu": (check_leaky_relu, KERNEL_TOL),
    "max_pool2d": (check_max_pool2d, KERNEL_TOL),
    "global_max_pool": (check_global_max_pool, KERNEL_TOL),
    "gru_bidirectional": (check_gru_bidirectional, KERNEL_TOL),
    "softmax": (check_softmax, KERNEL_TOL),
    "sigmoid": (check_sigmoid, KERNEL_TOL),
    "pool_mp": (check_pool_mp, KERNEL_TOL),
    "pool_ap": (check_pool_ap, KERNEL_TOL),
    "pool_es": (check_pool_es, KERNEL_TOL),
    "pool_at": (check_pool_at, KERNEL_TOL),
    "loss_scene_ce": (check_loss_scene_ce, KERNEL_TOL),
    "loss_event_bce_strong": (check_loss_event_bce_strong, KERNEL_TOL),
    "loss_event_weak": (check_loss_event_weak, KERNEL_TOL),
    "full_model": (check_full_model, MODEL_TOL),
}


def grad_check(op, seed):
    """Max relative error of one op's backward pass at one seed."""
    fn, _ = CHECKS[op]
    return fn(np.random.default_rng(seed))


def run(ops=None, n_seeds=DEFAULT_SEEDS, base_seed=0):
    """Run checks over n_seeds seeds each; returns {op: (max_err, tol)}."""
    ops = list(CHECKS) if ops is None else list(ops)
    results = {}
    for op in ops:
        fn, tol = CHECKS[op]
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(np.random.default_rng(base_seed + s)))
        results[op] = (worst, tol)
    return results

"""Shared test utilities: finite differences and brute-force reference ops.

The reference implementations here are deliberately naive (nested loops,
direct formula transcriptions).  They exist so the fast vectorised code in
the package is checked against an independently written oracle rather than
against itself.
"""

from __future__ import annotations

import numpy as np

from mrenet.tensor import Tensor

FD_STEP = 1e-5


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def finite_diff_grads(fn, arrays, h: float = FD_STEP):
    """Central-difference gradients of ``fn(*arrays) -> float`` per array."""
    grads = []
    for ai, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        work = [a.copy() for a in arrays]
        wflat = work[ai].reshape(-1)
        for i in range(wflat.size):
            orig = wflat[i]
            wflat[i] = orig + h
            fp = fn(*work)
            wflat[i] = orig - h
            fm = fn(*work)
            wflat[i] = orig
            flat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build_loss, arrays, tol: float = 1e-6, h: float = FD_STEP,
                max_entries: int = 40, seed: int = 0):
    """Compare autodiff gradients of a scalar graph against finite differences.

    ``build_loss(*tensors) -> Tensor`` must be a pure function of its inputs.
    For each input array up to ``max_entries`` randomly chosen entries are
    perturbed.  Asserts the relative error of every checked entry is < tol.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def scalar_fn(*arrs):
        ts = [Tensor(a.copy()) for a in arrs]
        return float(build_loss(*ts).data)

    for ai, base in enumerate(arrays):
        n = base.size
        idx = np.arange(n) if n <= max_entries else rng.choice(
            n, size=max_entries, replace=False)
        work = [a.copy().astype(np.float64) for a in arrays]
        wflat = work[ai].reshape(-1)
        aflat = analytic[ai].reshape(-1)
        for i in idx:
            orig = wflat[i]
            wflat[i] = orig + h
            fp = scalar_fn(*work)
            wflat[i] = orig - h
            fm = scalar_fn(*work)
            wflat[i] = orig
            fd = (fp - fm) / (2 * h)
            err = rel_err(float(aflat[i]), fd)
            assert err < tol, (
                f"gradient mismatch for input {ai} entry {i}: "
                f"analytic={aflat[i]:.10g} fd={fd:.10g} rel_err={err:.3g}"
            )


def check_param_grads(loss_fn, store, tol: float = 1e-4, h=FD_STEP,
                      entries_per_param: int = 4, seed: int = 0,
                      names=None, min_grad_coverage: int = 0):
    """Finite-difference check of store-parameter gradients.

    ``loss_fn()`` must rebuild the scalar loss graph from the store's current
    parameter values each call.  For each chosen parameter up to
    ``entries_per_param`` random entries are perturbed in place.  ``h`` may be
    a single step or a sequence of steps; an entry passes if any step agrees
    (the best step trades truncation error against round-off per entry).
    Returns the number of entries checked (useful to assert a minimum sample
    size).
    """
    from mrenet.params import backward_pass
    from mrenet.tensor import no_grad

    steps = (h,) if np.isscalar(h) else tuple(h)
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    backward_pass(loss, store)
    checked = 0
    target_names = names if names is not None else [
        n for n, _ in store.trainable_items()]
    for name in target_names:
        t = store[name]
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= entries_per_param else rng.choice(
            n, size=entries_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            best_err, best_fd = np.inf, np.nan
            for step in steps:
                flat[i] = orig + step
                with no_grad():
                    fp = float(loss_fn().data)
                flat[i] = orig - step
                with no_grad():
                    fm = float(loss_fn().data)
                flat[i] = orig
                fd = (fp - fm) / (2 * step)
                err = rel_err(float(analytic[i]), fd)
                if err < best_err:
                    best_err, best_fd = err, fd
                if best_err < tol:
                    break
            assert best_err < tol, (
                f"gradient mismatch for {name}[{i}]: analytic={analytic[i]:.10g} "
                f"fd={best_fd:.10g} rel_err={best_err:.3g}")
            checked += 1
    assert checked >= min_grad_coverage
    return checked


def conv3d_reference(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0),
                     dilation=(1, 1, 1)):
    """Nested-loop 3D cross-correlation on [C_in,D,H,W] / [C_out,C_in,kd,kh,kw]."""
    c_in, d_in, h_in, w_in = x.shape
    c_out, c_in2, kd, kh, kw = w.shape
    assert c_in == c_in2
    sd, sh, sw = stride
    pd, ph, pw = padding
    dd, dh, dw = dilation
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    d_out = (d_in + 2 * pd - dd * (kd - 1) - 1) // sd + 1
    h_out = (h_in + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    w_out = (w_in + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((c_out, d_out, h_out, w_out), dtype=np.float64)
    for co in range(c_out):
        for zo in range(d_out):
            for yo in range(h_out):
                for xo in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for z in range(kd):
                            for y in range(kh):
                                for xk in range(kw):
                                    acc += (
                                        xp[ci, zo * sd + z * dd,
                                           yo * sh + y * dh,
                                           xo * sw + xk * dw]
                                        * w[co, ci, z, y, xk])
                    out[co, zo, yo, xo] = acc
        if b is not None:
            out[co] += b[co]
    return out


def conv_transpose3d_reference(x, w, b=None, stride=(1, 1, 1)):
    """Nested-loop transposed convolution on [C_in,D,H,W] / [C_in,C_out,k...]."""
    c_in, d_in, h_in, w_in = x.shape
    c_in2, c_out, kd, kh, kw = w.shape
    assert c_in == c_in2
    sd, sh, sw = stride
    out = np.zeros(
        (c_out, (d_in - 1) * sd + kd, (h_in - 1) * sh + kh, (w_in - 1) * sw + kw),
        dtype=np.float64)
    for ci in range(c_in):
        for zi in range(d_in):
            for yi in range(h_in):
                for xi in range(w_in):
                    v = x[ci, zi, yi, xi]
                    for co in range(c_out):
                        for z in range(kd):
                            for y in range(kh):
                                for xk in range(kw):
                                    out[co, zi * sd + z, yi * sh + y,
                                        xi * sw + xk] += v * w[ci, co, z, y, xk]
    if b is not None:
        out += b.reshape(-1, 1, 1, 1)
    return out

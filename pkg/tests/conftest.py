"""Shared test utilities: naive reference implementations and a
central-difference gradient checker.

The references are deliberately written as plain loops so they share no
code path with the package; agreement between the two routes is the
evidence the tests rely on.
"""

import numpy as np

from hsvit.tensor import no_grad

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_TOL = 1e-8


def conv2d_naive(x, w, b, stride=1, padding=0):
    """Quadruple-loop 2-d cross-correlation over a [C,H,W] array."""
    c, h, wid = x.shape
    out_ch, in_ch, kh, kw = w.shape
    assert c == in_ch
    hp, wp = h + 2 * padding, wid + 2 * padding
    xp = np.zeros((c, hp, wp))
    xp[:, padding : padding + h, padding : padding + wid] = x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((out_ch, ho, wo))
    for o in range(out_ch):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                out[o, i, j] = acc
    return out


def maxpool2d_naive(x, window, stride):
    """Loop max pooling; ties go to the first element in row-major order."""
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                best = -np.inf
                for u in range(window):
                    for v in range(window):
                        val = x[ci, i * stride + u, j * stride + v]
                        if val > best:
                            best = val
                out[ci, i, j] = best
    return out


def matmul_naive(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def numeric_gradient(scalar_fn, tensor, step=FD_STEP):
    """Central-difference gradient of scalar_fn() with respect to tensor.

    scalar_fn must re-run the computation from tensor.data each call;
    the data is perturbed in place and restored.
    """
    grad = np.zeros_like(tensor.data)
    for i in range(tensor.data.size):
        orig = tensor.data.flat[i]
        tensor.data.flat[i] = orig + step
        hi = scalar_fn()
        tensor.data.flat[i] = orig - step
        lo = scalar_fn()
        tensor.data.flat[i] = orig
        grad.flat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_errors(fd, analytic):
    """Per-element mismatch measure against the shared tolerance rule."""
    scale = np.maximum(np.abs(fd), np.abs(analytic))
    tol = np.maximum(FD_REL_TOL * scale, FD_ABS_TOL)
    return np.abs(fd - analytic) / tol


def check_gradients(build_loss, params, step=FD_STEP):
    """Compare tape gradients of build_loss() against central differences.

    build_loss constructs the graph from scratch and returns the scalar
    loss tensor.  Returns the worst mismatch ratio (<= 1 passes).
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    # a parameter absent from the graph legitimately has zero gradient;
    # the finite-difference comparison below catches any truly missed one
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def forward_value():
        with no_grad():
            return build_loss().item()

    worst = 0.0
    for p, an in zip(params, analytic):
        fd = numeric_gradient(forward_value, p, step)
        worst = max(worst, float(gradient_errors(fd, an).max()))
    return worst

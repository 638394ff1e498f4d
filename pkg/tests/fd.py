"""Central finite-difference gradient checking (the independent oracle for
every backward rule).  64-bit mode, step 1e-4, relative error < 1e-4 with a
small absolute floor for entries at the FD noise level."""

import numpy as np

from deformseg.tensor import backward

STEP = 1e-4
RTOL = 1e-4
ATOL = 1e-7


def numeric_grads(scalar_fn, tensors, h=STEP):
    """d scalar_fn / d tensor by central differences, one entry at a time.

    scalar_fn rebuilds the computation from the tensors' current data and
    returns a python float.
    """
    out = []
    for t in tensors:
        grad = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = scalar_fn()
            flat[i] = saved - h
            fm = scalar_fn()
            flat[i] = saved
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(grad)
    return out


def max_rel_error(analytic, numeric):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ATOL / RTOL)
    return float((err / scale).max()) if err.size else 0.0


def assert_grads_match(analytic, numeric, rtol=RTOL, atol=ATOL, label=""):
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        err = np.abs(a - n)
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        bad = err > tol
        assert not bad.any(), (
            f"{label} input {i}: {bad.sum()} of {a.size} entries disagree, "
            f"max abs err {err.max():.3e}")


def check_gradients(build_scalar, tensors, label=""):
    """build_scalar() -> scalar Tensor built from `tensors`.  Compares the
    autodiff gradients against central finite differences."""
    loss = build_scalar()
    for t in tensors:
        t.grad = None
    backward(loss)
    analytic = []
    for t in tensors:
        assert t.grad is not None, f"{label}: no gradient reached input"
        analytic.append(t.grad.copy())
    numeric = numeric_grads(lambda: build_scalar().item(), tensors)
    assert_grads_match(analytic, numeric, label=label)


def random_projection_loss(out, seed=0):
    """Project a tensor to a scalar with fixed random weights so the check
    is sensitive to every output element."""
    from deformseg.tensor import Tensor, tsum, mul

    r = np.random.default_rng(seed).normal(size=out.shape)
    return tsum(mul(out, Tensor(r, dtype=out.dtype)))

import contextlib

import numpy as np
import pytest

from leanet import tensor as T

# Gradients whose norm falls below this are compared in absolute terms: their
# finite-difference estimates are dominated by float64 round-off in the loss.
GRADIENT_FLOOR = 1e-6


@contextlib.contextmanager
def record_switches(log):
    """Append the on/off pattern of every ReLU and the winner of every max-pool window to ``log``."""
    activate, pool = T.activate, T.pool

    def activate_rec(x, kind, alpha=0.2):
        if kind in ("relu", "leaky_relu"):
            log.append(np.packbits(x.data > 0))
        return activate(x, kind, alpha)

    def pool_rec(x, kind, window=2):
        out = pool(x, kind, window)
        if kind == "max":
            up = np.repeat(np.repeat(out.data, window, axis=-3), window, axis=-2)
            log.append(np.packbits(x.data == up))
        return out

    T.activate, T.pool = activate_rec, pool_rec
    try:
        yield log
    finally:
        T.activate, T.pool = activate, pool


def _switches(loss_fn):
    log = []
    with record_switches(log):
        value = float(loss_fn().data)
    return value, log


def relative_gradient_error(loss_fn, tensors, rng, samples=8, h=1e-6, stats=None):
    """Norm-wise relative error between autodiff and central differences.

    ``loss_fn()`` must rebuild the scalar loss from the current contents of
    ``tensors`` (float64 leaves with ``requires_grad``). Up to ``samples``
    coordinates per tensor are probed. A coordinate whose +h and -h
    evaluations switch a different set of ReLUs or max-pool winners straddles
    a point where the loss is not differentiable; it is replaced by a fresh
    coordinate (counted in ``stats["kinks"]`` when a dict is passed).
    """
    grads = T.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size)
        want = min(samples, flat.size)
        analytic, numeric = [], []
        for j in order:
            if len(numeric) == want:
                break
            orig = flat[j]
            flat[j] = orig + h
            up, up_sw = _switches(loss_fn)
            flat[j] = orig - h
            down, down_sw = _switches(loss_fn)
            flat[j] = orig
            if len(up_sw) != len(down_sw) or any(not np.array_equal(a, b) for a, b in zip(up_sw, down_sw)):
                if stats is not None:
                    stats["kinks"] = stats.get("kinks", 0) + 1
                continue
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[t].reshape(-1)[j] if t in grads else 0.0)
        if not numeric:
            continue
        analytic, numeric = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRADIENT_FLOOR)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grad_error():
    return relative_gradient_error


def pytest_terminal_summary(terminalreporter):
    import sys

    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

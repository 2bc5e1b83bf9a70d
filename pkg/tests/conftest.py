import contextlib

import numpy as np

import jointxfer.numerics as nx


@contextlib.contextmanager
def record_decisions():
    """Record every LReLU sign pattern and max-pool argmax made inside the block."""
    log = []
    lrelu, pool = nx.leaky_relu_forward, nx.maxpool2x2_forward

    def lrelu_rec(x, slope=0.01):
        out, cache = lrelu(x, slope)
        log.append(cache[0].copy())
        return out, cache

    def pool_rec(x):
        out, cache = pool(x)
        log.append(cache[0].copy())
        return out, cache
    nx.leaky_relu_forward, nx.maxpool2x2_forward = lrelu_rec, pool_rec
    try:
        yield log
    finally:
        nx.leaky_relu_forward, nx.maxpool2x2_forward = lrelu, pool


def kink_free_indices(fn, x, step, indices):
    """Coordinates whose +/- step evaluations take identical piecewise branches.

    A central difference straddling an LReLU or pooling kink measures the mean
    of two slopes, not the derivative, so such coordinates are not valid probes.
    """
    flat = np.asarray(x, dtype=float).reshape(-1)
    keep = []
    for i in indices:
        runs = []
        for sign in (1, -1):
            v = flat.copy()
            v[i] += sign * step
            with record_decisions() as log:
                fn(v.reshape(np.shape(x)))
            runs.append(log)
        if all(np.array_equal(a, b) for a, b in zip(*runs)):
            keep.append(int(i))
    return keep


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

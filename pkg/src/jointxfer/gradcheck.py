"""Finite-difference suite over every layer and loss.

Each check draws random inputs per seed, compares the analytic gradient with
central differences (:func:`numerics.finite_diff_check`) and keeps the worst
relative error. Inputs of piecewise-linear ops are drawn away from their
kinks so a central difference never straddles one.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .losses import MatchHead, contrastive_pairs, cross_entropy

# linear, piecewise-linear and quadratic ops: central differences are exact
# up to rounding
EXACT_TOL = 1e-6
# curved ops: truncation error of the central difference
CURVED_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _layer(forward, args, which, upstream, step):
    def fn(v):
        a = list(args)
        a[which] = v
        out, grads = forward(*a, upstream=upstream)
        g = grads.d_input if which == 0 else grads.d_params[which - 1]
        return float(np.sum(upstream * out)), g
    return nx.finite_diff_check(fn, args[which], step)


def _away_from_zero(x, gap):
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _conv(rng, step):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    up = rng.normal(size=(2, 4, 5, 5))
    return max(_layer(nx.conv2d, [x, w, b], i, up, step) for i in range(3))


def _fc(rng, step):
    x = rng.normal(size=(3, 7))
    w = rng.normal(size=(5, 7))
    b = rng.normal(size=5)
    up = rng.normal(size=(3, 5))
    return max(_layer(nx.fully_connected, [x, w, b], i, up, step) for i in range(3))


def _lrelu(rng, step):
    x = _away_from_zero(rng.normal(size=(4, 9)), 10 * step)
    up = rng.normal(size=x.shape)
    fwd = lambda v, upstream: nx.leaky_relu(v, 0.01, upstream)
    return _layer(fwd, [x], 0, up, step)


def _gn(rng, step):
    x = rng.normal(size=(2, 6, 3, 3))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    up = rng.normal(size=x.shape)
    fwd = lambda v, g, b, upstream: nx.group_norm(v, g, b, 3, upstream=upstream)
    return max(_layer(fwd, [x, gamma, beta], i, up, step) for i in range(3))


def _maxpool(rng, step):
    # distinct values spaced well beyond the step: no argmax flips
    x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * (10 * step)
    up = rng.normal(size=(2, 3, 2, 2))

    def fn(v):
        out, cache = nx.maxpool2x2_forward(v)
        return float(np.sum(up * out)), nx.maxpool2x2_backward(up, cache).d_input
    return nx.finite_diff_check(fn, x, step)


def _cross_entropy(rng, step):
    f = rng.normal(size=(4, 8))
    w, b = rng.normal(size=(6, 8)) * 0.5, rng.normal(size=6) * 0.1
    labels = rng.integers(0, 6, 4)
    errs = []
    for which in range(3):
        def fn(v, which=which):
            args = [f, w, b]
            args[which] = v
            out = cross_entropy(args[0], labels, (args[1], args[2]))
            g = out.d_feature if which == 0 else out.d_head[which - 1]
            return out.value, g
        errs.append(nx.finite_diff_check(fn, [f, w, b][which], step))
    return max(errs)


def _contrastive(rng, step):
    k, d = 3, 5
    head = MatchHead(1.0)
    while True:
        fa, fb = rng.normal(size=(k, d)) * 0.3, rng.normal(size=(k, d)) * 0.3
        d2 = ((fa[:, None] - fb[None]) ** 2).sum(-1)
        # keep every pair clear of the hinge at d^2 = m
        if np.abs(d2 - head.margin).min() > 0.05:
            break
    la, lb = rng.integers(0, 3, k), rng.integers(0, 3, k)
    errs = []
    for side in (0, 1):
        def fn(v, side=side):
            a, b = (v, fb) if side == 0 else (fa, v)
            out = contrastive_pairs(a, b, la, lb, head)
            return out.value, out.d_feature[side]
        errs.append(nx.finite_diff_check(fn, [fa, fb][side], step))
    return max(errs)


CHECKS = (
    ("conv", _conv, EXACT_TOL),
    ("fc", _fc, EXACT_TOL),
    ("lrelu", _lrelu, EXACT_TOL),
    ("maxpool", _maxpool, EXACT_TOL),
    ("group_norm", _gn, CURVED_TOL),
    ("cross_entropy", _cross_entropy, CURVED_TOL),
    ("contrastive", _contrastive, EXACT_TOL),
)


def run_suite(seeds=20, step=1e-3, base_seed=0):
    """Worst relative error per check over ``seeds`` random draws."""
    results = []
    for name, check, tol in CHECKS:
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, s, len(name)])
            worst = max(worst, check(rng, step))
        results.append(CheckResult(name, worst, tol))
    return results

"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int      # position in the ``inputs`` list
    worst_index: tuple    # element index inside that input
    checked: int          # number of scalar entries compared

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fn, inputs, eps: float = 1e-6, max_checks: int | None = None,
               floor: float = 1e-6, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Inputs must be float64. ``max_checks`` caps
    the number of entries probed per input (chosen at random, seeded);
    ``floor`` bounds the denominator of the relative error from below.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.data = np.ascontiguousarray(t.data)
    rng = np.random.default_rng(seed)

    out = fn(*inputs)
    proj = None if out.size == 1 else rng.standard_normal(out.shape) / np.sqrt(out.size)

    def scalar() -> float:
        o = fn(*inputs)
        return float(o.data.sum() if proj is None else (o.data * proj).sum())

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    out.backward(None if proj is None else proj)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = GradCheckResult(0.0, -1, (), 0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar()
            flat[i] = orig - eps
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[k].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst.checked += 1
            if rel > worst.max_rel_error:
                worst.max_rel_error = float(rel)
                worst.worst_input = k
                worst.worst_index = np.unravel_index(i, t.shape)
    for t in inputs:
        t.grad = None
    return worst


def away_from_kinks(x: np.ndarray, margin: float) -> np.ndarray:
    """Push entries with |x| <= margin out to +/- 2*margin (keeps sign)."""
    x = x.copy()
    small = np.abs(x) <= margin
    x[small] = np.where(x[small] >= 0, 2 * margin, -2 * margin)
    return x


def as_leaf(x: np.ndarray) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def standard_checks(seed: int = 0, max_checks: int | None = 40) -> dict:
    """Gradient check of every layer type and one full inception block (float64).

    Returns {name: GradCheckResult}.
    """
    from . import functional as F
    from .inception import InceptionBlock, InceptionConfig

    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    kink = 1e-3
    res = {}
    res["conv2d"] = grad_check(lambda x, w, b: F.conv2d(x, w, b, 1, 1),
                               [as_leaf(n((2, 3, 5, 5))), as_leaf(n((4, 3, 3, 3))), as_leaf(n(4))],
                               max_checks=max_checks, seed=seed)
    res["conv2d_strided_asym"] = grad_check(lambda x, w, b: F.conv2d(x, w, b, 2, (0, 1, 1, 0)),
                                            [as_leaf(n((2, 2, 6, 5))), as_leaf(n((3, 2, 1, 3))), as_leaf(n(3))],
                                            max_checks=max_checks, seed=seed)
    # distinct values keep every window maximum unique under the probe step
    pool_in = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01
    res["maxpool2d"] = grad_check(lambda x: F.maxpool2d(x, 4, 4, 1, (1, 2, 1, 2)), [as_leaf(pool_in)],
                                  max_checks=max_checks, seed=seed)
    res["selu"] = grad_check(F.selu, [as_leaf(away_from_kinks(n((3, 7)), kink))], seed=seed)
    res["relu"] = grad_check(F.relu, [as_leaf(away_from_kinks(n((3, 7)), kink))], seed=seed)
    def bn(x, g, b):
        return F.batchnorm(x, g, b, F.BatchNormState.fresh(3, np.float64), "train")

    res["batchnorm"] = grad_check(bn, [as_leaf(n((4, 3, 2, 2))), as_leaf(n(3)), as_leaf(n(3))],
                                  max_checks=max_checks, seed=seed)
    res["linear"] = grad_check(F.linear, [as_leaf(n((4, 5))), as_leaf(n((5, 3))), as_leaf(n(3))], seed=seed)
    res["add"] = grad_check(F.add, [as_leaf(n((2, 3))), as_leaf(n((2, 3)))], seed=seed)
    res["concat"] = grad_check(lambda a, b: F.concat([a, b], axis=1),
                               [as_leaf(n((2, 2, 3))), as_leaf(n((2, 4, 3)))], seed=seed)
    res["flatten"] = grad_check(F.flatten, [as_leaf(n((2, 3, 2, 2)))], seed=seed)
    labels = rng.integers(0, 2, size=5)
    res["softmax_cross_entropy"] = grad_check(lambda z: F.softmax_cross_entropy(z, labels),
                                              [as_leaf(n((5, 2)))], seed=seed)

    cfg = InceptionConfig(3, 2, 2, 3, 2, 2, 3, 2, 2, 4, 4)
    block = InceptionBlock(cfg, rng=np.random.default_rng(seed), dtype=np.float64)
    params = block.parameters()
    res["inception_block"] = grad_check(lambda x, *ps: block(x), [as_leaf(n((2, 3, 6, 6)))] + params,
                                        max_checks=max_checks, seed=seed)
    return res

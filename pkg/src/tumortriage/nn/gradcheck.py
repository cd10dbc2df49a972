"""Central finite-difference gradient checks run in float64.

Piecewise-linear layers make a central difference meaningless whenever the
perturbation moves an input across a kink: 0 for ReLU, 0 or 6 for ReLU6, a
change of winner for max pooling. The checks record every such switching
pattern and leave those coordinates out instead of reporting a spurious
mismatch.
"""

from __future__ import annotations

from contextlib import contextmanager
from unittest import mock

import numpy as np

from .layers import MaxPool2D, ReLU, ReLU6
from .model import ModelGraph, softmax_cross_entropy

EPSILON = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ``|a - n| / max(|a| + |n|, tiny)``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _as64(params: dict) -> dict:
    return {k: np.array(v, dtype=np.float64) for k, v in params.items()}


@contextmanager
def _activation_log():
    """Collect the switching pattern of every piecewise-linear layer evaluated inside."""
    log = []
    relu_forward, relu6_forward, pool_forward = ReLU.forward, ReLU6.forward, MaxPool2D.forward

    def relu(self, params, x):
        log.append(np.packbits(x > 0))
        return relu_forward(self, params, x)

    def relu6(self, params, x):
        log.append(np.packbits(x > 0))
        log.append(np.packbits(x < 6))
        return relu6_forward(self, params, x)

    def pool(self, params, x):
        y, cache = pool_forward(self, params, x)
        log.append(cache[1])
        return y, cache

    with mock.patch.object(ReLU, "forward", relu), \
            mock.patch.object(ReLU6, "forward", relu6), \
            mock.patch.object(MaxPool2D, "forward", pool):
        yield log


def _evaluate(objective) -> tuple:
    with _activation_log() as log:
        value = objective()
    return value, log


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def _numeric_grad(objective, array: np.ndarray, eps: float, indices) -> tuple:
    """Central differences over ``indices`` of ``array`` (perturbed in place, then restored).

    Returns ``(gradient, usable)`` where ``usable`` is False for coordinates
    whose perturbation crossed an activation kink.
    """
    flat = array.reshape(-1)
    _, base = _evaluate(objective)
    grad = np.zeros(len(indices))
    usable = np.ones(len(indices), bool)
    for j, i in enumerate(indices):
        keep = flat[i]
        flat[i] = keep + eps
        up, up_pattern = _evaluate(objective)
        flat[i] = keep - eps
        down, down_pattern = _evaluate(objective)
        flat[i] = keep
        grad[j] = (up - down) / (2 * eps)
        usable[j] = _same_pattern(base, up_pattern) and _same_pattern(base, down_pattern)
    return grad, usable


def _compare(analytic: np.ndarray, array: np.ndarray, objective, eps: float,
             indices=None) -> tuple:
    indices = np.arange(array.size) if indices is None else np.asarray(indices)
    numeric, usable = _numeric_grad(objective, array, eps, indices)
    a = np.ravel(analytic)[indices]
    return a[usable], numeric[usable], int((~usable).sum())


def check_layer(layer, x: np.ndarray, params: dict, rng: np.random.Generator,
                eps: float = EPSILON) -> dict:
    """Relative error of every gradient of one layer under a random linear probe.

    The scalar objective is ``sum(forward(x) * probe)``, so its gradient with
    respect to the output is exactly ``probe``. Coordinates whose perturbation
    crosses an activation kink are skipped.
    """
    x = np.array(x, dtype=np.float64)
    params = _as64(params)
    y, cache = layer.forward(params, x)
    probe = rng.standard_normal(y.shape)
    dx, grads = layer.backward(params, cache, probe)

    def objective():
        return float(np.sum(layer.forward(params, x)[0] * probe))

    errors = {}
    for name, value, grad in [("x", x, dx)] + [(k, v, grads[k]) for k, v in params.items()]:
        a, n, _ = _compare(grad, value, objective, eps)
        errors[name] = relative_error(a, n) if a.size else 0.0
    return errors


def check_model(model: ModelGraph, x: np.ndarray, labels: np.ndarray,
                rng: np.random.Generator, fraction: float = 0.01, min_per_tensor: int = 1,
                eps: float = EPSILON) -> float:
    """End-to-end loss gradient check on a random sample of parameters.

    Samples ``fraction`` of the entries of every parameter tensor (at least
    ``min_per_tensor``) and returns the norm-wise relative error over all of them.
    """
    m64 = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)

    def objective():
        return softmax_cross_entropy(m64.forward(x), labels)[0]

    logits, caches = m64.forward_train(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = m64.backward(caches, dlogits)
    analytic, numeric = [], []
    for p, g in zip(m64.params, grads):
        for name, value in p.items():
            n = max(min_per_tensor, int(round(fraction * value.size)))
            idx = rng.choice(value.size, size=min(n, value.size), replace=False)
            a, num, _ = _compare(g[name], value, objective, eps, idx)
            analytic.append(a)
            numeric.append(num)
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))

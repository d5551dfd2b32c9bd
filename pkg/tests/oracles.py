"""Independent oracles shared by the test suite.

Everything here is deliberately dumb: central finite differences for
gradients, brute-force loops for metrics, least squares for probe
accuracy.  The implementations under test must agree with these within
the stated tolerances; the oracles never import model internals beyond
the Tensor wrapper they differentiate through.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from vaemo.autodiff import Tensor


def finite_diff_grads(
    f: Callable[[Mapping[str, np.ndarray]], float],
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays."""
    base = {name: np.array(a, dtype=np.float64) for name, a in arrays.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(base)
            flat[i] = orig - h
            down = f(base)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Worst absolute deviation, relative to the gradient's magnitude.

    A wrong backward formula produces errors on the order of the gradient
    itself, so normalizing by the max magnitude keeps the check sharp
    while staying insensitive to float32 roundoff on near-zero entries.
    Gradients that are mathematically zero (e.g. a bias under a
    shift-invariant softmax) leave only roundoff on both sides; those are
    treated as agreeing.
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(r).max(initial=0.0)))
    if scale < 1e-5:
        return 0.0
    return float(np.abs(a - r).max(initial=0.0)) / scale


def check_gradients(
    build: Callable[[dict[str, Tensor]], Tensor],
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-3,
    dtype=np.float32,
) -> float:
    """Compare backward() against finite differences; return max rel error.

    ``build`` maps named tensors to a scalar loss.  The analytic pass runs
    in ``dtype`` (float32 by default, matching production); the finite
    difference pass always runs in float64.
    """
    tensors = {
        name: Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for name, a in arrays.items()
    }
    loss = build(tensors)
    loss.backward()
    analytic = {name: t.grad for name, t in tensors.items()}
    for name, g in analytic.items():
        assert g is not None, f"no gradient reached input {name!r}"

    def f(arrs: Mapping[str, np.ndarray]) -> float:
        wrapped = {name: Tensor(np.asarray(a, dtype=np.float64)) for name, a in arrs.items()}
        return float(build(wrapped).data)

    fd = finite_diff_grads(f, arrays, h=h)
    return max(relative_error(analytic[name], fd[name]) for name in arrays)


def uar_bruteforce(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> float:
    """Unweighted average recall by explicit per-class loops."""
    recalls = []
    for c in range(num_classes):
        hits = 0
        total = 0
        for y, p in zip(labels, preds):
            if y == c:
                total += 1
                if p == c:
                    hits += 1
        if total:
            recalls.append(hits / total)
    return float(np.mean(recalls))


def war_bruteforce(labels: np.ndarray, preds: np.ndarray) -> float:
    hits = sum(1 for y, p in zip(labels, preds) if y == p)
    return hits / len(labels)


def pcc_bruteforce(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = x - x.mean()
    ym = y - y.mean()
    return float((xm * ym).sum() / np.sqrt((xm * xm).sum() * (ym * ym).sum()))


def linear_probe_accuracy(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    num_classes: int,
) -> float:
    """Least-squares one-vs-all probe; measures linear separability."""
    aug = np.concatenate([train_x, np.ones((len(train_x), 1))], axis=1)
    onehot = np.eye(num_classes)[train_y]
    w, *_ = np.linalg.lstsq(aug, onehot, rcond=None)
    test_aug = np.concatenate([test_x, np.ones((len(test_x), 1))], axis=1)
    preds = (test_aug @ w).argmax(axis=1)
    return float((preds == test_y).mean())

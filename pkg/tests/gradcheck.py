"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

from fdylka.tensor import Tensor, no_grad

STEP = 1e-5
TOL = 1e-5


FLOOR = 1e-4


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|, FLOOR)``.

    The floor keeps structurally zero gradients (a bias feeding batch norm,
    a shift-invariant softmax) from turning difference noise into 0/0.
    """
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), FLOOR)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(fn, inputs, seed=0, step=STEP, wrt=None):
    """Compare backprop against central differences of ``sum(fn(*inputs) * R)``.

    Args:
        fn: Maps Tensors to a Tensor.
        inputs: Arrays to wrap as leaves.
        seed: Seed of the random projection R.
        step: Finite-difference step.
        wrt: Indices of inputs to check (default all).

    Returns:
        Worst relative error over the checked inputs.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = fn(*leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def f(arrays):
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst = 0.0
    for i in wrt if wrt is not None else range(len(inputs)):
        a = inputs[i]
        assert a.size <= 200, "gradient checks are limited to 200 elements"
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            arrays = list(inputs)
            plus, minus = a.copy(), a.copy()
            plus[idx] += step
            minus[idx] -= step
            arrays[i] = plus
            fp = f(arrays)
            arrays[i] = minus
            num[idx] = (fp - f(arrays)) / (2 * step)
        grad = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(grad, num))
    return worst


def check_param_grads(loss_fn, params, step=STEP, max_size=200):
    """Finite-difference check of every leaf in a ParamSet (leaves up to ``max_size``).

    ``loss_fn()`` must build a fresh scalar Tensor from the current values.
    Returns ``{leaf id: relative error}``.
    """
    params.zero_grad()
    loss_fn().backward()
    errors = {}
    for name, t in params.leaves.items():
        if t.size > max_size:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            orig = t.data[idx]
            with no_grad():
                t.data[idx] = orig + step
                fp = loss_fn().item()
                t.data[idx] = orig - step
                fm = loss_fn().item()
            t.data[idx] = orig
            num[idx] = (fp - fm) / (2 * step)
        errors[name] = relative_error(analytic, num)
    return errors

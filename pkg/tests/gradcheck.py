"""Central finite-difference oracle used across the test suite."""

import numpy as np

from driftbench import tensor as tn


def numeric_grad(fn, arrays, h=1e-4):
    """d fn / d array for each array, by central differences.

    ``fn`` maps the list of arrays to a float and must not touch the tape.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            up = fn(arrays)
            a[i] = orig - h
            down = fn(arrays)
            a[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op(build, shapes, rng, h=1e-4, low=-1.0, high=1.0):
    """Relative error between tape gradients and finite differences.

    ``build`` takes a list of Tensors and returns a scalar Tensor.
    """
    arrays = [rng.uniform(low, high, size=s) for s in shapes]
    leaves = [tn.Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    tn.backward(out)

    def value(arrs):
        with tn.no_grad():
            return build([tn.Tensor(a) for a in arrs]).item()

    fd = numeric_grad(value, [a.copy() for a in arrays], h)
    return max(rel_error(leaf.grad, g) for leaf, g in zip(leaves, fd))

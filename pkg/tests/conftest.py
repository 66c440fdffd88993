"""Shared helpers: deterministic random arrays and the op-level FD checker."""

import numpy as np

from stripseg.gradcheck import fd_gradient, max_rel_error
from stripseg.synth import normal_array, substream
from stripseg.tensor import Tape, Tensor, backward, mul, sum_all


def rand_uniform(shape, seed, lo=-2.0, hi=2.0):
    """Deterministic uniform array in [lo, hi]."""
    stream = substream(seed, 17)
    n = int(np.prod(shape)) if shape else 1
    vals = np.array([stream.uniform53() for _ in range(n)])
    return (lo + (hi - lo) * vals).reshape(shape)


def rand_normal(shape, seed):
    return normal_array(substream(seed, 19), shape)


def op_gradcheck(build, arrays, seed=0, step=1e-5):
    """Max relative error between tape gradients and central differences.

    build maps one Tensor per input array to an output Tensor; the loss is a
    fixed random projection of the output so every element matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    proj = rand_normal(out.shape, seed + 1000)
    grads = backward(tape, sum_all(mul(out, Tensor(proj))))

    def loss_fn():
        o = build(*[Tensor(a) for a in arrays])
        return float((o.data * proj).sum())

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        got = grads.get(leaf.tid)
        analytic = got.data if got is not None else np.zeros_like(arr)
        worst = max(worst, max_rel_error(analytic, fd_gradient(loss_fn, arr, step)))
    return worst

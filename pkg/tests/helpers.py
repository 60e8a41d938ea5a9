"""Shared test utilities: finite-difference gradient checking.

The checker is the independent oracle for every vjp in the engine: it
perturbs raw numpy inputs of a pure forward function and compares central
differences against the gradients the tape produces.
"""

from __future__ import annotations

import numpy as np

from lino.model import init_params
from lino.seeding import stream
from lino.tensor import Tape, Tensor, backward, mul, sum_all


def randomized_params(config, seed=0, keep=()):
    """Init then overwrite with generic values so identities are tested on
    a non-degenerate parameter point (init leaves phi and biases at zero)."""
    rng = np.random.default_rng(seed)
    params = init_params(config, stream(seed, "init"))
    out = {}
    for name, t in params.items():
        if name in keep:
            out[name] = t
        elif name.endswith("gamma"):
            out[name] = Tensor(1.0 + 0.3 * rng.normal(size=t.shape), requires_grad=True)
        else:
            out[name] = Tensor(0.4 * rng.normal(size=t.shape), requires_grad=True)
    return out


def fd_gradients(f, arrays, h=1e-5):
    """Central-difference gradients of scalar-valued f(*arrays).

    Perturbs every coordinate of every input array. Inputs must be
    float64 for the step size to make sense.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = f(*arrays)
            flat[j] = keep - h
            down = f(*arrays)
            flat[j] = keep
            gflat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    scale = max(1e-8, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(op, arrays, tol=1e-4, h=1e-5, seed=0):
    """Assert the tape gradients of `op` match finite differences.

    `op` maps Tensors to one output Tensor. The output is contracted to a
    scalar with a fixed random projection so every output coordinate
    contributes a distinct weight.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    probe_shape = op(*[Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=probe_shape)

    def scalar(*raw):
        out = op(*[Tensor(a) for a in raw])
        return float((out.data * proj).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        loss = sum_all(mul(out, Tensor(proj)))
    backward(tape, loss)

    numeric = fd_gradients(scalar, arrays, h=h)
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None, "leaf received no gradient"
        err = relative_error(leaf.grad, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return True

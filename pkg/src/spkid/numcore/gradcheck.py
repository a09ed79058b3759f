"""Finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from spkid.numcore import ops
from spkid.numcore.tensor import Tensor, backward, precision


def relative_error(analytic, numeric):
    """Max over coordinates of ``|a - f| / max(|a|, |f|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def grad_check(op, shapes=None, seed=0, eps=1e-3, inputs=None, scale=1.0, richardson=False):
    """Max relative error between backward() and central differences.

    ``op`` takes one Tensor per input and returns a Tensor.  Inputs are either
    drawn from N(0, scale^2) with the given ``shapes`` or passed explicitly via
    ``inputs``.  Non-scalar outputs are contracted with a fixed random
    projection so every output coordinate is exercised.  Runs in float64.

    With ``richardson`` the numeric derivative is the extrapolation
    ``(4 D(eps/2) - D(eps)) / 3``, which cancels the O(eps^2) truncation term
    of the plain central difference ``D``.  This is a diagnostic for telling
    truncation error apart from a wrong backward pass.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        if inputs is None:
            arrays = [rng.normal(0.0, scale, size=s) for s in shapes]
        else:
            arrays = [np.array(x, dtype=np.float64) for x in inputs]
        probe = None

        def scalar_loss(tensors):
            nonlocal probe
            out = op(*tensors)
            if out.size == 1:
                return ops.reshape(out, ())
            if probe is None:
                probe = rng.normal(size=out.shape)
            return ops.sum(ops.mul(out, probe))

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        loss = scalar_loss(tensors)
        backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def central(flat, j, h):
            orig = flat[j]
            flat[j] = orig + h
            up = scalar_loss([Tensor(a) for a in arrays]).item()
            flat[j] = orig - h
            down = scalar_loss([Tensor(a) for a in arrays]).item()
            flat[j] = orig
            return (up - down) / (2 * h)

        worst = 0.0
        for i, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            flat = base.reshape(-1)
            for j in range(flat.size):
                d = central(flat, j, eps)
                if richardson:
                    d = (4.0 * central(flat, j, eps / 2) - d) / 3.0
                numeric.reshape(-1)[j] = d
            worst = max(worst, relative_error(analytic[i], numeric))
        return worst

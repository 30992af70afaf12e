"""Pure-Python BPR/PAL epoch kernel; reference twin of ``_sgd.pyx``."""

from __future__ import annotations

import math

import numpy as np


def _softplus_neg(x: float) -> float:
    # -ln sigmoid(x)
    if x > 0:
        return math.log1p(math.exp(-x))
    return -x + math.log1p(math.exp(x))


def _sigmoid_neg(x: float) -> float:
    # sigmoid(-x)
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def sgd_epoch(U, V, A, users, pos, neg, attr_ptr, attr_idx, item_weight, item_penalty, lambda_reg, lr):
    """Run one pass of semi-implicit SGD over the given (user, pos, neg) triples.

    Sample ``k`` uses preferred attributes ``attr_idx[attr_ptr[k]:attr_ptr[k+1]]``.

    Updates ``U``, ``V``, ``A`` in place and returns the summed loss evaluated
    at the pre-update parameters of each sample.
    """
    total = 0.0
    shrink_reg = 1.0 / (1.0 + 2.0 * lr * lambda_reg)
    for k in range(len(users)):
        u = users[k]
        i = pos[k]
        j = neg[k]
        attrs = attr_idx[attr_ptr[k]:attr_ptr[k + 1]]
        w = item_weight[i]
        c = item_penalty[i]

        uu = U[u].copy()
        vi = V[i].copy()
        vj = V[j].copy()
        s = A[attrs].sum(axis=0) if len(attrs) else np.zeros_like(uu)
        q = uu + s
        diff = vi - vj
        x = float(q @ diff)

        total += w * _softplus_neg(x) + c * float(vi @ vi)
        total += lambda_reg * (float(uu @ uu) + float(vj @ vj) + float(sum(float(A[a] @ A[a]) for a in attrs)))

        g = -w * _sigmoid_neg(x)
        U[u] = (uu - lr * g * diff) * shrink_reg
        V[i] = (vi - lr * g * q) / (1.0 + 2.0 * lr * c)
        V[j] = (vj + lr * g * q) * shrink_reg
        for a in attrs:
            A[a] = (A[a] - lr * g * diff) * shrink_reg
    return total

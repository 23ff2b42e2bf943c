"""Pure-Python twin of ``_kernels.pyx``; used when the extension is not built."""
import math

import numpy as np

INV_E = 0.36787944117144233
E = 2.718281828459045
THIRD = 1.0 / 3.0
C3 = 11.0 / 72.0


def lambert_w(x):
    x = float(x)
    if x == 0.0:
        return 0.0
    q = x + INV_E
    if q <= 0.0:
        return -1.0
    if x < -0.25:
        p = math.sqrt(2.0 * E * q)
        w = -1.0 + p * (1.0 + p * (-THIRD + p * C3))
    elif x < 3.0:
        w = math.log1p(x)
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w = w - dw
        if abs(dw) <= 1e-12 * (1.0 + abs(w)):
            break
    return w


def lambert_w_array(xs):
    return np.array([lambert_w(x) for x in xs], dtype=np.float64)


def superloss_weight(loss, tau, sl_lambda):
    beta = (loss - tau) / (2.0 * sl_lambda)
    if beta < -INV_E:
        beta = -INV_E
    return math.exp(-lambert_w(beta))


def superloss_weights(losses, tau, sl_lambda):
    return np.array([superloss_weight(float(v), tau, sl_lambda) for v in losses], dtype=np.float64)


def threshold_sweep(values, is_member, n_members, n_nonmembers):
    n = len(values)
    tp, tn = 0, n_nonmembers
    best = tn * n_members
    best_i = 0
    for i in range(n):
        if is_member[i]:
            tp += 1
        else:
            tn -= 1
        if i + 1 < n and values[i + 1] == values[i]:
            continue
        score = tp * n_nonmembers + tn * n_members
        if score > best:
            best = score
            best_i = i + 1
    lo = float(values[best_i - 1]) if best_i > 0 else float("-inf")
    hi = float(values[best_i]) if best_i < n else float("inf")
    return lo, hi, int(best)

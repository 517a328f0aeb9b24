"""Central finite-difference oracle for tape gradients."""

import numpy as np

from radflow import tensor as T


def numeric_grad(f, param, index, h=1e-5):
    old = param.data[index]
    param.data[index] = old + h
    up = f()
    param.data[index] = old - h
    down = f()
    param.data[index] = old
    return (up - down) / (2 * h)


def check_gradients(loss_fn, params, rng=None, max_entries=None, h=1e-5, floor=1e-7):
    """Largest relative error between tape gradients and central differences.

    ``loss_fn`` builds a scalar tensor from the current parameter values.
    ``max_entries`` limits the number of checked entries per parameter.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    params = list(params)
    with T.Tape() as tape:
        loss = loss_fn()
    grads = T.backward(tape, loss, params)

    def value():
        with T.no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for p in params:
        idx = list(np.ndindex(p.data.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in pick]
        for i in idx:
            num = numeric_grad(value, p, i, h)
            ana = float(grads[p][i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst

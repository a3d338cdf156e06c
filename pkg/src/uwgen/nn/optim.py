"""Adaptive moment estimation, pure-functional over parameter trees."""

import numpy as np

from uwgen.nn.layers import tree_flatten, tree_map, tree_unflatten, tree_zeros_like


class Adam:
    """Standard first/second-moment optimizer with bias correction.

    State and updated parameters are returned as fresh trees; nothing is
    mutated, so trainer checkpoints can snapshot state by reference.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def init_state(self, params):
        return {"m": tree_zeros_like(params), "v": tree_zeros_like(params), "t": 0}

    def step(self, params, grads, state):
        t = state["t"] + 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t

        def upd(p, g, m, v):
            g = g.astype(p.dtype, copy=False)
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * (g * g)
            step = self.lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + self.eps)
            return p - step.astype(p.dtype, copy=False), m_new, v_new

        flat_p = tree_flatten(params)
        flat_g = tree_flatten(grads)
        flat_m = tree_flatten(state["m"])
        flat_v = tree_flatten(state["v"])
        new_p, new_m, new_v = {}, {}, {}
        for k in flat_p:
            new_p[k], new_m[k], new_v[k] = upd(flat_p[k], flat_g[k], flat_m[k], flat_v[k])
        return (
            tree_unflatten(new_p),
            {"m": tree_unflatten(new_m), "v": tree_unflatten(new_v), "t": t},
        )

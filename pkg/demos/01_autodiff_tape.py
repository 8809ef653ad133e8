"""
Reverse-mode autodiff on a tape
===============================

Every training loop in this package runs on the same machinery: a Tape records
forward operations, backward() replays them in reverse, and each Parameter
accumulates its gradient. This walk-through differentiates a small expression
and checks the result against finite differences.
"""

import numpy as np

import visfuse.autodiff as ad
from visfuse.autodiff import Parameter, Tape

# ---------------------------------------------------------------------------
# A scalar chain: loss = sum(tanh(W x + b)^2)

rng = np.random.default_rng(0)
w = Parameter("w", rng.normal(size=(3, 4)))
b = Parameter("b", np.zeros(3))
x = ad.constant(rng.normal(size=4))

tape = Tape()
h = ad.tanh(ad.linear(x, ad.use(w, tape), ad.use(b, tape)))
loss = ad.row_sum(ad.hadamard(h, h))
print("loss value:", float(loss.data))

ad.Adam.zero_grad([w, b])
ad.backward(tape, loss)
print("dloss/db:", np.round(b.grad, 4))

# ---------------------------------------------------------------------------
# Check one coordinate against a centered difference

def loss_at():
    hh = ad.tanh(ad.linear(x, ad.use(w, None), ad.use(b, None)))
    return float(ad.row_sum(ad.hadamard(hh, hh)).data)

eps = 1e-6
w.data[1, 2] += eps
up = loss_at()
w.data[1, 2] -= 2 * eps
down = loss_at()
w.data[1, 2] += eps

fd = (up - down) / (2 * eps)
print(f"w[1,2] tape grad {w.grad[1, 2]:+.6f}  finite diff {fd:+.6f}")

# ---------------------------------------------------------------------------
# The built-in checker sweeps every coordinate of an input tensor. It feeds
# the point through f twice per coordinate, so keep the function small.

def f(point):
    hh = ad.tanh(ad.linear(point, ad.use(w, None)))
    return ad.row_sum(ad.hadamard(hh, hh))

worst = ad.grad_check(f, rng.normal(size=4))
print(f"grad_check worst rel err over the input vector: {worst:.2e}")

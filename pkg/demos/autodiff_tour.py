"""A walk through the tensor engine: taping, gradients, and Hessian-vector
products, each checked against an independent numerical oracle.

Run: python demos/autodiff_tour.py
"""

import numpy as np

from dilkit import Graph, ParamVector, Tensor, backward, flat_grad, hvp
from dilkit.autodiff import conv2d, relu, sub, tabs, tmean

rng = np.random.default_rng(0)

# --- a tiny taped computation -------------------------------------------
print("== taped loss and reverse-mode gradients ==")
x = rng.random((1, 2, 8, 8))
target = rng.random((1, 2, 8, 8))
w1 = 0.3 * rng.standard_normal((3, 2, 3, 3))
b1 = np.zeros(3)
w2 = 0.3 * rng.standard_normal((2, 3, 3, 3))
b2 = np.zeros(2)
pv = ParamVector.from_arrays([("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)])


def loss_fn(p):
    g = Graph()
    with g:
        lw1, lb1, lw2, lb2 = g.register_params(p)
        h = relu(conv2d(Tensor(x), lw1, lb1))
        out = conv2d(h, lw2, lb2)
        return tmean(tabs(sub(out, Tensor(target))))


loss = loss_fn(pv)
print(f"loss value: {loss.item():.6f}")
grad = flat_grad(loss_fn, pv)
print(f"gradient: {len(grad)} entries, |g| = {np.linalg.norm(grad):.6f}")

# central finite differences along a random direction
v = rng.standard_normal(len(pv))
v /= np.linalg.norm(v)
h = 1e-5
fd = (loss_fn(pv.with_data(pv.data + h * v)).item()
      - loss_fn(pv.with_data(pv.data - h * v)).item()) / (2 * h)
print(f"directional derivative: analytic {grad @ v:+.10f}, central FD {fd:+.10f}")

# --- Hessian-vector products ---------------------------------------------
print("\n== Hessian-vector products ==")
direction = pv.with_data(rng.standard_normal(len(pv)))
fast = hvp(loss_fn, pv, direction, "finite_diff")
slow = hvp(loss_fn, pv, direction, "brute_force")
err = np.max(np.abs(fast.data - slow.data)) / np.max(np.abs(slow.data))
print(f"finite-difference HVP vs brute-force Hessian: max rel err {err:.2e}")

# --- the tape is reusable --------------------------------------------------
print("\n== one tape, two losses ==")
g = Graph()
with g:
    leaf = g.leaf(np.array([3.0, -1.0]))
    from dilkit.autodiff import square, tsum
    l1 = tsum(square(leaf))
print("d/dx sum(x^2)      :", backward(g, l1)[leaf.node_id].data)
with g:
    l2 = tmean(tabs(leaf))
print("d/dx mean(|x|)     :", backward(g, l2)[leaf.node_id].data)

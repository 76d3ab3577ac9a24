"""
Reverse-mode differentiation on a tiny graph
============================================

Every model in the package is built from a handful of array primitives
recorded on a ``Graph``. Calling ``backward`` on a scalar walks the tape
in reverse. Here we check it against central differences and watch
``stop_gradient`` cut a path.
"""

import numpy as np

from pimm import numerics as nx

rng = np.random.default_rng(0)
x = rng.normal(size=(4, 3))
y = np.array([[1.0], [0.0], [1.0], [0.0]])

# a one-layer logistic model: loss = mean BCE(sigmoid(x @ w + b), y)
w0 = rng.normal(size=(3, 1))
b0 = np.zeros((1, 1))


def build(w_value, b_value):
    g = nx.Graph()
    w = g.param(w_value, "w")
    b = g.param(b_value, "b")
    pred = nx.sigmoid(nx.add(nx.matmul(g.constant(x), w), b))
    return g, w, nx.bce_loss(pred, y)


g, w, loss = build(w0, b0)
nx.backward(loss)
print("loss", float(loss.value))
print("analytic dL/dw", w.grad.ravel())

numeric = nx.numeric_gradient(lambda: float(build(w0, b0)[2].value), w0)
print("numeric  dL/dw", numeric.ravel())
print("relative error", nx.relative_error(w.grad, numeric))

# stop_gradient forwards the value unchanged but blocks the derivative
g = nx.Graph()
a = g.param(np.array([[0.3, -1.2]]))
both = nx.add(nx.mean(nx.sigmoid(a)), nx.mean(nx.stop_gradient(nx.sigmoid(a))))
nx.backward(both)
# only the first term contributes: sigmoid'(a) / 2 per element
s = 1 / (1 + np.exp(-a.value))
print("grad through one branch", a.grad.ravel(), "expected", (s * (1 - s) / 2).ravel())

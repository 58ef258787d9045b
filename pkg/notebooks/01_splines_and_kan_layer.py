"""
B-spline bases and a single KAN layer
=====================================

Evaluate the spline basis on [-1, 1], check that it sums to one, then fit a
1 -> 1 KAN layer to a bumpy function with plain gradient descent.
"""
import numpy as np

from kagnn.autodiff import Tensor, backward
from kagnn.kan import KanLayerParams, SplineGrid, bspline_basis, kan_layer_forward

grid = SplineGrid(grid_size=5, spline_order=3)
x = np.linspace(-1, 1, 201)
B = bspline_basis(x, grid)
print("basis shape:", B.shape)                       # (points, G + k)
print("max |sum - 1|:", np.abs(B.sum(axis=1) - 1).max())
print("nonzero bases per point:", np.count_nonzero(B, axis=1).max())

# a learnable univariate function: silu base plus spline correction
rng = np.random.default_rng(0)
layer = KanLayerParams.init(1, 1, grid_size=8, spline_order=3, rng=rng)
target = np.sin(3 * x) + 0.3 * np.cos(9 * x)
xs = Tensor(x[:, None])
params = [t for _, t in layer.parameters()]
for step in range(2001):
    for p in params:
        p.grad = None
    err = kan_layer_forward(xs, layer) - Tensor(target[:, None])
    loss = (err * err).mean()
    backward(loss)
    for p in params:
        p.data -= 0.5 * p.grad
    if step % 500 == 0:
        print(f"step {step:4d}  mse {loss.item():.5f}")

"""B-spline bases and Kolmogorov-Arnold layers.

A KAN layer maps ``n_in`` inputs to ``n_out`` outputs through a matrix of
learnable univariate functions. Each edge function is a residual SiLU term plus
a B-spline on a fixed uniform grid::

    out[b, o] = sum_i base_weight[o, i] * silu(x[b, i])
              + sum_i spline_scaler[o, i] * sum_j spline_weight[o, i, j] * B_j(x[b, i])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _make, matmul, silu
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SplineGrid:
    """Uniform grid of ``grid_size`` intervals on ``[domain_lo, domain_hi]``,
    extended by ``spline_order`` knots on each side."""

    grid_size: int
    spline_order: int
    domain_lo: float = -1.0
    domain_hi: float = 1.0
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.grid_size < 1:
            raise ConfigError(f"grid_size must be positive, got {self.grid_size}")
        if self.spline_order < 0:
            raise ConfigError(f"spline_order must be non-negative, got {self.spline_order}")
        if not self.domain_lo < self.domain_hi:
            raise ConfigError(f"empty spline domain [{self.domain_lo}, {self.domain_hi}]")
        h = (self.domain_hi - self.domain_lo) / self.grid_size
        k = self.spline_order
        knots = self.domain_lo + h * np.arange(-k, self.grid_size + k + 1, dtype=np.float64)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def num_basis(self):
        return self.grid_size + self.spline_order


def _padded_knots(grid):
    k, G, lo = grid.spline_order, grid.grid_size, grid.domain_lo
    h = (grid.domain_hi - lo) / G
    return lo + h * np.arange(-2 * k, G + 2 * k + 1, dtype=np.float64)


def _evaluate(x, grid, derivative=False):
    """Cox-de Boor triangle on the knot span of every point.

    Only the ``k + 1`` functions that can be nonzero on a span are computed;
    the knot vector is padded by ``k`` extra knots per side so that spans in
    the extended region can run the full triangle, and functions outside the
    ``G + k`` real ones are dropped afterwards.
    """
    k, nb = grid.spline_order, grid.num_basis
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    t = _padded_knots(grid)
    span = np.searchsorted(t, flat, side="right") - 1
    inside = (span >= k) & (span < len(t) - 1 - k) & np.isfinite(flat)
    span = np.where(inside, span, k)
    xv = np.where(inside, flat, t[k])

    values = [np.ones_like(xv)]
    lower = None
    for j in range(1, k + 1):
        if j == k:
            lower = values
        left = [xv - t[span + 1 - q] for q in range(1, j + 1)]
        right = [t[span + q] - xv for q in range(1, j + 1)]
        nxt = []
        saved = np.zeros_like(xv)
        for r in range(j):
            temp = values[r] / (right[r] + left[j - 1 - r])
            nxt.append(saved + right[r] * temp)
            saved = left[j - 1 - r] * temp
        nxt.append(saved)
        values = nxt

    # padded output columns: real function i lives in column i + k
    width = nb + 2 * k
    index = (np.arange(flat.size) * width + span - k)[:, None] + np.arange(k + 1)[None, :]
    keep = inside.astype(np.float64)[:, None]

    def scatter(vals):
        out = np.zeros(flat.size * width)
        out[index] = np.stack(vals, axis=1) * keep
        return out.reshape(flat.size, width)[:, k:k + nb].reshape(x.shape + (nb,))

    basis = scatter(values)
    if not derivative:
        return basis, None
    if k == 0:
        return basis, np.zeros_like(basis)
    # B'_i = k (B_{i,k-1} / (t_{i+k} - t_i) - B_{i+1,k-1} / (t_{i+k+1} - t_{i+1}))
    lower = [np.zeros_like(xv)] + lower + [np.zeros_like(xv)]
    deriv = []
    for r in range(k + 1):
        i = span - k + r  # padded index of the function's first knot
        a = lower[r] / (t[i + k] - t[i])
        b = lower[r + 1] / (t[i + k + 1] - t[i + 1])
        deriv.append(k * (a - b))
    return basis, scatter(deriv)


def bspline_basis(x, grid):
    """Evaluate all ``G + k`` basis functions at ``x`` (scalar or array).

    Points outside the domain fall into the extended knot spans and are
    evaluated as-is, so their basis need not sum to one. Points beyond the
    outermost knots get an all-zero basis.
    """
    return _evaluate(x, grid)[0]


def bspline_basis_derivative(x, grid):
    return _evaluate(x, grid, derivative=True)[1]


def spline_features(x, grid):
    """Differentiable basis expansion: ``(batch, n_in)`` -> ``(batch, n_in, G + k)``."""
    basis, deriv = _evaluate(x.data, grid, derivative=x.requires_grad)
    return _make(basis, (x,), lambda g: ((g * deriv).sum(axis=-1),))


@dataclass
class KanLayerParams:
    base_weight: Tensor
    spline_weight: Tensor
    spline_scaler: Tensor
    grid: SplineGrid

    def __post_init__(self):
        n_out, n_in = self.base_weight.shape
        expected = (n_out, n_in, self.grid.num_basis)
        if self.spline_weight.shape != expected:
            raise DimensionError(f"spline_weight has shape {self.spline_weight.shape}, expected {expected}")
        if self.spline_scaler.shape != (n_out, n_in):
            raise DimensionError(f"spline_scaler has shape {self.spline_scaler.shape}, expected {(n_out, n_in)}")

    @property
    def n_in(self):
        return self.base_weight.shape[1]

    @property
    def n_out(self):
        return self.base_weight.shape[0]

    def parameters(self):
        return [("base_weight", self.base_weight),
                ("spline_weight", self.spline_weight),
                ("spline_scaler", self.spline_scaler)]

    def num_parameters(self):
        return sum(t.size for _, t in self.parameters())

    @classmethod
    def init(cls, n_in, n_out, grid_size, spline_order, rng):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"KAN layer dims must be positive, got {n_in} -> {n_out}")
        grid = SplineGrid(grid_size, spline_order)
        bound = 1.0 / math.sqrt(n_in)
        base = rng.uniform(-bound, bound, size=(n_out, n_in))
        noise = (rng.random((n_out, n_in, grid.num_basis)) - 0.5) * 0.1 / grid_size
        return cls(Tensor(base, requires_grad=True),
                   Tensor(noise, requires_grad=True),
                   Tensor(np.ones((n_out, n_in)), requires_grad=True),
                   grid)

    @classmethod
    def zeros(cls, n_in, n_out, grid_size, spline_order):
        grid = SplineGrid(grid_size, spline_order)
        return cls(Tensor(np.zeros((n_out, n_in)), requires_grad=True),
                   Tensor(np.zeros((n_out, n_in, grid.num_basis)), requires_grad=True),
                   Tensor(np.ones((n_out, n_in)), requires_grad=True),
                   grid)


def kan_layer_forward(x, params):
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise DimensionError(f"KAN layer expects (batch, {params.n_in}) input, got {x.shape}")
    base = matmul(silu(x), params.base_weight.T)
    basis = spline_features(x, params.grid).reshape(x.shape[0], params.n_in * params.grid.num_basis)
    n_out = params.n_out
    scaled = params.spline_weight * params.spline_scaler.reshape(n_out, params.n_in, 1)
    spline = matmul(basis, scaled.reshape(n_out, params.n_in * params.grid.num_basis).T)
    return base + spline


def kan_network_forward(x, layers):
    for a, (left, right) in enumerate(zip(layers, layers[1:])):
        if left.n_out != right.n_in:
            raise ConfigError(
                f"KAN layers {a} and {a + 1} do not chain: {left.n_out} outputs feed {right.n_in} inputs")
    for layer in layers:
        x = kan_layer_forward(x, layer)
    return x


def kan_param_count(n_in, n_out, grid_size, spline_order):
    """Trainable parameters in one layer: base + spline coefficients + scaler."""
    return n_in * n_out * (grid_size + spline_order + 2)

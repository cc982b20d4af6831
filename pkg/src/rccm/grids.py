"""State/input/disturbance grids for condition assembly and verification.

A GridSpec lists the axes the synthesis conditions actually vary along,
with per-axis sample counts. States the conditions ignore are pinned at
their box centers. Axes that enter the conditions (multi)linearly — all
input and disturbance axes, plus model-declared linear state dims — may be
reduced to their box vertices for the solver: an LMI affine in each such
coordinate holds on the box iff it holds at the vertices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class GridSpec:
    """Per-axis sample counts over the condition-relevant boxes."""

    state_axes: tuple    # ((state dim, count), ...)
    input_axes: tuple    # ((input dim, count), ...)
    dist_axes: tuple     # ((disturbance dim, count), ...)
    w_bound: float = 1.0

    def __post_init__(self):
        for name, axes in (('state', self.state_axes),
                           ('input', self.input_axes),
                           ('dist', self.dist_axes)):
            for dim, count in axes:
                if count < 2:
                    raise ConfigurationError(
                        f'{name} axis {dim}: need >= 2 samples, got {count}')
        if self.w_bound < 0:
            raise ConfigurationError('w_bound must be nonnegative')

    @classmethod
    def for_model(cls, model, w_bound=1.0, scale=1.0):
        """Default grid from the model's declared condition dependencies.

        `scale` multiplies the sample counts (rounded, min 2) for quick
        coarse/fine studies.
        """
        def adj(c):
            return max(2, int(round(c * scale)))

        return cls(
            state_axes=tuple((d, adj(c))
                             for d, c in sorted(model.condition_state_dims.items())),
            input_axes=tuple((d, adj(c))
                             for d, c in sorted(model.condition_input_counts.items())),
            dist_axes=tuple((d, adj(c))
                            for d, c in sorted(model.condition_dist_counts.items())),
            w_bound=float(w_bound),
        )

    @property
    def n_condition_points(self):
        total = 1
        for _, c in self.state_axes + self.input_axes + self.dist_axes:
            total *= c
        return total

    def refine(self, factor=2):
        """Denser grid keeping all existing points (count -> f*(count-1)+1)."""
        def up(axes):
            return tuple((d, factor * (c - 1) + 1) for d, c in axes)

        return replace(self, state_axes=up(self.state_axes),
                       input_axes=up(self.input_axes),
                       dist_axes=up(self.dist_axes))

    def without_disturbance(self):
        return replace(self, dist_axes=())

    def _axis_values(self, lo, hi, count, vertices):
        if vertices:
            return np.array([lo, hi])
        return np.linspace(lo, hi, count)

    def condition_points(self, model, *, vertex_reduce=False):
        """All (x, u, w) tuples the bordered condition is imposed at.

        Returns arrays X (N, n), U (N, m), Wd (N, p). With `vertex_reduce`,
        linear state dims and all input/disturbance axes collapse to their
        box endpoints (exact for multilinear dependence).
        """
        x0 = model.state_bounds.mean(axis=1)
        u0 = model.input_bounds.mean(axis=1)
        axes, setters = [], []
        for dim, count in self.state_axes:
            lo, hi = model.state_bounds[dim]
            vert = vertex_reduce and dim in model.linear_dims
            axes.append(self._axis_values(lo, hi, count, vert))
            setters.append(('x', dim))
        for dim, count in self.input_axes:
            lo, hi = model.input_bounds[dim]
            axes.append(self._axis_values(lo, hi, count, vertex_reduce))
            setters.append(('u', dim))
        for dim, count in self.dist_axes:
            axes.append(self._axis_values(-self.w_bound, self.w_bound, count,
                                          vertex_reduce))
            setters.append(('w', dim))

        combos = list(itertools.product(*axes)) if axes else [()]
        N = len(combos)
        X = np.tile(x0, (N, 1))
        U = np.tile(u0, (N, 1))
        Wd = np.zeros((N, model.p))
        for i, combo in enumerate(combos):
            for (kind, dim), val in zip(setters, combo):
                if kind == 'x':
                    X[i, dim] = val
                elif kind == 'u':
                    U[i, dim] = val
                else:
                    Wd[i, dim] = val
        return X, U, Wd

    def metric_points(self, model, basis):
        """State points over the basis-dependent axes only (for the gain
        condition and eigenvalue-bound blocks, which vary with x only
        through W)."""
        x0 = model.state_bounds.mean(axis=1)
        axes, dims = [], []
        for dim, count in self.state_axes:
            if dim in basis.state_indices:
                lo, hi = model.state_bounds[dim]
                axes.append(np.linspace(lo, hi, count))
                dims.append(dim)
        combos = list(itertools.product(*axes)) if axes else [()]
        X = np.tile(x0, (len(combos), 1))
        for i, combo in enumerate(combos):
            for dim, val in zip(dims, combo):
                X[i, dim] = val
        return X

    def describe(self):
        return {
            'state_axes': [list(a) for a in self.state_axes],
            'input_axes': [list(a) for a in self.input_axes],
            'dist_axes': [list(a) for a in self.dist_axes],
            'w_bound': self.w_bound,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(state_axes=tuple(tuple(a) for a in d.get('state_axes', [])),
                   input_axes=tuple(tuple(a) for a in d.get('input_axes', [])),
                   dist_axes=tuple(tuple(a) for a in d.get('dist_axes', [])),
                   w_bound=float(d.get('w_bound', 1.0)))

"""Invariant tubes: refined per-channel gains, set tightening, containment.

With (W, Y) frozen, the refined gain for an output channel solves the small
program min alpha over (lambda, mu): both synthesis conditions hold on the
grid. At fixed lambda the inner problem is solved exactly through the two
Schur complements (generalized-eigenvalue computations per grid point); the
product lambda*W makes the joint problem nonconvex, so lambda is handled by
a log-spaced scan plus golden-section refinement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (ConfigurationError, InfeasibleError,
                     TighteningInfeasibleError)
from .grids import GridSpec
from .lmi import batch_condition1, batch_condition2, collect_point_data
from .models import channel_output_map, standard_channel_maps


class RefineResult(NamedTuple):
    alpha: float
    lam_ref: float
    mu_ref: float
    margin1: float
    margin2: float


def _inner_alpha(point_data, CWDY, lamW, Bw, lam, eps):
    """Exact inner minimum of alpha over mu at fixed lambda, or inf.

    point_data: S = <A W + B Y> - dW/dt + lam W per condition point (N,n,n).
    CWDY, lamW over the metric points for the refined channel.
    """
    S = point_data
    n = S.shape[1]
    shifted = S + eps * np.eye(n)
    eig_top = np.linalg.eigvalsh(shifted)[:, -1]
    if eig_top.max() >= 0.0:
        return np.inf, np.inf
    # mu >= eps + lambda_max(Bw' (-S - eps I)^-1 Bw) per point.
    neg = -shifted
    sol = np.linalg.solve(neg, Bw)
    Q = np.swapaxes(Bw, 1, 2) @ sol
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    mu_min = eps + float(np.linalg.eigvalsh(Q)[:, -1].max())
    # alpha >= eps + lambda_max((CW+DY)(lam W - eps I)^-1 (CW+DY)') per point.
    core = lamW - eps * np.eye(n)
    if np.linalg.eigvalsh(core)[:, 0].min() <= 0.0:
        return np.inf, mu_min
    sol2 = np.linalg.solve(core, np.swapaxes(CWDY, 1, 2))
    Q2 = CWDY @ sol2
    Q2 = 0.5 * (Q2 + np.swapaxes(Q2, 1, 2))
    alpha_gain = eps + float(np.linalg.eigvalsh(Q2)[:, -1].max())
    return max(alpha_gain, mu_min + eps), mu_min


def refine_gain(candidate, model, channel_output_map_, grid=None, *,
                eps=1e-6, lam_range=(0.1, 10.0), n_coarse=25, n_golden=40,
                verify=True):
    """Refined gain for one output channel with (W, Y) frozen.

    Returns RefineResult(alpha, lam_ref, mu_ref, margin1, margin2); margins
    are raw eigenvalue margins of the certifying conditions over the grid.
    Raises InfeasibleError when no lambda in the search range certifies.
    """
    if channel_output_map_.q < 1:
        raise ConfigurationError('channel map must have at least one output')
    grid = grid or GridSpec.for_model(model)
    X1, U1, Wd1 = grid.condition_points(model, vertex_reduce=True)
    A, B, Bw, xdot = collect_point_data(model, X1, U1, Wd1)
    basis = candidate.basis
    mvals = basis.eval(X1)
    mdot = basis.flow_coefficients(X1, xdot)
    Wx = np.einsum('xj,jab->xab', mvals, candidate.W_coeffs)
    Wdot = np.einsum('xj,jab->xab', mdot, candidate.W_coeffs)
    Yx = np.einsum('xj,jab->xab', mvals, candidate.Y_coeffs)
    AW = A @ Wx
    BY = B @ Yx
    S0 = AW + np.swapaxes(AW, 1, 2) + BY + np.swapaxes(BY, 1, 2) - Wdot

    Xm = grid.metric_points(model, basis)
    u0 = model.input_bounds.mean(axis=1)
    mvals_m = basis.eval(Xm)
    Wm = np.einsum('xj,jab->xab', mvals_m, candidate.W_coeffs)
    Ym = np.einsum('xj,jab->xab', mvals_m, candidate.Y_coeffs)
    Cs = np.stack([np.atleast_2d(channel_output_map_.C(x, u0)) for x in Xm])
    Ds = np.stack([np.atleast_2d(channel_output_map_.D(x, u0)) for x in Xm])
    CWDY = Cs @ Wm + Ds @ Ym

    def alpha_of(lam):
        return _inner_alpha(S0 + lam * Wx, CWDY, lam * Wm, Bw, lam, eps)

    lams = np.geomspace(lam_range[0], lam_range[1], n_coarse)
    vals = [alpha_of(lam) for lam in lams]
    alphas = np.array([v[0] for v in vals])
    if not np.isfinite(alphas).any():
        raise InfeasibleError(
            f'channel {channel_output_map_.name!r}: no lambda in '
            f'[{lam_range[0]}, {lam_range[1]}] certifies a finite gain')
    k = int(np.argmin(alphas))
    lo = lams[max(k - 1, 0)]
    hi = lams[min(k + 1, len(lams) - 1)]
    # Golden-section on log(lambda); alpha(lambda) is a max of a decreasing
    # and an increasing branch, hence unimodal on the bracket.
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = np.log(lo), np.log(hi)
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = alpha_of(np.exp(c))[0], alpha_of(np.exp(d))[0]
    for _ in range(n_golden):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = alpha_of(np.exp(c))[0]
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = alpha_of(np.exp(d))[0]
    lam_ref = float(np.exp((a + b) / 2.0))
    alpha, mu_ref = alpha_of(lam_ref)
    if not np.isfinite(alpha):
        lam_ref = float(lams[k])
        alpha, mu_ref = alpha_of(lam_ref)

    margin1 = margin2 = np.nan
    if verify:
        F1 = batch_condition1(model, basis, candidate.W_coeffs,
                              candidate.Y_coeffs, mu_ref, lam_ref,
                              X1, U1, Wd1, point_data=(A, B, Bw, xdot))
        margin1 = float((-np.linalg.eigvalsh(F1)[:, -1]).min())
        F2 = batch_condition2(channel_output_map_, model, basis,
                              candidate.W_coeffs, candidate.Y_coeffs,
                              mu_ref, alpha, lam_ref, Xm)
        margin2 = float(np.linalg.eigvalsh(F2)[:, 0].min())
    return RefineResult(float(alpha), lam_ref, float(mu_ref),
                        margin1, margin2)


# ---------------------------------------------------------------------------
# Tubes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tube:
    """Euclidean norm ball of radius alpha * w_bar around a nominal channel."""

    channel: str
    kind: str                 # 'state' | 'input' | 'mixed'
    state_dims: tuple
    input_dims: tuple
    alpha: float
    w_bar: float
    lam_ref: float = float('nan')
    mu_ref: float = float('nan')
    margin: float = float('nan')

    def __post_init__(self):
        if self.alpha < 0 or self.w_bar < 0:
            raise ConfigurationError('tube gain and disturbance bound must be '
                                     'nonnegative')

    @property
    def radius(self):
        return self.alpha * self.w_bar

    def channel_error(self, x_err, u_err):
        """Norm of the channel deviation for stacked error arrays."""
        parts = []
        if self.state_dims:
            parts.append(x_err[..., list(self.state_dims)])
        if self.input_dims:
            parts.append(u_err[..., list(self.input_dims)])
        if not parts:
            raise ConfigurationError(f'tube {self.channel!r} has no channel dims')
        return np.linalg.norm(np.concatenate(parts, axis=-1), axis=-1)

    def to_dict(self):
        return {'channel': self.channel, 'kind': self.kind,
                'state_dims': list(self.state_dims),
                'input_dims': list(self.input_dims),
                'alpha': self.alpha, 'w_bar': self.w_bar,
                'radius': self.radius, 'lam_ref': self.lam_ref,
                'mu_ref': self.mu_ref, 'verification_margin': self.margin}

    @classmethod
    def from_dict(cls, d):
        return cls(channel=d['channel'], kind=d['kind'],
                   state_dims=tuple(d['state_dims']),
                   input_dims=tuple(d['input_dims']),
                   alpha=float(d['alpha']), w_bar=float(d['w_bar']),
                   lam_ref=float(d.get('lam_ref', float('nan'))),
                   mu_ref=float(d.get('mu_ref', float('nan'))),
                   margin=float(d.get('verification_margin', float('nan'))))


def _channel_dims(model, output_map):
    u0 = model.input_bounds.mean(axis=1)
    x0 = model.state_bounds.mean(axis=1)
    C = np.atleast_2d(output_map.C(x0, u0))
    D = np.atleast_2d(output_map.D(x0, u0))
    sdims = tuple(int(d) for d in np.flatnonzero(np.abs(C).sum(axis=0) > 0))
    idims = tuple(int(d) for d in np.flatnonzero(np.abs(D).sum(axis=0) > 0))
    kind = ('mixed' if sdims and idims else 'state' if sdims else 'input')
    return sdims, idims, kind


def make_tubes(candidate, model, w_bar, grid=None, *, per_channel=True,
               **refine_kw):
    """Refined tubes for the standard channels plus each scalar channel.

    Radii are exactly alpha * w_bar. Channels whose refinement is infeasible
    are skipped (absent from the result).
    """
    if w_bar < 0:
        raise ConfigurationError('w_bar must be nonnegative')
    grid = grid or GridSpec.for_model(model)
    names = list(standard_channel_maps(model))
    if per_channel:
        names += [lbl for lbl in model.state_labels + model.input_labels]
    tubes = {}
    for name in names:
        omap = channel_output_map(model, name)
        try:
            res = refine_gain(candidate, model, omap, grid, **refine_kw)
        except InfeasibleError:
            continue
        sdims, idims, kind = _channel_dims(model, omap)
        tubes[name] = Tube(channel=name, kind=kind, state_dims=sdims,
                           input_dims=idims, alpha=res.alpha, w_bar=w_bar,
                           lam_ref=res.lam_ref, mu_ref=res.mu_ref,
                           margin=min(res.margin1, res.margin2))
    return tubes


def save_tubes(tubes, path):
    with open(path, 'w') as fh:
        json.dump({name: t.to_dict() for name, t in tubes.items()}, fh,
                  indent=1)


# ---------------------------------------------------------------------------
# Constraint tightening and obstacle geometry
# ---------------------------------------------------------------------------

def tighten_box(box, tube):
    """Minkowski difference of a box and the tube's Euclidean ball.

    Each bound moves inward by the radius; an emptied interval raises a
    typed infeasible-tightening error naming the offending dimension.
    """
    box = np.atleast_2d(np.asarray(box, dtype=float))
    r = tube.radius
    out = box.copy()
    out[:, 0] += r
    out[:, 1] -= r
    for d in range(box.shape[0]):
        if out[d, 0] > out[d, 1]:
            raise TighteningInfeasibleError(
                f'tightening by radius {r:g} empties dimension {d} '
                f'(width {box[d, 1] - box[d, 0]:g})', dimension=d)
    return out


@dataclass(frozen=True)
class CircleObstacle:
    center: tuple
    radius: float

    def signed_distance(self, pts):
        pts = np.atleast_2d(pts)
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius

    def inflate(self, r):
        return CircleObstacle(self.center, self.radius + r)

    def to_dict(self):
        return {'type': 'circle', 'center': list(self.center),
                'radius': self.radius}


@dataclass(frozen=True)
class BoxObstacle:
    lo: tuple
    hi: tuple

    def signed_distance(self, pts):
        pts = np.atleast_2d(pts)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        d = np.maximum(lo - pts, pts - hi)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside

    def inflate(self, r):
        lo = tuple(v - r for v in self.lo)
        hi = tuple(v + r for v in self.hi)
        return BoxObstacle(lo, hi)

    def to_dict(self):
        return {'type': 'box', 'lo': list(self.lo), 'hi': list(self.hi)}


def obstacle_from_dict(d):
    if d.get('type') == 'circle':
        return CircleObstacle(tuple(d['center']), float(d['radius']))
    if d.get('type') == 'box':
        return BoxObstacle(tuple(d['lo']), tuple(d['hi']))
    raise ConfigurationError(f"unknown obstacle type {d.get('type')!r}")


def inflate_obstacle(obstacle, position_tube):
    """Grow an obstacle by the position-tube radius (circle or box)."""
    return obstacle.inflate(position_tube.radius)


def check_containment(trace, tube):
    """Peak channel error against the tube radius along a simulation trace.

    Returns a dict with the max ratio (error/radius) and the first violation
    time (None when contained). A zero radius passes only a zero-error trace.
    """
    x_err = trace.x - trace.x_nom
    u_err = trace.u - trace.u_nom
    err = tube.channel_error(x_err, u_err)
    r = tube.radius
    if r == 0.0:
        ratios = np.where(err <= 1e-12, 0.0, np.inf)
    else:
        ratios = err / r
    viol = np.flatnonzero(ratios > 1.0)
    return {
        'channel': tube.channel,
        'radius': r,
        'max_error': float(err.max()) if err.size else 0.0,
        'max_ratio': float(ratios.max()) if ratios.size else 0.0,
        'first_violation_time': float(trace.t[viol[0]]) if viol.size else None,
        'n_violations': int(viol.size),
    }

"""Control-affine system models with analytic Jacobians.

A model is the tuple (f, B, B_w) of `dx/dt = f(x) + B(x)u + B_w(x)w`
together with hand-coded Jacobians, state/input boxes, and a set of named
output maps `z = g(x, u)`. Three benchmark systems ship with the package:
a scalar LTI system, a planar VTOL vehicle, and a reduced 9-state quadrotor.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DimensionError

GRAVITY = 9.81


@dataclass(frozen=True)
class OutputMap:
    """Performance output `z = g(x, u)` with analytic Jacobians C, D."""

    name: str
    q: int
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    C: Callable[[np.ndarray, np.ndarray], np.ndarray]
    D: Callable[[np.ndarray, np.ndarray], np.ndarray]
    labels: tuple[str, ...] = ()

    @staticmethod
    def linear(name, Cmat, Dmat, labels=()):
        """Output map with constant C, D (covers all benchmark maps)."""
        Cmat = np.atleast_2d(np.asarray(Cmat, dtype=float))
        Dmat = np.atleast_2d(np.asarray(Dmat, dtype=float))
        if Cmat.shape[0] != Dmat.shape[0]:
            raise DimensionError('C and D must have the same number of rows.')
        q = Cmat.shape[0]
        return OutputMap(
            name=name, q=q,
            g=lambda x, u: Cmat @ x + Dmat @ u,
            C=lambda x, u: Cmat,
            D=lambda x, u: Dmat,
            labels=tuple(labels) if labels else tuple(f'z{i+1}' for i in range(q)),
        )


@dataclass(frozen=True)
class DynamicsModel:
    """Control-affine system `dx/dt = f(x) + B(x)u + B_w(x)w`.

    Jacobian conventions: `jac_f(x)` is n-by-n; `jac_b(x)` and `jac_bw(x)`
    stack the per-column Jacobians as (m, n, n) and (p, n, n) arrays, so
    `jac_b(x)[i]` is the Jacobian of the i-th column of B.

    Models are immutable and every evaluation is a pure function, so one
    instance may be shared freely across threads.
    """

    name: str
    n: int
    m: int
    p: int
    f: Callable[[np.ndarray], np.ndarray]
    B: Callable[[np.ndarray], np.ndarray]
    B_w: Callable[[np.ndarray], np.ndarray]
    jac_f: Callable[[np.ndarray], np.ndarray]
    jac_b: Callable[[np.ndarray], np.ndarray]
    jac_bw: Callable[[np.ndarray], np.ndarray]
    state_bounds: np.ndarray     # (n, 2) box X
    input_bounds: np.ndarray     # (m, 2) box U
    state_labels: tuple[str, ...] = ()
    input_labels: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)
    # States the synthesis conditions depend on, with default grid counts;
    # dims listed in `linear_dims` enter the conditions (multi)linearly,
    # so box vertices suffice for the solver. Input/disturbance counts are
    # nonempty only when the conditions depend on u (through dW/dt) or w.
    condition_state_dims: dict = field(default_factory=dict)
    condition_input_counts: dict = field(default_factory=dict)
    condition_dist_counts: dict = field(default_factory=dict)
    linear_dims: frozenset = frozenset()
    position_dims: tuple[int, ...] = ()

    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(
                f'state must have shape ({self.n},), got {x.shape}')
        if not np.all(np.isfinite(x)):
            raise DimensionError('state must be finite')
        return x

    def check_input(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.m,):
            raise DimensionError(
                f'input must have shape ({self.m},), got {u.shape}')
        return u

    def check_disturbance(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.p,):
            raise DimensionError(
                f'disturbance must have shape ({self.p},), got {w.shape}')
        return w

    def in_state_bounds(self, x, factor=1.0):
        lo, hi = self.state_bounds[:, 0], self.state_bounds[:, 1]
        mid, half = (lo + hi) / 2, (hi - lo) / 2
        return bool(np.all(np.abs(x - mid) <= factor * half + 1e-12))

    def saturate_input(self, u):
        return np.clip(u, self.input_bounds[:, 0], self.input_bounds[:, 1])


def eval_dynamics(model, x, u, w):
    """State rate `f(x) + B(x)u + B_w(x)w`."""
    x = model.check_state(x)
    u = model.check_input(u)
    w = model.check_disturbance(w)
    return model.f(x) + model.B(x) @ u + model.B_w(x) @ w


def diff_matrices(model, x, u, w):
    """Differential-dynamics matrices (A, B, B_w) at a point.

    A = df/dx + sum_i d(b_i)/dx * u_i + sum_i d(b_w,i)/dx * w_i.
    Points outside the state box are allowed but warned about.
    """
    x = model.check_state(x)
    u = model.check_input(u)
    w = model.check_disturbance(w)
    if not model.in_state_bounds(x):
        warnings.warn(f'{model.name}: state {x} outside declared bounds',
                      stacklevel=2)
    A = model.jac_f(x).copy()
    if model.m:
        A += np.einsum('i,iab->ab', u, model.jac_b(x))
    if model.p:
        A += np.einsum('i,iab->ab', w, model.jac_bw(x))
    return A, model.B(x), model.B_w(x)


def _const(mat):
    mat = np.asarray(mat, dtype=float)
    return lambda x: mat


def _zero_jac_stack(k, n):
    Z = np.zeros((k, n, n))
    return lambda x: Z


# ---------------------------------------------------------------------------
# Benchmark systems
# ---------------------------------------------------------------------------

def _scalar_lti(params):
    a = float(params.get('a', -1.0))
    model = DynamicsModel(
        name='scalar_lti', n=1, m=1, p=1,
        f=lambda x: a * x,
        B=_const([[1.0]]),
        B_w=_const([[1.0]]),
        jac_f=lambda x: np.array([[a]]),
        jac_b=_zero_jac_stack(1, 1),
        jac_bw=_zero_jac_stack(1, 1),
        state_bounds=np.array([[-5.0, 5.0]]),
        input_bounds=np.array([[-10.0, 10.0]]),
        state_labels=('x',),
        input_labels=('u',),
        params={'a': a},
        condition_state_dims={},
        linear_dims=frozenset(),
        position_dims=(0,),
    )
    maps = {
        'states': OutputMap.linear('states', np.eye(1), np.zeros((1, 1)), ('x',)),
        'inputs': OutputMap.linear('inputs', np.zeros((1, 1)), np.eye(1), ('u',)),
        'all-states-inputs': OutputMap.linear(
            'all-states-inputs', [[1.0], [0.0]], [[0.0], [1.0]], ('x', 'u')),
    }
    return model, maps


def _pvtol(params):
    m = float(params.get('m', 0.486))
    J = float(params.get('J', 0.00383))
    l = float(params.get('l', 0.25))
    g = float(params.get('gravity', GRAVITY))
    phi_max = np.deg2rad(float(params.get('phi_max_deg', 60.0)))
    phidot_max = np.deg2rad(float(params.get('phidot_max_deg', 60.0)))
    vx_max = float(params.get('vx_max', 2.0))
    vz_max = float(params.get('vz_max', 1.0))
    p_max = float(params.get('p_max', 20.0))
    u_max = float(params.get('u_max', 2.0 * m * g))

    B = np.array([[0.0, 0.0],
                  [0.0, 0.0],
                  [0.0, 0.0],
                  [0.0, 0.0],
                  [1 / m, 1 / m],
                  [l / J, -l / J]])

    def f(x):
        _, _, φ, vx, vz, dφ = x
        cφ, sφ = np.cos(φ), np.sin(φ)
        return np.array([vx * cφ - vz * sφ,
                         vx * sφ + vz * cφ,
                         dφ,
                         vz * dφ - g * sφ,
                         -vx * dφ - g * cφ,
                         0.0])

    def jac_f(x):
        _, _, φ, vx, vz, dφ = x
        cφ, sφ = np.cos(φ), np.sin(φ)
        return np.array([
            [0., 0., -vx * sφ - vz * cφ, cφ, -sφ, 0.],
            [0., 0., vx * cφ - vz * sφ, sφ, cφ, 0.],
            [0., 0., 0., 0., 0., 1.],
            [0., 0., -g * cφ, 0., dφ, vz],
            [0., 0., g * sφ, -dφ, 0., -vx],
            [0., 0., 0., 0., 0., 0.],
        ])

    def B_w(x):
        φ = x[2]
        return np.array([[0.0], [0.0], [0.0],
                         [np.cos(φ)], [-np.sin(φ)], [0.0]])

    def jac_bw(x):
        φ = x[2]
        Jw = np.zeros((1, 6, 6))
        Jw[0, 3, 2] = -np.sin(φ)
        Jw[0, 4, 2] = -np.cos(φ)
        return Jw

    model = DynamicsModel(
        name='pvtol', n=6, m=2, p=1,
        f=f, B=_const(B), B_w=B_w,
        jac_f=jac_f, jac_b=_zero_jac_stack(2, 6), jac_bw=jac_bw,
        state_bounds=np.array([[-p_max, p_max], [-p_max, p_max],
                               [-phi_max, phi_max], [-vx_max, vx_max],
                               [-vz_max, vz_max], [-phidot_max, phidot_max]]),
        input_bounds=np.array([[0.0, u_max], [0.0, u_max]]),
        state_labels=('px', 'pz', 'phi', 'vx', 'vz', 'phidot'),
        input_labels=('u1', 'u2'),
        params={'m': m, 'J': J, 'l': l, 'gravity': g},
        condition_state_dims={2: 9, 3: 9, 4: 2, 5: 2},
        condition_dist_counts={0: 5},
        linear_dims=frozenset({4, 5}),
        position_dims=(0, 1),
    )

    n, mm = 6, 2
    I, Z = np.eye(n), np.zeros
    pos = np.zeros((2, n))
    pos[0, 0] = pos[1, 1] = 1.0
    maps = {
        'states': OutputMap.linear('states', I, Z((n, mm)), model.state_labels),
        'inputs': OutputMap.linear('inputs', Z((mm, n)), np.eye(mm),
                                   model.input_labels),
        'positions': OutputMap.linear('positions', pos, Z((2, mm)),
                                      ('px', 'pz')),
        'all-states-inputs': OutputMap.linear(
            'all-states-inputs',
            np.vstack([I, Z((mm, n))]), np.vstack([Z((n, mm)), np.eye(mm)]),
            model.state_labels + model.input_labels),
        'positions-inputs': OutputMap.linear(
            'positions-inputs',
            np.vstack([pos, Z((mm, n))]), np.vstack([Z((2, mm)), np.eye(mm)]),
            ('px', 'pz') + model.input_labels),
    }
    return model, maps


def _quadrotor9(params):
    g = float(params.get('gravity', GRAVITY))
    ang_max = np.deg2rad(float(params.get('angle_max_deg', 60.0)))
    rate_max = np.deg2rad(float(params.get('rate_max_deg', 180.0)))
    taudot_max = float(params.get('taudot_max', 5.0 * g))
    tau_lo = float(params.get('tau_min', 0.5 * g))
    tau_hi = float(params.get('tau_max', 2.0 * g))
    v_max = float(params.get('v_max', 10.0))
    p_max = float(params.get('p_max', 50.0))

    # State x = [px, py, pz, vx, vy, vz, tau, phi, theta] in a North-East-Down
    # frame (z down, so hover is tau = g); u = [taudot, phidot, thetadot].
    B = np.vstack([np.zeros((6, 3)), np.eye(3)])
    B_w = np.vstack([np.zeros((3, 3)), np.eye(3), np.zeros((3, 3))])

    def f(x):
        v = x[3:6]
        τ, φ, θ = x[6:9]
        cφ, sφ, cθ, sθ = np.cos(φ), np.sin(φ), np.cos(θ), np.sin(θ)
        acc = np.array([-τ * sθ, τ * cθ * sφ, g - τ * cθ * cφ])
        return np.concatenate([v, acc, np.zeros(3)])

    def jac_f(x):
        τ, φ, θ = x[6:9]
        cφ, sφ, cθ, sθ = np.cos(φ), np.sin(φ), np.cos(θ), np.sin(θ)
        A = np.zeros((9, 9))
        A[0:3, 3:6] = np.eye(3)
        # d(acc)/d(tau, phi, theta)
        A[3, 6:9] = [-sθ, 0.0, -τ * cθ]
        A[4, 6:9] = [cθ * sφ, τ * cθ * cφ, -τ * sθ * sφ]
        A[5, 6:9] = [-cθ * cφ, τ * cθ * sφ, τ * sθ * cφ]
        return A

    model = DynamicsModel(
        name='quadrotor9', n=9, m=3, p=3,
        f=f, B=_const(B), B_w=_const(B_w),
        jac_f=jac_f, jac_b=_zero_jac_stack(3, 9), jac_bw=_zero_jac_stack(3, 9),
        state_bounds=np.array([[-p_max, p_max]] * 3 + [[-v_max, v_max]] * 3
                              + [[tau_lo, tau_hi],
                                 [-ang_max, ang_max], [-ang_max, ang_max]]),
        input_bounds=np.array([[-taudot_max, taudot_max],
                               [-rate_max, rate_max], [-rate_max, rate_max]]),
        state_labels=('px', 'py', 'pz', 'vx', 'vy', 'vz',
                      'tau', 'phi', 'theta'),
        input_labels=('taudot', 'phidot', 'thetadot'),
        params={'gravity': g},
        condition_state_dims={6: 5, 7: 5, 8: 5},
        condition_input_counts={0: 3, 1: 3, 2: 3},
        linear_dims=frozenset(),
        position_dims=(0, 1, 2),
    )

    n, mm = 9, 3
    I, Z = np.eye(n), np.zeros
    pos = np.hstack([np.eye(3), np.zeros((3, 6))])
    # Input effort weights used by the benchmark synthesis maps.
    Ru = np.diag([0.02, 0.05, 0.05])
    maps = {
        'states': OutputMap.linear('states', I, Z((n, mm)), model.state_labels),
        'inputs': OutputMap.linear('inputs', Z((mm, n)), np.eye(mm),
                                   model.input_labels),
        'positions': OutputMap.linear('positions', pos, Z((3, mm)),
                                      ('px', 'py', 'pz')),
        'all-states-inputs': OutputMap.linear(
            'all-states-inputs',
            np.vstack([I, Z((mm, n))]), np.vstack([Z((n, mm)), Ru]),
            model.state_labels + model.input_labels),
        'positions-inputs': OutputMap.linear(
            'positions-inputs',
            np.vstack([pos, Z((mm, n))]), np.vstack([Z((3, mm)), Ru]),
            ('px', 'py', 'pz') + model.input_labels),
    }
    return model, maps


def standard_channel_maps(model):
    """Unweighted refinement channels: all states, positions, all inputs."""
    n, m = model.n, model.m
    pos = np.zeros((len(model.position_dims), n))
    for r, d in enumerate(model.position_dims):
        pos[r, d] = 1.0
    return {
        'states': OutputMap.linear('states', np.eye(n), np.zeros((n, m)),
                                   model.state_labels),
        'positions': OutputMap.linear(
            'positions', pos, np.zeros((len(model.position_dims), m)),
            tuple(model.state_labels[d] for d in model.position_dims)),
        'inputs': OutputMap.linear('inputs', np.zeros((m, n)), np.eye(m),
                                   model.input_labels),
    }


def channel_output_map(model, channel):
    """Single- or multi-index channel selector, e.g. 'x3' or 'u1'."""
    maps = standard_channel_maps(model)
    if channel in maps:
        return maps[channel]
    n, m = model.n, model.m
    if channel in model.state_labels:
        C = np.zeros((1, n))
        C[0, model.state_labels.index(channel)] = 1.0
        return OutputMap.linear(channel, C, np.zeros((1, m)), (channel,))
    if channel in model.input_labels:
        D = np.zeros((1, m))
        D[0, model.input_labels.index(channel)] = 1.0
        return OutputMap.linear(channel, np.zeros((1, n)), D, (channel,))
    raise ConfigurationError(f'unknown channel {channel!r} for {model.name}')


_BUILTINS = {
    'scalar_lti': _scalar_lti,
    'pvtol': _pvtol,
    'quadrotor9': _quadrotor9,
}


def builtin_model(name, params=None):
    """Construct a benchmark model and its named output maps.

    `params` optionally overrides physical parameters and bounds (SI units,
    angles accepted in degrees only through the *_deg keys).
    """
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigurationError(
            f'unknown model {name!r}; choose from {sorted(_BUILTINS)}') from None
    return factory(dict(params or {}))


def builtin_names():
    return sorted(_BUILTINS)

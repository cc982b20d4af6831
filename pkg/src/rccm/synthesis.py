"""Metric synthesis: gain minimization over grids and the contraction baseline.

`synthesize_rccm` minimizes the certified peak-disturbance-to-peak-output
gain alpha over polynomial (W, Y) at a fixed contraction rate lambda (swept
or bisected by the caller; the product lambda*W makes the joint problem
nonconvex). `synthesize_ccm` is the disturbance-blind baseline whose tube
comes from input-to-state arguments; `scale_ccm_to_rccm` maps a baseline
certificate into the robust conditions when the relevant Killing structure
holds, which predicts nonnegative margins everywhere.

The SDPs are assembled as structured block groups whose coefficient matrices
factor into (monomial value) x (constant generator); gradient and Hessian
accumulation exploit that factorization, which is what makes the quadrotor
problem (~1400 variables, ~1000 blocks) tractable for the barrier solver.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InfeasibleError, NumericalError
from .grids import GridSpec
from .lmi import (CandidateLayout, LmiBlock, SENSE_POS, batch_condition1,
                  batch_condition2, batch_eval_W, collect_point_data)
from .metric import (MetricBasis, MetricCandidate, killing_defect,
                     killing_structure, provenance_digest)
from .models import OutputMap, standard_channel_maps
from .solver import ExplicitGroup, StructuredGroup, solve_groups

_CHUNK = 192


# ---------------------------------------------------------------------------
# Benchmark synthesis settings (basis states, degrees, eigenvalue floors)
# ---------------------------------------------------------------------------

BENCHMARKS = {
    'scalar_lti': dict(basis_states=(), degree=0, beta_lower=0.01,
                       ccm_beta_lower=0.01, enforce_c1=False,
                       ccm_constant_block=None, lam_default=1.0),
    'pvtol': dict(basis_states=(2, 3), degree=4, beta_lower=0.01,
                  ccm_beta_lower=0.01, enforce_c1=True,
                  ccm_constant_block=None, lam_default=1.4),
    'quadrotor9': dict(basis_states=(6, 7, 8), degree=3, beta_lower=0.01,
                       ccm_beta_lower=1.0, enforce_c1=False,
                       ccm_constant_block=tuple(range(6)), lam_default=3.4),
}


def benchmark_config(model):
    try:
        return dict(BENCHMARKS[model.name])
    except KeyError:
        raise ConfigurationError(
            f'no benchmark synthesis defaults for model {model.name!r}') from None


def benchmark_basis(model, degree=None):
    cfg = benchmark_config(model)
    return MetricBasis.for_model(model, cfg['basis_states'],
                                 cfg['degree'] if degree is None else degree)


# ---------------------------------------------------------------------------
# Structured block groups
# ---------------------------------------------------------------------------

def _pack_arrays(pairs):
    ia = np.array([a for a, _ in pairs], dtype=int)
    ib = np.array([b for _, b in pairs], dtype=int)
    return ia, ib, ia == ib


def _sym_outer_gens(Pleft, U, ia, ib, diag):
    """Transformed generators <Pleft E_s U'> over packed symmetric entries.

    Pleft, U are (X, d, n); returns (X, S, d*d).
    """
    T = np.einsum('xda,xeb->xabde', Pleft, U)
    T = T + T.transpose(0, 1, 2, 4, 3)
    G = T[:, ia, ib] + T[:, ib, ia]
    G[:, diag] *= 0.5
    X, S, d, _ = G.shape
    return G.reshape(X, S, d * d)


def _y_gens(Yleft, U, sign):
    """Generators sign*(yleft_i u_a' + u_a yleft_i'), (X, m*n, d*d)."""
    T = np.einsum('xdi,xea->xiade', Yleft, U)
    T = T + T.transpose(0, 1, 2, 4, 3)
    X, m, n, d, _ = T.shape
    return sign * T.reshape(X, m * n, d * d)


def _pack_sym_kernel(M, ia, ib, diag):
    """<K, E_s> for symmetric kernels K stacked as (J, n, n) -> (J, S)."""
    out = M[:, ia, ib].copy()
    out[:, ~diag] *= 2.0
    return out


class _SynthGroupBase(StructuredGroup):
    """Common scatter logic for groups over (W, Y, scalars) variables."""

    def _init_ids(self, layout, *, with_y=True):
        self.layout = layout
        self._ia, self._ib, self._diag = _pack_arrays(layout.pairs)
        self._J = layout.basis.n_basis
        self._S = len(layout.pairs)
        wflat = layout.W_ids.reshape(-1)
        self._w_active = wflat >= 0
        self._w_gids = wflat[self._w_active]
        self._y_gids = layout.Y_ids.reshape(-1) if with_y else None

    def _scatter_w(self, out, packed, sign=1.0):
        out[self._w_gids] += sign * packed.reshape(-1)[self._w_active]

    def _scatter_hessian(self, H, Hww, Hwy, Hyy, scal):
        """scal: list of (var_id, Hws (J*S,), Hys (J*m*n,), hss dict)."""
        act = self._w_active
        gw, gy = self._w_gids, self._y_gids
        H[np.ix_(gw, gw)] += Hww[np.ix_(act, act)]
        if gy is not None and Hwy is not None:
            blk = Hwy[act, :]
            H[np.ix_(gw, gy)] += blk
            H[np.ix_(gy, gw)] += blk.T
            H[np.ix_(gy, gy)] += Hyy
        for sid, hws, hys, diag_terms in scal:
            if hws is not None:
                v = hws[act]
                H[gw, sid] += v
                H[sid, gw] += v
            if hys is not None and gy is not None:
                H[gy, sid] += hys
                H[sid, gy] += hys
            for sid2, val in diag_terms.items():
                H[sid, sid2] += val


class _CondGroup(_SynthGroupBase):
    """Contraction blocks: dW/dt - <A W + B Y> - rate*W (optionally bordered
    by the disturbance columns with the -mu I corner)."""

    def __init__(self, model, layout, rate, X, U, Wd, *, eps, border,
                 tag='cond1'):
        super().__init__()
        A, B, Bw, xdot = collect_point_data(model, X, U, Wd)
        self.A, self.B, self.Bw = A, B, Bw
        self.mvals = layout.basis.eval(X)
        self.mdot = layout.basis.flow_coefficients(X, xdot)
        self.rate = float(rate)
        self.eps = float(eps)
        self.border = border
        self.n = model.n
        self.p = model.p if border else 0
        self.dim = self.n + self.p
        self.count = X.shape[0]
        self.tag = tag
        self._X = X
        self._init_ids(layout)
        self.mu_id = layout.mu_id if border else -1

    def labels(self):
        return [f'{self.tag}#{i} x={np.round(self._X[i], 3).tolist()}'
                for i in range(self.count)]

    def values_raw(self, y):
        n = self.n
        W = self.layout.W_stack(y)
        Yc = self.layout.Y_stack(y)
        Wx = np.einsum('xj,jab->xab', self.mvals, W)
        Wdot = np.einsum('xj,jab->xab', self.mdot, W)
        Yx = np.einsum('xj,jab->xab', self.mvals, Yc)
        AW = self.A @ Wx
        BY = self.B @ Yx
        TL = Wdot - (AW + np.swapaxes(AW, 1, 2) + BY + np.swapaxes(BY, 1, 2)) \
            - self.rate * Wx - self.eps * np.eye(n)
        if not self.border:
            return TL
        G = np.zeros((self.count, self.dim, self.dim))
        G[:, :n, :n] = TL
        G[:, :n, n:] = -self.Bw
        G[:, n:, :n] = -np.swapaxes(self.Bw, 1, 2)
        mu = y[self.mu_id]
        idx = np.arange(n, self.dim)
        G[:, idx, idx] = mu - self.eps
        return G

    def accumulate_inner(self, P, out, sign=1.0):
        n = self.n
        Pn = P[:, :n, :n]
        PA = Pn @ self.A
        Km = -(PA + np.swapaxes(PA, 1, 2)) - self.rate * Pn
        MW = np.einsum('xj,xab->jab', self.mvals, Km) \
            + np.einsum('xj,xab->jab', self.mdot, Pn)
        self._scatter_w(out, _pack_sym_kernel(MW, self._ia, self._ib, self._diag),
                        sign)
        TY = np.einsum('xbi,xba->xia', self.B, Pn)
        MY = -2.0 * np.einsum('xj,xia->jia', self.mvals, TY)
        out[self._y_gids] += sign * MY.reshape(-1)
        if self.border:
            out[self.mu_id] += sign * float(
                np.trace(P[:, n:, n:], axis1=-2, axis2=-1).sum())

    def accumulate_hessian(self, L, Li, Sinv, H):
        n, J, S = self.n, self._J, self._S
        SY = self.layout.m * n
        Hww = np.zeros((J * S, J * S))
        Hwy = np.zeros((J * S, J * SY))
        Hyy = np.zeros((J * SY, J * SY))
        hwm = np.zeros(J * S)
        hym = np.zeros(J * SY)
        hmm = 0.0
        for lo in range(0, self.count, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, self.count))
            Lc = Li[sl]
            U = Lc[:, :, :n]
            UA = U @ self.A[sl]
            P1 = -(UA + (self.rate / 2.0) * U)
            Gm = _sym_outer_gens(P1, U, self._ia, self._ib, self._diag)
            Gd = _sym_outer_gens(0.5 * U, U, self._ia, self._ib, self._diag)
            GY = _y_gens(U @ self.B[sl], U, -1.0)
            parts = [Gm, Gd, GY]
            if self.border:
                R = Lc[:, :, n:]
                parts.append((R @ np.swapaxes(R, 1, 2)).reshape(
                    R.shape[0], 1, -1))
            Gall = np.concatenate(parts, axis=1)
            Gam = Gall @ np.swapaxes(Gall, 1, 2)
            CW = np.stack([self.mvals[sl], self.mdot[sl]], axis=2)
            mY = self.mvals[sl]
            Gww = Gam[:, :2 * S, :2 * S].reshape(-1, 2, S, 2, S)
            Hww += np.einsum('xjt,xtsur,xku->jskr', CW, Gww, CW,
                             optimize=True).reshape(J * S, J * S)
            Gwy = Gam[:, :2 * S, 2 * S:2 * S + SY].reshape(-1, 2, S, SY)
            Hwy += np.einsum('xjt,xtsr,xk->jskr', CW, Gwy, mY,
                             optimize=True).reshape(J * S, J * SY)
            Gyy = Gam[:, 2 * S:2 * S + SY, 2 * S:2 * S + SY]
            Hyy += np.einsum('xj,xsr,xk->jskr', mY, Gyy, mY,
                             optimize=True).reshape(J * SY, J * SY)
            if self.border:
                gmu_w = Gam[:, :2 * S, -1].reshape(-1, 2, S)
                hwm += np.einsum('xjt,xts->js', CW, gmu_w).reshape(-1)
                hym += np.einsum('xj,xs->js', mY,
                                 Gam[:, 2 * S:2 * S + SY, -1]).reshape(-1)
                hmm += float(Gam[:, -1, -1].sum())
        scal = []
        if self.border:
            scal.append((self.mu_id, hwm, hym, {self.mu_id: hmm}))
        self._scatter_hessian(H, Hww, Hwy, Hyy, scal)


class _GainGroup(_SynthGroupBase):
    """Gain blocks [[rate*W, (CW+DY)'], [CW+DY, alpha I_q]] (the decoupled
    (alpha-mu) middle identity is imposed once as a scalar block)."""

    def __init__(self, output_map, model, layout, rate, X, *, eps):
        super().__init__()
        self.n = model.n
        self.q = output_map.q
        self.dim = self.n + self.q
        self.count = X.shape[0]
        u0 = model.input_bounds.mean(axis=1)
        self.C = np.stack([np.atleast_2d(output_map.C(x, u0)) for x in X])
        self.D = np.stack([np.atleast_2d(output_map.D(x, u0)) for x in X])
        self.mvals = layout.basis.eval(X)
        self.rate = float(rate)
        self.eps = float(eps)
        self.alpha_id = layout.alpha_id
        self.map_name = output_map.name
        self._X = X
        self._init_ids(layout)

    def labels(self):
        return [f'cond2[{self.map_name}]#{i} x={np.round(self._X[i], 3).tolist()}'
                for i in range(self.count)]

    def values_raw(self, y):
        n = self.n
        W = self.layout.W_stack(y)
        Yc = self.layout.Y_stack(y)
        Wx = np.einsum('xj,jab->xab', self.mvals, W)
        Yx = np.einsum('xj,jab->xab', self.mvals, Yc)
        CWDY = self.C @ Wx + self.D @ Yx
        alpha = y[self.alpha_id]
        G = np.zeros((self.count, self.dim, self.dim))
        G[:, :n, :n] = self.rate * Wx - self.eps * np.eye(n)
        G[:, n:, :n] = CWDY
        G[:, :n, n:] = np.swapaxes(CWDY, 1, 2)
        idx = np.arange(n, self.dim)
        G[:, idx, idx] = alpha - self.eps
        return G

    def accumulate_inner(self, P, out, sign=1.0):
        n = self.n
        Pn = P[:, :n, :n]
        Pqn = P[:, n:, :n]
        CtP = np.einsum('xqa,xqb->xab', self.C, Pqn)
        Km = self.rate * Pn + CtP + np.swapaxes(CtP, 1, 2)
        MW = np.einsum('xj,xab->jab', self.mvals, Km)
        self._scatter_w(out, _pack_sym_kernel(MW, self._ia, self._ib, self._diag),
                        sign)
        TY = np.einsum('xqi,xqa->xia', self.D, Pqn)
        MY = 2.0 * np.einsum('xj,xia->jia', self.mvals, TY)
        out[self._y_gids] += sign * MY.reshape(-1)
        out[self.alpha_id] += sign * float(
            np.trace(P[:, n:, n:], axis1=-2, axis2=-1).sum())

    def accumulate_hessian(self, L, Li, Sinv, H):
        n, J, S = self.n, self._J, self._S
        SY = self.layout.m * n
        Hww = np.zeros((J * S, J * S))
        Hwy = np.zeros((J * S, J * SY))
        Hyy = np.zeros((J * SY, J * SY))
        hwa = np.zeros(J * S)
        hya = np.zeros(J * SY)
        haa = 0.0
        for lo in range(0, self.count, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, self.count))
            Lc = Li[sl]
            U = Lc[:, :, :n]
            R = Lc[:, :, n:]
            P2 = R @ self.C[sl] + (self.rate / 2.0) * U
            Gw = _sym_outer_gens(P2, U, self._ia, self._ib, self._diag)
            GY = _y_gens(R @ self.D[sl], U, 1.0)
            Ga = (R @ np.swapaxes(R, 1, 2)).reshape(R.shape[0], 1, -1)
            Gall = np.concatenate([Gw, GY, Ga], axis=1)
            Gam = Gall @ np.swapaxes(Gall, 1, 2)
            mY = self.mvals[sl]
            Hww += np.einsum('xj,xsr,xk->jskr', mY, Gam[:, :S, :S], mY,
                             optimize=True).reshape(J * S, J * S)
            Hwy += np.einsum('xj,xsr,xk->jskr', mY, Gam[:, :S, S:S + SY], mY,
                             optimize=True).reshape(J * S, J * SY)
            Hyy += np.einsum('xj,xsr,xk->jskr', mY, Gam[:, S:S + SY, S:S + SY],
                             mY, optimize=True).reshape(J * SY, J * SY)
            hwa += np.einsum('xj,xs->js', mY, Gam[:, :S, -1]).reshape(-1)
            hya += np.einsum('xj,xs->js', mY,
                             Gam[:, S:S + SY, -1]).reshape(-1)
            haa += float(Gam[:, -1, -1].sum())
        scal = [(self.alpha_id, hwa, hya, {self.alpha_id: haa})]
        self._scatter_hessian(H, Hww, Hwy, Hyy, scal)


class _BoxGroup(StructuredGroup):
    """Scalar box |y_k| <= cap for a set of variables, as 1x1 blocks.

    Output maps with D = 0 only constrain the symmetric part of B Y, so the
    antisymmetric Y directions are unbounded; the box keeps the barrier's
    analytic center well-defined (cap is far above any optimal coefficient).
    """

    def __init__(self, ids, cap, *, eps, tag='box'):
        super().__init__()
        self.ids = np.asarray(ids, dtype=int).reshape(-1)
        self.cap = float(cap)
        self.eps = float(eps)
        self.dim = 1
        self.count = 2 * len(self.ids)
        self.tag = tag

    def labels(self):
        out = []
        for k in self.ids:
            out.append(f'{self.tag} var{k} <= {self.cap:g}')
            out.append(f'{self.tag} var{k} >= {-self.cap:g}')
        return out

    def values_raw(self, y):
        v = y[self.ids]
        stacked = np.empty(self.count)
        stacked[0::2] = self.cap - v - self.eps
        stacked[1::2] = v + self.cap - self.eps
        return stacked.reshape(-1, 1, 1)

    def accumulate_inner(self, P, out, sign=1.0):
        p = P.reshape(-1)
        np.add.at(out, self.ids, sign * (p[1::2] - p[0::2]))

    def accumulate_hessian(self, L, Li, Sinv, H):
        s = Sinv.reshape(-1)
        np.add.at(H, (self.ids, self.ids), s[0::2] ** 2 + s[1::2] ** 2)


class _BoundGroup(_SynthGroupBase):
    """Eigenvalue bounds on W(x): floor W >= b*I, cap W <= b*I, or a
    variable cap W <= beta_var*I."""

    def __init__(self, model, layout, X, *, eps, bound=None, upper=False,
                 bound_var=-1):
        super().__init__()
        self.n = model.n
        self.dim = self.n
        self.count = X.shape[0]
        self.mvals = layout.basis.eval(X)
        self.eps = float(eps)
        self.sign = -1.0 if upper else 1.0
        self.bound = bound
        self.bound_var = bound_var
        self.upper = upper
        self._X = X
        self._init_ids(layout)

    def labels(self):
        kind = 'cap' if self.upper else 'floor'
        return [f'{kind}#{i} x={np.round(self._X[i], 3).tolist()}'
                for i in range(self.count)]

    def values_raw(self, y):
        W = self.layout.W_stack(y)
        Wx = np.einsum('xj,jab->xab', self.mvals, W)
        shift = -self.eps
        if self.bound is not None:
            shift += -self.sign * self.bound
        G = self.sign * Wx + shift * np.eye(self.n)
        if self.bound_var >= 0:
            G = G + y[self.bound_var] * np.eye(self.n)
        return G

    def accumulate_inner(self, P, out, sign=1.0):
        MW = self.sign * np.einsum('xj,xab->jab', self.mvals, P)
        self._scatter_w(out, _pack_sym_kernel(MW, self._ia, self._ib, self._diag),
                        sign)
        if self.bound_var >= 0:
            out[self.bound_var] += sign * float(
                np.trace(P, axis1=-2, axis2=-1).sum())

    def accumulate_hessian(self, L, Li, Sinv, H):
        J, S = self._J, self._S
        Hww = np.zeros((J * S, J * S))
        hwb = np.zeros(J * S)
        hbb = 0.0
        for lo in range(0, self.count, _CHUNK):
            sl = slice(lo, min(lo + _CHUNK, self.count))
            U = Li[sl]
            Gw = _sym_outer_gens(self.sign * 0.5 * U, U, self._ia, self._ib,
                                 self._diag)
            if self.bound_var >= 0:
                Gb = (U @ np.swapaxes(U, 1, 2)).reshape(U.shape[0], 1, -1)
                Gall = np.concatenate([Gw, Gb], axis=1)
            else:
                Gall = Gw
            Gam = Gall @ np.swapaxes(Gall, 1, 2)
            mY = self.mvals[sl]
            Hww += np.einsum('xj,xsr,xk->jskr', mY, Gam[:, :S, :S], mY,
                             optimize=True).reshape(J * S, J * S)
            if self.bound_var >= 0:
                hwb += np.einsum('xj,xs->js', mY, Gam[:, :S, -1]).reshape(-1)
                hbb += float(Gam[:, -1, -1].sum())
        scal = []
        if self.bound_var >= 0:
            scal.append((self.bound_var, hwb, None, {self.bound_var: hbb}))
        self._scatter_hessian(H, Hww, None, None, scal)


# ---------------------------------------------------------------------------
# RCCM synthesis
# ---------------------------------------------------------------------------

def _build_w_mask(model, basis, layout_n, enforce_c1, constant_block):
    from .lmi import sym_pairs
    mask = np.ones((basis.n_basis, len(sym_pairs(layout_n))), dtype=bool)
    if enforce_c1:
        cons = killing_structure(model, basis, 'C1')
        if cons.conflicts_with_basis:
            raise ConfigurationError(
                'Killing condition over the input columns eliminates every '
                f'non-constant monomial of the basis (kills dims '
                f'{cons.killed_dims}); grid the input rates instead')
        m2 = CandidateLayout.mask_killed_monomials(basis, layout_n,
                                                   cons.killed_monomials)
        mask &= m2
    if constant_block:
        mask &= CandidateLayout.mask_constant_block(basis, layout_n,
                                                    constant_block)
    return mask


def _flag_degenerate_grid(model, grid, notes):
    declared = set(model.condition_state_dims)
    covered = {d for d, _ in grid.state_axes}
    if not declared <= covered:
        notes['unverifiable_between_grid_points'] = True
        notes['missing_grid_dims'] = sorted(declared - covered)


def synthesize_rccm(model, output_map, basis, lam, grid=None, *,
                    beta_lower=None, enforce_c1=None, constant_block=None,
                    eps=1e-6, cap=1e4, y_box=1e4, tol_gap_rel=1e-7,
                    tol_gap_abs=1e-9, max_newton=900, verify=True,
                    verify_factor=2, warm_start=None):
    """Minimize the certified gain alpha at fixed lambda over the grid.

    Returns a MetricCandidate whose conditions hold with margin >= eps/2 at
    every solver grid point; an independent eigenvalue verification on a
    `verify_factor`-times denser grid is run afterwards and failure demotes
    the candidate (a warning plus notes entry) rather than silently passing.
    """
    if lam <= 0:
        raise ConfigurationError('lambda must be positive')
    if output_map.q < 1:
        raise ConfigurationError('output map must have at least one channel')
    cfg = BENCHMARKS.get(model.name, {})
    if beta_lower is None:
        beta_lower = cfg.get('beta_lower', 0.01)
    if enforce_c1 is None:
        enforce_c1 = cfg.get('enforce_c1', False)
    grid = grid or GridSpec.for_model(model)
    if grid.n_condition_points < 1:
        raise ConfigurationError('grid is empty')

    mask = _build_w_mask(model, basis, model.n, enforce_c1, constant_block)
    layout = CandidateLayout(basis, model.n, model.m, model.p, w_mask=mask)
    X1, U1, W1 = grid.condition_points(model, vertex_reduce=True)
    Xm = grid.metric_points(model, basis)

    groups = [
        _CondGroup(model, layout, lam, X1, U1, W1, eps=eps, border=True),
        _GainGroup(output_map, model, layout, lam, Xm, eps=eps),
        _BoundGroup(model, layout, Xm, eps=eps, bound=beta_lower),
        _BoundGroup(model, layout, Xm, eps=eps, bound=cap, upper=True),
        _BoxGroup(layout.Y_ids, y_box, eps=eps, tag='ybox'),
        ExplicitGroup([LmiBlock(np.zeros((1, 1)),
                                [(layout.alpha_id, np.eye(1)),
                                 (layout.mu_id, -np.eye(1))],
                                SENSE_POS, 'alpha-mu')], eps),
    ]
    c = np.zeros(layout.n_vars)
    c[layout.alpha_id] = 1.0

    if warm_start is not None:
        y0 = warm_start
    else:
        W0 = np.zeros((basis.n_basis, model.n, model.n))
        W0[0] = max(1.0, 10.0 * beta_lower) * np.eye(model.n)
        y0 = layout.pack(W0, np.zeros((basis.n_basis, model.m, model.n)),
                         mu=1.0, alpha=1.0)

    t_start = time.perf_counter()
    res = solve_groups(groups, c, layout.n_vars, y0=y0,
                       tol_gap_rel=tol_gap_rel, tol_gap_abs=tol_gap_abs,
                       max_newton=max_newton,
                       name=f'rccm[{model.name}/{output_map.name}] lam={lam:g}')
    Wc, Yc, mu, alpha = layout.unpack(res.y)

    notes = {}
    _flag_degenerate_grid(model, grid, notes)
    if not res.verified:
        notes['solver_margin_warning'] = res.worst_blocks(3)
    candidate = MetricCandidate(
        basis, Wc, Yc, lam=float(lam), mu=mu, alpha=alpha,
        beta_lower=float(beta_lower), output=output_map.name,
        provenance={
            'model': model.name,
            'grid': grid.describe(),
            'lambda': float(lam),
            'eps': eps,
            'solver': {'iterations': res.iterations, 'gap': res.gap,
                       'wall_time_s': round(time.perf_counter() - t_start, 3),
                       'log_digest': provenance_digest(res.log)},
        },
        notes=notes)
    if verify:
        report = verify_candidate(candidate, model, output_map, grid,
                                  factor=verify_factor)
        notes['verification'] = report
        if not report['ok']:
            notes['demoted'] = True
            warnings.warn(
                f'candidate failed eigenvalue verification on the denser grid '
                f"(cond1 min {report['cond1_min']:.3e}, "
                f"cond2 min {report['cond2_min']:.3e})")
    return candidate


def verify_candidate(candidate, model, output_map, grid, factor=2):
    """Independent eigenvalue check of both conditions on a denser grid.

    Margins are raw distances to the nonstrict inequalities (no eps);
    `ok` requires both conditions nonnegative everywhere. The floor margin
    is reported separately (it is instrumental, not part of the gain
    certificate).
    """
    fine = grid.refine(factor)
    X1, U1, W1 = fine.condition_points(model)
    F1 = batch_condition1(model, candidate.basis, candidate.W_coeffs,
                          candidate.Y_coeffs, candidate.mu, candidate.lam,
                          X1, U1, W1)
    m1 = -np.linalg.eigvalsh(F1)[:, -1]
    Xm = fine.metric_points(model, candidate.basis)
    F2 = batch_condition2(output_map, model, candidate.basis,
                          candidate.W_coeffs, candidate.Y_coeffs,
                          candidate.mu, candidate.alpha, candidate.lam, Xm)
    m2 = np.linalg.eigvalsh(F2)[:, 0]
    Wv = batch_eval_W(candidate.basis, candidate.W_coeffs, Xm)
    floor = np.linalg.eigvalsh(Wv)[:, 0] - candidate.beta_lower
    i1, i2 = int(np.argmin(m1)), int(np.argmin(m2))
    return {
        'ok': bool(m1.min() >= 0.0 and m2.min() >= 0.0),
        'cond1_min': float(m1.min()),
        'cond2_min': float(m2.min()),
        'floor_min': float(floor.min()),
        'n_points_cond1': int(len(m1)),
        'n_points_cond2': int(len(m2)),
        'worst_cond1_x': np.round(X1[i1], 4).tolist(),
        'worst_cond2_x': np.round(Xm[i2], 4).tolist(),
        'factor': factor,
    }


# ---------------------------------------------------------------------------
# CCM baseline (disturbance-blind contraction + ISS tube)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CcmCandidate:
    """Baseline contraction metric with eigenvalue range certified on the grid.

    The tube gain is alpha_hat = sqrt(beta_upper/beta_lower) / lam_hat *
    sup over the grid of the largest singular value of B_w.
    """

    basis: MetricBasis
    W_coeffs: np.ndarray
    Y_coeffs: np.ndarray
    lam_hat: float
    beta_lower: float
    beta_upper: float
    sigma_max: float
    alpha_hat: float
    provenance: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def as_metric_candidate(self):
        """Repackage for the geodesic controller (K = Y W^-1 is scale-free)."""
        return MetricCandidate(self.basis, self.W_coeffs, self.Y_coeffs,
                               lam=self.lam_hat, mu=float('nan'),
                               alpha=self.alpha_hat,
                               beta_lower=self.beta_lower, output='states',
                               provenance=dict(self.provenance),
                               notes={'kind': 'ccm-baseline'})


def synthesize_ccm(model, basis, lam_hat, grid=None, *, beta_lower=None,
                   constant_block=None, eps=1e-6, cap=1e4, y_box=1e4,
                   tol_gap_rel=1e-7, tol_gap_abs=1e-9, max_newton=900,
                   verify=True, verify_factor=2):
    """Baseline search: minimize the certified eigenvalue spread of W.

    The contraction condition is evaluated on the nominal (disturbance-free)
    dynamics. The condition is positively homogeneous in (W, Y), so pinning
    the floor at beta_lower and minimizing the cap beta_upper minimizes the
    ratio directly; certified bounds are re-measured from the returned W.
    """
    if lam_hat <= 0:
        raise ConfigurationError('lambda must be positive')
    cfg = BENCHMARKS.get(model.name, {})
    if beta_lower is None:
        beta_lower = cfg.get('ccm_beta_lower', 1.0)
    if constant_block is None:
        constant_block = cfg.get('ccm_constant_block')
    grid = (grid or GridSpec.for_model(model)).without_disturbance()

    mask = _build_w_mask(model, basis, model.n, False, constant_block)
    layout = CandidateLayout(basis, model.n, model.m, model.p, w_mask=mask,
                             with_mu=False, with_alpha=False,
                             extra=('beta_upper',))
    bu = layout.extra_ids['beta_upper']
    X1, U1, W1 = grid.condition_points(model, vertex_reduce=True)
    Xm = grid.metric_points(model, basis)

    groups = [
        _CondGroup(model, layout, 2.0 * lam_hat, X1, U1, W1, eps=eps,
                   border=False, tag='ccm-cond'),
        _BoundGroup(model, layout, Xm, eps=eps, bound=beta_lower),
        _BoundGroup(model, layout, Xm, eps=eps, upper=True, bound_var=bu),
        _BoxGroup(layout.Y_ids, y_box, eps=eps, tag='ybox'),
        ExplicitGroup([LmiBlock(np.array([[-beta_lower]]),
                                [(bu, np.eye(1))], SENSE_POS, 'beta-order'),
                       LmiBlock(np.array([[cap]]), [(bu, -np.eye(1))],
                                SENSE_POS, 'beta-cap')], eps),
    ]
    c = np.zeros(layout.n_vars)
    c[bu] = 1.0
    W0 = np.zeros((basis.n_basis, model.n, model.n))
    W0[0] = 2.0 * beta_lower * np.eye(model.n)
    y0 = layout.pack(W0, np.zeros((basis.n_basis, model.m, model.n)), mu=0.0)
    y0[bu] = 4.0 * beta_lower

    t_start = time.perf_counter()
    res = solve_groups(groups, c, layout.n_vars, y0=y0,
                       tol_gap_rel=tol_gap_rel, tol_gap_abs=tol_gap_abs,
                       max_newton=max_newton,
                       name=f'ccm[{model.name}] lam={lam_hat:g}')
    Wc, Yc, _, _ = layout.unpack(res.y)

    # Certify the eigenvalue range and the disturbance column norm on the grid.
    Wv = batch_eval_W(basis, Wc, Xm)
    eigs = np.linalg.eigvalsh(Wv)
    beta_lo = float(eigs[:, 0].min())
    beta_hi = float(eigs[:, -1].max())
    Xall, Uall, Wall = grid.condition_points(model)
    sigma = max(float(np.linalg.svd(model.B_w(x), compute_uv=False)[0])
                for x in Xall)
    alpha_hat = np.sqrt(beta_hi / beta_lo) / lam_hat * sigma

    notes = {}
    if verify:
        fine = grid.refine(verify_factor)
        Xf, Uf, Wf = fine.condition_points(model)
        F1 = batch_condition1(model, basis, Wc, Yc, 0.0, 2.0 * lam_hat,
                              Xf, Uf, Wf)
        m1 = -np.linalg.eigvalsh(F1[:, :model.n, :model.n])[:, -1]
        notes['verification'] = {'cond_min': float(m1.min()),
                                 'ok': bool(m1.min() >= 0.0),
                                 'n_points': int(len(m1))}
        if not notes['verification']['ok']:
            notes['demoted'] = True
            warnings.warn('baseline metric failed eigenvalue verification '
                          'on the denser grid')
    return CcmCandidate(
        basis, Wc, Yc, lam_hat=float(lam_hat), beta_lower=beta_lo,
        beta_upper=beta_hi, sigma_max=sigma, alpha_hat=float(alpha_hat),
        provenance={
            'model': model.name, 'grid': grid.describe(),
            'lambda_hat': float(lam_hat), 'floor': beta_lower, 'eps': eps,
            'solver': {'iterations': res.iterations, 'gap': res.gap,
                       'wall_time_s': round(time.perf_counter() - t_start, 3),
                       'log_digest': provenance_digest(res.log)},
        },
        notes=notes)


def scale_ccm_to_rccm(ccm, model, grid=None):
    """Map a baseline certificate into the robust conditions (identity output).

    Requires the Killing structure over both the input and disturbance
    columns; refusal names the violating column. The scaled tuple is
    W = a*What, Y = a*Yhat, lambda = lam_hat, alpha = mu = alpha_hat with
    a = sigma_max / sqrt(beta_upper*beta_lower); the returned report carries
    the raw condition margins over the grid (predicted nonnegative).
    """
    grid = grid or GridSpec.for_model(model)
    scale_ref = 1.0 + float(np.abs(ccm.W_coeffs).max())
    for which in ('C2', 'C3'):
        defects = killing_defect(model, ccm.basis, ccm.W_coeffs, which)
        bad = np.flatnonzero(defects > 1e-7 * scale_ref)
        if bad.size:
            from .errors import StructuralError
            raise StructuralError(
                f'{which} fails for column {int(bad[0])} '
                f'(residual {defects[bad[0]]:.3e}); the scaled tuple is not '
                'certified', column=int(bad[0]))

    a = ccm.sigma_max / np.sqrt(ccm.beta_upper * ccm.beta_lower)
    cand = MetricCandidate(
        ccm.basis, a * ccm.W_coeffs, a * ccm.Y_coeffs,
        lam=ccm.lam_hat, mu=ccm.alpha_hat, alpha=ccm.alpha_hat,
        beta_lower=a * ccm.beta_lower, output='states',
        provenance={'model': model.name, 'scaled_from': 'ccm',
                    'a': float(a), **{k: v for k, v in ccm.provenance.items()
                                      if k != 'solver'}},
        notes={'kind': 'ccm-scaled'})

    X1, U1, W1 = grid.condition_points(model)
    F1 = batch_condition1(model, cand.basis, cand.W_coeffs, cand.Y_coeffs,
                          cand.mu, cand.lam, X1, U1, W1)
    m1 = -np.linalg.eigvalsh(F1)[:, -1]
    ident = OutputMap.linear('states', np.eye(model.n),
                             np.zeros((model.n, model.m)))
    Xm = grid.metric_points(model, cand.basis)
    F2 = batch_condition2(ident, model, cand.basis, cand.W_coeffs,
                          cand.Y_coeffs, cand.mu, cand.alpha, cand.lam, Xm)
    m2 = np.linalg.eigvalsh(F2)[:, 0]
    report = {
        'a': float(a),
        'alpha': float(cand.alpha),
        'cond1_min': float(m1.min()),
        'cond2_min': float(m2.min()),
        'ok': bool(m1.min() >= -1e-9 and m2.min() >= -1e-9),
    }
    return cand, report


# ---------------------------------------------------------------------------
# Lambda sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list
    candidates: dict
    best_lambda: float | None

    def as_csv_rows(self):
        header = ['lambda', 'alpha_all', 'alpha_pos', 'alpha_input', 'status']
        out = [header]
        for r in self.rows:
            out.append([r['lambda'], r['alpha_all'], r['alpha_pos'],
                        r['alpha_input'], r['status']])
        return out


def sweep_lambda(model, output_map, basis, lam_list, grid=None, *,
                 refine_channels=True, keep_candidates=True, **synth_kw):
    """One synthesis per lambda with per-channel refined gains.

    Entries never abort the sweep; failures are recorded in the row status.
    The best lambda is the one minimizing the refined position-channel gain.
    """
    from .tubes import refine_gain

    lam_list = [float(v) for v in lam_list]
    if not lam_list:
        raise ConfigurationError('lambda list is empty')
    if any(v <= 0 for v in lam_list) or sorted(lam_list) != lam_list:
        raise ConfigurationError('lambda list must be positive and sorted')
    grid = grid or GridSpec.for_model(model)
    channels = standard_channel_maps(model)

    rows, candidates = [], {}
    for lam in lam_list:
        row = {'lambda': lam, 'alpha_all': float('nan'),
               'alpha_pos': float('nan'), 'alpha_input': float('nan'),
               'status': 'ok'}
        try:
            cand = synthesize_rccm(model, output_map, basis, lam, grid,
                                   **synth_kw)
            if keep_candidates:
                candidates[lam] = cand
            if refine_channels:
                row['alpha_all'] = refine_gain(cand, model, channels['states'],
                                               grid)[0]
                row['alpha_pos'] = refine_gain(cand, model,
                                               channels['positions'], grid)[0]
                row['alpha_input'] = refine_gain(cand, model,
                                                 channels['inputs'], grid)[0]
            else:
                row['alpha_all'] = cand.alpha
        except InfeasibleError:
            row['status'] = 'infeasible'
        except NumericalError as exc:
            row['status'] = f'failed: {type(exc).__name__}'
        rows.append(row)

    finite = [r for r in rows if np.isfinite(r['alpha_pos'])]
    best = min(finite, key=lambda r: r['alpha_pos'])['lambda'] if finite else None
    return SweepResult(rows=rows, candidates=candidates, best_lambda=best)


def sweep_lambda_ccm(model, basis, lam_list, grid=None, **synth_kw):
    """Baseline sweep; the tube gain covers all states (positions inherit it)."""
    lam_list = [float(v) for v in lam_list]
    if not lam_list:
        raise ConfigurationError('lambda list is empty')
    rows, candidates = [], {}
    for lam in lam_list:
        row = {'lambda': lam, 'alpha_all': float('nan'),
               'alpha_pos': float('nan'), 'alpha_input': float('nan'),
               'status': 'ok'}
        try:
            ccm = synthesize_ccm(model, basis, lam, grid, **synth_kw)
            candidates[lam] = ccm
            row['alpha_all'] = ccm.alpha_hat
            row['alpha_pos'] = ccm.alpha_hat
        except InfeasibleError:
            row['status'] = 'infeasible'
        except NumericalError as exc:
            row['status'] = f'failed: {type(exc).__name__}'
        rows.append(row)
    finite = [r for r in rows if np.isfinite(r['alpha_pos'])]
    best = min(finite, key=lambda r: r['alpha_pos'])['lambda'] if finite else None
    return SweepResult(rows=rows, candidates=candidates, best_lambda=best)

"""Affine LMI blocks and their assembly from metric synthesis conditions.

Every constraint is an affine symmetric-matrix function of a global decision
vector y: F(y) = F0 + sum_k y_k F_k, required to satisfy either
F(y) <= -eps*I (sense 'neg') or F(y) >= eps*I (sense 'pos'). The strictness
margin eps buys slack between grid points; the raw margin of a block is its
distance to the corresponding nonstrict inequality.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .metric import MetricBasis
from .models import diff_matrices, eval_dynamics

SENSE_NEG = 'neg'   # F(y) <= -eps I
SENSE_POS = 'pos'   # F(y) >= +eps I


def min_eig(mat):
    """Smallest eigenvalue of a symmetric matrix."""
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise NumericalError('matrix has non-finite entries')
    return float(np.linalg.eigvalsh(mat)[..., 0])


def sym_pairs(n):
    """Packing order of the upper triangle: (0,0), (0,1), ..., (n-1,n-1)."""
    return [(a, b) for a in range(n) for b in range(a, n)]


def sym_basis_matrix(n, a, b):
    """E_ab = e_a e_b' + e_b e_a' (a != b) or e_a e_a'."""
    E = np.zeros((n, n))
    E[a, b] += 1.0
    E[b, a] += 1.0
    if a == b:
        E[a, a] = 1.0
    return E


@dataclass
class LmiBlock:
    """One affine block F0 + sum_k y_k F_k with a sense and a label."""

    F0: np.ndarray
    terms: list            # [(var_index, F_k sym ndarray)]
    sense: str
    label: str = ''

    def __post_init__(self):
        self.F0 = np.asarray(self.F0, dtype=float)
        d = self.F0.shape[0]
        if self.F0.shape != (d, d):
            raise ConfigurationError('F0 must be square')
        for k, Fk in self.terms:
            if Fk.shape != (d, d):
                raise ConfigurationError(
                    f'coefficient for variable {k} has shape {Fk.shape}, '
                    f'expected {(d, d)}')
        if self.sense not in (SENSE_NEG, SENSE_POS):
            raise ConfigurationError(f'unknown sense {self.sense!r}')

    @property
    def dim(self):
        return self.F0.shape[0]

    def value(self, y):
        F = self.F0.copy()
        for k, Fk in self.terms:
            F += y[k] * Fk
        return F

    def margin(self, y):
        """Distance to the nonstrict inequality (positive = satisfied)."""
        F = self.value(y)
        if self.sense == SENSE_NEG:
            return -float(np.linalg.eigvalsh(F)[-1])
        return min_eig(F)


@dataclass
class SdpProblem:
    """Block-diagonal affine LMI problem with a linear objective."""

    n_vars: int
    objective: np.ndarray
    blocks: list
    epsilon: float = 1e-6
    var_names: list = field(default_factory=list)

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.n_vars,):
            raise ConfigurationError('objective length must match n_vars')
        for blk in self.blocks:
            for k, _ in blk.terms:
                if not (0 <= k < self.n_vars):
                    raise ConfigurationError(
                        f'block {blk.label!r} references undeclared variable {k}')

    def margins(self, y):
        return np.array([blk.margin(y) for blk in self.blocks])


class CandidateLayout:
    """Global variable indexing for (W, Y, mu, alpha) synthesis problems.

    W coefficients are packed per monomial over the upper triangle; a boolean
    mask over (monomial, symmetric entry) removes variables pinned to zero by
    structural constraints (Killing conditions, constant sub-blocks).
    """

    def __init__(self, basis: MetricBasis, n, m, p=1, *, w_mask=None,
                 with_mu=True, with_alpha=True, extra=()):
        self.basis = basis
        self.n, self.m, self.p = n, m, p
        self.pairs = sym_pairs(n)
        J, S = basis.n_basis, len(self.pairs)
        mask = np.ones((J, S), dtype=bool) if w_mask is None else np.asarray(w_mask, bool)
        if mask.shape != (J, S):
            raise ConfigurationError('w_mask must have shape (n_basis, n_sym)')
        self.W_mask = mask

        nid = 0
        self.W_ids = -np.ones((J, S), dtype=int)
        for j in range(J):
            for s in range(S):
                if mask[j, s]:
                    self.W_ids[j, s] = nid
                    nid += 1
        self.Y_ids = np.arange(nid, nid + J * m * n).reshape(J, m, n)
        nid += J * m * n
        self.mu_id = nid if with_mu else -1
        nid += 1 if with_mu else 0
        self.alpha_id = nid if with_alpha else -1
        nid += 1 if with_alpha else 0
        self.extra_ids = {}
        for name in extra:
            self.extra_ids[name] = nid
            nid += 1
        self.n_vars = nid
        # Gather arrays for vectorized packing/unpacking.
        act = np.argwhere(self.W_ids >= 0)
        self._wj = act[:, 0]
        self._wa = np.array([self.pairs[s][0] for s in act[:, 1]], dtype=int)
        self._wb = np.array([self.pairs[s][1] for s in act[:, 1]], dtype=int)
        self._wk = self.W_ids[act[:, 0], act[:, 1]]

    @staticmethod
    def mask_killed_monomials(basis, n, killed):
        mask = np.ones((basis.n_basis, len(sym_pairs(n))), dtype=bool)
        for j in killed:
            mask[j, :] = False
        return mask

    @staticmethod
    def mask_constant_block(basis, n, dims):
        """Restrict entries among `dims` to the constant monomial only."""
        pairs = sym_pairs(n)
        mask = np.ones((basis.n_basis, len(pairs)), dtype=bool)
        dims = set(dims)
        for s, (a, b) in enumerate(pairs):
            if a in dims and b in dims:
                mask[1:, s] = False
        return mask

    def W_stack(self, y):
        J, n = self.basis.n_basis, self.n
        W = np.zeros((J, n, n))
        W[self._wj, self._wa, self._wb] = y[self._wk]
        W[self._wj, self._wb, self._wa] = y[self._wk]
        return W

    def Y_stack(self, y):
        return y[self.Y_ids.reshape(-1)].reshape(self.basis.n_basis, self.m, self.n)

    def unpack(self, y):
        """Split a solution vector into (W_coeffs, Y_coeffs, mu, alpha)."""
        mu = float(y[self.mu_id]) if self.mu_id >= 0 else np.nan
        alpha = float(y[self.alpha_id]) if self.alpha_id >= 0 else np.nan
        return self.W_stack(y), self.Y_stack(y), mu, alpha

    def pack(self, W_coeffs, Y_coeffs, mu, alpha=None, extra=None):
        y = np.zeros(self.n_vars)
        for j in range(self.basis.n_basis):
            for s, (a, b) in enumerate(self.pairs):
                k = self.W_ids[j, s]
                if k >= 0:
                    y[k] = W_coeffs[j, a, b]
        y[self.Y_ids.reshape(-1)] = np.asarray(Y_coeffs).reshape(-1)
        y[self.mu_id] = mu
        if self.alpha_id >= 0 and alpha is not None:
            y[self.alpha_id] = alpha
        for name, v in (extra or {}).items():
            y[self.extra_ids[name]] = v
        return y


def assemble_synthesis_block1(model, layout, x, u, w, lam):
    """Disturbance-bordered contraction block at one grid point.

    [[<A W + B Y> - dW/dt + lam W,  B_w],
     [B_w',                        -mu I_p]]  <=  -eps I,
    affine in the W, Y coefficients and mu; dx/dt is data at the grid point,
    so the flow derivative of W contributes through the W coefficients only.
    """
    A, B, Bw = diff_matrices(model, x, u, w)
    xdot = eval_dynamics(model, x, u, w)
    mvals = layout.basis.eval(x)
    mdot = layout.basis.flow_coefficients(x, xdot)
    n, p = model.n, model.p
    d = n + p

    F0 = np.zeros((d, d))
    F0[:n, n:] = Bw
    F0[n:, :n] = Bw.T
    terms = []
    for j in range(layout.basis.n_basis):
        for s, (a, b) in enumerate(layout.pairs):
            k = layout.W_ids[j, s]
            if k < 0:
                continue
            E = sym_basis_matrix(n, a, b)
            TL = mvals[j] * (A @ E + E @ A.T + lam * E) - mdot[j] * E
            F = np.zeros((d, d))
            F[:n, :n] = TL
            terms.append((int(k), F))
        for i in range(model.m):
            for a in range(n):
                F = np.zeros((d, d))
                block = np.outer(B[:, i], np.eye(n)[a])
                F[:n, :n] = mvals[j] * (block + block.T)
                terms.append((int(layout.Y_ids[j, i, a]), F))
    Fmu = np.zeros((d, d))
    Fmu[n:, n:] = -np.eye(p)
    terms.append((int(layout.mu_id), Fmu))
    label = f'cond1 x={np.round(x, 4).tolist()} u={np.round(u, 4).tolist()} w={np.round(w, 4).tolist()}'
    return LmiBlock(F0, terms, SENSE_NEG, label)


def assemble_synthesis_block2(output_map, layout, x, u, lam):
    """Gain-bounding block at one grid point.

    [[lam W,    0,              (C W + D Y)'],
     [0,        (alpha-mu) I_p, 0],
     [C W + D Y, 0,             alpha I_q]]  >=  eps I,
    affine in the W, Y coefficients, alpha and mu.
    """
    if output_map.q < 1:
        raise ConfigurationError('output map must have at least one channel')
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    C = np.atleast_2d(output_map.C(x, u))
    D = np.atleast_2d(output_map.D(x, u))
    n, p, q = layout.n, layout.p, output_map.q
    d = n + p + q
    mvals = layout.basis.eval(x)

    terms = []
    for j in range(layout.basis.n_basis):
        for s, (a, b) in enumerate(layout.pairs):
            k = layout.W_ids[j, s]
            if k < 0:
                continue
            E = sym_basis_matrix(n, a, b)
            F = np.zeros((d, d))
            F[:n, :n] = lam * mvals[j] * E
            CE = C @ E
            F[n + p:, :n] = mvals[j] * CE
            F[:n, n + p:] = mvals[j] * CE.T
            terms.append((int(k), F))
        for i in range(layout.m):
            for a in range(n):
                F = np.zeros((d, d))
                blk = mvals[j] * np.outer(D[:, i], np.eye(n)[a])
                F[n + p:, :n] = blk
                F[:n, n + p:] = blk.T
                terms.append((int(layout.Y_ids[j, i, a]), F))
    Fa = np.zeros((d, d))
    Fa[n:n + p, n:n + p] = np.eye(p)
    Fa[n + p:, n + p:] = np.eye(q)
    terms.append((int(layout.alpha_id), Fa))
    Fm = np.zeros((d, d))
    Fm[n:n + p, n:n + p] = -np.eye(p)
    terms.append((int(layout.mu_id), Fm))
    label = f'cond2[{output_map.name}] x={np.round(x, 4).tolist()}'
    return LmiBlock(np.zeros((d, d)), terms, SENSE_POS, label)


def assemble_bound_block(layout, x, bound, *, upper=False, bound_var=None):
    """W(x) >= bound*I (or <= bound*I / <= beta_var*I when upper)."""
    n = layout.n
    mvals = layout.basis.eval(x)
    terms = []
    sgn = -1.0 if upper else 1.0
    for j in range(layout.basis.n_basis):
        for s, (a, b) in enumerate(layout.pairs):
            k = layout.W_ids[j, s]
            if k < 0:
                continue
            terms.append((int(k), sgn * mvals[j] * sym_basis_matrix(n, a, b)))
    if bound_var is not None:
        terms.append((int(bound_var), np.eye(n)))
        F0 = np.zeros((n, n))
    else:
        F0 = (-sgn * bound) * np.eye(n)
    kind = 'cap' if upper else 'floor'
    return LmiBlock(F0, terms, SENSE_POS, f'{kind} x={np.round(x, 4).tolist()}')


# ---------------------------------------------------------------------------
# Batched numeric evaluation of the two synthesis conditions at sample points
# (independent of the solver; used for post-hoc verification and refinement)
# ---------------------------------------------------------------------------

def collect_point_data(model, X, U, Wd):
    """Per-point (A, B, B_w, dx/dt) stacks for condition assembly."""
    N = X.shape[0]
    A = np.empty((N, model.n, model.n))
    B = np.empty((N, model.n, model.m))
    Bw = np.empty((N, model.n, model.p))
    xdot = np.empty((N, model.n))
    for i in range(N):
        A[i], B[i], Bw[i] = diff_matrices(model, X[i], U[i], Wd[i])
        xdot[i] = eval_dynamics(model, X[i], U[i], Wd[i])
    return A, B, Bw, xdot


def batch_condition1(model, basis, W_coeffs, Y_coeffs, mu, lam, X, U, Wd,
                     point_data=None):
    """Values of the bordered contraction block at all points, (N, n+p, n+p)."""
    A, B, Bw, xdot = point_data or collect_point_data(model, X, U, Wd)
    mvals = basis.eval(X)
    mdot = basis.flow_coefficients(X, xdot)
    Wx = np.einsum('xj,jab->xab', mvals, W_coeffs)
    Wdot = np.einsum('xj,jab->xab', mdot, W_coeffs)
    Yx = np.einsum('xj,jab->xab', mvals, Y_coeffs)
    AW = A @ Wx
    BY = B @ Yx
    TL = AW + np.swapaxes(AW, 1, 2) + BY + np.swapaxes(BY, 1, 2) \
        - Wdot + lam * Wx
    n, p = model.n, model.p
    N = X.shape[0]
    F = np.zeros((N, n + p, n + p))
    F[:, :n, :n] = TL
    F[:, :n, n:] = Bw
    F[:, n:, :n] = np.swapaxes(Bw, 1, 2)
    F[:, n:, n:] = -mu * np.eye(p)
    return F


def batch_condition2(output_map, model, basis, W_coeffs, Y_coeffs, mu, alpha,
                     lam, X, U=None):
    """Values of the gain block at all points, (N, n+p+q, n+p+q)."""
    n, p, q = model.n, model.p, output_map.q
    N = X.shape[0]
    if U is None:
        U = np.tile(model.input_bounds.mean(axis=1), (N, 1))
    mvals = basis.eval(X)
    Wx = np.einsum('xj,jab->xab', mvals, W_coeffs)
    Yx = np.einsum('xj,jab->xab', mvals, Y_coeffs)
    Cs = np.stack([np.atleast_2d(output_map.C(X[i], U[i])) for i in range(N)])
    Ds = np.stack([np.atleast_2d(output_map.D(X[i], U[i])) for i in range(N)])
    CWDY = Cs @ Wx + Ds @ Yx
    F = np.zeros((N, n + p + q, n + p + q))
    F[:, :n, :n] = lam * Wx
    F[:, n:n + p, n:n + p] = (alpha - mu) * np.eye(p)
    F[:, n + p:, n + p:] = alpha * np.eye(q)
    F[:, n + p:, :n] = CWDY
    F[:, :n, n + p:] = np.swapaxes(CWDY, 1, 2)
    return F


def batch_eval_W(basis, W_coeffs, X):
    return np.einsum('xj,jab->xab', basis.eval(X), W_coeffs)


def write_problem_dump(problem, path):
    """Plain-text dump (one block per record) for offline cross-checking."""
    with open(path, 'w') as fh:
        fh.write(f'# affine LMI problem: {problem.n_vars} variables, '
                 f'{len(problem.blocks)} blocks, eps={problem.epsilon!r}\n')
        fh.write('objective ' + ' '.join(repr(float(c)) for c in problem.objective) + '\n')
        for blk in problem.blocks:
            fh.write(f'block {blk.label!r} dim={blk.dim} sense={blk.sense}\n')
            fh.write('F0 ' + ' '.join(repr(float(v)) for v in blk.F0.reshape(-1)) + '\n')
            for k, Fk in blk.terms:
                trips = [(i, j, Fk[i, j]) for i in range(blk.dim)
                         for j in range(i, blk.dim) if Fk[i, j] != 0.0]
                body = ' '.join(f'{i},{j},{v!r}' for i, j, v in trips)
                fh.write(f'F {k} {body}\n')

"""Polynomial dual-metric parameterization.

W(x) and the gain matrix Y(x) are polynomial matrices in a chosen subset of
states: W(x) = sum_j m_j(x) W_j with monomials m_j over affinely scaled
coordinates (x_i - center_i)/scale_i. Scaling keeps the monomial values
O(1) over the state box without changing the function class.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigurationError, MetricDomainError, StructuralError,
                     ValidationError)

CANDIDATE_FORMAT = 'rccm.metric_candidate'
CANDIDATE_VERSION = 1


@dataclass(frozen=True)
class MetricBasis:
    """Monomial basis over a subset of the state vector.

    `exponents` has one row per monomial (first row is the constant monomial);
    entries are exponents of the scaled coordinates. All monomials of total
    degree <= degree are generated by `total_degree`.
    """

    state_indices: tuple[int, ...]
    exponents: np.ndarray
    centers: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        exps = np.asarray(self.exponents, dtype=int)
        if exps.ndim != 2 or exps.shape[1] != len(self.state_indices):
            raise ConfigurationError('exponent table shape mismatch')
        if not np.all(exps[0] == 0):
            raise ConfigurationError('first monomial must be the constant one')
        if len({tuple(r) for r in exps}) != len(exps):
            raise ConfigurationError('duplicate monomials in basis')
        object.__setattr__(self, 'exponents', exps)
        object.__setattr__(self, 'centers',
                           np.asarray(self.centers, dtype=float))
        object.__setattr__(self, 'scales',
                           np.asarray(self.scales, dtype=float))
        if np.any(self.scales <= 0):
            raise ConfigurationError('basis scales must be positive')

    @classmethod
    def total_degree(cls, state_indices, degree, centers=None, scales=None):
        """All monomials of total degree <= degree over the given states."""
        k = len(state_indices)
        if degree < 0:
            raise ConfigurationError('degree must be nonnegative')
        exps = [e for e in itertools.product(range(degree + 1), repeat=k)
                if sum(e) <= degree]
        exps.sort(key=lambda e: (sum(e), e))
        centers = np.zeros(k) if centers is None else np.asarray(centers, float)
        scales = np.ones(k) if scales is None else np.asarray(scales, float)
        return cls(tuple(state_indices), np.array(exps, dtype=int).reshape(len(exps), k),
                   centers, scales)

    @classmethod
    def for_model(cls, model, state_indices, degree):
        """Total-degree basis scaled so each coordinate maps its box to [-1, 1]."""
        lo = model.state_bounds[list(state_indices), 0]
        hi = model.state_bounds[list(state_indices), 1]
        return cls.total_degree(state_indices, degree,
                                centers=(lo + hi) / 2, scales=(hi - lo) / 2)

    @property
    def n_basis(self):
        return self.exponents.shape[0]

    @property
    def degree(self):
        return int(self.exponents.sum(axis=1).max(initial=0))

    def scaled_coords(self, x):
        x = np.asarray(x, dtype=float)
        if not self.state_indices:
            return np.zeros(x.shape[:-1] + (0,))
        xi = (x[..., list(self.state_indices)] - self.centers) / self.scales
        return xi

    def eval(self, x):
        """Monomial values, shape (..., n_basis)."""
        xi = self.scaled_coords(x)
        if not self.state_indices:
            return np.ones(xi.shape[:-1] + (self.n_basis,))
        pows = xi[..., None, :] ** self.exponents
        return pows.prod(axis=-1)

    def eval_grad(self, x):
        """d m_j / d x_i (raw, unscaled states), shape (..., n_basis, k)."""
        xi = self.scaled_coords(x)
        k = len(self.state_indices)
        out = np.zeros(xi.shape[:-1] + (self.n_basis, k))
        if k == 0:
            return out
        for i in range(k):
            e = self.exponents.copy()
            coef = e[:, i].astype(float) / self.scales[i]
            e[:, i] = np.maximum(e[:, i] - 1, 0)
            pows = (xi[..., None, :] ** e).prod(axis=-1)
            out[..., i] = coef * pows
        return out

    def flow_coefficients(self, x, xdot):
        """Time derivative of each monomial along xdot: sum_i dm_j/dx_i * xdot_i."""
        grads = self.eval_grad(x)
        if not self.state_indices:
            return np.zeros(grads.shape[:-1])
        rates = np.asarray(xdot, dtype=float)[..., list(self.state_indices)]
        return np.einsum('...jk,...k->...j', grads, rates)

    def derivative_index_map(self, state_index):
        """Expansion of d m_j/d x_r in the basis: list of (j, j_target, coef).

        Valid because the basis is closed under differentiation (total degree
        only decreases).
        """
        if state_index not in self.state_indices:
            return []
        i = self.state_indices.index(state_index)
        lookup = {tuple(r): jj for jj, r in enumerate(self.exponents)}
        out = []
        for j, e in enumerate(self.exponents):
            if e[i] == 0:
                continue
            tgt = list(e)
            tgt[i] -= 1
            out.append((j, lookup[tuple(tgt)], e[i] / self.scales[i]))
        return out

    def to_dict(self):
        return {
            'state_indices': list(self.state_indices),
            'exponents': self.exponents.tolist(),
            'centers': self.centers.tolist(),
            'scales': self.scales.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d['state_indices']), np.array(d['exponents'], dtype=int),
                   np.array(d['centers']), np.array(d['scales']))


@dataclass(frozen=True)
class MetricCandidate:
    """A synthesized (W, Y, lambda, mu, alpha) tuple with provenance.

    Immutable; all evaluations are pure and thread-safe.
    """

    basis: MetricBasis
    W_coeffs: np.ndarray      # (n_basis, n, n), each symmetric
    Y_coeffs: np.ndarray      # (n_basis, m, n)
    lam: float
    mu: float
    alpha: float
    beta_lower: float
    output: str = ''
    provenance: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        W = np.asarray(self.W_coeffs, dtype=float)
        Y = np.asarray(self.Y_coeffs, dtype=float)
        if W.ndim != 3 or W.shape[0] != self.basis.n_basis or W.shape[1] != W.shape[2]:
            raise ConfigurationError('W coefficient stack has wrong shape')
        if Y.ndim != 3 or Y.shape[0] != self.basis.n_basis or Y.shape[2] != W.shape[1]:
            raise ConfigurationError('Y coefficient stack has wrong shape')
        W = 0.5 * (W + np.swapaxes(W, 1, 2))   # stored exactly symmetric
        object.__setattr__(self, 'W_coeffs', W)
        object.__setattr__(self, 'Y_coeffs', Y)

    @property
    def n(self):
        return self.W_coeffs.shape[1]

    @property
    def m(self):
        return self.Y_coeffs.shape[1]

    def with_scalars(self, lam=None, mu=None, alpha=None):
        return replace(self,
                       lam=self.lam if lam is None else float(lam),
                       mu=self.mu if mu is None else float(mu),
                       alpha=self.alpha if alpha is None else float(alpha))


def eval_W(candidate, x):
    """W(x) = sum_j m_j(x) W_j; exactly symmetric by construction."""
    mvals = candidate.basis.eval(x)
    return np.einsum('...j,jab->...ab', mvals, candidate.W_coeffs)


def eval_Y(candidate, x):
    mvals = candidate.basis.eval(x)
    return np.einsum('...j,jab->...ab', mvals, candidate.Y_coeffs)


def eval_W_flow_derivative(candidate, x, xdot):
    """dW/dt along the flow: sum_i dW/dx_i * xdot_i."""
    mdot = candidate.basis.flow_coefficients(x, np.asarray(xdot, dtype=float))
    return np.einsum('...j,jab->...ab', mdot, candidate.W_coeffs)


def eval_M(candidate, x):
    """M(x) = W(x)^-1 via Cholesky; raises MetricDomainError off the cone."""
    x = np.asarray(x, dtype=float)
    W = eval_W(candidate, x)
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        pts = x.reshape(-1, x.shape[-1])
        eigs = np.linalg.eigvalsh(W.reshape(-1, W.shape[-1], W.shape[-1]))
        bad = pts[int(np.argmin(eigs[:, 0]))]
        raise MetricDomainError('W(x) is not positive definite',
                                x=bad) from None
    I = np.broadcast_to(np.eye(W.shape[-1]), W.shape)
    Linv = np.linalg.solve(L, I.copy())
    return np.swapaxes(Linv, -1, -2) @ Linv


def eval_K(candidate, x):
    """Feedback gain K(x) = Y(x) W(x)^-1."""
    return eval_Y(candidate, x) @ eval_M(candidate, x)


# ---------------------------------------------------------------------------
# Killing-vector structural constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KillingConstraints:
    """Structural requirements making columns of B (or B_w) Killing vectors.

    For constant columns the identity `sum_r b_r dW/dx_r = 0` reduces to
    per-dimension independence; `killed_dims` lists state dimensions W must
    not depend on, and `killed_monomials` the basis rows this removes.
    """

    which: str
    killed_dims: tuple[int, ...]
    killed_monomials: tuple[int, ...]
    conflicts_with_basis: bool

    @property
    def empty(self):
        return not self.killed_monomials


def killing_structure(model, basis, which):
    """Constraints forcing d_{b_i} W - <(db_i/dx) W> = 0 identically.

    `which` is 'C1' (columns of B) or 'C3' (columns of B_w). Only constant
    columns are expressible in a polynomial basis here; a state-dependent
    column raises StructuralError naming the column.
    """
    if which == 'C1':
        cols, jacs, k = model.B, model.jac_b, model.m
    elif which == 'C3':
        cols, jacs, k = model.B_w, model.jac_bw, model.p
    else:
        raise ConfigurationError("which must be 'C1' or 'C3'")

    # Probe constancy at scattered points of the state box.
    lo, hi = model.state_bounds[:, 0], model.state_bounds[:, 1]
    rng = np.random.default_rng(0)
    probes = lo + (hi - lo) * rng.random((8, model.n))
    mats = np.stack([cols(x) for x in probes])
    jac_norm = max(np.abs(jacs(x)).max() for x in probes)
    col_spread = np.abs(mats - mats[0]).max(axis=(0, 1))
    for i in range(k):
        if col_spread[i] > 1e-12 or jac_norm > 1e-12:
            raise StructuralError(
                f'{which}: column {i} is state-dependent and not expressible '
                'in the polynomial basis', column=i)

    killed_dims = set()
    for i in range(k):
        nz = np.flatnonzero(np.abs(mats[0][:, i]) > 1e-12)
        killed_dims.update(int(d) for d in nz if d in basis.state_indices)

    killed_monomials = []
    for j, e in enumerate(basis.exponents):
        for d in killed_dims:
            if e[basis.state_indices.index(d)] > 0:
                killed_monomials.append(j)
                break
    conflicts = bool(killed_dims) and len(killed_monomials) == basis.n_basis - 1
    return KillingConstraints(which, tuple(sorted(killed_dims)),
                              tuple(killed_monomials), conflicts)


def killing_defect(model, basis, coeffs, which, n_samples=64, seed=0):
    """Numeric max residual of the Killing identity per column.

    Evaluates d_{b_i} W - <(db_i/dx) W> at sample points of the state box for
    the metric W given by `coeffs` over `basis`; returns an array of per-column
    Frobenius-norm maxima. Works for state-dependent columns too.
    """
    if which == 'C2' or which == 'C1':
        cols, jacs, k = model.B, model.jac_b, model.m
    elif which == 'C3':
        cols, jacs, k = model.B_w, model.jac_bw, model.p
    else:
        raise ConfigurationError("which must be 'C1', 'C2' or 'C3'")
    lo, hi = model.state_bounds[:, 0], model.state_bounds[:, 1]
    rng = np.random.default_rng(seed)
    xs = lo + (hi - lo) * rng.random((n_samples, model.n))
    out = np.zeros(k)
    for x in xs:
        Bmat = cols(x)
        Jst = jacs(x)
        Wx = np.einsum('j,jab->ab', basis.eval(x), coeffs)
        grads = basis.eval_grad(x)   # (n_basis, k_basis)
        for i in range(k):
            dirW = np.zeros_like(Wx)
            for kk, d in enumerate(basis.state_indices):
                gcoef = np.einsum('j,jab->ab', grads[:, kk], coeffs)
                dirW += Bmat[d, i] * gcoef
            JB = Jst[i]
            expr = dirW - (JB @ Wx + Wx @ JB.T)
            out[i] = max(out[i], float(np.linalg.norm(expr)))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def candidate_to_dict(candidate):
    return {
        'format': CANDIDATE_FORMAT,
        'version': CANDIDATE_VERSION,
        'basis': candidate.basis.to_dict(),
        'n': candidate.n,
        'm': candidate.m,
        'w_coefficients': [Wj.reshape(-1).tolist() for Wj in candidate.W_coeffs],
        'y_coefficients': [Yj.reshape(-1).tolist() for Yj in candidate.Y_coeffs],
        'lambda': candidate.lam,
        'mu': candidate.mu,
        'alpha': candidate.alpha,
        'beta_lower': candidate.beta_lower,
        'output': candidate.output,
        'provenance': candidate.provenance,
        'notes': candidate.notes,
    }


def candidate_from_dict(d):
    if d.get('format') != CANDIDATE_FORMAT:
        raise ValidationError('not a metric-candidate document')
    if d.get('version') != CANDIDATE_VERSION:
        raise ValidationError(f"unsupported candidate version {d.get('version')}")
    basis = MetricBasis.from_dict(d['basis'])
    n, m = int(d['n']), int(d['m'])
    W = np.array([np.reshape(r, (n, n)) for r in d['w_coefficients']])
    Y = np.array([np.reshape(r, (m, n)) for r in d['y_coefficients']])
    return MetricCandidate(basis, W, Y,
                           lam=float(d['lambda']), mu=float(d['mu']),
                           alpha=float(d['alpha']),
                           beta_lower=float(d['beta_lower']),
                           output=d.get('output', ''),
                           provenance=d.get('provenance', {}),
                           notes=d.get('notes', {}))


def save_candidate(candidate, path):
    with open(path, 'w') as fh:
        json.dump(candidate_to_dict(candidate), fh, indent=1)


def load_candidate(path):
    with open(path) as fh:
        return candidate_from_dict(json.load(fh))


def provenance_digest(log_text):
    """Short stable digest of a solver log for candidate provenance."""
    return hashlib.sha256(log_text.encode()).hexdigest()[:16]

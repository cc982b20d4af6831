"""Minimal-energy paths under the state-dependent metric M = W^-1.

The path between the nominal and actual state is approximated by Chebyshev
interpolating polynomials of degree D with endpoint constraints eliminated,
and the energy integral by Clenshaw-Curtis quadrature over N+1
Chebyshev-Gauss-Lobatto nodes (N > D). The reduced problem is solved by a
damped Newton method whose Hessian model keeps only the metric-weighted
quadratic term (exact for constant metrics), with gradient-step fallback.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, MetricDomainError
from .metric import eval_M, eval_W


def cgl_nodes(N):
    """Chebyshev-Gauss-Lobatto nodes mapped to [0, 1], increasing."""
    return (1.0 - np.cos(np.pi * np.arange(N + 1) / N)) / 2.0


def clenshaw_curtis_weights(N):
    """Quadrature weights on [0, 1] for the CGL nodes (sum to 1)."""
    if N < 1:
        raise ConfigurationError('need at least two quadrature nodes')
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N ** 2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[1:N]) / (4 * k ** 2 - 1)
        v -= np.cos(N * theta[1:N]) / (N ** 2 - 1)
    else:
        w[0] = w[N] = 1.0 / N ** 2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[1:N]) / (4 * k ** 2 - 1)
    w[1:N] = 2.0 * v / N
    return w / 2.0   # [-1, 1] -> [0, 1]


def chebyshev_values(D, s):
    """T_i(2s-1) for i = 0..D at parameters s, shape (len(s), D+1)."""
    x = 2.0 * np.asarray(s) - 1.0
    T = np.empty((len(x), D + 1))
    T[:, 0] = 1.0
    if D >= 1:
        T[:, 1] = x
    for i in range(2, D + 1):
        T[:, i] = 2.0 * x * T[:, i - 1] - T[:, i - 2]
    return T


def chebyshev_derivatives(D, s):
    """d/ds T_i(2s-1) via the Chebyshev U-polynomials (factor 2 from the map)."""
    x = 2.0 * np.asarray(s) - 1.0
    U = np.empty((len(x), D + 1))
    U[:, 0] = 1.0
    if D >= 1:
        U[:, 1] = 2.0 * x
    for i in range(2, D + 1):
        U[:, i] = 2.0 * x * U[:, i - 1] - U[:, i - 2]
    dT = np.zeros((len(x), D + 1))
    for i in range(1, D + 1):
        dT[:, i] = i * U[:, i - 1]
    return 2.0 * dT


@dataclass(frozen=True)
class PseudospectralScheme:
    """Degree-D Chebyshev path basis sampled at N+1 CGL quadrature nodes."""

    D: int
    N: int
    nodes: np.ndarray
    weights: np.ndarray
    T: np.ndarray        # (N+1, D+1) basis values at nodes
    Ts: np.ndarray       # (N+1, D+1) basis derivatives at nodes
    diff: np.ndarray     # (N+1, N+1) nodal differentiation operator

    @property
    def n_free(self):
        return max(self.D - 1, 0)


def build_scheme(D, N):
    """Pseudospectral scheme with N > D >= 1."""
    if D < 1:
        raise ConfigurationError('polynomial degree must be >= 1')
    if N <= D:
        raise ConfigurationError(f'need N > D nodes, got N={N}, D={D}')
    s = cgl_nodes(N)
    w = clenshaw_curtis_weights(N)
    T = chebyshev_values(D, s)
    Ts = chebyshev_derivatives(D, s)
    # Nodal differentiation operator (exact for degree <= N polynomials).
    TN = chebyshev_values(N, s)
    TNs = chebyshev_derivatives(N, s)
    diff = TNs @ np.linalg.solve(TN, np.eye(N + 1))
    return PseudospectralScheme(D=D, N=N, nodes=s, weights=w, T=T, Ts=Ts,
                                diff=diff)


@dataclass
class Geodesic:
    """Pseudospectral minimal-energy path between x_star and x."""

    scheme: PseudospectralScheme
    coeffs: np.ndarray          # (D+1, n) Chebyshev coefficients
    values: np.ndarray          # (N+1, n) gamma(s_k)
    derivs: np.ndarray          # (N+1, n) dgamma/ds(s_k)
    energy: float
    iterations: int
    converged: bool
    grad_norm: float = float('nan')

    @property
    def x_star(self):
        return self.values[0]

    @property
    def x(self):
        return self.values[-1]

    def deriv_at_end(self):
        return self.derivs[-1]

    def deriv_at_start(self):
        return self.derivs[0]


def _endpoint_basis(scheme, x_star, x):
    """Coefficient parameterization with endpoints eliminated.

    T_i(-1) = (-1)^i and T_i(1) = 1, so c0 and c1 absorb the endpoint
    constraints and the free block is c_2..c_D.
    """
    D = scheme.D
    n = len(x)
    c = np.zeros((D + 1, n))
    c[0] = (x + x_star) / 2.0
    if D >= 1:
        c[1] = (x - x_star) / 2.0

    def assemble(q):
        cc = c.copy()
        if D >= 2:
            cc[2:] = q
            even = np.arange(2, D + 1, 2)
            odd = np.arange(3, D + 1, 2)
            cc[0] = c[0] - q[even - 2].sum(axis=0)
            cc[1] = c[1] - q[odd - 2].sum(axis=0)
        return cc

    return assemble


def path_energy(metric_eval, scheme, coeffs):
    """Quadrature energy and per-node values/derivatives for coefficients."""
    G = scheme.T @ coeffs
    Gs = scheme.Ts @ coeffs
    Ms = metric_eval(G)
    integrand = np.einsum('ka,kab,kb->k', Gs, Ms, Gs)
    return float(scheme.weights @ integrand), G, Gs, Ms


def solve_geodesic(metric_eval, x_star, x, scheme, warm_start=None, *,
                   grad_tol=1e-7, max_iter=80, metric_jac=None):
    """Minimal-energy path between x_star and x under M(.) > 0.

    `metric_eval` maps (N+1, n) stacked points to (N+1, n, n) metric values
    and raises MetricDomainError off the positive-definite cone.
    `metric_jac(points) -> (N+1, n, n, n)` (dM/dx_j) enables the exact
    gradient; when omitted it is obtained by central differences per node.
    Warm starting takes a previous Geodesic or a free-coefficient block.
    Nonconvergence returns the best iterate flagged converged=False.
    """
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    n = len(x)
    if np.linalg.norm(x - x_star) <= 1e-12:
        vals = np.tile(x_star, (scheme.N + 1, 1))
        coeffs = np.zeros((scheme.D + 1, n))
        coeffs[0] = x_star
        return Geodesic(scheme, coeffs, vals, np.zeros_like(vals), 0.0, 0,
                        True, 0.0)

    assemble = _endpoint_basis(scheme, x_star, x)
    nf = scheme.n_free
    if warm_start is None:
        q = np.zeros((nf, n))
    elif isinstance(warm_start, Geodesic):
        q = warm_start.coeffs[2:2 + nf].copy() if nf else np.zeros((0, n))
    else:
        q = np.asarray(warm_start, dtype=float).reshape(nf, n).copy()

    def energy_of(qq):
        return path_energy(metric_eval, scheme, assemble(qq))

    def metric_grad_term(G, Gs, Ms):
        if metric_jac is not None:
            dM = metric_jac(G)
        else:
            dM = _fd_metric_jac(metric_eval, G)
        return 0.5 * np.einsum('ka,kjab,kb->kj', Gs, dM, Gs)

    try:
        E, G, Gs, Ms = energy_of(q)
    except MetricDomainError:
        raise
    it = 0
    grad_norm = np.inf
    # Chain maps from free coefficients to node values/derivatives.
    TZ, TsZ = _free_maps(scheme)
    while it < max_iter:
        dE_dGs = 2.0 * np.einsum('k,kab,kb->ka', scheme.weights, Ms, Gs)
        dE_dG = 2.0 * np.einsum('k,kj->kj', scheme.weights,
                                metric_grad_term(G, Gs, Ms))
        grad = TZ.T @ dE_dG + TsZ.T @ dE_dGs if nf else np.zeros((0, n))
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol * (1.0 + E):
            break
        if nf == 0:
            break
        # Metric-weighted quadratic model (exact Hessian for constant M).
        H = 2.0 * np.einsum('k,ki,kj,kab->iajb', scheme.weights, TsZ, TsZ,
                            Ms).reshape(nf * n, nf * n)
        gvec = grad.reshape(-1)
        step_dir = None
        damp = 1e-12 * max(1.0, np.trace(H) / (nf * n))
        for _ in range(8):
            try:
                cf = np.linalg.cholesky(H + damp * np.eye(nf * n))
                step_dir = -np.linalg.solve(cf.T, np.linalg.solve(cf, gvec))
                break
            except np.linalg.LinAlgError:
                damp *= 100.0
        if step_dir is None:
            step_dir = -gvec / max(1.0, np.linalg.norm(gvec))
        dq = step_dir.reshape(nf, n)
        dec = float(-gvec @ step_dir)
        step = 1.0
        improved = False
        while step > 1e-12:
            try:
                E2, G2, Gs2, Ms2 = energy_of(q + step * dq)
            except MetricDomainError:
                step *= 0.5
                continue
            if E2 <= E - 1e-4 * step * dec:
                q, E, G, Gs, Ms = q + step * dq, E2, G2, Gs2, Ms2
                improved = True
                break
            step *= 0.5
        it += 1
        if not improved:
            break
    coeffs = assemble(q)
    converged = grad_norm <= grad_tol * (1.0 + E)
    return Geodesic(scheme, coeffs, G, Gs, E, it, bool(converged), grad_norm)


def _free_maps(scheme):
    """Maps from free coefficients c_2..c_D to node values/derivatives.

    Eliminating the endpoints makes c0, c1 affine in the free block:
    c0 -= sum of even free coeffs, c1 -= sum of odd free coeffs.
    """
    D, N = scheme.D, scheme.N
    nf = max(D - 1, 0)
    Z = np.zeros((D + 1, nf))
    for j in range(nf):
        i = j + 2
        Z[i, j] = 1.0
        if i % 2 == 0:
            Z[0, j] = -1.0
        else:
            Z[1, j] = -1.0
    return scheme.T @ Z, scheme.Ts @ Z


def _fd_metric_jac(metric_eval, G, h=1e-6):
    K, n = G.shape
    dM = np.zeros((K, n, n, n))
    for j in range(n):
        Gp = G.copy()
        Gp[:, j] += h
        Gm = G.copy()
        Gm[:, j] -= h
        dM[:, j] = (metric_eval(Gp) - metric_eval(Gm)) / (2.0 * h)
    return dM


class GeodesicSolver:
    """Warm-started geodesic solver bound to one metric candidate.

    Holds the previous solution's free coefficients, so an instance belongs
    to a single control loop (one thread); metric evaluation itself is pure.
    """

    def __init__(self, candidate, D=4, N=8, grad_tol=1e-7, max_iter=80):
        self.candidate = candidate
        self.scheme = build_scheme(D, N)
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self._warm = None

    def metric_eval(self, pts):
        return eval_M(self.candidate, pts)

    def metric_jac(self, pts):
        """dM/dx_j = -M (dW/dx_j) M from the monomial gradients."""
        cand = self.candidate
        M = eval_M(cand, pts)
        grads = cand.basis.eval_grad(pts)        # (K, n_basis, k)
        dW = np.einsum('xjk,jab->xkab', grads, cand.W_coeffs)
        K, n = pts.shape
        out = np.zeros((K, n, n, n))
        for kk, dim in enumerate(cand.basis.state_indices):
            out[:, dim] = dW[:, kk]
        return -np.einsum('xab,xjbc,xcd->xjad', M, out, M)

    def solve(self, x_star, x, warm=True):
        geo = solve_geodesic(self.metric_eval, x_star, x, self.scheme,
                             warm_start=self._warm if warm else None,
                             grad_tol=self.grad_tol, max_iter=self.max_iter,
                             metric_jac=self.metric_jac)
        if geo.converged and self.scheme.n_free:
            self._warm = geo.coeffs[2:2 + self.scheme.n_free].copy()
        return geo

    def reset(self):
        self._warm = None


def riemann_energy(candidate, x_star, x, D=4, N=8):
    """One-shot minimal energy E(x_star, x) under the candidate metric."""
    scheme = build_scheme(D, N)
    geo = solve_geodesic(lambda pts: eval_M(candidate, pts), x_star, x, scheme)
    return geo.energy


def energy_decay_monitor(geo_t, geo_next, lam, mu, w, w_star, dt):
    """Finite-difference residual of the contraction-with-disturbance bound.

    residual = (E_next - E_t)/dt + lam*E_t - mu*||w - w_star||^2;
    nonpositive (up to tolerance) certifies the decay inequality at runtime.
    """
    if dt <= 0:
        raise ConfigurationError('dt must be positive')
    dw = np.asarray(w, dtype=float) - np.asarray(w_star, dtype=float)
    return float((geo_next.energy - geo_t.energy) / dt + lam * geo_t.energy
                 - mu * float(dw @ dw))

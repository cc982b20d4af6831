"""Log-det barrier interior-point solver for block-diagonal affine LMIs.

Feasibility senses are normalized at group construction into G(y) >= 0 with
the strictness margin folded into the constant term, so the solver only ever
sees cones. Infeasibility is declared through a phase-1 slack minimization
(min s subject to G_b(y) + s I >= 0), and every "feasible" answer is meant to
be re-checked by the caller with independent eigenvalue computations.

Groups batch blocks of equal dimension; the generic ExplicitGroup wraps
LmiBlock lists (adequate for small problems), while synthesis builds
structured groups whose gradient/Hessian accumulation exploits the
monomial-times-generator factorization of the coefficient matrices.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, NonconvergenceError
from .lmi import SENSE_NEG


class BlockGroup:
    """Batch of same-dimension PSD constraints G_x(y) >= 0, x = 1..count."""

    dim: int
    count: int
    eps: float

    def __init__(self):
        self.slack_id = None

    def labels(self):
        raise NotImplementedError

    def values_raw(self, y):
        """Normalized block values, shape (count, dim, dim)."""
        raise NotImplementedError

    def values(self, y):
        S = self.values_raw(y)
        if self.slack_id is not None:
            S = S + y[self.slack_id] * np.eye(self.dim)
        return S

    def accumulate_inner(self, P, out, sign=1.0):
        """out[k] += sign * sum_x <P_x, dG/dy_k>, for this group's variables."""
        raise NotImplementedError

    def accumulate_hessian(self, L, Li, Sinv, H):
        """H[k, j] += sum_x tr(Sinv G_k Sinv G_j) over this group's variables."""
        raise NotImplementedError

    # Slack contributions are uniform across group types.
    def _slack_grad(self, Sinv, out, sign=1.0):
        if self.slack_id is not None:
            out[self.slack_id] += sign * float(np.trace(Sinv, axis1=-2, axis2=-1).sum())

    def _slack_hess(self, Sinv, H):
        if self.slack_id is None:
            return
        s = self.slack_id
        P2 = Sinv @ Sinv
        tmp = np.zeros(H.shape[0])
        self.accumulate_inner(P2, tmp)
        tmp[s] += float(np.einsum('xab,xba->', Sinv, Sinv))
        H[s, :] += tmp
        H[:, s] += tmp
        H[s, s] -= tmp[s]   # added twice above

    def margins(self, y):
        """Raw margins (distance to the nonstrict sense) per block."""
        S = self.values_raw(y)
        return np.linalg.eigvalsh(S)[:, 0] + self.eps


class ExplicitGroup(BlockGroup):
    """Group over a list of explicit LmiBlocks (possibly mixed dimensions).

    Loops in Python; intended for problems with at most a few hundred
    variables per block.
    """

    def __init__(self, blocks, eps):
        super().__init__()
        self.blocks = list(blocks)
        self.eps = float(eps)
        self.count = len(self.blocks)
        self.dim = max((b.dim for b in self.blocks), default=0)
        self._norm = []
        for blk in self.blocks:
            sgn = -1.0 if blk.sense == SENSE_NEG else 1.0
            G0 = sgn * blk.F0 - self.eps * np.eye(blk.dim)
            terms = [(k, sgn * Fk) for k, Fk in blk.terms]
            self._norm.append((G0, terms, blk.dim))

    def labels(self):
        return [b.label for b in self.blocks]

    def _value_one(self, i, y):
        G0, terms, d = self._norm[i]
        G = G0.copy()
        for k, Fk in terms:
            G += y[k] * Fk
        if self.slack_id is not None:
            G = G + y[self.slack_id] * np.eye(d)
        return G

    def values(self, y):
        return [self._value_one(i, y) for i in range(self.count)]

    values_raw = None   # heterogeneous dims; margins/values overridden

    def margins(self, y):
        out = np.empty(self.count)
        for i in range(self.count):
            G0, terms, d = self._norm[i]
            G = G0.copy()
            for k, Fk in terms:
                G += y[k] * Fk
            out[i] = np.linalg.eigvalsh(G)[0] + self.eps
        return out

    def cholesky(self, y):
        Ls = []
        for i in range(self.count):
            Ls.append(np.linalg.cholesky(self._value_one(i, y)))
        return Ls

    def logdet(self, Ls):
        return 2.0 * sum(float(np.log(np.diag(L)).sum()) for L in Ls)

    def accumulate_grad_hess(self, y, Ls, grad, H):
        for i, L in enumerate(Ls):
            G0, terms, d = self._norm[i]
            Li = np.linalg.solve(L, np.eye(d))
            Sinv = Li.T @ Li
            local = list(terms)
            if self.slack_id is not None:
                local = local + [(self.slack_id, np.eye(d))]
            ids = np.array([k for k, _ in local], dtype=int)
            V = np.empty((len(local), d * d))
            for r, (k, Fk) in enumerate(local):
                grad[k] -= float(np.tensordot(Sinv, Fk))
                V[r] = (Li @ Fk @ Li.T).reshape(-1)
            H[np.ix_(ids, ids)] += V @ V.T

    def accumulate_inner(self, Ps, out, sign=1.0):
        for i, P in enumerate(Ps):
            _, terms, d = self._norm[i]
            for k, Fk in terms:
                out[k] += sign * float(np.tensordot(P, Fk))


class StructuredGroup(BlockGroup):
    """Base for batched groups: subclasses provide values_raw / inner / hess."""

    def cholesky(self, y):
        return np.linalg.cholesky(self.values(y))

    def logdet(self, L):
        d = np.diagonal(L, axis1=-2, axis2=-1)
        return 2.0 * float(np.log(d).sum())

    def accumulate_grad_hess(self, y, L, grad, H):
        d = self.dim
        Li = np.linalg.solve(L, np.broadcast_to(np.eye(d), L.shape).copy())
        Sinv = np.swapaxes(Li, -1, -2) @ Li
        self.accumulate_inner(Sinv, grad, sign=-1.0)
        self._slack_grad(Sinv, grad, sign=-1.0)
        self.accumulate_hessian(L, Li, Sinv, H)
        self._slack_hess(Sinv, H)


@dataclass
class SolveResult:
    """Outcome of a barrier solve, with post-hoc eigenvalue margins."""

    y: np.ndarray
    objective: float
    status: str
    margins: np.ndarray
    labels: list
    iterations: int
    gap: float
    verified: bool
    log: str = ''

    @property
    def worst_margin(self):
        return float(self.margins.min()) if len(self.margins) else np.inf

    def worst_blocks(self, k=3):
        order = np.argsort(self.margins)
        return [(self.labels[i], float(self.margins[i])) for i in order[:k]]


def _psi(groups, y, tc):
    """Barrier potential t*c'y - sum logdet, or None when infeasible."""
    total = float(tc @ y)
    chols = []
    for g in groups:
        try:
            L = g.cholesky(y)
        except np.linalg.LinAlgError:
            return None, None
        if isinstance(L, list):
            if any(not np.all(np.isfinite(Lb)) for Lb in L):
                return None, None
        elif not np.all(np.isfinite(L)):
            return None, None
        total -= g.logdet(L)
        chols.append(L)
    return total, chols


def _newton(groups, tc, y, n_vars, *, tol_dec, max_iter, stop_when=None):
    """Damped Newton centering for min tc'y - sum logdet G(y).

    The decrement test is affine-invariant, so `tol_dec` is scale-free.
    Returns (y, psi, chols, iterations, centered flag); `stop_when` aborts
    centering early (used by the phase-1 slack descent).
    """
    psi, chols = _psi(groups, y, tc)
    if psi is None:
        raise NonconvergenceError('centering started at an infeasible point')
    iters = 0
    for _ in range(max_iter):
        grad = tc.copy()
        H = np.zeros((n_vars, n_vars))
        for g, L in zip(groups, chols):
            g.accumulate_grad_hess(y, L, grad, H)
        # Levenberg damping; retries cover indefiniteness from roundoff.
        scale = max(np.trace(H) / n_vars, 1e-30)
        damp = 1e-13 * scale
        for _try in range(12):
            try:
                c_factor = np.linalg.cholesky(H + damp * np.eye(n_vars))
                break
            except np.linalg.LinAlgError:
                damp *= 100.0
        else:
            raise NonconvergenceError('barrier Hessian factorization failed')
        dy = -np.linalg.solve(c_factor.T, np.linalg.solve(c_factor, grad))
        dec = float(-grad @ dy)
        if not np.isfinite(dec) or dec < 0:
            dy = -grad / max(1.0, np.linalg.norm(grad))
            dec = float(-grad @ dy)
        if dec / 2.0 <= tol_dec:
            return y, psi, chols, iters, True
        step = 1.0
        accepted = False
        while step > 1e-14:
            cand = y + step * dy
            psi_new, chols_new = _psi(groups, cand, tc)
            if psi_new is not None and psi_new <= psi - 0.25 * step * dec:
                y, psi, chols = cand, psi_new, chols_new
                accepted = True
                break
            step *= 0.5
        iters += 1
        if not accepted:
            return y, psi, chols, iters, True   # stalled: as centered as we get
        if stop_when is not None and stop_when(y):
            return y, psi, chols, iters, False
    return y, psi, chols, iters, False


def _strictly_feasible(groups, y):
    for g in groups:
        try:
            g.cholesky(y)
        except np.linalg.LinAlgError:
            return False
    return True


def _initial_slack(groups, y):
    worst = -np.inf
    for g in groups:
        S = g.values(y)
        if isinstance(S, list):
            lam = min(float(np.linalg.eigvalsh(Sb)[0]) for Sb in S)
        else:
            lam = float(np.linalg.eigvalsh(S)[:, 0].min())
        worst = max(worst, -lam)
    return worst


def _total_dim(groups):
    return sum(g.dim * g.count if not isinstance(g, ExplicitGroup)
               else sum(b.dim for b in g.blocks) for g in groups)


def solve_groups(groups, objective, n_vars, *, y0=None,
                 tol_gap_abs=1e-9, tol_gap_rel=1e-9, t0=1.0, t_factor=20.0,
                 max_newton=400, newton_per_stage=60, name=''):
    """Two-phase barrier solve over block groups.

    The returned margins are recomputed from scratch with eigenvalue
    decompositions; callers should treat `verified` (all margins >= eps/2)
    as the real feasibility statement rather than the barrier status.
    """
    log = io.StringIO()
    y = np.zeros(n_vars) if y0 is None else np.array(y0, dtype=float)
    total_iters = 0

    if not _strictly_feasible(groups, y):
        s0 = _initial_slack(groups, y) * 1.10 + 1e-6
        ys = np.concatenate([y, [s0]])
        for g in groups:
            g.slack_id = n_vars
        cs = np.zeros(n_vars + 1)
        cs[n_vars] = 1.0
        exit_level = -max(1e-9, 0.02 * max(s0, 0.0))
        t = t0 / max(s0, 1.0)
        dims = _total_dim(groups)
        status = None
        while total_iters < max_newton:
            ys, _, _, it, centered = _newton(
                groups, t * cs, ys, n_vars + 1, tol_dec=1e-8,
                max_iter=newton_per_stage,
                stop_when=lambda v: v[-1] <= exit_level)
            total_iters += it
            log.write(f'phase1 t={t:.3e} s={ys[-1]:.6e} newton={it}\n')
            if ys[-1] <= exit_level:
                status = 'feasible'
                break
            if centered and dims / t <= 1e-12 + 1e-9 * abs(ys[-1]):
                status = 'converged'
                break
            if centered:
                t *= t_factor
        for g in groups:
            g.slack_id = None
        if status is None:
            raise NonconvergenceError(
                f'phase 1 exceeded {max_newton} Newton iterations',
                diagnostics={'slack': float(ys[-1]), 'name': name})
        if ys[-1] >= 0.0:
            y_end = ys[:n_vars]
            bad = []
            for g in groups:
                mg = g.margins(y_end)
                for lbl, mv in zip(g.labels(), mg):
                    if mv <= 0.0:
                        bad.append((lbl, float(mv)))
            bad.sort(key=lambda t_: t_[1])
            raise InfeasibleError(
                f'{name or "problem"}: no strictly feasible point '
                f'(best slack {ys[-1]:.3e})',
                labels=[lbl for lbl, _ in bad[:25]])
        y = ys[:n_vars]

    # Main path-following on the true objective.
    c = np.asarray(objective, dtype=float)
    dims = _total_dim(groups)
    obj_scale = max(1.0, abs(float(c @ y)))
    t = t0 * max(1.0, dims) / obj_scale
    gap = np.inf
    while total_iters < max_newton:
        y, _, _, it, centered = _newton(groups, t * c, y, n_vars,
                                        tol_dec=1e-8,
                                        max_iter=newton_per_stage)
        total_iters += it
        gap = dims / t
        log.write(f'stage t={t:.3e} obj={float(c @ y):.9e} gap<={gap:.3e} '
                  f'newton={it}\n')
        if centered and gap <= tol_gap_abs + tol_gap_rel * abs(float(c @ y)):
            break
        if centered:
            t *= t_factor
    else:
        raise NonconvergenceError(
            f'barrier exceeded {max_newton} Newton iterations',
            diagnostics={'objective': float(c @ y), 'gap': gap, 'name': name})

    margins, labels = [], []
    for g in groups:
        margins.append(g.margins(y))
        labels.extend(g.labels())
    margins = np.concatenate(margins) if margins else np.zeros(0)
    eps_ref = max((g.eps for g in groups), default=0.0)
    verified = bool(np.all(margins >= eps_ref / 2.0 - 1e-15))
    return SolveResult(y=y, objective=float(c @ y), status='optimal',
                       margins=margins, labels=labels,
                       iterations=total_iters, gap=float(gap),
                       verified=verified, log=log.getvalue())


def sdp_minimize(problem, **options):
    """Solve an explicit SdpProblem (see lmi.SdpProblem).

    Raises InfeasibleError with the most-violated block labels, or
    NonconvergenceError past the iteration budget. Margins in the result are
    independent eigenvalue checks of every block at the returned point.
    """
    group = ExplicitGroup(problem.blocks, problem.epsilon)
    return solve_groups([group], problem.objective, problem.n_vars, **options)

"""Dense two-phase tableau simplex for small linear programs.

Solves ``min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0``.
Free variables must be split by the caller. Pricing is Dantzig's
most-negative reduced cost; after a run of degenerate pivots the solver
switches to Bland's smallest-index rule, which cannot cycle, and returns to
Dantzig pricing after the next pivot that makes progress.

:class:`Simplex` keeps the final tableau, so a sequence of problems sharing
the same constraints but different costs can be re-optimized from the
previous basis (the basis stays primal feasible).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LPError(ArithmeticError):
    pass


class LPInfeasible(LPError):
    pass


class LPUnbounded(LPError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    iterations: int


class Simplex:
    """Feasible tableau for fixed constraints; :meth:`minimize` takes a cost vector."""

    def __init__(self, A_ub=None, b_ub=None, A_eq=None, b_eq=None, n_vars=None, tol=1e-9,
                 degenerate_limit=50, max_iter=None):
        blocks = [np.asarray(a, float) for a in (A_ub, A_eq) if a is not None and np.size(a)]
        if n_vars is None:
            if not blocks:
                raise ValueError("n_vars is required without constraints")
            n_vars = blocks[0].shape[1]
        A_ub = np.zeros((0, n_vars)) if A_ub is None else np.asarray(A_ub, float).reshape(-1, n_vars)
        A_eq = np.zeros((0, n_vars)) if A_eq is None else np.asarray(A_eq, float).reshape(-1, n_vars)
        b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float).reshape(-1)
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).reshape(-1)
        if b_ub.size != A_ub.shape[0] or b_eq.size != A_eq.shape[0]:
            raise ValueError("constraint matrix and right-hand side sizes differ")
        self.n = n_vars
        self.tol = tol
        self.degenerate_limit = degenerate_limit
        self.iterations = 0
        m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
        m = m_ub + m_eq
        self.max_iter = max_iter if max_iter is not None else 50 * (m + n_vars) + 1000

        # standard form: [A_ub I; A_eq 0] [x; s] = b with b >= 0
        A = np.zeros((m, n_vars + m_ub))
        A[:m_ub, :n_vars] = A_ub
        A[:m_ub, n_vars:] = np.eye(m_ub)
        A[m_ub:, :n_vars] = A_eq
        b = np.concatenate([b_ub, b_eq])
        neg = b < 0
        A[neg] *= -1
        b[neg] *= -1
        n_std = A.shape[1]

        basis = -np.ones(m, dtype=int)
        ok_slack = np.flatnonzero(~neg[:m_ub])
        basis[ok_slack] = n_vars + ok_slack
        # crash basis: any column with a single positive entry can start basic in its row
        nz = A != 0
        single = np.flatnonzero(nz.sum(axis=0) == 1)
        rows_of = np.argmax(nz[:, single], axis=0) if m else np.zeros(0, dtype=int)
        for j, r in zip(single, rows_of):
            if basis[r] < 0 and A[r, j] > 0:
                b[r] /= A[r, j]
                A[r] /= A[r, j]
                basis[r] = j
        need = np.flatnonzero(basis < 0)
        n_art = need.size
        T = np.zeros((m + 1, n_std + n_art + 1))
        T[:m, :n_std] = A
        T[need, n_std + np.arange(n_art)] = 1.0
        T[:m, -1] = b
        basis[need] = n_std + np.arange(n_art)
        self.T, self.basis, self.n_std = T, basis, n_std

        if n_art:
            # phase 1: minimize the sum of artificials
            T[m, :] = 0.0
            T[m, n_std:n_std + n_art] = 1.0
            T[m] -= T[need].sum(axis=0)
            self._run(allowed=n_std + n_art)
            scale = max(1.0, np.abs(b).max(initial=0.0))
            if -T[m, -1] > 1e-7 * scale:
                raise LPInfeasible(f"infeasible (phase-1 residual {-T[m, -1]:.3g})")
            self._drive_out_artificials(n_std)
            self.T = np.delete(self.T, np.s_[n_std:n_std + n_art], axis=1)

    def _drive_out_artificials(self, n_std):
        keep = []
        for r in range(self.basis.size):
            if self.basis[r] < n_std:
                keep.append(r)
                continue
            row = self.T[r, :n_std]
            cand = np.flatnonzero(np.abs(row) > 1e-9)
            if cand.size:
                self._pivot(r, int(cand[np.argmax(np.abs(row[cand]))]))
                keep.append(r)
            # otherwise the row is redundant and is dropped
        rows = keep + [self.T.shape[0] - 1]
        self.T = self.T[rows]
        self.basis = self.basis[keep]

    def _pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        T[:, q] = 0.0
        T[r, q] = 1.0
        self.basis[r] = q
        self.iterations += 1

    def _run(self, allowed):
        T = self.T
        m = self.basis.size
        tol = self.tol
        bland = False
        degenerate_run = 0
        start = self.iterations
        while True:
            if self.iterations - start > self.max_iter:
                raise LPError("simplex iteration limit reached")
            T = self.T
            red = T[m, :allowed]
            if bland:
                cand = np.flatnonzero(red < -tol)
                if cand.size == 0:
                    return
                q = int(cand[0])
            else:
                q = int(np.argmin(red))
                if red[q] >= -tol:
                    return
            col = T[:m, q]
            pos = col > tol
            if not pos.any():
                raise LPUnbounded("objective is unbounded below")
            rhs = np.maximum(T[:m, -1], 0.0)
            ratios = np.full(m, np.inf)
            ratios[pos] = rhs[pos] / col[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, best))
            if bland:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                r = int(ties[np.argmax(col[ties])])
            self._pivot(r, q)
            if best <= tol:
                degenerate_run += 1
                if degenerate_run >= self.degenerate_limit:
                    bland = True
            else:
                degenerate_run = 0
                bland = False

    def minimize(self, c) -> LPResult:
        """Optimize cost ``c`` (length ``n_vars``) starting from the current basis."""
        c = np.asarray(c, dtype=float).reshape(-1)
        if c.size != self.n:
            raise ValueError(f"cost has length {c.size}, expected {self.n}")
        T = self.T
        m = self.basis.size
        cost = np.zeros(self.n_std)
        cost[:self.n] = c
        T[m, :self.n_std] = cost
        T[m, -1] = 0.0
        T[m] -= cost[self.basis] @ T[:m]
        start = self.iterations
        self._run(allowed=self.n_std)
        x_std = np.zeros(self.n_std)
        x_std[self.basis] = np.maximum(self.T[:m, -1], 0.0)
        x = x_std[:self.n]
        return LPResult(x, float(c @ x), self.iterations - start)


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol=1e-9) -> LPResult:
    """``min c'x`` subject to the constraints and ``x >= 0``."""
    c = np.asarray(c, dtype=float).reshape(-1)
    lp = Simplex(A_ub, b_ub, A_eq, b_eq, n_vars=c.size, tol=tol)
    res = lp.minimize(c)
    res.iterations = lp.iterations
    return res

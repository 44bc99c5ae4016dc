"""Primal-dual interior-point engine for convex minimax problems over the
sensitivity polytope.

Solves::

    minimize    max_k f_k(rho)
    subject to  g_j(rho) <= 0                  (linear side constraints)
                sum_j rho_ij = 1               for every stratum i
                s_i <= rho_ij <= Gamma s_i     (Charnes-Cooper form)

with ``f_k(rho) = sq_k (t_k - a_k'rho)^2 + c_k sum_i (a_ik'rho_i)^2
+ lin_k'rho + k0_k``.  Each ``f_k`` is a convex quadratic whose Hessian is
``2 sq_k a_k a_k'`` (rank one) plus a block-diagonal part with one rank-one
block per stratum, so every Newton system is block diagonal plus a low-rank
coupling.  Blocks are solved in batches grouped by stratum size and the
coupling is folded back in with the Woodbury identity.

Iterations follow Mehrotra's predictor-corrector scheme.  Every iterate also
yields a Lagrangian lower bound: the current multipliers give a convex
combination of the objectives whose linearization, minimized exactly over the
polytope, bounds the optimum from below.  The
solver stops when the certified gap ``ub - lb`` is below tolerance or when a
caller-supplied sign question is settled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SolverError(RuntimeError):
    """Newton budget exhausted before the gap closed."""

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


@dataclass(frozen=True)
class Layout:
    """Stratum structure of a flat, stratum-contiguous member vector."""

    ptr: np.ndarray
    sizes: np.ndarray
    member: np.ndarray
    groups: tuple  # of (n, stratum ids (G,), member rows (G, n))

    @classmethod
    def from_sizes(cls, sizes) -> "Layout":
        sizes = np.asarray(sizes, dtype=np.intp)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        member = np.repeat(np.arange(len(sizes)), sizes)
        groups = []
        for n in np.unique(sizes):
            sid = np.flatnonzero(sizes == n)
            rows = ptr[sid][:, None] + np.arange(n)[None, :]
            groups.append((int(n), sid, rows))
        return cls(ptr, sizes, member, tuple(groups))

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.sizes)

    @property
    def N(self) -> int:
        return int(self.ptr[-1])

    def ssum(self, x):
        return np.add.reduceat(x, self.ptr[:-1], axis=0)

    def uniform(self) -> np.ndarray:
        return 1.0 / self.sizes[self.member]

    def linear_min(self, g: np.ndarray, gamma: float) -> np.ndarray:
        """Per-stratum ``min_{v in P_i(Gamma)} g_i'v``.

        The polytope's vertices put weight ``Gamma`` on a nonempty proper
        subset of members and weight 1 elsewhere, normalized; the best subset
        for a linear objective is a prefix of the ascending order of ``g_i``.
        """
        out = np.empty(self.I)
        for n, sid, rows in self.groups:
            v = np.sort(g[rows], axis=1)
            cs = np.concatenate([np.zeros((len(sid), 1)), np.cumsum(v, axis=1)], axis=1)
            c = np.arange(n + 1)
            vals = (gamma * cs + (cs[:, -1:] - cs)) / (c * gamma + n - c)
            out[sid] = vals.min(axis=1)
        return out


@dataclass(frozen=True)
class QuadSystem:
    """K convex quadratics in the form documented at module level."""

    sq: np.ndarray
    t: np.ndarray
    A: np.ndarray
    c: np.ndarray
    lin: np.ndarray
    k0: np.ndarray

    @property
    def K(self) -> int:
        return len(self.t)

    def scaled(self, factor: float) -> "QuadSystem":
        return QuadSystem(self.sq * factor, self.t, self.A, self.c * factor,
                          self.lin * factor, self.k0 * factor)

    def parts(self, rho: np.ndarray, layout: Layout):
        mu = self.A.T @ rho
        m = layout.ssum(self.A * rho[:, None])
        f = self.sq * (self.t - mu) ** 2 + self.c * (m * m).sum(axis=0) + self.lin.T @ rho + self.k0
        return f, mu, m

    def values(self, rho: np.ndarray, layout: Layout) -> np.ndarray:
        return self.parts(rho, layout)[0]

    def grads(self, rho, layout: Layout, mu, m) -> np.ndarray:
        return (-2.0 * self.sq * (self.t - mu)) * self.A \
            + 2.0 * self.c * m[layout.member] * self.A + self.lin


@dataclass(frozen=True)
class IPMConfig:
    gap_tol: float = 1e-10   # certified gap, relative to max(1, |ub|) in scaled units
    max_iter: int = 200
    step_frac: float = 0.99


@dataclass
class IPMResult:
    rho: np.ndarray
    s: np.ndarray
    ub: float
    lb: float
    f: np.ndarray
    weights: np.ndarray
    iterations: int
    status: str


def _interior_start(layout: Layout, gamma: float, rho0, cons=None):
    """Strictly interior ``(rho, s)``; strata of ``rho0`` hugging the box are
    pulled toward uniform by the smallest tried weight that keeps ``cons``."""
    u = layout.uniform()
    if rho0 is None:
        rho = u.copy()
    else:
        rho = np.asarray(rho0, float)
        rho = rho / layout.ssum(rho)[layout.member]
        mx = np.maximum.reduceat(rho, layout.ptr[:-1])
        mn = np.minimum.reduceat(rho, layout.ptr[:-1])
        tight = (mx >= gamma * mn * (1 - 1e-4))[layout.member]
        if np.any(tight):
            base = rho
            for eps in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
                rho = np.where(tight, (1 - eps) * base + eps * u, base)
                if cons is None or np.all(np.asarray(cons[0]).T @ rho < np.asarray(cons[1])):
                    break
    mx = np.maximum.reduceat(rho, layout.ptr[:-1])
    mn = np.minimum.reduceat(rho, layout.ptr[:-1])
    s = np.sqrt(mx / gamma * mn)
    return rho, s


def _max_step(x, dx):
    """Largest ``a <= 1`` keeping ``x + a dx >= 0`` (``x > 0``)."""
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-x[neg] / dx[neg])))


class _Newton:
    """Reduced KKT operator at one iterate, with a structured solver.

    Unknowns are ``(d_rho, d_s, nu)`` where ``nu`` holds the multipliers of
    the per-stratum equalities.  The block-diagonal part is inverted per
    stratum and the low-rank coupling is added back with the Woodbury
    identity; a few rounds of iterative refinement against the exact
    operator recover the accuracy lost when the barrier weights spread over
    many orders of magnitude.
    """

    refine_steps = 4

    def __init__(self, layout, gamma, F, G, Gc, z_r, D_r, D_lo, D_hi, D_e):
        self.layout, self.gamma = layout, gamma
        self.G, self.D_r = G, D_r
        self.Dsum = float(D_r.sum())
        hrr = D_lo + D_hi
        hrs = -(D_lo + gamma * D_hi)
        hss = layout.ssum(D_lo + gamma * gamma * D_hi)
        bc = 2.0 * F.c * z_r
        self.mats, self.invs = [], []
        for n, sid, rows in layout.groups:
            g = len(sid)
            M = np.zeros((g, n + 2, n + 2))
            Ab = F.A[rows]  # (g, n, K)
            M[:, :n, :n] = np.einsum("gik,gjk->gij", Ab * bc, Ab)
            idx = np.arange(n)
            M[:, idx, idx] += hrr[rows]
            M[:, :n, n] = hrs[rows]
            M[:, n, :n] = hrs[rows]
            M[:, n, n] = hss[sid]
            M[:, :n, n + 1] = 1.0
            M[:, n + 1, :n] = 1.0
            self.mats.append(M)
            self.invs.append(np.linalg.inv(M))
        # low-rank terms sum_c W_c v_c v_c' with v = (V column, y coefficient)
        sq_idx = np.flatnonzero(F.sq > 0)
        K = G.shape[1]
        self.V = np.concatenate([F.A[:, sq_idx], -G, Gc], axis=1)
        W = np.concatenate([2.0 * F.sq[sq_idx] * z_r[sq_idx], D_r, D_e])
        self.W = np.maximum(W, 1e-250)
        self.ey = np.zeros(self.V.shape[1])
        self.ey[len(sq_idx):len(sq_idx) + K] = 1.0
        I = layout.I
        m = self.V.shape[1]
        zeros = np.zeros((I, m))
        self.BV = self._block(self.invs, self.V, zeros, zeros)
        # bordered system in (multipliers, dy); well conditioned even when
        # some weights are huge because those enter through 1 / W
        S = np.zeros((m + 1, m + 1))
        S[:m, :m] = self.V.T @ self.BV[0] + np.diag(1.0 / self.W)
        S[:m, m] = -self.ey
        S[m, :m] = self.ey
        self.S = S

    def _block(self, ops, x_rho, x_s, x_nu):
        """Apply per-stratum matrices ``ops`` to stacked ``(rho, s, nu)``."""
        layout = self.layout
        o_rho = np.empty_like(x_rho)
        o_s = np.empty_like(x_s)
        o_nu = np.empty_like(x_nu)
        for (n, sid, rows), Mx in zip(layout.groups, ops):
            v = np.concatenate([x_rho[rows], x_s[sid][:, None, :], x_nu[sid][:, None, :]], axis=1)
            out = np.einsum("gij,gjm->gim", Mx, v)
            o_rho[rows] = out[:, :n]
            o_s[sid] = out[:, n]
            o_nu[sid] = out[:, n + 1]
        return o_rho, o_s, o_nu

    def _apply(self, x, dy):
        o = self._block(self.mats, *x)
        lam = self.W * (self.V.T @ x[0][:, 0] + self.ey * dy)
        return (o[0] + (self.V @ lam)[:, None], o[1], o[2]), float(self.ey @ lam)

    def _inverse(self, r, ry):
        xb = self._block(self.invs, *r)
        m = len(self.W)
        rhs = np.concatenate([self.V.T @ xb[0][:, 0], [ry]])
        sol = np.linalg.solve(self.S, rhs)
        lam, dy = sol[:m], sol[m]
        x = tuple(xi - (bv @ lam)[:, None] for xi, bv in zip(xb, self.BV))
        return x, float(dy)

    def solve(self, g_rho, g_s, g_y):
        """Newton step for gradient ``(g_rho, g_s, g_y)`` of the merit."""
        rhs = (-g_rho[:, None], -g_s[:, None], np.zeros((self.layout.I, 1)))
        ry = -g_y
        x, dy = self._inverse(rhs, ry)
        scale = max(float(np.abs(rhs[0]).max()), float(np.abs(rhs[1]).max()), abs(ry), 1e-300)
        for _ in range(self.refine_steps):
            ax, ay = self._apply(x, dy)
            res = tuple(b - a for b, a in zip(rhs, ax))
            worst = max(float(np.abs(r_).max()) for r_ in res)
            if max(worst, abs(ry - ay)) <= 1e-15 * scale:
                break
            dx, ddy = self._inverse(res, ry - ay)
            x = tuple(xi + di for xi, di in zip(x, dx))
            dy += ddy
        return x[0][:, 0], x[1][:, 0], dy


def solve(layout: Layout, gamma: float, funcs: QuadSystem, cons=None, rho0=None,
          cfg: IPMConfig = IPMConfig(), stop_ub_below: float | None = None,
          stop_lb_above: float | None = None) -> IPMResult:
    """Minimize ``max_k f_k`` over the polytope (optionally with ``cons``).

    ``cons = (Gc, h)`` encodes ``Gc' rho <= h`` and ``rho0`` must satisfy it
    strictly.  ``stop_ub_below`` / ``stop_lb_above`` end the solve as soon as
    the upper bound drops below / the lower bound rises above that value
    (both in the caller's units).
    """
    N = layout.N
    mem = layout.member
    if gamma < 1:
        raise ValueError("Gamma must be >= 1")
    if gamma - 1.0 <= 1e-12:
        rho = layout.uniform()
        f = funcs.values(rho, layout)
        if cons is not None and np.any(np.asarray(cons[0]).T @ rho - cons[1] > 0):
            raise ValueError("side constraints infeasible at Gamma = 1")
        ub = float(f.max())
        w = (f == ub).astype(float)
        return IPMResult(rho, rho.copy(), ub, ub, f, w / w.sum(), 0, "exact")

    rho, s = _interior_start(layout, gamma, rho0, cons)
    f0 = funcs.values(rho, layout)
    # bounds on the variance and linear parts also set the scale when f0 vanishes
    amax = np.maximum.reduceat(np.abs(funcs.A), layout.ptr[:-1], axis=0).sum(axis=0)
    a2max = np.maximum.reduceat(funcs.A ** 2, layout.ptr[:-1], axis=0).sum(axis=0)
    lmax = np.maximum.reduceat(np.abs(funcs.lin), layout.ptr[:-1], axis=0).sum(axis=0)
    var_scale = float(np.max(np.abs(funcs.c) * a2max + 1e-3 * funcs.sq * amax ** 2))
    scale = max(float(np.max(np.abs(f0))), var_scale, float(lmax.max()), 1e-300)
    F = funcs.scaled(1.0 / scale)
    if cons is not None:
        Gc, h = np.asarray(cons[0], float), np.asarray(cons[1], float)
        if Gc.ndim == 1:
            Gc, h = Gc[:, None], np.atleast_1d(h)
        if np.any(Gc.T @ rho - h >= 0):
            raise ValueError("starting point violates the side constraints")
        hs = h / scale
        Gcs = Gc / scale
    else:
        Gcs, hs = np.zeros((N, 0)), np.zeros(0)
    J = Gcs.shape[1]
    K = F.K
    m_ineq = K + 2 * N + J

    f, mu, mm = F.parts(rho, layout)
    y = float(f.max()) + 1.0
    # slack of y >= f_k; the residual p = y - f - r is driven to zero by Newton
    r = y - f
    p = np.zeros(K)
    lo = rho - s[mem]
    hi = gamma * s[mem] - rho
    e = hs - Gcs.T @ rho
    # start on the central path with multipliers of the y-row summing to one
    mu0 = 1.0 / float((1.0 / r).sum())
    z_r, z_lo, z_hi, z_e = mu0 / r, mu0 / lo, mu0 / hi, mu0 / e

    best = None
    lb_best = -np.inf
    status = "iteration-limit"
    it = 0
    for it in range(cfg.max_iter + 1):
        G = F.grads(rho, layout, mu, mm)
        ub = float(f.max())
        # Lagrangian lower bound from the current multipliers
        lam = z_r / z_r.sum()
        theta = z_e / z_r.sum()
        gL = G @ lam + Gcs @ theta
        lb = float(lam @ f - theta @ e + (layout.linear_min(gL, gamma) - layout.ssum(gL * rho)).sum())
        lb_best = max(lb_best, lb)
        if best is None or ub < best[2]:
            best = (rho.copy(), s.copy(), ub, f.copy(), lam.copy())
        tol = cfg.gap_tol * max(1.0, abs(best[2]))
        if best[2] - lb_best <= tol:
            status = "optimal"
            break
        if stop_ub_below is not None and best[2] * scale < stop_ub_below:
            status = "ub-below"
            break
        if stop_lb_above is not None and lb_best * scale > stop_lb_above:
            status = "lb-above"
            break
        if it == cfg.max_iter:
            break

        cvals = np.concatenate([r, lo, hi, e])
        zvals = np.concatenate([z_r, z_lo, z_hi, z_e])
        mu_gap = float(cvals @ zvals) / m_ineq
        if mu_gap <= 1e-15 * max(1.0, abs(best[2])):
            # complementarity exhausted; further steps only lose precision
            status = "stalled"
            break
        D_r, D_lo, D_hi, D_e = z_r / r, z_lo / lo, z_hi / hi, z_e / e
        newton = _Newton(layout, gamma, F, G, Gcs, z_r, D_r, D_lo, D_hi, D_e)

        def direction(b_r, b_lo, b_hi, b_e):
            b_r = b_r - D_r * p
            g_y = 1.0 - b_r.sum()
            g_rho = G @ b_r - b_lo + b_hi + Gcs @ b_e
            g_s = layout.ssum(b_lo - gamma * b_hi)
            d_rho, d_s, dy = newton.solve(g_rho, g_s, g_y)
            dc_r = dy - G.T @ d_rho + p
            dc_lo = d_rho - d_s[mem]
            dc_hi = gamma * d_s[mem] - d_rho
            dc_e = -Gcs.T @ d_rho
            dz = [b - z - D * dc for b, z, D, dc, _ in
                  ((b_r + D_r * p, z_r, D_r, dc_r, p), (b_lo, z_lo, D_lo, dc_lo, 0.0),
                   (b_hi, z_hi, D_hi, dc_hi, 0.0), (b_e, z_e, D_e, dc_e, 0.0))]
            return d_rho, d_s, dy, [dc_r, dc_lo, dc_hi, dc_e], dz

        def step_length(d_rho, dy, dc, dz):
            a = min(_max_step(r, dc[0]), _max_step(lo, dc[1]), _max_step(hi, dc[2]),
                    _max_step(e, dc[3]))
            a = min(a, _max_step(zvals, np.concatenate(dz)))
            return a

        zero = (np.zeros(K), np.zeros(N), np.zeros(N), np.zeros(J))
        d_rho, d_s, dy, dc, dz = direction(*zero)
        a_aff = step_length(d_rho, dy, dc, dz)
        dcv, dzv = np.concatenate(dc), np.concatenate(dz)
        mu_aff = float((cvals + a_aff * dcv) @ (zvals + a_aff * dzv)) / m_ineq
        sigma = min(1.0, (max(mu_aff, 0.0) / mu_gap) ** 3)
        corr = sigma * mu_gap - dcv * dzv
        pieces = np.split(corr / cvals, [K, K + N, K + 2 * N])
        d_rho, d_s, dy, dc, dz = direction(*pieces)
        a = cfg.step_frac * step_length(d_rho, dy, dc, dz)

        rho = rho + a * d_rho
        s = s + a * d_s
        y = y + a * dy
        z_r, z_lo, z_hi, z_e = (z + a * d for z, d in zip((z_r, z_lo, z_hi, z_e), dz))
        # keep the equality exact against drift
        rho = rho / layout.ssum(rho)[mem]
        f, mu, mm = F.parts(rho, layout)
        r = r + a * dc[0]
        p = y - f - r
        lo = rho - s[mem]
        hi = gamma * s[mem] - rho
        e = hs - Gcs.T @ rho
        if np.any(lo <= 0) or np.any(hi <= 0) or np.any(e <= 0):
            # renormalization pushed a slack to the boundary; stop with the incumbent
            status = "stalled"
            break

    rho_b, s_b, ub_b, f_b, lam_b = best
    res = IPMResult(rho_b, s_b * 1.0, ub_b * scale, lb_best * scale, f_b * scale, lam_b, it, status)
    if status in ("optimal", "ub-below", "lb-above"):
        return res
    if ub_b - lb_best <= 1e-7 * max(1.0, abs(ub_b)):
        res.status = "optimal-loose"
        return res
    raise SolverError(f"interior-point gap {(ub_b - lb_best) * scale:.3g} not closed "
                      f"after {it} iterations ({status})", incumbent=res)

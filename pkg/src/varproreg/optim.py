"""Trust-region Newton, Levenberg-Marquardt and CG on the normal equations."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DefinitenessError, NumericalError


class OptimizationError(NumericalError):
    """Optimizer aborted; the partial trace is attached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrustRegionConfig:
    initial_radius: float = 1.0
    max_radius: float = 100.0
    eta_accept: float = 0.1
    grad_tol: float = 1e-8
    max_iters: int = 100

    def __post_init__(self):
        if not 0 < self.initial_radius <= self.max_radius:
            raise ContractError("need 0 < initial_radius <= max_radius")
        if not 0 < self.eta_accept <= 0.25:
            raise ContractError("eta_accept must lie in (0, 1/4]")
        if self.grad_tol <= 0:
            raise ContractError("grad_tol must be positive")


@dataclass
class LMConfig:
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    grad_tol: float = 1e-10
    max_iters: int = 100

    def __post_init__(self):
        if not self.damping_up > 1 > self.damping_down > 0:
            raise ContractError("need damping_up > 1 > damping_down > 0")
        if self.initial_damping <= 0:
            raise ContractError("initial_damping must be positive")


@dataclass
class OptTrace:
    """Per-iteration records plus a terminal status."""

    records: list = field(default_factory=list)
    status: str = "running"

    COLUMNS = ("iter", "loss", "grad_norm", "step_norm", "accepted", "control_param")

    def append(self, **rec):
        self.records.append(rec)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    @property
    def iterations(self):
        """Trial steps taken (records after the initial point)."""
        return len(self.records) - 1

    @property
    def accepted_losses(self):
        return np.array([r["loss"] for r in self.records if r["accepted"]])

    def to_csv(self, path, extra=()):
        cols = list(self.COLUMNS) + [c for c in extra if c not in self.COLUMNS]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# trust region


def solve_tr_subproblem(H, g, radius, return_multiplier=False, tol=1e-12, max_iter=200):
    """Minimise ``g.s + s.H.s/2`` over ``||s|| <= radius`` (More-Sorensen).

    Works in the eigenbasis of ``H`` so the secular equation is explicit;
    the hard case (``g`` orthogonal to the lowest eigenspace of an indefinite
    ``H``) is handled by moving along the lowest eigenvector to the boundary.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lam, Q = np.linalg.eigh(0.5 * (H + H.T))
    gt = Q.T @ g
    gnorm = np.linalg.norm(g)
    lam1 = lam[0]
    scale = max(1.0, np.abs(lam).max())

    def step(sigma, mask=None):
        d = lam + sigma
        if mask is None:
            return -gt / d
        out = np.zeros_like(gt)
        out[mask] = -gt[mask] / d[mask]
        return out

    def done(s, sigma):
        s = Q @ s
        return (s, sigma) if return_multiplier else s

    if lam1 > 0:
        s = step(0.0)
        if np.linalg.norm(s) <= radius:
            return done(s, 0.0)

    lo = max(0.0, -lam1)
    low_space = np.abs(lam - lam1) <= 1e-10 * scale
    if lam1 <= 0 and np.all(np.abs(gt[low_space]) <= 1e-12 * max(gnorm, 1.0)):
        s = step(lo, ~low_space)
        ns = np.linalg.norm(s)
        if ns <= radius:
            tau = math.sqrt(max(radius ** 2 - ns ** 2, 0.0))
            s[np.argmax(low_space)] += tau
            return done(s, lo)

    # ||s(sigma)|| decreases on (lo, inf); bracket the root of 1/||s|| - 1/radius
    hi = lo + gnorm / radius + scale
    a, b = lo, hi
    sigma = hi
    for _ in range(max_iter):
        s = step(sigma)
        ns = np.linalg.norm(s)
        if abs(ns - radius) <= tol * radius:
            break
        if ns > radius:
            a = sigma
        else:
            b = sigma
        # Newton on phi(sigma) = 1/||s|| - 1/radius
        dphi = np.sum(gt ** 2 / (lam + sigma) ** 3) / ns ** 3
        phi = 1.0 / ns - 1.0 / radius
        trial = sigma - phi / dphi if dphi > 0 else np.nan
        sigma = trial if a < trial < b else 0.5 * (a + b)
        if b - a <= 1e-15 * max(1.0, b):
            break
    else:  # pragma: no cover - bisection always shrinks the bracket
        raise NumericalError(f"trust-region subproblem did not converge (radius={radius}, "
                             f"lambda_min={lam1}, |g|={gnorm})")
    return done(step(sigma), sigma)


def trust_region_newton(loss, grad, hess, w0, cfg=None, callback=None):
    """Exact-Hessian trust-region Newton.

    Returns ``(w, H, trace)``; ``H`` is the Hessian at the final accepted
    iterate so callers can reuse it.
    """
    cfg = cfg or TrustRegionConfig()
    trace = OptTrace()
    w = np.array(w0, dtype=float)
    f = float(loss(w))
    if not np.isfinite(f):
        trace.status = "nonfinite"
        raise OptimizationError("non-finite loss at the starting point", trace)
    g, H = np.asarray(grad(w), float), np.asarray(hess(w), float)
    radius = cfg.initial_radius
    trace.append(iter=0, loss=f, grad_norm=np.linalg.norm(g), step_norm=0.0,
                 accepted=True, control_param=radius, w=w.copy())
    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g) <= cfg.grad_tol:
            trace.status = "converged"
            break
        s = solve_tr_subproblem(H, g, radius)
        ns = np.linalg.norm(s)
        pred = -(g @ s + 0.5 * s @ H @ s)
        if not pred > 0:
            trace.status = "no_progress"
            break
        f_new = float(loss(w + s))
        if not np.isfinite(f_new):
            trace.status = "nonfinite"
            raise OptimizationError("non-finite loss at a trial point", trace)
        rho = (f - f_new) / pred
        accepted = rho >= cfg.eta_accept
        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75 and ns >= 0.99 * radius:
            radius = min(2.0 * radius, cfg.max_radius)
        if accepted:
            w = w + s
            f = f_new
            g, H = np.asarray(grad(w), float), np.asarray(hess(w), float)
        trace.append(iter=it, loss=f, grad_norm=np.linalg.norm(g), step_norm=ns,
                     accepted=accepted, control_param=radius, w=w.copy(), rho=rho)
        if callback is not None:
            callback(trace.records[-1])
        if radius < 1e-14 * (1.0 + np.linalg.norm(w)):
            trace.status = "radius_collapse"
            break
    else:
        trace.status = "converged" if np.linalg.norm(g) <= cfg.grad_tol else "max_iters"
    return w, H, trace


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


def levenberg_marquardt(residual, jac, w0, cfg=None, callback=None):
    """Minimise ``||r(w)||^2`` with identity-damped Gauss-Newton steps.

    ``max_iters`` counts accepted steps; rejected trials raise the damping
    until it exceeds ``1e12`` times its initial value (status "stagnated").
    Returns ``(w, trace)``; the final Jacobian is stored as ``trace.jacobian``.
    """
    cfg = cfg or LMConfig()
    trace = OptTrace()
    w = np.array(w0, dtype=float)
    r = np.asarray(residual(w), float)
    f = float(r @ r)
    J = np.asarray(jac(w), float)
    g = 2.0 * J.T @ r
    mu = cfg.initial_damping
    trace.append(iter=0, loss=f, grad_norm=np.linalg.norm(g), step_norm=0.0,
                 accepted=True, control_param=mu, w=w.copy())
    accepted_steps, it = 0, 0
    trace.status = "max_iters"
    while accepted_steps < cfg.max_iters:
        if np.linalg.norm(g) <= cfg.grad_tol:
            trace.status = "converged"
            break
        it += 1
        A = J.T @ J + mu * np.eye(w.size)
        s = np.linalg.solve(A, -(J.T @ r))
        r_new = np.asarray(residual(w + s), float)
        f_new = float(r_new @ r_new)
        accepted = bool(np.isfinite(f_new) and f_new < f)
        if accepted:
            w, r, f = w + s, r_new, f_new
            J = np.asarray(jac(w), float)
            g = 2.0 * J.T @ r
            mu *= cfg.damping_down
            accepted_steps += 1
        else:
            mu *= cfg.damping_up
        trace.append(iter=it, loss=f, grad_norm=np.linalg.norm(g), step_norm=np.linalg.norm(s),
                     accepted=accepted, control_param=mu, w=w.copy())
        if callback is not None:
            callback(trace.records[-1])
        if mu > 1e12 * cfg.initial_damping:
            trace.status = "stagnated"
            break
    else:
        if np.linalg.norm(g) <= cfg.grad_tol:
            trace.status = "converged"
    trace.jacobian = J
    return w, trace


# ---------------------------------------------------------------------------
# conjugate gradients on the normal equations


@dataclass(frozen=True)
class ProjectionPolicy:
    """CG budget and which iterations carry derivatives.

    ``diff_mode`` is ``"none"``, ``"full"`` or ``"last_fraction"``; with the
    latter only iterations from ``ceil((1 - fraction) * cg_iters)`` onwards
    propagate tangents, starting from a zero tangent state.
    """

    cg_iters: int
    diff_mode: str = "full"
    fraction: float = 1.0
    residual_tol: Optional[float] = None

    def __post_init__(self):
        if self.cg_iters < 0:
            raise ContractError("cg_iters must be non-negative")
        if self.diff_mode not in ("none", "full", "last_fraction"):
            raise ContractError(f"unknown diff_mode {self.diff_mode!r}")
        if not 0 < self.fraction <= 1:
            raise ContractError("fraction must lie in (0, 1]")

    @classmethod
    def full(cls, cg_iters, **kw):
        return cls(cg_iters, "full", 1.0, **kw)

    @classmethod
    def none(cls, cg_iters, **kw):
        return cls(cg_iters, "none", 1.0, **kw)

    @classmethod
    def last_fraction(cls, fraction, cg_iters, **kw):
        return cls(cg_iters, "last_fraction", float(fraction), **kw)

    @property
    def boundary(self):
        """First differentiated iteration (``cg_iters`` means never)."""
        if self.diff_mode == "none":
            return self.cg_iters
        if self.diff_mode == "full":
            return 0
        return math.ceil(round((1.0 - self.fraction) * self.cg_iters, 9))

    @property
    def label(self):
        if self.diff_mode == "last_fraction":
            return f"last{self.fraction:g}"
        return self.diff_mode


class DenseOperator:
    """A dense matrix (possibly carrying tangents) as a linear operator."""

    def __init__(self, A):
        self.A = A

    @property
    def shape(self):
        return ad.shape_of(self.A)

    @property
    def width(self):
        return self.A.width if isinstance(self.A, ad.Tangent) else 0

    def matvec(self, x):
        return ad.sum_(ad.mul(self.A, ad.take(x, (None, slice(None)))), axis=1)

    def rmatvec(self, y):
        return ad.sum_(ad.mul(self.A, ad.take(y, (slice(None), None))), axis=0)

    def detached(self):
        return DenseOperator(ad.primal(self.A))


CONVERGED_TOL = 1e-13  # ||A^T r|| / ||A^T b|| at which CG stops regardless of budget


def cg_normal(op, b, policy, x0=None, history=None):
    """CGLS iterations on ``A^T A x = A^T b`` under a differentiation policy.

    ``op`` provides ``matvec``, ``rmatvec``, ``detached()``, ``shape`` and
    ``width``.  Runs ``policy.cg_iters`` iterations unless the normal
    residual falls below ``policy.residual_tol`` or :data:`CONVERGED_TOL`
    (relative to its initial value).  Iterations before ``policy.boundary`` run on the detached
    operator with plain arrays; the remaining ones carry tangents.  If
    ``history`` is a list, the residual norms ``||A x_k - b||`` are appended.
    """
    n = op.shape[1]
    plain = op.detached()
    start = policy.boundary if op.width else policy.cg_iters
    x = np.zeros(n) if x0 is None else np.array(ad.primal(x0), dtype=float)
    b_val = b
    A0 = op if start == 0 else plain
    r = ad.sub(b_val, A0.matvec(x)) if x0 is not None else b_val
    s = A0.rmatvec(r)
    gamma = ad.dot(s, s)
    gamma0 = float(ad.primal(gamma))
    if history is not None:
        history.append(float(np.linalg.norm(ad.primal(r))))
    p = s
    if gamma0 > 0:
        for k in range(policy.cg_iters):
            A = op if k >= start else plain
            q = A.matvec(p)
            qq = ad.dot(q, q)
            if not float(ad.primal(qq)) > 0:
                raise DefinitenessError(f"CG breakdown at iteration {k}: p^T A^T A p <= 0")
            alpha = ad.div(gamma, qq)
            x = ad.add(x, ad.mul(alpha, p))
            r = ad.sub(r, ad.mul(alpha, q))
            s = A.rmatvec(r)
            gamma_new = ad.dot(s, s)
            if history is not None:
                history.append(float(np.linalg.norm(ad.primal(r))))
            gn = float(ad.primal(gamma_new))
            # past convergence the recurrences only amplify roundoff
            if gn <= (CONVERGED_TOL ** 2) * gamma0:
                break
            if policy.residual_tol is not None and math.sqrt(gn / gamma0) <= policy.residual_tol:
                break
            p = ad.add(s, ad.mul(ad.div(gamma_new, gamma), p))
            gamma = gamma_new
    if op.width and not isinstance(x, ad.Tangent):
        x = ad.Tangent(np.asarray(x, dtype=float), np.zeros((n, op.width)))
    return x

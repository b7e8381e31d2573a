"""Scale continuation for registration.

Along a path of minimisers ``w*(theta)`` the first-order condition
``grad_w J(w*(theta); theta) = 0`` differentiates to::

    dw*/dtheta = -H^{-1} d/dtheta grad_w J

A forward-Euler step of this ODE predicts the minimiser at the next (smaller)
``theta``; a local optimisation then corrects it.  Dropping the Euler step
gives the traditional multi-scale method.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import autodiff as ad
from .errors import ContractError, NumericalError, SingularHessianError
from .optim import (LMConfig, OptimizationError, TrustRegionConfig, levenberg_marquardt,
                    trust_region_newton)
from .registration import IDENTITY

DEFAULT_THETAS = (128.0, 64.0, 32.0, 16.0, 8.0, 4.0, 2.0, 1.0, 0.0)
HESSIAN_MODES = ("exact", "gauss_newton")
SIGNS = ("euler", "paper")
GUARD = 1e-15


@dataclass(frozen=True)
class ScaleSchedule:
    """Strictly decreasing blur scales ending at 0."""

    thetas: tuple = DEFAULT_THETAS

    def __post_init__(self):
        t = tuple(float(v) for v in self.thetas)
        object.__setattr__(self, "thetas", t)
        if not t:
            raise ContractError("schedule is empty")
        if t[-1] != 0.0:
            raise ContractError("schedule must end at theta = 0")
        if any(v < 0 for v in t):
            raise ContractError("thetas must be non-negative")
        if any(a <= b for a, b in zip(t, t[1:])):
            raise ContractError("thetas must be strictly decreasing")

    @classmethod
    def geometric(cls, top=128.0, ratio=2.0, bottom=1.0):
        vals = [float(top)]
        while vals[-1] / ratio >= bottom * (1 - 1e-12):
            vals.append(vals[-1] / ratio)
        return cls(tuple(vals) + (0.0,))

    def transitions(self):
        return list(zip(self.thetas, self.thetas[1:]))

    def __len__(self):
        return len(self.thetas)


@dataclass
class ScaleStepRecord:
    theta_from: float
    theta_to: float
    w_star_prev: np.ndarray
    w_pred: np.ndarray
    w_star_new: np.ndarray
    rel_loss_diff: float
    rel_grad_diff: float
    corrector_iters: int
    hessian_mode: str
    predictor_status: str = "ok"
    carry_iters: int = -1  # corrector iterations from w_star_prev, when compared
    final_loss: float = float("nan")


def relative_difference(base, other):
    """``(base - other) / base``, defined as 0 when ``|base| < 1e-15``."""
    return 0.0 if abs(base) < GUARD else (base - other) / base


def ode_rhs(prob, w, theta, H):
    """``-H^{-1} d/dtheta grad_w J`` by a Cholesky solve.

    Raises :class:`SingularHessianError` if ``H`` is not positive definite.
    """
    dg = np.asarray(prob.dtheta_grad(w, theta), dtype=float)
    if not np.any(dg):
        return np.zeros_like(dg)
    try:
        c = cho_factor(np.asarray(H, dtype=float))
    except LinAlgError as exc:
        raise SingularHessianError(f"Hessian at theta={theta} is not positive definite") from exc
    return -cho_solve(c, dg)


def predict(prob, w_star, theta_n, theta_next, H, sign="euler"):
    """One Euler step from ``theta_n`` to ``theta_next``.

    ``sign="euler"`` steps over the signed interval ``theta_next - theta_n``;
    ``sign="paper"`` uses ``theta_n - theta_next`` instead.
    """
    if not theta_next < theta_n:
        raise ContractError("predict needs theta_next < theta_n")
    if sign not in SIGNS:
        raise ContractError(f"sign must be one of {SIGNS}")
    dt = theta_next - theta_n if sign == "euler" else theta_n - theta_next
    return np.asarray(w_star, dtype=float) + dt * ode_rhs(prob, w_star, theta_n, H)


def correct(prob, w0, theta, hessian_mode, tr_cfg=None, lm_cfg=None):
    """Local minimisation at fixed ``theta``; returns ``(w, H, trace)``.

    Exact mode runs trust-region Newton and returns the exact Hessian at the
    final accepted iterate; Gauss-Newton mode runs Levenberg-Marquardt and
    returns the Gauss-Newton Hessian there.
    """
    if hessian_mode == "exact":
        return trust_region_newton(lambda v: prob.loss(v, theta), lambda v: prob.grad(v, theta),
                                   lambda v: prob.hess(v, theta), w0, tr_cfg)
    if hessian_mode == "gauss_newton":
        w, trace = levenberg_marquardt(
            lambda v: prob.least_squares_residual(v, theta),
            lambda v: ad.jacobian(lambda u: prob.least_squares_residual(u, theta), v),
            w0, lm_cfg)
        return w, prob.gn_hessian(w, theta), trace
    raise ContractError(f"hessian_mode must be one of {HESSIAN_MODES}")


def _corrector_iters(trace):
    return trace.iterations


def _run(prob, schedule, hessian_mode, w0, tr_cfg, lm_cfg, sign, use_predictor, compare_carry):
    records = []
    try:
        w, H, trace = correct(prob, w0, schedule.thetas[0], hessian_mode, tr_cfg, lm_cfg)
    except NumericalError as exc:
        raise OptimizationError(f"corrector failed at theta={schedule.thetas[0]}: {exc}", records) from exc
    for th, th_next in schedule.transitions():
        status = "ok" if use_predictor else "skipped"
        w_pred = w
        if use_predictor:
            try:
                w_pred = predict(prob, w, th, th_next, H, sign)
            except SingularHessianError:
                status = "singular"
        J_c, J_p = prob.loss(w, th_next), prob.loss(w_pred, th_next)
        g_c = np.linalg.norm(prob.grad(w, th_next))
        g_p = np.linalg.norm(prob.grad(w_pred, th_next))
        try:
            w_new, H, trace = correct(prob, w_pred, th_next, hessian_mode, tr_cfg, lm_cfg)
            carry = -1
            if compare_carry:
                carry = _corrector_iters(correct(prob, w, th_next, hessian_mode, tr_cfg, lm_cfg)[2])
        except NumericalError as exc:
            raise OptimizationError(f"corrector failed at theta={th_next}: {exc}", records) from exc
        records.append(ScaleStepRecord(
            th, th_next, w.copy(), np.asarray(w_pred).copy(), w_new.copy(),
            relative_difference(J_c, J_p), relative_difference(g_c, g_p),
            _corrector_iters(trace), hessian_mode, status, carry, float(trace.records[-1]["loss"])))
        w = w_new
    return w, records


def run_predictor_corrector(prob, schedule=None, hessian_mode="exact", w0=None, tr_cfg=None,
                            lm_cfg=None, sign="euler", compare_carry=False):
    """Continuation over ``schedule`` with Euler prediction between scales.

    Returns ``(w, records)`` with one :class:`ScaleStepRecord` per transition.
    A corrector failure raises :class:`OptimizationError` whose ``trace`` is
    the list of completed records.
    """
    schedule = schedule or ScaleSchedule()
    w0 = _start(prob, w0)
    return _run(prob, schedule, hessian_mode, w0, tr_cfg, lm_cfg, sign, True, compare_carry)


def run_traditional_multiscale(prob, schedule=None, w0=None, cfg=None, hessian_mode="exact"):
    """Same continuation with the previous minimiser carried over unchanged."""
    schedule = schedule or ScaleSchedule()
    w0 = _start(prob, w0)
    tr_cfg = cfg if isinstance(cfg, TrustRegionConfig) else None
    lm_cfg = cfg if isinstance(cfg, LMConfig) else None
    return _run(prob, schedule, hessian_mode, w0, tr_cfg, lm_cfg, "euler", False, False)


def run_single_scale(prob, w0=None, theta=0.0, cfg=None):
    """Trust-region Newton at one scale; returns ``(w, trace)``."""
    w, _, trace = correct(prob, _start(prob, w0), theta, "exact", cfg)
    return w, trace


def _start(prob, w0):
    return IDENTITY.copy() if w0 is None else np.asarray(w0, dtype=float)


RECORD_COLUMNS = ("theta_from", "theta_to", "rel_loss_diff", "rel_grad_diff", "corrector_iters",
                  "carry_iters", "final_loss", "hessian_mode", "predictor_status")


def records_to_csv(records, path):
    """One row per transition; parameter vectors are appended as columns."""
    p = len(records[0].w_pred) if records else 0
    cols = list(RECORD_COLUMNS) + [f"w_pred_{i}" for i in range(p)] + [f"w_star_{i}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(cols)
        for r in records:
            row = [getattr(r, c) for c in RECORD_COLUMNS]
            row += list(r.w_pred) + list(r.w_star_new)
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

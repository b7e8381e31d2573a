"""Affine registration with a sum-of-squared-differences objective.

Parameters ``w`` (length 6) map a point ``x`` to
``[[w0, w1], [w3, w4]] @ x + (w2, w5)`` in world coordinates, so the
identity is ``(1, 0, 0, 0, 1, 0)``.

The objective at blur scale ``theta`` is::

    J(w; theta) = ||T_theta(y(omega; w)) - R(omega)||^2 hx hy + lam^2 ||w - w_id||^2

with ``T_theta`` the scale-space spline of the template and ``omega`` the
reference cell centres.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .imaging import Image, ScaleSpaceFitter, eval_spline, fit_spline

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
NPARAMS = 6


def affine_params(matrix, translation):
    """Pack a 2x2 matrix and a translation into the parameter vector."""
    (a, b), (c, d) = np.asarray(matrix, dtype=float)
    tx, ty = translation
    return np.array([a, b, tx, c, d, ty], dtype=float)


def rotation_about(angle, center, shift=(0.0, 0.0)):
    """Rotation by ``angle`` radians about ``center`` followed by ``shift``."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    center = np.asarray(center, dtype=float)
    return affine_params(R, center - R @ center + np.asarray(shift, dtype=float))


def transform(w, pts):
    """Apply the affine map to an ``(n, 2)`` point array; ``w`` may carry tangents."""
    if ad.shape_of(w) != (NPARAMS,):
        raise ContractError(f"affine parameters must have length 6, got {ad.shape_of(w)}")
    x, y = pts[:, 0], pts[:, 1]
    y1 = ad.add(ad.add(ad.mul(w[0], x), ad.mul(w[1], y)), w[2])
    y2 = ad.add(ad.add(ad.mul(w[3], x), ad.mul(w[4], y)), w[5])
    return ad.stack([y1, y2], axis=1)


@dataclass
class RegistrationProblem:
    """Template/reference pair; the template is interpolated at any ``theta``."""

    template: Image
    reference: Image
    lam: float = 0.0
    _fitter: ScaleSpaceFitter = field(default=None, init=False, repr=False)
    _splines: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        t, r = self.template.grid, self.reference.grid
        if not (np.isclose(t.Lx, r.Lx) and np.isclose(t.Ly, r.Ly)):
            raise ContractError("template and reference must share the domain")
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        self._fitter = ScaleSpaceFitter(self.template)

    def spline(self, theta):
        theta = float(theta)
        if theta not in self._splines:
            self._splines[theta] = fit_spline(self.template, theta, self._fitter)
        return self._splines[theta]

    @property
    def points(self):
        return self.reference.grid.points

    @property
    def cell_area(self):
        return self.reference.grid.cell_area

    def swapped(self):
        return RegistrationProblem(self.reference, self.template, self.lam)

    # duck-typed interface used by the continuation layer
    def loss(self, w, theta):
        return loss(self, w, theta)

    def grad(self, w, theta):
        return grad_loss(self, w, theta)

    def hess(self, w, theta):
        return hess_loss(self, w, theta)

    def dtheta_grad(self, w, theta):
        return dtheta_grad(self, w, theta)

    def gn_hessian(self, w, theta):
        return gn_hessian(self, w, theta)

    def least_squares_residual(self, w, theta):
        return scaled_residual(self, w, theta)


def residual(prob, w, theta, coeffs=None):
    """``T_theta(y(omega; w)) - R(omega)`` in the reference enumeration order."""
    if theta < 0:
        raise ContractError("theta must be non-negative")
    s = prob.spline(theta)
    T = eval_spline(s, transform(w, prob.points), coeffs)
    return ad.sub(T, prob.reference.intensities)


def regularizer(w):
    d = ad.sub(w, IDENTITY)
    return ad.sum_(ad.mul(d, d))


def loss(prob, w, theta, coeffs=None):
    r = residual(prob, w, theta, coeffs)
    J = ad.mul(ad.sum_(ad.mul(r, r)), prob.cell_area)
    if prob.lam > 0:
        J = ad.add(J, ad.mul(prob.lam ** 2, regularizer(w)))
    return J


def scaled_residual(prob, w, theta):
    """Residual whose squared norm equals :func:`loss` (for Gauss-Newton)."""
    r = ad.mul(residual(prob, w, theta), np.sqrt(prob.cell_area))
    if prob.lam > 0:
        r = ad.concatenate([r, ad.mul(prob.lam, ad.sub(w, IDENTITY))])
    return r


def grad_loss(prob, w, theta):
    return ad.gradient(lambda v: loss(prob, v, theta), w)


def hess_loss(prob, w, theta):
    return ad.hessian(lambda v: loss(prob, v, theta), w)


def loss_grad_hess(prob, w, theta):
    """Loss, gradient and Hessian from one nested forward pass."""
    J, g, H, _ = ad.value_grad_hessian(lambda v: loss(prob, v, theta), w)
    return J, g, H


def gn_hessian(prob, w, theta):
    """Gauss-Newton Hessian ``hx hy Jr^T Jr (+ 2 lam^2 I)``.

    For comparison the exact Hessian is
    ``2 hx hy (Jr^T Jr + sum_i r_i Hess(r_i)) + 2 lam^2 I``: the data term
    keeps only the Jacobian product and drops the factor 2, the regulariser
    enters exactly.  See :func:`second_order_term`.
    """
    Jr = ad.jacobian(lambda v: residual(prob, v, theta), w)
    H = prob.cell_area * (Jr.T @ Jr)
    if prob.lam > 0:
        H = H + 2.0 * prob.lam ** 2 * np.eye(NPARAMS)
    return H


def second_order_term(prob, w, theta):
    """``sum_i r_i Hess(r_i)`` by nested forward mode."""
    r, _, Hr = ad.value_jacobian_hessian(lambda v: residual(prob, v, theta), np.asarray(w, float))
    return np.tensordot(r, Hr, axes=1)


def full_derivatives(prob, w, theta):
    """One width-7 nested pass over ``(w, theta)``.

    Returns ``(loss, grad, hess, dtheta_grad)`` where ``dtheta_grad`` is the
    mixed derivative ``d/dtheta grad_w J``.
    """
    w = np.asarray(w, dtype=float)
    W = ad.seed2(w, np.eye(NPARAMS + 1)[:NPARAMS])
    coeffs = prob.spline(theta).theta_coefficients(NPARAMS + 1, NPARAMS, order=2)
    y = loss(prob, W, theta, coeffs)
    H7 = np.asarray(y.tangent.tangent, dtype=float)
    asym = ad._asymmetry(H7, ad._noise_floor(y.value.value))
    if asym > 1e-8:
        raise ad.ConsistencyError(f"augmented Hessian asymmetry {asym:.3e}")
    H7 = 0.5 * (H7 + H7.T)
    g7 = np.asarray(y.value.tangent, dtype=float)
    return float(y.value.value), g7[:NPARAMS], H7[:NPARAMS, :NPARAMS], H7[:NPARAMS, NPARAMS]


def dtheta_grad(prob, w, theta):
    """``d/dtheta grad_w J(w; theta)`` at fixed ``w``."""
    return full_derivatives(prob, w, theta)[3]


def dtheta_loss(prob, w, theta):
    """First derivative of the loss in ``theta`` (width-7 single layer)."""
    W = ad.seed(np.asarray(w, dtype=float), np.eye(NPARAMS + 1)[:NPARAMS])
    coeffs = prob.spline(theta).theta_coefficients(NPARAMS + 1, NPARAMS, order=1)
    y = loss(prob, W, theta, coeffs)
    return float(y.tangent[NPARAMS])


def ssd(prob, w, theta=0.0):
    """Data term of the loss (no regulariser)."""
    r = residual(prob, np.asarray(w, dtype=float), theta)
    return float(r @ r) * prob.cell_area


def warped_template(prob, w, theta=0.0):
    """Template resampled on the reference grid under ``w``."""
    s = prob.spline(theta)
    vals = eval_spline(s, transform(np.asarray(w, dtype=float), prob.points))
    return Image(prob.reference.grid, vals)

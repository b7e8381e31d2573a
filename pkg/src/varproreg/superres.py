"""Multi-frame super-resolution by variable projection.

Templates ``d(0) .. d(q)`` on a coarse grid are modelled as pooled, warped
copies of one fine image ``f``::

    d(j) = K I(j)(w) f,    I(0) = identity.

The joint objective is written as one stacked least-squares system::

    || [ sqrt(hd) (I x K) I(w) ] f - [ sqrt(hd) d ] ||^2
    || [ lam_f sqrt(hf) L      ]     [ 0          ] ||

and ``f`` is eliminated by CG on the normal equations.  Which CG iterations
carry ``w``-tangents is set by a :class:`~varproreg.optim.ProjectionPolicy`;
with no tracking the Jacobian of the residual keeps only the ``dA/dw f`` term.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError
from .imaging import (PAD, Grid, Image, PoolOperator, _extensions, _inverse_collocations,
                      load_pgm, pool, pool_adjoint, save_pgm, spline_basis)
from .optim import LMConfig, OptTrace, ProjectionPolicy, cg_normal, levenberg_marquardt
from .registration import IDENTITY, NPARAMS, rotation_about, transform

DEFAULT_LAM_F = 3.0  # weight of the h-scaled gradient penalty; see README


@dataclass
class SuperResData:
    """Templates ``d(0) .. d(q)`` on the coarse grid and the pooling factor."""

    templates: list
    k: int
    fine: Grid = None

    def __post_init__(self):
        if not self.templates:
            raise ContractError("at least one template is required")
        coarse = self.templates[0].grid
        for t in self.templates:
            if t.grid != coarse:
                raise ContractError("all templates must share one grid")
        if self.fine is None:
            self.fine = Grid(coarse.nx * self.k, coarse.ny * self.k, coarse.Lx, coarse.Ly)
        if self.fine.coarsen(self.k) != coarse:
            raise ContractError("fine grid does not pool onto the template grid")

    @property
    def coarse(self):
        return self.templates[0].grid

    @property
    def q(self):
        """Number of templates with free transformations."""
        return len(self.templates) - 1

    @property
    def nparams(self):
        return NPARAMS * self.q

    @property
    def pool_op(self):
        return PoolOperator(self.k, self.fine)

    @property
    def d(self):
        return np.concatenate([t.intensities for t in self.templates])

    def identity_params(self):
        return np.tile(IDENTITY, self.q)


@dataclass
class GroundTruth:
    f_true: Image
    w_true: np.ndarray


# ---------------------------------------------------------------------------
# operator blocks


_FITPAD_CACHE = {}


def _fit_pad_matrices(ny, nx):
    """Per-axis maps from intensities straight to padded spline coefficients."""
    key = (ny, nx)
    if key not in _FITPAD_CACHE:
        Ey, Ex = _extensions(ny, nx)
        Biy, Bix = _inverse_collocations(ny, nx)
        _FITPAD_CACHE[key] = (Ey @ Biy, Ex @ Bix)
    return _FITPAD_CACHE[key]


class InterpOperatorBlock:
    """``f -> T_f(y(omega; w))`` on the fine grid, with ``T_f`` the exact
    (``theta = 0``) spline of ``f``.  Linear in ``f``; ``w`` may carry tangents."""

    def __init__(self, fine, w):
        self.fine = fine
        self.w = w
        pts = transform(w, fine.points)
        self.basis = spline_basis(fine, ad.take(pts, (slice(None), 0)), ad.take(pts, (slice(None), 1)))

    def apply(self, f):
        Py, Px = _fit_pad_matrices(self.fine.ny, self.fine.nx)
        F = ad.reshape(f, self.fine.shape)
        padded = ad.ravel(ad.apply_matrix(Py, ad.apply_matrix(Px, F, axis=1), axis=0))
        return self.basis.apply(padded)

    def adjoint(self, v):
        Py, Px = _fit_pad_matrices(self.fine.ny, self.fine.nx)
        g = ad.reshape(self.basis.adjoint(v), (self.fine.ny + 2 * PAD, self.fine.nx + 2 * PAD))
        return ad.ravel(ad.apply_matrix(Py.T, ad.apply_matrix(Px.T, g, axis=1), axis=0))

    def dense(self):
        Py, Px = _fit_pad_matrices(self.fine.ny, self.fine.nx)
        return self.basis.dense() @ np.kron(Py, Px)


def build_interp_block(fine_grid, w_j):
    return InterpOperatorBlock(fine_grid, w_j)


class GradRegularizer:
    """Scaled forward differences ``L f = [hx Dx f ; hy Dy f]`` on the fine grid."""

    def __init__(self, grid):
        self.grid = grid
        self.Dx = np.diff(np.eye(grid.nx), axis=0) * grid.hx
        self.Dy = np.diff(np.eye(grid.ny), axis=0) * grid.hy

    @property
    def rows(self):
        g = self.grid
        return g.ny * (g.nx - 1) + (g.ny - 1) * g.nx

    def apply(self, f):
        F = ad.reshape(f, self.grid.shape)
        gx = ad.apply_matrix(self.Dx, F, axis=1)
        gy = ad.apply_matrix(self.Dy, F, axis=0)
        return ad.concatenate([ad.ravel(gx), ad.ravel(gy)])

    def adjoint(self, v):
        g = self.grid
        nxr = g.ny * (g.nx - 1)
        vx = ad.reshape(ad.take(v, slice(0, nxr)), (g.ny, g.nx - 1))
        vy = ad.reshape(ad.take(v, slice(nxr, None)), (g.ny - 1, g.nx))
        out = ad.add(ad.apply_matrix(self.Dx.T, vx, axis=1), ad.apply_matrix(self.Dy.T, vy, axis=0))
        return ad.ravel(out)

    def dense(self):
        g = self.grid
        return np.vstack([np.kron(np.eye(g.ny), self.Dx), np.kron(self.Dy, np.eye(g.nx))])

    def penalty(self, f):
        """``S_f(f) = ||L f||^2 hx hy``."""
        r = self.apply(np.asarray(f, dtype=float))
        return float(r @ r) * self.grid.cell_area


class StackedOperator:
    """Matrix-free ``A_{lam_f}(w)`` and right-hand side ``b``."""

    def __init__(self, data, w, lam_f=DEFAULT_LAM_F):
        if ad.shape_of(w) != (data.nparams,):
            raise ContractError(f"expected {data.nparams} parameters, got {ad.shape_of(w)}")
        if lam_f < 0:
            raise ContractError("lam_f must be non-negative")
        self.data = data
        self.w = w
        self.lam_f = float(lam_f)
        self.sd = np.sqrt(data.coarse.cell_area)
        self.sf = self.lam_f * np.sqrt(data.fine.cell_area)
        self.pool_op = data.pool_op
        self.reg = GradRegularizer(data.fine)
        self.blocks = [build_interp_block(data.fine, ad.take(w, slice(NPARAMS * j, NPARAMS * (j + 1))))
                       for j in range(data.q)]

    @property
    def width(self):
        return self.w.width if isinstance(self.w, ad.Tangent) else 0

    @property
    def m_data(self):
        return (self.data.q + 1) * self.data.coarse.n

    @property
    def shape(self):
        return (self.m_data + self.reg.rows, self.data.fine.n)

    @cached_property
    def b(self):
        return np.concatenate([self.sd * self.data.d, np.zeros(self.reg.rows)])

    def _check(self, x, n, what):
        if ad.shape_of(x) != (n,):
            raise ContractError(f"{what} has shape {ad.shape_of(x)}, expected ({n},)")

    def matvec(self, f):
        self._check(f, self.shape[1], "f")
        parts = [pool(self.pool_op, f)]
        parts += [pool(self.pool_op, blk.apply(f)) for blk in self.blocks]
        out = [ad.mul(self.sd, ad.concatenate(parts))]
        out.append(ad.mul(self.sf, self.reg.apply(f)))
        return ad.concatenate(out)

    def rmatvec(self, v):
        self._check(v, self.shape[0], "v")
        m = self.data.coarse.n
        vd = ad.mul(self.sd, ad.take(v, slice(0, self.m_data)))
        acc = pool_adjoint(self.pool_op, ad.take(vd, slice(0, m)))
        for j, blk in enumerate(self.blocks, start=1):
            acc = ad.add(acc, blk.adjoint(pool_adjoint(self.pool_op, ad.take(vd, slice(j * m, (j + 1) * m)))))
        reg = self.reg.adjoint(ad.take(v, slice(self.m_data, None)))
        return ad.add(acc, ad.mul(self.sf, reg))

    def detached(self):
        if self.width == 0:
            return self
        return self._plain

    @cached_property
    def _plain(self):
        return StackedOperator(self.data, np.asarray(ad.primal(self.w), dtype=float), self.lam_f)

    def dense(self):
        """Explicit matrix (primal), assembled block-wise."""
        K = self.pool_op.dense()
        rows = [K] + [K @ blk.dense() for blk in self._plain_blocks()]
        return np.vstack([self.sd * np.vstack(rows), self.sf * self.reg.dense()])

    def _plain_blocks(self):
        return self.detached().blocks


def apply_A(op, f):
    return op.matvec(f)


def apply_At(op, v):
    return op.rmatvec(v)


# ---------------------------------------------------------------------------
# variable projection


def project(op, policy, history=None, x0=None):
    """``f(w) = A(w)^+ b`` by CG under ``policy`` (cold start unless ``x0``)."""
    return cg_normal(op, op.b, policy, x0=x0, history=history)


def varpro_residual(op, policy, return_projection=False, x0=None):
    """``r(w) = A(w) f(w) - b``.  The ``dA/dw f`` part of the tangent is
    always present; the ``A df/dw`` part follows ``policy``."""
    f = project(op, policy, x0=x0)
    r = ad.sub(op.matvec(f), op.b)
    return (r, f) if return_projection else r


def high_accuracy_policy(n):
    return ProjectionPolicy.none(5 * n)


def relative_reconstruction_error(f, f_true):
    f_true = np.asarray(f_true, dtype=float).ravel()
    nt = np.linalg.norm(f_true)
    if nt == 0:
        raise ContractError("reference image is identically zero")
    return float(np.linalg.norm(np.asarray(f, dtype=float).ravel() - f_true) / nt)


@dataclass
class VarproObjective:
    """Residual and Jacobian callbacks for a fixed data set and policy.

    Keeps the projection of the most recent evaluations so the outer loop can
    report reconstruction errors without solving again.  With ``warm_start``
    each CG solve starts from the previous projection instead of zero.
    """

    data: SuperResData
    policy: ProjectionPolicy
    lam_f: float = DEFAULT_LAM_F
    warm_start: bool = False
    _cache: dict = field(default_factory=dict, repr=False)
    _last: np.ndarray = field(default=None, repr=False)

    def _x0(self):
        return self._last if self.warm_start else None

    def residual(self, w):
        w = np.asarray(w, dtype=float)
        r, f = varpro_residual(StackedOperator(self.data, w, self.lam_f), self.policy, True, self._x0())
        self._remember(w, f)
        return r

    def jacobian(self, w):
        r = self.residual_and_jacobian(w)[0]
        return np.asarray(r.tangent, dtype=float)

    def residual_and_jacobian(self, w):
        w = np.asarray(w, dtype=float)
        op = StackedOperator(self.data, ad.seed(w), self.lam_f)
        r, f = varpro_residual(op, self.policy, True, self._x0())
        self._remember(w, ad.primal(f))
        return r, np.asarray(r.tangent, dtype=float)

    def _remember(self, w, f):
        if len(self._cache) > 8:
            self._cache.clear()
        self._last = np.asarray(f, dtype=float)
        self._cache[w.tobytes()] = self._last

    def projection(self, w):
        w = np.asarray(w, dtype=float)
        f = self._cache.get(w.tobytes())
        if f is None:
            self.residual(w)
            f = self._cache[w.tobytes()]
        return f

    def loss(self, w):
        r = self.residual(w)
        return float(r @ r)


def varpro_gauss_newton(data, policy, lm_cfg=None, gn_iters=10, w0=None, lam_f=DEFAULT_LAM_F,
                        f_true=None, warm_start=False):
    """Levenberg-Marquardt on the variable-projected residual.

    Returns ``(w, f, trace)``.  Trace records gain ``rel_loss`` and
    ``rel_grad`` (relative to iteration 0) and ``recon_error`` when
    ``f_true`` is given.  ``f`` is a high-accuracy projection at the final
    ``w``.
    """
    cfg = lm_cfg or LMConfig()
    cfg = LMConfig(cfg.initial_damping, cfg.damping_up, cfg.damping_down, cfg.grad_tol, gn_iters)
    obj = VarproObjective(data, policy, lam_f, warm_start)
    w0 = data.identity_params() if w0 is None else np.asarray(w0, dtype=float)
    w, trace = levenberg_marquardt(obj.residual, obj.jacobian, w0, cfg)
    l0 = trace.records[0]["loss"]
    g0 = trace.records[0]["grad_norm"]
    for rec in trace.records:
        rec["rel_loss"] = rec["loss"] / l0 if l0 > 0 else 0.0
        rec["rel_grad"] = rec["grad_norm"] / g0 if g0 > 0 else 0.0
        if f_true is not None:
            rec["recon_error"] = relative_reconstruction_error(obj.projection(rec["w"]), f_true)
    op = StackedOperator(data, w, lam_f)
    f = np.asarray(project(op, high_accuracy_policy(data.fine.n)), dtype=float)
    trace.final_recon_error = None if f_true is None else relative_reconstruction_error(f, f_true)
    return w, f, trace


def final_record(records):
    """Last accepted record (the current iterate when the run stopped)."""
    return [r for r in records if r["accepted"]][-1]


# ---------------------------------------------------------------------------
# synthetic problems and bundles


def random_transforms(q, seed, max_angle_deg=10.0, max_shift=0.05, center=(0.5, 0.5)):
    """``q`` small rotations about ``center`` plus shifts (world units)."""
    rng = np.random.default_rng(seed)
    ws = []
    for _ in range(q):
        angle = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
        shift = rng.uniform(-max_shift, max_shift, size=2)
        ws.append(rotation_about(angle, center, shift))
    return np.concatenate(ws) if ws else np.zeros(0)


def generate_problem(reference, true_transforms, k, noise_sigma=0.0, seed=0):
    """Pooled, warped copies of ``reference``; returns ``(data, truth)``."""
    fine = reference.grid
    coarse = fine.coarsen(k)
    w_true = np.asarray(true_transforms, dtype=float).ravel()
    if w_true.size % NPARAMS:
        raise ContractError("transform vector length must be a multiple of 6")
    op = PoolOperator(k, fine)
    f = reference.intensities
    rng = np.random.default_rng(seed)
    templates = [Image(coarse, pool(op, f))]
    for j in range(w_true.size // NPARAMS):
        blk = build_interp_block(fine, w_true[NPARAMS * j:NPARAMS * (j + 1)])
        d = pool(op, blk.apply(f))
        if noise_sigma > 0:
            d = d + noise_sigma * rng.standard_normal(d.shape)
        templates.append(Image(coarse, d))
    return SuperResData(templates, k, fine), GroundTruth(reference, w_true)


def save_bundle(path, data, truth=None, **meta):
    """Write templates (16-bit PGM) and a JSON manifest to directory ``path``.

    PGM samples are rescaled per image to ``[0, 1]``; the ranges are kept in
    the manifest so loading restores intensities up to 16-bit quantisation.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = {f"d{j}.pgm": t for j, t in enumerate(data.templates)}
    if truth is not None:
        images["f_true.pgm"] = truth.f_true
    ranges = {}
    for name, img in images.items():
        lo, hi = float(img.data.min()), float(img.data.max())
        span = hi - lo if hi > lo else 1.0
        save_pgm(Image(img.grid, (img.data - lo) / span), path / name, maxval=65535)
        ranges[name] = [lo, span]
    manifest = {
        "k": data.k,
        "fine": [data.fine.nx, data.fine.ny, data.fine.Lx, data.fine.Ly],
        "templates": [f"d{j}.pgm" for j in range(len(data.templates))],
        "ranges": ranges,
        "w_true": None if truth is None else [float(v) for v in truth.w_true],
        **meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(path):
    """Inverse of :func:`save_bundle`; returns ``(data, truth or None, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        nx, ny, Lx, Ly = manifest["fine"]
        k = int(manifest["k"])
        names = manifest["templates"]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"bad bundle manifest in {path}") from exc
    fine = Grid(int(nx), int(ny), float(Lx), float(Ly))
    coarse = fine.coarsen(k)

    def read(name, grid):
        lo, span = manifest["ranges"][name]
        img = load_pgm(path / name, extent=(grid.Lx, grid.Ly))
        return Image(grid, img.data * span + lo)

    data = SuperResData([read(n, coarse) for n in names], k, fine)
    truth = None
    if manifest.get("w_true") is not None and "f_true.pgm" in manifest["ranges"]:
        truth = GroundTruth(read("f_true.pgm", fine), np.array(manifest["w_true"], dtype=float))
    return data, truth, manifest

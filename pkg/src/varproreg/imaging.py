"""Grids, images, scale-space cubic splines, pooling and PGM I/O.

Images are stored as ``(ny, nx)`` arrays on a cell-centred grid over the box
``[0, Lx] x [0, Ly]``; flattening is row-major, so pixel ``(j, i)`` sits at
position ``j * nx + i`` and at the point ``((i + 1/2) hx, (j + 1/2) hy)``.

The continuous image is a tensor-product cubic B-spline whose knots are the
cell centres.  Two ghost layers of coefficients on each side are obtained by
linear extrapolation of the interior coefficients; beyond those the
coefficients are zero.  Linear images (constants in particular) are therefore
reproduced exactly on all of the domain, and the interpolant decays to zero
a couple of cells outside it.

The blur scale ``theta`` is the weight of a curvature penalty on the
coefficients: ``c(theta) = argmin ||B c - d||^2 + theta c^T M c`` with ``M``
the sum of squared second differences along both axes.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import autodiff as ad
from .errors import ContractError, FormatError, NumericalError

GHOST = 2  # linearly extrapolated coefficient layers per side
PAD = GHOST + 1  # plus one ring of zeros that absorbs clipped indices


@dataclass(frozen=True)
class Grid:
    """Cell-centred grid with ``nx * ny`` points over ``[0, Lx] x [0, Ly]``."""

    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ContractError(f"grid counts must be positive, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ContractError("grid extent must be positive")

    @classmethod
    def for_shape(cls, ny, nx):
        """Grid with unit-length longest side and square cells."""
        s = max(nx, ny)
        return cls(nx, ny, nx / s, ny / s)

    @property
    def hx(self):
        return self.Lx / self.nx

    @property
    def hy(self):
        return self.Ly / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def n(self):
        return self.nx * self.ny

    @cached_property
    def points(self):
        """``(n, 2)`` array of cell centres in row-major order."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def coarsen(self, k):
        if self.nx % k or self.ny % k:
            raise ContractError(f"grid {self.nx}x{self.ny} is not divisible by {k}")
        return Grid(self.nx // k, self.ny // k, self.Lx, self.Ly)


@dataclass
class Image:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 1:
            if self.data.size != self.grid.n:
                raise ContractError(f"{self.data.size} intensities for a grid of {self.grid.n}")
            self.data = self.data.reshape(self.grid.shape)
        if self.data.shape != self.grid.shape:
            raise ContractError(f"image shape {self.data.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(self.data).all():
            raise ContractError("image intensities must be finite")

    @classmethod
    def from_array(cls, data, extent=None):
        data = np.asarray(data, dtype=float)
        ny, nx = data.shape
        grid = Grid.for_shape(ny, nx) if extent is None else Grid(nx, ny, *extent)
        return cls(grid, data)

    @property
    def intensities(self):
        return self.data.ravel()


# ---------------------------------------------------------------------------
# 1-D building blocks


def collocation_1d(n):
    """Values at the knots in terms of the ``n`` interior coefficients.

    With linearly extrapolated ghosts the end rows collapse to the identity.
    """
    B = np.zeros((n, n))
    for i in range(n):
        if i == 0 or i == n - 1:
            B[i, i] = 1.0
        else:
            B[i, i - 1:i + 2] = (1 / 6, 2 / 3, 1 / 6)
    return B


def extension_1d(n):
    """``(n + 2 PAD) x n`` map from interior coefficients to the padded set."""
    E = np.zeros((n + 2 * PAD, n))
    E[PAD:PAD + n] = np.eye(n)
    if n == 1:
        E[PAD - GHOST:PAD, 0] = 1.0
        E[PAD + 1:PAD + 1 + GHOST, 0] = 1.0
        return E
    for g in range(1, GHOST + 1):
        E[PAD - g, 0], E[PAD - g, 1] = 1 + g, -g
        E[PAD + n - 1 + g, n - 1], E[PAD + n - 1 + g, n - 2] = 1 + g, -g
    return E


def second_difference_1d(n):
    if n < 3:
        return sparse.csr_matrix((0, n))
    return sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n), format="csr")


def _frac(u):
    return u - np.floor(u)


def _w0(t):
    s = 1.0 - t
    return np.stack([s * s * s / 6.0, (3.0 * t - 6.0) * t * t / 6.0 + 2.0 / 3.0,
                     ((-3.0 * t + 3.0) * t + 3.0) * t / 6.0 + 1.0 / 6.0, t * t * t / 6.0], axis=-1)


def _w1(t):
    s = 1.0 - t
    return np.stack([-0.5 * s * s, (1.5 * t - 2.0) * t, (-1.5 * t + 1.0) * t + 0.5, 0.5 * t * t],
                    axis=-1)


def _w2(t):
    return np.stack([1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t], axis=-1)


def _w3(t):
    return np.broadcast_to(np.array([-1.0, 3.0, -3.0, 1.0]), t.shape + (4,))


_BSPLINE_DERIVS = [lambda u: _w0(_frac(u)), lambda u: _w1(_frac(u)),
                   lambda u: _w2(_frac(u)), lambda u: _w3(_frac(u)),
                   lambda u: np.zeros(np.shape(u) + (4,))]


def cubic_bspline_weights(u):
    """The four cubic B-spline weights at knot offsets ``floor(u) - 1 .. floor(u) + 2``.

    A differentiable primitive: derivatives in ``u`` are analytic (up to
    fourth order), so nested tangents cost one chain-rule step each.
    """
    return ad.univariate(u, _BSPLINE_DERIVS, name="bspline")


# ---------------------------------------------------------------------------
# spline evaluation


@dataclass
class SplineBasis:
    """Tensor-product evaluation rows over the flattened padded coefficients.

    The value at point ``i`` is ``sum_ab wy[i, a] wx[i, b] c[index[i, a, b]]``.
    """

    index: np.ndarray  # (npts, 4, 4)
    wx: object  # (npts, 4) ndarray or Tangent
    wy: object
    size: int

    def apply(self, padded):
        inner = ad.row_matvec(ad.take(padded, self.index), self.wx)
        return ad.sum_(ad.mul(self.wy, inner), axis=1)

    @cached_property
    def scatter(self):
        return ad.scatter_matrix(self.index, self.size)

    def adjoint(self, v):
        """Transpose of :meth:`apply` in the padded coefficients."""
        a = ad.mul(self.wy, ad.take(v, (slice(None), None)))
        contrib = ad.row_outer(a, self.wx)
        return ad.left_multiply(self.scatter, ad.ravel(contrib))

    def dense(self):
        """Explicit ``npts x size`` matrix (primal weights; for checks)."""
        W = (np.asarray(ad.primal(self.wy))[:, :, None] *
             np.asarray(ad.primal(self.wx))[:, None, :]).reshape(-1, 16)
        out = np.zeros((W.shape[0], self.size))
        np.add.at(out, (np.repeat(np.arange(W.shape[0]), 16), self.index.reshape(-1)), W.ravel())
        return out


def spline_basis(grid, x, y):
    """Evaluation rows for points with coordinates ``x``, ``y`` (arrays or tangents)."""
    u = ad.sub(ad.div(x, grid.hx), 0.5)
    v = ad.sub(ad.div(y, grid.hy), 0.5)
    iu, iv = ad.floor(u), ad.floor(v)
    px, py = grid.nx + 2 * PAD, grid.ny + 2 * PAD
    offs = np.arange(-1, 3)
    kx = np.clip(iu.astype(np.int64)[:, None] + offs + PAD, 0, px - 1)
    ky = np.clip(iv.astype(np.int64)[:, None] + offs + PAD, 0, py - 1)
    index = ky[:, :, None] * px + kx[:, None, :]
    return SplineBasis(index, cubic_bspline_weights(u), cubic_bspline_weights(v), px * py)


def pad_coefficients(grid, coeffs):
    """Interior ``(ny, nx)`` coefficients -> flattened padded coefficients."""
    Ey, Ex = _extensions(grid.ny, grid.nx)
    c = ad.apply_matrix(Ey, ad.apply_matrix(Ex, coeffs, axis=1), axis=0)
    return ad.ravel(c)


def unpad_adjoint(grid, padded):
    """Transpose of :func:`pad_coefficients`."""
    Ey, Ex = _extensions(grid.ny, grid.nx)
    c = ad.reshape(padded, (grid.ny + 2 * PAD, grid.nx + 2 * PAD))
    return ad.apply_matrix(Ey.T, ad.apply_matrix(Ex.T, c, axis=1), axis=0)


_EXT_CACHE = {}


def _extensions(ny, nx):
    key = (ny, nx)
    if key not in _EXT_CACHE:
        _EXT_CACHE[key] = (extension_1d(ny), extension_1d(nx))
    return _EXT_CACHE[key]


# ---------------------------------------------------------------------------
# scale-space fitting


class ScaleSpaceFitter:
    """Solves the curvature-penalised coefficient systems of one image.

    Factorizations of ``B^T B + theta M`` are cached per ``theta``.
    """

    def __init__(self, img):
        self.image = img
        g = img.grid
        self._By, self._Bx = collocation_1d(g.ny), collocation_1d(g.nx)
        B = sparse.kron(sparse.csr_matrix(self._By), sparse.csr_matrix(self._Bx), format="csr")
        Dy, Dx = second_difference_1d(g.ny), second_difference_1d(g.nx)
        self.BtB = (B.T @ B).tocsc()
        self.M = (sparse.kron(Dy.T @ Dy, sparse.eye(g.nx)) +
                  sparse.kron(sparse.eye(g.ny), Dx.T @ Dx)).tocsc()
        self.Btd = B.T @ img.intensities
        self._lu = {}

    def factor(self, theta):
        theta = float(theta)
        if theta not in self._lu:
            self._lu[theta] = splu((self.BtB + theta * self.M).tocsc())
        return self._lu[theta]

    def coefficients(self, theta):
        if theta == 0.0:
            # exact interpolation, separable
            d = self.image.data
            return np.linalg.solve(self._By, np.linalg.solve(self._Bx, d.T).T)
        c = self.factor(theta).solve(self.Btd)
        return c.reshape(self.image.grid.shape)

    def theta_derivatives(self, theta, coeffs):
        """First and second derivatives of the coefficients in ``theta``."""
        lu = self.factor(theta)
        c = coeffs.ravel()
        dc = -lu.solve(self.M @ c)
        d2c = -2.0 * lu.solve(self.M @ dc)
        shape = self.image.grid.shape
        return dc.reshape(shape), d2c.reshape(shape)


@dataclass
class SplineInterpolant:
    """Continuous image at blur scale ``theta``."""

    grid: Grid
    theta: float
    coeffs: np.ndarray
    fitter: ScaleSpaceFitter = field(default=None, repr=False)

    @cached_property
    def padded(self):
        return pad_coefficients(self.grid, self.coeffs)

    def theta_coefficients(self, width, index, order=1):
        """Padded coefficients carrying their ``theta``-derivative in tangent
        column ``index`` of ``width``; ``order=2`` nests two layers."""
        if self.fitter is None:
            raise ContractError("interpolant was built without a fitter; no theta derivative")
        dc, d2c = self.fitter.theta_derivatives(self.theta, self.coeffs)
        c, dc, d2c = (pad_coefficients(self.grid, a) for a in (self.coeffs, dc, d2c))
        n = c.size
        t1 = np.zeros((n, width))
        t1[:, index] = dc
        if order == 1:
            return ad.Tangent(c, t1)
        t2 = np.zeros((n, width, width))
        t2[:, index, index] = d2c
        return ad.Tangent(ad.Tangent(c, t1), ad.Tangent(t1, t2))

    def __call__(self, pts, coeffs=None):
        return eval_spline(self, pts, coeffs)


def fit_spline(img, theta=0.0, fitter=None):
    """Fit the scale-space spline of ``img`` at blur ``theta``."""
    if theta < 0:
        raise ContractError(f"theta must be non-negative, got {theta}")
    if not np.isfinite(img.data).all():
        raise ContractError("image intensities must be finite")
    fitter = fitter or ScaleSpaceFitter(img)
    try:
        coeffs = fitter.coefficients(theta)
    except (RuntimeError, np.linalg.LinAlgError) as exc:  # pragma: no cover
        raise NumericalError(f"coefficient solve failed at theta={theta}") from exc
    return SplineInterpolant(img.grid, float(theta), coeffs, fitter)


def eval_spline(s, pts, coeffs=None):
    """Evaluate at ``pts``: an ``(n, 2)`` array/tangent, or an ``(x, y)`` pair.

    ``coeffs`` overrides the padded coefficient vector (used to carry
    ``theta`` tangents).
    """
    if isinstance(pts, tuple):
        x, y = pts
    else:
        x, y = ad.take(pts, (slice(None), 0)), ad.take(pts, (slice(None), 1))
    basis = spline_basis(s.grid, x, y)
    return basis.apply(s.padded if coeffs is None else coeffs)


def interpolation_coefficients(grid, f):
    """Interior coefficients of the exact (``theta = 0``) interpolant of ``f``.

    Linear in ``f`` and separable; accepts tangents.
    """
    Biy, Bix = _inverse_collocations(grid.ny, grid.nx)
    F = ad.reshape(f, grid.shape)
    return ad.apply_matrix(Biy, ad.apply_matrix(Bix, F, axis=1), axis=0)


def interpolation_coefficients_adjoint(grid, c):
    Biy, Bix = _inverse_collocations(grid.ny, grid.nx)
    return ad.ravel(ad.apply_matrix(Biy.T, ad.apply_matrix(Bix.T, c, axis=1), axis=0))


_INV_CACHE = {}


def _inverse_collocations(ny, nx):
    key = (ny, nx)
    if key not in _INV_CACHE:
        _INV_CACHE[key] = (np.linalg.inv(collocation_1d(ny)), np.linalg.inv(collocation_1d(nx)))
    return _INV_CACHE[key]


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PoolOperator:
    """Block averaging over ``k x k`` cells."""

    factor: int
    fine: Grid

    def __post_init__(self):
        if self.factor < 1:
            raise ContractError("pooling factor must be a positive integer")
        self.fine.coarsen(self.factor)

    @property
    def coarse(self):
        return self.fine.coarsen(self.factor)

    @cached_property
    def _matrices(self):
        k = self.factor
        Ky = np.kron(np.eye(self.fine.ny // k), np.full((1, k), 1.0 / k))
        Kx = np.kron(np.eye(self.fine.nx // k), np.full((1, k), 1.0 / k))
        return Ky, Kx

    def dense(self):
        Ky, Kx = self._matrices
        return np.kron(Ky, Kx)


def pool(op, fine):
    """Average each ``k x k`` block of the flattened fine image."""
    if ad.shape_of(fine)[0] != op.fine.n:
        raise ContractError(f"expected {op.fine.n} fine pixels, got {ad.shape_of(fine)[0]}")
    Ky, Kx = op._matrices
    F = ad.reshape(fine, op.fine.shape)
    return ad.ravel(ad.apply_matrix(Ky, ad.apply_matrix(Kx, F, axis=1), axis=0))


def pool_adjoint(op, coarse):
    """Spread each coarse value over its block, scaled by ``1/k^2``."""
    cg = op.coarse
    if ad.shape_of(coarse)[0] != cg.n:
        raise ContractError(f"expected {cg.n} coarse pixels, got {ad.shape_of(coarse)[0]}")
    Ky, Kx = op._matrices
    V = ad.reshape(coarse, cg.shape)
    return ad.ravel(ad.apply_matrix(Ky.T, ad.apply_matrix(Kx.T, V, axis=1), axis=0))


# ---------------------------------------------------------------------------
# I/O


def _pgm_tokens(buf):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos, n = 0, len(buf)
    found = 0
    while found < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        yield buf[start:pos], pos
        found += 1


def load_pgm(path, extent=None):
    """Read a P2/P5 PGM file; intensities are scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    tokens = _pgm_tokens(buf)
    magic, _ = next(tokens)
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported PGM magic {magic!r}")
    try:
        width, _ = next(tokens)
        height, _ = next(tokens)
        maxval, end = next(tokens)
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"bad PGM dimensions or maxval: {width}x{height}, {maxval}")
    count = width * height
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        payload = buf[end + 1:end + 1 + count * dtype.itemsize]
        if len(payload) < count * dtype.itemsize:
            raise FormatError("truncated PGM payload")
        values = np.frombuffer(payload, dtype=dtype).astype(float)
    else:
        body = buf[end:]
        body = b"\n".join(line.split(b"#")[0] for line in body.splitlines())
        try:
            values = np.array([int(v) for v in body.split()], dtype=float)
        except ValueError as exc:
            raise FormatError("non-integer value in P2 payload") from exc
        if values.size < count:
            raise FormatError("truncated PGM payload")
        values = values[:count]
    if values.max(initial=0) > maxval:
        raise FormatError("PGM sample exceeds maxval")
    return Image.from_array(values.reshape(height, width) / maxval, extent)


def save_pgm(img, path, maxval=255):
    """Write a binary (P5) PGM; intensities are clipped to [0, 1]."""
    if not 1 <= maxval <= 65535:
        raise ContractError("maxval must be in [1, 65535]")
    q = np.rint(np.clip(img.data, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    ny, nx = img.data.shape
    header = f"P5\n{nx} {ny}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def save_csv(img, path):
    """Row-major CSV dump, one line per grid row."""
    np.savetxt(path, img.data, delimiter=",", fmt="%.17g")

"""Forward-mode automatic differentiation with batched tangents.

A :class:`Tangent` couples an array of values with a trailing block of
directional derivatives: ``value`` has shape ``S`` and ``tangent`` has shape
``S + (p,)``.  Column ``k`` of the tangent block is the derivative of the
value along the ``k``-th seeded direction, so a single evaluation with ``p``
seeded directions yields a full Jacobian.

Tangents nest: when ``value`` and ``tangent`` are themselves ``Tangent``
objects the outer layer differentiates the inner one, which gives exact
second derivatives (forward-over-forward).  Operands of different nesting
depth are combined by treating the shallower one as constant with respect to
the outer layer.

Only a small primitive set is provided (arithmetic, integer and real powers,
min/max, reductions, reshapes, constant linear maps, gather/scatter).  The
spline evaluator in :mod:`varproreg.imaging` is written in terms of these.
"""

import numpy as np
from scipy import sparse

from .errors import ConsistencyError, ContractError, NonFiniteError, NotLinearError

#: Check every primitive's output for NaN/inf and raise immediately.
CHECK_FINITE = True


class Tangent:
    """Values with a trailing block of directional derivatives."""

    __slots__ = ("value", "tangent")
    # ndarray (op) Tangent must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = value
        self.tangent = tangent

    @property
    def shape(self):
        return shape_of(self.value)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def width(self):
        """Number of tracked directions at this nesting level."""
        return shape_of(self.tangent)[-1]

    @property
    def depth(self):
        return depth(self)

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Tangent(shape={self.shape}, width={self.width}, depth={self.depth})"

    def __getitem__(self, key):
        return take(self, key)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# structural helpers


def depth(x):
    """Nesting depth: 0 for plain arrays, 1 for first-order tangents, ..."""
    d = 0
    while isinstance(x, Tangent):
        x = x.value
        d += 1
    return d


def shape_of(x):
    if isinstance(x, Tangent):
        return x.shape
    return np.shape(x)


def primal(x):
    """Strip every tangent layer and return the plain values."""
    while isinstance(x, Tangent):
        x = x.value
    return x


def _as_array(x):
    return x if isinstance(x, Tangent) else np.asarray(x, dtype=float)


def _zeros(shape, template):
    """Zeros of ``shape`` with the same nesting structure as ``template``."""
    if not isinstance(template, Tangent):
        return np.zeros(shape)
    return Tangent(_zeros(shape, template.value),
                   _zeros(tuple(shape) + (template.width,), template.tangent))


def _lift(x, template):
    """Raise ``x`` to the nesting depth of ``template`` with zero tangents."""
    if depth(x) >= depth(template):
        return x
    inner = _lift(x, template.value)
    return Tangent(inner, _zeros(shape_of(inner) + (template.width,), template.tangent))


def _lead(x, k):
    """Prepend ``k`` singleton axes."""
    if k <= 0:
        return x
    if isinstance(x, Tangent):
        return Tangent(_lead(x.value, k), _lead(x.tangent, k))
    return np.asarray(x)[(None,) * k]


def _align(*xs):
    """Give all operands the same number of value axes (numpy aligns right,
    but the trailing tangent axis would otherwise be misread)."""
    r = max(len(shape_of(x)) for x in xs)
    return [_lead(x, r - len(shape_of(x))) for x in xs]


def _expand(x):
    """``x[..., None]`` for arrays and tangents alike."""
    if isinstance(x, Tangent):
        return _take(x, (Ellipsis, None))
    return np.asarray(x)[..., None]


def _broadcast(x, shape):
    if isinstance(x, Tangent):
        return Tangent(_broadcast(x.value, shape),
                       _broadcast(x.tangent, tuple(shape) + (x.width,)))
    return np.broadcast_to(x, shape)


def _all_finite(x):
    if isinstance(x, Tangent):
        return _all_finite(x.value) and _all_finite(x.tangent)
    return bool(np.isfinite(x).all())


def _checked(x, name):
    if CHECK_FINITE and not _all_finite(x):
        raise NonFiniteError(name)
    return x


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (axis,)
    return tuple(int(a) % ndim for a in axis)


# ---------------------------------------------------------------------------
# primitives (unchecked internals, checked public wrappers)


def _neg(a):
    if isinstance(a, Tangent):
        return Tangent(_neg(a.value), _neg(a.tangent))
    return np.negative(a)


def _add(a, b):
    da, db = depth(a), depth(b)
    if da == 0 and db == 0:
        return np.add(a, b)
    a, b = _align(a, b)
    if da == db:
        return Tangent(_add(a.value, b.value), _add(a.tangent, b.tangent))
    if da < db:
        a, b = b, a
    v = _add(a.value, b)
    t = a.tangent
    if shape_of(v) != shape_of(a.value):
        t = _broadcast(t, shape_of(v) + (a.width,))
    return Tangent(v, t)


def _mul(a, b):
    da, db = depth(a), depth(b)
    if da == 0 and db == 0:
        return np.multiply(a, b)
    a, b = _align(a, b)
    if da == db:
        v = _mul(a.value, b.value)
        t = _add(_mul(a.tangent, _expand(b.value)), _mul(_expand(a.value), b.tangent))
        return Tangent(v, t)
    if da < db:
        a, b = b, a
    return Tangent(_mul(a.value, b), _mul(a.tangent, _expand(b)))


def _recip(a):
    if not isinstance(a, Tangent):
        return np.divide(1.0, a)
    inv = _recip(a.value)
    return Tangent(inv, _mul(_neg(a.tangent), _expand(_mul(inv, inv))))


def _div(a, b):
    da, db = depth(a), depth(b)
    if da == 0 and db == 0:
        return np.divide(a, b)
    a, b = _align(a, b)
    if da > db:
        return Tangent(_div(a.value, b), _div(a.tangent, _expand(b)))
    # quotient rule; the primal is a true division in every mode
    if da == db:
        v = _div(a.value, b.value)
        num = _add(a.tangent, _neg(_mul(_expand(v), b.tangent)))
    else:
        v = _div(a, b.value)
        num = _neg(_mul(_expand(v), b.tangent))
    return Tangent(v, _div(num, _expand(b.value)))


def _pow(a, n):
    if n == 2:
        return _mul(a, a)
    if not isinstance(a, Tangent):
        return np.power(a, n)
    if n == 0:
        return _lift(np.ones(a.shape), a)
    if n == 1:
        return a
    v = _pow(a.value, n)
    dv = _mul(n, _pow(a.value, n - 1))
    return Tangent(v, _mul(a.tangent, _expand(dv)))


def neg(a):
    return _neg(_as_array(a))


def add(a, b):
    return _checked(_add(_as_array(a), _as_array(b)), "add")


def sub(a, b):
    return _checked(_add(_as_array(a), _neg(_as_array(b))), "sub")


def mul(a, b):
    return _checked(_mul(_as_array(a), _as_array(b)), "mul")


def div(a, b):
    return _checked(_div(_as_array(a), _as_array(b)), "div")


def reciprocal(a):
    return _checked(_recip(_as_array(a)), "reciprocal")


def power(a, n):
    """``a ** n`` for a constant real exponent ``n``."""
    if isinstance(n, Tangent):
        raise ContractError("power() takes a constant exponent")
    return _checked(_pow(_as_array(a), n), "power")


def where(cond, a, b):
    """Elementwise select; ``cond`` is a plain boolean array."""
    cond = np.asarray(primal(cond), dtype=bool)
    a, b = _as_array(a), _as_array(b)
    d = max(depth(a), depth(b))
    if d == 0:
        return np.where(cond, a, b)
    tpl = a if depth(a) == d else b
    a, b = _lift(a, tpl), _lift(b, tpl)
    return _where(cond, a, b)


def _where(cond, a, b):
    if not isinstance(a, Tangent):
        return np.where(cond, a, b)
    cond, a, b = _align(cond, a, b)
    return Tangent(_where(cond, a.value, b.value), _where(cond[..., None], a.tangent, b.tangent))


def univariate(x, derivatives, name="univariate"):
    """Apply an elementwise function given as ``[f, f', f'', ...]``.

    Each callable maps the primal array to an array whose shape may append
    trailing axes (a vector-valued function of a scalar).  Nesting depth
    ``d`` needs ``d + 1`` entries.
    """
    x = _as_array(x)
    if len(derivatives) <= depth(x):
        raise ContractError(f"{name}: {depth(x)} tangent layers need {depth(x) + 1} derivatives")
    return _checked(_univariate(x, derivatives), name)


def _univariate(x, fs):
    if not isinstance(x, Tangent):
        return fs[0](x)
    v = _univariate(x.value, fs)
    extra = len(shape_of(v)) - x.ndim
    dv = _univariate(x.value, fs[1:])
    t = x.tangent
    if extra:
        key = (slice(None),) * x.ndim + (None,) * extra
        t = _take(t, key)
    return Tangent(v, _mul(t, _expand(dv)))


def minimum(a, b):
    """Elementwise min; ties take the left operand's derivative."""
    return where(primal(a) <= primal(b), a, b)


def maximum(a, b):
    """Elementwise max; ties take the left operand's derivative."""
    return where(primal(a) >= primal(b), a, b)


def floor(x):
    """Integer part of the primal values (piecewise constant, zero derivative)."""
    return np.floor(primal(x))


# ---------------------------------------------------------------------------
# linear structural operations


def _take(x, key):
    if not isinstance(x, Tangent):
        return np.asarray(x)[key]
    if not isinstance(key, tuple):
        key = (key,)
    if any(k is Ellipsis for k in key):
        tkey = key + (slice(None),)
    else:
        tkey = key
    return Tangent(_take(x.value, key), _take(x.tangent, tkey))


def take(x, key):
    """``x[key]`` for arrays and tangents."""
    return _take(x, key)


def sum_(x, axis=None):
    if not isinstance(x, Tangent):
        return np.sum(x, axis=axis)
    axes = _norm_axes(axis, x.ndim)
    return Tangent(sum_(x.value, axes), sum_(x.tangent, axes))


def dot(a, b):
    """Inner product of two 1-D operands."""
    return sum_(mul(a, b))


def reshape(x, shape):
    if not isinstance(x, Tangent):
        return np.reshape(x, shape)
    v = reshape(x.value, shape)
    return Tangent(v, reshape(x.tangent, shape_of(v) + (x.width,)))


def ravel(x):
    return reshape(x, (-1,))


def transpose(x, axes=None):
    if not isinstance(x, Tangent):
        return np.transpose(x, axes)
    n = x.ndim
    axes = tuple(reversed(range(n))) if axes is None else tuple(a % n for a in axes)
    return Tangent(transpose(x.value, axes), transpose(x.tangent, axes + (n,)))


def concatenate(xs, axis=0):
    xs = [_as_array(x) for x in xs]
    d = max(depth(x) for x in xs)
    if d == 0:
        return np.concatenate(xs, axis=axis)
    tpl = next(x for x in xs if depth(x) == d)
    return _concat([_lift(x, tpl) for x in xs], axis % len(shape_of(tpl)))


def _concat(xs, axis):
    if not isinstance(xs[0], Tangent):
        return np.concatenate(xs, axis=axis)
    return Tangent(_concat([x.value for x in xs], axis), _concat([x.tangent for x in xs], axis))


def stack(xs, axis=0):
    nd = len(shape_of(xs[0])) + 1
    axis = axis % nd
    key = (slice(None),) * axis + (None,)
    return concatenate([take(x, key) for x in xs], axis=axis)


def apply_matrix(M, x, axis=0):
    """Apply the constant dense matrix ``M`` along value axis ``axis``."""
    M = np.asarray(M)
    n = len(shape_of(x))
    axis = axis % n
    if M.shape[1] != shape_of(x)[axis]:
        raise ContractError(f"matrix with {M.shape[1]} columns applied to axis of length "
                            f"{shape_of(x)[axis]}")
    return _apply_matrix(M, x, axis)


def _apply_matrix(M, x, axis):
    if isinstance(x, Tangent):
        return Tangent(_apply_matrix(M, x.value, axis), _apply_matrix(M, x.tangent, axis))
    return np.moveaxis(np.tensordot(M, x, axes=([1], [axis])), 0, axis)


def _bilinear(base, a, b):
    """Product rule for a bilinear ``base`` whose trailing ``...`` axes
    broadcast (einsum style); the primal is always ``base`` on primals."""
    da, db = depth(a), depth(b)
    if da == 0 and db == 0:
        return base(a, b)
    if da == db:
        v = _bilinear(base, a.value, b.value)
        t = _add(_bilinear(base, a.tangent, _expand(b.value)), _bilinear(base, _expand(a.value), b.tangent))
        return Tangent(v, t)
    if da > db:
        return Tangent(_bilinear(base, a.value, b), _bilinear(base, a.tangent, _expand(b)))
    return Tangent(_bilinear(base, a, b.value), _bilinear(base, _expand(a), b.tangent))


def _einsum_base(spec):
    return lambda a, b: np.einsum(spec, a, b)


_ROW_MATVEC = _einsum_base("iab...,ib...->ia...")
_ROW_OUTER = _einsum_base("ia...,ib...->iab...")


def row_matvec(G, x):
    """Per-row products ``out[i] = G[i] @ x[i]`` for ``G`` of shape (n, a, b)
    and ``x`` of shape (n, b).  Bilinear; either operand may carry tangents."""
    G, x = _as_array(G), _as_array(x)
    return _checked(_bilinear(_ROW_MATVEC, G, x), "row_matvec")


def row_outer(u, x):
    """Per-row outer products ``out[i] = outer(u[i], x[i])``."""
    u, x = _as_array(u), _as_array(x)
    return _checked(_bilinear(_ROW_OUTER, u, x), "row_outer")


def left_multiply(M, x):
    """``M @ x`` along the leading axis; ``M`` may be a scipy sparse matrix."""
    if M.shape[1] != shape_of(x)[0]:
        raise ContractError(f"operator with {M.shape[1]} columns applied to length "
                            f"{shape_of(x)[0]}")
    return _left_multiply(M, x)


def _left_multiply(M, x):
    if isinstance(x, Tangent):
        return Tangent(_left_multiply(M, x.value), _left_multiply(M, x.tangent))
    x = np.asarray(x)
    out = M @ x.reshape(x.shape[0], -1)
    return np.asarray(out).reshape((M.shape[0],) + x.shape[1:])


def scatter_matrix(index, size):
    """Sparse ``size x len(index)`` matrix that sums entries into ``index`` slots."""
    index = np.asarray(index).ravel()
    k = index.size
    return sparse.csr_matrix((np.ones(k), (index, np.arange(k))), shape=(size, k))


def scatter_add(index, x, size):
    """Sum the leading-axis entries of ``x`` into ``size`` bins given by ``index``."""
    return left_multiply(scatter_matrix(index, size), x)


def detach(x):
    """Same values, every tangent set to zero (at every nesting level)."""
    if not isinstance(x, Tangent):
        return x
    return _lift(primal(x), x)


# ---------------------------------------------------------------------------
# drivers


def seed(x, directions=None):
    """Attach directions (columns of ``directions``, default identity) to ``x``."""
    x = np.asarray(x, dtype=float)
    if directions is None:
        directions = np.eye(x.size).reshape(x.shape + (x.size,))
    return Tangent(x, np.asarray(directions, dtype=float))


def seed2(x, directions=None):
    """Two nested layers seeded with the same directions (for Hessians)."""
    x = np.asarray(x, dtype=float)
    if directions is None:
        directions = np.eye(x.size).reshape(x.shape + (x.size,))
    directions = np.asarray(directions, dtype=float)
    p = directions.shape[-1]
    return Tangent(Tangent(x, directions),
                   Tangent(directions, np.zeros(directions.shape + (p,))))


def jvp(f, x, v):
    """Value and directional derivative ``J_f(x) v``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape:
        raise ContractError(f"direction shape {v.shape} does not match point shape {x.shape}")
    y = f(Tangent(x, v[..., None]))
    if not isinstance(y, Tangent):
        y = np.asarray(y, dtype=float)
        return y, np.zeros_like(y)
    return np.asarray(y.value), np.asarray(y.tangent)[..., 0]


def value_and_jacobian(f, x):
    """Value of ``f`` and its ``m x p`` Jacobian from one batched pass."""
    x = np.asarray(x, dtype=float)
    p = x.size
    y = f(seed(x.ravel()).reshape(x.shape) if x.ndim != 1 else seed(x))
    if not isinstance(y, Tangent):
        y = np.asarray(y, dtype=float)
        return y, np.zeros((y.size, p))
    val = np.asarray(y.value)
    return val, np.asarray(y.tangent).reshape(val.size, p)


def jacobian(f, x):
    """``m x p`` Jacobian; column ``j`` equals ``jvp(f, x, e_j)``."""
    return value_and_jacobian(f, x)[1]


def gradient(f, x):
    """Gradient of a scalar map."""
    x = np.asarray(x, dtype=float)
    return jacobian(f, x).reshape(x.shape)


def value_grad_hessian(f, x, rtol=1e-8):
    """Value, gradient and symmetrised Hessian of a scalar map.

    Returns ``(value, grad, hess, asymmetry)`` where ``asymmetry`` is the
    relative Frobenius asymmetry of the Hessian before symmetrisation.
    """
    x = np.asarray(x, dtype=float).ravel()
    p = x.size
    y = f(seed2(x))
    if not isinstance(y, Tangent):
        return float(y), np.zeros(p), np.zeros((p, p)), 0.0
    if depth(y) != 2:
        raise ContractError("function must propagate both tangent layers")
    value = float(y.value.value)
    grad = np.asarray(y.value.tangent, dtype=float).reshape(p)
    H = np.asarray(y.tangent.tangent, dtype=float).reshape(p, p)
    asym = _asymmetry(H, _noise_floor(value))
    if asym > rtol:
        raise ConsistencyError(f"Hessian asymmetry {asym:.3e} exceeds {rtol:.1e}")
    return value, grad, 0.5 * (H + H.T), asym


def value_jacobian_hessian(f, x):
    """Value, Jacobian ``(m, p)`` and per-component Hessians ``(m, p, p)`` of a
    vector map from one nested pass."""
    x = np.asarray(x, dtype=float).ravel()
    p = x.size
    y = f(seed2(x))
    if not isinstance(y, Tangent):
        y = np.asarray(y, dtype=float)
        return y, np.zeros((y.size, p)), np.zeros((y.size, p, p))
    val = np.asarray(y.value.value, dtype=float)
    m = val.size
    return (val, np.asarray(y.value.tangent).reshape(m, p),
            np.asarray(y.tangent.tangent).reshape(m, p, p))


def _noise_floor(value):
    return 1e-6 * max(1.0, abs(float(value)))


def _asymmetry(H, floor=0.0):
    """Relative Frobenius asymmetry; ``floor`` keeps roundoff-level Hessians
    from registering as asymmetric."""
    scale = max(np.linalg.norm(H), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(H - H.T) / scale)


def hessian(f, x, return_asymmetry=False):
    """Hessian of a scalar map by forward-over-forward nesting."""
    _, _, H, asym = value_grad_hessian(f, x)
    if return_asymmetry:
        return H, asym
    return H


def adjoint_apply(A, v, n, check_linearity=True, rtol=1e-10):
    """``A^T v`` for a matrix-free linear map ``A: R^n -> R^m``.

    The gradient of ``x -> <v, A x>`` is ``A^T v``; it is read off the tangent
    block of one forward pass seeded with the ``n`` coordinate directions.
    """
    v = np.asarray(v, dtype=float)
    if check_linearity:
        _probe_linearity(A, n, rtol)
    y = A(seed(np.zeros(n)))
    if not isinstance(y, Tangent):
        return np.zeros(n)
    if shape_of(y) != v.shape:
        raise ContractError(f"operator output shape {shape_of(y)} does not match v {v.shape}")
    return np.asarray(dot(v, y).tangent, dtype=float)


def _probe_linearity(A, n, rtol):
    rng = np.random.default_rng(12345)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    a = rng.standard_normal()
    lhs = np.asarray(primal(A(x + a * y)))
    Ax, Ay = np.asarray(primal(A(x))), np.asarray(primal(A(y)))
    rhs = Ax + a * Ay
    scale = max(np.linalg.norm(Ax) + abs(a) * np.linalg.norm(Ay), np.finfo(float).tiny)
    if np.linalg.norm(lhs - rhs) > rtol * scale:
        raise NotLinearError("operator failed the linearity probe")

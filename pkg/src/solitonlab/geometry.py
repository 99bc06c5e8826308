"""Discrete differential geometry on the two desk-scale manifold models.

Two backgrounds are supported:

* ``FrameModel`` -- a homogeneous space described by the structure constants
  of a Milnor frame and diagonal metric coefficients.  Curvature is
  closed-form, fields are constants, and flows reduce to ODEs.
* ``GridModel`` -- a flat periodic torus carrying a symmetric 2-tensor field
  (the metric) on a uniform grid.  All derivative operators are second-order
  central differences with periodic wraparound.

Grid fields are plain numpy arrays: scalars have shape ``dims``, vectors
``dims + (n,)`` and symmetric 2-tensors ``dims + (n, n)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import RejectedInputError

DET_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class FrameModel:
    """Homogeneous model: Milnor frame structure constants + diagonal metric.

    ``c[i, j, k]`` are the structure constants ``[e_i, e_j] = c[i,j,k] e_k``
    (antisymmetric in i, j); ``a[i] > 0`` are the diagonal metric
    coefficients, so ``g = diag(a)`` in the frame.  ``base_volume`` is the
    volume of the group for ``a = (1, ..., 1)``.
    """

    n: int
    c: np.ndarray
    a: np.ndarray
    base_volume: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        if self.c.shape != (self.n, self.n, self.n):
            raise RejectedInputError("structure constants must have shape (n, n, n)")
        if self.a.shape != (self.n,):
            raise RejectedInputError("metric coefficients must have shape (n,)")
        if not np.allclose(self.c, -np.swapaxes(self.c, 0, 1)):
            raise RejectedInputError("structure constants must be antisymmetric in the first two indices")
        if np.any(self.a <= 0):
            raise RejectedInputError("metric coefficients must be positive")

    @classmethod
    def su2(cls, a=(1.0, 1.0, 1.0)) -> "FrameModel":
        """SU(2) with the frame normalized so a = (1,1,1) is the unit round S^3.

        Structure constants ``[e_i, e_j] = 2 eps_{ijk} e_k``; the group volume
        at unit coefficients is ``2 pi^2``.
        """
        c = np.zeros((3, 3, 3))
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            c[i, j, k] = 2.0
            c[j, i, k] = -2.0
        return cls(n=3, c=c, a=np.asarray(a, dtype=float), base_volume=2.0 * np.pi**2)

    @classmethod
    def flat_torus3(cls, a=(1.0, 1.0, 1.0), base_volume: float = 1.0) -> "FrameModel":
        """Abelian frame (zero structure constants): a flat 3-torus."""
        return cls(n=3, c=np.zeros((3, 3, 3)), a=np.asarray(a, dtype=float), base_volume=base_volume)

    def with_a(self, a) -> "FrameModel":
        return replace(self, a=np.asarray(a, dtype=float))

    def milnor_lambdas(self) -> np.ndarray:
        """Extract the diagonal structure constants lambda_k of a Milnor frame.

        Requires ``c[i, j, k] = lambda_k eps_{ijk}``; raises otherwise.
        """
        if self.n == 2:
            if not np.allclose(self.c, 0.0):
                raise RejectedInputError("2-dimensional frame models must be abelian")
            return np.zeros(2)
        lams = np.array([self.c[1, 2, 0], self.c[2, 0, 1], self.c[0, 1, 2]])
        check = np.zeros_like(self.c)
        for idx, (i, j, k) in enumerate(((1, 2, 0), (2, 0, 1), (0, 1, 2))):
            check[i, j, k] = lams[idx]
            check[j, i, k] = -lams[idx]
        if not np.allclose(check, self.c):
            raise RejectedInputError("structure constants are not in Milnor (diagonal) form")
        return lams


@dataclass(frozen=True)
class GridModel:
    """Periodic-grid model: a metric tensor field on a flat torus.

    ``g`` has shape ``dims + (n, n)`` and must be symmetric positive definite
    at every node.  Index arithmetic wraps modulo ``dims``.
    """

    n: int
    dims: tuple
    period: tuple
    g: np.ndarray
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "period", tuple(float(p) for p in self.period))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        if self.n not in (2, 3):
            raise RejectedInputError("grid models support n = 2 or 3")
        if len(self.dims) != self.n or len(self.period) != self.n:
            raise RejectedInputError("dims and period must have length n")
        if any(d < 8 for d in self.dims):
            raise RejectedInputError("grid needs at least 8 points per axis")
        if self.g.shape != self.dims + (self.n, self.n):
            raise RejectedInputError(f"metric field must have shape {self.dims + (self.n, self.n)}")
        if self.validate:
            validate_spd(self.g)

    @classmethod
    def flat(cls, n=2, dims=(16, 16), period=None, scale=1.0) -> "GridModel":
        """Constant metric ``scale * delta`` on the torus (default period 2 pi)."""
        if period is None:
            period = (2.0 * np.pi,) * n
        g = np.zeros(tuple(dims) + (n, n))
        g[...] = scale * np.eye(n)
        return cls(n=n, dims=tuple(dims), period=tuple(period), g=g)

    @property
    def spacings(self) -> np.ndarray:
        return np.array([p / d for p, d in zip(self.period, self.dims)])

    def coords(self):
        """Node coordinate arrays, one per axis, broadcastable to ``dims``."""
        axes = [np.arange(d) * (p / d) for d, p in zip(self.dims, self.period)]
        return np.meshgrid(*axes, indexing="ij")

    def with_metric(self, g, validate: bool = True) -> "GridModel":
        return GridModel(n=self.n, dims=self.dims, period=self.period, g=g, validate=validate)


def validate_spd(g: np.ndarray) -> None:
    """Reject a metric field with a non-SPD or near-degenerate node."""
    if not np.all(np.isfinite(g)):
        raise RejectedInputError("metric field contains non-finite entries")
    if not np.allclose(g, np.swapaxes(g, -1, -2)):
        raise RejectedInputError("metric field is not symmetric")
    det = np.linalg.det(g)
    if np.any(det < DET_FLOOR):
        raise RejectedInputError("metric determinant below degeneracy floor")
    eigs = np.linalg.eigvalsh(g)
    if np.any(eigs[..., 0] <= 0):
        raise RejectedInputError("metric is not positive definite at some node")


# ---------------------------------------------------------------------------
# finite differences


def d1(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order central first derivative along a grid axis."""
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)


def d2(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Compact 3-point second derivative along a grid axis."""
    return (np.roll(f, -1, axis=axis) - 2.0 * f + np.roll(f, 1, axis=axis)) / h**2


def partials(m: GridModel, f: np.ndarray) -> np.ndarray:
    """Stack of first partials, indexed by a trailing axis: out[..., l] = d_l f."""
    hs = m.spacings
    return np.stack([d1(f, axis=l, h=hs[l]) for l in range(m.n)], axis=-1)


def hessian(m: GridModel, f: np.ndarray) -> np.ndarray:
    """Coordinate second partials out[..., i, j] = d_i d_j f.

    Diagonal entries use the compact stencil; mixed entries are nested
    central differences.  ``f`` may carry trailing component axes.
    """
    hs = m.spacings
    n = m.n
    out = np.empty(f.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            if i == j:
                out[..., i, i] = d2(f, axis=i, h=hs[i])
            else:
                out[..., i, j] = d1(d1(f, axis=j, h=hs[j]), axis=i, h=hs[i])
                out[..., j, i] = out[..., i, j]
    return out


# ---------------------------------------------------------------------------
# connection and curvature


def inverse_metric(m: GridModel) -> np.ndarray:
    return np.linalg.inv(m.g)


def christoffel(m: GridModel) -> np.ndarray:
    """Christoffel symbols Gamma[..., k, i, j] of the grid metric."""
    hs = m.spacings
    n = m.n
    ginv = inverse_metric(m)
    # dg[..., i, j, l] = d_l g_ij
    dg = np.stack([d1(m.g, axis=l, h=hs[l]) for l in range(n)], axis=-1)
    term = (np.einsum("...jli->...lij", dg) + np.einsum("...ilj->...lij", dg)
            - np.einsum("...ijl->...lij", dg))
    # term[..., l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, term)


def ricci(m):
    """Ricci tensor: a symmetric field on a grid, diagonal coefficients on a frame."""
    if isinstance(m, FrameModel):
        return _ricci_frame(m)
    return _ricci_grid(m)


def _ricci_frame(m: FrameModel) -> np.ndarray:
    """Closed-form Ricci of a unimodular Milnor frame, as lowered diagonal R_ii."""
    lams = m.milnor_lambdas()
    if m.n == 2:
        return np.zeros(2)
    a = m.a
    idx = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    cbar = np.array([lams[i] * np.sqrt(a[i] / (a[j] * a[k])) for i, j, k in idx])
    s = 0.5 * cbar.sum()
    mu = s - cbar
    r = np.array([2.0 * mu[j] * mu[k] for i, j, k in idx])
    return r * a


def _ricci_grid(m: GridModel) -> np.ndarray:
    hs = m.spacings
    n = m.n
    gamma = christoffel(m)
    # dgamma[..., k, i, j, l] = d_l Gamma^k_ij
    dgamma = np.stack([d1(gamma, axis=l, h=hs[l]) for l in range(n)], axis=-1)
    r = np.einsum("...kijk->...ij", dgamma)
    r -= np.einsum("...kkji->...ij", dgamma)
    r += np.einsum("...kkl,...lij->...ij", gamma, gamma)
    r -= np.einsum("...kil,...lkj->...ij", gamma, gamma)
    return 0.5 * (r + np.swapaxes(r, -1, -2))


def scalar_curvature(m):
    """Scalar curvature: a scalar field on a grid, a real on a frame model."""
    if isinstance(m, FrameModel):
        return float(np.sum(_ricci_frame(m) / m.a))
    return np.einsum("...ij,...ij->...", inverse_metric(m), _ricci_grid(m))


# ---------------------------------------------------------------------------
# covariant derivatives and tensor calculus on the grid


def lower_vector(m: GridModel, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", m.g, v)


def raise_vector(m: GridModel, w: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", inverse_metric(m), w)


def covd_oneform(m: GridModel, w: np.ndarray, gamma=None) -> np.ndarray:
    """Covariant derivative of a 1-form: out[..., i, j] = nabla_i w_j."""
    if gamma is None:
        gamma = christoffel(m)
    dw = partials(m, w)  # dw[..., j, i] = d_i w_j
    return np.einsum("...ji->...ij", dw) - np.einsum("...kij,...k->...ij", gamma, w)


def covd_tensor(m: GridModel, t: np.ndarray, gamma=None) -> np.ndarray:
    """Covariant derivative of a (0,2)-tensor: out[..., l, i, j] = nabla_l T_ij."""
    if gamma is None:
        gamma = christoffel(m)
    dt = partials(m, t)  # dt[..., i, j, l] = d_l T_ij
    out = np.einsum("...ijl->...lij", dt)
    out -= np.einsum("...mli,...mj->...lij", gamma, t)
    out -= np.einsum("...mlj,...im->...lij", gamma, t)
    return out


def divergence(m: GridModel, t: np.ndarray, gamma=None) -> np.ndarray:
    """Divergence (delta T)_j = -g^{ik} nabla_i T_kj, returned as a 1-form."""
    ginv = inverse_metric(m)
    dt = covd_tensor(m, t, gamma=gamma)
    return -np.einsum("...ik,...ikj->...j", ginv, dt)


def lie_derivative_metric(m: GridModel, v: np.ndarray, gamma=None) -> np.ndarray:
    """(L_V g)_ij = nabla_i V_j + nabla_j V_i for an upper-index field V."""
    w = lower_vector(m, v)
    dv = covd_oneform(m, w, gamma=gamma)
    return dv + np.swapaxes(dv, -1, -2)


def laplacian_scalar(m: GridModel, f: np.ndarray, gamma=None) -> np.ndarray:
    """Rough Laplacian g^{ij} nabla_i nabla_j f of a scalar field."""
    if gamma is None:
        gamma = christoffel(m)
    ginv = inverse_metric(m)
    hess = hessian(m, f)
    hess = hess - np.einsum("...kij,...k->...ij", gamma, partials(m, f))
    return np.einsum("...ij,...ij->...", ginv, hess)


def laplacian_tensor(m: GridModel, t: np.ndarray, gamma=None) -> np.ndarray:
    """Rough Laplacian g^{ml} nabla_m nabla_l T_ij of a (0,2)-tensor field."""
    if gamma is None:
        gamma = christoffel(m)
    hs = m.spacings
    n = m.n
    first = covd_tensor(m, t, gamma=gamma)  # [..., l, i, j]
    # second[..., m, l, i, j] = d_m (nabla_l T)_ij
    second = np.stack([d1(first, axis=mx, h=hs[mx]) for mx in range(n)], axis=-4)
    # replace the wide diagonal d_l d_l T part by the compact stencil
    for l in range(n):
        wide = d1(d1(t, axis=l, h=hs[l]), axis=l, h=hs[l])
        second[..., l, l, :, :] += d2(t, axis=l, h=hs[l]) - wide
    second -= np.einsum("...pml,...pij->...mlij", gamma, first)
    second -= np.einsum("...pmi,...lpj->...mlij", gamma, first)
    second -= np.einsum("...pmj,...lip->...mlij", gamma, first)
    ginv = inverse_metric(m)
    return np.einsum("...ml,...mlij->...ij", ginv, second)


def riemann_lowered(m: GridModel, gamma=None) -> np.ndarray:
    """Riemann tensor R_{ikjl} = g_{im} R^m_{kjl} on the grid."""
    if gamma is None:
        gamma = christoffel(m)
    hs = m.spacings
    n = m.n
    dgamma = np.stack([d1(gamma, axis=l, h=hs[l]) for l in range(n)], axis=-1)
    # R^m_{kjl} = d_j Gamma^m_{lk} - d_l Gamma^m_{jk}
    #             + Gamma^m_{jp} Gamma^p_{lk} - Gamma^m_{lp} Gamma^p_{jk}
    riem = np.einsum("...mlkj->...mkjl", dgamma) - np.einsum("...mjkl->...mkjl", dgamma)
    riem += np.einsum("...mjp,...plk->...mkjl", gamma, gamma)
    riem -= np.einsum("...mlp,...pjk->...mkjl", gamma, gamma)
    return np.einsum("...im,...mkjl->...ikjl", m.g, riem)


def lichnerowicz(m: GridModel, t: np.ndarray, gamma=None) -> np.ndarray:
    """Lichnerowicz Laplacian: rough Laplacian plus curvature terms.

    Delta_L T = Delta T + 2 R_{ikjl} T^{kl} - R_ik T^k_j - R_jk T^k_i.
    On a flat background this is the componentwise Laplacian.
    """
    if gamma is None:
        gamma = christoffel(m)
    ginv = inverse_metric(m)
    rough = laplacian_tensor(m, t, gamma=gamma)
    ric = _ricci_grid(m)
    riem = riemann_lowered(m, gamma=gamma)
    t_up = np.einsum("...ka,...lb,...ab->...kl", ginv, ginv, t)
    t_mixed = np.einsum("...ka,...aj->...kj", ginv, t)  # T^k_j
    out = rough + 2.0 * np.einsum("...ikjl,...kl->...ij", riem, t_up)
    out -= np.einsum("...ik,...kj->...ij", ric, t_mixed)
    out -= np.einsum("...jk,...ki->...ij", ric, t_mixed)
    return out


# ---------------------------------------------------------------------------
# norms and volume


@dataclass(frozen=True)
class NormReport:
    """Discrete norms of a grid field: L2, sup, Sobolev W^{k,2}, and a C^k proxy."""

    l2: float
    sup: float
    sobolev: float
    ck: float


def _pointwise_sq(m: GridModel, f: np.ndarray, index: str) -> np.ndarray:
    """Squared pointwise magnitude of a scalar/vector/tensor field."""
    extra = f.ndim - len(m.dims)
    if extra == 0:
        return f**2
    ginv = inverse_metric(m)
    if extra == 1:
        if index == "upper":
            return np.einsum("...ij,...i,...j->...", m.g, f, f)
        return np.einsum("...ij,...i,...j->...", ginv, f, f)
    if extra == 2:
        return np.einsum("...ik,...jl,...ij,...kl->...", ginv, ginv, f, f)
    raise RejectedInputError("fields with more than two component axes are not supported")


def _frobenius_sq(f: np.ndarray, grid_ndim: int) -> np.ndarray:
    comp_axes = tuple(range(grid_ndim, f.ndim))
    return np.sum(f**2, axis=comp_axes) if comp_axes else f**2


def volume(m) -> float:
    """Total volume of the model."""
    if isinstance(m, FrameModel):
        return float(m.base_volume * np.sqrt(np.prod(m.a)))
    dV = np.prod(m.spacings)
    return float(np.sum(np.sqrt(np.linalg.det(m.g))) * dV)


def norms(m: GridModel, f: np.ndarray, k: int = 0, index: str = "upper") -> NormReport:
    """Discrete L2 / sup / W^{k,2} norms and the C^k sup-of-derivatives proxy.

    The base magnitude contracts indices with the model metric (``index``
    selects upper or lower for rank-1 fields); derivative magnitudes use the
    Frobenius contraction of coordinate partials, the stated stand-in for
    Hoelder seminorms on a grid.
    """
    if k > 2:
        raise RejectedInputError("norms support derivative order k <= 2")
    dV = np.prod(m.spacings)
    sqrtdet = np.sqrt(np.linalg.det(m.g))
    base_sq = _pointwise_sq(m, f, index)
    l2 = float(np.sqrt(np.sum(base_sq * sqrtdet) * dV))
    sup = float(np.sqrt(np.max(base_sq)))
    sob_sq = np.sum(base_sq * sqrtdet) * dV
    ck = sup
    deriv = f
    gdim = len(m.dims)
    for _ in range(k):
        deriv = partials(m, deriv)
        mag_sq = _frobenius_sq(deriv, gdim)
        sob_sq += np.sum(mag_sq * sqrtdet) * dV
        ck = max(ck, float(np.sqrt(np.max(mag_sq))))
    return NormReport(l2=l2, sup=sup, sobolev=float(np.sqrt(sob_sq)), ck=ck)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"SLGM"
_VERSION = 1


def _triu_indices(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def save_model(m: GridModel, path, mode: str = "binary") -> None:
    """Write a grid metric to disk.

    Binary layout: magic ``SLGM``, version byte, n byte, mode byte (0 binary /
    1 text marker unused), n uint32 dims, n float64 periods, then row-major
    node-ordered upper-triangle components as little-endian float64.
    """
    path = Path(path)
    pairs = _triu_indices(m.n)
    flat = np.stack([m.g[(..., i, j)] for i, j in pairs], axis=-1).reshape(-1, len(pairs))
    if mode == "binary":
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<BBB", _VERSION, m.n, 0))
            fh.write(struct.pack(f"<{m.n}I", *m.dims))
            fh.write(struct.pack(f"<{m.n}d", *m.period))
            fh.write(flat.astype("<f8").tobytes())
    elif mode == "text":
        with open(path, "w") as fh:
            fh.write(f"{m.n} " + " ".join(str(d) for d in m.dims) + " "
                     + " ".join(repr(float(p)) for p in m.period) + "\n")
            for row in flat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    else:
        raise RejectedInputError(f"unknown serialization mode {mode!r}")


def load_model(path) -> GridModel:
    """Read a grid metric written by :func:`save_model` (either mode)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MAGIC:
            version, n, _ = struct.unpack("<BBB", fh.read(3))
            if version != _VERSION:
                raise RejectedInputError(f"unsupported metric file version {version}")
            dims = struct.unpack(f"<{n}I", fh.read(4 * n))
            period = struct.unpack(f"<{n}d", fh.read(8 * n))
            pairs = _triu_indices(n)
            data = np.frombuffer(fh.read(), dtype="<f8").reshape(dims + (len(pairs),))
        else:
            fh.seek(0)
            lines = fh.read().decode().splitlines()
            header = lines[0].split()
            n = int(header[0])
            dims = tuple(int(v) for v in header[1:1 + n])
            period = tuple(float(v) for v in header[1 + n:1 + 2 * n])
            pairs = _triu_indices(n)
            data = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
            data = data.reshape(dims + (len(pairs),))
    g = np.empty(dims + (n, n))
    for idx, (i, j) in enumerate(pairs):
        g[(..., i, j)] = data[..., idx]
        g[(..., j, i)] = data[..., idx]
    return GridModel(n=n, dims=dims, period=period, g=g)

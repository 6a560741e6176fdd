"""Boundary-adapted trial spaces ("baseplates").

A baseplate bundles a quadrature grid, the basis evaluation map
``reconstruct`` (coefficients -> nodal values), the projection
``project`` (nodal values -> coefficients) and a handful of fixed linear
operators on the coefficient space.  Three families are provided:

* ``shen_legendre_1d``: ``phi_k = L_{k-1} - L_{k+1}`` on (-1, 1) with
  homogeneous Dirichlet data, Gauss-Legendre nodes, consistent-mass
  L2 projection.
* ``fourier_2d``: band-limited real fields on the torus ``[0, 2pi)^2``,
  stored as a real Hermitian-packed vector.
* ``cosine_2d``: tensor-product ``cos(pi j x) cos(pi l y)`` on ``[0, 1]^2``
  (homogeneous Neumann), endpoint grid with DCT-I projection.

Nodal fields are always flat arrays of length ``Q`` (2D grids are stored
row-major with ``x`` along the first axis).  Every array-valued method
accepts leading batch dimensions.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft
import scipy.linalg
from numpy.polynomial import legendre

from .errors import InvalidArgumentError, NumericError

__all__ = [
    "QuadratureGrid",
    "LiftingField",
    "ZERO_LIFT",
    "dirichlet_lift",
    "CoefficientState",
    "Baseplate",
    "ShenBaseplate",
    "Fourier2DBaseplate",
    "Cosine2DBaseplate",
    "gauss_legendre_grid",
    "legendre_table",
    "build_shen_baseplate",
    "build_fourier2d_baseplate",
    "build_cosine2d_baseplate",
    "build_baseplate",
    "reconstruct",
    "project",
    "dealias",
]


@dataclass(frozen=True)
class QuadratureGrid:
    dim: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def Q(self) -> int:
        return len(self.weights)

    def norm(self, u: np.ndarray) -> np.ndarray:
        """Weighted norm ``(sum_q w_q |u_q|^2)^{1/2}`` over the last axis."""
        return np.sqrt(np.sum(self.weights * np.abs(u) ** 2, axis=-1))

    def integrate(self, u: np.ndarray) -> np.ndarray:
        return np.sum(self.weights * u, axis=-1)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.weights, dtype=np.float64).tobytes())
        return h.hexdigest()


def _zero(x, t):
    x = np.asarray(x)
    return np.zeros(x.shape[0] if x.ndim > 1 else x.shape)


@dataclass(frozen=True)
class LiftingField:
    """Explicit field carrying non-homogeneous boundary data.

    ``value(x, t)`` and ``time_derivative(x, t)`` take node coordinates in
    the grid's layout (shape ``(Q,)`` in 1D, ``(Q, 2)`` in 2D).
    """

    value: Callable = _zero
    time_derivative: Callable = _zero
    is_zero: bool = True
    description: dict = field(default_factory=dict)


ZERO_LIFT = LiftingField()


def dirichlet_lift(A, B, dA, dB, description=None) -> LiftingField:
    """Linear lift ``(1-x)/2 A(t) + (1+x)/2 B(t)`` on (-1, 1)."""

    def value(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * (1.0 - x) * A(t) + 0.5 * (1.0 + x) * B(t)

    def time_derivative(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * (1.0 - x) * dA(t) + 0.5 * (1.0 + x) * dB(t)

    return LiftingField(value, time_derivative, False, dict(description or {}))


@dataclass
class CoefficientState:
    a: np.ndarray
    baseplate_id: str | None = None
    time: float | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 1:
            raise InvalidArgumentError("coefficient state must be a 1D vector")
        if not np.all(np.isfinite(self.a)):
            raise NumericError("coefficient state has non-finite entries")


def _coeffs(a) -> np.ndarray:
    if isinstance(a, CoefficientState):
        return a.a
    return np.asarray(a, dtype=np.float64)


class Baseplate:
    """Common interface; see the concrete families below."""

    family: str
    K: int
    grid: QuadratureGrid
    dealias_cutoff: int | None

    # -- core maps -------------------------------------------------------
    def _phi(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _proj(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reconstruct(self, a, lift: LiftingField | None = None, t: float = 0.0) -> np.ndarray:
        a = _coeffs(a)
        self.check(a)
        u = self._phi(a)
        if lift is not None and not lift.is_zero:
            u = u + lift.value(self.grid.nodes, t)
        return u

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.grid.Q:
            raise InvalidArgumentError(f"field has {u.shape[-1]} nodes, expected {self.grid.Q}")
        if not np.all(np.isfinite(u)):
            bad = np.argwhere(~np.isfinite(u))[0]
            raise NumericError("non-finite field value", location=tuple(int(i) for i in bad))
        return self._proj(u)

    def dealias(self, a) -> np.ndarray:
        # Products are formed on a grid with >= 3x headroom and projected onto
        # the retained band, so truncation is already applied by project().
        a = _coeffs(a)
        self.check(a)
        return a.copy()

    def check(self, a: np.ndarray) -> None:
        if a.shape[-1] != self.K:
            raise InvalidArgumentError(f"coefficient length {a.shape[-1]} != K={self.K}")

    # -- metric ----------------------------------------------------------
    def gram(self) -> np.ndarray:
        """Gram matrix of the basis in the discrete inner product."""
        raise NotImplementedError

    def inner(self, a, b) -> np.ndarray:
        """Discrete L2 inner product of the fields represented by a and b."""
        u, v = self._phi(_coeffs(a)), self._phi(_coeffs(b))
        return np.sum(self.grid.weights * u * v, axis=-1)

    def weighted_norm(self, a) -> np.ndarray:
        return self.grid.norm(self._phi(_coeffs(a)))

    def load_vector(self, g) -> np.ndarray:
        """``Phi^T diag(w) g``: the coefficient gradient of ``sum_q w_q G(u_q)`` when ``g = G'(u)``."""
        # the basis is discretely orthogonal for the spectral families
        return self.metric * self._proj(np.asarray(g, dtype=np.float64))

    # -- metadata --------------------------------------------------------
    def shape_params(self) -> dict:
        raise NotImplementedError

    def manifest(self) -> dict:
        m = {"family": self.family, "K": self.K, **self.shape_params()}
        m["grid_hash"] = self.grid.digest()
        return m

    @property
    def id(self) -> str:
        try:
            return self._id
        except AttributeError:
            blob = json.dumps(self.manifest(), sort_keys=True).encode()
            self._id = hashlib.sha256(blob).hexdigest()[:16]
            return self._id

    def __repr__(self):
        params = ", ".join(f"{k}={v}" for k, v in self.shape_params().items())
        return f"<{type(self).__name__} {params} K={self.K}>"


# ---------------------------------------------------------------------------
# 1D Shen-Legendre
# ---------------------------------------------------------------------------

def gauss_legendre_grid(Q: int) -> QuadratureGrid:
    """Q-point Gauss-Legendre rule on (-1, 1)."""
    if int(Q) != Q or Q < 1:
        raise InvalidArgumentError(f"Q must be a positive integer, got {Q}")
    x, w = legendre.leggauss(int(Q))
    return QuadratureGrid(1, x, w)


def legendre_table(nmax: int, x: np.ndarray) -> np.ndarray:
    """Values ``L_0..L_nmax`` at x by the three-term recurrence, shape (len(x), nmax+1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.size, nmax + 1))
    out[:, 0] = 1.0
    if nmax >= 1:
        out[:, 1] = x
    for n in range(2, nmax + 1):
        out[:, n] = ((2 * n - 1) * x * out[:, n - 1] - (n - 1) * out[:, n - 2]) / n
    return out


class ShenBaseplate(Baseplate):
    family = "shen_legendre_1d"

    def __init__(self, Q: int, K: int):
        self.Q, self.K = int(Q), int(K)
        self.grid = gauss_legendre_grid(Q)
        self.dealias_cutoff = None
        self.mode_table = np.arange(1, self.K + 1)
        x, w = self.grid.nodes, self.grid.weights

        self.basis_eval = self.eval_basis(x)
        self.basis_deriv = self.eval_basis_derivative(x)
        Phi, dPhi = self.basis_eval, self.basis_deriv
        M = Phi.T @ (w[:, None] * Phi)
        self.M = 0.5 * (M + M.T)
        # S[i, j] = <phi_i, d_x phi_j>, oriented so that M^{-1} S differentiates.
        S = Phi.T @ (w[:, None] * dPhi)
        self.S = 0.5 * (S - S.T)
        # <phi_i', phi_j'> = (2k+1)^2 * 2/(2k+1) on the diagonal, zero elsewhere.
        self.stiffness_diag = 4.0 * self.mode_table + 2.0

        self._weighted_basis = w[:, None] * Phi
        self._cho = scipy.linalg.cho_factor(self.M)
        self.projection_matrix = self.mass_solve(Phi.T * w)
        self._Minv = self.mass_solve(np.eye(self.K))
        self._Minv = 0.5 * (self._Minv + self._Minv.T)
        self.derivative_matrix = self.mass_solve(self.S)
        ops = {
            "mass": self.M,
            "mass_inverse": self._Minv,
            "derivative": self.derivative_matrix,
            "stiffness_diag": self.stiffness_diag,
        }
        self.structure_ops = ops
        for arr in (self.M, self.S, self.basis_eval, self.projection_matrix, self._Minv):
            arr.setflags(write=False)

    def eval_basis(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        Lt = legendre_table(self.K + 1, x)
        return Lt[:, : self.K] - Lt[:, 2 : self.K + 2]

    def eval_basis_derivative(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        Lt = legendre_table(self.K, x)
        k = self.mode_table
        return -(2 * k + 1) * Lt[:, 1 : self.K + 1]

    def mass_solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, b)

    def gram(self):
        return self.M

    def _phi(self, a):
        return a @ self.basis_eval.T

    def _proj(self, u):
        return u @ self.projection_matrix.T

    def load_vector(self, g):
        return np.asarray(g, dtype=np.float64) @ self._weighted_basis

    def eval_at(self, points, a, lift: LiftingField | None = None, t: float = 0.0):
        """Evaluate the represented field at arbitrary points in [-1, 1]."""
        points = np.atleast_1d(np.asarray(points, dtype=np.float64))
        a = _coeffs(a)
        u = a @ self.eval_basis(points).T
        if lift is not None and not lift.is_zero:
            u = u + lift.value(points, t)
        return u

    def derivative(self, a):
        """Coefficients of the L2 projection of d_x u."""
        return _coeffs(a) @ self.derivative_matrix.T

    def shape_params(self):
        return {"Q": self.Q}


def build_shen_baseplate(Q: int, K: int) -> ShenBaseplate:
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    if Q < K + 2:
        raise InvalidArgumentError(f"Q={Q} too small for K={K}; need Q >= K+2")
    return ShenBaseplate(Q, K)


# ---------------------------------------------------------------------------
# 2D periodic Fourier
# ---------------------------------------------------------------------------

class Fourier2DBaseplate(Baseplate):
    """Hermitian-packed Fourier modes ``|j|, |l| <= K_cut`` on ``[0, 2pi)^2``.

    Packing: DC first (one real slot), then every mode of the half-plane
    ``{j > 0} U {j = 0, l > 0}`` in lexicographic ``(j, l)`` order, each as a
    ``(re, im)`` pair.  Coefficients follow ``u = sum a_jl exp(i(jx + ly))``.
    """

    family = "fourier_2d"

    def __init__(self, N: int, K_cut: int):
        self.N, self.K_cut = int(N), int(K_cut)
        N, Kc = self.N, self.K_cut
        self.dealias_cutoff = Kc
        h = 2 * np.pi / N
        xs = h * np.arange(N)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        self.grid = QuadratureGrid(2, nodes, np.full(N * N, h * h))

        reps = [(0, l) for l in range(1, Kc + 1)]
        reps += [(j, l) for j in range(1, Kc + 1) for l in range(-Kc, Kc + 1)]
        self.modes = np.array([(0, 0)] + reps, dtype=int)
        n_rep = len(reps)
        self.K = 1 + 2 * n_rep
        self.re_idx = 1 + 2 * np.arange(n_rep)
        self.im_idx = self.re_idx + 1

        # mode_table row per packed slot: (j, l, part) with part 0=real, 1=imag
        table = np.zeros((self.K, 3), dtype=int)
        table[1::2, :2] = reps
        table[2::2, :2] = reps
        table[2::2, 2] = 1
        self.mode_table = table
        self.jx = table[:, 0].astype(float)
        self.ly = table[:, 1].astype(float)
        self.k2 = self.jx ** 2 + self.ly ** 2
        self.wavenumber_norm = np.sqrt(self.k2)

        # half-spectrum (rfft2 layout) gather/scatter maps
        rows, cols, src, conj = [], [], [], []
        for p, (j, l) in enumerate([(0, 0)] + reps):
            for jj, ll, cj in ((j, l, False), (-j, -l, True)):
                if ll >= 0 and not (jj == j and ll == l and cj):
                    rows.append(jj % N)
                    cols.append(ll)
                    src.append(p)
                    conj.append(cj)
        self._h_rows = np.array(rows)
        self._h_cols = np.array(cols)
        self._h_src = np.array(src)
        self._h_conj = np.array(conj)
        # projection gather: for each representative read a half-spectrum entry
        g_rows, g_cols, g_conj = [], [], []
        for j, l in [(0, 0)] + reps:
            if l >= 0:
                g_rows.append(j % N)
                g_cols.append(l)
                g_conj.append(False)
            else:
                g_rows.append((-j) % N)
                g_cols.append(-l)
                g_conj.append(True)
        self._g_rows = np.array(g_rows)
        self._g_cols = np.array(g_cols)
        self._g_conj = np.array(g_conj)

        area = (2 * np.pi) ** 2
        self.metric = np.full(self.K, 2 * area)
        self.metric[0] = area
        self.structure_ops = {
            "k2": self.k2,
            "jx": self.jx,
            "ly": self.ly,
            "metric": self.metric,
        }
        for arr in (self.jx, self.ly, self.k2, self.metric, self.mode_table):
            arr.setflags(write=False)

    # packing ----------------------------------------------------------------
    def pack(self, z: np.ndarray) -> np.ndarray:
        """Complex representative amplitudes (..., n_modes) -> packed real vector."""
        z = np.asarray(z)
        out = np.empty(z.shape[:-1] + (self.K,))
        out[..., 0] = z[..., 0].real
        out[..., self.re_idx] = z[..., 1:].real
        out[..., self.im_idx] = z[..., 1:].imag
        return out

    def unpack(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        z = np.empty(a.shape[:-1] + (len(self.modes),), dtype=complex)
        z[..., 0] = a[..., 0]
        z[..., 1:] = a[..., self.re_idx] + 1j * a[..., self.im_idx]
        return z

    def full_spectrum(self, a) -> np.ndarray:
        """Dense ``(..., N, N)`` complex array ``c[j mod N, l mod N]``."""
        z = self.unpack(_coeffs(a))
        N = self.N
        c = np.zeros(z.shape[:-1] + (N, N), dtype=complex)
        for p, (j, l) in enumerate(self.modes):
            c[..., j % N, l % N] = z[..., p]
            c[..., (-j) % N, (-l) % N] = np.conj(z[..., p])
        return c

    def _phi(self, a):
        z = self.unpack(a)
        N = self.N
        half = np.zeros(a.shape[:-1] + (N, N // 2 + 1), dtype=complex)
        vals = z[..., self._h_src]
        vals = np.where(self._h_conj, np.conj(vals), vals)
        half[..., self._h_rows, self._h_cols] = vals
        u = np.fft.irfft2(half, s=(N, N), norm="forward")
        return u.reshape(a.shape[:-1] + (N * N,))

    def _proj(self, u):
        N = self.N
        half = np.fft.rfft2(u.reshape(u.shape[:-1] + (N, N)), norm="forward")
        z = half[..., self._g_rows, self._g_cols]
        z = np.where(self._g_conj, np.conj(z), z)
        return self.pack(z)

    # fixed operators --------------------------------------------------------
    def dx(self, a):
        """Coefficients of d_x u (exact on the retained band)."""
        return self._deriv(_coeffs(a), self.jx)

    def dy(self, a):
        return self._deriv(_coeffs(a), self.ly)

    def _deriv(self, a, k):
        # (re, im) -> k * (-im, re)
        out = np.zeros_like(a)
        kk = k[self.re_idx]
        out[..., self.re_idx] = -kk * a[..., self.im_idx]
        out[..., self.im_idx] = kk * a[..., self.re_idx]
        return out

    def laplacian_eigs(self) -> np.ndarray:
        return -self.k2

    def gram(self):
        return np.diag(self.metric)

    def to_grid(self, u):
        return np.asarray(u).reshape(np.shape(u)[:-1] + (self.N, self.N))

    def shape_params(self):
        return {"N": self.N, "K_cut": self.K_cut}


def build_fourier2d_baseplate(N: int, K_cut: int) -> Fourier2DBaseplate:
    if K_cut < 0:
        raise InvalidArgumentError("K_cut must be >= 0")
    if N % 2:
        raise InvalidArgumentError(f"N must be even, got {N}")
    if N < 3 * K_cut:
        raise InvalidArgumentError(f"N={N} < 3*K_cut={3 * K_cut}: aliasing risk")
    return Fourier2DBaseplate(N, K_cut)


# ---------------------------------------------------------------------------
# 2D Neumann cosine
# ---------------------------------------------------------------------------

class Cosine2DBaseplate(Baseplate):
    """``cos(pi j x) cos(pi l y)``, ``0 <= j, l <= K_cut`` on ``[0, 1]^2``.

    Coefficients are stacked with ``j`` major.  The endpoint grid has ``N``
    points per direction with trapezoid weights (halved on edges, quartered
    at corners).
    """

    family = "cosine_2d"

    def __init__(self, N: int, K_cut: int):
        self.N, self.K_cut = int(N), int(K_cut)
        N, Kc = self.N, self.K_cut
        self.dealias_cutoff = Kc
        n = N - 1
        xs = np.arange(N) / n
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        w1 = np.full(N, 1.0 / n)
        w1[[0, -1]] *= 0.5
        self.w1 = w1
        self.grid = QuadratureGrid(2, np.stack([X.ravel(), Y.ravel()], 1), np.outer(w1, w1).ravel())
        self.K = (Kc + 1) ** 2
        jj, ll = np.meshgrid(np.arange(Kc + 1), np.arange(Kc + 1), indexing="ij")
        self.mode_table = np.stack([jj.ravel(), ll.ravel()], 1)
        self.jx = jj.ravel().astype(float)
        self.ly = ll.ravel().astype(float)
        self.k2 = np.pi ** 2 * (self.jx ** 2 + self.ly ** 2)
        self.C1 = np.cos(np.pi * np.outer(xs, np.arange(Kc + 1)))
        # sum'' cos^2 = 1 (j = 0) or 1/2 (0 < j < N-1)
        norm1 = np.full(Kc + 1, 0.5)
        norm1[0] = 1.0
        self.metric = np.outer(norm1, norm1).ravel()
        self.structure_ops = {"k2": self.k2, "metric": self.metric}
        for arr in (self.jx, self.ly, self.k2, self.metric, self.C1):
            arr.setflags(write=False)

    def _phi(self, a):
        Kc1 = self.K_cut + 1
        A = a.reshape(a.shape[:-1] + (Kc1, Kc1))
        u = self.C1 @ A @ self.C1.T
        return u.reshape(a.shape[:-1] + (self.N * self.N,))

    def _proj(self, u):
        N, Kc1, n = self.N, self.K_cut + 1, self.N - 1
        U = u.reshape(u.shape[:-1] + (N, N))
        y = scipy.fft.dctn(U, type=1, axes=(-2, -1))[..., :Kc1, :Kc1]
        scale = np.full(Kc1, 1.0 / n)
        scale[0] = 0.5 / n
        y = y * scale[:, None] * scale[None, :]
        return y.reshape(u.shape[:-1] + (self.K,))

    def laplacian_eigs(self):
        return -self.k2

    def gram(self):
        return np.diag(self.metric)

    def to_grid(self, u):
        return np.asarray(u).reshape(np.shape(u)[:-1] + (self.N, self.N))

    def shape_params(self):
        return {"N": self.N, "K_cut": self.K_cut}


def build_cosine2d_baseplate(N: int, K_cut: int) -> Cosine2DBaseplate:
    if N < 3 or N % 2 == 0:
        raise InvalidArgumentError(f"N must be odd and >= 3, got {N}")
    if K_cut < 0 or 3 * K_cut > N - 1:
        raise InvalidArgumentError(f"K_cut={K_cut} exceeds (N-1)/3 for N={N}")
    return Cosine2DBaseplate(N, K_cut)


def build_baseplate(manifest: dict) -> Baseplate:
    """Rebuild a baseplate from (a subset of) its manifest."""
    fam = manifest["family"]
    if fam == "shen_legendre_1d":
        return build_shen_baseplate(manifest["Q"], manifest["K"])
    if fam == "fourier_2d":
        return build_fourier2d_baseplate(manifest["N"], manifest["K_cut"])
    if fam == "cosine_2d":
        return build_cosine2d_baseplate(manifest["N"], manifest["K_cut"])
    raise InvalidArgumentError(f"unknown baseplate family {fam!r}")


# functional aliases ----------------------------------------------------------

def reconstruct(bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
    return bp.reconstruct(a, lift, t)


def project(bp: Baseplate, field):
    return bp.project(field)


def dealias(bp: Baseplate, a):
    return bp.dealias(a)

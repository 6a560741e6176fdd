"""Exact coefficient-space mechanism fields.

Every function returns the additive right-hand-side contribution of one
mechanism, ``a_t = sum_i F_i(a)``; transport operators therefore carry
their minus sign.  Nonlinear mechanisms follow reconstruct -> evaluate
pointwise -> project.  All functions accept a batch of states ``(..., K)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baseplate import (
    Baseplate,
    Cosine2DBaseplate,
    Fourier2DBaseplate,
    LiftingField,
    ShenBaseplate,
    _coeffs,
)
from .errors import InvalidArgumentError, NumericError

__all__ = [
    "ReferenceOp",
    "POINTWISE_MAPS",
    "ref_shen_uxx",
    "ref_shen_uux",
    "ref_fourier_laplacian",
    "ref_poisson_inverse",
    "ref_pointwise",
    "ref_forcing",
    "ref_transport_2d",
    "ref_vorticity_transport",
    "kolmogorov_forcing",
    "make_reference_op",
]


def _require(bp, cls, what):
    if not isinstance(bp, cls):
        raise InvalidArgumentError(f"{what} requires a {cls.family} baseplate, got {bp.family}")


def ref_shen_uxx(bp: ShenBaseplate, a) -> np.ndarray:
    """Galerkin projection of u_xx: ``M y = -A a`` with the diagonal stiffness A."""
    _require(bp, ShenBaseplate, "ref_shen_uxx")
    a = _coeffs(a)
    bp.check(a)
    return -(a * bp.stiffness_diag) @ bp.structure_ops["mass_inverse"]


def ref_shen_uux(bp: ShenBaseplate, a) -> np.ndarray:
    """``-P(u u_x)`` with the product formed on the quadrature nodes."""
    _require(bp, ShenBaseplate, "ref_shen_uux")
    a = _coeffs(a)
    bp.check(a)
    u = a @ bp.basis_eval.T
    ux = a @ bp.basis_deriv.T
    return -bp.project(u * ux)


def ref_fourier_laplacian(bp: Baseplate, a) -> np.ndarray:
    """Modewise ``-(j^2 + l^2)`` (Fourier) or ``-pi^2 (j^2 + l^2)`` (cosine)."""
    if not isinstance(bp, (Fourier2DBaseplate, Cosine2DBaseplate)):
        raise InvalidArgumentError("Laplacian reference needs a Fourier or cosine baseplate")
    a = _coeffs(a)
    bp.check(a)
    return -bp.k2 * a


def _inverse_k2(bp):
    inv = np.zeros(bp.K)
    nz = bp.k2 > 0
    inv[nz] = 1.0 / bp.k2[nz]
    return inv


def ref_poisson_inverse(bp: Fourier2DBaseplate, omega) -> np.ndarray:
    """Streamfunction with ``-Lap psi = omega``; the DC mode of psi is set to zero."""
    _require(bp, Fourier2DBaseplate, "ref_poisson_inverse")
    omega = _coeffs(omega)
    bp.check(omega)
    return omega * _inverse_k2(bp)


POINTWISE_MAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda u: u,
    "zero": lambda u: np.zeros_like(u),
    "cube": lambda u: u ** 3,
    "allen_cahn": lambda u: u - u ** 3,
    "ginzburg_landau": lambda u: -(u + u ** 3),
}


def _checked(values, what):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericError(f"{what} produced a non-finite value", location=tuple(int(i) for i in bad))
    return values


def ref_pointwise(bp: Baseplate, a, f, lift: LiftingField | None = None, t: float = 0.0) -> np.ndarray:
    """``P(f(u))`` with ``u`` reconstructed (including the lift) on the nodes.

    ``f`` is a callable of the nodal values or a key of ``POINTWISE_MAPS``.
    """
    if isinstance(f, str):
        f = POINTWISE_MAPS[f]
    u = bp.reconstruct(a, lift, t)
    return bp.project(_checked(f(u), "pointwise map"))


def ref_forcing(bp: Baseplate, g: Callable, t: float = 0.0, shape=()) -> np.ndarray:
    """Projection of a state-independent source ``g(x, t)``."""
    vals = _checked(np.asarray(g(bp.grid.nodes, t), dtype=float), "forcing")
    out = bp.project(vals)
    return np.broadcast_to(out, tuple(shape) + (bp.K,)).copy()


def ref_transport_2d(bp: Fourier2DBaseplate, a_u, a_v):
    """Pseudospectral ``-(u u_x + v u_y)`` and ``-(u v_x + v v_y)``."""
    _require(bp, Fourier2DBaseplate, "ref_transport_2d")
    a_u, a_v = _coeffs(a_u), _coeffs(a_v)
    u, v = bp._phi(a_u), bp._phi(a_v)
    ux, uy = bp._phi(bp.dx(a_u)), bp._phi(bp.dy(a_u))
    vx, vy = bp._phi(bp.dx(a_v)), bp._phi(bp.dy(a_v))
    return -bp.project(u * ux + v * uy), -bp.project(u * vx + v * vy)


def ref_vorticity_transport(bp: Fourier2DBaseplate, omega, psi=None) -> np.ndarray:
    """``-(psi_y omega_x - psi_x omega_y)``; ``psi`` defaults to the exact Poisson inverse."""
    _require(bp, Fourier2DBaseplate, "ref_vorticity_transport")
    omega = _coeffs(omega)
    if psi is None:
        psi = ref_poisson_inverse(bp, omega)
    u = bp._phi(bp.dy(psi))
    v = -bp._phi(bp.dx(psi))
    wx, wy = bp._phi(bp.dx(omega)), bp._phi(bp.dy(omega))
    return -bp.project(u * wx + v * wy)


def kolmogorov_forcing(amplitude: float = 0.1):
    def g(x, t):
        s = x[:, 0] + x[:, 1]
        return amplitude * (np.sin(s) + np.cos(s))

    return g


@dataclass
class ReferenceOp:
    """A named exact mechanism field bound to one baseplate.

    ``eval(a, t)`` is batched over leading axes.  ``diagonal`` holds the
    modewise multiplier when the operator is diagonal-linear on the packed
    coordinates.
    """

    name: str
    baseplate_id: str
    eval: Callable[..., np.ndarray]
    kind_hint: str
    lift_aware: bool = False
    linear: bool = False
    autonomous: bool = True
    diagonal: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, a, t: float = 0.0):
        return self.eval(a, t)


def make_reference_op(name: str, bp: Baseplate, lift: LiftingField | None = None, **params) -> ReferenceOp:
    """Registry of the reference mechanisms used by the experiment assemblies."""
    if name == "shen_uxx":
        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_shen_uxx(bp, a), "dissipative", linear=True)
    if name == "shen_uux":
        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_shen_uux(bp, a), "conservative")
    if name == "laplacian":
        diag = -bp.k2
        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_fourier_laplacian(bp, a), "dissipative",
                           linear=True, diagonal=diag)
    if name == "poisson_inverse":
        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_poisson_inverse(bp, a), "auxiliary",
                           linear=True, diagonal=_inverse_k2(bp))
    if name == "pointwise":
        fname = params["map"]
        f = POINTWISE_MAPS[fname]
        return ReferenceOp(f"pointwise:{fname}", bp.id,
                           lambda a, t=0.0: ref_pointwise(bp, a, f, lift, t), "residual",
                           lift_aware=lift is not None and not lift.is_zero,
                           autonomous=lift is None or lift.is_zero, params={"map": fname})
    if name == "lift_forcing":
        if lift is None or lift.is_zero:
            raise InvalidArgumentError("lift_forcing needs a non-zero lift")

        def g(x, t):
            return -lift.time_derivative(x, t)

        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_forcing(bp, g, t, np.shape(a)[:-1]),
                           "residual", lift_aware=True, autonomous=False)
    if name == "kolmogorov_forcing":
        amp = params.get("amplitude", 0.1)
        g = kolmogorov_forcing(amp)
        const = ref_forcing(bp, g)
        return ReferenceOp(name, bp.id,
                           lambda a, t=0.0: np.broadcast_to(const, np.shape(a)).copy(),
                           "residual", params={"amplitude": amp})
    if name == "vorticity_transport":
        return ReferenceOp(name, bp.id, lambda a, t=0.0: ref_vorticity_transport(bp, a), "conservative")
    raise InvalidArgumentError(f"unknown reference op {name!r}")

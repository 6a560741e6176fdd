"""Scalar generators ``E(a)`` / ``H(a)`` with analytic coefficient gradients.

Four variants are provided:

``mlp``
    a free network ``f_theta(a)``, optionally with fixed per-coordinate
    input scaling;
``quadratic_lowrank``
    ``1/2 a^T (diag(k) + U U^T) a``;
``quadratic_diagonal_softplus``
    ``1/2 sign * sum_k softplus(c_raw_k) a_k^2``;
``density``
    ``sum_q w_q rho(u(x_q))`` with ``u`` reconstructed on the quadrature
    nodes; ``rho`` is a scalar network or a polynomial with trainable
    coefficients.

Every generator exposes ``linearize(bp, a, lift, t)`` returning the
gradient and a closure ``vjp(v)`` for the parameter gradient of
``<grad_a g, v>``; the training loop only needs that pair.  All methods
accept a batch of states ``(B, K)`` and sum parameter gradients over it.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .baseplate import Baseplate, LiftingField, _coeffs
from .errors import InvalidArgumentError, NumericError
from .nnet import (
    MlpParams,
    directional_param_grad_from_cache,
    forward_cache,
    init_mlp,
    input_gradient_from_cache,
)

__all__ = [
    "ScalarGenerator",
    "MlpGenerator",
    "QuadraticLowRank",
    "QuadraticDiagonalSoftplus",
    "PolynomialDensity",
    "DensityGenerator",
    "softplus",
    "inverse_softplus",
    "gen_value",
    "gen_grad",
    "gen_grad_param_vjp",
    "generator_from_dict",
]


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise InvalidArgumentError("inverse softplus needs positive values")
    # log(expm1(y)) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} is not finite")
    return x


def _as_batch(a):
    a = _coeffs(a)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


class ScalarGenerator:
    """Base class; subclasses set ``variant`` and implement ``_value`` / ``_linearize``."""

    variant: str = ""
    trainable: bool = True

    # -- public API ------------------------------------------------------
    def value(self, bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
        A, single = _as_batch(a)
        bp.check(A)
        v = _finite(self._value(bp, A, lift, t), f"{self.variant} generator value")
        return float(v[0]) if single else v

    def grad(self, bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
        g, _ = self.linearize(bp, a, lift, t)
        return g

    def linearize(self, bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
        """``(grad_a g(a), vjp)`` where ``vjp(v)`` is the parameter gradient of ``sum <grad_a g, v>``."""
        A, single = _as_batch(a)
        bp.check(A)
        g, vjp_batch = self._linearize(bp, A, lift, t)
        _finite(g, f"{self.variant} generator gradient")

        def vjp(v):
            V = np.asarray(v, dtype=np.float64)
            V = V[None, :] if V.ndim == 1 else V
            if V.shape != A.shape:
                raise InvalidArgumentError(f"direction shape {V.shape} != state shape {A.shape}")
            return vjp_batch(V)

        return (g[0] if single else g), vjp

    def grad_param_vjp(self, bp, a, lift=None, t=0.0, v=None):
        if v is None:
            raise InvalidArgumentError("grad_param_vjp needs a direction v")
        _, vjp = self.linearize(bp, a, lift, t)
        return vjp(v)

    def params(self) -> list[np.ndarray]:
        """Live trainable arrays (updated in place by the optimizer)."""
        return []

    def copy(self) -> "ScalarGenerator":
        return generator_from_dict(self.to_dict())

    def to_dict(self) -> dict:
        raise NotImplementedError

    # -- structural hints used by the integrators ------------------------
    @property
    def quadratic_matrix(self) -> np.ndarray | None:
        """``C`` when the generator is ``1/2 a^T C a``, else None."""
        return None

    @property
    def diagonal(self) -> np.ndarray | None:
        """Effective diagonal when ``C`` is diagonal, else None."""
        return None

    # -- subclass hooks --------------------------------------------------
    def _value(self, bp, A, lift, t):
        raise NotImplementedError

    def _linearize(self, bp, A, lift, t):
        raise NotImplementedError


# ---------------------------------------------------------------------------
class MlpGenerator(ScalarGenerator):
    """``c * f_theta(a / s)`` for a scalar-output network, fixed positive input
    scales ``s`` and a fixed output scale ``c``.

    ``parity="even"`` uses ``(f(z) + f(-z)) / 2`` and ``"odd"`` uses
    ``(f(z) - f(-z)) / 2``, which builds the symmetry of, e.g., a quadratic
    energy into the hypothesis class at twice the evaluation cost.
    """

    variant = "mlp"
    PARITIES = ("none", "even", "odd")

    def __init__(self, net: MlpParams, input_scale=None, parity: str = "none", output_scale: float = 1.0):
        if net.out_dim != 1:
            raise InvalidArgumentError("mlp generator needs a scalar-output network")
        if parity not in self.PARITIES:
            raise InvalidArgumentError(f"parity must be one of {self.PARITIES}")
        self.net = net
        K = net.widths[0]
        s = np.ones(K) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        if s.shape != (K,) or np.any(s <= 0):
            raise InvalidArgumentError("input_scale must be a positive length-K vector")
        self.input_scale = s
        self.parity = parity
        if not (np.isfinite(output_scale) and output_scale > 0):
            raise InvalidArgumentError("output_scale must be positive and finite")
        self.output_scale = float(output_scale)

    @classmethod
    def init(cls, K, hidden=(128, 128, 128, 128), activation="gelu", seed=0, input_scale=None,
             parity="none", output_scale=1.0):
        return cls(init_mlp([K, *hidden, 1], activation, seed), input_scale, parity, output_scale)

    def _inputs(self, A):
        Z = A / self.input_scale
        return Z if self.parity == "none" else np.vstack([Z, -Z])

    def _value(self, bp, A, lift, t):
        out = self.output_scale * forward_cache(self.net, self._inputs(A)).out[:, 0]
        if self.parity == "none":
            return out
        n = A.shape[0]
        return 0.5 * (out[:n] + out[n:]) if self.parity == "even" else 0.5 * (out[:n] - out[n:])

    def _linearize(self, bp, A, lift, t):
        s = self.input_scale / self.output_scale
        cache = forward_cache(self.net, self._inputs(A))
        gs, gz = input_gradient_from_cache(self.net, cache)
        n = A.shape[0]
        if self.parity == "none":
            g = gz / s
        else:
            # d/dz f(-z) = -f'(-z)
            sgn = -1.0 if self.parity == "even" else 1.0
            g = 0.5 * (gz[:n] + sgn * gz[n:]) / s

        def vjp(V):
            W = V / s
            if self.parity != "none":
                W = np.vstack([0.5 * W, 0.5 * sgn * W])
            return directional_param_grad_from_cache(self.net, cache, gs, W)

        return g, vjp

    def params(self):
        return self.net.arrays()

    def to_dict(self):
        return {"variant": self.variant, "net": self.net.to_dict(),
                "input_scale": self.input_scale.tolist(), "parity": self.parity,
                "output_scale": self.output_scale}


# ---------------------------------------------------------------------------
class QuadraticLowRank(ScalarGenerator):
    """``1/2 a^T (diag(k) + U U^T) a``; rank 0 gives an exact diagonal form."""

    variant = "quadratic_lowrank"

    def __init__(self, k, U=None, rank: int = 4):
        self.k = np.array(k, dtype=np.float64)
        K = self.k.size
        self.U = np.zeros((K, rank)) if U is None else np.array(U, dtype=np.float64).reshape(K, -1)

    @classmethod
    def init(cls, K, rank=4, seed=0, scale=1e-2):
        rng = np.random.default_rng(seed)
        return cls(np.ones(K), scale * rng.standard_normal((K, rank)))

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def quadratic_matrix(self):
        return np.diag(self.k) + self.U @ self.U.T

    @property
    def diagonal(self):
        if self.rank == 0 or not np.any(self.U):
            return self.k.copy()
        return None

    def _value(self, bp, A, lift, t):
        UA = A @ self.U
        return 0.5 * (np.sum(self.k * A * A, axis=-1) + np.sum(UA * UA, axis=-1))

    def _linearize(self, bp, A, lift, t):
        UA = A @ self.U
        g = self.k * A + UA @ self.U.T

        def vjp(V):
            dk = np.sum(V * A, axis=0)
            dU = V.T @ UA + A.T @ (V @ self.U)
            return [dk, dU]

        return g, vjp

    def params(self):
        return [self.k, self.U]

    def to_dict(self):
        return {"variant": self.variant, "k": self.k.tolist(), "U": self.U.tolist(), "rank": self.rank}


# ---------------------------------------------------------------------------
class QuadraticDiagonalSoftplus(ScalarGenerator):
    """``1/2 sign * sum_k softplus(c_raw_k) a_k^2``; the effective diagonal never vanishes."""

    variant = "quadratic_diagonal_softplus"

    def __init__(self, c_raw, sign: float = 1.0):
        if sign not in (1.0, -1.0, 1, -1):
            raise InvalidArgumentError("sign must be +1 or -1")
        self.c_raw = np.array(c_raw, dtype=np.float64)
        self.sign = float(sign)

    @classmethod
    def init(cls, K, value=1.0, sign=1.0):
        return cls(np.full(K, float(inverse_softplus(value))), sign)

    @property
    def diagonal(self):
        return self.sign * softplus(self.c_raw)

    @property
    def quadratic_matrix(self):
        return np.diag(self.diagonal)

    def _value(self, bp, A, lift, t):
        return 0.5 * np.sum(self.diagonal * A * A, axis=-1)

    def _linearize(self, bp, A, lift, t):
        g = self.diagonal * A

        def vjp(V):
            return [self.sign * expit(self.c_raw) * np.sum(V * A, axis=0)]

        return g, vjp

    def params(self):
        return [self.c_raw]

    def to_dict(self):
        return {"variant": self.variant, "c_raw": self.c_raw.tolist(), "sign": self.sign}


# ---------------------------------------------------------------------------
class PolynomialDensity:
    """``rho(u) = sum_p c_p u^p`` with trainable coefficients."""

    def __init__(self, powers, coeffs):
        self.powers = np.array(powers, dtype=int)
        self.coeffs = np.array(coeffs, dtype=np.float64)
        if self.powers.shape != self.coeffs.shape or np.any(self.powers < 0):
            raise InvalidArgumentError("powers and coeffs must be matching non-negative arrays")

    def rho(self, u):
        return np.sum(self.coeffs * u[..., None] ** self.powers, axis=-1)

    def rho_prime(self, u):
        p = self.powers
        pm1 = np.maximum(p - 1, 0)
        return np.sum(self.coeffs * p * u[..., None] ** pm1, axis=-1)

    def param_grad_of_weighted_prime(self, u, s):
        """``d/dc_p sum s * rho'(u)``."""
        p = self.powers
        pm1 = np.maximum(p - 1, 0)
        return [np.sum((s * 1.0)[..., None] * p * u[..., None] ** pm1,
                       axis=tuple(range(u.ndim)))]

    def arrays(self):
        return [self.coeffs]

    def to_dict(self):
        return {"kind": "polynomial", "powers": self.powers.tolist(), "coeffs": self.coeffs.tolist()}


class _NetDensity:
    """Adapter giving a scalar network the density interface."""

    def __init__(self, net: MlpParams):
        if net.widths[0] != 1 or net.out_dim != 1:
            raise InvalidArgumentError("density network must map R -> R")
        self.net = net

    def rho(self, u):
        return forward_cache(self.net, u.reshape(-1, 1)).out[:, 0].reshape(u.shape)

    def _grad(self, u):
        cache = forward_cache(self.net, u.reshape(-1, 1))
        gs, gx = input_gradient_from_cache(self.net, cache)
        return cache, gs, gx[:, 0].reshape(u.shape)

    def rho_prime(self, u):
        return self._grad(u)[2]

    def arrays(self):
        return self.net.arrays()

    def to_dict(self):
        return {"kind": "mlp", "net": self.net.to_dict()}


class DensityGenerator(ScalarGenerator):
    """``sum_q w_q rho(u(x_q))`` with ``u = u_lift + Phi a`` on the nodes.

    The gradient is the load vector ``Phi^T (w * rho'(u))``.  With
    ``include_lift`` false the lift is ignored even when one is passed.
    """

    variant = "density"

    def __init__(self, model, include_lift: bool = True):
        if isinstance(model, MlpParams):
            model = _NetDensity(model)
        if not isinstance(model, (PolynomialDensity, _NetDensity)):
            raise InvalidArgumentError("density model must be an MlpParams or PolynomialDensity")
        self.model = model
        self.include_lift = bool(include_lift)

    @classmethod
    def init(cls, hidden=(128, 128, 128, 128), activation="gelu", seed=0, include_lift=True):
        return cls(init_mlp([1, *hidden, 1], activation, seed), include_lift)

    @classmethod
    def polynomial(cls, coeffs: dict, include_lift=True):
        powers = sorted(coeffs)
        return cls(PolynomialDensity(powers, [coeffs[p] for p in powers]), include_lift)

    def _field(self, bp, A, lift, t):
        return bp.reconstruct(A, lift if self.include_lift else None, t)

    def _value(self, bp, A, lift, t):
        u = self._field(bp, A, lift, t)
        return np.sum(bp.grid.weights * self.model.rho(u), axis=-1)

    def _linearize(self, bp, A, lift, t):
        u = self._field(bp, A, lift, t)
        w = bp.grid.weights
        if isinstance(self.model, _NetDensity):
            cache, gs, rp = self.model._grad(u)
        else:
            rp = self.model.rho_prime(u)
        g = bp.load_vector(rp)

        def vjp(V):
            s = w * bp.reconstruct(V)
            if isinstance(self.model, _NetDensity):
                return directional_param_grad_from_cache(self.model.net, cache, gs, s.reshape(-1, 1))
            return self.model.param_grad_of_weighted_prime(u, s)

        return g, vjp

    def params(self):
        return self.model.arrays()

    def to_dict(self):
        return {"variant": self.variant, "model": self.model.to_dict(), "include_lift": self.include_lift}


# ---------------------------------------------------------------------------
def generator_from_dict(d: dict) -> ScalarGenerator:
    v = d.get("variant")
    if v == "mlp":
        return MlpGenerator(MlpParams.from_dict(d["net"]), d.get("input_scale"), d.get("parity", "none"),
                            d.get("output_scale", 1.0))
    if v == "quadratic_lowrank":
        U = np.array(d["U"], dtype=np.float64).reshape(len(d["k"]), int(d.get("rank", 0)))
        return QuadraticLowRank(d["k"], U)
    if v == "quadratic_diagonal_softplus":
        return QuadraticDiagonalSoftplus(d["c_raw"], d["sign"])
    if v == "density":
        m = d["model"]
        if m["kind"] == "mlp":
            model = MlpParams.from_dict(m["net"])
        elif m["kind"] == "polynomial":
            model = PolynomialDensity(m["powers"], m["coeffs"])
        else:
            raise InvalidArgumentError(f"unknown density model {m['kind']!r}")
        return DensityGenerator(model, d["include_lift"])
    raise InvalidArgumentError(f"unknown generator variant {v!r}")


def gen_value(g: ScalarGenerator, bp, a, lift=None, t=0.0):
    return g.value(bp, a, lift, t)


def gen_grad(g: ScalarGenerator, bp, a, lift=None, t=0.0):
    return g.grad(bp, a, lift, t)


def gen_grad_param_vjp(g: ScalarGenerator, bp, a, lift, t, v):
    return g.grad_param_vjp(bp, a, lift, t, v)

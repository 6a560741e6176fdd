"""Typed coefficient-space blocks built from generators and fixed operators.

A block contributes ``F(a)`` to ``a_t = sum_i F_i(a)``:

* kind ``E``: ``-scale * G grad E(a)`` with ``G`` symmetric positive semidefinite;
* kind ``H``: ``scale * J grad H(a)`` with ``J`` skew;
* kind ``R``: ``scale * R(a, t)`` for any residual map;
* kind ``auxiliary``: ``scale * G grad E(a)`` (or a residual map), exposed as
  a map and never summed into the dynamics.

Every block may carry a constant ``shift`` added after scaling; it is used
by the perturbation studies.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
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
from .errors import InvalidArgumentError
from .generators import ScalarGenerator, generator_from_dict
from .refops import ReferenceOp

__all__ = [
    "StructureOperator",
    "make_structure",
    "certify_structure",
    "Block",
    "BlockSet",
    "eval_block",
    "sum_field",
    "compose_repeated",
    "linear_combination",
    "swift_hohenberg_linear",
    "block_mismatch",
    "BLOCK_KINDS",
]

BLOCK_KINDS = ("E", "H", "R", "auxiliary")
G_KINDS = ("identity", "shen_mass_inverse", "cosine_laplacian_metric")
J_KINDS = ("shen_derivative", "fourier_dx", "fourier_dy")


@dataclass(frozen=True)
class StructureOperator:
    """A fixed linear map on coefficient vectors.

    Gradients ``grad_a`` are covectors, so symmetry and skewness are
    certified in the plain coefficient pairing ``x . (O x)``, which is the
    pairing that appears in ``d/dt E = grad E . F``.
    """

    kind: str
    category: str  # "G" or "J"
    matrix: np.ndarray | None = None
    diag: np.ndarray | None = None
    action: Callable | None = None

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.matrix is not None:
            return x @ self.matrix.T
        if self.diag is not None:
            return self.diag * x
        if self.action is not None:
            return self.action(x)
        return x.copy()

    def apply_transpose(self, x):
        if self.category == "G":
            return self.apply(x)
        return -self.apply(x)

    def dense(self, K: int) -> np.ndarray:
        return self.apply(np.eye(K)).T


def make_structure(kind: str, bp: Baseplate) -> StructureOperator:
    if kind == "identity":
        return StructureOperator(kind, "G")
    if kind == "shen_mass_inverse":
        _need(bp, ShenBaseplate, kind)
        return StructureOperator(kind, "G", matrix=bp.structure_ops["mass_inverse"])
    if kind == "shen_derivative":
        _need(bp, ShenBaseplate, kind)
        # M^{-1} S M^{-1}: differentiates the field whose load vector is the
        # argument, and is exactly skew because S is.
        Minv = bp.structure_ops["mass_inverse"]
        J = Minv @ bp.S @ Minv
        J = 0.5 * (J - J.T)
        J.setflags(write=False)
        return StructureOperator(kind, "J", matrix=J)
    if kind in ("fourier_dx", "fourier_dy"):
        _need(bp, Fourier2DBaseplate, kind)
        inv_metric = 1.0 / bp.metric
        deriv = bp.dx if kind == "fourier_dx" else bp.dy
        return StructureOperator(kind, "J", action=lambda x: deriv(x * inv_metric))
    if kind == "cosine_laplacian_metric":
        _need(bp, Cosine2DBaseplate, kind)
        return StructureOperator(kind, "G", diag=1.0 / bp.metric)
    raise InvalidArgumentError(f"unknown structure kind {kind!r}")


def _need(bp, cls, kind):
    if not isinstance(bp, cls):
        raise InvalidArgumentError(f"structure {kind!r} needs a {cls.family} baseplate")


def certify_structure(op: StructureOperator, K: int, n: int = 100, seed: int = 0) -> dict:
    """Random-vector certificate: worst normalized ``x . O x`` over ``n`` draws.

    For G-kinds ``worst`` is the most negative Rayleigh quotient (should be
    >= 0); for J-kinds it is ``max |x . J x| / (|x| |J x|)`` (should be 0).
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, K))
    OX = op.apply(X)
    q = np.sum(X * OX, axis=1)
    if op.category == "G":
        worst = float(np.min(q / np.sum(X * X, axis=1)))
        ok = worst >= -1e-11
    else:
        denom = np.linalg.norm(X, axis=1) * np.maximum(np.linalg.norm(OX, axis=1), 1e-300)
        worst = float(np.max(np.abs(q) / denom))
        ok = worst <= 1e-11
    return {"kind": op.kind, "category": op.category, "worst": worst, "ok": bool(ok), "n": n}


# ---------------------------------------------------------------------------
class Block:
    """One mechanism on a fixed baseplate.

    ``generator`` is required for kinds E and H; ``field(a, t)`` for kind R.
    Auxiliary blocks accept either.
    """

    def __init__(self, name: str, kind: str, baseplate: Baseplate, *,
                 generator: ScalarGenerator | None = None,
                 field: Callable | None = None,
                 structure: StructureOperator | str | None = None,
                 scale: float = 1.0,
                 shift=None,
                 linear: bool | None = None,
                 autonomous: bool = True,
                 reference: str | None = None):
        if kind not in BLOCK_KINDS:
            raise InvalidArgumentError(f"unknown block kind {kind!r}")
        if not np.isfinite(scale):
            raise InvalidArgumentError("block scale must be finite")
        if kind in ("E", "H") and generator is None:
            raise InvalidArgumentError(f"{kind}-block needs a generator")
        if kind == "R" and field is None:
            raise InvalidArgumentError("R-block needs a field")
        if generator is None and field is None:
            raise InvalidArgumentError("block needs a generator or a field")
        if isinstance(structure, str):
            structure = make_structure(structure, baseplate)
        if generator is not None:
            if structure is None:
                structure = make_structure("identity", baseplate)
            want = "J" if kind == "H" else "G"
            if structure.category != want:
                raise InvalidArgumentError(f"{kind}-block needs a {want}-kind structure, got {structure.kind}")
        self.name = name
        self.kind = kind
        self.baseplate = baseplate
        self.generator = generator
        self.field = field
        self.structure = structure
        self.scale = float(scale)
        self.shift = None if shift is None else np.asarray(shift, dtype=np.float64).copy()
        if self.shift is not None and self.shift.shape != (baseplate.K,):
            raise InvalidArgumentError("shift must be a length-K vector")
        if linear is None:
            linear = generator is not None and generator.quadratic_matrix is not None
        self.linear = bool(linear)
        self.autonomous = bool(autonomous)
        self.reference = reference

    # -- construction helpers --------------------------------------------
    @classmethod
    def from_reference(cls, ref: ReferenceOp, baseplate: Baseplate, kind: str = "R",
                       scale: float = 1.0, name: str | None = None) -> "Block":
        if ref.baseplate_id != baseplate.id:
            raise InvalidArgumentError("reference op belongs to a different baseplate")
        b = cls(name or ref.name, kind, baseplate, field=ref.eval, scale=scale,
                linear=ref.linear, autonomous=ref.autonomous, reference=ref.name)
        b._ref_diagonal = ref.diagonal
        return b

    @property
    def baseplate_id(self) -> str:
        return self.baseplate.id

    @property
    def trainable(self) -> bool:
        return self.generator is not None and bool(self.generator.params())

    def perturbed(self, shift) -> "Block":
        """Copy with ``shift`` added to the existing constant shift."""
        b = copy.copy(self)
        s = np.asarray(shift, dtype=np.float64)
        b.shift = s.copy() if self.shift is None else self.shift + s
        return b

    def with_scale(self, scale: float) -> "Block":
        b = copy.copy(self)
        b.scale = float(scale)
        return b

    # -- evaluation -------------------------------------------------------
    def _operator_sign(self):
        return -1.0 if self.kind == "E" else 1.0

    def __call__(self, a, t: float = 0.0, lift: LiftingField | None = None):
        a = _coeffs(a)
        self.baseplate.check(a)
        if self.generator is not None:
            g = self.generator.grad(self.baseplate, a, lift, t)
            out = (self._operator_sign() * self.scale) * self.structure.apply(g)
        else:
            out = self.scale * np.asarray(self.field(a, t), dtype=np.float64)
        if self.shift is not None:
            out = out + self.shift
        return out

    def generator_value(self, a, t: float = 0.0, lift=None):
        if self.generator is None:
            return None
        return self.generator.value(self.baseplate, a, lift, t)

    def linearize(self, a, t=0.0, lift=None):
        """``(F(a), vjp)`` with ``vjp(r)`` the parameter gradient of ``sum <F(a), r>``."""
        if self.generator is None:
            raise InvalidArgumentError(f"block {self.name!r} has no trainable generator")
        g, gvjp = self.generator.linearize(self.baseplate, a, lift, t)
        c = self._operator_sign() * self.scale
        F = c * self.structure.apply(g)
        if self.shift is not None:
            F = F + self.shift

        def vjp(r):
            return gvjp(c * self.structure.apply_transpose(r))

        return F, vjp

    # -- structural hints -------------------------------------------------
    @property
    def decay_rates(self) -> np.ndarray | None:
        """``r`` with ``F(a) = -r * a + shift`` when the block is diagonal-linear, else None."""
        if self.kind in ("E", "auxiliary") and self.generator is not None:
            d = self.generator.diagonal
            if d is None or self.structure.kind != "identity":
                return None
            return -self._operator_sign() * self.scale * d
        diag = getattr(self, "_ref_diagonal", None)
        if self.kind == "R" and diag is not None:
            return -self.scale * np.asarray(diag)
        return None

    def linear_matrix(self, t: float = 0.0) -> np.ndarray:
        """Dense ``A`` with ``F(a) = A a + F(0)``, probed column by column."""
        if not self.linear:
            raise InvalidArgumentError(f"block {self.name!r} is not linear")
        K = self.baseplate.K
        F0 = self(np.zeros(K), t)
        return (self(np.eye(K), t) - F0).T

    # -- serialization ----------------------------------------------------
    def manifest(self) -> dict:
        m = {
            "name": self.name,
            "kind": self.kind,
            "structure": None if self.structure is None else self.structure.kind,
            "scale": self.scale,
            "baseplate_id": self.baseplate_id,
            "linear": self.linear,
            "autonomous": self.autonomous,
            "reference": self.reference,
        }
        if self.generator is not None:
            m["generator_variant"] = self.generator.variant
        if self.shift is not None:
            m["shift"] = self.shift.tolist()
        return m

    @classmethod
    def from_manifest(cls, m: dict, baseplate: Baseplate, generator_dict: dict) -> "Block":
        if m["baseplate_id"] != baseplate.id:
            raise InvalidArgumentError("block manifest belongs to a different baseplate")
        gen = generator_from_dict(generator_dict)
        return cls(m["name"], m["kind"], baseplate, generator=gen, structure=m["structure"],
                   scale=m["scale"], shift=m.get("shift"), linear=m.get("linear"),
                   autonomous=m.get("autonomous", True), reference=m.get("reference"))

    def __repr__(self):
        what = self.generator.variant if self.generator is not None else (self.reference or "field")
        return f"<Block {self.name!r} kind={self.kind} {what} scale={self.scale:g}>"


def eval_block(b: Block, bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
    if b.baseplate_id != bp.id:
        raise InvalidArgumentError(f"block {b.name!r} lives on a different baseplate")
    return b(a, t, lift)


# ---------------------------------------------------------------------------
class BlockSet:
    """Ordered blocks on one shared baseplate; names must be unique."""

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise InvalidArgumentError("a block set needs at least one block")
        ids = {b.baseplate_id for b in blocks}
        if len(ids) != 1:
            raise InvalidArgumentError("all blocks must share one baseplate")
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate block names in {names}")
        self.blocks = blocks

    @property
    def baseplate(self) -> Baseplate:
        return self.blocks[0].baseplate

    def index(self, name: str) -> int:
        for i, b in enumerate(self.blocks):
            if b.name == name:
                return i
        raise InvalidArgumentError(f"no block named {name!r}")

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.blocks[self.index(key)]
        return self.blocks[key]

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    @property
    def names(self):
        return [b.name for b in self.blocks]

    def dynamics(self):
        return [b for b in self.blocks if b.kind != "auxiliary"]

    def replace(self, name: str, block: Block) -> "BlockSet":
        blocks = list(self.blocks)
        blocks[self.index(name)] = block
        return BlockSet(blocks)

    def perturbed(self, shift, names=None) -> "BlockSet":
        names = set(self.names if names is None else names)
        return BlockSet([b.perturbed(shift) if b.name in names and b.kind != "auxiliary" else b
                         for b in self.blocks])


def sum_field(bs: BlockSet, bp: Baseplate, a, lift: LiftingField | None = None, t: float = 0.0):
    dyn = bs.dynamics()
    if not dyn:
        raise InvalidArgumentError("block set has no dynamic blocks")
    out = eval_block(dyn[0], bp, a, lift, t)
    for b in dyn[1:]:
        out = out + eval_block(b, bp, a, lift, t)
    return out


# ---------------------------------------------------------------------------
def compose_repeated(b: Block, times: int) -> Callable:
    """``a -> F(F(...F(a)))`` for a linear shift-free block."""
    if not b.linear:
        raise InvalidArgumentError(f"block {b.name!r} is nonlinear; repeated composition needs a linear map")
    if times < 1:
        raise InvalidArgumentError("times must be >= 1")

    def apply(a, t=0.0):
        x = _coeffs(a)
        for _ in range(times):
            x = b(x, t)
        return x

    return apply


def linear_combination(terms) -> Callable:
    """``a -> sum_i c_i L_i(a)`` for ``terms = [(c_i, L_i), ...]``; ``L_i = None`` means identity."""
    terms = list(terms)

    def apply(a, t=0.0):
        x = _coeffs(a)
        out = np.zeros_like(x)
        for c, L in terms:
            out = out + c * (x if L is None else L(x, t))
        return out

    return apply


def swift_hohenberg_linear(laplacian: Block, k0: float) -> Callable:
    """``-(Lap + k0^2)^2 = -(Lap Lap + 2 k0^2 Lap + k0^4)`` from a Laplacian block."""
    return linear_combination([(-1.0, compose_repeated(laplacian, 2)),
                               (-2.0 * k0 ** 2, compose_repeated(laplacian, 1)),
                               (-(k0 ** 4), None)])


def block_mismatch(b: Block, ref, samples, t: float = 0.0, lift=None) -> tuple[float, float]:
    """``(max, mean)`` over samples of ``|F_b(a) - F_ref(a)|_2``."""
    A = np.atleast_2d(np.asarray([_coeffs(s) for s in samples]) if not isinstance(samples, np.ndarray)
                      else samples)
    if A.shape[0] == 0:
        raise InvalidArgumentError("block_mismatch needs at least one sample")
    refF = ref(A, t) if not isinstance(ref, Block) else ref(A, t, lift)
    d = np.linalg.norm(b(A, t, lift) - refF, axis=-1)
    return float(np.max(d)), float(np.mean(d))

"""Within-block integrators, palindromic Strang schedules and closed-loop rollout.

Integrator policy (``"auto"``), per block:

==========================================  ====================
block                                       substep map
==========================================  ====================
diagonal-linear (``decay_rates`` known)     ``exact_diagonal``
other linear                                ``crank_nicolson``
kind H                                      ``implicit_midpoint``
anything else                               ``heun``
==========================================  ====================

A schedule lists block names and step fractions only, so one schedule
object drives both a learned and a reference block set.  Within a
macro-step every block keeps its own clock: a block's first half-step
starts at ``t_n``, its second at ``t_n + dt/2``, a full step at ``t_n``.
"""
from __future__ import annotations

import csv
import json
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .baseplate import Baseplate, LiftingField, ShenBaseplate, _coeffs
from .blocks import Block, BlockSet
from .errors import InvalidArgumentError, NumericError
from .refops import ReferenceOp

__all__ = [
    "INTEGRATORS",
    "Substep",
    "StrangSchedule",
    "build_strang_schedule",
    "choose_integrator",
    "substep_exact_diagonal",
    "substep_crank_nicolson",
    "substep_heun",
    "substep_implicit_midpoint",
    "substep_pointwise_exact",
    "POINTWISE_FLOWS",
    "Stepper",
    "RolloutRecord",
    "rollout",
    "reference_rollout",
]

INTEGRATORS = ("auto", "exact_diagonal", "crank_nicolson", "heun", "implicit_midpoint", "pointwise_exact")


# ---------------------------------------------------------------------------
# substep maps
# ---------------------------------------------------------------------------

def substep_exact_diagonal(block: Block, a, tau: float, t: float = 0.0):
    """Exact flow of ``a_t = -r * a + s`` (``s`` the block's constant shift)."""
    r = block.decay_rates
    if r is None:
        raise InvalidArgumentError(f"block {block.name!r} is not diagonal-linear")
    a = _coeffs(a)
    z = -r * tau
    out = np.exp(z) * a
    if block.shift is not None:
        # tau * phi1(z), phi1(z) = expm1(z) / z with phi1(0) = 1
        with np.errstate(invalid="ignore", divide="ignore"):
            phi1 = np.where(z == 0.0, 1.0, np.expm1(z) / np.where(z == 0.0, 1.0, z))
        out = out + tau * phi1 * block.shift
    return out


class _CNCache:
    def __init__(self):
        self._store = {}

    def propagator(self, block: Block, tau: float, t: float):
        key = (id(block), float(tau), None if block.autonomous else float(t))
        hit = self._store.get(key)
        if hit is not None and hit[0] is block:
            return hit[1], hit[2]
        K = block.baseplate.K
        A = block.linear_matrix(t)
        b0 = block(np.zeros(K), t)
        Lhs = np.eye(K) - 0.5 * tau * A
        Rhs = np.eye(K) + 0.5 * tau * A
        try:
            lu = scipy.linalg.lu_factor(Lhs, check_finite=True)
        except (ValueError, scipy.linalg.LinAlgError) as exc:
            raise NumericError(f"Crank-Nicolson system for {block.name!r} is singular") from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(Lhs).max())):
            raise NumericError(f"Crank-Nicolson system for {block.name!r} is singular")
        P = scipy.linalg.lu_solve(lu, Rhs)
        q = scipy.linalg.lu_solve(lu, tau * b0)
        if block.autonomous:
            self._store[key] = (block, P, q)
        return P, q


_DEFAULT_CN_CACHE = _CNCache()


def substep_crank_nicolson(block: Block, a, tau: float, t: float = 0.0, cache: _CNCache | None = None):
    """``(I - tau/2 A) a' = (I + tau/2 A) a + tau F(0)`` with ``A`` probed from the block."""
    cache = _DEFAULT_CN_CACHE if cache is None else cache
    # a non-autonomous affine field is frozen at the substep midpoint
    P, q = cache.propagator(block, tau, t + 0.5 * tau)
    return P @ _coeffs(a) + q


def substep_heun(field, a, tau: float, subdivisions: int = 1, t: float = 0.0):
    """``subdivisions`` explicit trapezoidal steps of size ``tau / subdivisions``."""
    if subdivisions < 1:
        raise InvalidArgumentError("subdivisions must be >= 1")
    h = tau / subdivisions
    x = _coeffs(a).copy()
    for i in range(subdivisions):
        s = t + i * h
        k1 = field(x, s)
        k2 = field(x + h * k1, s + h)
        x = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(x)):
            raise NumericError("Heun step produced non-finite values", location=i)
    return x


def substep_implicit_midpoint(field, a, tau: float, tol: float = 1e-12, max_iters: int = 50,
                              damping: float = 1.0, t: float = 0.0):
    """Solve ``a' = a + tau F((a + a')/2)`` by damped fixed-point iteration.

    Converged when successive iterates differ by at most ``tol * max(1, |a|_inf)``.
    Returns ``(a', iterations)``.
    """
    a = _coeffs(a)
    tm = t + 0.5 * tau
    scale = tol * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    x = a.copy()
    for it in range(1, max_iters + 1):
        x_new = a + tau * field(0.5 * (a + x), tm)
        if damping != 1.0:
            x_new = (1.0 - damping) * x + damping * x_new
        if not np.all(np.isfinite(x_new)):
            raise NumericError("implicit midpoint iterate is non-finite", location=it)
        err = float(np.max(np.abs(x_new - x)))
        x = x_new
        if err <= scale:
            return x, it
    raise NumericError(f"implicit midpoint did not converge in {max_iters} iterations "
                       f"(last update {err:.3e}); try a smaller step", location=max_iters)


def _ac_flow(u, tau):
    e = np.exp(tau)
    return u * e / np.sqrt(1.0 + u * u * (e * e - 1.0))


def _gl_flow(u, tau):
    e = np.exp(-tau)
    return u * e / np.sqrt(1.0 + u * u * (1.0 - e * e))


# exact nodal flows of u_t = f(u)
POINTWISE_FLOWS = {
    "allen_cahn": _ac_flow,
    "ginzburg_landau": _gl_flow,
    "zero": lambda u, tau: u,
}


def substep_pointwise_exact(block: Block, a, tau: float, t: float = 0.0):
    """Solve the nodal ODE exactly, then project (lift-free pointwise blocks only)."""
    ref = block.reference or ""
    name = ref.split(":", 1)[1] if ref.startswith("pointwise:") else None
    if name not in POINTWISE_FLOWS or block.shift is not None or block.scale != 1.0:
        raise InvalidArgumentError(f"block {block.name!r} has no exact pointwise flow")
    bp = block.baseplate
    return bp.project(POINTWISE_FLOWS[name](bp.reconstruct(a), tau))


def choose_integrator(block: Block) -> str:
    if block.decay_rates is not None:
        return "exact_diagonal"
    if block.linear:
        return "crank_nicolson"
    if block.kind == "H":
        return "implicit_midpoint"
    return "heun"


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Substep:
    block: str
    fraction: str  # "half" or "full"
    integrator: str = "auto"
    subdivisions: int = 1

    def __post_init__(self):
        if self.fraction not in ("half", "full"):
            raise InvalidArgumentError(f"fraction must be 'half' or 'full', got {self.fraction!r}")
        if self.integrator not in INTEGRATORS:
            raise InvalidArgumentError(f"unknown integrator {self.integrator!r}")
        if int(self.subdivisions) < 1:
            raise InvalidArgumentError("subdivisions must be >= 1")

    def tau(self, dt: float) -> float:
        return 0.5 * dt if self.fraction == "half" else dt


@dataclass(frozen=True)
class StrangSchedule:
    substeps: tuple

    def __post_init__(self):
        seq = [s.block for s in self.substeps]
        if not seq:
            raise InvalidArgumentError("empty schedule")
        if len(seq) % 2 == 0 or seq != seq[::-1]:
            raise InvalidArgumentError(f"schedule {seq} is not a palindrome with a single pivot")
        mid = len(seq) // 2
        for i, s in enumerate(self.substeps):
            want = "full" if i == mid else "half"
            if s.fraction != want:
                raise InvalidArgumentError(f"substep {i} ({s.block}) must be a {want} step")
            mirror = self.substeps[len(seq) - 1 - i]
            if (s.integrator, s.subdivisions) != (mirror.integrator, mirror.subdivisions):
                raise InvalidArgumentError(f"substep {i} and its mirror use different integrators")
        if seq.count(seq[mid]) != 1:
            raise InvalidArgumentError("the pivot block must appear exactly once")

    @property
    def block_names(self):
        return [s.block for s in self.substeps]

    def to_dict(self):
        return {"substeps": [vars(s) if not hasattr(s, "__dataclass_fields__") else
                             {k: getattr(s, k) for k in s.__dataclass_fields__} for s in self.substeps]}

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Substep(**s) for s in d["substeps"]))


def build_strang_schedule(pattern, blocks: BlockSet | None = None, integrators: dict | None = None,
                          subdivisions: dict | None = None) -> StrangSchedule:
    """Palindromic schedule from a block-name pattern.

    ``pattern`` is either the full palindrome (``["transport", "diffusion",
    "transport"]``, optionally with ``"/2"`` suffixes on the half-steps) or
    a single name.  The middle entry becomes the full step, all others half
    steps.
    """
    if isinstance(pattern, str):
        pattern = pattern.split()
    pattern = list(pattern)
    if not pattern:
        raise InvalidArgumentError("empty schedule pattern")
    names, marks = [], []
    for p in pattern:
        if p.endswith("/2"):
            names.append(p[:-2])
            marks.append("half")
        else:
            names.append(p)
            marks.append(None)
    if len(names) % 2 == 0 or names != names[::-1]:
        raise InvalidArgumentError(f"schedule pattern {pattern} is not a palindrome")
    mid = len(names) // 2
    if marks[mid] == "half":
        raise InvalidArgumentError("the pivot of a Strang schedule is a full step")
    if blocks is not None:
        known = set(blocks.names)
        for n in names:
            if n not in known:
                raise InvalidArgumentError(f"schedule references unknown block {n!r}")
            if blocks[n].kind == "auxiliary":
                raise InvalidArgumentError(f"auxiliary block {n!r} cannot be scheduled")
    integrators = integrators or {}
    subdivisions = subdivisions or {}
    subs = tuple(Substep(n, "full" if i == mid else "half", integrators.get(n, "auto"),
                         int(subdivisions.get(n, 1))) for i, n in enumerate(names))
    return StrangSchedule(subs)


# ---------------------------------------------------------------------------
# rollout engine
# ---------------------------------------------------------------------------

@dataclass
class RolloutRecord:
    dt: float
    n_steps: int
    t0: float
    steps: np.ndarray          # stored macro-step indices
    times: np.ndarray          # t0 + steps * dt
    states: np.ndarray         # (n_stored, K)
    logs: list = field(default_factory=list)
    boundary: np.ndarray | None = None  # (n_stored, 2) Shen endpoint values
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def fields(self, bp: Baseplate, lift: LiftingField | None = None) -> np.ndarray:
        return np.stack([bp.reconstruct(a, lift, t) for a, t in zip(self.states, self.times)])

    def to_csv(self, path, bp: Baseplate | None = None, lift: LiftingField | None = None) -> None:
        """One row per stored time: ``t`` then coefficients, or nodal values when ``bp`` is given."""
        data = self.states if bp is None else self.fields(bp, lift)
        prefix = "a" if bp is None else "u"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"{prefix}{i}" for i in range(data.shape[1])])
            for s, t, row in zip(self.steps, self.times, data):
                w.writerow([int(s), repr(float(t))] + [repr(float(x)) for x in row])

    def logs_to_csv(self, path) -> None:
        cols = ["step", "substep", "block", "kind", "tau", "before", "delta", "iterations"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.logs:
                w.writerow({k: row.get(k) for k in cols})

    def summary(self) -> dict:
        out = {"dt": self.dt, "n_steps": self.n_steps, "t0": self.t0,
               "t_final": float(self.times[-1]), "n_stored": int(len(self.steps))}
        for kind in ("E", "H"):
            d = np.array([r["delta"] for r in self.logs if r["kind"] == kind])
            if d.size:
                rel = np.array([abs(r["delta"]) / (abs(r["before"]) + 1e-30)
                                for r in self.logs if r["kind"] == kind])
                out[f"{kind}_drift"] = {"max": float(d.max()), "min": float(d.min()),
                                        "max_abs": float(np.abs(d).max()), "max_rel": float(rel.max())}
        if self.boundary is not None:
            out["boundary"] = self.boundary.tolist()
        out.update({k: v for k, v in self.meta.items() if k != "wall_time"})
        return out


class Stepper:
    """Executes one schedule over a block set; holds the Crank-Nicolson cache."""

    def __init__(self, schedule: StrangSchedule, blocks: BlockSet, lift: LiftingField | None = None,
                 tol: float = 1e-12, max_iters: int = 50, damping: float = 1.0):
        self.schedule = schedule
        self.blocks = blocks
        self.lift = lift
        self.tol, self.max_iters, self.damping = tol, max_iters, damping
        self._cn = _CNCache()
        self.plan = []
        for s in schedule.substeps:
            b = blocks[s.block]
            if b.kind == "auxiliary":
                raise InvalidArgumentError(f"auxiliary block {b.name!r} cannot be scheduled")
            integ = choose_integrator(b) if s.integrator == "auto" else s.integrator
            self.plan.append((s, b, integ))

    def _field(self, b):
        lift = self.lift
        return lambda x, s: b(x, s, lift)

    def substep(self, s: Substep, b: Block, integ: str, a, tau: float, t: float):
        if integ == "exact_diagonal":
            return substep_exact_diagonal(b, a, tau, t), 0
        if integ == "crank_nicolson":
            return substep_crank_nicolson(b, a, tau, t, self._cn), 0
        if integ == "heun":
            return substep_heun(self._field(b), a, tau, s.subdivisions, t), 0
        if integ == "implicit_midpoint":
            x, it = a, 0
            h = tau / s.subdivisions
            for i in range(s.subdivisions):
                x, k = substep_implicit_midpoint(self._field(b), x, h, self.tol, self.max_iters,
                                                 self.damping, t + i * h)
                it += k
            return x, it
        if integ == "pointwise_exact":
            return substep_pointwise_exact(b, a, tau, t), 0
        raise InvalidArgumentError(f"unknown integrator {integ!r}")

    def macro_step(self, a, t: float, dt: float, step: int = 0, logs: list | None = None):
        clocks = {}
        for j, (s, b, integ) in enumerate(self.plan):
            tau = s.tau(dt)
            tb = clocks.get(b.name, t)
            before = b.generator_value(a, tb, self.lift) if logs is not None and b.kind in ("E", "H") else None
            try:
                a_new, iters = self.substep(s, b, integ, a, tau, tb)
            except NumericError as exc:
                raise NumericError(f"step {step}, substep {j} ({b.name}): {exc}", location=(step, j)) from exc
            if not np.all(np.isfinite(a_new)):
                raise NumericError(f"step {step}, substep {j} ({b.name}) produced non-finite state",
                                   location=(step, j))
            clocks[b.name] = tb + tau
            if before is not None:
                after = b.generator_value(a_new, tb + tau, self.lift)
                logs.append({"step": step, "substep": j, "block": b.name, "kind": b.kind, "tau": tau,
                             "before": before, "delta": after - before, "iterations": iters})
            a = a_new
        return a


def rollout(bp: Baseplate, schedule: StrangSchedule, blocks: BlockSet, a0, dt: float, n_steps: int,
            lift: LiftingField | None = None, t0: float = 0.0, stride: int = 100,
            log_structure: bool = False, callback=None, tol: float = 1e-12, max_iters: int = 50,
            damping: float = 1.0) -> RolloutRecord:
    """Advance ``n_steps`` Strang macro-steps from ``a0``.

    States are stored at ``t0``, every ``stride`` steps and at the final
    step.  ``callback(step, t, a)`` is invoked after every macro-step.
    """
    if not dt > 0:
        raise InvalidArgumentError("dt must be > 0")
    if n_steps < 0:
        raise InvalidArgumentError("n_steps must be >= 0")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if blocks.baseplate.id != bp.id:
        raise InvalidArgumentError("block set lives on a different baseplate")
    a = _coeffs(a0).astype(np.float64).copy()
    bp.check(a)
    stepper = Stepper(schedule, blocks, lift, tol, max_iters, damping)
    logs = [] if log_structure else None
    steps, states = [0], [a.copy()]
    wall = _time.perf_counter()
    for n in range(1, int(n_steps) + 1):
        t = t0 + (n - 1) * dt
        a = stepper.macro_step(a, t, dt, n, logs)
        if callback is not None:
            callback(n, t0 + n * dt, a)
        if n % stride == 0 or n == n_steps:
            steps.append(n)
            states.append(a.copy())
    steps = np.array(steps)
    times = t0 + steps * dt
    states = np.array(states)
    boundary = None
    if isinstance(bp, ShenBaseplate):
        boundary = np.array([bp.eval_at([-1.0, 1.0], s, lift, tt) for s, tt in zip(states, times)])
    meta = {"schedule": schedule.to_dict(), "wall_time": _time.perf_counter() - wall}
    return RolloutRecord(float(dt), int(n_steps), float(t0), steps, times, states, logs or [], boundary, meta)


def reference_rollout(bp: Baseplate, schedule: StrangSchedule, refops, a0, dt: float, n_steps: int,
                      lift: LiftingField | None = None, **kw) -> RolloutRecord:
    """Same engine with reference fields substituted blockwise.

    ``refops`` is a ``BlockSet`` of reference blocks or a mapping
    ``name -> ReferenceOp | (ReferenceOp, scale) | Block``.
    """
    if not isinstance(refops, BlockSet):
        blocks = []
        for name, r in dict(refops).items():
            if isinstance(r, Block):
                blocks.append(r if r.name == name else _renamed(r, name))
            else:
                op, scale = (r, 1.0) if isinstance(r, ReferenceOp) else r
                blocks.append(Block.from_reference(op, bp, scale=scale, name=name))
        refops = BlockSet(blocks)
    return rollout(bp, schedule, refops, a0, dt, n_steps, lift, **kw)


def _renamed(b: Block, name: str) -> Block:
    import copy

    nb = copy.copy(b)
    nb.name = name
    return nb

"""Error metrics, structure-drift summaries and the mismatch/splitting study.

All errors are computed on reconstructed nodal fields.  A reference whose
weighted norm is below ``DEGENERATE_NORM`` makes a relative error
undefined: scalar functions raise :class:`DegenerateReferenceError`,
series functions record a flag and leave the entry out of the summary.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .baseplate import Baseplate, LiftingField, QuadratureGrid
from .blocks import BlockSet
from .errors import InvalidArgumentError, SpecBlocksError
from .rollout import RolloutRecord, StrangSchedule, rollout

__all__ = [
    "DEGENERATE_NORM",
    "DEGENERATE_ENERGY",
    "DegenerateReferenceError",
    "weighted_rel_error",
    "pointwise_profile",
    "ErrorReport",
    "error_report",
    "energy_series",
    "energy_rel_error",
    "substep_drift_report",
    "convergence_order",
    "fit_slope",
    "error_decomposition",
    "order_study",
    "operator_rel_errors",
]

DEGENERATE_NORM = 1e-14
DEGENERATE_ENERGY = 1e-30


class DegenerateReferenceError(SpecBlocksError, ValueError):
    """The reference is (numerically) zero, so a relative quantity is undefined."""


def _grid(g) -> QuadratureGrid:
    return g.grid if isinstance(g, Baseplate) else g


def weighted_rel_error(pred, ref, grid) -> float:
    """``|p - t|_w / |t|_w`` on the nodes of ``grid`` (a grid or a baseplate)."""
    g = _grid(grid)
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != g.Q:
        raise InvalidArgumentError(f"node count mismatch: {p.shape}, {t.shape}, Q={g.Q}")
    nt = float(g.norm(t))
    if nt < DEGENERATE_NORM:
        raise DegenerateReferenceError(f"reference norm {nt:.3e} below {DEGENERATE_NORM}")
    return float(g.norm(p - t)) / nt


def pointwise_profile(pred, ref, grid) -> np.ndarray:
    """``(p_q - t_q) / |t|_w``; its weighted norm is the relative error."""
    g = _grid(grid)
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != g.Q:
        raise InvalidArgumentError("node count mismatch")
    nt = float(g.norm(t))
    if nt < DEGENERATE_NORM:
        raise DegenerateReferenceError(f"reference norm {nt:.3e} below {DEGENERATE_NORM}")
    return (p - t) / nt


def _summary(values: np.ndarray, bad: np.ndarray) -> dict:
    ok = values[~bad]
    if ok.size == 0:
        return {"max": None, "mean": None, "final": None, "n_degenerate": int(bad.sum())}
    return {"max": float(ok.max()), "mean": float(ok.mean()),
            "final": None if bad[-1] else float(values[-1]), "n_degenerate": int(bad.sum())}


def energy_series(record: RolloutRecord, bp: Baseplate, lift: LiftingField | None = None,
                  closure=None) -> np.ndarray:
    """``E(t_n) = 0.5 |u(t_n)|_w^2`` on the reconstructed field, or ``closure(bp, u)``."""
    u = record.fields(bp, lift)
    if closure is not None:
        return np.array([float(closure(bp, ui)) for ui in u])
    return 0.5 * bp.grid.norm(u) ** 2


def energy_rel_error(E_pred, E_ref):
    """``|E_pred - E_ref| / |E_ref|`` per time plus a degenerate mask."""
    E_pred, E_ref = np.asarray(E_pred, np.float64), np.asarray(E_ref, np.float64)
    if E_pred.shape != E_ref.shape:
        raise InvalidArgumentError("energy series differ in length")
    bad = np.abs(E_ref) < DEGENERATE_ENERGY
    den = np.where(bad, 1.0, np.abs(E_ref))
    return np.where(bad, 0.0, np.abs(E_pred - E_ref) / den), bad


@dataclass
class ErrorReport:
    times: np.ndarray
    rel: np.ndarray
    degenerate: np.ndarray
    energy_pred: np.ndarray
    energy_ref: np.ndarray
    rel_energy: np.ndarray
    energy_degenerate: np.ndarray
    profiles: dict = field(default_factory=dict)  # time -> nodal profile

    @property
    def summary(self) -> dict:
        return {"rel": _summary(self.rel, self.degenerate),
                "rel_energy": _summary(self.rel_energy, self.energy_degenerate)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "rel", "relE", "E_pred", "E_ref", "degenerate"])
            for row in zip(self.times, self.rel, self.rel_energy, self.energy_pred, self.energy_ref,
                           self.degenerate | self.energy_degenerate):
                w.writerow([repr(float(x)) for x in row[:5]] + [int(row[5])])

    def to_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True)


def error_report(pred: RolloutRecord, ref: RolloutRecord, bp: Baseplate,
                 lift: LiftingField | None = None, profile_times=(), energy_closure=None) -> ErrorReport:
    """Per-stored-time relative error and energy diagnostics of ``pred`` against ``ref``."""
    if pred.states.shape != ref.states.shape or not np.allclose(pred.times, ref.times, rtol=0, atol=1e-12):
        raise InvalidArgumentError("records do not share stored times")
    up, ur = pred.fields(bp, lift), ref.fields(bp, lift)
    g = bp.grid
    nr = g.norm(ur)
    bad = nr < DEGENERATE_NORM
    rel = np.where(bad, 0.0, g.norm(up - ur) / np.where(bad, 1.0, nr))
    Ep = energy_series(pred, bp, lift, energy_closure)
    Er = energy_series(ref, bp, lift, energy_closure)
    relE, badE = energy_rel_error(Ep, Er)
    profiles = {}
    for t in profile_times:
        i = int(np.argmin(np.abs(ref.times - t)))
        if not bad[i]:
            profiles[float(ref.times[i])] = (up[i] - ur[i]) / nr[i]
    return ErrorReport(ref.times.copy(), rel, bad, Ep, Er, relE, badE, profiles)


def substep_drift_report(record: RolloutRecord) -> dict:
    """Signed per-substep generator change, keyed by block name."""
    if not record.logs and record.n_steps > 0:
        raise InvalidArgumentError("record has no structure logs; rerun with log_structure=True")
    out = {}
    for row in record.logs:
        d = out.setdefault(row["block"], {"kind": row["kind"], "step": [], "substep": [], "delta": [],
                                          "before": []})
        d["step"].append(row["step"])
        d["substep"].append(row["substep"])
        d["delta"].append(row["delta"])
        d["before"].append(row["before"])
    for d in out.values():
        for k in ("step", "substep", "delta", "before"):
            d[k] = np.asarray(d[k])
        d["max"] = float(d["delta"].max())
        d["max_abs"] = float(np.abs(d["delta"]).max())
        d["max_rel"] = float((np.abs(d["delta"]) / (np.abs(d["before"]) + 1e-30)).max())
    return out


def convergence_order(errors) -> dict:
    """Observed orders ``log2(e_i / e_{i+1})`` for successively halved steps."""
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 1 or e.size < 2:
        raise InvalidArgumentError("need at least two errors")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise InvalidArgumentError("errors must be finite and non-negative")
    if np.any(e[1:] == 0) or np.any(e[:-1] == 0):
        return {"orders": None, "mean": None, "degenerate": True}
    orders = np.log2(e[:-1] / e[1:])
    return {"orders": orders.tolist(), "mean": float(orders.mean()), "degenerate": False}


def fit_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if np.any(x <= 0) or np.any(y <= 0):
        raise InvalidArgumentError("log-log fit needs positive values")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def operator_rel_errors(bp: Baseplate, pred, ref) -> np.ndarray:
    """Per-sample weighted relative error of the reconstructed fields of two coefficient batches.

    Samples whose reference field is degenerate are dropped.
    """
    P, R = np.atleast_2d(pred), np.atleast_2d(ref)
    if P.shape != R.shape:
        raise InvalidArgumentError("prediction and reference batches differ in shape")
    g = bp.grid
    num = g.norm(bp.reconstruct(P) - bp.reconstruct(R))
    den = g.norm(bp.reconstruct(R))
    ok = den >= DEGENERATE_NORM
    return num[ok] / den[ok]


def _steps(T, dt):
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-12 * max(1.0, T):
        raise InvalidArgumentError(f"T={T} is not a multiple of dt={dt}")
    return n


def order_study(bp: Baseplate, blocks: BlockSet, schedule: StrangSchedule, a0, dts, T: float,
                lift: LiftingField | None = None, ref_refine: int = 64) -> dict:
    """Final-time errors against a ``min(dts) / ref_refine`` self-reference and observed orders."""
    dts = sorted({float(d) for d in dts}, reverse=True)
    if len(dts) < 2:
        raise InvalidArgumentError("need at least two step sizes")
    h = dts[-1] / ref_refine
    ref = rollout(bp, schedule, blocks, a0, h, _steps(T, h), lift, stride=10 ** 9).final
    errs = []
    for dt in dts:
        rec = rollout(bp, schedule, blocks, a0, dt, _steps(T, dt), lift, stride=10 ** 9)
        errs.append(_final_error(bp, rec, ref, lift))
    return {"dts": dts, "errors": errs, "convergence": convergence_order(errs),
            "slope": fit_slope(dts, errs) if all(e > 0 for e in errs) else None, "T": T, "ref_dt": h}


def _final_error(bp, rec, ref_final, lift):
    up = bp.reconstruct(rec.final, lift, rec.times[-1])
    ur = bp.reconstruct(ref_final, lift, rec.times[-1])
    return weighted_rel_error(up, ur, bp)


def error_decomposition(bp: Baseplate, blocks: BlockSet, schedule: StrangSchedule, a0,
                           dts, epsilons, T: float, direction=None, lift: LiftingField | None = None,
                           ref_refine: int = 64, perturb=None, eps_dt: float | None = None) -> dict:
    """Mismatch/splitting study with constant perturbations ``F_i + eps * v``.

    Every row compares a final state with the unperturbed run at
    ``min(dts) / ref_refine``.  Rows at ``eps = 0`` give the step-size
    dependence; rows at ``eps_dt`` (default ``min(dts)``) give the
    dependence on ``eps``.  ``perturb`` lists the block names to perturb
    (default: every scheduled block).
    """
    dts = sorted({float(d) for d in dts}, reverse=True)
    epsilons = [float(e) for e in epsilons]
    if not dts:
        raise InvalidArgumentError("empty step-size list")
    if not epsilons:
        raise InvalidArgumentError("empty epsilon list")
    K = bp.K
    v = np.zeros(K) if direction is None else np.asarray(direction, dtype=np.float64)
    if direction is None:
        v[0] = 1.0
    if v.shape != (K,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise InvalidArgumentError("direction must be a unit vector of length K")
    names = sorted(set(schedule.block_names)) if perturb is None else list(perturb)

    def steps(dt):
        return _steps(T, dt)

    h_ref = dts[-1] / ref_refine
    ref = rollout(bp, schedule, blocks, a0, h_ref, steps(h_ref), lift, stride=10 ** 9).final
    eps_dt = dts[-1] if eps_dt is None else float(eps_dt)
    rows = []
    for dt in sorted(set(dts) | {eps_dt}, reverse=True):
        for eps in ([0.0] + [e for e in epsilons if e != 0.0]) if dt == eps_dt else [0.0]:
            bs = blocks if eps == 0.0 else blocks.perturbed(eps * v, names)
            rec = rollout(bp, schedule, bs, a0, dt, steps(dt), lift, stride=10 ** 9)
            mism = float(eps) * float(np.linalg.norm(v))
            rows.append({"dt": dt, "eps": eps, "error": _final_error(bp, rec, ref, lift),
                         "eps_max": mism, "eps_mean": mism})
    zero = [r for r in rows if r["eps"] == 0.0 and r["dt"] in dts]
    zero.sort(key=lambda r: -r["dt"])
    conv = convergence_order([r["error"] for r in zero]) if len(zero) >= 2 else None
    dt_slope = fit_slope([r["dt"] for r in zero], [r["error"] for r in zero]) if len(zero) >= 2 else None
    erow = [r for r in rows if r["dt"] == eps_dt and r["eps"] > 0]
    eps_slope = fit_slope([r["eps"] for r in erow], [r["error"] for r in erow]) if len(erow) >= 2 else None
    return {"rows": rows, "dt_slope": dt_slope, "eps_slope": eps_slope, "convergence": conv,
            "T": T, "ref_dt": h_ref, "eps_dt": eps_dt, "perturbed_blocks": names}

"""Registry of the five experiment assemblies and their construction.

Each registry entry carries the full-size parameters.  ``DESK_PRESETS``
holds the explicit reduced settings used by the acceptance suite; they
are applied only on request (``resolve_spec(name, desk=True)`` or the
``--desk`` flag), never silently.

A spec is a plain dict::

    {"name", "baseplate": {...}, "params": {...},
     "blocks": [{"name", "mechanism", "scale", "checkpoint"?}, ...],
     "schedule": [...], "substeps": {name: {"integrator", "subdivisions"}},
     "dt", "T" | "n_steps", "ic": {...}, "lift": {...} | None,
     "diagnostics": {"log_structure", "stride", "profile_times"}, "output_dir"}
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .baseplate import (
    Baseplate,
    Fourier2DBaseplate,
    LiftingField,
    ShenBaseplate,
    build_baseplate,
    dirichlet_lift,
)
from .blocks import Block, BlockSet
from .errors import InvalidArgumentError
from .generators import DensityGenerator, QuadraticLowRank
from .refops import make_reference_op, ref_vorticity_transport
from .rollout import StrangSchedule, build_strang_schedule
from .training import PriorConfig, load_checkpoint, sample_prior

__all__ = [
    "EXPERIMENTS",
    "REGISTRY",
    "DESK_PRESETS",
    "MECHANISMS",
    "resolve_spec",
    "validate_spec",
    "n_steps_of",
    "Assembly",
    "assemble",
    "heat_boundary_data",
    "exact_block",
    "reference_block",
    "poisson_roundtrip_error",
    "CLOSED_FORM_IC",
]

EXPERIMENTS = ("burgers1d", "heat1d_lifted", "gl1d", "ac2d", "ns2d_short")

_DIAG = {"log_structure": False, "stride": 100, "profile_times": []}

REGISTRY = {
    "burgers1d": {
        "baseplate": {"family": "shen_legendre_1d", "Q": 256, "K": 96},
        "params": {"nu": 0.03},
        "blocks": [
            {"name": "transport", "mechanism": "shen_transport", "scale": 1.0},
            {"name": "diffusion", "mechanism": "shen_diffusion", "scale": "nu"},
        ],
        "schedule": ["transport", "diffusion", "transport"],
        "dt": 1e-5, "T": 1.0,
        "ic": {"type": "prior", "amp": 1.0, "alpha": 0.5, "seed": 0},
        "lift": None,
    },
    "heat1d_lifted": {
        "baseplate": {"family": "shen_legendre_1d", "Q": 256, "K": 96},
        "params": {"nu": 0.02, "A0": 0.2, "B0": -0.2, "alpha_A": 5.6, "alpha_B": 5.6, "omega": 1.0},
        "blocks": [
            {"name": "forcing", "mechanism": "lift_forcing", "scale": 1.0},
            {"name": "diffusion", "mechanism": "shen_diffusion", "scale": "nu"},
        ],
        "schedule": ["forcing", "diffusion", "forcing"],
        "dt": 1e-3, "T": 20.0,
        "ic": {"type": "prior", "amp": 1.0, "alpha": 0.5, "seed": 0},
        "lift": {"type": "heat_dirichlet"},
    },
    "gl1d": {
        "baseplate": {"family": "shen_legendre_1d", "Q": 256, "K": 96},
        "params": {},
        "blocks": [
            {"name": "diffusion", "mechanism": "shen_diffusion", "scale": 1.0},
            {"name": "reaction", "mechanism": "pointwise:ginzburg_landau", "scale": 1.0},
        ],
        "schedule": ["diffusion", "reaction", "diffusion"],
        "dt": 1e-4, "T": 0.1,
        "ic": {"type": "prior", "amp": 1.0, "alpha": 0.5, "seed": 0},
        "lift": None,
    },
    "ac2d": {
        "baseplate": {"family": "fourier_2d", "N": 64, "K_cut": 21},
        "params": {"eps": 1e-2},
        "blocks": [
            {"name": "diffusion", "mechanism": "fourier_laplacian", "scale": "eps"},
            {"name": "reaction", "mechanism": "pointwise:allen_cahn", "scale": 1.0},
        ],
        "schedule": ["diffusion", "reaction", "diffusion"],
        "dt": 1e-3, "T": 100.0,
        "ic": {"type": "prior", "amp": 1.0, "alpha": 0.5, "seed": 0},
        "lift": None,
    },
    "ns2d_short": {
        "baseplate": {"family": "fourier_2d", "N": 32, "K_cut": 10},
        "params": {"nu": 1e-4, "forcing_amplitude": 0.1},
        "blocks": [
            {"name": "diffusion", "mechanism": "fourier_laplacian", "scale": "nu"},
            {"name": "forcing", "mechanism": "kolmogorov_forcing", "scale": 1.0},
            {"name": "poisson", "mechanism": "poisson_inverse", "scale": 1.0},
            {"name": "transport", "mechanism": "vorticity_transport", "scale": 1.0},
        ],
        "schedule": ["diffusion", "forcing", "transport", "forcing", "diffusion"],
        "substeps": {"transport": {"subdivisions": 2}},
        "dt": 1e-3, "T": 1.0,
        "ic": {"type": "prior", "amp": 1.0, "alpha": 0.5, "seed": 0},
        "lift": None,
    },
}

# explicit reduced settings; each key replaces the registry value
DESK_PRESETS = {
    "burgers1d": {"baseplate": {"family": "shen_legendre_1d", "Q": 144, "K": 48}, "dt": 1e-4, "T": 0.2},
    "heat1d_lifted": {"baseplate": {"family": "shen_legendre_1d", "Q": 144, "K": 48}, "T": 2.0},
    "gl1d": {"baseplate": {"family": "shen_legendre_1d", "Q": 144, "K": 48}, "T": 0.05},
    "ac2d": {"baseplate": {"family": "fourier_2d", "N": 32, "K_cut": 10}, "T": 1.0},
    "ns2d_short": {},
}

# closed-form initial conditions on the physical domain
CLOSED_FORM_IC = {
    "sin_pi": lambda x: np.sin(np.pi * x),
    "bump": lambda x: (1.0 - x * x) * np.exp(-4.0 * x * x),
    "zero": lambda x: np.zeros_like(x),
}

MECHANISMS = ("shen_diffusion", "shen_transport", "lift_forcing", "fourier_laplacian",
              "kolmogorov_forcing", "poisson_inverse", "vorticity_transport",
              "pointwise:ginzburg_landau", "pointwise:allen_cahn", "pointwise:cube",
              "pointwise:identity", "pointwise:zero")

_TOP_KEYS = {"name", "baseplate", "params", "blocks", "schedule", "substeps", "dt", "T", "n_steps", "ic",
             "lift", "diagnostics", "output_dir"}


def resolve_spec(name: str, desk: bool = False, overrides: dict | None = None) -> dict:
    """Registry entry for ``name`` with optional desk preset and explicit overrides."""
    if name not in REGISTRY:
        raise InvalidArgumentError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    spec = copy.deepcopy(REGISTRY[name])
    spec["name"] = name
    spec["diagnostics"] = dict(_DIAG)
    spec["output_dir"] = f"runs/{name}"
    if desk:
        spec.update(copy.deepcopy(DESK_PRESETS[name]))
    for k, v in (overrides or {}).items():
        if k in ("params", "diagnostics", "ic") and isinstance(v, dict):
            spec[k] = {**spec.get(k, {}), **v}
        else:
            spec[k] = copy.deepcopy(v)
    if overrides and "n_steps" in overrides and "T" not in overrides:
        spec.pop("T", None)
    validate_spec(spec)
    return spec


def n_steps_of(spec: dict) -> int:
    dt = float(spec["dt"])
    T, n = spec.get("T"), spec.get("n_steps")
    if n is not None:
        n = int(n)
        if T is not None and abs(n * dt - float(T)) > 1e-12 * max(1.0, abs(float(T))):
            raise InvalidArgumentError(f"T={T} disagrees with n_steps*dt={n * dt}")
        return n
    if T is None:
        raise InvalidArgumentError("spec needs T or n_steps")
    n = int(round(float(T) / dt))
    if abs(n * dt - float(T)) > 1e-12 * max(1.0, abs(float(T))):
        raise InvalidArgumentError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def validate_spec(spec: dict) -> None:
    unknown = set(spec) - _TOP_KEYS
    if unknown:
        raise InvalidArgumentError(f"unknown spec keys {sorted(unknown)}")
    if spec.get("name") not in EXPERIMENTS:
        raise InvalidArgumentError(f"unknown experiment {spec.get('name')!r}")
    if not float(spec["dt"]) > 0:
        raise InvalidArgumentError("dt must be > 0")
    n_steps_of(spec)
    names = [b["name"] for b in spec["blocks"]]
    for b in spec["blocks"]:
        if b["mechanism"] not in MECHANISMS:
            raise InvalidArgumentError(f"unknown mechanism {b['mechanism']!r}")
        _scale(b.get("scale", 1.0), spec.get("params", {}))
    for s in spec["schedule"]:
        if s.removesuffix("/2") not in names:
            raise InvalidArgumentError(f"schedule references unknown block {s!r}")
    for k, v in (spec.get("substeps") or {}).items():
        if k not in names or not isinstance(v, dict) or set(v) - {"integrator", "subdivisions"}:
            raise InvalidArgumentError(f"bad substep override {k!r}: {v!r}")


def _scale(s, params) -> float:
    if isinstance(s, str):
        if s not in params:
            raise InvalidArgumentError(f"scale refers to unknown parameter {s!r}")
        return float(params[s])
    return float(s)


def heat_boundary_data(p: dict):
    """``A(t), B(t)`` and their derivatives for the lifted heat experiment."""
    w = 2.0 * np.pi * p["omega"]
    A = lambda t: p["A0"] + p["alpha_A"] * np.sin(w * t)  # noqa: E731
    B = lambda t: p["B0"] + p["alpha_B"] * np.cos(w * t)  # noqa: E731
    dA = lambda t: p["alpha_A"] * w * np.cos(w * t)  # noqa: E731
    dB = lambda t: -p["alpha_B"] * w * np.sin(w * t)  # noqa: E731
    return A, B, dA, dB


def _make_lift(spec) -> LiftingField | None:
    d = spec.get("lift")
    if d is None:
        return None
    if d.get("type") == "heat_dirichlet":
        return dirichlet_lift(*heat_boundary_data(spec["params"]), description={"type": "heat_dirichlet", **{k: spec["params"][k] for k in ("A0", "B0", "alpha_A", "alpha_B", "omega")}})
    raise InvalidArgumentError(f"unknown lift descriptor {d!r}")


def _initial_state(spec, bp: Baseplate, lift):
    ic = spec["ic"]
    if ic["type"] == "prior":
        pc = PriorConfig(float(ic.get("amp", 1.0)), float(ic.get("alpha", 0.5)))
        return sample_prior(bp, pc, 1, seed=int(ic.get("seed", 0)))[0]
    if ic["type"] == "closed_form":
        if not isinstance(bp, ShenBaseplate):
            raise InvalidArgumentError("closed-form initial conditions are defined on the 1D baseplate")
        f = CLOSED_FORM_IC[ic["field"]]
        x = bp.grid.nodes
        u = f(x)
        if lift is not None:
            u = u - lift.value(x, 0.0)  # a0 = P(u(., 0) - u_lift(., 0))
        return bp.project(u)
    if ic["type"] == "coefficients":
        return np.asarray(ic["values"], dtype=np.float64)
    raise InvalidArgumentError(f"unknown initial condition {ic!r}")


def _inv_k2(bp: Fourier2DBaseplate):
    k2 = bp.k2
    return np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)


def exact_block(mech: str, name: str, bp: Baseplate, scale: float, lift, params, aux=None) -> Block:
    """Exact-generator (or exact-field) block for a mechanism."""
    if mech == "shen_diffusion":
        return Block(name, "E", bp, generator=QuadraticLowRank(bp.stiffness_diag.copy(), rank=0),
                     structure="shen_mass_inverse", scale=scale, reference="shen_uxx")
    if mech == "shen_transport":
        return Block(name, "H", bp, generator=DensityGenerator.polynomial({3: -1.0 / 6.0}),
                     structure="shen_derivative", scale=scale, reference="shen_uux")
    if mech == "fourier_laplacian":
        return Block(name, "E", bp, generator=QuadraticLowRank(bp.k2.copy(), rank=0),
                     structure="identity", scale=scale, reference="laplacian")
    if mech == "poisson_inverse":
        return Block(name, "auxiliary", bp, generator=QuadraticLowRank(_inv_k2(bp), rank=0),
                     structure="identity", scale=scale, reference="poisson_inverse")
    if mech == "vorticity_transport":
        if aux is None:
            raise InvalidArgumentError("vorticity transport needs a poisson_inverse block")
        return Block(name, "R", bp, field=lambda a, t=0.0: ref_vorticity_transport(bp, a, aux(a, t)),
                     scale=scale, reference="vorticity_transport")
    return reference_block(mech, name, bp, scale, lift, params)


def reference_block(mech: str, name: str, bp: Baseplate, scale: float, lift, params) -> Block:
    """Block wrapping the trusted reference field of a mechanism."""
    if mech == "shen_diffusion":
        op = make_reference_op("shen_uxx", bp)
    elif mech == "shen_transport":
        op = make_reference_op("shen_uux", bp)
    elif mech == "fourier_laplacian":
        op = make_reference_op("laplacian", bp)
    elif mech == "poisson_inverse":
        op = make_reference_op("poisson_inverse", bp)
        return Block.from_reference(op, bp, kind="auxiliary", scale=scale, name=name)
    elif mech == "vorticity_transport":
        op = make_reference_op("vorticity_transport", bp)
    elif mech == "lift_forcing":
        op = make_reference_op("lift_forcing", bp, lift)
    elif mech == "kolmogorov_forcing":
        op = make_reference_op("kolmogorov_forcing", bp, amplitude=params.get("forcing_amplitude", 0.1))
    elif mech.startswith("pointwise:"):
        op = make_reference_op("pointwise", bp, lift, map=mech.split(":", 1)[1])
    else:
        raise InvalidArgumentError(f"unknown mechanism {mech!r}")
    return Block.from_reference(op, bp, scale=scale, name=name)


@dataclass
class Assembly:
    spec: dict
    baseplate: Baseplate
    lift: LiftingField | None
    blocks: BlockSet
    reference: BlockSet
    schedule: StrangSchedule
    a0: np.ndarray
    n_steps: int

    @property
    def dt(self) -> float:
        return float(self.spec["dt"])


def assemble(spec: dict, exact: bool = False, checkpoint_dir=None) -> Assembly:
    """Build baseplate, lift, learned and reference block sets, schedule and ``a0``.

    Blocks with a ``checkpoint`` entry are loaded (and rescaled) unless
    ``exact`` is set, in which case every block uses its exact generator.
    """
    validate_spec(spec)
    bp = build_baseplate(spec["baseplate"])
    lift = _make_lift(spec)
    params = spec.get("params", {})
    aux_l = None
    # auxiliary blocks first so dependent fields can reference them
    order = sorted(spec["blocks"], key=lambda b: b["mechanism"] != "poisson_inverse")
    built_l, built_r = {}, {}
    for b in order:
        s = _scale(b.get("scale", 1.0), params)
        mech, name = b["mechanism"], b["name"]
        ckpt = b.get("checkpoint")
        if ckpt and not exact:
            path = ckpt if checkpoint_dir is None else f"{checkpoint_dir}/{ckpt}"
            blk = load_checkpoint(path, bp)
            blk = blk.with_scale(s * blk.scale)
            blk.name = name
        else:
            blk = exact_block(mech, name, bp, s, lift, params, aux=aux_l)
        rblk = reference_block(mech, name, bp, s, lift, params)
        if mech == "poisson_inverse":
            aux_l = blk
        built_l[name], built_r[name] = blk, rblk
    blocks = BlockSet([built_l[b["name"]] for b in spec["blocks"]])
    reference = BlockSet([built_r[b["name"]] for b in spec["blocks"]])
    sub = spec.get("substeps") or {}
    schedule = build_strang_schedule(
        spec["schedule"], blocks,
        integrators={k: v["integrator"] for k, v in sub.items() if "integrator" in v},
        subdivisions={k: v["subdivisions"] for k, v in sub.items() if "subdivisions" in v})
    a0 = _initial_state(spec, bp, lift)
    return Assembly(spec, bp, lift, blocks, reference, schedule, a0, n_steps_of(spec))


def poisson_roundtrip_error(bp: Fourier2DBaseplate, poisson: Block, omega) -> float:
    """``max |k2 * psi - omega|`` over non-DC modes, ``psi = poisson(omega)``."""
    psi = poisson(omega)
    k2 = bp.k2
    mask = k2 > 0
    return float(np.max(np.abs(k2[mask] * psi[mask] - np.asarray(omega)[mask])))



# ---------------------------------------------------------------------------
# pretraining recipes
# ---------------------------------------------------------------------------

RECIPES = {
    "shen_uxx": {
        "baseplate": {"family": "shen_legendre_1d", "Q": 256, "K": 96},
        "reference": "shen_uxx", "kind": "E", "structure": "shen_mass_inverse",
        "generator": {"variant": "mlp", "hidden": [128, 128, 128, 128], "activation": "gelu",
                      "parity": "even", "init": "fan_in_uniform", "input_scale": "none", "output_scale": 1.0},
        "train": {"lr": 1e-3, "weight_decay": 0.0, "step_size": 50, "gamma": 0.3, "epochs": 200,
                  "batch_size": 128},
        "samples": 20000, "prior": {"amp": 1.0, "alpha": 0.5},
    },
    "shen_uux": {
        "baseplate": {"family": "shen_legendre_1d", "Q": 256, "K": 96},
        "reference": "shen_uux", "kind": "H", "structure": "shen_derivative",
        "generator": {"variant": "density", "hidden": [128, 128, 128, 128], "activation": "gelu",
                      "parity": "none", "init": "he_uniform"},
        "train": {"lr": 1e-4, "weight_decay": 1e-4, "step_size": 50, "gamma": 0.3, "epochs": 100,
                  "batch_size": 128},
        "samples": 20000, "prior": {"amp": 1.0, "alpha": 0.5},
    },
    "fourier_laplacian": {
        "baseplate": {"family": "fourier_2d", "N": 64, "K_cut": 21},
        "reference": "laplacian", "kind": "E", "structure": "identity",
        "generator": {"variant": "quadratic_diagonal_softplus", "init_value": 1e-4},
        "train": {"lr": 0.5, "weight_decay": 0.0, "step_size": 80, "gamma": 0.3, "epochs": 200,
                  "batch_size": 128},
        "samples": 2000, "prior": {"amp": 1.0, "alpha": 0.5},
    },
}

_REF_FOR_MECH = {"shen_uxx": "shen_diffusion", "shen_uux": "shen_transport", "laplacian": "fourier_laplacian"}


def resolve_recipe(block: str, overrides: dict | None = None) -> dict:
    """Recipe for ``block`` with nested overrides merged one level deep."""
    if block not in RECIPES:
        raise InvalidArgumentError(f"unknown block recipe {block!r}; choose from {sorted(RECIPES)}")
    r = copy.deepcopy(RECIPES[block])
    r["block"] = block
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(r.get(k), dict) and k != "baseplate":
            r[k] = {**r[k], **v}
        else:
            r[k] = copy.deepcopy(v)
    if int(r["samples"]) < 1:
        raise InvalidArgumentError("samples must be >= 1")
    return r


def _build_generator(g: dict, bp: Baseplate, ds=None, kind="E", structure=None):
    from .generators import MlpGenerator, QuadraticDiagonalSoftplus, _NetDensity
    from .nnet import init_mlp
    from .training import prior_sigma

    v = g["variant"]
    seed = int(g.get("seed", 0))
    if v == "mlp":
        s = g.get("input_scale", "none")
        if s == "whiten":
            scale = prior_sigma(bp, PriorConfig(1.0, 0.5)) if ds is None else ds.a.std(axis=0)
        elif s == "none":
            scale = None
        else:
            scale = np.asarray(s, dtype=np.float64)
        net = init_mlp([bp.K, *g.get("hidden", [128] * 4), 1], g.get("activation", "gelu"), seed,
                       scheme=g.get("init", "he_uniform"))
        gen = MlpGenerator(net, scale, g.get("parity", "none"))
        out = g.get("output_scale", 1.0)
        if out == "auto":
            from .training import energy_scale_from_data

            probe = Block("probe", kind, bp, generator=gen, structure=structure)
            out = energy_scale_from_data(probe, ds)
        gen.output_scale = float(out)
        return gen
    if v == "density":
        net = init_mlp([1, *g.get("hidden", [128] * 4), 1], g.get("activation", "gelu"), seed,
                       scheme=g.get("init", "he_uniform"))
        return DensityGenerator(_NetDensity(net), bool(g.get("include_lift", True)))
    if v == "quadratic_diagonal_softplus":
        return QuadraticDiagonalSoftplus.init(bp.K, float(g.get("init_value", 1e-4)))
    if v == "quadratic_lowrank":
        return QuadraticLowRank.init(bp.K, int(g.get("rank", 4)), seed)
    raise InvalidArgumentError(f"unknown generator variant {v!r}")


@dataclass
class PretrainOutcome:
    recipe: dict
    baseplate: Baseplate
    result: object      # TrainResult
    dataset: object     # OperatorDataset
    report: dict


def pretrain(recipe: dict, seed: int = 0, history_path=None, callback=None) -> PretrainOutcome:
    """Dataset generation, training and holdout evaluation for one recipe."""
    from .diagnostics import operator_rel_errors
    from .training import TrainConfig, make_dataset, train_block

    bp = build_baseplate(recipe["baseplate"])
    ref = make_reference_op(recipe["reference"], bp)
    pc = PriorConfig(float(recipe["prior"]["amp"]), float(recipe["prior"]["alpha"]))
    ds = make_dataset(bp, ref, pc, int(recipe["samples"]), seed=seed)
    structure = recipe["structure"]
    from .blocks import make_structure

    st = make_structure(structure, bp)
    gen = _build_generator(recipe["generator"], bp, ds, recipe["kind"], st)
    blk = Block(recipe["block"], recipe["kind"], bp, generator=gen, structure=st,
                reference=recipe["reference"])
    tc = TrainConfig(seed=seed, **recipe["train"])
    res = train_block(blk, ds, tc, history_path=history_path, callback=callback)
    A_ho, Y_ho = ds.a[res.holdout_index], ds.target[res.holdout_index]
    F = res.block(A_ho)
    rel = operator_rel_errors(bp, F, Y_ho)
    report = {"block": recipe["block"], "best_epoch": res.best_epoch, "holdout": res.holdout_mismatch,
              "physical_rel": {"mean": float(rel.mean()), "max": float(rel.max()), "n": int(rel.size)}}
    d = res.block.generator.diagonal
    if d is not None and ref.diagonal is not None:
        want = -np.asarray(ref.diagonal)
        nz = want > 0
        report["diagonal"] = {"rel_max_nonzero": float(np.max(np.abs(d[nz] - want[nz]) / want[nz])),
                              "max_abs_zero_modes": float(np.max(np.abs(d[~nz]))) if np.any(~nz) else 0.0}
    return PretrainOutcome(recipe, bp, res, ds, report)


__all__ += ["RECIPES", "resolve_recipe", "pretrain", "PretrainOutcome"]

# Reduced pretraining budgets for the learned-vs-reference closed loop.
# Hyperparameters stay at the recipe values; only sizes and epochs shrink.
CLOSED_LOOP_BUDGETS = {
    "burgers1d": {
        "diffusion": ("shen_uxx", {"baseplate": {"family": "shen_legendre_1d", "Q": 144, "K": 48},
                                   "samples": 20000, "train": {"epochs": 150}}),
        "transport": ("shen_uux", {"baseplate": {"family": "shen_legendre_1d", "Q": 144, "K": 48},
                                   "samples": 2000, "generator": {"hidden": [32, 32, 32, 32]},
                                   "train": {"epochs": 50}}),
    },
}


def pretrain_closed_loop(name: str, out_dir, seed: int = 0) -> tuple[dict, dict]:
    """Train every learned block of ``name`` at its desk budget.

    Returns the spec (desk preset, checkpoints attached) and the
    per-block pretraining reports.
    """
    from pathlib import Path

    from .training import save_checkpoint

    if name not in CLOSED_LOOP_BUDGETS:
        raise InvalidArgumentError(f"no closed-loop budget for {name!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = resolve_spec(name, desk=True)
    reports = {}
    for b in spec["blocks"]:
        entry = CLOSED_LOOP_BUDGETS[name].get(b["name"])
        if entry is None:
            continue
        recipe = resolve_recipe(entry[0], entry[1])
        o = pretrain(recipe, seed=seed)
        path = out / f"{b['name']}.ckpt.json"
        from .training import TrainConfig

        save_checkpoint(o.result.block, path, prior=PriorConfig(**recipe["prior"]),
                        train=TrainConfig(seed=seed, **recipe["train"]), mismatch=o.report)
        b["checkpoint"] = str(path)
        reports[b["name"]] = o.report
    return spec, reports


__all__ += ["CLOSED_LOOP_BUDGETS", "pretrain_closed_loop"]

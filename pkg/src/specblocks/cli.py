"""Command-line front end.

Verbs::

    specblocks pretrain  [--config FILE] [--block NAME] [--samples M] ...
    specblocks run       [SPEC.json | --experiment NAME] [--desk] [--exact] ...
    specblocks sweep     [SPEC.json | --experiment NAME] (--dt-halvings N | --epsilons LIST)
    specblocks verify-checkpoint PATH [--samples M]
    specblocks info      [--experiment NAME] [--json]

Configuration files are JSON and validated against published schemas;
unknown keys are rejected.  Every result directory receives a
``config.json`` echo from which the run can be repeated.  The worker
count for sweeps is read from ``SPECBLOCKS_WORKERS``.

Exit codes: 0 success, 2 usage or configuration error, 3 incompatible
baseplate, 4 numeric error, 5 training error, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .baseplate import ShenBaseplate, build_baseplate
from .diagnostics import error_report, operator_rel_errors, order_study, substep_drift_report, \
    error_decomposition
from .errors import (
    IncompatibleBaseplateError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    SpecBlocksError,
    TrainingError,
)
from .experiments import (
    DESK_PRESETS,
    EXPERIMENTS,
    MECHANISMS,
    RECIPES,
    REGISTRY,
    assemble,
    heat_boundary_data,
    poisson_roundtrip_error,
    pretrain,
    resolve_recipe,
    resolve_spec,
)
from .refops import make_reference_op
from .rollout import INTEGRATORS, rollout
from .training import PriorConfig, load_checkpoint, sample_prior, save_checkpoint

log = logging.getLogger("specblocks")

WORKERS_ENV = "SPECBLOCKS_WORKERS"

# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_BASEPLATE_SCHEMA = {
    "type": "object",
    "properties": {"family": {"enum": ["shen_legendre_1d", "fourier_2d", "cosine_2d"]},
                   "Q": {"type": "integer", "minimum": 1}, "K": {"type": "integer", "minimum": 1},
                   "N": {"type": "integer", "minimum": 1}, "K_cut": {"type": "integer", "minimum": 0}},
    "required": ["family"],
    "additionalProperties": False,
}

PRETRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "block": {"enum": sorted(RECIPES)},
        "baseplate": _BASEPLATE_SCHEMA,
        "samples": {"type": "integer"},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "prior": {"type": "object", "properties": {"amp": _NUM, "alpha": _NUM}, "additionalProperties": False},
        "generator": {
            "type": "object",
            "properties": {
                "variant": {"enum": ["mlp", "density", "quadratic_diagonal_softplus", "quadratic_lowrank"]},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "activation": {"enum": ["gelu", "tanh", "softplus"]},
                "parity": {"enum": ["none", "even", "odd"]},
                "init": {"enum": ["he_uniform", "fan_in_uniform"]},
                "input_scale": {"oneOf": [{"enum": ["none", "whiten"]}, {"type": "array", "items": _NUM}]},
                "output_scale": {"oneOf": [{"const": "auto"}, _NUM]},
                "init_value": _NUM, "rank": {"type": "integer", "minimum": 0},
                "include_lift": {"type": "boolean"}, "seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {"lr": _NUM, "weight_decay": _NUM, "step_size": {"type": "integer"}, "gamma": _NUM,
                           "epochs": {"type": "integer"}, "batch_size": {"type": "integer"},
                           "holdout": _NUM, "betas": {"type": "array", "items": _NUM, "minItems": 2,
                                                      "maxItems": 2}, "eps": _NUM},
            "additionalProperties": False,
        },
    },
    "required": ["block"],
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"enum": list(EXPERIMENTS)},
        "desk": {"type": "boolean"},
        "baseplate": _BASEPLATE_SCHEMA,
        "params": {"type": "object", "additionalProperties": _NUM},
        "blocks": {"type": "array", "items": {
            "type": "object",
            "properties": {"name": {"type": "string"}, "mechanism": {"enum": list(MECHANISMS)},
                           "scale": {"oneOf": [_NUM, {"type": "string"}]}, "checkpoint": {"type": "string"}},
            "required": ["name", "mechanism"], "additionalProperties": False}},
        "schedule": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "substeps": {"type": "object", "additionalProperties": {
            "type": "object", "properties": {"integrator": {"enum": list(INTEGRATORS)},
                                             "subdivisions": {"type": "integer", "minimum": 1}},
            "additionalProperties": False}},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "T": _NUM,
        "n_steps": {"type": "integer", "minimum": 0},
        "ic": {"type": "object", "properties": {
            "type": {"enum": ["prior", "closed_form", "coefficients"]}, "amp": _NUM, "alpha": _NUM,
            "seed": {"type": "integer"}, "field": {"type": "string"}, "values": {"type": "array"}},
            "required": ["type"], "additionalProperties": False},
        "lift": {"oneOf": [{"type": "null"}, {"type": "object", "properties": {"type": {"const": "heat_dirichlet"}},
                                                "additionalProperties": False}]},
        "diagnostics": {"type": "object", "properties": {
            "log_structure": {"type": "boolean"}, "stride": {"type": "integer", "minimum": 1},
            "profile_times": {"type": "array", "items": _NUM}}, "additionalProperties": False},
        "checkpoints": {"type": "object", "additionalProperties": {"type": "string"}},
        "output_dir": {"type": "string"},
    },
    "required": ["name"],
    "additionalProperties": False,
}


class ConfigError(SpecBlocksError, ValueError):
    """Configuration file could not be parsed or failed schema validation."""


def _line_of(text: str, key) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path, schema: dict) -> dict:
    """Parse and validate a JSON config; errors carry line context."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validate_config(doc, schema, text, str(path))
    return doc


def validate_config(doc, schema, text: str | None = None, where: str = "<config>") -> None:
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(doc), key=lambda e: list(e.path))
    if not errors:
        return
    e = errors[0]
    loc = "/".join(str(p) for p in e.path) or "<root>"
    key = None
    if e.validator == "additionalProperties":
        extra = set(e.instance) - set(e.schema.get("properties", {}))
        key = sorted(extra)[0] if extra else None
    elif e.path:
        key = e.path[-1]
    line = _line_of(text, key) if text is not None and isinstance(key, str) else None
    raise ConfigError(f"{where}{':' + str(line) if line else ''}: {loc}: {e.message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x)}")


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidArgumentError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidArgumentError(f"{WORKERS_ENV} must be >= 1")
    return n


def _outdir(p) -> Path:
    out = Path(p)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, PRETRAIN_SCHEMA) if args.config else {}
    block = args.block or cfg.get("block")
    if block is None:
        raise InvalidArgumentError("pretrain needs --block or a config with 'block'")
    over = {k: v for k, v in cfg.items() if k not in ("block", "seed", "output_dir")}
    if args.samples is not None:
        over["samples"] = args.samples
    if args.epochs is not None:
        over.setdefault("train", {})["epochs"] = args.epochs
    bp_over = dict(cfg.get("baseplate", RECIPES[block]["baseplate"]))
    for k in ("K", "Q", "N"):
        if getattr(args, k) is not None:
            bp_over[k] = getattr(args, k)
    if args.kcut is not None:
        bp_over["K_cut"] = args.kcut
    over["baseplate"] = bp_over
    validate_config({"block": block, **over}, PRETRAIN_SCHEMA)
    recipe = resolve_recipe(block, over)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = _outdir(args.out or cfg.get("output_dir") or f"checkpoints/{block}")
    _dump({"block": block, "seed": seed, **{k: v for k, v in recipe.items() if k != "block"}},
          out / "config.json")

    def progress(row):
        log.info("epoch %d train %.6e holdout %.6e lr %.3e", row["epoch"], row["train_loss"],
                 row["holdout_loss"], row["lr"])

    t0 = time.perf_counter()
    outcome = pretrain(recipe, seed=seed, history_path=out / "history.csv", callback=progress)
    res = outcome.result
    from .training import TrainConfig

    save_checkpoint(res.block, out / f"{block}.ckpt.json",
                    prior=PriorConfig(float(recipe["prior"]["amp"]), float(recipe["prior"]["alpha"])),
                    train=TrainConfig(seed=seed, **recipe["train"]), mismatch=outcome.report)
    _dump(outcome.report, out / "mismatch.json")
    (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}))
    print(json.dumps(outcome.report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _spec_from_args(args) -> dict:
    if args.spec:
        doc = load_config(args.spec, RUN_SCHEMA)
        name = doc.pop("name")
        desk = bool(doc.pop("desk", False)) or args.desk
        ckpts = doc.pop("checkpoints", {})
    else:
        if not args.experiment:
            raise InvalidArgumentError("give a spec file or --experiment NAME")
        name, desk, doc, ckpts = args.experiment, args.desk, {}, {}
    for item in getattr(args, "checkpoint", None) or []:
        if "=" not in item:
            raise InvalidArgumentError(f"--checkpoint expects BLOCK=PATH, got {item!r}")
        k, v = item.split("=", 1)
        ckpts[k] = v
    if getattr(args, "T", None) is not None:
        doc["T"] = args.T
    if getattr(args, "dt", None) is not None:
        doc["dt"] = args.dt
    spec = resolve_spec(name, desk=desk, overrides=doc)
    if args.seed is not None:
        spec["ic"] = {**spec["ic"], "seed": args.seed} if spec["ic"]["type"] == "prior" else spec["ic"]
    names = [b["name"] for b in spec["blocks"]]
    for k, v in ckpts.items():
        if k not in names:
            raise InvalidArgumentError(f"checkpoint for unknown block {k!r}")
        for b in spec["blocks"]:
            if b["name"] == k:
                b["checkpoint"] = v
    if getattr(args, "out", None):
        spec["output_dir"] = args.out
    return spec


def run_experiment(spec: dict, exact: bool = False, out: Path | None = None) -> dict:
    """Learned and reference rollouts on one schedule; returns the summary dict."""
    asm = assemble(spec, exact=exact)
    bp, lift, sch = asm.baseplate, asm.lift, asm.schedule
    diag = spec.get("diagnostics", {})
    kw = dict(stride=int(diag.get("stride", 100)))
    if spec["name"] == "ns2d_short":
        pois = asm.blocks["poisson"]
        worst = [0.0]

        def cb(n, t, a):
            worst[0] = max(worst[0], poisson_roundtrip_error(bp, pois, a))

        kw["callback"] = cb
    t0 = time.perf_counter()
    learned = rollout(bp, sch, asm.blocks, asm.a0, asm.dt, asm.n_steps, lift,
                      log_structure=bool(diag.get("log_structure", False)), **kw)
    t1 = time.perf_counter()
    kw.pop("callback", None)
    reference = rollout(bp, sch, asm.reference, asm.a0, asm.dt, asm.n_steps, lift, **kw)
    t2 = time.perf_counter()
    if learned.meta["schedule"] != reference.meta["schedule"]:
        raise SpecBlocksError("learned and reference runs used different schedules")
    rep = error_report(learned, reference, bp, lift, diag.get("profile_times", ()))
    summary = {"config": spec, "exact": exact, "errors": rep.summary, "learned": learned.summary(),
               "reference": reference.summary(), "schedule": sch.to_dict()}
    if spec["name"] == "ns2d_short":
        summary["poisson_roundtrip_max"] = worst[0]
    if isinstance(bp, ShenBaseplate) and lift is not None and (spec.get("lift") or {}).get("type") == "heat_dirichlet":
        A, B, _, _ = heat_boundary_data(spec["params"])
        bd = max(max(abs(b[0] - A(t)), abs(b[1] - B(t))) for b, t in zip(learned.boundary, learned.times))
        summary["boundary_max_error"] = float(bd)
    if learned.logs:
        summary["drift"] = {k: {kk: v[kk] for kk in ("kind", "max", "max_abs", "max_rel")}
                            for k, v in substep_drift_report(learned).items()}
    if out is not None:
        learned.to_csv(out / "learned.csv")
        reference.to_csv(out / "reference.csv")
        rep.to_csv(out / "errors.csv")
        if learned.logs:
            learned.logs_to_csv(out / "drift.csv")
        _dump(summary, out / "summary.json")
        (out / "timing.json").write_text(json.dumps({"learned_s": t1 - t0, "reference_s": t2 - t1}))
    return summary


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    out = _outdir(spec["output_dir"])
    _dump(spec, out / "config.json")
    summary = run_experiment(spec, exact=args.exact, out=out)
    print(json.dumps({"errors": summary["errors"], "output_dir": str(out)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_JOBS = None


def _sweep_job(i):
    fn, kw = _JOBS[i]
    return fn(**kw)


def _parse_floats(s: str):
    s = s.strip()
    if not s:
        return []
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidArgumentError(f"cannot parse number list {s!r}") from exc


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    asm = assemble(spec, exact=True)
    out = _outdir(spec["output_dir"])
    _dump(spec, out / "config.json")
    T = asm.n_steps * asm.dt
    workers = workers_from_env()
    if args.epsilons is not None:
        eps = _parse_floats(args.epsilons)
        if not eps:
            raise InvalidArgumentError("empty epsilon list")
        if any(e < 0 for e in eps):
            raise InvalidArgumentError("epsilons must be non-negative")
        table = error_decomposition(asm.baseplate, asm.blocks, asm.schedule, asm.a0, [asm.dt], eps, T,
                                       lift=asm.lift, ref_refine=args.ref_refine)
        kind = "epsilon"
    else:
        n = args.dt_halvings
        if n is None or n < 1:
            raise InvalidArgumentError("--dt-halvings must be >= 1 (or give --epsilons)")
        dts = [asm.dt / 2 ** i for i in range(n + 1)]
        if workers > 1:
            table = _parallel_order(asm, dts, T, args.ref_refine, workers)
        else:
            table = order_study(asm.baseplate, asm.blocks, asm.schedule, asm.a0, dts, T, asm.lift,
                                ref_refine=args.ref_refine)
        kind = "order"
    _dump({"kind": kind, "config": spec, "table": table}, out / f"sweep_{kind}.json")
    print(json.dumps({"kind": kind, "table": table}, sort_keys=True, default=_jsonable))
    return 0


def _final_state(bp, sch, blocks, a0, dt, n, lift):
    return rollout(bp, sch, blocks, a0, dt, n, lift, stride=10 ** 9).final


def _parallel_order(asm, dts, T, refine, workers):
    """Same table as ``order_study``; independent rollouts fan out over forked workers."""
    global _JOBS
    from .diagnostics import convergence_order, fit_slope, weighted_rel_error

    dts = sorted({float(d) for d in dts}, reverse=True)
    h = min(dts) / refine
    all_dts = [h] + list(dts)
    _JOBS = [(_final_state, dict(bp=asm.baseplate, sch=asm.schedule, blocks=asm.blocks, a0=asm.a0, dt=d,
                                 n=int(round(T / d)), lift=asm.lift)) for d in all_dts]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(workers, len(_JOBS))) as pool:
        finals = pool.map(_sweep_job, range(len(_JOBS)))
    _JOBS = None
    bp, lift = asm.baseplate, asm.lift
    uref = bp.reconstruct(finals[0], lift, T)
    errs = [weighted_rel_error(bp.reconstruct(f, lift, T), uref, bp) for f in finals[1:]]
    return {"dts": list(dts), "errors": errs, "convergence": convergence_order(errs),
            "slope": fit_slope(dts, errs) if all(e > 0 for e in errs) else None, "T": T, "ref_dt": h}


# ---------------------------------------------------------------------------
# verify-checkpoint / info
# ---------------------------------------------------------------------------

def _canon(d) -> str:
    return json.dumps(d, sort_keys=True, default=_jsonable)


def _baseplate_arg(text: str) -> dict:
    """A baseplate manifest given as a JSON file path or inline JSON."""
    p = Path(text)
    where = str(p) if p.is_file() else "--baseplate"
    raw = p.read_text() if p.is_file() else text
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: baseplate manifest must be a JSON object")
    return doc


def cmd_verify_checkpoint(args) -> int:
    try:
        doc = json.loads(Path(args.path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read checkpoint {args.path}: {exc}") from exc
    if not isinstance(doc, dict) or "baseplate" not in doc:
        raise ParseError(f"{args.path} is not a checkpoint")
    manifest = doc["baseplate"]
    if args.baseplate:
        manifest = _baseplate_arg(args.baseplate)
    bp = build_baseplate(manifest)
    blk = load_checkpoint(args.path, bp)
    report = {"path": str(args.path), "baseplate_id": bp.id, "block": blk.manifest(),
              "generator_roundtrip": _canon(blk.generator.to_dict()) == _canon(doc["generator"])}
    if blk.reference and args.samples > 0:
        ref = make_reference_op(blk.reference, bp)
        prior = doc.get("prior") or {"amp": 1.0, "alpha": 0.5}
        A = sample_prior(bp, PriorConfig(float(prior["amp"]), float(prior["alpha"])), args.samples,
                         seed=args.seed if args.seed is not None else 12345)
        Y = ref(A)
        F = blk(A)
        rel = operator_rel_errors(bp, F, Y)
        d = np.linalg.norm(F - Y, axis=1)
        report["fresh_samples"] = {"n": int(args.samples), "max": float(d.max()), "mean": float(d.mean()),
                                   "physical_rel_mean": float(rel.mean()), "physical_rel_max": float(rel.max())}
    print(json.dumps(report, sort_keys=True, default=_jsonable))
    return 0 if report["generator_roundtrip"] else 1


def cmd_info(args) -> int:
    if args.experiment:
        if args.experiment not in REGISTRY:
            raise InvalidArgumentError(f"unknown experiment {args.experiment!r}")
        info = {"spec": resolve_spec(args.experiment), "desk_preset": DESK_PRESETS[args.experiment]}
    else:
        info = {"version": __version__, "experiments": {k: {"schedule": v["schedule"],
                                                             "blocks": [b["name"] for b in v["blocks"]],
                                                             "dt": v["dt"], "T": v.get("T")}
                                                         for k, v in REGISTRY.items()},
                "recipes": sorted(RECIPES), "workers_env": WORKERS_ENV}
    if args.json or args.experiment:
        print(json.dumps(info, sort_keys=True, indent=1))
    else:
        print(f"specblocks {__version__}")
        for k, v in info["experiments"].items():
            print(f"  {k:14s} schedule={' '.join(v['schedule'])} dt={v['dt']:g} T={v['T']:g}")
        print(f"  recipes: {', '.join(info['recipes'])}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specblocks", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"specblocks {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("pretrain", help="train one block by operator matching")
    q.add_argument("--config")
    q.add_argument("--block", choices=sorted(RECIPES))
    q.add_argument("--samples", type=int)
    q.add_argument("--epochs", type=int)
    q.add_argument("--K", type=int)
    q.add_argument("--Q", type=int)
    q.add_argument("--N", type=int)
    q.add_argument("--kcut", type=int)
    q.add_argument("--out")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_pretrain)

    for verb, func in (("run", cmd_run), ("sweep", cmd_sweep)):
        q = sub.add_parser(verb)
        q.add_argument("spec", nargs="?")
        q.add_argument("--experiment", choices=EXPERIMENTS)
        q.add_argument("--desk", action="store_true", help="apply the desk-scale preset")
        q.add_argument("--checkpoint", action="append", metavar="BLOCK=PATH")
        q.add_argument("--T", type=float)
        q.add_argument("--dt", type=float)
        q.add_argument("--out")
        q.add_argument("--seed", type=int)
        q.set_defaults(func=func)
        if verb == "run":
            q.add_argument("--exact", action="store_true", help="use exact generators for every block")
        else:
            q.add_argument("--dt-halvings", type=int)
            q.add_argument("--epsilons")
            q.add_argument("--ref-refine", type=int, default=64)

    q = sub.add_parser("verify-checkpoint")
    q.add_argument("path")
    q.add_argument("--baseplate", help="JSON baseplate manifest to check against")
    q.add_argument("--samples", type=int, default=200)
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_verify_checkpoint)

    q = sub.add_parser("info")
    q.add_argument("--experiment", choices=EXPERIMENTS)
    q.add_argument("--json", action="store_true")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IncompatibleBaseplateError as exc:
        print(f"incompatible baseplate: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        loc = f" at {exc.location}" if exc.location is not None else ""
        print(f"numeric error{loc}: {exc}", file=sys.stderr)
        return 4
    except TrainingError as exc:
        print(f"training error (epoch {exc.epoch}): {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())

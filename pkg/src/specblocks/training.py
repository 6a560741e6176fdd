"""Trajectory-free block pretraining by operator matching.

``sample_prior`` draws coefficient states from the spectral-decay Gaussian
prior, ``make_dataset`` pairs them with reference-operator targets, and
``train_block`` fits a block's generator by minimising the mean squared
coefficient mismatch with AdamW.  Datasets are JSON-lines files and
checkpoints single JSON documents; floats are written with ``repr`` so
every double round-trips exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baseplate import Baseplate, ShenBaseplate
from .blocks import Block, block_mismatch
from .errors import (
    IncompatibleBaseplateError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    TrainingError,
)
from .nnet import adamw_init, adamw_step, scheduler_epoch

__all__ = [
    "PriorConfig",
    "prior_sigma",
    "sample_prior",
    "OperatorDataset",
    "make_dataset",
    "TrainConfig",
    "TrainResult",
    "train_block",
    "write_history_csv",
    "energy_scale_from_data",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "DATASET_VERSION",
]

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


@dataclass(frozen=True)
class PriorConfig:
    amp: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.amp > 0:
            raise InvalidArgumentError("prior amp must be > 0")
        if not self.alpha >= 0:
            raise InvalidArgumentError("prior alpha must be >= 0")


def prior_sigma(bp: Baseplate, pc: PriorConfig) -> np.ndarray:
    """Per-coordinate standard deviation ``amp / (1 + |k|)^alpha``."""
    if isinstance(bp, ShenBaseplate):
        knorm = bp.mode_table.astype(float)
    else:
        mt = np.asarray(bp.mode_table)
        knorm = np.hypot(mt[:, 0], mt[:, 1]).astype(float)
    return pc.amp / (1.0 + knorm) ** pc.alpha


def sample_prior(bp: Baseplate, pc: PriorConfig, n: int, seed=0) -> np.ndarray:
    """``(n, K)`` array of independent Gaussian coefficient draws.

    Fourier real and imaginary slots are drawn independently with the
    mode's sigma; the self-conjugate DC slot is a single real draw.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((int(n), bp.K)) * prior_sigma(bp, pc)


# ---------------------------------------------------------------------------
@dataclass
class OperatorDataset:
    a: np.ndarray
    target: np.ndarray
    baseplate_id: str
    prior: PriorConfig
    reference: str
    seed: int | None = None
    baseplate_manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape != self.target.shape:
            raise InvalidArgumentError("dataset states and targets must be matching (M, K) arrays")

    def __len__(self):
        return self.a.shape[0]

    @property
    def K(self):
        return self.a.shape[1]

    def verify(self, ref) -> float:
        """Max absolute deviation of stored targets from ``ref`` re-evaluated."""
        if ref.baseplate_id != self.baseplate_id:
            raise IncompatibleBaseplateError("reference op and dataset live on different baseplates")
        return float(np.max(np.abs(ref(self.a) - self.target)))

    def header(self) -> dict:
        return {
            "format": "specblocks-dataset",
            "version": DATASET_VERSION,
            "baseplate_id": self.baseplate_id,
            "baseplate": self.baseplate_manifest,
            "prior": asdict(self.prior),
            "reference": self.reference,
            "seed": self.seed,
            "M": len(self),
            "K": self.K,
        }

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for a, y in zip(self.a, self.target):
                fh.write(json.dumps({"a": a.tolist(), "target": y.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path, bp: Baseplate | None = None, ref=None, tol: float = 1e-12) -> "OperatorDataset":
        try:
            with open(path) as fh:
                head = json.loads(fh.readline())
                rows = [json.loads(line) for line in fh if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read dataset {path}: {exc}") from exc
        if head.get("format") != "specblocks-dataset":
            raise ParseError(f"{path} is not a dataset file")
        if head.get("version") != DATASET_VERSION:
            raise ParseError(f"unsupported dataset version {head.get('version')!r}")
        if bp is not None and head["baseplate_id"] != bp.id:
            raise IncompatibleBaseplateError(f"dataset baseplate {head['baseplate_id']} != {bp.id}")
        try:
            ds = cls(np.array([r["a"] for r in rows]), np.array([r["target"] for r in rows]),
                     head["baseplate_id"], PriorConfig(**head["prior"]), head["reference"],
                     head.get("seed"), head.get("baseplate", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed dataset record in {path}: {exc}") from exc
        if ref is not None:
            dev = ds.verify(ref)
            if dev > tol:
                raise NumericError(f"stored targets deviate from {ref.name} by {dev:.3e}")
        return ds


def make_dataset(bp: Baseplate, ref, pc: PriorConfig, M: int, seed=0) -> OperatorDataset:
    """``M`` prior draws with their reference targets (deterministic under ``seed``)."""
    if M < 1:
        raise InvalidArgumentError("sample count M must be >= 1")
    if ref.baseplate_id != bp.id:
        raise IncompatibleBaseplateError("reference op lives on a different baseplate")
    A = sample_prior(bp, pc, M, seed)
    try:
        Y = ref(A)
    except NumericError:
        for m in range(M):
            try:
                ref(A[m])
            except NumericError as exc:
                raise NumericError(f"reference {ref.name} failed on sample {m}: {exc}", location=m) from exc
        raise
    if not np.all(np.isfinite(Y)):
        m = int(np.argwhere(~np.isfinite(Y))[0, 0])
        raise NumericError(f"reference {ref.name} produced a non-finite target", location=m)
    return OperatorDataset(A, Y, bp.id, pc, ref.name, seed if isinstance(seed, int) else None, bp.manifest())


# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    step_size: int = 50
    gamma: float = 0.3
    seed: int = 0
    holdout: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "step_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")
        if not 0 < self.gamma <= 1:
            raise InvalidArgumentError("gamma must lie in (0, 1]")
        if not 0 < self.holdout < 1:
            raise InvalidArgumentError("holdout fraction must lie in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    block: Block
    history: list
    best_epoch: int
    holdout_mismatch: dict
    holdout_index: np.ndarray
    train_index: np.ndarray


def _split(M: int, holdout: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(M)
    n_ho = min(M - 1, max(1, int(round(holdout * M))))
    return np.sort(perm[:n_ho]), perm[n_ho:]


def _copy_block(b: Block) -> Block:
    import copy

    nb = copy.copy(b)
    nb.generator = b.generator.copy()
    return nb


def train_block(b: Block, ds: OperatorDataset, tc: TrainConfig, history_path=None,
                callback=None) -> TrainResult:
    """Fit ``b``'s generator to ``ds`` by mini-batch AdamW; the input block is not modified.

    Loss: mean over samples of ``|F(a) - target|^2``.  The split, the
    per-epoch shuffles and the initial state are all driven by ``tc.seed``.
    Returns the parameters of the epoch with the lowest holdout loss.
    """
    if not b.trainable:
        raise InvalidArgumentError(f"block {b.name!r} has no trainable parameters")
    if ds.baseplate_id != b.baseplate_id:
        raise IncompatibleBaseplateError("dataset and block live on different baseplates")
    if ds.K != b.baseplate.K:
        raise IncompatibleBaseplateError("dataset K does not match the block baseplate")
    if len(ds) < 2:
        raise InvalidArgumentError("need at least two samples to hold one out")

    rng = np.random.default_rng(tc.seed)
    ho, tr = _split(len(ds), tc.holdout, rng)
    blk = _copy_block(b)
    params = blk.generator.params()
    opt = adamw_init(params, lr=tc.lr, weight_decay=tc.weight_decay, betas=tc.betas,
                     eps=tc.eps, step_size=tc.step_size, gamma=tc.gamma)
    A_ho, Y_ho = ds.a[ho], ds.target[ho]

    def holdout_loss():
        r = blk(A_ho) - Y_ho
        return float(np.mean(np.sum(r * r, axis=1)))

    best = (math.inf, -1, [p.copy() for p in params])
    history = []
    B = int(tc.batch_size)
    for epoch in range(1, int(tc.epochs) + 1):
        lr = opt.lr
        order = tr[rng.permutation(tr.size)]
        total = 0.0
        for i in range(0, order.size, B):
            idx = order[i:i + B]
            try:
                F, vjp = blk.linearize(ds.a[idx])
                r = F - ds.target[idx]
                total += float(np.sum(r * r))
                grads = vjp((2.0 / idx.size) * r)
                adamw_step(params, grads, opt)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        train_loss = total / order.size
        if not math.isfinite(train_loss):
            raise TrainingError(f"training loss became non-finite in epoch {epoch}", epoch=epoch)
        try:
            ho_loss = holdout_loss()
        except NumericError as exc:
            raise TrainingError(f"holdout evaluation failed in epoch {epoch}: {exc}", epoch=epoch) from exc
        if not math.isfinite(ho_loss):
            raise TrainingError(f"holdout loss became non-finite in epoch {epoch}", epoch=epoch)
        if ho_loss < best[0]:
            best = (ho_loss, epoch, [p.copy() for p in params])
        row = {"epoch": epoch, "train_loss": train_loss, "holdout_loss": ho_loss, "lr": lr}
        history.append(row)
        if callback is not None:
            callback(row)
        scheduler_epoch(opt)

    for p, q in zip(params, best[2]):
        p[...] = q
    mx, mean = block_mismatch(blk, _TargetTable(A_ho, Y_ho), A_ho)
    ref_norm = float(np.mean(np.linalg.norm(Y_ho, axis=1)))
    stats = {"max": mx, "mean": mean, "mean_ref_norm": ref_norm, "n": int(ho.size)}
    if history_path is not None:
        write_history_csv(history, history_path)
    return TrainResult(blk, history, best[1], stats, ho, tr)


class _TargetTable:
    """Stored targets posing as a reference map on a fixed state array."""

    def __init__(self, A, Y):
        self.A, self.Y = A, Y

    def __call__(self, A, t=0.0):
        if A is not self.A:
            raise InvalidArgumentError("target table queried on foreign states")
        return self.Y


def energy_scale_from_data(b: Block, ds: OperatorDataset, n: int = 2000) -> float:
    """Typical magnitude ``0.5 * mean <a, grad E>`` of a gradient-flow target's energy.

    The target gradient is recovered as ``grad E = -G^{-1} y / scale``; the
    value is used as a fixed output scale for network energies.
    """
    if b.kind not in ("E", "auxiliary") or b.structure is None:
        raise InvalidArgumentError("energy scale needs a gradient-flow block")
    K = b.baseplate.K
    A, Y = ds.a[:n], ds.target[:n]
    sign = -1.0 if b.kind == "E" else 1.0
    G = b.structure.dense(K)
    grad = np.linalg.solve(G, (sign / b.scale) * Y.T).T
    e = 0.5 * float(np.mean(np.sum(A * grad, axis=1)))
    return abs(e) if math.isfinite(e) and e != 0.0 else 1.0


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "holdout_loss", "lr"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
def save_checkpoint(b: Block, path, prior: PriorConfig | None = None, train: TrainConfig | None = None,
                    mismatch: dict | None = None) -> dict:
    if b.generator is None:
        raise InvalidArgumentError("only generator-backed blocks can be checkpointed")
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "block": b.manifest(),
        "baseplate": b.baseplate.manifest(),
        "baseplate_id": b.baseplate_id,
        "generator_variant": b.generator.variant,
        "generator": b.generator.to_dict(),
        "prior": None if prior is None else asdict(prior),
        "train": None if train is None else train.to_dict(),
        "mismatch": mismatch,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return doc


def load_checkpoint(path, bp: Baseplate) -> Block:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ParseError(f"{path} is not a checkpoint (no format_version)")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint format_version {doc['format_version']!r}")
    if doc.get("baseplate_id") != bp.id:
        raise IncompatibleBaseplateError(
            f"checkpoint baseplate {doc.get('baseplate_id')} ({doc.get('baseplate')}) does not match {bp.id}")
    try:
        return Block.from_manifest(doc["block"], bp, doc["generator"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint {path}: {exc}") from exc

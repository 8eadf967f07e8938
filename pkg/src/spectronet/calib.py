"""Downstream calibration: per-oxide linear heads under a leave-one-standard-out protocol."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .errors import CoverageError
from .spectra import OXIDES, Dataset, Spectrum, rng_for

RepFn = Callable[[Spectrum], np.ndarray]


class ConditioningWarning(UserWarning):
    pass


@dataclass
class HeadConfig:
    epochs: int = 200
    lr: float = 1.0
    decay_start: int = 75
    batch_size: int = 64
    momentum: float = 0.0
    seed: int = 0
    clamp_nonnegative: bool = False
    # k-fold over standards instead of leave-one-out; None keeps full LOO
    kfold: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.decay_start >= self.epochs:
            # schedule degenerates to constant lr; cosine_lr needs T > t_start
            self.decay_start = max(self.epochs - 1, 0)
        if self.kfold is not None and self.kfold < 2:
            raise ValueError("kfold must be at least 2")


@dataclass
class LinearHead:
    """``predict(x) = x @ weights + bias`` in the original feature space."""

    weights: np.ndarray
    bias: float
    oxide: str = ""
    lr_trace: List[float] = field(default_factory=list)
    loss_trace: List[float] = field(default_factory=list)

    def predict(self, reps) -> np.ndarray:
        return np.atleast_2d(np.asarray(reps, dtype=np.float64)) @ self.weights + self.bias


def train_head(reps, labels, cfg: HeadConfig = HeadConfig(), oxide: str = "") -> LinearHead:
    """Fit a scalar linear layer by minibatch SGD on squared error.

    Features are centred by their training mean and divided by one global
    scale (root mean squared centred norm) so that lr = 1.0 is stable; labels
    are centred. Weights start at zero. The learned map is folded back to
    the raw feature space. Minibatches are a fresh permutation per epoch and
    the lr follows :func:`nn.cosine_lr`.
    """
    X = np.asarray(reps, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("reps must be (n, N) and labels (n,)")
    if X.shape[0] < 2:
        raise ValueError("need at least two training examples")
    mu = X.mean(axis=0)
    Xc = X - mu
    scale = math.sqrt(np.mean(np.sum(Xc * Xc, axis=1)))
    if not scale > 0:
        warnings.warn("all training representations are identical; head reduces to the label mean",
                      ConditioningWarning, stacklevel=2)
        scale = 1.0
    Xs = Xc / scale
    y_mean = float(y.mean())
    yc = y - y_mean

    layer = nn.Linear(X.shape[1], 1, dtype=np.float64, zero_init=True)
    opt = nn.SGD([(layer, "weight"), (layer, "bias")], cfg.lr, cfg.momentum)
    rng = rng_for(cfg.seed)
    n = X.shape[0]
    lr_trace, loss_trace = [], []
    for epoch in range(cfg.epochs):
        opt.lr = nn.cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.decay_start) if cfg.epochs > 1 else cfg.lr
        lr_trace.append(opt.lr)
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            layer.zero_grad()
            err = layer.forward(Xs[idx])[:, 0] - yc[idx]
            total += float(err @ err)
            layer.backward((err / idx.size)[:, None])
            if opt.lr > 0:
                opt.step()
        loss_trace.append(total / n)
    w = layer.params["weight"][0] / scale
    b = float(layer.params["bias"][0]) + y_mean - float(mu @ w)
    return LinearHead(w, b, oxide, lr_trace, loss_trace)


def rmse(pred, truth) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("rmse needs equal, non-empty inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def maxe(pred, truth) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("maxe needs equal, non-empty inputs")
    return float(np.max(np.abs(p - t)))


@dataclass
class CalibrationRecord:
    oxide: str
    target_ids: List[str]
    truth: np.ndarray
    prediction: np.ndarray
    rmse: float
    maxe: float
    n_rounds: int
    representation: str = ""
    heads: Dict[str, LinearHead] = field(default_factory=dict, repr=False)


def compute_representations(d: Dataset, rep_fn: RepFn) -> np.ndarray:
    """(n_samples, N') representation matrix.

    ``rep_fn`` may expose ``transform_matrix(Y)`` for a batched path;
    otherwise it is called once per spectrum.
    """
    batched = getattr(rep_fn, "transform_matrix", None)
    if batched is not None:
        return np.asarray(batched(d.intensity_matrix()), dtype=np.float64)
    return np.stack([np.asarray(rep_fn(s), dtype=np.float64) for s in d.samples])


def location_averages(d: Dataset, reps: np.ndarray):
    """Mean representation per (target, location); returns (keys, matrix)."""
    groups = d.groups()
    keys = list(groups)
    mat = np.stack([reps[idx].mean(axis=0) for idx in groups.values()])
    return keys, mat


def _folds(standards: List[str], cfg: HeadConfig) -> List[List[str]]:
    if cfg.kfold is None:
        return [[s] for s in standards]
    k = min(cfg.kfold, len(standards))
    order = rng_for(cfg.seed, 99).permutation(len(standards))
    return [[standards[i] for i in sorted(order[f::k])] for f in range(k)]


def loo_evaluate(d: Dataset, rep_fn: Optional[RepFn], oxide: str, cfg: HeadConfig = HeadConfig(),
                 reps: Optional[np.ndarray] = None, representation: str = "",
                 keep_heads: bool = False) -> CalibrationRecord:
    """Leave-one-standard-out calibration for one oxide.

    For each labelled standard, every location-average of that standard is
    withheld, a head is trained from scratch on the remaining labelled
    standards (seeded by ``(cfg.seed, round)``), and the standard's
    prediction is the mean over its withheld location-averages.
    """
    if oxide not in OXIDES:
        raise ValueError(f"unknown oxide {oxide!r}; expected one of {OXIDES}")
    standards = sorted(t for t in d.labels)
    if len(standards) < 3:
        raise CoverageError(f"calibration needs labels for at least 3 standards, found {len(standards)}")
    if reps is None:
        if rep_fn is None:
            raise ValueError("provide rep_fn or precomputed reps")
        reps = compute_representations(d, rep_fn)
    keys, avg = location_averages(d, reps)
    owners = np.array([k[0] for k in keys], dtype=object)
    labelled = np.isin(owners, standards)
    col = OXIDES.index(oxide)
    y_all = np.array([d.labels[o][col] if o in d.labels else np.nan for o in owners])

    preds: Dict[str, float] = {}
    heads: Dict[str, LinearHead] = {}
    folds = _folds(standards, cfg)
    for r, held in enumerate(folds):
        held_mask = np.isin(owners, held)
        train_mask = labelled & ~held_mask
        round_cfg = HeadConfig(**{**cfg.__dict__, "seed": int(rng_for((cfg.seed, r)).integers(2**63))})
        head = train_head(avg[train_mask], y_all[train_mask], round_cfg, oxide)
        for s in held:
            p = float(np.mean(head.predict(avg[owners == s])))
            preds[s] = max(p, 0.0) if cfg.clamp_nonnegative else p
            if keep_heads:
                heads[s] = head
    truth = np.array([d.labels[s][col] for s in standards])
    pred = np.array([preds[s] for s in standards])
    return CalibrationRecord(oxide, standards, truth, pred, rmse(pred, truth), maxe(pred, truth),
                             len(folds), representation, heads)


# ---------------------------------------------------------------- result files

RESULT_COLUMNS = ("oxide", "target_id", "truth", "prediction")
SUMMARY_COLUMNS = ("oxide", "rmse", "maxe", "representation")


def write_results(records: Sequence[CalibrationRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for rec in records:
            for t, a, b in zip(rec.target_ids, rec.truth, rec.prediction):
                w.writerow([rec.oxide, t, repr(float(a)), repr(float(b))])
    return path


def write_summary(records: Sequence[CalibrationRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rec in records:
            w.writerow([rec.oxide, repr(rec.rmse), repr(rec.maxe), rec.representation])
    return path


def read_results(path) -> Dict[str, Dict[str, np.ndarray]]:
    """oxide -> {"target_id", "truth", "prediction"} arrays, in file order."""
    out: Dict[str, Dict[str, list]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_COLUMNS:
            raise ValueError(f"{path}: expected columns {RESULT_COLUMNS}")
        for row in reader:
            slot = out.setdefault(row["oxide"], {"target_id": [], "truth": [], "prediction": []})
            slot["target_id"].append(row["target_id"])
            slot["truth"].append(float(row["truth"]))
            slot["prediction"].append(float(row["prediction"]))
    return {ox: {k: np.asarray(v) for k, v in cols.items()} for ox, cols in out.items()}

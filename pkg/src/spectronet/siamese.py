"""Two-channel Siamese disentangler: model, objective, training loop, cleaning, checkpoints.

The signal channel maps a spectrum ``y`` to ``z_x`` and the noise channel
maps it to ``z_n``; both are DnCNN-style 1-D stacks
``conv+relu, (depth-2) x (conv+bn+relu), conv``. Training draws tuples
(anchor j, noise source k, partners k') from pairwise-distinct targets and
minimises, per tuple,

    lam_rec   * ||y_j - (z_x^j + z_n^k)||_2
  + lam_orth  * s(z_x^j, z_n^k)^2
  - lam_align * sum_k' s(z_n^k, z_n^k')

with ``s`` either the raw inner product or cosine similarity.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .errors import CheckpointError, ShapeError, TrainingDivergedError
from .spectra import Dataset, Spectrum, make_triplets, rng_for

log = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "raw_inner")
CHECKPOINT_MAGIC = "SPECTRONET-CHECKPOINT"
CHECKPOINT_VERSION = 1

# seed streams
_INIT, _TRIPLETS = 10, 11


@dataclass(frozen=True)
class Arch:
    depth: int = 18
    features: int = 64
    kernel: int = 3
    residual: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2 (first and last conv)")
        if self.features < 1:
            raise ValueError("features must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    n_align: int = 1
    lambda_rec: float = 1.0
    lambda_orth: float = 1.0
    lambda_align: float = 1.0
    similarity: str = "cosine"
    seed: int = 0
    # ||.||^2 instead of ||.|| in the reconstruction term
    squared_rec: bool = False
    # "mean" divides the summed batch objective by the batch size
    reduction: str = "mean"
    # None: ceil(n_samples / batch_size)
    batches_per_epoch: Optional[int] = None
    # divide each spectrum by its max |value| before the network
    max_scale: bool = False
    # None keeps lr constant; otherwise hold lr until this epoch, then cosine-anneal to 0
    lr_decay_start: Optional[int] = None

    def __post_init__(self):
        for name in ("batch_size", "epochs", "n_align"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        for name in ("lambda_rec", "lambda_orth", "lambda_align"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive")
        if self.lr_decay_start is not None and not 0 <= self.lr_decay_start < self.epochs:
            raise ValueError("lr_decay_start must lie in [0, epochs)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Disentangled:
    z_x: np.ndarray
    z_n: np.ndarray


def build_channel(arch: Arch, rng: np.random.Generator, dtype=np.float32) -> nn.Sequential:
    F, k = arch.features, arch.kernel
    layers: List[nn.Layer] = [nn.Conv1d(1, F, k, rng=rng, dtype=dtype), nn.ReLU()]
    for _ in range(arch.depth - 2):
        layers += [nn.Conv1d(F, F, k, bias=False, rng=rng, dtype=dtype), nn.BatchNorm1d(F, dtype=dtype), nn.ReLU()]
    layers.append(nn.Conv1d(F, 1, k, rng=rng, dtype=dtype))
    return nn.Sequential(layers)


class SiameseModel:
    """Signal channel h1 and noise channel h2, both R^N -> R^N."""

    def __init__(self, n_bins: int, arch: Arch = Arch(), seed: int = 0, max_scale: bool = False, dtype=np.float32):
        if n_bins < 1:
            raise ShapeError("n_bins must be positive")
        self.n_bins = int(n_bins)
        self.arch = arch
        self.max_scale = max_scale
        self.signal = build_channel(arch, rng_for(seed, _INIT, 0), dtype)
        self.noise = build_channel(arch, rng_for(seed, _INIT, 1), dtype)
        self.meta: Dict[str, object] = {}

    @property
    def dtype(self):
        return self.signal.layers[0].params["weight"].dtype

    def channels(self) -> Tuple[nn.Sequential, nn.Sequential]:
        return self.signal, self.noise

    def parameters(self):
        yield from self.signal.parameters()
        yield from self.noise.parameters()

    def zero_grad(self):
        self.signal.zero_grad()
        self.noise.zero_grad()

    def astype(self, dtype) -> "SiameseModel":
        self.signal.astype(dtype)
        self.noise.astype(dtype)
        return self

    # -- forward helpers -------------------------------------------------

    def _prep(self, y) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[None, :]
        if y.ndim != 2 or y.shape[1] != self.n_bins:
            raise ShapeError(f"model expects spectra of length {self.n_bins}, got shape {y.shape}")
        y = y.astype(self.dtype, copy=False)
        scale = None
        if self.max_scale:
            scale = np.max(np.abs(y), axis=1, keepdims=True)
            scale[scale == 0] = 1
            y = y / scale
        return y, scale

    def run_channel(self, channel: nn.Sequential, y: np.ndarray, train: bool) -> np.ndarray:
        """Apply one channel to already-prepared (batch, N) input."""
        out = channel.forward(y[:, :, None], train)[:, :, 0]
        if self.arch.residual:
            out = y - out
        return out

    def channel_backward(self, channel: nn.Sequential, grad: np.ndarray) -> None:
        g = -grad if self.arch.residual else grad
        channel.backward(np.ascontiguousarray(g, dtype=self.dtype)[:, :, None])

    def forward(self, y, mode: str = "eval") -> Disentangled:
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        train = mode == "train"
        single = np.ndim(y) == 1
        x, scale = self._prep(y)
        z_x = self.run_channel(self.signal, x, train)
        z_n = self.run_channel(self.noise, x, train)
        if scale is not None:
            z_x, z_n = z_x * scale, z_n * scale
        if not train:
            self.signal.clear_cache()
            self.noise.clear_cache()
        if single:
            return Disentangled(z_x[0], z_n[0])
        return Disentangled(z_x, z_n)

    def clean_matrix(self, Y, chunk: int = 16) -> np.ndarray:
        """Eval-mode signal channel over rows of ``Y``; noise channel is skipped."""
        Y = np.atleast_2d(np.asarray(Y))
        out = np.empty(Y.shape, dtype=np.float64)
        for i in range(0, Y.shape[0], chunk):
            x, scale = self._prep(Y[i:i + chunk])
            z = self.run_channel(self.signal, x, False)
            out[i:i + chunk] = z * scale if scale is not None else z
        return out


def forward(m: SiameseModel, y, mode: str = "eval") -> Disentangled:
    return m.forward(y, mode)


# ---------------------------------------------------------------- objective

@dataclass
class LossResult:
    value: float
    reconstruction: float
    orthogonality: float
    alignment: float
    grad_z_x: np.ndarray
    grad_z_nk: np.ndarray
    grad_z_nkp: np.ndarray


def _similarity(a: np.ndarray, b: np.ndarray, mode: str):
    """Row-wise similarity and its gradients w.r.t. ``a`` and ``b``.

    Cosine similarity with a zero vector is defined as 0 (zero gradient).
    """
    dot = np.sum(a * b, axis=-1)
    if mode == "raw_inner":
        return dot, b.copy(), a.copy()
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    prod = na * nb
    ok = prod > 0
    safe = np.where(ok, prod, 1.0)
    s = np.where(ok, dot / safe, 0.0)
    na2 = np.where(na > 0, na * na, 1.0)[..., None]
    nb2 = np.where(nb > 0, nb * nb, 1.0)[..., None]
    ga = b / safe[..., None] - s[..., None] * a / na2
    gb = a / safe[..., None] - s[..., None] * b / nb2
    ga[~ok] = 0
    gb[~ok] = 0
    return s, ga, gb


def loss_terms(z_x, z_nk, z_nkp, y, cfg: TrainConfig) -> LossResult:
    """Objective value, per-term sums and gradients for one batch.

    Shapes: ``z_x``, ``z_nk``, ``y`` are (batch, N); ``z_nkp`` is
    (batch, n_align, N) and may have ``n_align == 0``.
    """
    z_x = np.atleast_2d(np.asarray(z_x, dtype=np.float64))
    z_nk = np.atleast_2d(np.asarray(z_nk, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    z_nkp = np.asarray(z_nkp, dtype=np.float64)
    B, N = z_x.shape
    if z_nkp.ndim == 2:
        z_nkp = z_nkp.reshape(B, -1, N) if z_nkp.size else np.zeros((B, 0, N))
    if z_nk.shape != (B, N) or y.shape != (B, N) or z_nkp.shape[0] != B or z_nkp.shape[2] != N:
        raise ShapeError("inconsistent batch shapes in loss")
    scale = 1.0 / B if cfg.reduction == "mean" else 1.0

    r = y - z_x - z_nk
    if cfg.squared_rec:
        rec = np.sum(r * r, axis=1)
        g_r = 2.0 * r
    else:
        rec = np.linalg.norm(r, axis=1)
        g_r = np.where(rec[:, None] > 0, r / np.where(rec > 0, rec, 1.0)[:, None], 0.0)
    g_x = -cfg.lambda_rec * g_r
    g_k = -cfg.lambda_rec * g_r

    s_o, ga, gb = _similarity(z_x, z_nk, cfg.similarity)
    g_x += cfg.lambda_orth * 2.0 * s_o[:, None] * ga
    g_k += cfg.lambda_orth * 2.0 * s_o[:, None] * gb

    if z_nkp.shape[1]:
        s_a, ga, gb = _similarity(z_nk[:, None, :], z_nkp, cfg.similarity)
        g_k -= cfg.lambda_align * ga.sum(axis=1)
        g_p = -cfg.lambda_align * gb
        align = float(s_a.sum())
    else:
        g_p = np.zeros_like(z_nkp)
        align = 0.0

    rec_sum = float(rec.sum())
    orth_sum = float(np.sum(s_o * s_o))
    value = scale * (cfg.lambda_rec * rec_sum + cfg.lambda_orth * orth_sum - cfg.lambda_align * align)
    return LossResult(value, scale * rec_sum, scale * orth_sum, scale * align, scale * g_x, scale * g_k, scale * g_p)


def loss(z_x, z_nk, z_nkp, y, cfg: TrainConfig) -> float:
    return loss_terms(z_x, z_nk, z_nkp, y, cfg).value


def batch_objective(m: SiameseModel, ya: np.ndarray, yk: np.ndarray, ykp: np.ndarray, cfg: TrainConfig,
                    backward: bool = True) -> LossResult:
    """Forward both channels on one tuple batch, evaluate the objective, optionally backprop.

    ``ykp`` is (batch, n_align, N). Noise sources and partners share one
    noise-channel pass (one set of batch statistics).
    """
    B, N = ya.shape
    n_align = ykp.shape[1]
    xa, sa = m._prep(ya)
    xn, sn = m._prep(np.concatenate([yk, ykp.reshape(B * n_align, N)]))
    z_x = m.run_channel(m.signal, xa, True)
    z_n = m.run_channel(m.noise, xn, True)
    if sa is not None:
        z_x, z_n = z_x * sa, z_n * sn
        y_target = ya
    else:
        y_target = xa
    res = loss_terms(z_x, z_n[:B], z_n[B:].reshape(B, n_align, N), y_target, cfg)
    if backward:
        g_x, g_n = res.grad_z_x, np.concatenate([res.grad_z_nk, res.grad_z_nkp.reshape(B * n_align, N)])
        if sa is not None:
            g_x, g_n = g_x * sa, g_n * sn
        m.channel_backward(m.signal, g_x)
        m.channel_backward(m.noise, g_n)
    return res


# ---------------------------------------------------------------- training

@dataclass
class EpochStats:
    epoch: int
    loss: float
    reconstruction: float
    orthogonality: float
    alignment: float
    seconds: float


def train(d: Dataset, cfg: TrainConfig, arch: Arch = Arch(), model: Optional[SiameseModel] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None) -> Tuple[SiameseModel, List[EpochStats]]:
    """Train a Siamese model on triplets drawn from ``d``; fully determined by ``cfg.seed``."""
    if model is None:
        model = SiameseModel(d.n_bins, arch, seed=cfg.seed, max_scale=cfg.max_scale)
    elif model.n_bins != d.n_bins:
        raise ShapeError(f"model expects {model.n_bins} bins, dataset has {d.n_bins}")
    model.meta["train_config"] = cfg.to_dict()
    Y = d.intensity_matrix()
    opt = nn.SGD(list(model.parameters()), cfg.lr, cfg.momentum)
    n_batches = cfg.batches_per_epoch or math.ceil(len(d) / cfg.batch_size)
    trace: List[EpochStats] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        if cfg.lr_decay_start is not None:
            opt.lr = nn.cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_decay_start)
        for b in range(n_batches):
            tb = make_triplets(d, cfg.batch_size, cfg.n_align, seed=rng_seed(cfg.seed, _TRIPLETS, epoch, b))
            model.zero_grad()
            res = batch_objective(model, Y[tb.anchors], Y[tb.noise_sources], Y[tb.alignment_sets], cfg)
            if not math.isfinite(res.value):
                raise TrainingDivergedError(epoch, b, res.value)
            opt.step()
            sums += (res.value, res.reconstruction, res.orthogonality, res.alignment)
        model.signal.clear_cache()
        model.noise.clear_cache()
        mean = sums / n_batches
        stats = EpochStats(epoch, *map(float, mean), time.perf_counter() - t0)
        trace.append(stats)
        log.info("epoch %d loss %.6g (rec %.4g orth %.4g align %.4g) %.1fs", epoch, *mean, stats.seconds)
        if on_epoch is not None:
            on_epoch(stats)
    return model, trace


def rng_seed(seed: int, *stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=stream)


# ---------------------------------------------------------------- inference

def clean(m: SiameseModel, s: Spectrum) -> Spectrum:
    """Replace intensities with the eval-mode signal representation z_x."""
    if len(s) != m.n_bins:
        raise ShapeError(f"spectrum has {len(s)} bins, model expects {m.n_bins}")
    return s.with_intensities(m.clean_matrix(s.intensities[None, :])[0])


class CleanedRep:
    """Representation function backed by a trained model's signal channel."""

    def __init__(self, model: SiameseModel):
        self.model = model

    def __call__(self, s: Spectrum) -> np.ndarray:
        return clean(self.model, s).intensities

    def transform_matrix(self, Y) -> np.ndarray:
        return self.model.clean_matrix(Y)


def measure_throughput(m: SiameseModel, n_spectra: int = 100, seed: int = 0, chunk: int = 1) -> float:
    """Spectra per second of eval-mode cleaning on random inputs."""
    Y = rng_for(seed).random((n_spectra, m.n_bins))
    m.clean_matrix(Y[:1], chunk)
    t0 = time.perf_counter()
    m.clean_matrix(Y, chunk)
    return n_spectra / (time.perf_counter() - t0)


# ---------------------------------------------------------------- checkpoints

def _blocks(m: SiameseModel):
    for cname, channel in (("signal", m.signal), ("noise", m.noise)):
        for i, layer in enumerate(channel.layers):
            for pname in layer.params:
                yield f"{cname}.{i}.{pname}", layer.params, pname
            for bname in layer.buffers:
                if bname != "num_batches":
                    yield f"{cname}.{i}.{bname}", layer.buffers, bname


def save_checkpoint(m: SiameseModel, path) -> Path:
    """Text header line(s) then little-endian float32 blocks in layer order."""
    path = Path(path)
    blocks = [(name, store[key]) for name, store, key in _blocks(m)]
    bn_steps = [int(l.buffers["num_batches"][0]) for ch in m.channels() for l in ch.layers if "num_batches" in l.buffers]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "n_bins": m.n_bins,
        "arch": dataclasses.asdict(m.arch),
        "init": nn.INIT_SCHEME,
        "max_scale": m.max_scale,
        "dtype": "<f4",
        "bn_eps": nn.BN_EPS,
        "bn_momentum": nn.BN_MOMENTUM,
        "bn_steps": bn_steps,
        "blocks": [[name, list(a.shape)] for name, a in blocks],
        "meta": m.meta,
    }
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for _, a in blocks:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline()
        line = fh.readline()
    if not magic.startswith(CHECKPOINT_MAGIC.encode()):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None


def load_checkpoint(path, arch: Optional[Arch] = None, n_bins: Optional[int] = None) -> SiameseModel:
    """Rebuild a model from ``path``; ``arch``/``n_bins`` assert the expected shape."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 2)
    if len(parts) < 3 or not parts[0].startswith(CHECKPOINT_MAGIC.encode()):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(parts[0].split()[1])
        header = json.loads(parts[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if version != CHECKPOINT_VERSION or header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        stored = Arch(**header["arch"])
        n = int(header["n_bins"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    if arch is not None and arch != stored:
        raise ShapeError(f"checkpoint architecture {stored} does not match expected {arch}")
    if n_bins is not None and n != n_bins:
        raise ShapeError(f"checkpoint is for {n} bins, expected {n_bins}")
    m = SiameseModel(n, stored, max_scale=bool(header.get("max_scale", False)))
    m.meta = header.get("meta", {})
    payload = parts[2]
    offset = 0
    expected = header.get("blocks", [])
    ours = list(_blocks(m))
    if len(expected) != len(ours):
        raise ShapeError(f"{path}: checkpoint has {len(expected)} blocks, architecture needs {len(ours)}")
    for (name, store, key), (hname, hshape) in zip(ours, expected):
        target = store[key]
        if hname != name or tuple(hshape) != target.shape:
            raise ShapeError(f"{path}: block {hname} {tuple(hshape)} does not match {name} {target.shape}")
        nbytes = target.size * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated at block {name}")
        store[key] = np.frombuffer(payload, dtype="<f4", count=target.size, offset=offset).reshape(target.shape).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    steps = iter(header.get("bn_steps", []))
    for ch in m.channels():
        for layer in ch.layers:
            if "num_batches" in layer.buffers:
                layer.buffers["num_batches"] = np.array([next(steps, 0)], dtype=np.int64)
            layer.zero_grad()
    return m

"""Triplet training: the thresholded hinge loss, Adam, the learning-rate schedule,
the training loop, end-to-end gradient checking and checkpoint files.

A training step pushes the reference, positive and negative patches of every
triplet in the batch through one set of parameters as a single batch of
``3 * batch_size`` patches.  Patches are cropped to the receptive field and
evaluated in ``valid`` mode, so each patch yields exactly its center feature.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import arch
from . import numerics as nx
from .errors import (BadMagicError, BadVersionError, NonFiniteError, SpecHashMismatchError,
                     TruncatedFileError, UnsupportedFormatError)

log = logging.getLogger(__name__)

MAGIC = b"SDCD"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.2
    margin: float = 1.0
    lr0: float = 0.01
    decay_base: float = 0.7
    decay_every: int = 100_000
    batch_size: int = 32
    total_iters: int = 2000
    seed: int = 42
    activation: str | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    report_every: int = 500

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_base <= 1:
            raise ValueError(f"decay_base must lie in (0, 1], got {self.decay_base}")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.report_every < 1:
            raise ValueError("report_every must be >= 1")
        if self.activation is not None and self.activation not in arch.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {arch.ACTIVATIONS}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam betas must lie in [0, 1) and eps must be positive")


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------

def hinge_triplet_loss(fr, fp, fn, tau: float = 0.2, margin: float = 1.0):
    """Thresholded hinge embedding loss of one triplet (or a batch along axis 0).

    ``max(0, |fr-fp|^2 - tau) + max(0, margin + tau - |fr-fn|^2)``.  Returns the
    loss (a float, or one value per row for 2-D input) and the gradients with
    respect to ``fr``, ``fp`` and ``fn``.
    """
    fr, fp, fn = (np.asarray(a) for a in (fr, fp, fn))
    if not fr.shape == fp.shape == fn.shape:
        raise ValueError(f"feature shapes differ: {fr.shape}, {fp.shape}, {fn.shape}")
    dp, dn = fr - fp, fr - fn
    d_pos = (dp * dp).sum(axis=-1, keepdims=True)
    d_neg = (dn * dn).sum(axis=-1, keepdims=True)
    pos_active = d_pos > tau
    neg_active = d_neg < margin + tau
    loss = np.where(pos_active, d_pos - tau, 0) + np.where(neg_active, margin + tau - d_neg, 0)
    g_p = np.where(pos_active, 2 * dp, 0).astype(fr.dtype)
    g_n = np.where(neg_active, -2 * dn, 0).astype(fr.dtype)
    loss = loss[..., 0]
    if loss.ndim == 0:
        loss = float(loss)
    return loss, g_p + g_n, -g_p, -g_n


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Continuously decayed learning rate ``lr0 * decay_base ** (t / decay_every)``."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.lr0 * cfg.decay_base ** (t / cfg.decay_every)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; the inputs are left untouched, so a
    forward cache holding the old parameter arrays can be told apart from the
    new ones.
    """
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape}, parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * (g * g)
        with np.errstate(over="ignore", invalid="ignore"):
            step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
            new_params[name] = (p - step).astype(p.dtype, copy=False)
        if not np.isfinite(new_params[name]).all():
            raise NonFiniteError(f"update of {name} overflowed")
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def _center_crop(patch: np.ndarray, size: int) -> np.ndarray:
    h, w = patch.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"patch {h}x{w} is smaller than the receptive field {size}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return patch[..., y0:y0 + size, x0:x0 + size]


def stack_triplets(triplets, rf: int, dtype=np.float32) -> np.ndarray:
    """Stack triplets into a ``(3B, C, rf, rf)`` batch: all references, then positives, then negatives."""
    rows = [t.reference for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    return np.stack([_center_crop(np.asarray(r), rf) for r in rows]).astype(dtype, copy=False)


def center_features(spec: arch.NetworkSpec, params: dict, patches: np.ndarray, chunk: int = 192):
    """Center descriptor of each (N, C, S, S) patch, shape (N, D).  No cache is kept."""
    rf = arch.receptive_field(spec)
    out = []
    for s in range(0, len(patches), chunk):
        f, _ = arch.forward(spec, params, _center_crop(patches[s:s + chunk], rf), mode=nx.VALID,
                            keep_cols=False)
        out.append(f[:, :, 0, 0])
    return np.concatenate(out) if out else np.zeros((0, spec.out_channels), dtype=np.float32)


def triplet_distances(spec: arch.NetworkSpec, params: dict, triplets, dtype=np.float32):
    """Squared descriptor distances ``(d_pos, d_neg)`` of each triplet."""
    triplets = list(triplets)
    b = len(triplets)
    f = center_features(spec, params, stack_triplets(triplets, arch.receptive_field(spec), dtype))
    fr, fp, fn = f[:b], f[b:2 * b], f[2 * b:]
    return ((fr - fp) ** 2).sum(axis=1), ((fr - fn) ** 2).sum(axis=1)


def validation_accuracy(spec, params, triplets) -> float:
    d_pos, d_neg = triplet_distances(spec, params, triplets)
    return float(np.mean(d_pos < d_neg))


def _batch_loss_and_grads(spec, params, batch, tau, margin, input_dtype):
    """Mean loss of a triplet batch and the parameter gradients."""
    b = len(batch)
    x = stack_triplets(batch, arch.receptive_field(spec), input_dtype)
    f, cache = arch.forward(spec, params, x, mode=nx.VALID)
    v = f[:, :, 0, 0]
    loss, gr, gp, gn = hinge_triplet_loss(v[:b], v[b:2 * b], v[2 * b:], tau, margin)
    gf = np.zeros_like(f)
    gf[:, :, 0, 0] = np.concatenate([gr, gp, gn]) / b
    return float(np.mean(loss)), arch.backward(spec, params, cache, gf)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    arch: str
    spec_hash: int
    iteration: int
    tau: float
    margin: float
    params: dict = field(compare=False, repr=False)

    def same_as(self, other: "Checkpoint") -> bool:
        """Field and bit-level parameter equality."""
        return (self == other and list(self.params) == list(other.params)
                and all(self.params[k].dtype == other.params[k].dtype
                        and np.array_equal(self.params[k], other.params[k]) for k in self.params))


@dataclass
class LogRecord:
    iter: int
    lr: float
    loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    losses: np.ndarray   # per-iteration mean batch loss


class TrainingDiverged(FloatingPointError):
    """Raised when the loss becomes non-finite; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def make_checkpoint(spec: arch.NetworkSpec, params: dict, iteration: int, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(spec.name, arch.spec_hash(spec), int(iteration), float(np.float32(cfg.tau)),
                      float(np.float32(cfg.margin)), dict(params))


def resolve_spec(spec: arch.NetworkSpec, cfg: TrainConfig) -> arch.NetworkSpec:
    return spec.with_activation(cfg.activation) if cfg.activation else spec


def train(spec: arch.NetworkSpec, cfg: TrainConfig, triplet_source: Iterable,
          val_triplets=None, params: dict | None = None, dtype=np.float32,
          diagnostic_path: str | Path | None = None,
          on_record: Callable[[LogRecord], None] | None = None,
          should_stop: Callable[[], bool] | None = None) -> TrainResult:
    """Train ``spec`` on triplets drawn from ``triplet_source``.

    Every ``cfg.report_every`` iterations (and at iteration 0) a
    :class:`LogRecord` is emitted: ``loss`` is the mean batch loss of the
    iterations since the previous record (at iteration 0, the loss of the
    first batch) and ``val_accuracy`` the accuracy on ``val_triplets`` of the
    parameters at that iteration (NaN without a validation set).

    ``should_stop`` is polled once per iteration; when it returns true the
    loop ends early and the checkpoint reflects the iterations completed.
    """
    spec = resolve_spec(spec, cfg)
    if params is None:
        params = arch.init(spec, cfg.seed, dtype=dtype)
    arch.check_params(spec, params)
    val_triplets = list(val_triplets) if val_triplets is not None else None
    source = iter(triplet_source)
    state = AdamState.zeros_like(params)
    records, losses, window = [], [], []

    def record(t, loss):
        acc = validation_accuracy(spec, params, val_triplets) if val_triplets else float("nan")
        rec = LogRecord(t, lr_at(t, cfg), loss, acc)
        records.append(rec)
        log.info("iter %d lr %.6g loss %.5f val_accuracy %.4f", t, rec.lr, rec.loss, rec.val_accuracy)
        if on_record is not None:
            on_record(rec)

    t = 0
    for t in range(cfg.total_iters):
        if should_stop is not None and should_stop():
            break
        batch = list(islice(source, cfg.batch_size))
        if not batch:
            if t == 0:
                raise ValueError("the triplet source is empty")
            raise ValueError(f"the triplet source ran dry after {t} iterations")
        try:
            loss, grads = _batch_loss_and_grads(spec, params, batch, cfg.tau, cfg.margin, dtype)
            if not math.isfinite(loss):
                raise NonFiniteError(f"loss is {loss}")
            new_params, new_state = adam_step(params, grads, state, lr_at(t, cfg),
                                              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except NonFiniteError as exc:
            ckpt = make_checkpoint(spec, params, t, cfg)
            if diagnostic_path is not None:
                save_checkpoint(diagnostic_path, ckpt)
            raise TrainingDiverged(f"training diverged at iteration {t}: {exc}", ckpt) from exc
        if t == 0:
            record(0, loss)
        losses.append(loss)
        window.append(loss)
        params, state = new_params, new_state
        if (t + 1) % cfg.report_every == 0:
            record(t + 1, float(np.mean(window)))
            window = []
    else:
        t = cfg.total_iters
    if cfg.total_iters == 0:
        record(0, float("nan"))
    return TrainResult(make_checkpoint(spec, params, t, cfg), records, np.asarray(losses))


def write_log_csv(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,lr,loss,val_accuracy\n")
        for r in records:
            fh.write(f"{r.iter},{r.lr:.9g},{r.loss:.9g},{r.val_accuracy:.6f}\n")


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def triplet_loss_fn(spec, params, triplet, tau, margin, dtype):
    """Loss of one triplet through the whole pipeline (no gradients)."""
    return _loss_and_branches(spec, params, triplet, tau, margin, dtype)[0]


def _loss_and_branches(spec, params, triplet, tau, margin, dtype):
    """Loss of one triplet and a fingerprint of every piecewise branch taken.

    The fingerprint covers the ReLU sign pattern (ReLU networks), the arg-max
    entry of each L-infinity normalization and the two hinge activity flags;
    the loss is smooth in the parameters wherever the fingerprint is constant.
    """
    x = stack_triplets([triplet], arch.receptive_field(spec), dtype)
    f, cache = arch.forward(spec, params, x, mode=nx.VALID, keep_cols=False)
    v = f[:, :, 0, 0]
    loss = hinge_triplet_loss(v[0], v[1], v[2], tau, margin)[0]
    parts = []
    if spec.activation != arch.ELU:
        parts += [(z > 0).tobytes() for z in cache.pre_act]
    if spec.final_normalization:
        parts.append(np.abs(cache.pre_norm).reshape(3, -1).argmax(axis=1).tobytes())
    d_pos, d_neg = float(((v[0] - v[1]) ** 2).sum()), float(((v[0] - v[2]) ** 2).sum())
    parts.append(bytes([d_pos > tau, d_neg < margin + tau]))
    return loss, b"".join(parts)


def gradient_check(spec: arch.NetworkSpec, cfg: TrainConfig, triplet, eps: float = 1e-3,
                   params: dict | None = None, fraction: float = 0.01, seed: int = 0,
                   dtype=np.float64, numeric_dtype=np.float64, skip_kinks: bool = True) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The analytic gradient is computed at precision ``dtype``; the central
    differences are evaluated at ``numeric_dtype`` so that a 32-bit gradient
    can be judged against a reference free of 32-bit cancellation noise.  The
    check covers a random ``fraction`` of all parameters.  The relative error
    of one entry is ``|a - n| / max(|a|, |n|, s)`` where the floor ``s`` is the
    root-mean-square of the checked analytic entries, so that entries whose
    gradient is tiny compared with the rest are judged on the scale of the
    gradient as a whole; an all-zero gradient yields 0 when the numeric
    estimate is also exactly zero.

    With ``skip_kinks`` an entry is left out when the step of ``eps`` moves
    the pipeline across a non-differentiable point (a ReLU sign, the
    arg-max of a normalization or a hinge boundary): there the difference
    quotient measures the jump, not the derivative.
    """
    spec = resolve_spec(spec, cfg)
    if params is None:
        params = arch.init(spec, cfg.seed, dtype=np.float64)
    p_a = {k: v.astype(dtype) for k, v in params.items()}
    p_n = {k: v.astype(numeric_dtype) for k, v in params.items()}
    _, grads = _batch_loss_and_grads(spec, p_a, [triplet], cfg.tau, cfg.margin, dtype)
    _, base_sig = _loss_and_branches(spec, p_n, triplet, cfg.tau, cfg.margin, numeric_dtype)

    rng = np.random.default_rng(seed)
    picks = []
    for prefix, _, shape, _, mask in arch._kernel_slots(spec):
        for name in (prefix + ".weight", prefix + ".bias"):
            size = p_n[name].size
            allowed = np.arange(size)
            if mask is not None and name.endswith(".weight"):
                allowed = np.flatnonzero(np.broadcast_to(mask.mask, shape).ravel())
            k = max(1, int(round(fraction * len(allowed))))
            picks += [(name, int(i)) for i in rng.choice(allowed, size=k, replace=False)]

    analytic, numeric = [], []
    for name, i in picks:
        base = p_n[name]
        vals, smooth = [], True
        for sgn in (1, -1):
            w = base.copy()
            w.flat[i] += sgn * eps
            val, sig = _loss_and_branches(spec, {**p_n, name: w}, triplet, cfg.tau, cfg.margin, numeric_dtype)
            vals.append(val)
            smooth &= sig == base_sig
        if skip_kinks and not smooth:
            continue
        numeric.append((vals[0] - vals[1]) / (2 * eps))
        analytic.append(float(grads[name].flat[i]))
    if not analytic:
        return 0.0
    a, n = np.asarray(analytic), np.asarray(numeric)
    floor = float(np.sqrt(np.mean(a * a)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.where(denom > 0, np.abs(a - n) / np.where(denom > 0, denom, 1), 0.0)
    return float(err.max())


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt: Checkpoint):
    """Write the little-endian binary checkpoint format (parameters stored as f32)."""
    out = bytearray(MAGIC)
    name = ckpt.arch.encode("utf-8")
    out += struct.pack("<II", VERSION, len(name)) + name
    out += struct.pack("<QQff", ckpt.spec_hash, ckpt.iteration, ckpt.tau, ckpt.margin)
    out += struct.pack("<I", len(ckpt.params))
    for key, arr in ckpt.params.items():
        kb = key.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<I", len(kb)) + kb + struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated while reading {what}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _spec_for_hash(name: str, h: int) -> arch.NetworkSpec:
    try:
        base = arch.registry(name)
    except ValueError as exc:
        raise UnsupportedFormatError(f"checkpoint names an unknown architecture {name!r}") from exc
    for act in (base.activation,) + tuple(a for a in arch.ACTIVATIONS if a != base.activation):
        spec = base.with_activation(act)
        if arch.spec_hash(spec) == h:
            return spec
    raise SpecHashMismatchError(f"spec hash {h:#018x} does not match architecture {name!r}")


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns ``(Checkpoint, NetworkSpec)``.

    Raises :class:`BadMagicError`, :class:`BadVersionError`,
    :class:`TruncatedFileError` or :class:`SpecHashMismatchError`.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I", "name length")
    name = r.take(n, "architecture name").decode("utf-8")
    h, iteration, tau, margin = r.unpack("<QQff", "header")
    spec = _spec_for_hash(name, h)
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        (kl,) = r.unpack("<I", "tensor name length")
        key = r.take(kl, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", f"{key} dims")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        params[key] = np.frombuffer(r.take(nbytes, f"{key} data"), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise UnsupportedFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after the last tensor")
    arch.check_params(spec, params)
    return Checkpoint(name, h, iteration, float(tau), float(margin), params), spec


def config_with(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, **changes)

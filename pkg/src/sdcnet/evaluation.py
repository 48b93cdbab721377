"""Descriptor quality: triplet accuracy, ROC curves and matching robustness.

A *descriptor* here is any callable mapping a batch of (N, C, S, S) patches to
per-patch descriptors, paired with the name of the distance that compares
them (see :data:`sdcnet.matching.DISTANCES`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import arch
from .data import DISPARITY, GroundTruth, eligible_pixels
from .matching import census_descriptor, feature_distance

ROC = "roc"
ROBUSTNESS = "robustness"
RELATIVE = "relative-robustness"
DEFAULT_RADII = (2, 4, 8, 16, 32, 64, 100)


@dataclass
class EvalCurve:
    kind: str
    points: list                 # [(x, y), ...]
    summary: float               # AUC for ROC, value at the largest radius for robustness
    flagged: list = field(default_factory=list)   # x values left out (undefined ratios)

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def y(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)


# ---------------------------------------------------------------------------
# Descriptors over patches
# ---------------------------------------------------------------------------

@dataclass
class Descriptor:
    name: str
    describe: Callable[[np.ndarray], np.ndarray]
    distance: str = "l2"


def network_descriptor(spec: arch.NetworkSpec, params: dict, name: str | None = None) -> Descriptor:
    from .training import center_features
    return Descriptor(name or spec.name, lambda patches: center_features(spec, params, patches), "l2")


def census_patch_descriptor(width: int = 9, height: int = 7) -> Descriptor:
    """CENSUS bitstring of each patch's center pixel (patch mean over channels as gray)."""
    def describe(patches):
        s = patches.shape[-1] // 2
        return np.array([census_descriptor(p.mean(axis=0), width, height)[s, s] for p in patches])
    return Descriptor("census", describe, "hamming")


def constant_descriptor(dim: int = 1) -> Descriptor:
    return Descriptor("constant", lambda patches: np.zeros((len(patches), dim), dtype=np.float32), "l2")


def raw_descriptor(size: int | None = None) -> Descriptor:
    """The (optionally center-cropped) patch itself as a vector."""
    def describe(patches):
        if size is not None:
            s, r = patches.shape[-1] // 2, size // 2
            patches = patches[..., s - r:s + r + 1, s - r:s + r + 1]
        return patches.reshape(len(patches), -1)
    return Descriptor("raw", describe, "l2")


def triplet_distances(desc: Descriptor, triplets) -> tuple:
    """Descriptor distances ``(d_pos, d_neg)`` of every triplet."""
    triplets = list(triplets)
    if not triplets:
        raise ValueError("empty triplet set")
    n = len(triplets)
    patches = np.stack([t.reference for t in triplets] + [t.positive for t in triplets]
                       + [t.negative for t in triplets])
    f = np.asarray(desc.describe(patches))
    fr, fp, fn = f[:n], f[n:2 * n], f[2 * n:]
    # distances are computed along axis 0 of (D, N)
    fr, fp, fn = (a.reshape(n, -1).T if a.ndim > 1 else a for a in (fr, fp, fn))
    return feature_distance(fr, fp, desc.distance), feature_distance(fr, fn, desc.distance)


def accuracy_from_distances(d_pos, d_neg) -> float:
    d_pos, d_neg = np.asarray(d_pos), np.asarray(d_neg)
    if d_pos.size == 0:
        raise ValueError("empty triplet set")
    return float(np.mean(d_pos < d_neg))


def triplet_accuracy(desc: Descriptor, triplets) -> float:
    """Fraction of triplets whose positive is strictly closer than the negative (ties fail)."""
    return accuracy_from_distances(*triplet_distances(desc, triplets))


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

def roc_curve(pos_distances, neg_distances) -> EvalCurve:
    """ROC of "match if distance <= t" swept over every observed distance.

    Points are (false positive rate, true positive rate), starting at (0, 0)
    and ending at (1, 1); the summary is the trapezoidal area under the curve.
    """
    pos = np.sort(np.asarray(pos_distances, dtype=np.float64).ravel())
    neg = np.sort(np.asarray(neg_distances, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs at least one positive and one negative distance")
    t = np.unique(np.concatenate([pos, neg]))
    tpr = np.searchsorted(pos, t, side="right") / pos.size
    fpr = np.searchsorted(neg, t, side="right") / neg.size
    xs = np.concatenate([[0.0], fpr])
    ys = np.concatenate([[0.0], tpr])
    if xs[-1] != 1.0 or ys[-1] != 1.0:
        xs, ys = np.append(xs, 1.0), np.append(ys, 1.0)
    auc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2))
    return EvalCurve(ROC, list(zip(xs.tolist(), ys.tolist())), auc)


# ---------------------------------------------------------------------------
# Robustness
# ---------------------------------------------------------------------------

def robustness_pixels(gt: GroundTruth, max_pixels: int = 2000, seed: int = 0) -> np.ndarray:
    """Seeded uniform subsample of eligible reference pixels, shape (K, 2) of (y, x)."""
    ys, xs = np.nonzero(eligible_pixels(gt))
    if len(ys) == 0:
        raise ValueError("no eligible reference pixels")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(ys), size=min(max_pixels, len(ys)), replace=False))
    return np.stack([ys[pick], xs[pick]], axis=1)


def _true_targets(gt: GroundTruth, pix: np.ndarray) -> np.ndarray:
    uv = gt.flow()
    ty = np.rint(pix[:, 0] + uv[1, pix[:, 0], pix[:, 1]]).astype(np.int64)
    tx = np.rint(pix[:, 1] + uv[0, pix[:, 0], pix[:, 1]]).astype(np.int64)
    return np.stack([ty, tx], axis=1)


def robustness_curve(feat_ref: np.ndarray, feat_tgt: np.ndarray, gt: GroundTruth,
                     radii: Sequence[float] = DEFAULT_RADII, exclusion: float = 2.0,
                     max_pixels: int = 2000, seed: int = 0, distance: str = "l2",
                     chunk: int = 8) -> EvalCurve:
    """Fraction of reference pixels whose true match beats every nearby competitor.

    For each evaluated pixel, the true match ``t`` is its ground-truth target
    rounded to the pixel grid.  The pixel is robust at radius ``R`` when its
    distance to ``t`` is strictly smaller than its distance to every target
    pixel ``q`` inside the image with ``exclusion < |q - t| <= R`` (``q`` on
    the same row for disparity ground truth).  An empty competitor set counts
    as robust.
    """
    radii = [float(r) for r in radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be a non-empty increasing sequence")
    if radii[0] < exclusion:
        raise ValueError(f"radius {radii[0]} is smaller than the exclusion radius {exclusion}")
    if feat_ref.shape[-2:] != gt.shape or feat_tgt.shape != feat_ref.shape:
        raise ValueError("feature maps and ground truth must share extents")
    pix = robustness_pixels(gt, max_pixels, seed)
    tgt = _true_targets(gt, pix)
    h, w = gt.shape
    flat_tgt = feat_tgt.reshape(feat_tgt.shape[:-2] + (h * w,))
    qy, qx = np.divmod(np.arange(h * w), w)
    robust = np.zeros((len(radii), len(pix)), dtype=bool)
    for s in range(0, len(pix), chunk):
        p, t = pix[s:s + chunk], tgt[s:s + chunk]
        ref = feat_ref[..., p[:, 0], p[:, 1]]                        # (D, k) or (k,)
        d = feature_distance(ref[..., :, None], flat_tgt[..., None, :], distance)   # (k, HW)
        d_true = d[np.arange(len(p)), t[:, 0] * w + t[:, 1]]
        dy = qy[None, :] - t[:, :1]
        dx = qx[None, :] - t[:, 1:]
        r = np.hypot(dy, dx)
        band = r > exclusion
        if gt.kind == DISPARITY:
            band &= dy == 0
        for j, rad in enumerate(radii):
            comp = np.where(band & (r <= rad), d, np.inf).min(axis=1)
            robust[j, s:s + chunk] = d_true < comp
    ys = robust.mean(axis=1)
    return EvalCurve(ROBUSTNESS, list(zip(radii, ys.tolist())), float(ys[-1]))


def relative_robustness(curve_a: EvalCurve, curve_b: EvalCurve) -> EvalCurve:
    """Point-wise ratio ``a / b``; radii where ``b`` is zero are left out and flagged."""
    if not np.array_equal(curve_a.x, curve_b.x):
        raise ValueError("curves are sampled on different radii")
    points, flagged = [], []
    for (x, ya), (_, yb) in zip(curve_a.points, curve_b.points):
        if yb == 0:
            flagged.append(x)
        else:
            points.append((x, ya / yb))
    summary = points[-1][1] if points and not (flagged and flagged[-1] == curve_a.x[-1]) else float("nan")
    return EvalCurve(RELATIVE, points, summary, flagged)


def write_curves_csv(path, curves: Sequence[EvalCurve], config: dict):
    """CSV ``kind,x,y`` preceded by one ``#`` comment line holding ``config``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in config.items()) + "\n")
        fh.write("kind,x,y\n")
        for c in curves:
            for x, y in c.points:
                fh.write(f"{c.kind},{x:.9g},{y:.9g}\n")


def read_curves_csv(path) -> dict:
    """Inverse of :func:`write_curves_csv`: ``{kind: [(x, y), ...]}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("kind,"):
                continue
            kind, x, y = line.strip().split(",")
            out.setdefault(kind, []).append((float(x), float(y)))
    return out

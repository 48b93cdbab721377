"""Dense descriptors, winner-takes-all matching, consistency filtering and match metrics.

Feature maps are (D, H, W) float arrays, except CENSUS maps which are (H, W)
uint32 bitstrings compared by Hamming distance.  Displacements follow the
convention of :mod:`sdcnet.data`: a match result always stores a flow field
``(u, v)`` so that pixel ``(y, x)`` of the source view corresponds to
``(y + v, x + u)`` in the target view.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import arch
from . import numerics as nx
from .data import DISPARITY, FLOW, GroundTruth, write_flo, write_mask, write_pfm

DISTANCES = ("l2", "ssd", "sad", "hamming")


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

def extract_features(spec: arch.NetworkSpec, params: dict, img: np.ndarray,
                     max_pixels: int = 8192) -> np.ndarray:
    """Full-resolution (D, H, W) features of a normalized (3, H, W) image.

    Large images are processed in horizontal strips with a halo of RF/2 rows
    on each side.  Since the zero padding of a layer only influences outputs
    within RF/2 pixels of the strip border, the kept rows are exactly the rows
    a single whole-image pass would produce.
    """
    _, h, w = img.shape
    halo = arch.receptive_field(spec) // 2
    rows = max(1, max_pixels // max(w, 1))
    if rows >= h:
        return arch.forward(spec, params, img, keep_cols=False)[0]
    out = np.empty((spec.out_channels, h, w), dtype=np.float32)
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        a, b = max(0, y0 - halo), min(h, y1 + halo)
        f, _ = arch.forward(spec, params, img[:, a:b], keep_cols=False)
        out[:, y0:y1] = f[:, y0 - a:y1 - a]
    return out


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return img if img.ndim == 2 else img.mean(axis=0)


def census_offsets(width: int = 9, height: int = 7) -> list:
    """One offset of every symmetric pixel pair in a width x height window (31 for 9x7)."""
    if width % 2 == 0 or height % 2 == 0:
        raise ValueError("census window extents must be odd")
    hy, hx = height // 2, width // 2
    return [(dy, dx) for dy in range(-hy, hy + 1) for dx in range(-hx, hx + 1)
            if (dy, dx) > (0, 0)]


def census_descriptor(gray: np.ndarray, width: int = 9, height: int = 7) -> np.ndarray:
    """Symmetric CENSUS transform: bit k is set when ``I(p + o_k) > I(p - o_k)``.

    Returns an (H, W) uint32 map for windows with at most 32 pairs,
    otherwise uint64.  Borders use reflection.
    """
    gray = to_gray(gray).astype(np.float64)
    offs = census_offsets(width, height)
    if len(offs) > 64:
        raise ValueError("census window too large for a 64-bit descriptor")
    dtype = np.uint32 if len(offs) <= 32 else np.uint64
    h, w = gray.shape
    hy, hx = height // 2, width // 2
    pad = np.pad(gray, ((hy, hy), (hx, hx)), mode="reflect") if min(h, w) > 1 else \
        gray[nx.reflect_index(np.arange(-hy, h + hy), h)][:, nx.reflect_index(np.arange(-hx, w + hx), w)]
    out = np.zeros((h, w), dtype=dtype)
    for bit, (dy, dx) in enumerate(offs):
        a = pad[hy + dy:hy + dy + h, hx + dx:hx + dx + w]
        b = pad[hy - dy:hy - dy + h, hx - dx:hx - dx + w]
        out |= (a > b).astype(dtype) << dtype(bit)
    return out


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(a, b)).astype(np.int64)


def raw_patch_descriptor(img: np.ndarray, size: int = 5) -> np.ndarray:
    """Flattened size x size neighbourhood of every pixel, shape (C * size**2, H, W)."""
    if size < 1 or size % 2 == 0:
        raise ValueError("patch size must be odd and positive")
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    r = size // 2
    yi = nx.reflect_index(np.arange(-r, h + r), h)
    xi = nx.reflect_index(np.arange(-r, w + r), w)
    pad = img[:, yi][:, :, xi]
    parts = [pad[:, dy:dy + h, dx:dx + w] for dy in range(size) for dx in range(size)]
    return np.stack(parts, axis=1).reshape(c * size * size, h, w)


def ssd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=0)


def feature_distance(a: np.ndarray, b: np.ndarray, distance: str = "l2") -> np.ndarray:
    """Distance between descriptor arrays along axis 0 (or bitstrings for ``hamming``)."""
    if distance == "hamming":
        return hamming(a, b)
    if distance == "ssd":
        return ssd(a, b)
    if distance == "l2":
        return np.sqrt(ssd(a, b))
    if distance == "sad":
        return np.abs(a - b).sum(axis=0)
    raise ValueError(f"unknown distance {distance!r}; choose from {DISTANCES}")


def _check_pair(f1, f2):
    if f1.shape != f2.shape:
        raise ValueError(f"feature maps differ in shape: {f1.shape} vs {f2.shape}")
    return f1.shape[-2:]


# ---------------------------------------------------------------------------
# Winner-takes-all
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    kind: str
    flow: np.ndarray        # (2, H, W) displacement (u, v)
    score: np.ndarray       # best distance, +inf where invalid
    valid_mask: np.ndarray
    direction: str = "left"

    @property
    def disparity(self) -> np.ndarray:
        """Non-negative disparity of a stereo result (left: u = -d, right: u = +d)."""
        return -self.flow[0] if self.direction == "left" else self.flow[0]

    def density(self) -> float:
        return float(self.valid_mask.mean())

    def with_mask(self, mask) -> "MatchResult":
        return MatchResult(self.kind, self.flow, self.score, self.valid_mask & mask, self.direction)


def cost_shift(f1, f2, dy: int, dx: int, distance: str) -> np.ndarray:
    """Distance between f1 at p and f2 at p + (dy, dx); +inf where p + (dy, dx) leaves the image."""
    h, w = f1.shape[-2:]
    cost = np.full((h, w), np.inf)
    ya, yb = max(0, -dy), min(h, h - dy)
    xa, xb = max(0, -dx), min(w, w - dx)
    if ya < yb and xa < xb:
        cost[ya:yb, xa:xb] = feature_distance(f1[..., ya:yb, xa:xb],
                                              f2[..., ya + dy:yb + dy, xa + dx:xb + dx], distance)
    return cost


def _parabola(cm, c0, cp):
    den = cm - 2 * c0 + cp
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(np.isfinite(den) & (den > 0), 0.5 * (cm - cp) / den, 0.0)
    return np.clip(off, -0.5, 0.5)


def stereo_wta(feat_l: np.ndarray, feat_r: np.ndarray, max_disp: int, distance: str = "l2",
               direction: str = "left", refine: bool = False) -> MatchResult:
    """Scanline winner-takes-all disparity.

    ``direction="left"`` matches left pixel x against right x - d, ``"right"``
    matches right pixel x against left x + d, for d in [0, max_disp].
    Candidates outside the image are skipped and ties go to the smallest d.
    """
    if max_disp < 0:
        raise ValueError("max_disp must be >= 0")
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    h, w = _check_pair(feat_l, feat_r)
    src, tgt, sign = (feat_l, feat_r, -1) if direction == "left" else (feat_r, feat_l, 1)
    costs = np.stack([cost_shift(src, tgt, 0, sign * d, distance) for d in range(max_disp + 1)])
    best = np.argmin(costs, axis=0)
    score = np.take_along_axis(costs, best[None], axis=0)[0]
    valid = np.isfinite(score)
    disp = best.astype(np.float64)
    if refine and max_disp >= 2:
        inner = (best > 0) & (best < max_disp)
        bm, bp = np.clip(best - 1, 0, max_disp), np.clip(best + 1, 0, max_disp)
        cm = np.take_along_axis(costs, bm[None], axis=0)[0]
        cp = np.take_along_axis(costs, bp[None], axis=0)[0]
        disp = np.where(inner & valid, disp + _parabola(cm, score, cp), disp)
    flow = np.stack([sign * disp, np.zeros_like(disp)])
    return MatchResult(DISPARITY, flow, score, valid, direction)


def flow_wta(feat1: np.ndarray, feat2: np.ndarray, radius: int, distance: str = "l2") -> MatchResult:
    """Winner-takes-all flow over the (2 radius + 1)^2 window.

    Ties go to the lexicographically smallest (dy, dx).
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    h, w = _check_pair(feat1, feat2)
    best = np.full((h, w), np.inf)
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            c = cost_shift(feat1, feat2, dy, dx, distance)
            better = c < best
            best = np.where(better, c, best)
            u[better], v[better] = dx, dy
    return MatchResult(FLOW, np.stack([u, v]), best, np.isfinite(best))


def consistency_filter(fwd: MatchResult, bwd: MatchResult, thresh: float = 1.0) -> MatchResult:
    """Keep pixels whose forward match maps back: ``|fwd(x) + bwd(round(x + fwd(x)))| <= thresh``."""
    if fwd.flow.shape != bwd.flow.shape:
        raise ValueError("forward and backward results differ in shape")
    _, h, w = fwd.flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty = np.rint(ys + fwd.flow[1]).astype(np.int64)
    tx = np.rint(xs + fwd.flow[0]).astype(np.int64)
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    tyc, txc = np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)
    back = bwd.flow[:, tyc, txc]
    err = np.hypot(fwd.flow[0] + back[0], fwd.flow[1] + back[1])
    keep = inside & bwd.valid_mask[tyc, txc] & (err <= thresh)
    return fwd.with_mask(keep)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _uv_valid(x):
    if isinstance(x, MatchResult):
        return x.flow, x.valid_mask
    if isinstance(x, GroundTruth):
        return x.flow(), x.valid_mask
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = np.stack([-a, np.zeros_like(a)])
    return a, np.isfinite(a).all(axis=0)


def endpoint_errors(est, gt, region: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel endpoint errors over pixels valid in both ``est`` and ``gt`` (and ``region``)."""
    e, ev = _uv_valid(est)
    g, gv = _uv_valid(gt)
    if e.shape != g.shape:
        raise ValueError(f"estimate {e.shape} and ground truth {g.shape} differ in shape")
    m = ev & gv if region is None else ev & gv & region
    if not m.any():
        raise ValueError("no pixel is valid in both estimate and ground truth")
    return np.hypot(e[0] - g[0], e[1] - g[1])[m]


def epe(est, gt, region=None) -> float:
    return float(endpoint_errors(est, gt, region).mean())


def outlier_rate(est, gt, thresh: float = 3.0, region=None) -> float:
    return float((endpoint_errors(est, gt, region) > thresh).mean())


def density(est, gt, region=None) -> float:
    _, ev = _uv_valid(est)
    _, gv = _uv_valid(gt)
    if region is not None:
        gv = gv & region
    n = gv.sum()
    if n == 0:
        raise ValueError("ground truth has no valid pixels")
    return float((ev & gv).sum() / n)


def match_metrics(est: MatchResult, gt: GroundTruth, thresh: float = 3.0) -> list:
    """``(metric, region, value)`` rows for all valid and non-occluded ground-truth pixels."""
    rows = []
    for region, mask in (("all", None), ("noc", ~gt.occlusion_mask)):
        for name, fn in (("epe", epe), (f">{thresh:g}px", lambda e, g, r: outlier_rate(e, g, thresh, r))):
            try:
                rows.append((name, region, fn(est, gt, mask)))
            except ValueError:
                rows.append((name, region, float("nan")))
        rows.append(("density", region, density(est, gt, mask)))
    return rows


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,region,value\n")
        for metric, region, value in rows:
            fh.write(f"{metric},{region},{value:.6g}\n")


def write_match(prefix, result: MatchResult) -> list:
    """Write ``<prefix>.flo`` or ``<prefix>.pfm`` plus ``<prefix>_valid.pgm``; returns the paths."""
    prefix = Path(prefix)
    if result.kind == FLOW:
        path = prefix.with_suffix(".flo")
        write_flo(path, result.flow, result.valid_mask)
    else:
        path = prefix.with_suffix(".pfm")
        write_pfm(path, result.disparity, result.valid_mask)
    mask_path = prefix.with_name(prefix.name + "_valid.pgm")
    write_mask(mask_path, result.valid_mask)
    return [path, mask_path]

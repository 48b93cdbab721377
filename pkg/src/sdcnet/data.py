"""Image and ground-truth files, input normalization, triplet sampling and synthetic scenes.

Displacement convention: a pixel ``(y, x)`` of the first view corresponds to
``(y + v, x + u)`` in the second view.  A disparity ``d`` of a rectified left
image maps left ``x`` to right ``x - d``, i.e. ``u = -d``, ``v = 0``.
"""
from __future__ import annotations

import math
import re
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BadMagicError, TruncatedFileError, UnsupportedFormatError
from .numerics import bilinear_sample

DISPARITY = "disparity"
FLOW = "flow"
KINDS = (DISPARITY, FLOW)

MEAN = np.array([0.3534, 0.3448, 0.3295])
STD = np.array([0.2492, 0.2465, 0.2446])

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9

# Sampling weights of the benchmark mix (scene-flow data contributes its stereo and
# flow pairs separately, see ``mix_datasets``).
DEFAULT_MIX = {
    "kitti": 0.5,
    "sintel": 0.175,
    "middlebury-flow": 0.025,
    "middlebury-stereo": 0.05,
    "hd1k": 0.175,
    "eth3d": 0.075,
}


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Disparity map (H, W) or flow field (2, H, W) with validity and occlusion masks."""
    kind: str
    field: np.ndarray
    valid_mask: np.ndarray
    occlusion_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ground-truth kind {self.kind!r}")
        shape = self.field.shape if self.kind == DISPARITY else self.field.shape[1:]
        if self.kind == FLOW and self.field.shape[0] != 2:
            raise ValueError("a flow field must have shape (2, H, W)")
        if self.kind == DISPARITY and self.field.ndim != 2:
            raise ValueError("a disparity map must have shape (H, W)")
        if self.occlusion_mask is None:
            self.occlusion_mask = np.zeros(shape, dtype=bool)
        if self.valid_mask.shape != shape or self.occlusion_mask.shape != shape:
            raise ValueError("masks must match the field's extents")

    @property
    def shape(self) -> tuple:
        return self.valid_mask.shape

    def flow(self) -> np.ndarray:
        """Displacement as a (2, H, W) array of (u, v)."""
        if self.kind == FLOW:
            return self.field
        return np.stack([-self.field, np.zeros_like(self.field)])


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise TruncatedFileError(f"{path}: file too short for a header")
    head = data[:2]
    if head in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6") and head != magic:
        raise UnsupportedFormatError(f"{path}: {head.decode()} images are not supported, expected {magic.decode()}")
    if head != magic:
        raise BadMagicError(f"{path}: bad magic {head!r}, expected {magic.decode()}")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFileError(f"{path}: incomplete header")
        vals.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(v) for v in vals)
    except ValueError as exc:
        raise UnsupportedFormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} is not supported (need 255)")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    if len(data) < pos + n:
        raise TruncatedFileError(f"{path}: expected {n} pixel bytes, found {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos), h, w


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as a (3, H, W) float32 array in [0, 1]."""
    px, h, w = _read_pnm(path, b"P6")
    return (px.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    body = _to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def read_pgm(path) -> np.ndarray:
    """Binary P5 image as an (H, W) float32 array in [0, 1]."""
    px, h, w = _read_pnm(path, b"P5")
    return (px.reshape(h, w) / np.float32(255)).astype(np.float32)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected an (H, W) image, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _to_bytes(img).tobytes())


def write_mask(path, mask: np.ndarray):
    write_pgm(path, np.asarray(mask, dtype=np.float32))


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0.5


# ---------------------------------------------------------------------------
# .flo and PFM
# ---------------------------------------------------------------------------

def read_flo(path) -> GroundTruth:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file too short")
    if data[:4] != b"PIEH":
        raise BadMagicError(f"{path}: bad .flo magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: incomplete .flo header")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 1 or h < 1:
        raise UnsupportedFormatError(f"{path}: invalid extents {w}x{h}")
    n = w * h * 2
    if len(data) < 12 + 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} floats")
    uv = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w, 2).transpose(2, 0, 1)
    uv = uv.astype(np.float32)
    valid = np.isfinite(uv).all(axis=0) & (np.abs(uv) <= FLO_INVALID).all(axis=0)
    return GroundTruth(FLOW, uv, valid)


def write_flo(path, flow: np.ndarray, valid_mask: np.ndarray | None = None):
    """Write (2, H, W) flow; pixels outside ``valid_mask`` are stored as 1e10."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) flow field, got {flow.shape}")
    if valid_mask is not None:
        flow = np.where(valid_mask, flow, np.float32(1e10))
    _, h, w = flow.shape
    body = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + body)


def read_pfm(path) -> GroundTruth:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if data[:2] == b"PF":
        raise UnsupportedFormatError(f"{path}: colour PFM is not supported")
    if data[:2] != b"Pf":
        raise BadMagicError(f"{path}: bad PFM magic {data[:2]!r}")
    if m is None:
        raise TruncatedFileError(f"{path}: incomplete PFM header")
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    if scale == 0 or w < 1 or h < 1:
        raise UnsupportedFormatError(f"{path}: invalid PFM header")
    dt = "<f4" if scale < 0 else ">f4"
    if len(data) < m.end() + 4 * w * h:
        raise TruncatedFileError(f"{path}: expected {w * h} floats")
    disp = np.frombuffer(data, dtype=dt, count=w * h, offset=m.end()).reshape(h, w)[::-1]
    disp = disp.astype(np.float32)
    return GroundTruth(DISPARITY, disp, np.isfinite(disp))


def write_pfm(path, disp: np.ndarray, valid_mask: np.ndarray | None = None):
    """Write an (H, W) map little-endian, bottom row first; invalid pixels become +Inf."""
    disp = np.asarray(disp, dtype=np.float32)
    if disp.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got {disp.shape}")
    if valid_mask is not None:
        disp = np.where(valid_mask, disp, np.float32(np.inf))
    h, w = disp.shape
    body = np.ascontiguousarray(disp[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(b"Pf\n%d %d\n-1.0\n" % (w, h) + body)


def _occlusion_path(gt_path: Path) -> Path:
    return gt_path.with_name(gt_path.stem + "_occ.pgm")


def read_ground_truth(path, kind: str | None = None) -> GroundTruth:
    """Load .flo or .pfm ground truth plus an optional ``<stem>_occ.pgm`` occlusion mask."""
    path = Path(path)
    if path.suffix.lower() == ".flo":
        gt = read_flo(path)
    elif path.suffix.lower() == ".pfm":
        gt = read_pfm(path)
    else:
        raise UnsupportedFormatError(f"{path}: unknown ground-truth format {path.suffix!r}")
    if kind is not None and gt.kind != kind:
        raise ValueError(f"{path}: file holds {gt.kind} ground truth, manifest says {kind}")
    occ = _occlusion_path(path)
    if occ.exists():
        gt.occlusion_mask = read_mask(occ)
        if gt.occlusion_mask.shape != gt.shape:
            raise ValueError(f"{occ}: occlusion mask extents differ from the ground truth")
    return gt


def write_ground_truth(path, gt: GroundTruth):
    path = Path(path)
    if gt.kind == FLOW:
        write_flo(path, gt.field, gt.valid_mask)
    else:
        write_pfm(path, gt.field, gt.valid_mask)
    write_mask(_occlusion_path(path), gt.occlusion_mask)


# ---------------------------------------------------------------------------
# Normalization and patches
# ---------------------------------------------------------------------------

def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` of a (3, H, W) image in [0, 1]."""
    img = np.asarray(img)
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape}")
    return ((img - MEAN[:, None, None]) / STD[:, None, None]).astype(np.float32)


def sample_negative_offset(rng: np.random.Generator, kind: str) -> np.ndarray:
    """Offset (du, dv) of a negative from the true match.

    The magnitude is uniform in [2, 10] with probability 0.75 and uniform in
    (10, 100] otherwise.  Disparity negatives move horizontally with a random
    sign, flow negatives in a uniformly random direction.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if rng.random() < 0.75:
        mag = rng.uniform(2.0, 10.0)
    else:
        mag = 100.0 - rng.uniform(0.0, 90.0)
    if kind == DISPARITY:
        return np.array([mag if rng.random() < 0.5 else -mag, 0.0])
    phi = rng.uniform(0.0, 2 * np.pi)
    return np.array([mag * np.cos(phi), mag * np.sin(phi)])


def extract_patch(img: np.ndarray, center, size: int) -> np.ndarray:
    """``size`` x ``size`` patch around real ``center = (y, x)``, bilinear on the mirrored image."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {size}")
    r = np.arange(size) - size // 2
    cy, cx = center
    return bilinear_sample(img, (cy + r)[:, None], (cx + r)[None, :])


@dataclass
class PatchTriplet:
    reference: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    center_yx: tuple
    displacement_uv: tuple
    negative_offset_uv: tuple

    @property
    def positive_center(self) -> tuple:
        return (self.center_yx[0] + self.displacement_uv[1], self.center_yx[1] + self.displacement_uv[0])

    @property
    def negative_center(self) -> tuple:
        py, px = self.positive_center
        return (py + self.negative_offset_uv[1], px + self.negative_offset_uv[0])


def eligible_pixels(gt: GroundTruth) -> np.ndarray:
    """Valid, non-occluded pixels whose match lies inside the second view."""
    h, w = gt.shape
    uv = gt.flow()
    ys, xs = np.mgrid[0:h, 0:w]
    ty, tx = ys + uv[1], xs + uv[0]
    with np.errstate(invalid="ignore"):
        inside = (ty >= 0) & (ty <= h - 1) & (tx >= 0) & (tx <= w - 1)
    return gt.valid_mask & ~gt.occlusion_mask & inside


def sample_triplets(img1, img2, gt: GroundTruth, n: int, patch_size: int,
                    rng: np.random.Generator, normalized: bool = False) -> list:
    """Draw ``n`` triplets from one image pair.

    ``img1``/``img2`` are [0, 1] images unless ``normalized`` is set; the
    returned patches are always in normalized units.
    """
    ok = eligible_pixels(gt)
    ys, xs = np.nonzero(ok)
    if len(ys) == 0:
        raise ValueError("no eligible reference pixels in this pair")
    if not normalized:
        img1, img2 = normalize_image(img1), normalize_image(img2)
    uv = gt.flow()
    idx = rng.integers(0, len(ys), size=n)
    offs = np.array([sample_negative_offset(rng, gt.kind) for _ in range(n)]).reshape(n, 2)
    y, x = ys[idx].astype(np.float64), xs[idx].astype(np.float64)
    u, v = uv[0, ys[idx], xs[idx]].astype(np.float64), uv[1, ys[idx], xs[idx]].astype(np.float64)
    py, px = y + v, x + u
    ny, nx_ = py + offs[:, 1], px + offs[:, 0]
    r = np.arange(patch_size) - patch_size // 2

    def grid(cy, cx):
        return cy[:, None, None] + r[None, :, None], cx[:, None, None] + r[None, None, :]

    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {patch_size}")
    refs = bilinear_sample(img1, *grid(y, x))
    pos = bilinear_sample(img2, *grid(py, px))
    neg = bilinear_sample(img2, *grid(ny, nx_))
    return [PatchTriplet(reference=refs[:, i], positive=pos[:, i], negative=neg[:, i],
                         center_yx=(int(y[i]), int(x[i])), displacement_uv=(float(u[i]), float(v[i])),
                         negative_offset_uv=(float(offs[i, 0]), float(offs[i, 1])))
            for i in range(n)]


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------

def mix_datasets(sources: Sequence[Sequence], weights: Sequence[float],
                 rng: np.random.Generator) -> Iterator[tuple]:
    """Endless stream of ``(source index, item)``.

    Each draw picks a source by weight and takes the next item of that
    source's current permutation; a source is reshuffled once all of its
    items have been used.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(sources) != len(weights) or len(sources) == 0:
        raise ValueError("need one weight per source and at least one source")
    if (weights <= 0).any() or abs(weights.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights must be positive and sum to 1, got {weights.tolist()}")
    for i, s in enumerate(sources):
        if len(s) == 0:
            raise ValueError(f"source {i} is empty")
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    queues = [deque() for _ in sources]
    while True:
        s = int(np.searchsorted(cdf, rng.random(), side="right"))
        if not queues[s]:
            queues[s].extend(rng.permutation(len(sources[s])).tolist())
        yield s, sources[s][queues[s].popleft()]


def chunk_shuffle(stream: Iterable, chunk_size: int, rng: np.random.Generator) -> Iterator:
    """Buffer ``chunk_size`` items at a time and emit each buffer in random order."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    buf = []
    for item in stream:
        buf.append(item)
        if len(buf) == chunk_size:
            for i in rng.permutation(chunk_size):
                yield buf[i]
            buf = []
    for i in rng.permutation(len(buf)):
        yield buf[i]


@dataclass
class ScenePair:
    """One image pair with ground truth, loaded (or generated) in memory."""
    img1: np.ndarray
    img2: np.ndarray
    gt: GroundTruth
    name: str = ""
    _norm: tuple | None = field(default=None, repr=False, compare=False)

    def normalized(self) -> tuple:
        if self._norm is None:
            self._norm = (normalize_image(self.img1), normalize_image(self.img2))
        return self._norm


def triplet_stream(sources: Sequence[Sequence[ScenePair]], weights, patch_size: int,
                   rng: np.random.Generator, per_image: int = 100,
                   chunk_size: int = 3200) -> Iterator[PatchTriplet]:
    """Endless shuffled triplet stream: ``per_image`` triplets per drawn pair."""
    def raw():
        for _, pair in mix_datasets(sources, weights, rng):
            a, b = pair.normalized()
            yield from sample_triplets(a, b, pair.gt, per_image, patch_size, rng, normalized=True)
    return chunk_shuffle(raw(), chunk_size, rng)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    source_id: str
    weight: float
    img1: Path
    img2: Path
    gt: Path
    kind: str


def read_manifest(path) -> list:
    """Parse ``source_id weight img1 img2 gt kind`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        sid, weight, a, b, g, kind = parts
        try:
            w = float(weight)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: weight {weight!r} is not a number") from None
        if kind not in KINDS:
            raise ValueError(f"{path}:{lineno}: unknown kind {kind!r}")
        entries.append(ManifestEntry(sid, w, base / a, base / b, base / g, kind))
    if not entries:
        raise ValueError(f"{path}: manifest lists no image pairs")
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]):
    base = Path(path).parent
    lines = ["# source_id weight img1 img2 gt kind"]
    for e in entries:
        rel = [str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p)
               for p in (e.img1, e.img2, e.gt)]
        lines.append(f"{e.source_id} {e.weight:g} {rel[0]} {rel[1]} {rel[2]} {e.kind}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pair(entry: ManifestEntry) -> ScenePair:
    return ScenePair(read_ppm(entry.img1), read_ppm(entry.img2),
                     read_ground_truth(entry.gt, entry.kind), name=entry.img1.stem)


def group_sources(entries: Sequence[ManifestEntry]) -> tuple:
    """Group entries by source id: returns ``(ids, weights, lists of entries)`` in first-seen order."""
    ids, groups, weights = [], {}, {}
    for e in entries:
        if e.source_id not in groups:
            ids.append(e.source_id)
            groups[e.source_id] = []
            weights[e.source_id] = e.weight
        elif weights[e.source_id] != e.weight:
            raise ValueError(f"source {e.source_id!r} lists conflicting weights")
        groups[e.source_id].append(e)
    return ids, [weights[i] for i in ids], [groups[i] for i in ids]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 96
    mode: str = DISPARITY
    amplitude: float = 8.0      # largest displacement in pixels
    octaves: int = 4
    base_scale: float = 32.0    # grid spacing of the coarsest texture octave
    motion_scale: float = 48.0  # grid spacing of the displacement field
    objects: int = 3            # soft-edged foreground objects
    edge_width: float = 0.5     # object rim softness in pixels
    noise: float = 0.0          # std of independent Gaussian sensor noise added to each view

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError(f"scene extents must be at least 2x2, got {self.height}x{self.width}")
        if self.mode not in KINDS:
            raise ValueError(f"unknown scene mode {self.mode!r}")
        if self.amplitude < 0 or self.octaves < 1 or self.objects < 0 or self.edge_width <= 0 \
                or self.noise < 0:
            raise ValueError("amplitude, objects and noise must be >= 0, octaves >= 1, edge_width > 0")
        if self.base_scale / 2 ** (self.octaves - 1) < 2 or self.motion_scale < 4:
            raise ValueError("noise grid spacings are too fine")


def value_noise(h: int, w: int, spacing: float, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Random lattice values every ``spacing`` pixels, smoothstep-interpolated; values in [0, 1]."""
    gh, gw = int(math.ceil(h / spacing)) + 2, int(math.ceil(w / spacing)) + 2
    grid = rng.random((channels, gh, gw))
    oy, ox = rng.random(2)
    y = np.arange(h) / spacing + oy
    x = np.arange(w) / spacing + ox
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    sy, sx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    g00 = grid[:, y0[:, None], x0[None, :]]
    g01 = grid[:, y0[:, None], x0[None, :] + 1]
    g10 = grid[:, y0[:, None] + 1, x0[None, :]]
    g11 = grid[:, y0[:, None] + 1, x0[None, :] + 1]
    top = g00 + (g01 - g00) * sx[None, None, :]
    bot = g10 + (g11 - g10) * sx[None, None, :]
    return top + (bot - top) * sy[None, :, None]


def _texture(cfg: SceneConfig, rng) -> np.ndarray:
    img = np.zeros((3, cfg.height, cfg.width))
    total = 0.0
    for o in range(cfg.octaves):
        amp = 0.6 ** o
        gray = value_noise(cfg.height, cfg.width, cfg.base_scale / 2 ** o, rng)
        tint = value_noise(cfg.height, cfg.width, cfg.base_scale / 2 ** o, rng, channels=3)
        img += amp * (0.7 * gray + 0.3 * tint)
        total += amp
    img /= total
    lo, hi = img.min(), img.max()
    return ((img - lo) / max(hi - lo, 1e-12)).astype(np.float32)


def _objects(cfg: SceneConfig, rng) -> tuple:
    """Soft elliptical foreground objects: (weight in [0, 1], index of the dominant object)."""
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    layers = []
    for _ in range(cfg.objects):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.1, 0.3, size=2) * min(h, w)
        dist = np.hypot((ys - cy) / ry, (xs - cx) / rx)
        # distance to the rim in pixels, approximately
        rim = (1 - dist) * min(ry, rx)
        layers.append(1 / (1 + np.exp(-rim / cfg.edge_width)))
    if not layers:
        return np.zeros((h, w)), np.zeros((h, w), dtype=int)
    stack = np.stack(layers)
    return stack.max(axis=0), stack.argmax(axis=0)


def _displacement(cfg: SceneConfig, rng) -> tuple:
    """(2, H, W) displacement (u, v) and the per-pixel depth proxy (larger is nearer)."""
    h, w = cfg.height, cfg.width
    weight, which = _objects(cfg, rng)
    if cfg.mode == DISPARITY:
        bg = 0.5 * cfg.amplitude * value_noise(h, w, cfg.motion_scale, rng)[0]
        lift = rng.uniform(0.25, 0.5, size=max(cfg.objects, 1)) * cfg.amplitude
        d = bg + weight * lift[which]
        return np.stack([-d, np.zeros_like(d)]), d
    bg = 0.5 * cfg.amplitude * (2 * value_noise(h, w, cfg.motion_scale, rng, channels=2) - 1) / np.sqrt(2)
    n = max(cfg.objects, 1)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    mag = rng.uniform(0.5, 1.0, size=n) * cfg.amplitude
    fg = np.stack([mag * np.cos(phi), mag * np.sin(phi)])[:, which]
    uv = bg + weight * (fg - bg)
    return uv, weight


def inverse_warp(img1: np.ndarray, uv: np.ndarray, depth: np.ndarray | None = None,
                 oversample: int = 4, iters: int = 30) -> np.ndarray:
    """Second view of ``img1`` under forward displacement ``uv``.

    Each target pixel ``q`` takes the colour of the source point ``p`` with
    ``p + uv(p) = q``, sampled bilinearly from ``img1``.  Candidate preimages
    come from forward-splatting an ``oversample``-times finer source grid and
    keeping the nearest sample (largest ``depth``) per target pixel; each is
    then refined by fixed-point iteration on ``p = q - uv(p)``.  Target pixels
    no sample reaches (disocclusions) start the iteration at ``q`` itself.
    """
    _, h, w = img1.shape
    field = uv.astype(np.float64)
    z = np.zeros((h, w)) if depth is None else np.asarray(depth, dtype=np.float64)
    step = (np.arange(oversample) + 0.5) / oversample - 0.5
    sy = (np.arange(h)[:, None] + step[None, :]).ravel()
    sx = (np.arange(w)[:, None] + step[None, :]).ravel()
    sy, sx = np.meshgrid(sy, sx, indexing="ij")
    s = bilinear_sample(field, sy, sx)
    ty, tx = np.rint(sy + s[1]).astype(np.int64), np.rint(sx + s[0]).astype(np.int64)
    sz = bilinear_sample(z[None], sy, sx)[0]
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    key = (ty * w + tx)[inside]
    order = np.lexsort((-sz[inside], key))
    first = np.ones(len(order), dtype=bool)
    first[1:] = key[order][1:] != key[order][:-1]
    best = order[first]

    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    qy, qx = qy.ravel(), qx.ravel()
    py, px = qy.copy(), qx.copy()
    hit = key[best]
    py[hit], px[hit] = sy[inside][best], sx[inside][best]
    start_y, start_x = py.copy(), px.copy()
    for _ in range(iters):
        f = bilinear_sample(field, py, px)
        py, px = qy - f[1], qx - f[0]
    f = bilinear_sample(field, py, px)
    converged = (np.abs(py + f[1] - qy) < 1e-6) & (np.abs(px + f[0] - qx) < 1e-6)
    stray = (np.abs(py - start_y) > 1) | (np.abs(px - start_x) > 1)
    keep = converged & ~(stray & np.isin(np.arange(h * w), hit))
    py, px = np.where(keep, py, start_y), np.where(keep, px, start_x)
    return bilinear_sample(img1, py.reshape(h, w), px.reshape(h, w)).astype(np.float32)


def splat_occlusion(uv: np.ndarray, depth: np.ndarray, radius: float = 0.5) -> np.ndarray:
    """Pixels hidden in the second view: another pixel lands within ``radius`` of their
    target position and is nearer (larger ``depth``)."""
    _, h, w = uv.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty = (ys + uv[1]).ravel()
    tx = (xs + uv[0]).ravel()
    z = depth.ravel()
    occ = np.zeros(h * w, dtype=bool)
    cy, cx = np.floor(ty).astype(np.int64), np.floor(tx).astype(np.int64)
    buckets = {}
    for i, k in enumerate(zip(cy.tolist(), cx.tolist())):
        buckets.setdefault(k, []).append(i)
    buckets = {k: np.asarray(v) for k, v in buckets.items()}
    reach = int(math.ceil(radius))
    offsets = [(a, b) for a in range(-reach, reach + 1) for b in range(-reach, reach + 1)]
    for (by, bx), members in buckets.items():
        cand = np.concatenate([buckets[(by + a, bx + b)] for a, b in offsets if (by + a, bx + b) in buckets])
        dy = ty[members][:, None] - ty[cand][None, :]
        dx = tx[members][:, None] - tx[cand][None, :]
        hidden = (dy * dy + dx * dx <= radius * radius) & (z[cand][None, :] > z[members][:, None])
        occ[members] = hidden.any(axis=1)
    return occ.reshape(h, w)


def out_of_frame(uv: np.ndarray) -> np.ndarray:
    """Pixels whose target position falls outside the second view."""
    _, h, w = uv.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty, tx = ys + uv[1], xs + uv[0]
    return (ty < 0) | (ty > h - 1) | (tx < 0) | (tx > w - 1)


def gen_synthetic_scene(cfg: SceneConfig, seed: int) -> tuple:
    """Textured first view, warped second view and ground truth with occlusions.

    The depth proxy deciding visibility is the disparity in stereo mode and
    the foreground-object weight in flow mode.
    """
    rng = np.random.default_rng(seed)
    img1 = _texture(cfg, rng)
    uv, depth = _displacement(cfg, rng)
    img2 = inverse_warp(img1, uv, depth)
    field_ = (-uv[0] if cfg.mode == DISPARITY else uv).astype(np.float32)
    occ = splat_occlusion(uv, depth) | out_of_frame(uv)
    gt = GroundTruth(cfg.mode, field_, np.ones((cfg.height, cfg.width), dtype=bool), occ)
    if cfg.noise > 0:
        img1, img2 = (np.clip(im + rng.normal(0.0, cfg.noise, im.shape), 0, 1).astype(np.float32)
                      for im in (img1, img2))
    return img1, img2, gt


def constant_shift_scene(cfg: SceneConfig, seed: int, shift) -> tuple:
    """Scene whose displacement is the constant ``shift``: disparity d or flow (u, v)."""
    rng = np.random.default_rng(seed)
    img1 = _texture(cfg, rng)
    h, w = cfg.height, cfg.width
    if cfg.mode == DISPARITY:
        uv = np.stack([np.full((h, w), -float(shift)), np.zeros((h, w))])
        field_ = np.full((h, w), float(shift), dtype=np.float32)
    else:
        uv = np.stack([np.full((h, w), float(shift[0])), np.full((h, w), float(shift[1]))])
        field_ = uv.astype(np.float32)
    img2 = inverse_warp(img1, uv)
    return img1, img2, GroundTruth(cfg.mode, field_, np.ones((h, w), dtype=bool), out_of_frame(uv))

"""Command-line entry point: ``python -m sdcnet <command> ...``.

Exit codes: 0 success, 1 computation error, 2 bad arguments or config,
3 I/O error (including malformed input files).
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import dataclasses
import logging
import signal
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import arch, data, evaluation, matching, training
from . import numerics as nx
from .errors import FormatError

log = logging.getLogger("sdcnet")

EXIT_OK, EXIT_COMPUTE, EXIT_ARGS, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command-line arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DataSection:
    scenes: int = 20
    height: int = 64
    width: int = 96
    mode: str = "mixed"          # disparity, flow or mixed (alternating)
    amplitude: float = 8.0
    octaves: int = 4
    base_scale: float = 32.0
    motion_scale: float = 48.0
    objects: int = 3
    edge_width: float = 0.5
    noise: float = 0.0
    patch_size: int = 0          # 0: the network's receptive field
    per_image: int = 100
    chunk_size: int = 3200
    val_fraction: float = 0.2


@dataclasses.dataclass
class TrainSection:
    arch: str = "tiny"
    tau: float = 0.2
    margin: float = 1.0
    lr0: float = 0.01
    decay_base: float = 0.7
    decay_every: int = 100_000
    batch_size: int = 32
    total_iters: int = 2000
    activation: str = ""
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    report_every: int = 500
    val_triplets: int = 1000


@dataclasses.dataclass
class MatchSection:
    descriptor: str = "network"  # network, census or raw
    distance: str = ""           # empty: l2 for float descriptors, hamming for census
    max_disp: int = 16
    radius: int = 8
    consistency: bool = True
    thresh: float = 1.0
    refine: bool = False
    raw_size: int = 5


@dataclasses.dataclass
class EvalSection:
    triplets: int = 1000
    radii: str = " ".join(str(r) for r in evaluation.DEFAULT_RADII)
    exclusion: float = 2.0
    max_pixels: int = 2000
    split: str = "val"           # val or all

    def radius_list(self) -> list:
        try:
            return [float(r) for r in self.radii.replace(",", " ").split()]
        except ValueError:
            raise UsageError(f"[eval] radii must be numbers, got {self.radii!r}") from None


SECTIONS = {"data": DataSection, "train": TrainSection, "match": MatchSection, "eval": EvalSection}


@dataclasses.dataclass
class Config:
    data: DataSection = dataclasses.field(default_factory=DataSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)
    match: MatchSection = dataclasses.field(default_factory=MatchSection)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)


def _coerce(section: str, key: str, value: str, typ):
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot parse {value!r} as {typ.__name__}") from None


def load_config(path: str | None) -> Config:
    cfg = Config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise UsageError(f"{path}: unknown section [{name}]; expected one of {sorted(SECTIONS)}")
        section = getattr(cfg, name)
        types = {f.name: type(f.default) for f in dataclasses.fields(section)}
        for key, value in parser.items(name):
            if key not in types:
                raise UsageError(f"{path}: unknown key {key!r} in [{name}]")
            setattr(section, key, _coerce(name, key, value, types[key]))
    return cfg


def dump_config(cfg: Config, path: Path, extra: dict | None = None):
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        parser[name] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    with open(path, "w", encoding="utf-8") as fh:
        if extra:
            for k, v in extra.items():
                fh.write(f"# {k} = {v}\n")
        parser.write(fh)


def train_config(cfg: Config, seed: int) -> training.TrainConfig:
    t = cfg.train
    try:
        return training.TrainConfig(
            tau=t.tau, margin=t.margin, lr0=t.lr0, decay_base=t.decay_base, decay_every=t.decay_every,
            batch_size=t.batch_size, total_iters=t.total_iters, seed=substream_seed(seed, "init"),
            activation=t.activation or None, adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2,
            adam_eps=t.adam_eps, report_every=t.report_every)
    except ValueError as exc:
        raise UsageError(f"[train] {exc}") from None


def scene_config(cfg: Config, index: int) -> data.SceneConfig:
    d = cfg.data
    if d.mode not in ("disparity", "flow", "mixed"):
        raise UsageError(f"[data] mode must be disparity, flow or mixed, got {d.mode!r}")
    mode = d.mode if d.mode != "mixed" else (data.DISPARITY if index % 2 == 0 else data.FLOW)
    try:
        return data.SceneConfig(d.height, d.width, mode, d.amplitude, d.octaves, d.base_scale,
                                d.motion_scale, d.objects, d.edge_width, d.noise)
    except ValueError as exc:
        raise UsageError(f"[data] {exc}") from None


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def substream_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named consumer of the global seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def resolve_arch(name: str) -> arch.NetworkSpec:
    try:
        return arch.registry(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def split_entries(entries, val_fraction: float):
    """Hold out the last ``val_fraction`` of each source's pairs (at least one when possible)."""
    if not 0 <= val_fraction < 1:
        raise UsageError("[data] val_fraction must lie in [0, 1)")
    _, _, groups = data.group_sources(entries)
    train, val = [], []
    for g in groups:
        k = int(round(val_fraction * len(g)))
        if val_fraction > 0 and len(g) > 1:
            k = max(k, 1)
        k = min(k, len(g) - 1)
        train += g[:len(g) - k]
        val += g[len(g) - k:]
    return train, val


def patch_size_for(cfg: Config, spec: arch.NetworkSpec) -> int:
    rf = arch.receptive_field(spec)
    ps = cfg.data.patch_size or rf
    if ps < rf or ps % 2 == 0:
        raise UsageError(f"[data] patch_size must be odd and at least the receptive field {rf}")
    return ps


def fixed_triplets(entries, count: int, patch_size: int, rng) -> list:
    """``count`` triplets spread evenly over ``entries`` (a fixed evaluation set)."""
    if not entries:
        raise UsageError("no image pairs available for evaluation triplets")
    pairs = [data.load_pair(e) for e in entries]
    share = [count // len(pairs) + (1 if i < count % len(pairs) else 0) for i in range(len(pairs))]
    out = []
    for p, n in zip(pairs, share):
        if n:
            a, b = p.normalized()
            out += data.sample_triplets(a, b, p.gt, n, patch_size, rng, normalized=True)
    return out


def training_stream(entries, cfg: Config, patch_size: int, rng):
    ids, weights, groups = data.group_sources(entries)
    total = sum(weights)
    weights = [w / total for w in weights]
    sources = [[data.load_pair(e) for e in g] for g in groups]
    return data.triplet_stream(sources, weights, patch_size, rng, cfg.data.per_image, cfg.data.chunk_size)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_info(args, cfg: Config) -> int:
    spec = resolve_arch(args.arch)
    rf = arch.receptive_field(spec)
    w, b = arch.weight_count(spec), arch.bias_count(spec)
    print(f"architecture: {spec.name}")
    print(f"receptive_field: {rf}")
    print(f"parameters: {w + b:,} ({w:,} weights + {b:,} biases)")
    print("resolution_factor: 1")
    print(f"feature_dim: {spec.out_channels}")
    print("layer,type,kernels,in,out,weights,biases,rf")
    for row in arch.layer_table(spec):
        print(",".join(str(row[k]) for k in ("layer", "type", "kernels", "in", "out", "weights", "biases", "rf")))
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, arch.SparseConv):
            print(f"layer {i} sparse mask: {layer.k}x{layer.k}, {layer.mask.nonzero_count} active cells")
    return EXIT_OK


def cmd_gen_data(args, cfg: Config) -> int:
    out = ensure_dir(args.out)
    n = args.scenes if args.scenes is not None else cfg.data.scenes
    if n < 1:
        raise UsageError("--scenes must be >= 1")
    cfg.data.scenes = n
    entries = []
    base_seed = substream_seed(args.seed, "data")
    for i in range(n):
        sc = scene_config(cfg, i)
        img1, img2, gt = data.gen_synthetic_scene(sc, base_seed + i)
        stem = f"scene_{i:03d}"
        p1, p2 = out / f"{stem}_1.ppm", out / f"{stem}_2.ppm"
        pg = out / (f"{stem}.pfm" if gt.kind == data.DISPARITY else f"{stem}.flo")
        data.write_ppm(p1, img1)
        data.write_ppm(p2, img2)
        data.write_ground_truth(pg, gt)
        entries.append(data.ManifestEntry("synthetic", 1.0, p1, p2, pg, gt.kind))
    data.write_manifest(out / "manifest.txt", entries)
    dump_config(cfg, out / "effective_config.ini", {"command": "gen-data", "seed": args.seed})
    print(f"wrote {n} scenes and {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_sample(args, cfg: Config) -> int:
    spec = resolve_arch(args.arch or cfg.train.arch)
    ps = patch_size_for(cfg, spec)
    entries = data.read_manifest(args.manifest)
    stream = training_stream(entries, cfg, ps, substream(args.seed, "data"))
    trips = [next(stream) for _ in range(args.count)]
    out = Path(args.out)
    ensure_dir(out.parent)
    np.savez(out,
             reference=np.stack([t.reference for t in trips]).astype(np.float32),
             positive=np.stack([t.positive for t in trips]).astype(np.float32),
             negative=np.stack([t.negative for t in trips]).astype(np.float32),
             center_yx=np.array([t.center_yx for t in trips], dtype=np.int64),
             displacement_uv=np.array([t.displacement_uv for t in trips]),
             negative_offset_uv=np.array([t.negative_offset_uv for t in trips]))
    dump_config(cfg, out.with_name(out.stem + "_config.ini"), {"command": "sample", "seed": args.seed})
    print(f"wrote {len(trips)} triplets of size {ps} to {out}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    if args.arch:
        cfg.train.arch = args.arch
    if args.iters is not None:
        cfg.train.total_iters = args.iters
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    spec = resolve_arch(cfg.train.arch)
    tcfg = train_config(cfg, args.seed)
    ps = patch_size_for(cfg, spec)
    out = ensure_dir(args.out)
    entries = data.read_manifest(args.manifest)
    train_e, val_e = split_entries(entries, cfg.data.val_fraction)
    dump_config(cfg, out / "effective_config.ini", {"command": "train", "seed": args.seed})
    val = fixed_triplets(val_e, cfg.train.val_triplets, ps, substream(args.seed, "eval")) if val_e else None
    stream = training_stream(train_e, cfg, ps, substream(args.seed, "data"))

    stop = {"flag": False}

    def on_sigint(signum, frame):
        stop["flag"] = True
        log.warning("interrupt received; writing a final checkpoint")

    old = signal.signal(signal.SIGINT, on_sigint)
    started = time.perf_counter()
    try:
        res = training.train(spec, tcfg, stream, val_triplets=val,
                             diagnostic_path=out / "diverged.sdcd", should_stop=lambda: stop["flag"])
    except training.TrainingDiverged as exc:
        log.error("%s; diagnostic checkpoint written to %s", exc, out / "diverged.sdcd")
        return EXIT_COMPUTE
    finally:
        signal.signal(signal.SIGINT, old)
    training.save_checkpoint(out / "checkpoint.sdcd", res.checkpoint)
    training.write_log_csv(out / "train_log.csv", res.log)
    with open(out / "loss_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("iter,loss\n")
        fh.writelines(f"{i},{v:.9g}\n" for i, v in enumerate(res.losses))
    elapsed = time.perf_counter() - started
    last = res.log[-1]
    print(f"iterations: {res.checkpoint.iteration}")
    print(f"tau: {tcfg.tau} margin: {tcfg.margin}")
    print(f"val_accuracy: {last.val_accuracy:.4f}")
    print(f"train_seconds: {elapsed:.1f}")
    print(f"checkpoint: {out / 'checkpoint.sdcd'}")
    if stop["flag"]:
        print("interrupted: checkpoint holds the iterations completed so far")
    return EXIT_OK


def _descriptor_from_args(args, cfg: Config):
    """(evaluation.Descriptor, network spec or None, params or None)."""
    kind = args.descriptor or cfg.match.descriptor
    if kind == "census":
        return evaluation.census_patch_descriptor(), None, None
    if kind == "raw":
        return evaluation.raw_descriptor(cfg.match.raw_size), None, None
    if kind == "constant":
        return evaluation.constant_descriptor(), None, None
    if kind != "network":
        raise UsageError(f"unknown descriptor {kind!r}; choose network, census, raw or constant")
    if args.checkpoint:
        ckpt, spec = training.load_checkpoint(args.checkpoint)
        return evaluation.network_descriptor(spec, ckpt.params), spec, ckpt.params
    spec = resolve_arch(args.arch or cfg.train.arch)
    params = arch.init(spec, substream_seed(args.seed, "init"))
    return evaluation.network_descriptor(spec, params, spec.name + "-init"), spec, params


def cmd_eval(args, cfg: Config) -> int:
    desc, spec, params = _descriptor_from_args(args, cfg)
    ps = patch_size_for(cfg, spec if spec is not None else resolve_arch(cfg.train.arch))
    entries = data.read_manifest(args.manifest)
    if cfg.eval.split == "val":
        _, chosen = split_entries(entries, cfg.data.val_fraction)
        chosen = chosen or entries
    elif cfg.eval.split == "all":
        chosen = entries
    else:
        raise UsageError("[eval] split must be val or all")
    radii = cfg.eval.radius_list()
    out = ensure_dir(args.out)
    dump_config(cfg, out / "effective_config.ini", {"command": "eval", "seed": args.seed})
    trips = fixed_triplets(chosen, cfg.eval.triplets, ps, substream(args.seed, "eval"))
    d_pos, d_neg = evaluation.triplet_distances(desc, trips)
    acc = evaluation.accuracy_from_distances(d_pos, d_neg)
    roc = evaluation.roc_curve(d_pos, d_neg)
    header = {"descriptor": desc.name, "distance": desc.distance, "radii": "/".join(f"{r:g}" for r in radii),
              "exclusion": cfg.eval.exclusion, "seed": args.seed}
    evaluation.write_curves_csv(out / "roc.csv", [roc], header)

    curves = []
    for k, e in enumerate(chosen):
        pair = data.load_pair(e)
        if spec is not None:
            a, b = pair.normalized()
            fa = matching.extract_features(spec, params, a)
            fb = matching.extract_features(spec, params, b)
            dist = "l2"
        elif desc.name == "census":
            fa, fb = matching.census_descriptor(pair.img1), matching.census_descriptor(pair.img2)
            dist = "hamming"
        elif desc.name == "raw":
            fa = matching.raw_patch_descriptor(pair.normalized()[0], cfg.match.raw_size)
            fb = matching.raw_patch_descriptor(pair.normalized()[1], cfg.match.raw_size)
            dist = "l2"
        else:
            fa = fb = np.zeros((1,) + pair.gt.shape, dtype=np.float32)
            dist = "l2"
        curves.append(evaluation.robustness_curve(fa, fb, pair.gt, radii, cfg.eval.exclusion,
                                                  cfg.eval.max_pixels, substream_seed(args.seed, f"eval{k}"),
                                                  dist))
    mean_curve = evaluation.EvalCurve(evaluation.ROBUSTNESS,
                                      list(zip(radii, np.mean([c.y for c in curves], axis=0).tolist())),
                                      float(np.mean([c.summary for c in curves])))
    evaluation.write_curves_csv(out / "robustness.csv", [mean_curve], header)
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("metric,region,value\n")
        fh.write(f"triplet_accuracy,{cfg.eval.split},{acc:.6f}\n")
        fh.write(f"roc_auc,{cfg.eval.split},{roc.summary:.6f}\n")
        fh.write(f"robustness@{radii[-1]:g},{cfg.eval.split},{mean_curve.summary:.6f}\n")
    print(f"descriptor: {desc.name}")
    print(f"triplets: {len(trips)}")
    print(f"triplet_accuracy: {acc:.4f}")
    print(f"roc_auc: {roc.summary:.4f}")
    print(f"robustness@{radii[-1]:g}: {mean_curve.summary:.4f}")
    return EXIT_OK


def _dense(kind, spec, params, img, cfg: Config):
    if kind == "network":
        return matching.extract_features(spec, params, data.normalize_image(img)), "l2"
    if kind == "census":
        return matching.census_descriptor(img), "hamming"
    if kind == "raw":
        return matching.raw_patch_descriptor(data.normalize_image(img), cfg.match.raw_size), "l2"
    raise UsageError(f"unknown descriptor {kind!r}; choose network, census or raw")


def cmd_match(args, cfg: Config) -> int:
    m = cfg.match
    kind = args.descriptor or m.descriptor
    spec = params = None
    if kind == "network":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for the network descriptor")
        ckpt, spec = training.load_checkpoint(args.checkpoint)
        params = ckpt.params
    img1, img2 = data.read_ppm(args.img1), data.read_ppm(args.img2)
    if img1.shape != img2.shape:
        raise UsageError("the two images differ in size")
    f1, dist = _dense(kind, spec, params, img1, cfg)
    f2, _ = _dense(kind, spec, params, img2, cfg)
    dist = m.distance or dist
    if args.mode == "stereo":
        res = matching.stereo_wta(f1, f2, m.max_disp, dist, "left", m.refine)
        if m.consistency:
            back = matching.stereo_wta(f1, f2, m.max_disp, dist, "right", m.refine)
            res = matching.consistency_filter(res, back, m.thresh)
    else:
        res = matching.flow_wta(f1, f2, m.radius, dist)
        if m.consistency:
            back = matching.flow_wta(f2, f1, m.radius, dist)
            res = matching.consistency_filter(res, back, m.thresh)
    out = Path(args.out)
    ensure_dir(out.parent)
    written = matching.write_match(out, res)
    rows = [("density", "all", res.density())]
    if args.gt:
        gt = data.read_ground_truth(args.gt)
        rows = matching.match_metrics(res, gt)
    matching.write_metrics_csv(out.with_name(out.name + "_metrics.csv"), rows)
    dump_config(cfg, out.with_name(out.name + "_config.ini"), {"command": "match", "seed": args.seed})
    print("metric,region,value")
    for r in rows:
        print(f"{r[0]},{r[1]},{r[2]:.6g}")
    log.info("wrote %s", ", ".join(map(str, written)))
    return EXIT_OK


def parse_size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size extents must be positive")
    return h, w


def bench_throughput(spec, size, reps: int, seed: int = 0) -> list:
    """Wall-clock dense extraction rates in Mpix/s, one per repetition."""
    params = arch.init(spec, seed)
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(3,) + tuple(size)).astype(np.float32)
    rates = []
    for _ in range(reps):
        t = time.perf_counter()
        matching.extract_features(spec, params, img)
        dt = time.perf_counter() - t
        rates.append(size[0] * size[1] / dt / 1e6)
    return rates


def cmd_bench(args, cfg: Config) -> int:
    spec = resolve_arch(args.arch)
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    rates = bench_throughput(spec, args.size, args.reps, substream_seed(args.seed, "init"))
    rows = [("arch", "height", "width", "rep", "mpix_per_s")]
    rows += [(spec.name, args.size[0], args.size[1], i, f"{r:.6g}") for i, r in enumerate(rates)]
    if args.out:
        ensure_dir(Path(args.out).parent)
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(rows)
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdcnet", description="Stacked dilated convolution descriptors: train, evaluate, match.")
    p.add_argument("--config", help="INI file with [train], [data], [match] and [eval] sections")
    p.add_argument("--seed", type=int, default=42, help="global seed (default 42)")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads for convolutions")
    p.add_argument("--deterministic", action="store_true", help="serial, bit-reproducible execution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("info", help="receptive field, parameter count and layer table")
    s.add_argument("arch")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("gen-data", help="write synthetic scenes and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sample", help="sample training triplets into an .npz file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--arch")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="train a descriptor network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--arch")
    s.add_argument("--iters", type=int)
    s.add_argument("--batch-size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="triplet accuracy, ROC and robustness curves")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="trained network (omit for a seed-initialised one)")
    s.add_argument("--arch", help="architecture of the untrained network")
    s.add_argument("--descriptor", help="network, census, raw or constant")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("match", help="dense WTA matching of an image pair")
    s.add_argument("--img1", required=True)
    s.add_argument("--img2", required=True)
    s.add_argument("--mode", choices=["stereo", "flow"], required=True)
    s.add_argument("--out", required=True, help="output path prefix")
    s.add_argument("--checkpoint")
    s.add_argument("--descriptor", help="network, census or raw")
    s.add_argument("--gt", help="ground truth (.pfm or .flo) for metrics")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("bench", help="dense extraction throughput")
    s.add_argument("--arch", default="sdc")
    s.add_argument("--size", type=parse_size, default=(128, 128))
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args.config)
        ctx = nx.deterministic() if args.deterministic else contextlib.nullcontext()
        if args.threads is not None and not args.deterministic:
            nx.set_threads(args.threads)
        with ctx:
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())

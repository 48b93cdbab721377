"""Network zoo: declarative specs, analytic calculators, forward and backward passes.

A network is a chain of layers, each one of

* :class:`SdcBlock` -- parallel dilated convolutions over the same input whose
  outputs are stacked along the channel axis (optionally with one kernel
  shared by all branches),
* :class:`PlainConv` -- a single (possibly dilated) convolution,
* :class:`SparseConv` -- a single large convolution restricted to the union of
  the tap grids of several dilated kernels.

Every layer is followed by the activation, and the final feature vector of
each pixel is L-infinity normalized.  All convolutions run at stride 1 with
zero Same padding, so the output has the input's resolution.

``forward(..., mode="valid")`` is the cropped evaluation used in training: each
layer only computes the region that later layers still need, so an RF-sized
patch collapses to its single center feature.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import NonFiniteError

ELU = "elu"
RELU = "relu"
RELU_LINEAR_LAST = "relu-linear-last"
ACTIVATIONS = (ELU, RELU, RELU_LINEAR_LAST)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdcBlock:
    branches: tuple          # ((k, d), ...)
    branch_out_channels: int
    share_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple((int(k), int(d)) for k, d in self.branches))
        if not self.branches:
            raise ValueError("an SDC block needs at least one branch")
        dil = [d for _, d in self.branches]
        if any(b <= a for a, b in zip(dil, dil[1:])):
            raise ValueError(f"branch dilations must be strictly increasing, got {dil}")
        if self.share_weights and len({k for k, _ in self.branches}) != 1:
            raise ValueError("weight sharing requires all branches to have the same kernel size")
        if any(k % 2 == 0 for k, _ in self.branches):
            raise ValueError("kernel sizes must be odd")

    @property
    def out_channels(self) -> int:
        return len(self.branches) * self.branch_out_channels

    @property
    def extent(self) -> int:
        # growth of the receptive field: the widest branch dominates
        return max(d * (k - 1) for k, d in self.branches)


@dataclass(frozen=True)
class PlainConv:
    k: int
    out_channels: int
    stride: int = 1
    dilation: int = 1

    @property
    def extent(self) -> int:
        return self.dilation * (self.k - 1)


@dataclass(frozen=True)
class SparseConv:
    """Single k x k kernel active on the union of ``branch_k`` grids at ``dilations``."""
    k: int
    out_channels: int
    branch_k: int
    dilations: tuple

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    @property
    def mask(self) -> nx.SparseMask:
        return merged_sparse_mask(self.k, self.branch_k, self.dilations)

    @property
    def extent(self) -> int:
        return self.k - 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    activation: str = ELU
    final_normalization: bool = True
    input_channels: int = 3
    elu_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        for layer in self.layers:
            if isinstance(layer, PlainConv) and layer.stride != 1:
                raise ValueError("the zoo is stride-free; strided layers are not supported in networks")

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def in_channels(self, index: int) -> int:
        return self.input_channels if index == 0 else self.layers[index - 1].out_channels

    def with_activation(self, activation: str) -> "NetworkSpec":
        return NetworkSpec(self.name, self.layers, activation, self.final_normalization,
                           self.input_channels, self.elu_alpha)

    def describe(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, SdcBlock):
                layers.append({"type": "sdc", "branches": [list(b) for b in layer.branches],
                               "branch_out": layer.branch_out_channels, "shared": layer.share_weights})
            elif isinstance(layer, PlainConv):
                layers.append({"type": "conv", "k": layer.k, "out": layer.out_channels,
                               "stride": layer.stride, "dilation": layer.dilation})
            else:
                layers.append({"type": "sparse", "k": layer.k, "out": layer.out_channels,
                               "branch_k": layer.branch_k, "dilations": list(layer.dilations)})
        return {"name": self.name, "layers": layers, "activation": self.activation,
                "final_normalization": self.final_normalization,
                "input_channels": self.input_channels, "elu_alpha": self.elu_alpha}


def spec_hash(spec: NetworkSpec) -> int:
    """Stable 64-bit fingerprint of an architecture."""
    blob = json.dumps(spec.describe(), sort_keys=True).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_SDC_DILATIONS = (1, 2, 3, 4)
_SDC_BRANCH_WIDTHS = (16, 16, 32, 64, 32)
_TINY_BRANCH_WIDTHS = (32, 32, 64, 24)


def _sdc():
    return NetworkSpec("sdc", [SdcBlock([(5, d) for d in _SDC_DILATIONS], w) for w in _SDC_BRANCH_WIDTHS])


def _tiny():
    return NetworkSpec("tiny", [SdcBlock([(3, d) for d in (1, 2, 3)], w, share_weights=True)
                                for w in _TINY_BRANCH_WIDTHS])


def _dilnet():
    layers = [(64, 1), (64, 2), (128, 3), (128, 4), (128, 3), (256, 2), (128, 1)]
    return NetworkSpec("dilnet", [PlainConv(7, n, 1, d) for n, d in layers])


def _largenet():
    return NetworkSpec("largenet", [PlainConv(17, n) for n in (64, 64, 128, 256, 128)])


def _fake(name, widths):
    return NetworkSpec(name, [SparseConv(17, n, 5, _SDC_DILATIONS) for n in widths])


_REGISTRY = {
    "sdc": _sdc,
    "tiny": _tiny,
    "dilnet": _dilnet,
    "largenet": _largenet,
    "fake-big": lambda: _fake("fake-big", (64, 64, 128, 256, 128)),
    "fake-small": lambda: _fake("fake-small", (16, 16, 32, 64, 32)),
}
ARCH_NAMES = tuple(_REGISTRY)


def _canonical(name: str) -> str:
    return name.strip().lower().replace("_", "").replace("-", "")


def registry(name: str) -> NetworkSpec:
    """Look up an architecture of the zoo by name (``sdc``, ``tiny``, ``dilnet``, ...)."""
    for key, make in _REGISTRY.items():
        if _canonical(key) == _canonical(name):
            return make()
    raise ValueError(f"unknown architecture {name!r}; known: {', '.join(ARCH_NAMES)}")


# ---------------------------------------------------------------------------
# Calculators
# ---------------------------------------------------------------------------

def receptive_field(spec: NetworkSpec) -> int:
    return 1 + sum(layer.extent for layer in spec.layers)


def _layer_weight_count(layer, c_in):
    if isinstance(layer, SdcBlock):
        kernels = layer.branches[:1] if layer.share_weights else layer.branches
        return sum(k * k * c_in * layer.branch_out_channels for k, _ in kernels)
    if isinstance(layer, PlainConv):
        return layer.k * layer.k * c_in * layer.out_channels
    return layer.mask.nonzero_count * c_in * layer.out_channels


def _layer_bias_count(layer):
    if isinstance(layer, SdcBlock) and layer.share_weights:
        return layer.branch_out_channels
    return layer.out_channels


def weight_count(spec: NetworkSpec) -> int:
    return sum(_layer_weight_count(l, spec.in_channels(i)) for i, l in enumerate(spec.layers))


def bias_count(spec: NetworkSpec) -> int:
    return sum(_layer_bias_count(l) for l in spec.layers)


def param_count(spec: NetworkSpec) -> int:
    """Trainable scalars: weights (shared kernels once, sparse kernels at active cells) plus biases."""
    return weight_count(spec) + bias_count(spec)


def layer_table(spec: NetworkSpec) -> list:
    rows, rf = [], 1
    for i, layer in enumerate(spec.layers):
        rf += layer.extent
        if isinstance(layer, SdcBlock):
            kind = "sdc-shared" if layer.share_weights else "sdc"
            shape = " ".join(f"{k}x{k}@d{d}" for k, d in layer.branches)
        elif isinstance(layer, PlainConv):
            kind, shape = "conv", f"{layer.k}x{layer.k}@d{layer.dilation}"
        else:
            kind = "sparse"
            shape = f"{layer.k}x{layer.k} ({layer.mask.nonzero_count} taps)"
        rows.append({"layer": i, "type": kind, "kernels": shape, "in": spec.in_channels(i),
                     "out": layer.out_channels,
                     "weights": _layer_weight_count(layer, spec.in_channels(i)),
                     "biases": _layer_bias_count(layer), "rf": rf})
    return rows


def merged_sparse_mask(kernel_size: int, branch_k: int, dilations) -> nx.SparseMask:
    """Union of the tap grids of ``branch_k`` kernels at each dilation, on a ``kernel_size`` grid."""
    dilations = tuple(dilations)
    if not dilations or branch_k % 2 != 1:
        raise ValueError("need at least one dilation and an odd branch kernel size")
    if kernel_size != max(dilations) * (branch_k - 1) + 1:
        raise ValueError(f"kernel size {kernel_size} does not match the widest branch "
                         f"({branch_k}x{branch_k} at dilation {max(dilations)})")
    mask = np.zeros((kernel_size, kernel_size), dtype=bool)
    c, h = kernel_size // 2, branch_k // 2
    offsets = np.arange(branch_k) - h
    for d in dilations:
        idx = c + d * offsets
        mask[np.ix_(idx, idx)] = True
    return nx.SparseMask(mask)


def scatter_branch_kernels(kernels, dilations, kernel_size: int) -> np.ndarray:
    """Scatter per-branch kernels (out, in, k, k) into one sparse kernel, summing where taps overlap."""
    kernels = list(kernels)
    o, c, k, _ = kernels[0].shape
    big = np.zeros((o, c, kernel_size, kernel_size), dtype=kernels[0].dtype)
    center, h = kernel_size // 2, k // 2
    for w, d in zip(kernels, dilations):
        idx = center + d * (np.arange(k) - h)
        for a, yi in enumerate(idx):
            for b, xi in enumerate(idx):
                big[:, :, yi, xi] += w[:, :, a, b]
    return big


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _kernel_slots(spec: NetworkSpec):
    """Yield (name prefix, layer index, (out, in, k, k), fan_in, sparse mask or None)."""
    for i, layer in enumerate(spec.layers):
        c_in = spec.in_channels(i)
        if isinstance(layer, SdcBlock):
            n = layer.branch_out_channels
            if layer.share_weights:
                k = layer.branches[0][0]
                yield f"L{i}", i, (n, c_in, k, k), k * k * c_in, None
            else:
                for b, (k, _) in enumerate(layer.branches):
                    yield f"L{i}.b{b}", i, (n, c_in, k, k), k * k * c_in, None
        elif isinstance(layer, PlainConv):
            k = layer.k
            yield f"L{i}", i, (layer.out_channels, c_in, k, k), k * k * c_in, None
        else:
            m = layer.mask
            yield f"L{i}", i, (layer.out_channels, c_in, layer.k, layer.k), m.nonzero_count * c_in, m


def init(spec: NetworkSpec, seed: int, dtype=np.float32) -> dict:
    """He-style initialisation: weights ~ N(0, 2 / fan_in), biases zero.  Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, _, shape, fan_in, mask in _kernel_slots(spec):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if mask is not None:
            w = w * mask.mask
        params[prefix + ".weight"] = w.astype(dtype)
        params[prefix + ".bias"] = np.zeros(shape[0], dtype=dtype)
    return params


def check_params(spec: NetworkSpec, params: dict):
    expected = {}
    for prefix, _, shape, _, _ in _kernel_slots(spec):
        expected[prefix + ".weight"] = shape
        expected[prefix + ".bias"] = shape[:1]
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameters do not match {spec.name}: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        a = params[name]
        if a.shape != shape:
            raise ValueError(f"{name}: shape {a.shape}, expected {shape}")
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{name}: non-finite parameter values")


def param_fingerprint(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Intermediates of one forward pass, in the internal (H, W, N, C) layout."""
    spec_hash: int
    mode: str
    squeeze: bool
    param_refs: dict
    inputs: list = field(default_factory=list)       # layer inputs
    pre_act: list = field(default_factory=list)      # layer outputs before activation
    cols: list = field(default_factory=list)         # gathered conv columns per layer/branch
    pre_norm: np.ndarray | None = None


def _branch_convs(params, i, layer, mode):
    """Yield (branch index, param prefix, ConvParams, mask, crop) for the convolutions of layer i."""
    if isinstance(layer, SdcBlock):
        for b, (k, d) in enumerate(layer.branches):
            prefix = f"L{i}" if layer.share_weights else f"L{i}.b{b}"
            crop = (layer.extent - d * (k - 1)) // 2 if mode == nx.VALID else 0
            p = nx.ConvParams(params[prefix + ".weight"], params[prefix + ".bias"],
                              dilation=d, padding=mode)
            yield b, prefix, p, None, crop
    elif isinstance(layer, PlainConv):
        p = nx.ConvParams(params[f"L{i}.weight"], params[f"L{i}.bias"],
                          dilation=layer.dilation, padding=mode)
        yield 0, f"L{i}", p, None, 0
    else:
        p = nx.ConvParams(params[f"L{i}.weight"], params[f"L{i}.bias"], padding=mode)
        yield 0, f"L{i}", p, layer.mask, 0


def _crop(xh, c):
    return xh[c:xh.shape[0] - c, c:xh.shape[1] - c] if c else xh


def _activate(spec, z, last):
    if spec.activation == ELU:
        return nx.elu(z, spec.elu_alpha)
    if spec.activation == RELU_LINEAR_LAST and last:
        return z
    return nx.relu(z)


def _activate_backward(spec, z, g, last, out=None):
    if spec.activation == ELU:
        return nx.elu_backward(z, g, spec.elu_alpha, out=out)
    if spec.activation == RELU_LINEAR_LAST and last:
        return g
    return nx.relu_backward(z, g)


def forward(spec: NetworkSpec, params: dict, x: np.ndarray, mode: str = nx.SAME,
            keep_cols: bool = True):
    """Run the network on a (C, H, W) or (N, C, H, W) input.

    Returns ``(features, cache)`` with features in the input's layout.  In
    ``same`` mode the output has the input's spatial extents; in ``valid`` mode
    each dimension shrinks by ``RF - 1``.  ``keep_cols=False`` drops the
    gathered convolution inputs (inference on large images); backward then
    gathers them again.
    """
    check_params(spec, params)
    if x.shape[-3] != spec.input_channels:
        raise ValueError(f"{spec.name} expects {spec.input_channels} input channels, got {x.shape[-3]}")
    if mode == nx.VALID and min(x.shape[-2:]) < receptive_field(spec):
        raise ValueError(f"valid-mode input must be at least {receptive_field(spec)} pixels wide")
    cache = ForwardCache(spec_hash(spec), mode, x.ndim == 3, dict(params))
    h = nx.to_hwnc(x)
    n_layers = len(spec.layers)
    for i, layer in enumerate(spec.layers):
        parts, layer_cols = [], []
        for _, _, p, mask, crop in _branch_convs(params, i, layer, mode):
            out, cols = nx.conv_hwnc(_crop(h, crop), p, mask)
            parts.append(out)
            layer_cols.append(cols if keep_cols else None)
        z = nx.concat_channels(parts, axis=-1)
        cache.inputs.append(h)
        cache.pre_act.append(z)
        cache.cols.append(layer_cols)
        h = _activate(spec, z, i == n_layers - 1)
    if spec.final_normalization:
        cache.pre_norm = h
        h = nx.linf_normalize(h, axis=-1)
    if not np.isfinite(h).all():
        raise NonFiniteError(f"{spec.name}: non-finite features")
    return nx.from_hwnc(h, cache.squeeze), cache


def backward(spec: NetworkSpec, params: dict, cache: ForwardCache, grad_features: np.ndarray,
             input_grad: bool = False):
    """Parameter gradients for the features produced by :func:`forward` with ``cache``.

    Shared kernels accumulate the gradients of all their branches.  With
    ``input_grad=True`` returns ``(grads, grad_input)``.
    """
    if cache.spec_hash != spec_hash(spec):
        raise ValueError("cache was produced by a different architecture")
    if set(cache.param_refs) != set(params) or any(cache.param_refs[k] is not params[k] for k in params):
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = nx.to_hwnc(grad_features)
    last = cache.pre_norm if cache.pre_norm is not None else None
    expected = (cache.pre_act[-1].shape[:3] + (spec.out_channels,))
    if g.shape != expected or grad_features.ndim != (3 if cache.squeeze else 4):
        raise ValueError(f"gradient shape {grad_features.shape} does not match the cached forward pass")
    if last is not None:
        g = nx.linf_normalize_backward(last, g, axis=-1)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    n_layers = len(spec.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = spec.layers[i]
        z, h = cache.pre_act[i], cache.inputs[i]
        a = cache.inputs[i + 1] if i + 1 < n_layers else cache.pre_norm
        gz = _activate_backward(spec, z, g, i == n_layers - 1, out=a)
        need_gx = i > 0 or input_grad
        if isinstance(layer, SdcBlock):
            sizes = [layer.branch_out_channels] * len(layer.branches)
        else:
            sizes = [layer.out_channels]
        pieces = nx.split_channels_backward(gz, sizes, axis=-1)
        gh = np.zeros_like(h) if need_gx else None
        for (b, prefix, p, mask, crop), gpart in zip(_branch_convs(params, i, layer, cache.mode), pieces):
            gx, gw, gb = nx.conv_hwnc_backward(_crop(h, crop), p, gpart, mask,
                                               need_input_grad=need_gx, cols=cache.cols[i][b])
            grads[prefix + ".weight"] += gw
            grads[prefix + ".bias"] += gb
            if need_gx:
                _crop(gh, crop)[...] += gx
        g = gh
    if input_grad:
        return grads, nx.from_hwnc(g, cache.squeeze)
    return grads

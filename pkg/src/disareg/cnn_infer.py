"""Forward-only executor for the descriptor CNN.

The network is a plain feed-forward stack over 3D grids: zero-padded stride-1
convolutions, LeakyReLU, BlurPool downsampling (separable [1,2,1]/4 blur then
take every second sample), residual skips, and a terminal per-cell norm clip.
Two BlurPools give the stride-4 feature grid. Heavy lifting is 27 shifted
GEMMs per 3x3x3 convolution; a naive loop oracle lives in the test suite.

Weights travel in the "DISAW1" container: 8-byte magic, u32 header length,
UTF-8 JSON layer list, then per-conv f32 kernels (out, in, z, y, x) + biases.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .features import FeatureMap
from .volume import Volume

DISAW1_MAGIC = b"DISAW1\x00\x00"

CONV = "conv3d"
LEAKY = "leaky_relu"
BLURPOOL = "blurpool"
RES_BEGIN = "residual_begin"
RES_END = "residual_end"
NORM_CLIP = "norm_clip"

REFERENCE_PARAM_COUNT = 90752  # reported figure the reference layout must hit ±20%


@dataclass(frozen=True)
class NetworkSpec:
    """Validated ordered layer list (tuples of plain dicts, JSON-shaped)."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(dict(layer) for layer in self.layers)
        if not layers:
            raise DataError("empty layer list")
        n_blur = sum(1 for l in layers if l["type"] == BLURPOOL)
        if n_blur != 2:
            raise DataError(f"striding factor must be 4: expected 2 blurpool layers, got {n_blur}")
        if layers[-1]["type"] != NORM_CLIP:
            raise DataError("terminal layer must be norm_clip")
        if sum(1 for l in layers if l["type"] == NORM_CLIP) != 1:
            raise DataError("exactly one norm_clip allowed")
        ch = 1
        open_res = None
        for i, layer in enumerate(layers):
            t = layer["type"]
            if t == CONV:
                if layer["kernel"] not in (1, 3):
                    raise DataError(f"unsupported kernel size {layer['kernel']}")
                if layer["in_ch"] != ch:
                    raise DataError(f"layer {i}: in_ch {layer['in_ch']} != incoming {ch}")
                ch = layer["out_ch"]
            elif t == LEAKY:
                layer.setdefault("slope", 0.01)
            elif t == RES_BEGIN:
                if open_res is not None:
                    raise DataError("nested residual blocks are not supported")
                open_res = ch
            elif t == RES_END:
                if open_res is None:
                    raise DataError("residual_end without residual_begin")
                if ch != open_res:
                    raise DataError(f"residual channel mismatch: {open_res} -> {ch}")
                open_res = None
            elif t == BLURPOOL:
                if open_res is not None:
                    raise DataError("blurpool inside a residual block")
            elif t == NORM_CLIP:
                pass
            else:
                raise DataError(f"unknown layer type {t!r}")
        if open_res is not None:
            raise DataError("unclosed residual block")
        if ch != 16:
            raise DataError(f"final channel count must be 16, got {ch}")
        object.__setattr__(self, "layers", layers)

    def conv_layers(self) -> list[dict]:
        return [l for l in self.layers if l["type"] == CONV]

    @property
    def n_parameterized_layers(self) -> int:
        return len(self.conv_layers())

    @property
    def n_parameters(self) -> int:
        return sum(l["out_ch"] * (l["in_ch"] * l["kernel"] ** 3 + 1)
                   for l in self.conv_layers())

    def to_json(self) -> str:
        return json.dumps(list(self.layers))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            layers = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed architecture header: {e}") from e
        return cls(tuple(layers))


def _conv(in_ch, out_ch, kernel=3):
    return {"type": CONV, "in_ch": in_ch, "out_ch": out_ch, "kernel": kernel}


def _resblock(ch):
    return [{"type": RES_BEGIN}, _conv(ch, ch), {"type": LEAKY, "slope": 0.01},
            _conv(ch, ch), {"type": RES_END}, {"type": LEAKY, "slope": 0.01}]


def reference_spec() -> NetworkSpec:
    """The default descriptor architecture: 10 conv layers, 94,328 parameters."""
    layers = [
        _conv(1, 16), {"type": LEAKY, "slope": 0.01},
        _conv(16, 16), {"type": LEAKY, "slope": 0.01},
        {"type": BLURPOOL},
        *_resblock(16),
        _conv(16, 24), {"type": LEAKY, "slope": 0.01},
        {"type": BLURPOOL},
        *_resblock(24),
        *_resblock(24),
        _conv(24, 16, kernel=1),
        {"type": NORM_CLIP},
    ]
    return NetworkSpec(tuple(layers))


@dataclass(frozen=True)
class Network:
    """Spec plus one (kernel, bias) f32 pair per conv layer."""

    spec: NetworkSpec
    weights: tuple

    def __post_init__(self):
        convs = self.spec.conv_layers()
        if len(self.weights) != len(convs):
            raise DataError(f"{len(self.weights)} weight pairs for {len(convs)} conv layers")
        frozen = []
        for i, ((kernel, bias), layer) in enumerate(zip(self.weights, convs)):
            kernel = np.ascontiguousarray(kernel, dtype=np.float32)
            bias = np.ascontiguousarray(bias, dtype=np.float32)
            k = layer["kernel"]
            want = (layer["out_ch"], layer["in_ch"], k, k, k)
            if kernel.shape != want:
                raise DataError(f"conv {i}: kernel shape {kernel.shape} != {want}")
            if bias.shape != (layer["out_ch"],):
                raise DataError(f"conv {i}: bias shape {bias.shape} != ({layer['out_ch']},)")
            kernel.flags.writeable = False
            bias.flags.writeable = False
            frozen.append((kernel, bias))
        object.__setattr__(self, "weights", tuple(frozen))

    @property
    def n_parameters(self) -> int:
        return sum(k.size + b.size for k, b in self.weights)

    def parameter_budget_ok(self, reference=REFERENCE_PARAM_COUNT, tol=0.2) -> bool:
        return abs(self.n_parameters - reference) <= tol * reference


def random_network(seed: int = 0, spec: NetworkSpec | None = None) -> Network:
    """He-scaled random weights; useful as a frozen random descriptor extractor."""
    spec = spec or reference_spec()
    rng = np.random.default_rng(seed)
    weights = []
    for layer in spec.conv_layers():
        k = layer["kernel"]
        fan_in = layer["in_ch"] * k ** 3
        kernel = rng.standard_normal((layer["out_ch"], layer["in_ch"], k, k, k))
        kernel = (kernel * np.sqrt(2.0 / fan_in)).astype(np.float32)
        bias = np.zeros(layer["out_ch"], dtype=np.float32)
        weights.append((kernel, bias))
    return Network(spec, tuple(weights))


# ---- layer math --------------------------------------------------------------


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 cross-correlation of (C, Z, Y, X) with
    (O, C, kz, ky, kx); float32 accumulation via shifted GEMMs."""
    out_ch, in_ch, kz, ky, kx = kernel.shape
    if x.shape[0] != in_ch:
        raise DataError(f"conv input has {x.shape[0]} channels, kernel wants {in_ch}")
    _, Z, Y, X = x.shape
    pz, py, px = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (pz, pz), (py, py), (px, px)))
    n = Z * Y * X
    acc = np.zeros((out_ch, n), dtype=np.float32)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                w = kernel[:, :, dz, dy, dx]
                sub = xp[:, dz:dz + Z, dy:dy + Y, dx:dx + X].reshape(in_ch, n)
                acc += w @ sub
    return (acc + bias[:, None]).reshape(out_ch, Z, Y, X)


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, x, np.float32(slope) * x)


def _blur_decimate_axis(x: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 1)
    xp = np.pad(x, pad)
    n = x.shape[axis]
    sl = lambda a, b: tuple(slice(None) if i != axis else slice(a, b)
                            for i in range(x.ndim))
    blurred = 0.25 * xp[sl(0, n)] + 0.5 * xp[sl(1, n + 1)] + 0.25 * xp[sl(2, n + 2)]
    dec = tuple(slice(None) if i != axis else slice(0, None, 2) for i in range(x.ndim))
    return np.ascontiguousarray(blurred[dec], dtype=np.float32)


def blurpool(x: np.ndarray) -> np.ndarray:
    """[1,2,1]/4 blur per spatial axis (zero padded), subsample every 2nd
    sample from index 0. Spatial dims become ceil(d/2)."""
    for axis in (1, 2, 3):
        x = _blur_decimate_axis(x, axis)
    return x


def norm_clip(x: np.ndarray) -> np.ndarray:
    """Per-cell descriptor rescale v / max(1, ||v||)."""
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=0, keepdims=True))
    return (x / np.maximum(norms, 1.0)).astype(np.float32)


def run_layers(net: Network, x: np.ndarray) -> np.ndarray:
    """Apply the layer chain to a (C, Z, Y, X) float32 tensor."""
    conv_idx = 0
    saved = None
    for layer in net.spec.layers:
        t = layer["type"]
        if t == CONV:
            kernel, bias = net.weights[conv_idx]
            conv_idx += 1
            x = conv3d(x, kernel, bias)
        elif t == LEAKY:
            x = leaky_relu(x, layer["slope"])
        elif t == BLURPOOL:
            x = blurpool(x)
        elif t == RES_BEGIN:
            saved = x
        elif t == RES_END:
            x = x + saved
            saved = None
        elif t == NORM_CLIP:
            x = norm_clip(x)
    return x


def infer(net: Network, v: Volume) -> FeatureMap:
    """One forward pass; returns the float feature map (stride 4, 16 channels).

    The caller normalizes the volume first; inference itself is agnostic.
    """
    if min(v.dims) < 16:
        raise DataError(f"inference needs dims >= 16 per axis, got {v.dims}")
    x = v.data.astype(np.float32)[None]
    out = run_layers(net, x)
    data = np.ascontiguousarray(np.moveaxis(out, 0, -1))
    return FeatureMap(data, stride=4, source_dims=v.dims, spacing=v.spacing,
                      origin=v.origin, direction=v.direction)


# ---- weight container --------------------------------------------------------


def save_weights(net: Network, path) -> None:
    header = net.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DISAW1_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for kernel, bias in net.weights:
            fh.write(kernel.astype("<f4").tobytes())
            fh.write(bias.astype("<f4").tobytes())


def load_weights(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != DISAW1_MAGIC:
        raise DataError("not a DISAW1 file (bad magic)")
    if len(blob) < 12:
        raise DataError("truncated file")
    hlen = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + hlen:
        raise DataError("truncated file")
    spec = NetworkSpec.from_json(blob[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    weights = []
    for layer in spec.conv_layers():
        k = layer["kernel"]
        nk = layer["out_ch"] * layer["in_ch"] * k ** 3
        nb = layer["out_ch"]
        need = offset + 4 * (nk + nb)
        if len(blob) < need:
            raise DataError("truncated file")
        kernel = np.frombuffer(blob[offset:offset + 4 * nk], dtype="<f4")
        kernel = kernel.reshape(layer["out_ch"], layer["in_ch"], k, k, k)
        bias = np.frombuffer(blob[offset + 4 * nk:need], dtype="<f4")
        offset = need
        weights.append((kernel.copy(), bias.copy()))
    return Network(spec, tuple(weights))

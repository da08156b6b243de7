"""Descriptor network architecture as a JSON-shaped layer list.

The list travels in the DISAW1 weights header, so the trainer and the
inference engine have to agree on it exactly: layer types, channel
chaining, two blurpools for the stride-4 grid, and a single terminal
norm clip producing 16 channels.
"""

from __future__ import annotations

from .errors import DataError

CONV = "conv3d"
LEAKY = "leaky_relu"
BLURPOOL = "blurpool"
RES_BEGIN = "residual_begin"
RES_END = "residual_end"
NORM_CLIP = "norm_clip"

OUT_CHANNELS = 16
STRIDE = 4


def conv(in_ch: int, out_ch: int, kernel: int = 3) -> dict:
    return {"type": CONV, "in_ch": in_ch, "out_ch": out_ch, "kernel": kernel}


def leaky(slope: float = 0.01) -> dict:
    return {"type": LEAKY, "slope": slope}


def _residual(ch: int) -> list:
    return [{"type": RES_BEGIN}, conv(ch, ch), leaky(),
            conv(ch, ch), {"type": RES_END}, leaky()]


def reference_layers() -> list[dict]:
    """The standard layout: ten conv layers, striding factor 4."""
    return [
        conv(1, 16), leaky(),
        conv(16, 16), leaky(),
        {"type": BLURPOOL},
        *_residual(16),
        conv(16, 24), leaky(),
        {"type": BLURPOOL},
        *_residual(24),
        *_residual(24),
        conv(24, 16, kernel=1),
        {"type": NORM_CLIP},
    ]


def validate_layers(layers) -> list[dict]:
    """Check the structural contract; returns a normalized copy."""
    out = [dict(l) for l in layers]
    if not out:
        raise DataError("empty layer list")
    ch = 1
    open_ch = None
    n_blur = 0
    for i, layer in enumerate(out):
        t = layer.get("type")
        if t == CONV:
            if layer["kernel"] not in (1, 3):
                raise DataError(f"layer {i}: kernel {layer['kernel']} unsupported")
            if layer["in_ch"] != ch:
                raise DataError(f"layer {i}: in_ch {layer['in_ch']} != incoming {ch}")
            ch = layer["out_ch"]
        elif t == LEAKY:
            layer.setdefault("slope", 0.01)
        elif t == BLURPOOL:
            if open_ch is not None:
                raise DataError(f"layer {i}: blurpool inside a residual block")
            n_blur += 1
        elif t == RES_BEGIN:
            if open_ch is not None:
                raise DataError(f"layer {i}: nested residual block")
            open_ch = ch
        elif t == RES_END:
            if open_ch is None:
                raise DataError(f"layer {i}: residual_end without begin")
            if ch != open_ch:
                raise DataError(f"layer {i}: residual spans {open_ch} -> {ch} channels")
            open_ch = None
        elif t == NORM_CLIP:
            if i != len(out) - 1:
                raise DataError("norm_clip must be the terminal layer")
        else:
            raise DataError(f"layer {i}: unknown type {t!r}")
    if open_ch is not None:
        raise DataError("unclosed residual block")
    if n_blur != 2:
        raise DataError(f"striding factor must be 4: expected 2 blurpools, found {n_blur}")
    if out[-1]["type"] != NORM_CLIP:
        raise DataError("missing terminal norm_clip")
    if ch != OUT_CHANNELS:
        raise DataError(f"final channel count {ch} != {OUT_CHANNELS}")
    return out


def param_count(layers) -> int:
    """Kernel plus bias elements over the conv layers."""
    return sum(l["out_ch"] * (l["in_ch"] * l["kernel"] ** 3 + 1)
               for l in layers if l["type"] == CONV)

"""Trainable twin of the inference engine's forward pass.

Same operations in the same order: zero-padded stride-1 convolutions,
LeakyReLU, a fixed [1,2,1]/4 blur with stride-2 decimation from index 0,
residual adds, and a terminal per-cell norm clip. Weights move through
the DISAW1 container, so either side can run a network the other built.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .arch import (BLURPOOL, CONV, LEAKY, NORM_CLIP, RES_BEGIN, RES_END,
                   STRIDE, reference_layers, validate_layers)
from .errors import DataError

DISAW1_MAGIC = b"DISAW1\x00\x00"


def _blur_kernel() -> torch.Tensor:
    b = torch.tensor([0.25, 0.5, 0.25])
    k = b[:, None, None] * b[None, :, None] * b[None, None, :]
    return k.reshape(1, 1, 3, 3, 3)


class DescriptorNet(nn.Module):
    """Walks a validated layer list; the convolutions hold all parameters.

    Input is (n, 1, z, y, x) float32, output (n, 16, ceil(z/4), ...) with
    every output cell's channel vector clipped to the unit ball.
    """

    def __init__(self, layers=None):
        super().__init__()
        self.layers = validate_layers(reference_layers() if layers is None
                                      else layers)
        self.convs = nn.ModuleList()
        for layer in self.layers:
            if layer["type"] == CONV:
                k = layer["kernel"]
                self.convs.append(nn.Conv3d(layer["in_ch"], layer["out_ch"],
                                            k, padding=k // 2))
        self.register_buffer("blur", _blur_kernel())
        self.reset_parameters()

    def reset_parameters(self):
        for c in self.convs:
            fan_in = c.in_channels * c.kernel_size[0] ** 3
            nn.init.normal_(c.weight, std=(2.0 / fan_in) ** 0.5)
            nn.init.zeros_(c.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ci = 0
        saved = None
        for layer in self.layers:
            t = layer["type"]
            if t == CONV:
                x = self.convs[ci](x)
                ci += 1
            elif t == LEAKY:
                x = F.leaky_relu(x, layer["slope"])
            elif t == BLURPOOL:
                ch = x.shape[1]
                w = self.blur.expand(ch, 1, 3, 3, 3).contiguous()
                x = F.conv3d(x, w, stride=2, padding=1, groups=ch)
            elif t == RES_BEGIN:
                saved = x
            elif t == RES_END:
                x = x + saved
                saved = None
            elif t == NORM_CLIP:
                n = torch.linalg.vector_norm(x, dim=1, keepdim=True)
                x = x / torch.clamp(n, min=1.0)
        return x


def build_model(layers=None, seed=None) -> DescriptorNet:
    """Fresh trainable network; a seed pins the random initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return DescriptorNet(layers)


def center_descriptor(feat: torch.Tensor, side: int) -> torch.Tensor:
    """Trilinear sample of a (n, c, z, y, x) descriptor grid at the source
    cube's center voxel, mirroring how registration reads the feature map.

    Cell k covers source coordinate (STRIDE-1)/2 + STRIDE*k, so the center
    of a side-15 cube sits at fractional cell 1.375 on every axis.
    """
    c = ((side - 1) / 2 - (STRIDE - 1) / 2) / STRIDE
    i = int(np.floor(c))
    f = c - i
    if i < 0 or i + 1 >= feat.shape[-1]:
        raise DataError(f"descriptor grid {tuple(feat.shape[2:])} too small "
                        f"for a side-{side} cube")
    w = torch.tensor([1.0 - f, f], dtype=feat.dtype, device=feat.device)
    g = feat[:, :, i:i + 2, i:i + 2, i:i + 2]
    g = (g * w[None, None, :, None, None]).sum(2)
    g = (g * w[None, None, :, None]).sum(2)
    g = (g * w[None, None, :]).sum(2)
    return g


def predict_pairs(model: DescriptorNet, patches_m: torch.Tensor,
                  patches_f: torch.Tensor) -> torch.Tensor:
    """Dot-product similarity prediction for two (n, s, s, s) patch batches."""
    side = patches_m.shape[-1]
    dm = center_descriptor(model(patches_m[:, None]), side)
    df = center_descriptor(model(patches_f[:, None]), side)
    return (dm * df).sum(1)


# ---- weight container --------------------------------------------------------


def export_weights(model: DescriptorNet, path) -> None:
    """Write the DISAW1 container: magic, JSON header, then per-conv f32
    kernel (out, in, z, y, x) and bias, little endian."""
    header = json.dumps(model.layers).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DISAW1_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in model.convs:
            fh.write(c.weight.detach().cpu().numpy().astype("<f4").tobytes())
            fh.write(c.bias.detach().cpu().numpy().astype("<f4").tobytes())


def import_weights(path) -> DescriptorNet:
    """Rebuild a network from a DISAW1 file; bit-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:8] != DISAW1_MAGIC:
        raise DataError("not a DISAW1 file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise DataError("truncated header")
    try:
        layers = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"bad architecture header: {e}") from e
    model = DescriptorNet(layers)
    offset = 12 + hlen
    with torch.no_grad():
        for c in model.convs:
            for tensor in (c.weight, c.bias):
                n = tensor.numel()
                if len(blob) < offset + 4 * n:
                    raise DataError("truncated weights")
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
                tensor.copy_(torch.from_numpy(arr.copy()).reshape(tensor.shape))
                offset += 4 * n
    if offset != len(blob):
        raise DataError("trailing bytes after the last bias")
    return model

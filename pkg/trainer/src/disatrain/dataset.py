"""DISAP1 dataset access.

A file holds a fixed-side patch-pair corpus: 8-byte magic, u32 record
count, u32 patch side, u8 gradient-side flag, then per record the moving
cube, the fixed cube, and the similarity target, all little-endian f32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

DISAP1_MAGIC = b"DISAP1\x00\x00"
_HEADER = "<8sIIB"


@dataclass(frozen=True)
class PatchPairRecord:
    """One training example: two cubes and their stored similarity."""

    patch_m: np.ndarray
    patch_f: np.ndarray
    target: float


@dataclass(frozen=True)
class PairDataset:
    """Stacked records of one or more DISAP1 files."""

    patches_m: np.ndarray  # (n, side, side, side) f32
    patches_f: np.ndarray
    targets: np.ndarray    # (n,) f32
    side: int

    def __len__(self):
        return int(self.targets.shape[0])

    def record(self, i: int) -> PatchPairRecord:
        return PatchPairRecord(self.patches_m[i], self.patches_f[i],
                               float(self.targets[i]))


def read_pairs(path):
    """One file -> (patches_m, patches_f, targets, side, gradient_side)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize(_HEADER)
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    magic, count, side, grad_side = struct.unpack_from(_HEADER, raw)
    if magic != DISAP1_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if count == 0:
        raise DataError(f"{path}: empty dataset")
    cube = (side, side, side)
    rec = np.dtype([("m", "<f4", cube), ("f", "<f4", cube), ("t", "<f4")])
    if len(raw) != head + count * rec.itemsize:
        raise DataError(f"{path}: payload is {len(raw) - head} bytes, "
                        f"expected {count * rec.itemsize}")
    recs = np.frombuffer(raw, rec, count, head)
    return (recs["m"].copy(), recs["f"].copy(),
            np.ascontiguousarray(recs["t"]), int(side), int(grad_side))


def load_dataset(paths) -> PairDataset:
    """Concatenate DISAP1 files (argument order) into one dataset."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    paths = list(paths)
    if not paths:
        raise DataError("no dataset files given")
    parts = [read_pairs(p) for p in paths]
    side = parts[0][3]
    if any(p[3] != side for p in parts):
        raise DataError("dataset files disagree on patch side")
    return PairDataset(np.concatenate([p[0] for p in parts]),
                       np.concatenate([p[1] for p in parts]),
                       np.concatenate([p[2] for p in parts]), side)


def split_dataset(ds: PairDataset, val_fraction: float, seed: int):
    """Deterministic shuffled split -> (train, val); val gets >= 1 record."""
    n = len(ds)
    if n < 2:
        raise DataError("need at least two records to split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    def take(ix):
        return PairDataset(ds.patches_m[ix], ds.patches_f[ix],
                           ds.targets[ix], ds.side)
    return take(order[n_val:]), take(order[:n_val])

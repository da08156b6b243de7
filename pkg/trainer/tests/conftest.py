import struct

import numpy as np
import pytest

DISAP1_MAGIC = b"DISAP1\x00\x00"


def write_disap1(path, patches_m, patches_f, targets, gradient_side=0):
    """Minimal DISAP1 writer for fabricated corpora."""
    side = patches_m.shape[-1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIIB", DISAP1_MAGIC, len(targets), side,
                             gradient_side))
        for m, f, t in zip(patches_m, patches_f, targets):
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())
            fh.write(struct.pack("<f", float(t)))


def random_pairs(n, side=15, seed=0):
    """Smooth-ish random cubes plus uniform targets."""
    rng = np.random.default_rng(seed)
    pm = rng.standard_normal((n, side, side, side)).astype(np.float32)
    pf = rng.standard_normal((n, side, side, side)).astype(np.float32)
    t = rng.uniform(0.0, 1.0, n).astype(np.float32)
    return pm, pf, t


@pytest.fixture
def disap1_writer():
    return write_disap1

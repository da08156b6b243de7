"""Numba inner loops for descriptor dot-product evaluation.

All accumulation is float64: the objective feeds finite-difference-validated
gradients, so f32 summation noise (~1e-7) would swamp the 1e-4 tolerance.
Kernels are sequential and allocation-free; callers precompute coordinates.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def dot_accumulate_f32(mdata, cx, cy, cz, inside, fdesc, w):
    """Weighted sum of <fixed descriptor, trilinear moving descriptor>.

    mdata  : (nz, ny, nx, C) f32 moving feature grid
    cx/cy/cz : (N,) f64 fractional moving-cell coordinates
    inside : (N,) u8, 0 entries are skipped entirely
    fdesc  : (N, C) f32 fixed descriptors
    w      : (N,) f64 sample weights
    returns (num, den) with num = sum w*dot, den = sum w over inside samples.
    """
    nz, ny, nx, nc = mdata.shape
    num = 0.0
    den = 0.0
    for i in range(cx.shape[0]):
        if inside[i] == 0:
            continue
        x0 = int(np.floor(cx[i]))
        y0 = int(np.floor(cy[i]))
        z0 = int(np.floor(cz[i]))
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if z0 < 0:
            z0 = 0
        fx = cx[i] - x0
        fy = cy[i] - y0
        fz = cz[i] - z0
        d000 = 0.0; d100 = 0.0; d010 = 0.0; d110 = 0.0
        d001 = 0.0; d101 = 0.0; d011 = 0.0; d111 = 0.0
        for c in range(nc):
            f = fdesc[i, c]
            d000 += f * mdata[z0, y0, x0, c]
            d100 += f * mdata[z0, y0, x0 + 1, c]
            d010 += f * mdata[z0, y0 + 1, x0, c]
            d110 += f * mdata[z0, y0 + 1, x0 + 1, c]
            d001 += f * mdata[z0 + 1, y0, x0, c]
            d101 += f * mdata[z0 + 1, y0, x0 + 1, c]
            d011 += f * mdata[z0 + 1, y0 + 1, x0, c]
            d111 += f * mdata[z0 + 1, y0 + 1, x0 + 1, c]
        c00 = d000 * (1.0 - fx) + d100 * fx
        c10 = d010 * (1.0 - fx) + d110 * fx
        c01 = d001 * (1.0 - fx) + d101 * fx
        c11 = d011 * (1.0 - fx) + d111 * fx
        c0 = c00 * (1.0 - fy) + c10 * fy
        c1 = c01 * (1.0 - fy) + c11 * fy
        val = c0 * (1.0 - fz) + c1 * fz
        num += w[i] * val
        den += w[i]
    return num, den


@njit(cache=True, nogil=True, fastmath=True)
def dot_affine_f32(mdata, world, m00, m01, m02, m10, m11, m12, m20, m21, m22,
                   t0, t1, t2, fdesc, w):
    """Fused variant of dot_accumulate_f32 for linear transforms.

    Maps world points (N, 3) straight to fractional moving cells with the
    premultiplied affine (m.., t.): one pass, no intermediate arrays. The
    eight trilinear weights are hoisted so the channel loop is a single
    accumulator chain; with fastmath it vectorizes. This is the registration
    hot loop and the only difference from the generic kernel is f64 rounding
    order.
    """
    nz, ny, nx, nc = mdata.shape
    xhi = nx - 1.0
    yhi = ny - 1.0
    zhi = nz - 1.0
    num = 0.0
    den = 0.0
    for i in range(world.shape[0]):
        px = world[i, 0]
        py = world[i, 1]
        pz = world[i, 2]
        cx = m00 * px + m01 * py + m02 * pz + t0
        cy = m10 * px + m11 * py + m12 * pz + t1
        cz = m20 * px + m21 * py + m22 * pz + t2
        if cx < 0.0 or cx > xhi or cy < 0.0 or cy > yhi or cz < 0.0 or cz > zhi:
            continue
        # truncation == floor here: the bounds test guarantees cx,cy,cz >= 0
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz; w100 = fx * gy * gz
        w010 = gx * fy * gz; w110 = fx * fy * gz
        w001 = gx * gy * fz; w101 = fx * gy * fz
        w011 = gx * fy * fz; w111 = fx * fy * fz
        val = 0.0
        for c in range(nc):
            interp = (w000 * mdata[z0, y0, x0, c]
                      + w100 * mdata[z0, y0, x0 + 1, c]
                      + w010 * mdata[z0, y0 + 1, x0, c]
                      + w110 * mdata[z0, y0 + 1, x0 + 1, c]
                      + w001 * mdata[z0 + 1, y0, x0, c]
                      + w101 * mdata[z0 + 1, y0, x0 + 1, c]
                      + w011 * mdata[z0 + 1, y0 + 1, x0, c]
                      + w111 * mdata[z0 + 1, y0 + 1, x0 + 1, c])
            val += fdesc[i, c] * interp
        num += w[i] * val
        den += w[i]
    return num, den


@njit(cache=True, nogil=True, fastmath=True)
def dot_affine_i8(mdata, world, m00, m01, m02, m10, m11, m12, m20, m21, m22,
                  t0, t1, t2, fdesc, w):
    """Quantized twin of dot_affine_f32; int8 corners widen to f64 in the
    blend, which matches the integer-corner-dot formulation up to rounding."""
    nz, ny, nx, nc = mdata.shape
    xhi = nx - 1.0
    yhi = ny - 1.0
    zhi = nz - 1.0
    num = 0.0
    den = 0.0
    for i in range(world.shape[0]):
        px = world[i, 0]
        py = world[i, 1]
        pz = world[i, 2]
        cx = m00 * px + m01 * py + m02 * pz + t0
        cy = m10 * px + m11 * py + m12 * pz + t1
        cz = m20 * px + m21 * py + m22 * pz + t2
        if cx < 0.0 or cx > xhi or cy < 0.0 or cy > yhi or cz < 0.0 or cz > zhi:
            continue
        # truncation == floor here: the bounds test guarantees cx,cy,cz >= 0
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz; w100 = fx * gy * gz
        w010 = gx * fy * gz; w110 = fx * fy * gz
        w001 = gx * gy * fz; w101 = fx * gy * fz
        w011 = gx * fy * fz; w111 = fx * fy * fz
        val = 0.0
        for c in range(nc):
            interp = (w000 * mdata[z0, y0, x0, c]
                      + w100 * mdata[z0, y0, x0 + 1, c]
                      + w010 * mdata[z0, y0 + 1, x0, c]
                      + w110 * mdata[z0, y0 + 1, x0 + 1, c]
                      + w001 * mdata[z0 + 1, y0, x0, c]
                      + w101 * mdata[z0 + 1, y0, x0 + 1, c]
                      + w011 * mdata[z0 + 1, y0 + 1, x0, c]
                      + w111 * mdata[z0 + 1, y0 + 1, x0 + 1, c])
            val += fdesc[i, c] * interp
        num += w[i] * val
        den += w[i]
    return num, den


@njit(cache=True, nogil=True)
def dot_accumulate_grad_f32(mdata, cx, cy, cz, inside, fdesc, w, gcell):
    """As dot_accumulate_f32 but also writes the per-sample spatial derivative.

    gcell (N, 3) receives d(dot)/d(cell coordinate), unweighted; rows for
    skipped samples are zeroed.
    """
    nz, ny, nx, nc = mdata.shape
    num = 0.0
    den = 0.0
    for i in range(cx.shape[0]):
        gcell[i, 0] = 0.0
        gcell[i, 1] = 0.0
        gcell[i, 2] = 0.0
        if inside[i] == 0:
            continue
        x0 = int(np.floor(cx[i]))
        y0 = int(np.floor(cy[i]))
        z0 = int(np.floor(cz[i]))
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if z0 < 0:
            z0 = 0
        fx = cx[i] - x0
        fy = cy[i] - y0
        fz = cz[i] - z0
        d000 = 0.0; d100 = 0.0; d010 = 0.0; d110 = 0.0
        d001 = 0.0; d101 = 0.0; d011 = 0.0; d111 = 0.0
        for c in range(nc):
            f = fdesc[i, c]
            d000 += f * mdata[z0, y0, x0, c]
            d100 += f * mdata[z0, y0, x0 + 1, c]
            d010 += f * mdata[z0, y0 + 1, x0, c]
            d110 += f * mdata[z0, y0 + 1, x0 + 1, c]
            d001 += f * mdata[z0 + 1, y0, x0, c]
            d101 += f * mdata[z0 + 1, y0, x0 + 1, c]
            d011 += f * mdata[z0 + 1, y0 + 1, x0, c]
            d111 += f * mdata[z0 + 1, y0 + 1, x0 + 1, c]
        c00 = d000 * (1.0 - fx) + d100 * fx
        c10 = d010 * (1.0 - fx) + d110 * fx
        c01 = d001 * (1.0 - fx) + d101 * fx
        c11 = d011 * (1.0 - fx) + d111 * fx
        c0 = c00 * (1.0 - fy) + c10 * fy
        c1 = c01 * (1.0 - fy) + c11 * fy
        val = c0 * (1.0 - fz) + c1 * fz
        gx = ((d100 - d000) * (1.0 - fy) + (d110 - d010) * fy) * (1.0 - fz) \
            + ((d101 - d001) * (1.0 - fy) + (d111 - d011) * fy) * fz
        gy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz
        gz = c1 - c0
        gcell[i, 0] = gx
        gcell[i, 1] = gy
        gcell[i, 2] = gz
        num += w[i] * val
        den += w[i]
    return num, den


@njit(cache=True, nogil=True)
def dot_accumulate_i8(mdata, cx, cy, cz, inside, fdesc, w):
    """Quantized path: integer corner dot products, trilinear blend, no rescale.

    mdata (nz, ny, nx, C) i8, fdesc (N, C) i8. Corner dots fit easily in i64
    (127*127*C). The caller divides the result by scale_f*scale_m once.
    """
    nz, ny, nx, nc = mdata.shape
    num = 0.0
    den = 0.0
    for i in range(cx.shape[0]):
        if inside[i] == 0:
            continue
        x0 = int(np.floor(cx[i]))
        y0 = int(np.floor(cy[i]))
        z0 = int(np.floor(cz[i]))
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if z0 < 0:
            z0 = 0
        fx = cx[i] - x0
        fy = cy[i] - y0
        fz = cz[i] - z0
        d000 = np.int64(0); d100 = np.int64(0); d010 = np.int64(0); d110 = np.int64(0)
        d001 = np.int64(0); d101 = np.int64(0); d011 = np.int64(0); d111 = np.int64(0)
        for c in range(nc):
            f = np.int64(fdesc[i, c])
            d000 += f * mdata[z0, y0, x0, c]
            d100 += f * mdata[z0, y0, x0 + 1, c]
            d010 += f * mdata[z0, y0 + 1, x0, c]
            d110 += f * mdata[z0, y0 + 1, x0 + 1, c]
            d001 += f * mdata[z0 + 1, y0, x0, c]
            d101 += f * mdata[z0 + 1, y0, x0 + 1, c]
            d011 += f * mdata[z0 + 1, y0 + 1, x0, c]
            d111 += f * mdata[z0 + 1, y0 + 1, x0 + 1, c]
        c00 = d000 * (1.0 - fx) + d100 * fx
        c10 = d010 * (1.0 - fx) + d110 * fx
        c01 = d001 * (1.0 - fx) + d101 * fx
        c11 = d011 * (1.0 - fx) + d111 * fx
        c0 = c00 * (1.0 - fy) + c10 * fy
        c1 = c01 * (1.0 - fy) + c11 * fy
        val = c0 * (1.0 - fz) + c1 * fz
        num += w[i] * val
        den += w[i]
    return num, den


@njit(cache=True, nogil=True)
def ssd_accumulate_grad_f32(mdata, cx, cy, cz, inside, fdesc, w, gcell):
    """Weighted channel-summed squared difference against the trilinear field.

    Same layout conventions as dot_accumulate_grad_f32; the residual couples
    each channel to its own spatial derivative, so the blend runs per channel.
    Returns (num, den) with num = sum w * sum_c (m_c - f_c)^2.
    """
    nz, ny, nx, nc = mdata.shape
    num = 0.0
    den = 0.0
    for i in range(cx.shape[0]):
        gcell[i, 0] = 0.0
        gcell[i, 1] = 0.0
        gcell[i, 2] = 0.0
        if inside[i] == 0:
            continue
        x0 = int(np.floor(cx[i]))
        y0 = int(np.floor(cy[i]))
        z0 = int(np.floor(cz[i]))
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if z0 < 0:
            z0 = 0
        fx = cx[i] - x0
        fy = cy[i] - y0
        fz = cz[i] - z0
        ssd = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for c in range(nc):
            d000 = mdata[z0, y0, x0, c] * 1.0
            d100 = mdata[z0, y0, x0 + 1, c] * 1.0
            d010 = mdata[z0, y0 + 1, x0, c] * 1.0
            d110 = mdata[z0, y0 + 1, x0 + 1, c] * 1.0
            d001 = mdata[z0 + 1, y0, x0, c] * 1.0
            d101 = mdata[z0 + 1, y0, x0 + 1, c] * 1.0
            d011 = mdata[z0 + 1, y0 + 1, x0, c] * 1.0
            d111 = mdata[z0 + 1, y0 + 1, x0 + 1, c] * 1.0
            c00 = d000 * (1.0 - fx) + d100 * fx
            c10 = d010 * (1.0 - fx) + d110 * fx
            c01 = d001 * (1.0 - fx) + d101 * fx
            c11 = d011 * (1.0 - fx) + d111 * fx
            c0 = c00 * (1.0 - fy) + c10 * fy
            c1 = c01 * (1.0 - fy) + c11 * fy
            m = c0 * (1.0 - fz) + c1 * fz
            r = m - fdesc[i, c]
            ssd += r * r
            dgx = ((d100 - d000) * (1.0 - fy) + (d110 - d010) * fy) * (1.0 - fz) \
                + ((d101 - d001) * (1.0 - fy) + (d111 - d011) * fy) * fz
            dgy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz
            dgz = c1 - c0
            gx += 2.0 * r * dgx
            gy += 2.0 * r * dgy
            gz += 2.0 * r * dgz
        gcell[i, 0] = gx
        gcell[i, 1] = gy
        gcell[i, 2] = gz
        num += w[i] * ssd
        den += w[i]
    return num, den

"""Compiled hot loops (numba backend).

Each kernel here has a vectorized numpy twin used when numba is not
available or when GFF_THINLAB_BACKEND=numpy; the twins live next to the
call sites in exploration.py or in _rng.py.  The random-word consumption
order per tree node is part of the cross-backend contract and must not
change: one ziggurat normal (variable words), then, only if the endpoint
stayed below the threshold, one ziggurat exponential for the bridge
maximum.
"""

import math

import numpy as np

from ._backend import njit
from ._rng import XE, XN, YE, YN, ZE_R, ZN_R, U01

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S8 = np.uint64(8)
_ONE = np.uint64(1)
_L127 = np.uint64(127)
_L255 = np.uint64(255)


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _node_key(seed, replica, code):
    return _mix(_mix(_mix(seed + _GOLD) ^ replica) ^ code)


@njit(cache=True, inline="always")
def _word_u01(w):
    return float((w >> _S11) + _ONE) * U01


@njit(cache=True)
def _normal(h, ctr):
    """Ziggurat standard normal from stream h; returns (value, next ctr)."""
    while True:
        w = _mix(h + ctr)
        ctr += _ONE
        i = int(w & _L127)
        neg = (w >> _S8) & _ONE
        u = _word_u01(w)
        x = u * XN[i]
        if x < XN[i + 1]:
            return (-x if neg else x), ctr
        if i == 0:
            while True:
                w1 = _mix(h + ctr)
                ctr += _ONE
                w2 = _mix(h + ctr)
                ctr += _ONE
                xt = -math.log(_word_u01(w1)) / ZN_R
                yt = -math.log(_word_u01(w2))
                if 2.0 * yt > xt * xt:
                    v = ZN_R + xt
                    return (-v if neg else v), ctr
        else:
            w2 = _mix(h + ctr)
            ctr += _ONE
            u2 = _word_u01(w2)
            if YN[i] + u2 * (YN[i + 1] - YN[i]) < math.exp(-0.5 * x * x):
                return (-x if neg else x), ctr


@njit(cache=True)
def _exponential(h, ctr):
    """Ziggurat Exp(1) from stream h; returns (value, next ctr)."""
    while True:
        w = _mix(h + ctr)
        ctr += _ONE
        i = int(w & _L255)
        u = _word_u01(w)
        x = u * XE[i]
        if x < XE[i + 1]:
            return x, ctr
        if i == 0:
            w1 = _mix(h + ctr)
            ctr += _ONE
            return ZE_R - math.log(_word_u01(w1)), ctr
        w2 = _mix(h + ctr)
        ctr += _ONE
        u2 = _word_u01(w2)
        if YE[i] + u2 * (YE[i + 1] - YE[i]) < math.exp(-x):
            return x, ctr


@njit(cache=True)
def bbm_generation(vals, codes, n_act, seed, replica, d, sig, vals2, codes2):
    """Advance one branching generation for one replica.

    Children of the n_act active nodes receive independent Gaussian
    increments of standard deviation sig; a child is deactivated when
    its endpoint reaches 1 or when the Brownian bridge over the interval
    attains 1 (exact maximum via the reflection identity).  Survivors
    are written to vals2/codes2.  Returns (survivor count, hit count).
    """
    nkids = 1 << d
    sig2 = sig * sig
    n_next = 0
    n_hit = 0
    for p in range(n_act):
        a = vals[p]
        base = codes[p] << np.uint64(d)
        for c in range(nkids):
            code = base | np.uint64(c)
            h = _node_key(seed, replica, code)
            ctr = _ONE
            xi, ctr = _normal(h, ctr)
            step = sig * xi
            b = a + step
            if b >= 1.0:
                n_hit += 1
                continue
            e, ctr = _exponential(h, ctr)
            mx = a + 0.5 * (step + math.sqrt(step * step + 2.0 * sig2 * e))
            if mx >= 1.0:
                n_hit += 1
                continue
            vals2[n_next] = b
            codes2[n_next] = code
            n_next += 1
    return n_next, n_hit


@njit(cache=True)
def lineage_chain(seed, replicas, d, sigs, alive_out):
    """Survival table for one fixed lineage (letter-0 word path).

    alive_out[k] accumulates, over replicas, how many lineages are still
    active after generation k+1.  Stream keys coincide with the full
    tree's leftmost path, so this is the exact tree marginal.
    """
    ngen = sigs.shape[0]
    for rep in range(replicas):
        a = 0.0
        code = _ONE
        for k in range(ngen):
            code = code << np.uint64(d)
            sig = sigs[k]
            h = _node_key(seed, np.uint64(rep), code)
            ctr = _ONE
            xi, ctr = _normal(h, ctr)
            step = sig * xi
            b = a + step
            if b >= 1.0:
                break
            e, ctr = _exponential(h, ctr)
            mx = a + 0.5 * (step + math.sqrt(step * step + 2.0 * sig * sig * e))
            if mx >= 1.0:
                break
            a = b
            alive_out[k] += 1


@njit(cache=True)
def gather_cells(field_flat, cells, scale, rel, wts, m, strides, out):
    """Weighted boundary sums per cell: out[i] = sum_q w_q * field[g].

    cells holds per-cell integer corners in units of the cell side
    (depth-n coords); scale = lattice intervals per cell.  rel holds
    vertex offsets in lattice units relative to the scaled corner.
    Offsets that land on the domain boundary (index 0 or m per axis) are
    skipped: the field is pinned to zero there.
    """
    nc = cells.shape[0]
    q = rel.shape[0]
    d = cells.shape[1]
    for i in range(nc):
        acc = 0.0
        for j in range(q):
            flat = 0
            ok = True
            for a in range(d):
                g = cells[i, a] * scale + rel[j, a]
                if g < 1 or g > m - 1:
                    ok = False
                    break
                flat += (g - 1) * strides[a]
            if ok:
                acc += wts[j] * float(field_flat[flat])
        out[i] = acc


@njit(cache=True)
def mark_boxes_2d(occ, cells, scale):
    """Mark depth-n cells touching the closed boundary of given boxes.

    Boxes are at coords cells[i]*scale .. (cells[i]+1)*scale on the occ
    grid (scale = 1 marks the 3x3 neighborhood of a unit cell).
    """
    side = occ.shape[0]
    for i in range(cells.shape[0]):
        x0 = cells[i, 0] * scale
        y0 = cells[i, 1] * scale
        x1 = x0 + scale
        y1 = y0 + scale
        for x in range(max(x0 - 1, 0), min(x1 + 1, side)):
            for y in range(max(y0 - 1, 0), min(y1 + 1, side)):
                if x < x0 or x >= x1 or y < y0 or y >= y1:
                    occ[x, y] = 1
                elif x < x0 + 1 or x >= x1 - 1 or y < y0 + 1 or y >= y1 - 1:
                    occ[x, y] = 1


@njit(cache=True)
def mark_boxes_3d(occ, cells, scale):
    side = occ.shape[0]
    for i in range(cells.shape[0]):
        x0 = cells[i, 0] * scale
        y0 = cells[i, 1] * scale
        z0 = cells[i, 2] * scale
        x1 = x0 + scale
        y1 = y0 + scale
        z1 = z0 + scale
        for x in range(max(x0 - 1, 0), min(x1 + 1, side)):
            on_x = x < x0 + 1 or x >= x1 - 1
            for y in range(max(y0 - 1, 0), min(y1 + 1, side)):
                on_xy = on_x or y < y0 + 1 or y >= y1 - 1
                for z in range(max(z0 - 1, 0), min(z1 + 1, side)):
                    if on_xy or z < z0 + 1 or z >= z1 - 1:
                        occ[x, y, z] = 1

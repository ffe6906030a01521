"""Counter-based random streams shared by both kernel backends.

Every tree node gets a 64-bit key derived from (base seed, replica id,
node word code) through the splitmix64 finalizer.  Draws for a node are
produced by mixing key + counter, so the randomness attached to a node
is independent of traversal order and identical across backends and
worker counts.

Gaussian and exponential variates come from ziggurat samplers (128
normal layers, 256 exponential layers) driven by those mixed words.  The
numba kernels in _kernels.py implement the identical consumption order
scalar-wise; this module holds the tables plus vectorized numpy
equivalents.
"""

import numpy as np

U64 = np.uint64
GOLD = U64(0x9E3779B97F4A7C15)
# 2**-53; mantissas are (word >> 11) + 1 in [1, 2**53], so u in (0, 1]
U01 = 1.1102230246251565e-16

# ziggurat layer parameters (standard 128-layer normal / 256-layer
# exponential constants: rightmost layer edge R and per-layer area V)
ZN_R = 3.442619855899
ZN_V = 9.91256303526217e-3
ZE_R = 7.69711747013104972
ZE_V = 3.9496598225815571993e-3


def _zig_tables(n, r, v, f, finv):
    x = np.empty(n + 1)
    x[0] = v / f(r)
    x[1] = r
    for i in range(1, n - 1):
        y = f(x[i]) + v / x[i]
        x[i + 1] = finv(min(y, 1.0))
    x[n] = 0.0
    y = f(x)
    y[n] = 1.0
    return x, y


XN, YN = _zig_tables(
    128, ZN_R, ZN_V, lambda t: np.exp(-0.5 * t * t), lambda y: np.sqrt(-2.0 * np.log(y))
)
XE, YE = _zig_tables(256, ZE_R, ZE_V, lambda t: np.exp(-t), lambda y: -np.log(y))


def mix_u64(z):
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=U64)
        z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
        return z ^ (z >> U64(31))


def node_keys(seed, replica, code):
    """Stream key per (seed, replica, word code); replica/code may be arrays."""
    s = mix_u64(np.asarray(seed, dtype=U64) + GOLD)
    return mix_u64(mix_u64(s ^ np.asarray(replica, dtype=U64)) ^ np.asarray(code, dtype=U64))


def _u01(words):
    return ((words >> U64(11)) + U64(1)).astype(np.float64) * U01


def normal_batch(keys, ctrs):
    """One standard normal per key via the ziggurat; returns (values, ctrs).

    ctrs is the per-key word counter, advanced by however many 64-bit
    words each element consumed.  Consumption order matches the scalar
    numba kernel word for word.
    """
    keys = np.asarray(keys, dtype=U64)
    ctrs = np.asarray(ctrs, dtype=U64).copy()
    _ensure_scratch(keys.size)
    out = np.empty(keys.shape, dtype=np.float64)
    pending = np.arange(keys.size, dtype=np.int64)
    in_tail = np.zeros(keys.size, dtype=bool)
    while pending.size:
        k = keys[pending]
        c = ctrs[pending]
        tail = in_tail[pending]
        main = ~tail
        done = np.zeros(pending.size, dtype=bool)

        if main.any():
            w = mix_u64(k[main] + c[main])
            ctrs[pending[main]] += U64(1)
            i = (w & U64(127)).astype(np.int64)
            sign = ((w >> U64(8)) & U64(1)).astype(bool)
            u = _u01(w)
            x = u * XN[i]
            fast = x < XN[i + 1]
            base = (~fast) & (i == 0)
            wedge = (~fast) & (i > 0)
            sel = pending[main]
            if fast.any():
                v = np.where(sign[fast], -x[fast], x[fast])
                out[sel[fast]] = v
                done[np.flatnonzero(main)[fast]] = True
            if wedge.any():
                wi = np.flatnonzero(main)[wedge]
                w2 = mix_u64(keys[pending[wi]] + ctrs[pending[wi]])
                ctrs[pending[wi]] += U64(1)
                u2 = _u01(w2)
                iw = i[wedge]
                xw = x[wedge]
                ok = YN[iw] + u2 * (YN[iw + 1] - YN[iw]) < np.exp(-0.5 * xw * xw)
                acc = wi[ok]
                out[pending[acc]] = np.where(sign[wedge][ok], -xw[ok], xw[ok])
                done[acc] = True
            if base.any():
                # fell off the base layer: switch to the tail sampler,
                # remembering the sign word already drawn
                bi = np.flatnonzero(main)[base]
                in_tail[pending[bi]] = True
                _tail_sign[pending[bi]] = sign[base]

        tail = in_tail[pending] & ~done
        if tail.any():
            ti = np.flatnonzero(tail)
            sel = pending[ti]
            w1 = mix_u64(keys[sel] + ctrs[sel])
            ctrs[sel] += U64(1)
            w2 = mix_u64(keys[sel] + ctrs[sel])
            ctrs[sel] += U64(1)
            xt = -np.log(_u01(w1)) / ZN_R
            yt = -np.log(_u01(w2))
            ok = 2.0 * yt > xt * xt
            acc = sel[ok]
            v = ZN_R + xt[ok]
            out[acc] = np.where(_tail_sign[acc], -v, v)
            in_tail[acc] = False
            done[ti[ok]] = True

        pending = pending[~done]
    return out, ctrs


# scratch for tail signs, grown on demand (module-level to avoid realloc)
_tail_sign = np.zeros(0, dtype=bool)


def _ensure_scratch(n):
    global _tail_sign
    if _tail_sign.size < n:
        _tail_sign = np.zeros(n, dtype=bool)


def exponential_batch(keys, ctrs):
    """One Exp(1) variate per key via the ziggurat; returns (values, ctrs)."""
    keys = np.asarray(keys, dtype=U64)
    ctrs = np.asarray(ctrs, dtype=U64).copy()
    out = np.empty(keys.shape, dtype=np.float64)
    pending = np.arange(keys.size, dtype=np.int64)
    while pending.size:
        k = keys[pending]
        c = ctrs[pending]
        w = mix_u64(k + c)
        ctrs[pending] += U64(1)
        i = (w & U64(255)).astype(np.int64)
        u = _u01(w)
        x = u * XE[i]
        fast = x < XE[i + 1]
        done = np.zeros(pending.size, dtype=bool)
        if fast.any():
            out[pending[fast]] = x[fast]
            done[fast] = True
        base = (~fast) & (i == 0)
        if base.any():
            bi = np.flatnonzero(base)
            sel = pending[bi]
            w1 = mix_u64(keys[sel] + ctrs[sel])
            ctrs[sel] += U64(1)
            out[sel] = ZE_R - np.log(_u01(w1))
            done[bi] = True
        wedge = (~fast) & (i > 0)
        if wedge.any():
            wi = np.flatnonzero(wedge)
            sel = pending[wi]
            w2 = mix_u64(keys[sel] + ctrs[sel])
            ctrs[sel] += U64(1)
            u2 = _u01(w2)
            iw = i[wedge]
            xw = x[wedge]
            ok = YE[iw] + u2 * (YE[iw + 1] - YE[iw]) < np.exp(-xw)
            out[sel[ok]] = xw[ok]
            done[wi[ok]] = True
        pending = pending[~done]
    return out, ctrs


def normal_for_nodes(seed, replica, codes, ctr0=1):
    """Convenience wrapper: fresh keys, one normal per code."""
    codes = np.asarray(codes, dtype=U64)
    _ensure_scratch(codes.size)
    keys = node_keys(seed, replica, codes)
    ctrs = np.full(codes.shape, ctr0, dtype=U64)
    return normal_batch(keys, ctrs)

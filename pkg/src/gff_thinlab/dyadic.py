"""Dyadic cell indexing and discrete approximation schemes.

Cells of depth n are the 2^(dn) dyadic boxes of side 2^-n tiling the
unit box.  A word over the alphabet 0..2^d-1 addresses a cell: letter
bits give the child offset per axis (axis 0 in the highest bit, so the
child ordering is lexicographic in coordinates).

An approximation scheme supplies, per level n, a family of closed
volume-carrying pieces plus a zero-volume trim set; level-n
approximation of a set A collects the pieces meeting A minus the trim.
Two schemes ship: the canonical dyadic tiling and a half-offset shifted
grid (clipped to the box) that exercises the general-scheme contract.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as _ndimage

from .errors import ConfigurationError, InputError, ResolutionError


@dataclass(frozen=True)
class DyadicWord:
    """Address of a dyadic cell: letter sequence from the root."""

    d: int
    letters: tuple = ()

    @property
    def depth(self):
        return len(self.letters)

    @property
    def code(self):
        """Integer code: root = 1, child appends d bits."""
        c = 1
        for letter in self.letters:
            c = (c << self.d) | letter
        return c

    def child(self, letter):
        if not 0 <= letter < (1 << self.d):
            raise InputError("letter %r out of range for d=%d" % (letter, self.d))
        return DyadicWord(self.d, self.letters + (letter,))

    def coords(self):
        """Integer corner in units of the cell side."""
        c = np.zeros(self.d, dtype=np.int64)
        for letter in self.letters:
            for a in range(self.d):
                c[a] = (c[a] << 1) | ((letter >> (self.d - 1 - a)) & 1)
        return c


@dataclass(frozen=True)
class Cell:
    """Geometric dyadic cell; open interior unless closed=True."""

    word: DyadicWord
    closed: bool = True

    @property
    def d(self):
        return self.word.d

    @property
    def depth(self):
        return self.word.depth

    @property
    def side(self):
        return 2.0 ** -self.depth

    @property
    def coords(self):
        return self.word.coords()

    @property
    def lo(self):
        return self.coords * self.side

    @property
    def hi(self):
        return (self.coords + 1) * self.side

    def volume(self):
        return self.side**self.d


def root_cell(d):
    return Cell(DyadicWord(d))


def cell_at(d, coords, depth):
    """Cell from integer corner coordinates at a given depth."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape != (d,) or (coords < 0).any() or (coords >= 1 << depth).any():
        raise InputError("coords %r invalid at depth %d" % (coords, depth))
    letters = []
    for lvl in range(depth - 1, -1, -1):
        letter = 0
        for a in range(d):
            letter = (letter << 1) | ((int(coords[a]) >> lvl) & 1)
        letters.append(letter)
    return Cell(DyadicWord(d, tuple(letters)))


def children(w, d=None):
    """All 2^d children of a word (or cell), in letter order."""
    if isinstance(w, Cell):
        return [Cell(c, w.closed) for c in children(w.word)]
    if d is not None and d != w.d:
        raise InputError("dimension mismatch")
    return [w.child(letter) for letter in range(1 << w.d)]


# ---------------------------------------------------------------------------
# set predicates


class GeometricSet:
    """Exact closed set built from point/segment/box primitives."""

    def __init__(self, primitives):
        self.primitives = list(primitives)
        if not self.primitives:
            self.d = None
        else:
            self.d = self.primitives[0].d
            for p in self.primitives:
                if p.d != self.d:
                    raise InputError("mixed dimensions in set primitives")

    def is_empty(self):
        return not self.primitives

    def intersects_box(self, lo, hi, trim_planes=()):
        """Does the closed box meet the set minus the trim hyperplanes?"""
        for p in self.primitives:
            if p.box_piece_survives(lo, hi, trim_planes):
                return True
        return False

    def distance_grid(self, dom):
        """Distance from every closed-grid vertex to the set."""
        axes = [np.arange(dom.m + 1) * dom.h for _ in range(dom.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        dist = np.full(pts.shape[0], np.inf)
        for p in self.primitives:
            np.minimum(dist, p.distance(pts), out=dist)
        return dist.reshape([dom.m + 1] * dom.d)

    def rasterize(self, dom, tol=None):
        """Closed-grid vertex mask: vertices within half a mesh of the set."""
        if self.is_empty():
            return np.zeros([dom.m + 1] * dom.d, dtype=bool)
        if tol is None:
            tol = 0.5 * dom.h
        return self.distance_grid(dom) <= tol + 1e-12


@dataclass(frozen=True)
class PointSet:
    p: tuple

    @property
    def d(self):
        return len(self.p)

    def box_piece_survives(self, lo, hi, trim_planes):
        p = np.asarray(self.p)
        if ((p < np.asarray(lo) - 1e-12) | (p > np.asarray(hi) + 1e-12)).any():
            return False
        return not _on_any_plane(p, trim_planes)

    def distance(self, pts):
        return np.linalg.norm(pts - np.asarray(self.p), axis=1)


@dataclass(frozen=True)
class BoxSet:
    lo: tuple
    hi: tuple

    @property
    def d(self):
        return len(self.lo)

    def box_piece_survives(self, lo, hi, trim_planes):
        plo = np.maximum(np.asarray(self.lo), np.asarray(lo))
        phi = np.minimum(np.asarray(self.hi), np.asarray(hi))
        if (plo > phi + 1e-12).any():
            return False
        flat = np.flatnonzero(phi - plo <= 1e-12)
        for a in flat:
            for axis, off in trim_planes:
                if axis == a and abs(plo[a] - off) <= 1e-12:
                    return False
        return True

    def distance(self, pts):
        gap = np.maximum(
            np.asarray(self.lo) - pts, np.maximum(0.0, pts - np.asarray(self.hi))
        )
        return np.linalg.norm(np.maximum(gap, 0.0), axis=1)


@dataclass(frozen=True)
class SegmentSet:
    p: tuple
    q: tuple

    @property
    def d(self):
        return len(self.p)

    def _clip(self, lo, hi):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        t0, t1 = 0.0, 1.0
        for a in range(self.d):
            dv = q[a] - p[a]
            if abs(dv) < 1e-15:
                if p[a] < lo[a] - 1e-12 or p[a] > hi[a] + 1e-12:
                    return None
            else:
                ta = (lo[a] - p[a]) / dv
                tb = (hi[a] - p[a]) / dv
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
                if t0 > t1 + 1e-12:
                    return None
        return t0, t1

    def box_piece_survives(self, lo, hi, trim_planes):
        clip = self._clip(np.asarray(lo), np.asarray(hi))
        if clip is None:
            return False
        t0, t1 = clip
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if t1 - t0 <= 1e-12:
            return not _on_any_plane(p + t0 * (q - p), trim_planes)
        # a nondegenerate piece dies only if the whole segment lies in a
        # trim plane
        for axis, off in trim_planes:
            if abs(p[axis] - off) <= 1e-12 and abs(q[axis] - off) <= 1e-12:
                return False
        return True

    def distance(self, pts):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        seg = q - p
        denom = float(seg @ seg)
        if denom == 0.0:
            return np.linalg.norm(pts - p, axis=1)
        t = np.clip((pts - p) @ seg / denom, 0.0, 1.0)
        proj = p + t[:, None] * seg
        return np.linalg.norm(pts - proj, axis=1)


def _on_any_plane(x, trim_planes):
    for axis, off in trim_planes:
        if abs(x[axis] - off) <= 1e-12:
            return True
    return False


class RasterSet:
    """Set given as a vertex mask on the closed lattice grid."""

    def __init__(self, dom, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tuple([dom.m + 1] * dom.d):
            raise InputError("raster mask must cover the closed grid")
        self.dom = dom
        self.d = dom.d
        self.mask = mask
        # summed-area table for O(1) box counts
        sat = mask.astype(np.int64)
        for a in range(dom.d):
            sat = sat.cumsum(axis=a)
        self._sat = np.pad(sat, [(1, 0)] * dom.d)

    def is_empty(self):
        return not self.mask.any()

    def _count_box(self, ilo, ihi):
        """Number of masked vertices with index in [ilo, ihi] (closed)."""
        total = 0
        d = self.d
        for corner in range(1 << d):
            idx = []
            sgn = 1
            for a in range(d):
                if (corner >> a) & 1:
                    idx.append(ilo[a])
                    sgn = -sgn
                else:
                    idx.append(ihi[a] + 1)
            total += sgn * int(self._sat[tuple(idx)])
        return total

    def intersects_box(self, lo, hi, trim_planes=()):
        m = self.dom.m
        ilo = np.maximum(np.ceil(np.asarray(lo) * m - 1e-9).astype(int), 0)
        ihi = np.minimum(np.floor(np.asarray(hi) * m + 1e-9).astype(int), m)
        if (ilo > ihi).any():
            return False
        cnt = self._count_box(ilo, ihi)
        if cnt == 0:
            return False
        if not trim_planes:
            return True
        # discount vertices sitting exactly on trim planes
        sub = self.mask[tuple(slice(l, h + 1) for l, h in zip(ilo, ihi))]
        keep = sub.copy()
        for axis, off in trim_planes:
            j = off * m
            if abs(j - round(j)) > 1e-9:
                continue
            j = int(round(j)) - ilo[axis]
            if 0 <= j < keep.shape[axis]:
                sl = [slice(None)] * self.d
                sl[axis] = j
                keep[tuple(sl)] = False
        return bool(keep.any())


# ---------------------------------------------------------------------------
# schemes


@dataclass(frozen=True)
class SchemePiece:
    lo: tuple
    hi: tuple

    def volume(self):
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))

    def diameter(self):
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))


class DyadicScheme:
    """Canonical scheme: closed dyadic cells, no zero-volume trim."""

    name = "dyadic"

    def __init__(self, d):
        self.d = d
        self.C = max(math.sqrt(d), 1.0)

    def pieces(self, n):
        side = 2.0**-n
        out = []
        for flat in range(1 << (self.d * n)):
            c = np.empty(self.d, dtype=np.int64)
            rem = flat
            for a in range(self.d - 1, -1, -1):
                c[a] = rem & ((1 << n) - 1)
                rem >>= n
            out.append(SchemePiece(tuple(c * side), tuple((c + 1) * side)))
        return out

    def trim_planes(self, n):
        return []


class ShiftedScheme:
    """Half-offset grid clipped to the box; trim set = its grid planes."""

    name = "shifted"

    def __init__(self, d):
        self.d = d
        self.C = float(2**d)

    def _breaks(self, n):
        off = 2.0 ** -(n + 1)
        inner = off + np.arange(1 << n) * 2.0**-n
        return np.concatenate(([0.0], inner, [1.0]))

    def pieces(self, n):
        br = self._breaks(n)
        cells_1d = [(br[i], br[i + 1]) for i in range(len(br) - 1)]
        out = []
        idx = np.zeros(self.d, dtype=np.int64)
        nn = len(cells_1d)
        for flat in range(nn**self.d):
            rem = flat
            lo = []
            hi = []
            for a in range(self.d - 1, -1, -1):
                idx[a] = rem % nn
                rem //= nn
            for a in range(self.d):
                lo.append(cells_1d[idx[a]][0])
                hi.append(cells_1d[idx[a]][1])
            out.append(SchemePiece(tuple(lo), tuple(hi)))
        return out

    def trim_planes(self, n):
        br = self._breaks(n)
        return [(a, float(b)) for a in range(self.d) for b in br[1:-1]]


@dataclass
class Approximation:
    """Level-n approximation: pieces of the scheme meeting the set."""

    scheme_name: str
    n: int
    hit_pieces: list
    count: int
    volume: float

    def interior_indicator(self, dom):
        """Indicator of the closed union on the interior vertex grid."""
        w = np.zeros(dom.interior_shape)
        m = dom.m
        for piece in self.hit_pieces:
            ilo = np.maximum(np.ceil(np.asarray(piece.lo) * m - 1e-9).astype(int), 1)
            ihi = np.minimum(np.floor(np.asarray(piece.hi) * m + 1e-9).astype(int), m - 1)
            if (ilo > ihi).any():
                continue
            w[tuple(slice(l - 1, h) for l, h in zip(ilo, ihi))] = 1.0
        return w


def approximate(A, n, scheme=None, dom=None):
    """Level-n approximation of a closed set by scheme pieces.

    A is a GeometricSet or RasterSet; the count is the number of pieces
    meeting A minus the scheme's accumulated zero-volume trim.  For the
    canonical scheme this is the closed-dyadic-cell box count N_n.
    """
    if isinstance(A, RasterSet):
        dom = A.dom if dom is None else dom
        d = A.d
    else:
        d = A.d
    if d is None:
        d = scheme.d if scheme is not None else (dom.d if dom is not None else 2)
    if scheme is None:
        scheme = DyadicScheme(d)
    if dom is not None and (1 << n) > dom.m:
        raise ResolutionError(
            "level %d cells are finer than the lattice mesh 1/%d" % (n, dom.m)
        )
    trim = []
    for k in range(1, n + 1):
        trim.extend(scheme.trim_planes(k))
    hits = []
    if not (hasattr(A, "is_empty") and A.is_empty()):
        for piece in scheme.pieces(n):
            if A.intersects_box(piece.lo, piece.hi, trim):
                hits.append(piece)
    vol = float(sum(p.volume() for p in hits))
    return Approximation(scheme.name, n, hits, len(hits), vol)


def neighborhood_volume(A, eps, dom):
    """Lattice volume of the closed eps-neighborhood of A.

    Vertices carry trapezoid quadrature weights on the closed grid, so
    the whole box has volume exactly side^d.
    """
    if eps < 2 * dom.h:
        raise ResolutionError("eps below twice the mesh; dilation unresolvable")
    if isinstance(A, RasterSet):
        mask = A.mask
    else:
        if A.is_empty():
            return 0.0
        mask = A.rasterize(dom)
    if not mask.any():
        return 0.0
    dist = _ndimage.distance_transform_edt(~mask, sampling=dom.h)
    near = dist <= eps + 1e-12
    wax = np.full(dom.m + 1, dom.h)
    wax[0] = wax[-1] = 0.5 * dom.h
    weight = wax
    for _ in range(dom.d - 1):
        weight = np.multiply.outer(weight, wax)
    return float(np.sum(weight * near))


@dataclass
class DASReport:
    scheme_name: str
    ok: bool
    failure: str
    levels: list
    fitted_C: float
    declared_C: float
    bv2_stats: dict
    uxy_stats: dict


def validate_das(scheme, dom, n_max, levels=None, op=None, pair_budget=24):
    """Check scheme conditions and report empirical constants.

    Conditions: (1) volume-zero pairwise overlaps, (2) diameter and
    volume within the declared constant, (3) zero-volume locally finite
    trim.  In d=2 the report also carries, per level, the cell-variance
    ratio statistic and the normalized pair-correlation statistic
    evaluated on sampled interior cells (both fitted, not asserted).
    """
    from . import green_field as _green

    if levels is None:
        levels = list(range(1, n_max + 1))
    rows = []
    ok = True
    failure = ""
    fitted = 0.0
    for n in levels:
        pieces = scheme.pieces(n)
        max_overlap = 0.0
        # grid schemes: only boxes sharing corner-rounded keys can touch
        index = {}
        for i, p in enumerate(pieces):
            key = tuple(int(round(v * (1 << (n + 1)))) for v in p.lo)
            index.setdefault(key, []).append(i)
        for i, p in enumerate(pieces):
            base = np.asarray(
                [int(round(v * (1 << (n + 1)))) for v in p.lo], dtype=np.int64
            )
            for dkey in np.ndindex(*([5] * scheme.d)):
                key = tuple(base + np.asarray(dkey) - 2)
                for j in index.get(key, ()):
                    if j <= i:
                        continue
                    q = pieces[j]
                    ov = np.prod(
                        np.maximum(
                            np.minimum(np.asarray(p.hi), np.asarray(q.hi))
                            - np.maximum(np.asarray(p.lo), np.asarray(q.lo)),
                            0.0,
                        )
                    )
                    if ov > max_overlap:
                        max_overlap = float(ov)
        if max_overlap > 0:
            ok = False
            failure = "condition (1) overlap %.3e at level %d" % (max_overlap, n)
        vols = np.array([p.volume() for p in pieces])
        diams = np.array([p.diameter() for p in pieces])
        min_vol_ratio = float((vols * 2.0 ** (n * scheme.d)).min())
        max_diam_ratio = float((diams * 2.0**n).max())
        fitted = max(fitted, max_diam_ratio, 1.0 / min_vol_ratio)
        n_trim = len(scheme.trim_planes(n))
        rows.append(
            {
                "n": n,
                "pieces": len(pieces),
                "max_overlap": max_overlap,
                "min_vol_ratio": min_vol_ratio,
                "max_diam_ratio": max_diam_ratio,
                "trim_count": n_trim,
            }
        )
    if fitted > scheme.C + 1e-9:
        ok = False
        failure = failure or "condition (2): fitted C %.3f exceeds declared %.3f" % (
            fitted,
            scheme.C,
        )

    bv2 = {}
    uxy = {}
    if dom.d == 2 and op is not None:
        rng = np.random.default_rng(7)
        for n in levels:
            if n < 2 or (1 << n) > dom.m // 2:
                continue
            stats = []
            cells = _sample_interior_cells(rng, n, min(pair_budget, 12))
            for c in cells:
                var = _green.cell_variance(op, (c, n))
                stats.append(4.0**-n * math.sqrt(n) / (math.sqrt(2 * math.pi) * math.sqrt(var)))
            bv2[n] = (min(stats), max(stats))
            if n < 3:
                # pairs two cells apart do not exist below level 3
                continue
            ratios = []
            for _ in range(min(pair_budget, 12)):
                c1, c2 = _sample_cell_pair(rng, n)
                v1 = _green.cell_variance(op, (c1, n))
                v2 = _green.cell_variance(op, (c2, n))
                cov = _green.cell_variance(op, (c1, n), (c2, n))
                u = cov / math.sqrt(v1 * v2)
                r = np.linalg.norm((c1 - c2) * 2.0**-n)
                ratios.append(u * n / (1.0 - math.log(r)))
            uxy[n] = max(ratios)
    return DASReport(scheme.name, ok, failure, rows, fitted, scheme.C, bv2, uxy)


def _sample_interior_cells(rng, n, count):
    side = 1 << n
    lo = max(1, side // 4)
    hi = max(lo + 1, 3 * side // 4)
    return [rng.integers(lo, hi, size=2) for _ in range(count)]


def _sample_cell_pair(rng, n):
    side = 1 << n
    lo = max(1, side // 8)
    hi = max(lo + 2, 7 * side // 8)
    while True:
        c1 = rng.integers(lo, hi, size=2)
        c2 = rng.integers(lo, hi, size=2)
        if np.abs(c1 - c2).max() >= 2:
            return c1, c2


# ---------------------------------------------------------------------------
# declarative set files


def parse_set_text(text, d):
    """Parse the declarative set format: one primitive per line.

    kinds: point x...; segment x... x...; box lo... hi...; blank lines
    and #-comments ignored; the whole file denotes the union.
    """
    prims = []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, nums = parts[0].lower(), [float(v) for v in parts[1:]]
        if kind == "union":
            continue
        if kind == "point" and len(nums) == d:
            prims.append(PointSet(tuple(nums)))
        elif kind == "segment" and len(nums) == 2 * d:
            prims.append(SegmentSet(tuple(nums[:d]), tuple(nums[d:])))
        elif kind == "box" and len(nums) == 2 * d:
            prims.append(BoxSet(tuple(nums[:d]), tuple(nums[d:])))
        else:
            raise ConfigurationError(
                "set file line %d: expected point/segment/box with %d coords, got %r"
                % (ln, d, raw)
            )
        if any(v < 0 or v > 1 for v in nums):
            raise ConfigurationError("set file line %d: coordinates outside [0,1]" % ln)
    return GeometricSet(prims)


def load_set_file(path, d):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_set_text(fh.read(), d)

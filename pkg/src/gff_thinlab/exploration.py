"""Branching exploration of the field: BBM surrogate and lattice mode.

Both modes grow the same dyadic cell tree.  At generation k every active
cell splits into 2^d children; a child deactivates when its tracked
value W reaches the threshold 1, and deactivated subtrees are never
expanded.

BBM mode evolves W directly as a branching Brownian motion on the
schedule T_n.  Endpoint sampling alone would miss within-interval
crossings, so each step also draws the exact Brownian-bridge maximum
(one exponential variate via the reflection identity); a bridge hit
deactivates with stopped value exactly 1, which makes the
optional-stopping bookkeeping exact rather than discretization-biased.

Field mode samples one lattice free field and reveals dyadic
mid-hyperplane values level by level inside active cells only.  For a
cell s at depth k, gamma_k(s) is the exact conditional mean of the cell
mass (Gamma, 1_s) given the revealed data (by the Markov property this
depends only on the values on the cell's boundary), and
W = 2^(dk) gamma_k(s) is the volume-normalized version.  Deactivation is
checked at generation checkpoints only; the bridge correction has no
lattice counterpart.  The intrinsic clock of W (its accumulated
variance, computed exactly from the Green operator for a reference
interior cell per depth) is reported alongside, and the base interval T
is frozen to the depth-1 clock value.

Every tree node draws from a counter-based stream keyed by (seed,
replica, word code), so results do not depend on traversal order or
worker count, and the numba and numpy backends consume identical words.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft as _fft
from scipy.special import erfc as _erfc

from . import _kernels, _rng
from ._backend import use_numba
from .errors import ConfigurationError, InputError, ResolutionError
from .green_field import sample_gff

# hard cap on tree width: 2^(d * n_max) nodes per replica
_NODE_BUDGET_LOG2 = 24


def branching_times(d, T, n):
    """Branch time T_n: nT in d=2, geometric growth in d >= 3."""
    if d < 2:
        raise ConfigurationError("branching schedule needs d >= 2, got %r" % (d,))
    if not T > 0:
        raise ConfigurationError("base interval T must be positive, got %r" % (T,))
    n = np.asarray(n)
    if (n < 0).any():
        raise InputError("generation index must be nonnegative")
    if d == 2:
        out = n * float(T)
    else:
        r = 2.0 ** (d - 2)
        out = T * (r ** n.astype(np.float64) - 1.0) / (r - 1.0)
    return float(out) if np.isscalar(n) or n.ndim == 0 else out


def bm_hit_prob(tau):
    """P(sup_{t <= tau} B_t >= 1) = 2(1 - Phi(1/sqrt(tau))) for a
    standard Brownian motion started at 0."""
    tau = np.asarray(tau, dtype=np.float64)
    if (tau < 0).any():
        raise InputError("time must be nonnegative, got %r" % (tau,))
    out = np.where(tau > 0, _erfc(1.0 / np.sqrt(2.0 * np.maximum(tau, 1e-300))), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BranchingSchedule:
    """Branch times of the exploration; threshold level is fixed at 1."""

    d: int
    T: float = 1.0

    threshold = 1.0

    def __post_init__(self):
        branching_times(self.d, self.T, 0)

    def times(self, n):
        return branching_times(self.d, self.T, n)

    def increment(self, k):
        """T_{k+1} - T_k = T * 2^((d-2)k)."""
        return self.T * 2.0 ** ((self.d - 2) * k)

    def sigma(self, k):
        return math.sqrt(self.increment(k))

    def with_T(self, T):
        return BranchingSchedule(self.d, float(T))


def _letters_from_code(code, d):
    code = int(code)
    letters = []
    while code > 1:
        letters.append(code & ((1 << d) - 1))
        code >>= d
    letters.reverse()
    return tuple(letters)


def codes_to_coords(codes, depth, d):
    """Integer cell corners (units of the cell side) for word codes."""
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.zeros((codes.size, d), dtype=np.int64)
    mask = np.uint64((1 << d) - 1)
    for k in range(depth):
        letter = (codes >> np.uint64(d * (depth - 1 - k))) & mask
        for a in range(d):
            bit = ((letter >> np.uint64(d - 1 - a)) & np.uint64(1)).astype(np.int64)
            out[:, a] = (out[:, a] << 1) | bit
    return out


@dataclass
class ObservableRow:
    """One generation's observables for one replica."""

    n: int
    active_count: int
    inactive_count: int
    vol: float
    mass: float
    residual: float = float("nan")


@dataclass
class HarmonicMassSeries:
    """Per-generation inactive volume and active mass for one replica."""

    vol: np.ndarray
    mass: np.ndarray
    residual: np.ndarray = None


@dataclass
class ExplorationState:
    """Full per-replica exploration record.

    active_codes[k] / active_values[k] hold the still-active cells after
    the generation-k checkpoint (K_k); inactive_* [k] hold the cells
    deactivated exactly at generation k with their stopped values.
    Field mode adds per-cell conditional means (gamma), the exact
    intrinsic-clock profile, and the telescoping ledger.
    """

    mode: str
    d: int
    n_max: int
    seed: int
    replica: int
    schedule: BranchingSchedule
    active_codes: list
    active_values: list
    inactive_codes: list
    inactive_values: list
    field: object = None
    active_gamma: list = None
    inactive_gamma: list = None
    inactive_gen: list = None
    clock: np.ndarray = None
    t_field: float = None
    telescope: np.ndarray = None
    telescope_direct: np.ndarray = None
    telescope_residual: np.ndarray = None
    w_gen1: np.ndarray = None

    def active_map(self, n=None):
        """Word -> value map of K_n (letters tuples as keys)."""
        n = self.n_max if n is None else self._check_gen(n)
        codes = self.active_codes[n]
        vals = self.active_values[n]
        return {
            _letters_from_code(c, self.d): float(v) for c, v in zip(codes, vals)
        }

    def inactive_map(self, n=None):
        """Word -> (deactivation generation, stopped value) map of V_n."""
        n = self.n_max if n is None else self._check_gen(n)
        out = {}
        for k in range(1, n + 1):
            for c, v in zip(self.inactive_codes[k], self.inactive_values[k]):
                out[_letters_from_code(c, self.d)] = (k, float(v))
        return out

    def _check_gen(self, n):
        n = int(n)
        if not 0 <= n <= self.n_max:
            raise InputError(
                "generation %d outside the simulated range 0..%d" % (n, self.n_max)
            )
        return n

    def vol_at(self, n):
        n = self._check_gen(n)
        return float(
            sum(
                len(self.inactive_codes[k]) * 2.0 ** (-self.d * k)
                for k in range(1, n + 1)
            )
        )

    def mass_at(self, n):
        n = self._check_gen(n)
        w_sum = float(np.sum(self.active_values[n], dtype=np.float64))
        return -(2.0 ** (-self.d * n)) * w_sum

    def series(self):
        vol = np.array([self.vol_at(n) for n in range(self.n_max + 1)])
        mass = np.array([self.mass_at(n) for n in range(self.n_max + 1)])
        return HarmonicMassSeries(vol, mass, self.telescope_residual)

    def box_count(self, n):
        """Number of depth-n cells meeting the revealed skeleton A.

        A is the union of the domain boundary and the boundaries of all
        cells ever created.  Exact at resolution n: active cells mark
        their closed 3^d neighborhood (their full boundary is in A);
        cells deactivated at depth j mark the inner and outer layer of
        their 2^(n-j)-wide block (only their outer shell is in A);
        deeper skeleton inside active cells adds nothing new at this
        resolution.
        """
        n = self._check_gen(n)
        side = 1 << n
        occ = np.zeros((side,) * self.d, dtype=np.uint8)
        for a in range(self.d):
            sl = [slice(None)] * self.d
            sl[a] = 0
            occ[tuple(sl)] = 1
            sl[a] = side - 1
            occ[tuple(sl)] = 1
        act = codes_to_coords(self.active_codes[n], n, self.d)
        _mark_boxes(occ, act, 1)
        for j in range(1, n + 1):
            cells = codes_to_coords(self.inactive_codes[j], j, self.d)
            _mark_boxes(occ, cells, 1 << (n - j))
        return int(occ.sum())


def observables(state, n):
    """Vol_n, M_n (and ledger residual in field mode) at generation n."""
    n = state._check_gen(n)
    res = float("nan")
    if state.telescope_residual is not None and n >= 1:
        res = float(state.telescope_residual[n])
    return ObservableRow(
        n=n,
        active_count=len(state.active_codes[n]),
        inactive_count=sum(len(state.inactive_codes[k]) for k in range(1, n + 1)),
        vol=state.vol_at(n),
        mass=state.mass_at(n),
        residual=res,
    )


# ---------------------------------------------------------------------------
# BBM surrogate


def _check_tree_budget(d, n_max):
    if d * n_max > _NODE_BUDGET_LOG2:
        raise ResolutionError(
            "tree width 2^%d exceeds the node budget 2^%d; lower n_max"
            % (d * n_max, _NODE_BUDGET_LOG2)
        )


def _bbm_generation_numpy(vals, codes, seed, replica, d, sig):
    """Vectorized twin of the compiled generation kernel.

    Word-for-word identical stream consumption: one ziggurat normal per
    child, then one ziggurat exponential only when the endpoint stayed
    below 1.  Returns (child endpoints, child codes, alive mask).
    """
    nkids = 1 << d
    child_codes = (
        (codes[:, None] << np.uint64(d)) | np.arange(nkids, dtype=np.uint64)
    ).ravel()
    if child_codes.size == 0:
        return np.empty(0), child_codes, np.empty(0, dtype=bool)
    keys = _rng.node_keys(seed, replica, child_codes)
    ctrs = np.ones(child_codes.size, dtype=_rng.U64)
    _rng._ensure_scratch(child_codes.size)
    xi, ctrs = _rng.normal_batch(keys, ctrs)
    step = sig * xi
    a = np.repeat(vals, nkids)
    b = a + step
    alive = b < 1.0
    idx = np.flatnonzero(alive)
    if idx.size:
        e, _ = _rng.exponential_batch(keys[idx], ctrs[idx])
        st = step[idx]
        mx = a[idx] + 0.5 * (st + np.sqrt(st * st + 2.0 * sig * sig * e))
        alive[idx[mx >= 1.0]] = False
    return b, child_codes, alive


def run_bbm(sched, n_max, seed, replica=0):
    """Simulate one BBM exploration replica, keeping the full state.

    Deterministic function of (seed, replica): node streams are keyed by
    word code, so the same cells receive the same randomness regardless
    of backend or traversal order.
    """
    _check_tree_budget(sched.d, n_max)
    d = sched.d
    active_codes = [np.array([1], dtype=np.uint64)]
    active_values = [np.zeros(1)]
    inactive_codes = [np.empty(0, dtype=np.uint64)]
    inactive_values = [np.empty(0)]
    for k in range(1, n_max + 1):
        vals, codes = active_values[k - 1], active_codes[k - 1]
        sig = sched.sigma(k - 1)
        b, child_codes, alive = _bbm_generation_numpy(
            vals, codes, np.uint64(seed), np.uint64(replica), d, sig
        )
        active_values.append(b[alive])
        active_codes.append(child_codes[alive])
        inactive_codes.append(child_codes[~alive])
        # first-passage stops exactly at the threshold
        inactive_values.append(np.ones(int((~alive).sum())))
    return ExplorationState(
        mode="bbm",
        d=d,
        n_max=n_max,
        seed=int(seed),
        replica=int(replica),
        schedule=sched,
        active_codes=active_codes,
        active_values=active_values,
        inactive_codes=inactive_codes,
        inactive_values=inactive_values,
    )


@dataclass
class TraceBundle:
    """Per-replica, per-generation observables for an ensemble."""

    mode: str
    d: int
    n_max: int
    seed: int
    replicas: int
    schedule: BranchingSchedule
    vol: np.ndarray
    mass: np.ndarray
    active_counts: np.ndarray
    inactive_counts: np.ndarray
    box_levels: np.ndarray = None
    box_counts: np.ndarray = None
    residual_max: np.ndarray = None
    clock: np.ndarray = None
    t_field: float = None
    w1_samples: np.ndarray = None

    def merged(self, other):
        if (self.mode, self.d, self.n_max, self.seed) != (
            other.mode,
            other.d,
            other.n_max,
            other.seed,
        ):
            raise InputError("cannot merge bundles from different runs")
        join = lambda a, b: None if a is None else np.concatenate([a, b])
        return TraceBundle(
            self.mode,
            self.d,
            self.n_max,
            self.seed,
            self.replicas + other.replicas,
            self.schedule,
            join(self.vol, other.vol),
            join(self.mass, other.mass),
            join(self.active_counts, other.active_counts),
            join(self.inactive_counts, other.inactive_counts),
            self.box_levels,
            join(self.box_counts, other.box_counts),
            join(self.residual_max, other.residual_max),
            self.clock,
            self.t_field,
            join(self.w1_samples, other.w1_samples),
        )


def _bbm_chunk(d, T, n_max, seed, rep0, reps):
    sched = BranchingSchedule(d, T)
    ngen = n_max + 1
    vol = np.zeros((reps, ngen))
    mass = np.zeros((reps, ngen))
    kc = np.zeros((reps, ngen), dtype=np.int64)
    vc = np.zeros((reps, ngen), dtype=np.int64)
    compiled = use_numba()
    if compiled:
        cap = 1 << d
        vals = np.zeros(cap)
        codes = np.ones(cap, dtype=np.uint64)
        vals2 = np.zeros(cap)
        codes2 = np.ones(cap, dtype=np.uint64)
    for r in range(reps):
        rep = rep0 + r
        if compiled:
            vals[0] = 0.0
            codes[0] = 1
            n_act = 1
            dead_vol = 0.0
            kc[r, 0] = 1
            for k in range(1, ngen):
                need = n_act << d
                if need > vals2.size:
                    vals2 = np.zeros(need)
                    codes2 = np.ones(need, dtype=np.uint64)
                n_act, n_hit = _kernels.bbm_generation(
                    vals,
                    codes,
                    n_act,
                    np.uint64(seed),
                    np.uint64(rep),
                    d,
                    sched.sigma(k - 1),
                    vals2,
                    codes2,
                )
                vals, vals2 = vals2, vals
                codes, codes2 = codes2, codes
                dead_vol += n_hit * 2.0 ** (-d * k)
                vol[r, k] = dead_vol
                mass[r, k] = -(2.0 ** (-d * k)) * float(
                    np.sum(vals[:n_act], dtype=np.float64)
                )
                kc[r, k] = n_act
                vc[r, k] = vc[r, k - 1] + n_hit
        else:
            v = np.zeros(1)
            c = np.ones(1, dtype=np.uint64)
            dead_vol = 0.0
            kc[r, 0] = 1
            for k in range(1, ngen):
                b, cc, alive = _bbm_generation_numpy(
                    v, c, np.uint64(seed), np.uint64(rep), d, sched.sigma(k - 1)
                )
                v, c = b[alive], cc[alive]
                n_hit = int((~alive).sum())
                dead_vol += n_hit * 2.0 ** (-d * k)
                vol[r, k] = dead_vol
                mass[r, k] = -(2.0 ** (-d * k)) * float(np.sum(v, dtype=np.float64))
                kc[r, k] = v.size
                vc[r, k] = vc[r, k - 1] + n_hit
    return vol, mass, kc, vc


def bbm_ensemble(sched, n_max, seed, replicas, workers=1):
    """Observable matrices over independent BBM replicas.

    Replica r uses stream family (seed, r); results are reduced in
    replica order regardless of worker count.
    """
    _check_tree_budget(sched.d, n_max)
    if replicas < 1:
        raise InputError("need at least one replica")
    parts = _run_chunked(
        _bbm_chunk,
        (sched.d, sched.T, n_max, seed),
        replicas,
        workers,
    )
    vol, mass, kc, vc = (np.concatenate(by) for by in zip(*parts))
    return TraceBundle(
        "bbm", sched.d, n_max, int(seed), replicas, sched, vol, mass, kc, vc
    )


def lineage_active_counts(sched, n_max, seed, replicas):
    """How many of `replicas` fixed-lineage walks survive each generation.

    Follows the all-zeros letter path of the full tree with identical
    stream keys, so the counts are the exact tree marginal of one
    lineage.
    """
    sigs = np.array([sched.sigma(k) for k in range(n_max)])
    alive = np.zeros(n_max, dtype=np.int64)
    if use_numba():
        _kernels.lineage_chain(np.uint64(seed), replicas, sched.d, sigs, alive)
        return alive
    d = sched.d
    reps = np.arange(replicas, dtype=np.uint64)
    a = np.zeros(replicas)
    live = np.ones(replicas, dtype=bool)
    code = np.uint64(1)
    for k in range(n_max):
        code = code << np.uint64(d)
        idx = np.flatnonzero(live)
        keys = _rng.node_keys(np.uint64(seed), reps[idx], code)
        ctrs = np.ones(idx.size, dtype=_rng.U64)
        _rng._ensure_scratch(idx.size)
        xi, ctrs = _rng.normal_batch(keys, ctrs)
        sig = sigs[k]
        step = sig * xi
        b = a[idx] + step
        dead = b >= 1.0
        sub = np.flatnonzero(~dead)
        if sub.size:
            e, _ = _rng.exponential_batch(keys[sub], ctrs[sub])
            st = step[sub]
            mx = a[idx[sub]] + 0.5 * (st + np.sqrt(st * st + 2.0 * sig * sig * e))
            dead[sub] = mx >= 1.0
        live[idx[dead]] = False
        a[idx[~dead]] = b[~dead]
        alive[k] = int(live.sum())
    return alive


# ---------------------------------------------------------------------------
# field-coupled mode


def _box_poisson_weights(d, K):
    """Boundary-to-mass quadrature weights of a K^d-interval dyadic box.

    Solves the box Poisson problem L phi = 1 (zero boundary) spectrally;
    the conditional mean of the open-cell mass given boundary data g is
    sum_v g(v) * phi(inward neighbor of v) over face-interior boundary
    vertices v.  Returns integer vertex offsets relative to the cell
    corner (lattice units) and the weights.
    """
    j = np.arange(1, K)
    mu = 2.0 - 2.0 * np.cos(np.pi * j / K)
    lam = mu
    for _ in range(d - 1):
        lam = lam[..., None] + mu
    ones = np.ones((K - 1,) * d)
    phi = _fft.dstn(_fft.dstn(ones, type=1) / lam, type=1) / float((2 * K) ** d)
    rel = []
    wts = []
    face_shape = (K - 1,) * (d - 1)
    for a in range(d):
        for s in (0, 1):
            for pos in np.ndindex(*face_shape):
                v = np.empty(d, dtype=np.int64)
                inw = np.empty(d, dtype=np.int64)
                o = 0
                for ax in range(d):
                    if ax == a:
                        v[ax] = 0 if s == 0 else K
                        inw[ax] = 0 if s == 0 else K - 2
                    else:
                        v[ax] = pos[o] + 1
                        inw[ax] = pos[o]
                        o += 1
                rel.append(v.copy())
                wts.append(float(phi[tuple(inw)]))
    return np.array(rel, dtype=np.int64), np.array(wts)


class _FieldPrep:
    """Per-(domain, n_max) precomputation for field-coupled runs."""

    def __init__(self, op, n_max):
        dom = op.domain
        d, m = dom.d, dom.m
        self.n_max = n_max
        self.rel = {}
        self.wts = {}
        clock = np.zeros(n_max + 1)
        for k in range(1, n_max + 1):
            K = m >> k
            rel, wts = _box_poisson_weights(d, K)
            self.rel[k] = rel
            self.wts[k] = wts
            # exact Var(W_k) for a reference interior cell at depth k
            ref = np.full(d, 1 << max(k - 1, 0), dtype=np.int64)
            if k == 1:
                ref[:] = 1
            w_full = np.zeros(dom.interior_shape)
            base = ref * K
            for q in range(rel.shape[0]):
                g = base + rel[q]
                if ((g < 1) | (g > m - 1)).any():
                    continue
                w_full[tuple(g - 1)] += wts[q]
            raw = op.green_quadratic_form(w_full)
            clock[k] = (2.0 ** (2 * d * k)) * raw
        self.clock = clock
        self.t_field = float(clock[1])


def _field_prep(op, n_max):
    cache = getattr(op, "_exploration_prep", None)
    if cache is None or cache.n_max < n_max:
        cache = _FieldPrep(op, n_max)
        op._exploration_prep = cache
    return cache


def _gather_cells_numpy(field_flat, cells, scale, rel, wts, m, strides):
    """Vectorized twin of the compiled gather: same accumulation order
    over boundary offsets, so sums agree bit for bit."""
    out = np.zeros(cells.shape[0])
    for q in range(rel.shape[0]):
        g = cells * scale + rel[q]
        valid = ((g >= 1) & (g <= m - 1)).all(axis=1)
        flat = ((g - 1) * strides).sum(axis=1)
        vals = field_flat[np.where(valid, flat, 0)].astype(np.float64)
        out += np.where(valid, wts[q] * vals, 0.0)
    return out


def _gather(field_flat, cells, scale, rel, wts, m, strides):
    if use_numba() and cells.shape[0] > 0:
        out = np.empty(cells.shape[0])
        _kernels.gather_cells(field_flat, cells, scale, rel, wts, m, strides, out)
        return out
    return _gather_cells_numpy(field_flat, cells, scale, rel, wts, m, strides)


def _mark_boxes_numpy(occ, cells, scale):
    side = occ.shape[0]
    d = occ.ndim
    for i in range(cells.shape[0]):
        lo = cells[i] * scale
        hi = lo + scale
        region = [slice(max(int(lo[a]) - 1, 0), min(int(hi[a]) + 1, side)) for a in range(d)]
        for a in range(d):
            for edge in (int(lo[a]) - 1, int(hi[a]) - 1):
                sl = list(region)
                sl[a] = slice(max(edge, 0), min(edge + 2, side))
                occ[tuple(sl)] = 1


def _mark_boxes(occ, cells, scale):
    if cells.shape[0] == 0:
        return
    if use_numba() and occ.ndim in (2, 3):
        fn = _kernels.mark_boxes_2d if occ.ndim == 2 else _kernels.mark_boxes_3d
        fn(occ, np.ascontiguousarray(cells), scale)
        return
    _mark_boxes_numpy(occ, cells, scale)


def _cell_box_sum(field, coords, K):
    """Open-cell interior sums, float64-accumulated, one cell per row."""
    out = np.empty(coords.shape[0])
    for i in range(coords.shape[0]):
        sl = tuple(slice(int(c) * K, (int(c) + 1) * K - 1) for c in coords[i])
        out[i] = float(np.sum(field[sl], dtype=np.float64))
    return out


def run_field_coupled(op, sched, n_max, seed, replica=0, keep_field=True):
    """Explore one sampled lattice field level by level.

    Reveals mid-hyperplane values only inside active cells, tracks the
    per-cell conditional means gamma (exact given revealed data), and
    maintains the telescoping ledger

        R_k = sum(active gamma) + sum(stopped gamma)
              + h^d * (revealed skeleton mass inside explored cells),

    which equals the conditional mean of the total field mass given the
    revealed data, exactly, at every generation.  The reported residual
    compares the incrementally maintained R_k against a from-scratch
    resummation, relative to the total absolute ledger mass.
    """
    dom = op.domain
    d, m = dom.d, dom.m
    if sched is None:
        sched = BranchingSchedule(d)
    if sched.d != d:
        raise ConfigurationError(
            "schedule dimension %d does not match the domain (%d)" % (sched.d, d)
        )
    if (m >> n_max) < 4:
        raise ResolutionError(
            "depth-%d cells span fewer than 4 mesh intervals at m=%d" % (n_max, m)
        )
    prep = _field_prep(op, n_max)
    sched = sched.with_T(prep.t_field)
    field = sample_gff(op, seed, replica)
    fvals = field.values
    fflat = np.ascontiguousarray(fvals).ravel()
    strides = dom.strides()
    hd = dom.h**d

    active_codes = [np.array([1], dtype=np.uint64)]
    active_coords = [np.zeros((1, d), dtype=np.int64)]
    active_gamma = [np.zeros(1)]
    active_values = [np.zeros(1)]
    active_boxsum = [_cell_box_sum(fvals, active_coords[0], m)]
    inactive_codes = [np.empty(0, dtype=np.uint64)]
    inactive_values = [np.empty(0)]
    inactive_gamma = [np.empty(0)]

    ledger = 0.0
    skeleton_parts = []
    gamma_parts = []
    telescope = np.zeros(n_max + 1)
    telescope_direct = np.zeros(n_max + 1)
    residual = np.zeros(n_max + 1)
    abs_scale = 0.0

    nkids = 1 << d
    bits = np.array(
        [[(letter >> (d - 1 - a)) & 1 for a in range(d)] for letter in range(nkids)],
        dtype=np.int64,
    )
    for k in range(1, n_max + 1):
        K = m >> k
        p_coords = active_coords[k - 1]
        p_codes = active_codes[k - 1]
        p_gamma = active_gamma[k - 1]
        p_box = active_boxsum[k - 1]
        c_coords = (p_coords[:, None, :] * 2 + bits[None, :, :]).reshape(-1, d)
        c_codes = (
            (p_codes[:, None] << np.uint64(d)) | np.arange(nkids, dtype=np.uint64)
        ).ravel()
        raw = _gather(fflat, c_coords, K, prep.rel[k], prep.wts[k], m, strides)
        gamma = hd * raw
        w_vals = (2.0 ** (d * k)) * gamma
        if k == 1:
            w_gen1 = w_vals.copy()
        c_box = _cell_box_sum(fvals, c_coords, K)
        cross = p_box - c_box.reshape(-1, nkids).sum(axis=1)
        ledger += (
            float(np.sum(gamma, dtype=np.float64))
            + hd * float(np.sum(cross, dtype=np.float64))
            - float(np.sum(p_gamma, dtype=np.float64))
        )
        skeleton_parts.append(cross)
        hit = w_vals >= 1.0
        inactive_codes.append(c_codes[hit])
        inactive_values.append(w_vals[hit])
        inactive_gamma.append(gamma[hit])
        gamma_parts.append(gamma[hit])
        active_codes.append(c_codes[~hit])
        active_coords.append(c_coords[~hit])
        active_gamma.append(gamma[~hit])
        active_values.append(w_vals[~hit])
        active_boxsum.append(c_box[~hit])

        direct = (
            float(np.sum(active_gamma[k], dtype=np.float64))
            + float(np.sum(np.concatenate(gamma_parts), dtype=np.float64))
            + hd * float(np.sum(np.concatenate(skeleton_parts), dtype=np.float64))
        )
        abs_scale = (
            float(np.sum(np.abs(active_gamma[k])))
            + float(np.sum(np.abs(np.concatenate(gamma_parts))))
            + hd * float(np.sum(np.abs(np.concatenate(skeleton_parts))))
        )
        telescope[k] = ledger
        telescope_direct[k] = direct
        residual[k] = abs(ledger - direct) / max(abs_scale, 1e-12)

    return ExplorationState(
        mode="field",
        d=d,
        n_max=n_max,
        seed=int(seed),
        replica=int(replica),
        schedule=sched,
        active_codes=active_codes,
        active_values=active_values,
        inactive_codes=inactive_codes,
        inactive_values=inactive_values,
        field=field if keep_field else None,
        active_gamma=active_gamma,
        inactive_gamma=inactive_gamma,
        clock=prep.clock,
        t_field=prep.t_field,
        telescope=telescope,
        telescope_direct=telescope_direct,
        telescope_residual=residual,
        w_gen1=w_gen1,
    )


def _field_chunk(d, m, side, T, n_max, seed, levels, rep0, reps):
    from .green_field import LatticeDomain, build_greens

    op = build_greens(LatticeDomain(d, m, side))
    sched = BranchingSchedule(d, T if T else 1.0)
    ngen = n_max + 1
    vol = np.zeros((reps, ngen))
    mass = np.zeros((reps, ngen))
    kc = np.zeros((reps, ngen), dtype=np.int64)
    vc = np.zeros((reps, ngen), dtype=np.int64)
    boxes = np.zeros((reps, len(levels)), dtype=np.int64)
    resid = np.zeros(reps)
    w1 = np.zeros(reps)
    clock = None
    t_field = None
    for r in range(reps):
        st = run_field_coupled(op, sched, n_max, seed, replica=rep0 + r, keep_field=False)
        clock = st.clock
        t_field = st.t_field
        ser = st.series()
        vol[r] = ser.vol
        mass[r] = ser.mass
        kc[r] = [len(c) for c in st.active_codes]
        vc[r] = np.cumsum([len(c) for c in st.inactive_codes])
        for i, lev in enumerate(levels):
            boxes[r, i] = st.box_count(lev)
        resid[r] = float(np.max(st.telescope_residual))
        # letter-0 child's unstopped W, one per replica: an unbiased
        # sample of the generation-1 marginal
        w1[r] = float(st.w_gen1[0])
    return vol, mass, kc, vc, boxes, resid, w1, clock, t_field


def field_ensemble(op, n_max, seed, replicas, count_levels=None, workers=1):
    """Field-coupled ensemble with box counts and ledger residuals."""
    dom = op.domain
    if count_levels is None:
        count_levels = list(range(1, n_max + 1))
    levels = tuple(int(v) for v in count_levels)
    parts = _run_chunked(
        _field_chunk,
        (dom.d, dom.m, dom.side, 0.0, n_max, seed, levels),
        replicas,
        workers,
    )
    vol, mass, kc, vc, boxes, resid, w1 = (
        np.concatenate([p[i] for p in parts]) for i in range(7)
    )
    clock = parts[0][7]
    t_field = parts[0][8]
    return TraceBundle(
        "field",
        dom.d,
        n_max,
        int(seed),
        replicas,
        BranchingSchedule(dom.d, t_field),
        vol,
        mass,
        kc,
        vc,
        np.array(levels),
        boxes,
        resid,
        clock,
        t_field,
        w1,
    )


def marginal_law_report(bundle):
    """KS distance of the generation-1 W sample against N(0, clock_1).

    Reported, not asserted: the lattice time-change matches the BM
    marginal only as the mesh refines.
    """
    from scipy import stats

    if bundle.w1_samples is None or bundle.t_field is None:
        raise InputError("marginal-law report needs a field-coupled bundle")
    sd = math.sqrt(bundle.t_field)
    res = stats.kstest(bundle.w1_samples, "norm", args=(0.0, sd))
    return {"ks_distance": float(res.statistic), "pvalue": float(res.pvalue)}


# ---------------------------------------------------------------------------
# chunked replica execution


def _run_chunked(fn, args, replicas, workers):
    """Run fn(*args, rep0, reps) over replica blocks, in replica order.

    Results are reduced in block order whatever the worker count, so a
    run is reproducible for fixed (seed, replicas).
    """
    workers = max(1, int(workers))
    if workers == 1:
        return [fn(*args, 0, replicas)]
    block = (replicas + workers - 1) // workers
    starts = list(range(0, replicas, block))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(fn, *args, s, min(block, replicas - s)) for s in starts]
        return [f.result() for f in futs]


def write_trace(path, bundle, state=None, verbose=False):
    """Write one JSON record per (replica, generation).

    With verbose=True and a full single-replica state, appends cell-level
    dumps (word code and value per active cell), refusing oversized
    states.
    """
    rows = []
    for r in range(bundle.replicas):
        for n in range(bundle.n_max + 1):
            rows.append(
                {
                    "replica": r,
                    "n": n,
                    "k_count": int(bundle.active_counts[r, n]),
                    "v_count": int(bundle.inactive_counts[r, n]),
                    "vol": float(bundle.vol[r, n]),
                    "mass": float(bundle.mass[r, n]),
                }
            )
    if verbose and state is not None:
        total = sum(len(c) for c in state.active_codes)
        if total > 1 << 20:
            raise InputError(
                "cell-level dump of %d cells exceeds the size guard" % total
            )
        for n in range(state.n_max + 1):
            rows.append(
                {
                    "replica": state.replica,
                    "n": n,
                    "cells": [
                        [int(c), float(v)]
                        for c, v in zip(state.active_codes[n], state.active_values[n])
                    ],
                }
            )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    except OSError as exc:
        from .errors import OutputError

        raise OutputError("cannot write trace file %s: %s" % (path, exc)) from exc

"""Thinness test battery for exploration sets and deterministic sets.

Monte Carlo statistics are fold-style reductions over independent
replicas.  All reductions use numpy's pairwise summation over arrays
ordered by replica id, so reports are reproducible for a fixed
(seed, replicas) whatever the worker count.

Threshold statistics in d=2 are calibrated two ways.  The literal
constants assume a domain scaled into a ball of radius 1/4, which is not
our box; by default the threshold is rescaled by the measured per-cell
standard deviation at each level (an exact Green-form computation), and
the strict mode keeps the printed constants for side-by-side reading.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _stats

from . import dyadic as _dyadic
from .errors import ConfigurationError, InputError, ResolutionError
from .exploration import bm_hit_prob, run_field_coupled
from .green_field import cell_variance, markov_decompose, pair, sample_gff

# per-cell mass SD constant in d=2: sd ~ KAPPA2 * sqrt(n) / 4^n
KAPPA2 = math.sqrt(math.log(2.0) / (2.0 * math.pi))


def log_level(n):
    """log n + 2 log log n (natural logs); positive from n = 3 on."""
    n = int(n)
    if n < 3:
        raise InputError(
            "threshold level needs n >= 3 (the log-log term is negative below)"
        )
    return math.log(n) + 2.0 * math.log(math.log(n))


@dataclass(frozen=True)
class ThresholdSpec:
    """Exceedance threshold at one level, with per-cell normalizations."""

    n: int
    m_n: float
    sigma_ref: float
    mode: str

    def alpha(self, op, cell):
        """Threshold in units of the cell's own mass SD."""
        sd = math.sqrt(cell_variance(op, cell))
        if sd <= 0:
            raise InputError("cell has zero mass variance")
        return self.m_n / sd

    def correlation(self, op, cell_x, cell_y):
        """Mass correlation of two cells, in [0, 1) for distinct cells."""
        vx = cell_variance(op, cell_x)
        vy = cell_variance(op, cell_y)
        cov = cell_variance(op, cell_x, cell_y)
        return cov / math.sqrt(vx * vy)


def threshold_spec(op, n, strict=False):
    """Level-n exceedance threshold m_n (d=2).

    strict=True keeps the printed constant sqrt(log 2)/sqrt(2 pi);
    otherwise the sqrt(n)4^-n * constant factor is replaced by the
    measured mass SD of a reference interior cell at this level, which
    is what the derivation's variance asymptotics mean on our domain.
    """
    dom = op.domain
    if dom.d != 2:
        raise InputError("threshold statistics are calibrated for d=2 only")
    ell = log_level(n)
    if (dom.m >> n) < 2:
        raise ResolutionError(
            "level %d cells have no interior vertices at m=%d" % (n, dom.m)
        )
    if strict:
        sigma = KAPPA2 * math.sqrt(n) * 4.0**-n
        return ThresholdSpec(n, sigma * math.sqrt(ell), sigma, "paper")
    ref = np.full(2, 1 << (n - 1), dtype=np.int64)
    sigma = math.sqrt(cell_variance(op, (ref, n)))
    return ThresholdSpec(n, sigma * math.sqrt(ell), sigma, "measured")


# ---------------------------------------------------------------------------
# cell-mass machinery (shared prefix-sum tables)


def build_cell_sum_table(values, dom):
    """Padded prefix-sum table for O(1) open-cell mass sums.

    One allocation, then in-place accumulation; the leading zero slab
    per axis makes the inclusion-exclusion corners branch-free.
    """
    sat = np.zeros((dom.m,) * dom.d)
    sat[(slice(1, None),) * dom.d] = values
    for a in range(dom.d):
        np.cumsum(sat, axis=a, out=sat)
    return sat


def all_cell_sums(values, dom, n, sat=None):
    """Raw interior-vertex sums of every open depth-n cell.

    Returns a (2^n,)^d array; multiply by h^d for pairings.  A vertex on
    a dyadic face belongs to the face and to no open cell.
    """
    k = dom.m >> n
    if k < 2:
        raise ResolutionError(
            "level %d cells have no interior vertices at m=%d" % (n, dom.m)
        )
    if sat is None:
        sat = build_cell_sum_table(values, dom)
    side = 1 << n
    hi = (np.arange(side) + 1) * k - 1
    lo = np.arange(side) * k
    out = np.zeros((side,) * dom.d)
    for corner in range(1 << dom.d):
        idx = []
        sign = 1
        for a in range(dom.d):
            if (corner >> a) & 1:
                idx.append(lo)
                sign = -sign
            else:
                idx.append(hi)
        out += sign * sat[np.ix_(*idx)]
    return out


def sup_cell_statistic(op, beta, n, seed=None, field=None):
    """sup over depth-n cells of |(Gamma, 1_s)| * 2^(beta n), one replica.

    With neither seed nor field the zero field is used (debug mode) and
    the statistic is 0.
    """
    if not beta > 0:
        raise InputError("scaling exponent beta must be positive")
    dom = op.domain
    if (dom.m >> n) < 2:
        raise ResolutionError(
            "level %d cells are below the lattice resolution at m=%d" % (n, dom.m)
        )
    if field is None:
        if seed is None:
            return 0.0
        field = sample_gff(op, seed)
    sums = all_cell_sums(field.values, dom, n)
    return float(np.abs(sums).max() * dom.h**dom.d * 2.0 ** (beta * n))


def sup_cell_profile(op, betas, levels, seed, replicas):
    """Median sup-cell statistics over replicas, sharing fields.

    Returns an array med[i, j] over (beta_i, level_j).
    """
    dom = op.domain
    betas = [float(b) for b in betas]
    levels = [int(n) for n in levels]
    stats = np.zeros((replicas, len(betas), len(levels)))
    for r in range(replicas):
        f = sample_gff(op, seed, replica=r)
        sat = build_cell_sum_table(f.values, dom)
        for j, n in enumerate(levels):
            sup_raw = float(np.abs(all_cell_sums(None, dom, n, sat=sat)).max())
            for i, b in enumerate(betas):
                stats[r, i, j] = sup_raw * dom.h**dom.d * 2.0 ** (b * n)
    return np.median(stats, axis=0), stats


def _piece_sum(sat, dom, lo, hi):
    """Interior-vertex sum over the open box (lo, hi), exact via the
    prefix table.  Endpoints are dyadic or half-dyadic, so the vertex
    range is computed without rounding error."""
    los = []
    his = []
    for a in range(dom.d):
        xl = lo[a] * dom.m
        xh = hi[a] * dom.m
        vl = max(int(math.floor(xl)) + 1, 1)
        vh = min(int(math.ceil(xh)) - 1, dom.m - 1)
        if vh < vl:
            return 0.0
        los.append(vl)
        his.append(vh)
    total = 0.0
    for corner in range(1 << dom.d):
        idx = []
        sign = 1
        for a in range(dom.d):
            if (corner >> a) & 1:
                idx.append(los[a] - 1)
                sign = -sign
            else:
                idx.append(his[a])
        total += sign * sat[tuple(idx)]
    return total


def indicator_sum(op, field, A, n, scheme=None):
    """Sum of |(Gamma, 1_s)| over level-n scheme pieces meeting A."""
    dom = op.domain
    ap = _dyadic.approximate(A, n, scheme=scheme, dom=dom)
    if ap.count == 0:
        return 0.0
    sat = build_cell_sum_table(field.values, dom)
    total = 0.0
    for p in ap.hit_pieces:
        total += abs(_piece_sum(sat, dom, p.lo, p.hi) * dom.h**dom.d)
    return total


def exceedance_stats(op, field, n, spec=None, strict=False):
    """Count and sum of cell masses exceeding the level threshold (d=2)."""
    dom = op.domain
    if dom.d != 2:
        raise InputError("exceedance statistics are defined for d=2 only")
    if spec is None:
        spec = threshold_spec(op, n, strict=strict)
    sums = np.abs(all_cell_sums(field.values, dom, n)) * dom.h**dom.d
    exceed = sums >= spec.m_n
    return {
        "R_n": int(exceed.sum()),
        "S_sum": float(np.sum(sums[exceed], dtype=np.float64)),
        "m_n": spec.m_n,
    }


def exceedance_battery(op, levels, replicas, seed, strict=False):
    """Replica matrices of R_n and S_sum across levels."""
    dom = op.domain
    levels = [int(n) for n in levels]
    specs = {n: threshold_spec(op, n, strict=strict) for n in levels}
    r_mat = np.zeros((replicas, len(levels)), dtype=np.int64)
    s_mat = np.zeros((replicas, len(levels)))
    for r in range(replicas):
        f = sample_gff(op, seed, replica=r)
        sat = build_cell_sum_table(f.values, dom)
        for j, n in enumerate(levels):
            sums = np.abs(all_cell_sums(None, dom, n, sat=sat)) * dom.h**dom.d
            exceed = sums >= specs[n].m_n
            r_mat[r, j] = int(exceed.sum())
            s_mat[r, j] = float(np.sum(sums[exceed], dtype=np.float64))
    return {"levels": levels, "R": r_mat, "S": s_mat, "specs": specs}


# ---------------------------------------------------------------------------
# moment reports


@dataclass
class ReportRow:
    n: int
    statistic: str
    estimate: float
    se: float
    oracle: float = float("nan")
    z: float = float("nan")


@dataclass
class MomentReport:
    replicas: int
    rows: list = field(default_factory=list)

    def by_stat(self, name):
        return [r for r in self.rows if r.statistic == name]


def moment_report(traces, n_range=None):
    """Per-level means, second moments, and oracle z-scores.

    traces is an exploration TraceBundle; the oracle column is the
    Brownian hitting probability at the schedule time of each level.
    """
    if traces is None or traces.replicas == 0:
        raise InputError("empty replica stream")
    if traces.replicas < 100:
        raise InputError(
            "moment_report needs at least 100 replicas, got %d" % traces.replicas
        )
    if n_range is None:
        n_range = range(1, traces.n_max + 1)
    rep = MomentReport(replicas=traces.replicas)
    root_r = math.sqrt(traces.replicas)
    for n in n_range:
        n = int(n)
        if not 0 <= n <= traces.n_max:
            raise InputError("level %d outside the simulated range" % n)
        oracle = bm_hit_prob(traces.schedule.times(n))
        for name, col in (("vol_mean", traces.vol[:, n]), ("mass_mean", traces.mass[:, n])):
            est = float(np.mean(col))
            se = float(np.std(col, ddof=1) / root_r) if traces.replicas > 1 else 0.0
            z = (est - oracle) / se if se > 0 else float("nan")
            rep.rows.append(ReportRow(n, name, est, se, oracle, z))
        sq = traces.mass[:, n] ** 2
        est = float(np.mean(sq))
        se = float(np.std(sq, ddof=1) / root_r) if traces.replicas > 1 else 0.0
        rep.rows.append(ReportRow(n, "mass_second_moment", est, se))
    return rep


# ---------------------------------------------------------------------------
# Gaussian inequality


def truncated_second_moment(p):
    """E[X^2; X^2 > x(p)] for standard normal X, P(X^2 > x(p)) = p.

    Closed form p + 2 a phi(a) with a the two-sided p-quantile; the
    optimal event for the Gaussian bound, p = 1 giving the full variance.
    """
    if not 0 < p <= 1:
        raise InputError("probability must lie in (0, 1], got %r" % (p,))
    a = _stats.norm.isf(p / 2.0)
    return p + 2.0 * a * _stats.norm.pdf(a)


def gaussian_bound_ratio(p):
    """truncated_second_moment(p) / (p log(1/p)), the quantity whose
    supremum is the constant in the Gaussian inequality."""
    if not 0 < p < 1:
        raise InputError("ratio defined for p in (0, 1), got %r" % (p,))
    return truncated_second_moment(p) / (p * math.log(1.0 / p))


@dataclass
class GaussianBoundReport:
    fitted_C: float
    argmax_p: float
    p_grid: np.ndarray
    bivariate: list
    max_bivariate_ratio: float
    ok: bool


def _bivariate_orthant_moment(rho, s, nodes=320):
    """E[XY; X > s, Y > s] and P(X > s, Y > s) for correlation rho,
    by tensor Gauss-Legendre quadrature on the upper-right quadrant."""
    hi = max(10.0, s + 10.0)
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (hi - s) * (x + 1.0) + s
    w = 0.5 * (hi - s) * w
    xx = x[:, None]
    yy = x[None, :]
    det = 1.0 - rho * rho
    dens = np.exp(-(xx * xx - 2.0 * rho * xx * yy + yy * yy) / (2.0 * det)) / (
        2.0 * math.pi * math.sqrt(det)
    )
    ww = w[:, None] * w[None, :]
    prob = float(np.sum(dens * ww))
    mom = float(np.sum(dens * ww * xx * yy))
    return mom, prob


def _solve_orthant_level(rho, p):
    lo, hi = -6.0, 8.0
    for _ in range(70):
        mid = 0.5 * (lo + hi)
        _, prob = _bivariate_orthant_moment(rho, mid, nodes=200)
        if prob > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_bound_check(rho_grid=None, p_grid=None):
    """Fit the constant of E[XY 1_E] <= C max(Var) P(E) log(1/P(E)).

    The symmetric case X = Y is maximized in closed form over the p
    grid; the general bivariate case is spot-checked by 2-D quadrature
    on joint-threshold events for each correlation in rho_grid.
    """
    if p_grid is None:
        p_grid = np.logspace(-6, math.log10(0.5), 240)
    if rho_grid is None:
        rho_grid = (0.25, 0.5, 0.75)
    p_grid = np.asarray(p_grid, dtype=np.float64)
    if ((p_grid <= 0) | (p_grid >= 1)).any():
        raise InputError("p grid must lie strictly inside (0, 1)")
    rho_grid = np.asarray(rho_grid, dtype=np.float64)
    if ((rho_grid <= 0) | (rho_grid >= 1)).any():
        raise InputError("rho grid must lie strictly inside (0, 1)")
    ratios = np.array([gaussian_bound_ratio(p) for p in p_grid])
    fitted = float(ratios.max())
    argmax_p = float(p_grid[int(ratios.argmax())])
    checks = []
    worst = 0.0
    for rho in rho_grid:
        for p in (0.05, 0.2):
            s = _solve_orthant_level(float(rho), p)
            mom, prob = _bivariate_orthant_moment(float(rho), s)
            ratio = mom / (prob * math.log(1.0 / prob))
            worst = max(worst, ratio)
            checks.append(
                {
                    "rho": float(rho),
                    "p": float(prob),
                    "threshold": float(s),
                    "moment": float(mom),
                    "ratio": float(ratio),
                }
            )
    return GaussianBoundReport(
        fitted_C=fitted,
        argmax_p=argmax_p,
        p_grid=p_grid,
        bivariate=checks,
        max_bivariate_ratio=float(worst),
        ok=worst <= fitted + 1e-9,
    )


# ---------------------------------------------------------------------------
# deterministic sets


def _weight_on_grid(dom, f):
    if f is None:
        return np.ones(dom.interior_shape)
    if callable(f):
        axes = [np.arange(1, dom.m) * dom.h for _ in range(dom.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.asarray(f(*mesh), dtype=np.float64)
    w = np.asarray(f, dtype=np.float64)
    if w.shape != dom.interior_shape:
        raise InputError("weight array must match the interior grid")
    return w


def deterministic_thin_report(op, A, f=None, n_range=None, scheme=None):
    """Exact variance of (Gamma, f 1_{A_n}) per level; no Monte Carlo.

    A_n is the union of closed scheme pieces meeting A.  Level 0 is the
    whole domain whenever A is nonempty.
    """
    dom = op.domain
    if n_range is None:
        n_range = range(0, int(math.log2(dom.m)) - 1)
    fw = _weight_on_grid(dom, f)
    levels = []
    variances = []
    for n in n_range:
        n = int(n)
        ap = _dyadic.approximate(A, n, scheme=scheme, dom=dom)
        w = ap.interior_indicator(dom) * fw
        variances.append(op.green_quadratic_form(w))
        levels.append(n)
    return {"levels": levels, "variance": np.array(variances)}


def cord_union_bound(op, A, B, f=None, n_range=None):
    """Per-level Cauchy-Schwarz union bound data for two sets.

    Returns lhs = Var over A union B and rhs = VarA + VarB +
    2 sqrt(VarA VarB); thinness of unions follows when lhs <= rhs, which
    holds exactly here.
    """
    ra = deterministic_thin_report(op, A, f, n_range)
    rb = deterministic_thin_report(op, B, f, n_range)
    both = _dyadic.GeometricSet(list(A.primitives) + list(B.primitives))
    ru = deterministic_thin_report(op, both, f, n_range)
    rhs = ra["variance"] + rb["variance"] + 2.0 * np.sqrt(ra["variance"] * rb["variance"])
    return {"levels": ra["levels"], "lhs": ru["variance"], "rhs": rhs}


# ---------------------------------------------------------------------------
# field-coupled bridge identity


def _revealed_mask(state, dom):
    """Vertices revealed by the exploration: the mid-hyperplane crosses
    of every expanded cell (interior grid mask)."""
    from .exploration import codes_to_coords

    mask = np.zeros(dom.interior_shape, dtype=bool)
    m = dom.m
    for k in range(1, state.n_max + 1):
        parents = codes_to_coords(state.active_codes[k - 1], k - 1, dom.d)
        K = m >> (k - 1)
        half = K >> 1
        for i in range(parents.shape[0]):
            base = parents[i] * K
            open_sl = [slice(int(b) + 1 - 1, int(b) + K - 1) for b in base]
            for a in range(dom.d):
                sl = list(open_sl)
                sl[a] = int(base[a]) + half - 1
                mask[tuple(sl)] = True
    return mask


def _approx_indicator(state, n, dom):
    """Interior-grid indicator of A_n: resolution-n cells meeting the
    revealed skeleton (closed union).  Beyond the explored depth the
    final active blocks contribute only their boundary shells, so the
    indicator thins out as n grows."""
    side = 1 << n
    occ = np.zeros((side,) * state.d, dtype=np.uint8)
    from .exploration import _mark_boxes, codes_to_coords

    for a in range(state.d):
        sl = [slice(None)] * state.d
        sl[a] = 0
        occ[tuple(sl)] = 1
        sl[a] = side - 1
        occ[tuple(sl)] = 1
    if n <= state.n_max:
        _mark_boxes(occ, codes_to_coords(state.active_codes[n], n, state.d), 1)
        deepest = n
    else:
        _mark_boxes(
            occ,
            codes_to_coords(state.active_codes[state.n_max], state.n_max, state.d),
            1 << (n - state.n_max),
        )
        deepest = state.n_max
    for j in range(1, deepest + 1):
        _mark_boxes(
            occ, codes_to_coords(state.inactive_codes[j], j, state.d), 1 << (n - j)
        )
    k = dom.m >> n
    if k < 1:
        raise ResolutionError(
            "resolution level %d exceeds the lattice at m=%d" % (n, dom.m)
        )
    occ_pad = np.pad(occ.astype(bool), 1)
    v = np.arange(1, dom.m)
    hi_choice = np.minimum(v // k, side - 1) + 1
    lo_choice = np.where(v % k == 0, v // k - 1, v // k) + 1
    out = np.zeros(dom.interior_shape, dtype=bool)
    for corner in range(1 << state.d):
        idx = []
        for a in range(state.d):
            idx.append(lo_choice if (corner >> a) & 1 else hi_choice)
        out |= occ_pad[np.ix_(*idx)]
    return out.astype(np.float64)


def bridge_identity_check(op, n_max, seed, replicas=20, levels=None):
    """Ledger form of the thinness bridge for the exploration set.

    Per replica and resolution level, checks

        (Gamma, 1_{A_n}) - [(Gamma_A, 1) - (Gamma_A, 1_{D \\ A_n})]
            = (Gamma^A, 1_{A_n})

    exactly (harmonic part from an independent sparse solve on the
    revealed vertex set), and reports the per-level variance of the
    right side.  Levels past the explored depth approximate the final
    skeleton with shrinking boxes, so the bridge variance decays there.
    """
    dom = op.domain
    if levels is None:
        levels = list(range(1, int(math.log2(dom.m)) + 1))
    levels = [int(n) for n in levels]
    worst = 0.0
    rhs_vals = np.zeros((replicas, len(levels)))
    for r in range(replicas):
        st = run_field_coupled(op, None, n_max, seed, replica=r)
        mask = _revealed_mask(st, dom)
        dec = markov_decompose(op, st.field, mask, compute_defect=False)
        harm = dec.harmonic
        fvals = np.asarray(st.field.values, dtype=np.float64)
        for j, n in enumerate(levels):
            ind = _approx_indicator(st, n, dom)
            g_an = pair(st.field, ind)
            ga_1 = dom.h**dom.d * float(np.sum(harm, dtype=np.float64))
            ga_off = dom.h**dom.d * float(np.sum(harm * (1.0 - ind), dtype=np.float64))
            rhs = dom.h**dom.d * float(np.sum((fvals - harm) * ind, dtype=np.float64))
            resid = abs(g_an - (ga_1 - ga_off) - rhs)
            scale = max(abs(g_an) + abs(ga_1) + abs(ga_off), 1e-12)
            worst = max(worst, resid / scale)
            rhs_vals[r, j] = rhs
    return {
        "max_residual": worst,
        "levels": np.array(levels),
        "rhs_variance": rhs_vals.var(axis=0, ddof=1),
    }

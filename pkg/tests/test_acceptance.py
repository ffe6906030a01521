"""Acceptance battery: twelve numbered criteria, one test each.

Every test records a one-line verdict through conftest before
asserting, so the complete scoreboard prints in the terminal summary
whether or not individual criteria fail.  Monte Carlo configurations
are fixed (seeds, replica counts, grids); shared ensembles live in
module-scoped fixtures.  Full-battery wall time on this hardware is
roughly 30 minutes, dominated by the two d=3 criteria (4 and 11).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import record_criterion
from gff_thinlab import cli
from gff_thinlab.dyadic import GeometricSet, SegmentSet
from gff_thinlab.exploration import (
    BranchingSchedule,
    bbm_ensemble,
    field_ensemble,
    lineage_active_counts,
)
from gff_thinlab.green_field import LatticeDomain, build_greens, cell_variance
from gff_thinlab.thinness import (
    KAPPA2,
    cord_union_bound,
    deterministic_thin_report,
    exceedance_battery,
    gaussian_bound_check,
    sup_cell_profile,
)

SEED = 1


def hit_prob(tau):
    """Reflection-principle oracle: P(max BM on [0,tau] >= 1)."""
    return 2.0 * norm.sf(1.0 / math.sqrt(tau))


def verdict(num, ok, detail):
    line = "CRITERION %02d: %s - %s" % (num, "PASS" if ok else "FAIL", detail)
    record_criterion(line)
    return line


# ---------------------------------------------------------------------------
# shared ensembles


@pytest.fixture(scope="module")
def bbm_big():
    t0 = time.perf_counter()
    bundle = bbm_ensemble(BranchingSchedule(2, 1.0), 10, SEED, 20000)
    return bundle, time.perf_counter() - t0


@pytest.fixture(scope="module")
def op3():
    return build_greens(LatticeDomain(3, 256))


@pytest.fixture(scope="module")
def field_d3(op3):
    t0 = time.perf_counter()
    bundle = field_ensemble(op3, 5, SEED, 200, count_levels=[2, 3, 4, 5])
    return bundle, time.perf_counter() - t0


@pytest.fixture(scope="module")
def op2_512():
    return build_greens(LatticeDomain(2, 512))


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_first_moment_identity(bbm_big):
    bundle, wall = bbm_big
    zs = []
    for n in range(1, 9):
        v = bundle.vol[:, n]
        se = v.std(ddof=1) / math.sqrt(v.size)
        zs.append((v.mean() - hit_prob(n * 1.0)) / se)
    worst = max(abs(z) for z in zs)
    ok = worst < 3.0
    verdict(
        1,
        ok,
        "mean(Vol_n) vs reflection oracle, max |z| = %.2f over n=1..8, "
        "2e4 replicas (%.0fs shared run)" % (worst, wall),
    )
    assert ok


def test_criterion_02_non_thinness_signature(bbm_big):
    bundle, _ = bbm_big
    means = bundle.mass.mean(axis=0)
    level_ok = bool(np.all(means[6:] >= 0.5))
    increasing = bool(np.all(np.diff(means[2:9]) > 0))
    second = (bundle.mass**2).mean(axis=0)
    finite = bool(np.isfinite(second).all())
    inc = np.diff(second)
    ratios = inc[5:] / inc[4:-1]
    halving = bool(np.all(ratios < 0.5))
    ok = level_ok and increasing and finite and halving
    verdict(
        2,
        ok,
        "mass mean >= 0.5 beyond n=6 and increasing: %s; second moments "
        "finite (max %.3f): %s; increment halving beyond n=5: %s "
        "(observed ratios %.2f..%.2f, consistent with the (n/(n+1))^(3/2) "
        "decay of the summand, not geometric halving)"
        % (
            level_ok and increasing,
            second.max(),
            finite,
            halving,
            ratios.min(),
            ratios.max(),
        ),
    )
    assert ok


def test_criterion_03_active_lineage_probability():
    reps = 100000
    t0 = time.perf_counter()
    alive2 = lineage_active_counts(BranchingSchedule(2, 1.0), 10, SEED, reps)
    alive3 = lineage_active_counts(BranchingSchedule(3, 1.0), 8, SEED, reps)
    wall = time.perf_counter() - t0

    band = np.array(
        [alive2[n - 1] / reps * math.sqrt(n) for n in range(3, 11)]
    )
    spread = float(band.max() / band.min())
    band_ok = spread < 2.0

    worst_z = 0.0
    for n in range(1, 9):
        t_n = float(2**n - 1)
        p0 = 1.0 - hit_prob(t_n)
        se = math.sqrt(p0 * (1.0 - p0) / reps)
        worst_z = max(worst_z, abs(alive3[n - 1] / reps - p0) / se)
    z_ok = worst_z < 3.0

    ok = band_ok and z_ok
    verdict(
        3,
        ok,
        "d=2 sqrt(n)-scaled active prob in a band of ratio %.2f over "
        "n=3..10; d=3 survival vs oracle max |z| = %.2f, 1e5 lineages "
        "(%.0fs)" % (spread, worst_z, wall),
    )
    assert ok


def test_criterion_04_box_count_exponent(field_d3):
    bundle, wall = field_d3
    levels = bundle.box_levels.astype(float)
    means = bundle.box_counts.astype(float).mean(axis=0)
    slope = float(np.polyfit(levels, np.log2(means), 1)[0])
    bound = max(3 - 1, 3 / 2 + 1) + 0.3
    ok = slope <= bound
    verdict(
        4,
        ok,
        "d=3 m=256 fitted log2 E[N_n] slope %.2f vs bound %.1f over "
        "n=2..5, 200 replicas (%.0fs shared run); the almost-sure "
        "exponent bound is asymptotic and the desk range is "
        "pre-asymptotic" % (slope, bound, wall),
    )
    assert ok


def test_criterion_05_telescoping_ledger(field_d3):
    bundle, _ = field_d3
    worst3 = float(bundle.residual_max.max())
    op2 = build_greens(LatticeDomain(2, 64))
    b2 = field_ensemble(op2, 3, SEED, 100)
    worst2 = float(b2.residual_max.max())
    ok = worst3 < 1e-9 and worst2 < 1e-9
    verdict(
        5,
        ok,
        "ledger residual max %.1e (d=3, 200 reps) and %.1e (d=2, 100 "
        "reps), every replica and generation" % (worst3, worst2),
    )
    assert ok


def test_criterion_06_green_scaling():
    t0 = time.perf_counter()
    big = build_greens(LatticeDomain(3, 128, side=1.0))
    small = build_greens(LatticeDomain(3, 64, side=0.5))
    rng = np.random.default_rng(SEED)
    worst = 0.0
    pairs = 0
    while pairs < 20:
        x = rng.integers(8, 56, size=3)
        y = rng.integers(8, 56, size=3)
        if np.abs(x - y).max() < 2:
            continue
        g_small = small.green_entry(tuple(x), tuple(y))
        g_big = big.green_entry(tuple(2 * x), tuple(2 * y))
        worst = max(worst, abs(g_small / (2.0 * g_big) - 1.0))
        pairs += 1
    wall = time.perf_counter() - t0
    ok = worst < 0.02
    verdict(
        6,
        ok,
        "d=3 half-domain Green values vs r^(2-d)-rescaled, worst rel "
        "dev %.4f over 20 pairs (%.0fs)" % (worst, wall),
    )
    assert ok


def test_criterion_07_variance_scaling(op3):
    t0 = time.perf_counter()
    band = []
    for n in range(1, 6):
        c = np.full(3, 1 << (n - 1), dtype=np.int64)
        band.append(cell_variance(op3, (c, n)) * 2.0 ** (5 * n))
    ratio3 = float(max(band) / min(band))
    inner3 = float(max(band[1:]) / min(band[1:]))
    strict3 = ratio3 <= 2.0
    loose3 = ratio3 <= 4.0

    op2 = build_greens(LatticeDomain(2, 1024))
    qs = []
    for n in range(1, 7):
        c = np.full(2, 1 << (n - 1), dtype=np.int64)
        v = cell_variance(op2, (c, n))
        qs.append(4.0**n * math.sqrt(v) / math.sqrt(n))
    drift = abs(qs[-1] / qs[-2] - 1.0)
    ok2 = drift < 0.10
    wall = time.perf_counter() - t0

    ok = strict3 and ok2
    verdict(
        7,
        ok,
        "d=3 2^((d+2)n)-scaled cell variance spans factor %.2f over "
        "n=1..5 (within-2 reading: %s; within-factor-2-of-a-constant "
        "reading, ratio <= 4: %s; the n=1 octant touches the boundary "
        "and depresses the variance, n=2..5 alone spans %.2f); d=2 "
        "m=1024 ratio drift %.3f at n=6, kappa2 estimate %.4f vs "
        "sqrt(log2/2pi) = %.4f (%.0fs)"
        % (ratio3, strict3, loose3, inner3, drift, qs[-1], KAPPA2, wall),
    )
    assert ok


def test_criterion_08_deterministic_thin_sets(op2_512):
    t0 = time.perf_counter()
    seg = GeometricSet([SegmentSet((0.2, 0.3), (0.8, 0.7))])
    rep = deterministic_thin_report(op2_512, seg, n_range=range(2, 8))
    v = rep["variance"]
    decreasing = bool(np.all(np.diff(v) < 0))
    ratio = float(v[-1] / v[0])
    other = GeometricSet([SegmentSet((0.1, 0.8), (0.9, 0.2))])
    cord = cord_union_bound(op2_512, seg, other, n_range=range(2, 8))
    cord_ok = bool(np.all(cord["lhs"] <= cord["rhs"] + 1e-12))
    wall = time.perf_counter() - t0
    ok = decreasing and ratio < 0.05 and cord_ok
    verdict(
        8,
        ok,
        "segment variance series strictly decreasing over n=2..7: %s, "
        "final/initial %.4f; union Cauchy-Schwarz bound per level: %s "
        "(%.0fs)" % (decreasing, ratio, cord_ok, wall),
    )
    assert ok


def test_criterion_09_threshold_statistics(op2_512):
    t0 = time.perf_counter()
    levels = list(range(4, 9))
    bat = exceedance_battery(op2_512, levels, 1000, SEED)
    s_mean = bat["S"].mean(axis=0)
    r_mean = bat["R"].astype(float).mean(axis=0)
    wall = time.perf_counter() - t0
    s_dec = bool(np.all(np.diff(s_mean) < 0))
    arr = np.array(levels, dtype=float)
    scaled = r_mean * np.sqrt(arr) / 4.0**arr
    fitted = float(scaled.min())
    pos = fitted > 0.0
    ok = s_dec and pos
    verdict(
        9,
        ok,
        "mean exceedance sum decreasing over n=4..8: %s; "
        "mean(R_n) sqrt(n)/4^n in [%.3f, %.3f], bounded below by the "
        "fitted %.3f > 0; 1e3 replicas (%.0fs)"
        % (s_dec, fitted, float(scaled.max()), fitted, wall),
    )
    assert ok


def test_criterion_10_gaussian_inequality():
    t0 = time.perf_counter()
    rep = gaussian_bound_check()
    wall = time.perf_counter() - t0
    finite = math.isfinite(rep.fitted_C)
    ok = bool(rep.ok and finite)
    verdict(
        10,
        ok,
        "fitted C = %.4f at p = %.3f; bivariate spot checks max ratio "
        "%.4f <= C: %s (%.1fs)"
        % (rep.fitted_C, rep.argmax_p, rep.max_bivariate_ratio, rep.ok, wall),
    )
    assert ok


def test_criterion_11_sup_cell_threshold_contrast(op3):
    t0 = time.perf_counter()
    med, _ = sup_cell_profile(op3, [2.0, 3.0], range(2, 7), SEED, 200)
    wall = time.perf_counter() - t0
    dec2 = bool(np.all(np.diff(med[0]) < 0))
    nondec3 = bool(np.all(np.diff(med[1]) >= 0))
    ok = dec2 and nondec3
    verdict(
        11,
        ok,
        "d=3 medians beta=2 decreasing over n=2..6: %s (series %s); "
        "beta=3 non-decreasing: %s; 200 replicas at m=256 (%.0fs)"
        % (
            dec2,
            np.array2string(med[0], precision=3),
            nondec3,
            wall,
        ),
    )
    assert ok


def test_criterion_12_byte_identical_reruns(tmp_path):
    def bundle_bytes(name, args):
        out = tmp_path / name
        code = cli.main(args + ["--out", str(out)])
        assert code in (0, 1)
        exp = args[0]
        return (out / exp / "report.csv").read_bytes()

    moments = ["moments", "--replicas", "120", "--n-max", "4", "--seed", "9"]
    das = ["das-validate", "--grid", "32"]
    same_mc = bundle_bytes("a", moments) == bundle_bytes("b", moments)
    same_det = bundle_bytes("c", das) == bundle_bytes("d", das)
    ok = same_mc and same_det
    verdict(
        12,
        ok,
        "re-run CSVs byte-identical: moments %s, das-validate %s"
        % (same_mc, same_det),
    )
    assert ok

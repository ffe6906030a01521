"""Green operator, sampler, and Markov decomposition tests.

Dense oracles are recomputed from the interior graph Laplacian with
scipy sparse solves, independently of the spectral implementation.
"""

import math

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from gff_thinlab.errors import ConfigurationError, InputError, ResolutionError
from gff_thinlab.green_field import (
    LatticeDomain,
    build_greens,
    cell_indicator,
    cell_variance,
    free_space_kernel,
    interior_slices,
    markov_decompose,
    pair,
    sample_gff,
)
from gff_thinlab.green_field import _interior_laplacian


def dense_green(dom):
    """h^(2-d)-scaled inverse Laplacian via a sparse solve (oracle)."""
    lap = _interior_laplacian(dom).tocsc()
    n = dom.n_interior
    eye = np.eye(n)
    g = np.column_stack([spsolve(lap, eye[:, j]) for j in range(n)])
    return dom.h ** (2 - dom.d) * g


@pytest.mark.parametrize("d,m", [(2, 8), (2, 16), (3, 8)])
def test_green_row_matches_sparse_oracle(d, m):
    dom = LatticeDomain(d, m)
    op = build_greens(dom)
    g = dense_green(dom)
    rng = np.random.default_rng(3)
    for _ in range(4):
        x = rng.integers(1, m, size=d)
        row = op.green_row(x)
        flat_idx = np.ravel_multi_index(tuple(x - 1), dom.interior_shape)
        oracle = g[flat_idx].reshape(dom.interior_shape)
        assert np.abs(row - oracle).max() < 1e-10 * np.abs(oracle).max()


@pytest.mark.parametrize("d", [2, 3, 4])
def test_green_symmetry_and_positivity(d):
    m = 8
    dom = LatticeDomain(d, m)
    op = build_greens(dom)
    rng = np.random.default_rng(5)
    for _ in range(4):
        x = rng.integers(1, m, size=d)
        y = rng.integers(1, m, size=d)
        a = op.green_entry(x, y)
        b = op.green_entry(y, x)
        assert a == pytest.approx(b, rel=1e-12)
    for _ in range(4):
        w = rng.standard_normal(dom.interior_shape)
        assert op.green_quadratic_form(w) > 0


def test_free_space_kernel_forms():
    # planar kernel is logarithmic, higher dimensions are power laws
    r1, r2 = 0.2, 0.4
    d2 = free_space_kernel(np.array([r1, 0.0]), 2) - free_space_kernel(
        np.array([r2, 0.0]), 2
    )
    assert d2 == pytest.approx(math.log(r2 / r1) / (2 * math.pi), rel=1e-12)
    for d in (3, 4):
        a = free_space_kernel(np.full(d, r1 / math.sqrt(d)), d)
        b = free_space_kernel(np.full(d, r2 / math.sqrt(d)), d)
        assert a / b == pytest.approx((r2 / r1) ** (d - 2), rel=1e-12)


def test_diagonal_log_growth_d2():
    # G(c, c) grows by log(2)/(2 pi) per mesh halving in the plane
    vals = []
    for m in (32, 64, 128):
        dom = LatticeDomain(2, m)
        op = build_greens(dom)
        c = np.array([m // 2, m // 2])
        vals.append(op.green_entry(c, c))
    steps = np.diff(vals)
    target = math.log(2.0) / (2 * math.pi)
    assert steps == pytest.approx([target, target], rel=0.05)


def test_domain_and_pairing_validation():
    with pytest.raises(ConfigurationError):
        LatticeDomain(1, 8)
    with pytest.raises(ConfigurationError):
        LatticeDomain(2, 12)
    with pytest.raises(ConfigurationError):
        LatticeDomain(2, 2)
    dom = LatticeDomain(2, 8)
    op = build_greens(dom)
    f = sample_gff(op, 1)
    with pytest.raises(InputError):
        pair(f, np.ones((3, 3)))
    w = np.zeros(dom.interior_shape)
    w[2, 3] = 1.0
    assert pair(f, w) == pytest.approx(dom.h**2 * float(f.values[2, 3]))


def test_interior_slices_and_indicator():
    dom = LatticeDomain(2, 16)
    sl = interior_slices(dom, np.array([1, 0]), 1)
    assert sl == (slice(8, 15), slice(0, 7))
    ind = cell_indicator(dom, np.array([0, 0]), 1)
    assert ind.shape == dom.interior_shape
    assert ind.sum() == 7 * 7
    # vertices on the dyadic face belong to neither open cell
    total = sum(
        cell_indicator(dom, np.array(c), 1).sum()
        for c in ((0, 0), (0, 1), (1, 0), (1, 1))
    )
    assert total == 4 * 49 < 15 * 15
    with pytest.raises(ConfigurationError):
        interior_slices(dom, np.array([0, 0]), 4)


def test_sampler_covariance_matches_green():
    dom = LatticeDomain(2, 16)
    op = build_greens(dom)
    probes = [
        (np.array([4, 4]), np.array([4, 4])),
        (np.array([4, 4]), np.array([12, 9])),
        (np.array([8, 8]), np.array([8, 8])),
        (np.array([2, 13]), np.array([13, 2])),
    ]
    reps = 4000
    acc = np.zeros((reps, len(probes)))
    for r in range(reps):
        f = sample_gff(op, 77, replica=r)
        for j, (x, y) in enumerate(probes):
            acc[r, j] = f.values[tuple(x - 1)] * f.values[tuple(y - 1)]
    for j, (x, y) in enumerate(probes):
        # pointwise covariance of vertex values is the Green entry itself
        target = op.green_entry(x, y)
        est = acc[:, j].mean()
        se = acc[:, j].std(ddof=1) / math.sqrt(reps)
        assert abs(est - target) < 4 * se, (j, est, target, se)


def test_sampler_pairing_variance():
    # quadratic-form variance of a smooth pairing, 4 sigma band
    dom = LatticeDomain(2, 32)
    op = build_greens(dom)
    axes = np.arange(1, dom.m) * dom.h
    w = np.sin(math.pi * axes)[:, None] * np.sin(math.pi * axes)[None, :]
    target = op.green_quadratic_form(w)
    reps = 3000
    vals = np.array([pair(sample_gff(op, 9, replica=r), w) for r in range(reps)])
    est = np.mean(vals**2)
    se = np.std(vals**2, ddof=1) / math.sqrt(reps)
    assert abs(est - target) < 4 * se


def test_sampler_determinism_and_streams():
    dom = LatticeDomain(2, 16)
    op = build_greens(dom)
    a = sample_gff(op, 5, replica=3)
    b = sample_gff(op, 5, replica=3)
    c = sample_gff(op, 5, replica=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_float32_switch_on_large_grids():
    small = sample_gff(build_greens(LatticeDomain(2, 32)), 1)
    assert small.values.dtype == np.float64
    big = sample_gff(build_greens(LatticeDomain(3, 256)), 1)
    assert big.values.dtype == np.float32
    assert np.isfinite(big.values).all()


def test_cell_variance_cauchy_schwarz():
    dom = LatticeDomain(2, 32)
    op = build_greens(dom)
    a = (np.array([1, 1], dtype=np.int64), 2)
    b = (np.array([2, 2], dtype=np.int64), 2)
    va = cell_variance(op, a)
    vb = cell_variance(op, b)
    cov = cell_variance(op, a, b)
    assert va > 0 and vb > 0
    assert 0 < cov < math.sqrt(va * vb)


def test_markov_decomposition_properties():
    dom = LatticeDomain(2, 32)
    op = build_greens(dom)
    f = sample_gff(op, 11)
    mask = np.zeros(dom.interior_shape, dtype=bool)
    mask[15, :] = True
    dec = markov_decompose(op, f, mask)
    # harmonic part interpolates the data on the conditioning set
    assert np.abs(dec.harmonic[mask] - f.values[mask]).max() < 1e-9
    # and is discrete-harmonic off it: the Laplacian stencil vanishes
    lap = 4 * dec.harmonic.copy()
    pad = np.pad(dec.harmonic, 1)
    lap -= pad[:-2, 1:-1] + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:]
    off = ~mask
    assert np.abs(lap[off]).max() < 1e-9
    # the residual field vanishes on the conditioning set, and its
    # covariance operator kills mass placed there
    resid_field = np.asarray(f.values) - dec.harmonic
    assert np.abs(resid_field[mask]).max() < 1e-9
    probe = np.zeros(dom.interior_shape)
    probe[5, 7] = 1.0
    assert np.abs(dec.residual.apply(probe)[mask]).max() < 1e-12
    assert dec.residual.entry((16, 8), (16, 8)) == 0.0
    # off the cut, the restricted operator has strictly smaller variance
    assert 0 < dec.residual.entry((5, 5), (5, 5)) < op.green_entry((5, 5), (5, 5))
    assert dec.polar_defect > 0


def test_polar_defect_decreases_with_mesh():
    defects = []
    for m in (16, 32, 64):
        dom = LatticeDomain(2, m)
        op = build_greens(dom)
        f = sample_gff(op, 2)
        mask = np.zeros(dom.interior_shape, dtype=bool)
        mask[m // 2 - 1, m // 2 - 1] = True
        dec = markov_decompose(op, f, mask)
        defects.append(dec.polar_defect)
    assert defects[2] < defects[1] < defects[0]


def test_markov_budget_guard():
    dom = LatticeDomain(3, 256)
    op = build_greens(dom)
    f = sample_gff(op, 1)
    mask = np.zeros(dom.interior_shape, dtype=bool)
    mask[0, 0, 0] = True
    with pytest.raises(ResolutionError):
        markov_decompose(op, f, mask)

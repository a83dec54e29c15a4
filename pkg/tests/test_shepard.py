import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from hjbfrac.shepard import (
    ShepardInterpolant,
    WendlandKernel,
    find_neighbors,
    shepard_eval,
    shepard_eval_batch,
    shepard_weights,
    wendland,
    wendland_eval,
)


def direct_shepard(nodes, values, x, kernel):
    """Reference: explicit loop over every node."""
    r = np.sqrt(((nodes - x) ** 2).sum(axis=1))
    w = np.array([wendland(ri, kernel.sigma, kernel.ell) if ri < kernel.radius else 0.0 for ri in r])
    if w.sum() == 0.0:
        return values[np.argmin(r)]
    return float(np.dot(w, values) / w.sum())


def test_kernel_at_zero():
    for ell in (3, 4, 34, 66):
        for sigma in (0.1, 1.0, 50.0):
            assert wendland(0.0, sigma, ell) == 3.0


def test_kernel_truncation():
    k = WendlandKernel(5, 2.0)
    assert wendland_eval(k, 0.5) == 0.0 and wendland_eval(k, 3.0) == 0.0


def test_kernel_reference_value():
    # (1 - 0.5)^5 * (24 * 0.25 + 15 * 0.5 + 3) = 16.5 / 32
    assert wendland_eval(WendlandKernel(3, 1.0), 0.5) == 0.515625


@given(st.integers(3, 70), st.floats(0.01, 100))
def test_kernel_nonincreasing(ell, sigma):
    r = np.linspace(0, 1.2 / sigma, 200)
    v = wendland(r, sigma, ell)
    assert np.all(np.diff(v) <= 1e-15) and np.all(v >= 0)


def test_smoothness_from_dimension():
    assert WendlandKernel.for_dimension(63, 1.0).ell == 34
    assert WendlandKernel.for_dimension(127, 1.0).ell == 66
    assert WendlandKernel.for_dimension(1, 1.0).ell == 3


def test_kernel_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        WendlandKernel(3, 0.0)


def test_two_node_midpoint():
    itp = ShepardInterpolant(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]), WendlandKernel(3, 0.5))
    assert shepard_eval(itp, np.array([0.5])) == 0.5


def test_isolated_node_returns_its_value():
    nodes = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    itp = ShepardInterpolant(nodes, np.array([1.5, -2.0, 7.0]), WendlandKernel(4, 1.0))
    for i in range(3):
        assert shepard_eval(itp, nodes[i]) == itp.values[i]
    np.testing.assert_array_equal(shepard_eval_batch(itp, nodes), itp.values)


def test_nearest_node_fallback():
    nodes = np.array([[0.0], [10.0]])
    itp = ShepardInterpolant(nodes, np.array([1.0, 2.0]), WendlandKernel(3, 1.0))
    assert shepard_eval(itp, np.array([4.0])) == 1.0
    assert shepard_eval(itp, np.array([7.0])) == 2.0


def test_partition_of_unity_many_queries():
    rng = np.random.default_rng(11)
    nodes = rng.uniform(-1, 1, size=(400, 6))
    kernel = WendlandKernel.for_dimension(6, 1.0 / 0.6)
    queries = nodes[rng.integers(0, 400, 10_000)] + rng.normal(scale=0.15, size=(10_000, 6))
    table = find_neighbors(nodes, queries, kernel.radius)
    inside = np.diff(table.indptr) > 0
    sums = np.asarray(shepard_weights(table, kernel).sum(axis=1)).ravel()
    assert inside.mean() > 0.9
    assert np.max(np.abs(sums[inside] - 1.0)) <= 1e-12


def test_matches_direct_loop_high_dimension():
    rng = np.random.default_rng(5)
    nodes = rng.normal(size=(300, 63)) * 0.1
    values = rng.normal(size=300)
    kernel = WendlandKernel.for_dimension(63, 1.0 / 0.6)
    itp = ShepardInterpolant(nodes, values, kernel)
    queries = nodes[:40] + rng.normal(scale=0.05, size=(40, 63))
    got = shepard_eval_batch(itp, queries)
    ref = [direct_shepard(nodes, values, q, kernel) for q in queries]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)


def test_batch_equals_scalar_bitwise():
    rng = np.random.default_rng(8)
    nodes = rng.uniform(size=(200, 5))
    itp = ShepardInterpolant(nodes, rng.normal(size=200), WendlandKernel.for_dimension(5, 4.0))
    queries = rng.uniform(-0.1, 1.1, size=(100, 5))
    batch = shepard_eval_batch(itp, queries)
    scalar = np.array([shepard_eval(itp, q) for q in queries])
    assert np.array_equal(batch, scalar)


node_sets = arrays(np.float64, (25, 3), elements=st.floats(-1, 1))
value_sets = arrays(np.float64, 25, elements=st.floats(-1e3, 1e3))


@given(node_sets, value_sets, arrays(np.float64, (30, 3), elements=st.floats(-2, 2)), st.floats(0.3, 5))
def test_bounded_by_nodal_values(nodes, values, queries, sigma):
    itp = ShepardInterpolant(nodes, values, WendlandKernel.for_dimension(3, sigma))
    out = shepard_eval_batch(itp, queries)
    span = 1e-12 * (1 + np.abs(values).max())
    assert np.all(out >= values.min() - span) and np.all(out <= values.max() + span)


@given(node_sets, value_sets, arrays(np.float64, 3, elements=st.floats(-0.2, 0.2)), st.integers(0, 24),
       st.integers(0, 24), st.floats(-50, 50))
def test_locality(nodes, values, offset, i, j, delta):
    kernel = WendlandKernel.for_dimension(3, 2.0)
    x = nodes[i] + offset
    r = np.sqrt(((nodes - x) ** 2).sum(axis=1))
    assume(r[j] >= kernel.radius)
    changed = values.copy()
    changed[j] += delta
    a = shepard_eval(ShepardInterpolant(nodes, values, kernel), x)
    b = shepard_eval(ShepardInterpolant(nodes, changed, kernel), x)
    assert a == b


@given(node_sets, value_sets, arrays(np.float64, (20, 3), elements=st.floats(-1.5, 1.5)), st.integers(0, 24),
       st.floats(0, 100))
def test_monotone_in_values(nodes, values, queries, j, bump):
    kernel = WendlandKernel.for_dimension(3, 1.5)
    higher = values.copy()
    higher[j] += bump
    lo = shepard_eval_batch(ShepardInterpolant(nodes, values, kernel), queries)
    hi = shepard_eval_batch(ShepardInterpolant(nodes, higher, kernel), queries)
    assert np.all(hi >= lo - 1e-12 * (1 + np.abs(values).max()))


def test_constant_values_reproduced():
    rng = np.random.default_rng(2)
    nodes = rng.uniform(size=(50, 2))
    itp = ShepardInterpolant(nodes, np.full(50, 3.25), WendlandKernel(4, 3.0))
    np.testing.assert_allclose(shepard_eval_batch(itp, rng.uniform(size=(500, 2))), 3.25, rtol=1e-15)


def test_underflowing_weights_fall_back():
    # l = 66: (1 - sigma r)^68 underflows to 0 just inside the support
    nodes = np.array([[0.0], [1.0]])
    kernel = WendlandKernel(66, 1.0)
    x = np.array([[-0.9999999]])  # within the support of node 0 only
    itp = ShepardInterpolant(nodes, np.array([4.0, 9.0]), kernel)
    assert itp.evaluate(x)[0] == 4.0


def test_interpolant_validates_shapes():
    with pytest.raises(ValueError):
        ShepardInterpolant(np.zeros((3, 2)), np.zeros(4), WendlandKernel(3, 1.0))

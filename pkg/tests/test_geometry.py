import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from obshom.geometry.distance import distance_transform, hausdorff_distance
from obshom.geometry.probes import (
    classical_nondegeneracy,
    nondegeneracy_probe,
    regularity_estimates,
    slack_constant,
    strided_nodes,
)
from obshom.geometry.sets import (
    BulkLattice,
    bulk_contact_set,
    bulk_free_boundary,
    contact_set,
    cube_side,
    free_boundary,
)
from obshom.lib.errors import DegenerateSetError, DomainError, ResolutionError
from obshom.lib.grid import CellMask, Grid, ScalarField
from obshom.lib.obstacles import paraboloid
from obshom.solver.complementarity import height_fields, solve_u0


def _brute_force_distance(flags, h):
    nodes = np.argwhere(np.ones_like(flags)).astype(float)
    targets = np.argwhere(flags).astype(float)
    d2 = cdist(nodes, targets, "sqeuclidean").min(axis=1)
    return h * np.sqrt(d2).reshape(flags.shape)


def _mask(grid, nodes):
    flags = np.zeros(grid.shape, dtype=bool)
    for node in nodes:
        flags[node] = True
    return CellMask(grid, flags)


@pytest.fixture(scope="module")
def background():
    grid = Grid.box(-1.0, 1.0, 2.0**-6, dim=1)
    phi0 = paraboloid(grid, 0.25, 0.5)
    sol = solve_u0(phi0)
    w0, _ = height_fields(sol, sol, phi0)
    return w0, sol.contact


def test_contact_set_is_exact_equality_inside():
    grid = Grid.box(0.0, 1.0, 0.25, dim=1)
    phi = ScalarField(grid, [0.0, 1.0, 2.0, 3.0, 4.0])
    u = ScalarField(grid, [0.0, 1.0, 2.5, 3.0, 4.0])
    assert list(contact_set(u, phi).flags) == [False, True, False, True, False]


def test_free_boundary_cases():
    grid = Grid.box([0.0, 0.0], [1.0, 1.0], 0.125)
    single = _mask(grid, [(4, 4)])
    assert free_boundary(single) == single

    half = np.zeros(grid.shape, dtype=bool)
    half[:5, :] = True
    fb = free_boundary(CellMask(grid, half))
    expected = np.zeros(grid.shape, dtype=bool)
    expected[4, 1:-1] = True
    assert np.array_equal(fb.flags, expected)

    with pytest.raises(DegenerateSetError):
        free_boundary(CellMask.empty(grid))
    with pytest.raises(DegenerateSetError):
        free_boundary(CellMask(grid, np.ones(grid.shape, dtype=bool)))


def test_free_boundary_wraps_on_torus():
    grid = Grid.torus(8, 1)
    fb = free_boundary(_mask(grid, [(0,), (1,), (7,)]))
    assert list(np.nonzero(fb.flags)[0]) == [1, 7]


def test_distance_transform_matches_brute_force(rng):
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(3, 49, size=2))
        flags = rng.random(shape) < rng.uniform(0.001, 0.2)
        if not flags.any():
            flags[tuple(rng.integers(0, s) for s in shape)] = True
        grid = Grid(2, shape, 1 / 32, (0.0, 0.0))
        dist = distance_transform(CellMask(grid, flags)).dist
        assert np.array_equal(dist, _brute_force_distance(flags, grid.spacing))


def test_distance_transform_simple_sets():
    grid = Grid.box(-1.0, 1.0, 0.125, dim=1)
    x = grid.axis_coordinates(0)
    dist = distance_transform(_mask(grid, [(8,)])).dist
    assert np.array_equal(dist, np.abs(x))
    full = distance_transform(CellMask(grid, np.ones(grid.shape, dtype=bool))).dist
    assert np.all(full == 0.0)
    with pytest.raises(DegenerateSetError):
        distance_transform(CellMask.empty(grid))


def test_distance_transform_on_torus():
    grid = Grid.torus(16, 1)
    dist = distance_transform(_mask(grid, [(0,)])).dist
    i = np.arange(16)
    assert np.array_equal(dist, grid.spacing * np.minimum(i, 16 - i).astype(float))


def test_hausdorff_distance():
    grid = Grid.box(0.0, 1.0, 1 / 16, dim=1)
    a = _mask(grid, [(0,)])
    assert hausdorff_distance(a, a) == 0.0
    assert hausdorff_distance(a, _mask(grid, [(3,), (4,)])) == 4 * grid.spacing
    with pytest.raises(DegenerateSetError):
        hausdorff_distance(a, CellMask.empty(grid))


def test_hausdorff_properties(rng):
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(3, 49, size=2))
        grid = Grid(2, shape, 1 / 16, (0.0, 0.0))
        density = rng.uniform(0.005, 0.1)
        masks = []
        for _ in range(3):
            flags = rng.random(shape) < density
            flags[tuple(rng.integers(0, s) for s in shape)] = True
            masks.append(CellMask(grid, flags))
        a, b, c = masks
        dab = hausdorff_distance(a, b)
        assert dab == hausdorff_distance(b, a)
        assert dab <= hausdorff_distance(a, c) + hausdorff_distance(c, b) + 1e-12
        brute = max(
            _brute_force_distance(b.flags, grid.spacing)[a.flags].max(),
            _brute_force_distance(a.flags, grid.spacing)[b.flags].max(),
        )
        assert dab == brute


def test_cube_side():
    assert cube_side(2, 1.0, 0.1) == pytest.approx(0.8)
    assert cube_side(1, 0.5, 1.0) == pytest.approx(8.0)


def test_bulk_set_of_single_node():
    grid = Grid.box([0.0, 0.0], [4.0, 4.0], 1 / 16)
    contact = _mask(grid, [(20, 20)])
    bulk, lattice = bulk_contact_set(contact, 1 / 16, 1.0)
    assert lattice.cube_side == pytest.approx(0.5)
    expected = np.zeros(grid.shape, dtype=bool)
    expected[16:24, 16:24] = True
    assert np.array_equal(bulk.flags, expected)
    assert lattice.cube_of((20, 20)) == (2, 2)
    assert lattice.cube_center((2, 2)) == pytest.approx((1.25, 1.25))
    assert bulk_free_boundary(bulk).count() == 64 - 36


def test_bulk_set_merges_nearby_islands():
    grid = Grid.box(0.0, 4.0, 1 / 64, dim=1)
    contact = _mask(grid, [(64,), (77,), (90,)])
    bulk, _ = bulk_contact_set(contact, 0.25 / (4 * math.sqrt(2)), 1.0)
    assert list(np.nonzero(bulk.flags)[0]) == list(range(64, 96))


def test_bulk_set_of_empty_contact_is_empty():
    grid = Grid.box(0.0, 1.0, 1 / 64, dim=1)
    bulk, _ = bulk_contact_set(CellMask.empty(grid), 0.05, 1.0)
    assert not bulk.any()


def test_bulk_set_resolution_and_domain_errors():
    grid = Grid.box(0.0, 1.0, 1 / 64, dim=1)
    contact = _mask(grid, [(10,)])
    with pytest.raises(ResolutionError):
        bulk_contact_set(contact, 1e-4, 1.0)
    with pytest.raises(DomainError):
        bulk_contact_set(contact, 0.0, 1.0)
    bulk, lattice = bulk_contact_set(contact, 0.0, 1.0, min_side=2 * grid.spacing)
    assert lattice.cube_side == 2 * grid.spacing
    assert bulk.count() == 2


def test_bulk_set_with_anchor():
    grid = Grid.box(0.0, 1.0, 1 / 16, dim=1)
    lattice = BulkLattice.build(grid, 0.25, anchor=(0.125,))
    assert lattice.cube_of((2,)) == (0,)
    assert lattice.cube_of((1,)) == (-1,)
    with pytest.raises(DomainError):
        BulkLattice.build(grid, 0.25, anchor=(0.0, 0.0))


def test_bulk_set_contains_contact_and_is_monotone(rng):
    grid = Grid.box([0.0, 0.0], [2.0, 2.0], 1 / 32)
    for _ in range(20):
        small = rng.random(grid.shape) < 0.01
        large = small | (rng.random(grid.shape) < 0.01)
        r = rng.uniform(0.01, 0.1)
        bulk_small, _ = bulk_contact_set(CellMask(grid, small), r, 1.0)
        bulk_large, _ = bulk_contact_set(CellMask(grid, large), r, 1.0)
        assert np.all(bulk_small.flags[small])
        assert np.all(bulk_large.flags[bulk_small.flags])


def test_strided_nodes():
    flags = np.zeros((10, 10), dtype=bool)
    flags[2:8, 3] = True
    assert len(strided_nodes(flags)) == 6
    assert len(strided_nodes(flags, max_points=3)) == 3
    assert np.array_equal(strided_nodes(flags, stride=2), np.argwhere(flags)[::2])
    assert np.array_equal(strided_nodes(flags, max_points=3), strided_nodes(flags, max_points=3))


def test_classical_nondegeneracy_holds(background):
    w0, contact0 = background
    report = classical_nondegeneracy(w0, contact0, 1.0, [0.05, 0.1, 0.2])
    assert report["count"] == 2 * 3
    assert report["violations"] == 0
    assert report["empirical_const"] >= 0.5


def test_nondegeneracy_probe_respects_distance_hypothesis(background):
    w0, contact0 = background
    r_eps = 0.05
    report = nondegeneracy_probe(w0, contact0, r_eps, 1.0, [0.05, 0.1])
    assert report["count"] > 0
    assert report["violations"] == 0
    dist = distance_transform(contact0).dist
    grid = w0.grid
    for point in report["points"]:
        node = int(round((point["center"][0] - grid.origin[0]) / grid.spacing))
        assert dist[node] > report["distance_threshold"]
    assert report["distance_threshold"] == pytest.approx(math.sqrt(2) * r_eps)


def test_regularity_estimates(background):
    w0, contact0 = background
    est = regularity_estimates(w0, contact0)
    assert est["M"] == pytest.approx(1.0, abs=1e-6)
    assert 0.25 <= est["c1"] <= 1.0
    assert 0.4 <= est["c2"] <= 0.5
    assert slack_constant(w0) == pytest.approx(4.0, abs=1e-5)


def test_regularity_estimates_of_full_contact():
    grid = Grid.box(0.0, 1.0, 1 / 32, dim=1)
    w0 = ScalarField.constant(grid, 0.0)
    est = regularity_estimates(w0, CellMask(grid, grid.interior()))
    assert est["M"] == 0.0
    assert est["c1"] is None
    assert est["c2"] == pytest.approx(0.5, abs=1e-9)


def test_regularity_estimates_need_resolved_contact():
    grid = Grid.box(0.0, 1.0, 1 / 32, dim=1)
    w0 = ScalarField.constant(grid, 0.0)
    with pytest.raises(ResolutionError):
        regularity_estimates(w0, _mask(grid, [(10,), (11,)]))


def test_bulk_free_boundary_lies_on_faces_next_to_contact_free_cubes(rng):
    grid = Grid.box([0.0, 0.0], [2.0, 2.0], 1 / 32)
    for _ in range(10):
        flags = rng.random(grid.shape) < 0.003
        flags[tuple(rng.integers(1, s - 1) for s in grid.shape)] = True
        bulk, lattice = bulk_contact_set(CellMask(grid, flags), rng.uniform(0.02, 0.06), 1.0)
        hit = set(np.unique(lattice.cube_ids[flags]).tolist())
        for node in map(tuple, np.argwhere(bulk_free_boundary(bulk).flags)):
            assert lattice.cube_ids[node] in hit
            neighbors = 0
            for axis in range(grid.dim):
                for shift in (-1, 1):
                    other = list(node)
                    other[axis] += shift
                    other = tuple(other)
                    if not 0 <= other[axis] < grid.shape[axis] or bulk.flags[other]:
                        continue
                    assert lattice.cube_ids[other] not in hit
                    step = np.subtract(lattice.cube_of(other), lattice.cube_of(node))
                    assert np.abs(step).sum() == 1
                    neighbors += 1
            assert neighbors > 0


def test_nondegeneracy_probe_skips_centers_at_the_threshold():
    grid = Grid.box(-1.0, 1.0, 2.0**-6, dim=1)
    contact = _mask(grid, [(32,), (96,)])
    flat = ScalarField.constant(grid, 0.0)
    r_eps = 0.5 / math.sqrt(2)
    report = nondegeneracy_probe(flat, contact, r_eps, 1.0, [0.1])
    assert report["admitted_distance"] == pytest.approx(0.5 + grid.spacing)
    assert report["count"] == 0

    h = grid.spacing
    report = nondegeneracy_probe(flat, contact, (0.5 - 2 * h) / math.sqrt(2), 1.0, [0.1])
    centers = [point["center"][0] for point in report["points"]]
    assert 0.0 in centers
    assert report["violations"] == 0

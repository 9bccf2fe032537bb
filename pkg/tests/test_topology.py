import itertools

import numpy as np
import pytest

from conftest import rotated_cube, sample_meshes, uncovered_pairs
from aica.mesh import decompose, whole_mesh_portion
from aica.meshgen import hex_box, unit_cube
from aica.topology import (RankReferralBuilder, TopologyError, build_dils, build_patch_segments,
                           build_referred_cells, build_topology, canonical_referred_set,
                           dump_topology, run_rounds, search_radius)

R_SMALL = 0.5


def referred_count(mesh, r_cut=R_SMALL):
    topo = build_topology([whole_mesh_portion(mesh)], r_cut, 0.05 * r_cut)
    return len(topo[0].referred)


@pytest.mark.parametrize("periodic, expected", [("", 0), ("x", 2), ("xy", 8), ("xyz", 26)])
def test_single_cell_referred_counts(periodic, expected):
    assert referred_count(unit_cube(periodic)) == expected


def test_quarter_turn_coupling_gives_three_rotated_images():
    topo = build_topology([whole_mesh_portion(rotated_cube())], R_SMALL, 0.025)[0]
    assert len(topo.referred) == 3
    assert all(rc.transform.has_rotation for rc in topo.referred)
    for rc in topo.referred:
        R = rc.transform.R
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_dil_is_non_double_counting():
    m = hex_box(4, 4.0)
    dils = build_dils(whole_mesh_portion(m), 1.0, 0.05)
    pairs = {(i, int(j)) for i, d in enumerate(dils) for j in d}
    assert all(j > i for i, j in pairs)
    assert len(pairs) == len({frozenset(p) for p in pairs})
    # cells sharing only a corner are within range
    corner = np.flatnonzero(np.all(np.isclose(m.cell_centres, [1.5, 1.5, 1.5]), axis=1))[0]
    origin = np.flatnonzero(np.all(np.isclose(m.cell_centres, [0.5, 0.5, 0.5]), axis=1))[0]
    assert (min(origin, corner), max(origin, corner)) in pairs


def test_dil_matches_brute_force_on_hex_grid():
    # for a tensor grid the vertex-vertex distance is the cell-cell distance
    m = hex_box(5, 5.0, grading=1.3)
    r = 1.2
    dils = build_dils(whole_mesh_portion(m), r, 0.0)
    got = {(i, int(j)) for i, d in enumerate(dils) for j in d}
    lo = np.array([m.points[m.cell_points[c]].min(axis=0) for c in range(m.n_cells)])
    hi = np.array([m.points[m.cell_points[c]].max(axis=0) for c in range(m.n_cells)])
    want = set()
    for i in range(m.n_cells):
        for j in range(i + 1, m.n_cells):
            gap = np.maximum(0, np.maximum(lo[i] - hi[j], lo[j] - hi[i]))
            if np.linalg.norm(gap) < r:
                want.add((i, j))
    assert got == want


def test_search_radius():
    assert search_radius(2.5, 0.125) == pytest.approx(2.625)
    with pytest.raises(ValueError):
        search_radius(1.0, -2.0)


def test_segments_split_periodic_halves():
    segs = build_patch_segments(whole_mesh_portion(hex_box(2, 2.0, "x")))
    assert len(segs) == 2
    assert {s.origin[2] for s in segs} == {"A", "B"}
    ys = sorted(float(s.transform.y[0]) for s in segs)
    assert ys == [-2.0, 2.0]


def test_segment_order_does_not_change_referred_set():
    m = hex_box(4, 8.0, "xyz", grading=1.3)
    a = (m.cell_centres[:, 0] > 3.0).astype(int) + (m.cell_centres[:, 1] > 5.0).astype(int) * 2
    portions = decompose(m, a)
    base = build_referred_cells(portions, 2.5, 0.125)
    rng = np.random.default_rng(0)
    for _ in range(3):
        orders = [rng.permutation(len(build_patch_segments(p))) for p in portions]
        again = build_referred_cells(portions, 2.5, 0.125, segment_orders=orders)
        for x, y in zip(base, again):
            assert canonical_referred_set(x) == canonical_referred_set(y)


def test_construction_messages_go_to_neighbours_only():
    m = hex_box((8, 2, 2), (8.0, 2.0, 2.0), "yz")
    a = m.cell_centres[:, 0].astype(int) // 2
    portions = decompose(m, a)
    log = []
    refs = build_referred_cells(portions, 2.5, 0.125, message_log=log)
    nbrs = {(p.rank, n) for p in portions for n in p.neighbour_ranks}
    assert log and {(s, d) for s, d, _ in log} <= nbrs
    # rank 2 is not a neighbour of rank 0 but its cells are in range; they arrive via rank 1
    assert portions[0].neighbour_ranks == [1]
    assert any(rc.source_rank == 2 for rc in refs[0])


def test_round_cap_raises():
    portions = [whole_mesh_portion(hex_box(2, 2.0, "xyz"))]
    builders = [RankReferralBuilder(portions[0], 2.5, 0.1)]
    with pytest.raises(TopologyError, match="did not converge"):
        run_rounds(builders, max_rounds=1)


def test_referred_cells_have_interactions_and_canonical_order():
    topo = build_topology([whole_mesh_portion(hex_box(3, 6.0, "xyz"))], 2.5, 0.125)[0]
    assert all(len(rc.interactions) for rc in topo.referred)
    keys = [rc.key() for rc in topo.referred]
    assert keys == sorted(keys)
    text = dump_topology(topo)
    assert text.startswith("rank 0") and f"referred {len(topo.referred)}" in text


@pytest.mark.parametrize("name", ["uniform", "graded", "polygon"])
def test_coverage_with_default_guard(name):
    m = sample_meshes()[name]
    topo = build_topology([whole_mesh_portion(m)], 2.5, 0.125)
    assert uncovered_pairs(m, np.zeros(m.n_cells, int), topo, 2.5, 4000) == 0


def test_coverage_across_ranks():
    m = hex_box(5, 8.5, "xyz", grading=1.2)
    a = np.argsort(np.argsort(m.cell_centres[:, 0], kind="stable")) * 3 // m.n_cells
    topo = build_topology(decompose(m, a), 2.5, 0.125)
    assert uncovered_pairs(m, a, topo, 2.5, 4000) == 0


def test_broken_guard_leaves_gaps():
    m = sample_meshes()["uniform"]
    topo = build_topology([whole_mesh_portion(m)], 2.5, -1.25)
    assert uncovered_pairs(m, np.zeros(m.n_cells, int), topo, 2.5, 2000) > 0


def test_report_counts():
    m = hex_box(4, 8.0, "xyz")
    a = (m.cell_centres[:, 0] > 4).astype(int)
    for t in build_topology(decompose(m, a), 2.5, 0.125):
        rep = t.report()
        assert rep["real_cells"] == 32
        assert sum(rep["referred_by_source_rank"].values()) == rep["referred_cells"]
        assert set(rep["referred_by_source_rank"]) <= {0, 1}


def test_duplicate_referrals_collapse():
    # two halves of the same periodic direction reach the same images
    topo = build_topology([whole_mesh_portion(hex_box(1, 1.0, "xyz"))], 0.5, 0.025)[0]
    ys = [tuple(np.round(rc.transform.y, 9)) for rc in topo.referred]
    assert len(ys) == len(set(ys)) == 26
    assert set(ys) == {tuple(float(v) for v in o) for o in itertools.product((-1, 0, 1), repeat=3)
                       if any(o)}

import numpy as np
import pytest

from conftest import lattice_box
from aica.engine import Molecules, ProtocolError, RankEngine, SimConfig, init_lattice, run_serial
from aica.mesh import decompose, whole_mesh_portion
from aica.meshgen import hex_box
from aica.parallel import (Message, ParallelError, RankChannel, distribute, run_parallel)
from aica.topology import build_topology

KEYS = ("ke_per_mol", "pe_per_mol", "te_per_mol")


def slabs(mesh, cuts):
    """Irregular slab assignment: cell ranks by x-centroid against ``cuts``."""
    return np.searchsorted(np.asarray(cuts), mesh.cell_centres[:, 0], side="right")


@pytest.fixture(scope="module")
def system():
    m = hex_box(4, lattice_box(6), "xyz", grading=1.3)
    cfg = SimConfig(steps=40, lattice=6, seed=5)
    return m, cfg, run_serial(m, cfg)


def test_single_rank_is_bit_identical(system):
    m, cfg, serial = system
    par = run_parallel(m, np.zeros(m.n_cells, int), cfg)
    assert par.rows == serial.rows
    np.testing.assert_array_equal(par.molecules.positions, serial.molecules.positions)
    np.testing.assert_array_equal(par.forces, serial.forces)


@pytest.mark.parametrize("cuts", [[2.0], [1.0, 3.0, 4.5]])
def test_multi_rank_matches_serial(system, cuts):
    m, cfg, serial = system
    par = run_parallel(m, slabs(m, cuts), cfg)
    assert len(par.rows) == len(serial.rows)
    for a, b in zip(par.rows, serial.rows):
        assert a["n_molecules"] == b["n_molecules"]
        for k in KEYS:
            assert abs(a[k] - b[k]) <= 1e-10 * abs(b[k])
    assert len(par.topology_reports) == len(cuts) + 1
    # construction traffic stays between neighbours
    links = {(s, d) for k, s, d in par.message_log if k == "refer_cell_request"}
    assert links <= par.neighbour_pairs


def test_molecule_crossing_processor_face():
    m = hex_box((4, 1, 1), (12.0, 6.0, 6.0), "xyz")
    a = [0, 0, 1, 1]
    pos = np.array([[5.99, 3.0, 3.0], [1.0, 3.0, 3.0]])
    vel = np.array([[4.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    mols = Molecules(np.arange(2), np.zeros(2, int), m.locate_cells(pos), pos, vel)
    par = run_parallel(m, a, SimConfig(steps=1), mols)
    ser = run_serial(m, SimConfig(steps=1), mols)
    assert par.rows[-1]["n_molecules"] == 2
    np.testing.assert_allclose(par.molecules.positions, ser.molecules.positions, atol=1e-14)
    assert par.molecules.cells[0] == 2


def test_periodic_crossing_into_other_rank():
    m = hex_box((4, 1, 1), (12.0, 6.0, 6.0), "xyz")
    pos = np.array([[11.99, 3.0, 3.0]])
    mols = Molecules(np.arange(1), np.zeros(1, int), m.locate_cells(pos), pos, np.array([[4.0, 0, 0]]))
    par = run_parallel(m, [0, 0, 1, 1], SimConfig(steps=1), mols)
    np.testing.assert_allclose(par.molecules.positions[0], [0.01, 3.0, 3.0], atol=1e-12)
    assert par.molecules.cells[0] == 0


def test_same_rank_periodic_refresh():
    m = hex_box(1, 1.0, "xyz")
    topo = build_topology([whole_mesh_portion(m)], 0.5, 0.025)[0]
    mols = Molecules(np.arange(1), np.zeros(1, int), np.zeros(1, int),
                     np.array([[0.2, 0.3, 0.4]]), np.zeros((1, 3)))
    eng = RankEngine(topo, mols, SimConfig(r_cut=0.5))
    eng.install_referred({}, 0)
    hits = np.all(np.isclose(eng.ref_positions, [1.2, 0.3, 0.4]), axis=1)
    assert hits.sum() == 1
    assert len(eng.ref_positions) == 26


def test_empty_source_gives_empty_referred():
    m = hex_box(1, 1.0, "xyz")
    topo = build_topology([whole_mesh_portion(m)], 0.5, 0.025)[0]
    eng = RankEngine(topo, Molecules.empty(), SimConfig(r_cut=0.5))
    eng.install_referred({}, 0)
    assert len(eng.ref_positions) == 0


def test_images_exist_on_both_ranks():
    m = hex_box((4, 2, 2), (12.0, 6.0, 6.0), "yz")
    a = [int(c[0] > 6.0) for c in m.cell_centres]
    portions = decompose(m, a)
    topos = build_topology(portions, 2.5, 0.125)
    pos = np.array([[5.5, 3.0, 3.0], [6.5, 3.0, 3.0]])
    mols = distribute(Molecules(np.arange(2), np.zeros(2, int), m.locate_cells(pos), pos,
                                np.zeros((2, 3))), portions)
    engines = [RankEngine(t, mm, SimConfig()) for t, mm in zip(topos, mols)]
    for e in engines:
        e.set_serves({r: c for r, c in ((o.rank, o.needs.get(e.rank, [])) for o in engines)
                      if r != e.rank})
    out = [e.outgoing_referred() for e in engines]
    engines[0].install_referred({1: out[1][0]}, 0)
    engines[1].install_referred({0: out[0][1]}, 0)
    assert np.any(np.all(np.isclose(engines[0].ref_positions, pos[1]), axis=1))
    assert np.any(np.all(np.isclose(engines[1].ref_positions, pos[0]), axis=1))


def test_missing_batch_is_protocol_error():
    m = hex_box((2, 1, 1), (8.0, 4.0, 4.0), "yz")
    portions = decompose(m, [0, 1])
    topo = build_topology(portions, 2.5, 0.125)[0]
    eng = RankEngine(topo, Molecules.empty(), SimConfig())
    with pytest.raises(ProtocolError, match="no batch"):
        eng.install_referred({}, 0)


def test_stale_referred_records_rejected():
    m = hex_box(1, 1.0, "xyz")
    topo = build_topology([whole_mesh_portion(m)], 0.5, 0.025)[0]
    eng = RankEngine(topo, Molecules.empty(), SimConfig(r_cut=0.5))
    eng.install_referred({}, 0)
    eng.step = 1
    with pytest.raises(ProtocolError, match="from step 0"):
        eng.compute_forces()


def test_channel_stamp_mismatch_and_timeout():
    ch = RankChannel(0, timeout=0.05)
    ch.put(Message("molecule_transfer", 1, 0, (3, 0), []))
    with pytest.raises(ProtocolError, match="expected molecule_transfer@\\(4, 0\\)"):
        ch.take(1, "molecule_transfer", (4, 0))
    with pytest.raises(ProtocolError, match="no message"):
        ch.take(1, "molecule_transfer", (4, 0))


def test_channel_is_fifo_per_sender():
    ch = RankChannel(0)
    for k in range(3):
        ch.put(Message("x", 2, 0, k, k))
        ch.put(Message("x", 1, 0, k, -k))
    assert [ch.take(2, "x", k).payload for k in range(3)] == [0, 1, 2]
    assert [ch.take(1, "x", k).payload for k in range(3)] == [0, -1, -2]


def test_rank_fault_aborts_run():
    m = hex_box((2, 1, 1), (8.0, 4.0, 4.0), "xyz")
    pos = np.array([[3.999, 2.0, 2.0], [4.001 - 1e-9, 2.0, 2.0], [4.001, 2.0, 2.0]])
    mols = Molecules(np.arange(3), np.zeros(3, int), m.locate_cells(pos), pos, np.zeros((3, 3)))
    with pytest.raises(ParallelError, match="rank 1: OverlapError"):
        run_parallel(m, [0, 1], SimConfig(steps=2), mols, timeout=10)


def test_distribute_partitions_ids():
    m = hex_box(4, 4.0, "xyz")
    mols = init_lattice(m, 4, 1.0)
    portions = decompose(m, (m.cell_centres[:, 2] > 2.0).astype(int))
    parts = distribute(mols, portions)
    ids = np.sort(np.concatenate([p.ids for p in parts]))
    np.testing.assert_array_equal(ids, mols.ids)
    for p, part in zip(portions, parts):
        np.testing.assert_array_equal(p.global_cells[part.cells],
                                      mols.cells[np.isin(mols.ids, part.ids)])

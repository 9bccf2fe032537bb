"""Per-rank MD engine: velocity Verlet, face-crossing tracking, measurement.

The step schedule in :func:`run_rank` talks to other ranks only through a
``comm`` object, so the serial run (:class:`SerialComm`) and the threaded
multi-rank run execute exactly the same arithmetic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forces import (ForceAccumulator, PairPotential, cell_blocks, flatten_lists,
                     real_real_pass, real_referred_pass)
from .mesh import Mesh, MeshPortion, whole_mesh_portion
from .topology import DEFAULT_GUARD_FRACTION, MAX_ROUNDS, RankReferralBuilder, RankTopology, build_dils

log = logging.getLogger(__name__)

MAX_CROSSINGS = 32


class EngineError(Exception):
    pass


class TrackingError(EngineError):
    pass


class ProtocolError(EngineError):
    pass


@dataclass
class SimConfig:
    """Run parameters in reduced LJ units (T* = 1 is about 120 K for argon)."""

    dt: float = 0.005
    steps: int = 100
    temperature: float = 1.0
    mass: float = 1.0
    epsilon: float = 1.0
    sigma: float = 1.0
    r_cut: float = 2.5
    guard_fraction: float = DEFAULT_GUARD_FRACTION
    seed: int = 0
    measure_interval: int = 1
    lattice: int = 10
    max_molecules: int = 1_000_000
    max_crossings: int = MAX_CROSSINGS
    max_rounds: int = MAX_ROUNDS

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if self.measure_interval < 1:
            raise ValueError("measure_interval must be >= 1")

    @property
    def potential(self) -> PairPotential:
        return PairPotential(self.epsilon, self.sigma, self.r_cut)

    @property
    def guard(self) -> float:
        return self.guard_fraction * self.r_cut


@dataclass
class Molecules:
    """Structure-of-arrays molecule store kept sorted by (cell, id)."""

    ids: np.ndarray
    species: np.ndarray
    cells: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    @classmethod
    def empty(cls) -> "Molecules":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "Molecules":
        return Molecules(self.ids[idx], self.species[idx], self.cells[idx],
                         self.positions[idx], self.velocities[idx])

    def sorted(self) -> "Molecules":
        return self.take(np.lexsort((self.ids, self.cells)))

    @staticmethod
    def concat(parts) -> "Molecules":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Molecules.empty()
        return Molecules(*(np.concatenate([getattr(p, k) for p in parts])
                           for k in ("ids", "species", "cells", "positions", "velocities")))


def init_lattice(mesh: Mesh, n_per_axis, temperature: float, mass: float = 1.0, seed: int = 0,
                 max_molecules: int = 1_000_000) -> Molecules:
    """Simple cubic lattice filling the mesh bounding box, Maxwellian velocities.

    Net momentum is removed.  Cells are global cell indices of ``mesh``.
    """
    n = np.broadcast_to(np.asarray(n_per_axis, dtype=np.int64), (3,))
    total = int(np.prod(n))
    if total > max_molecules:
        raise EngineError(f"lattice of {total} molecules exceeds the maximum {max_molecules}")
    lo, hi = mesh.bbox
    axes = [lo[a] + (np.arange(n[a]) + 0.5) * (hi[a] - lo[a]) / n[a] for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    cells = mesh.locate_cells(pos)
    if (cells < 0).any():
        bad = pos[np.flatnonzero(cells < 0)[0]]
        raise EngineError(f"lattice site {bad.tolist()} lies outside the mesh")
    rng = np.random.default_rng(seed)
    vel = rng.normal(0.0, np.sqrt(temperature / mass), size=(total, 3))
    vel -= vel.mean(axis=0)
    return Molecules(np.arange(total, dtype=np.int64), np.zeros(total, np.int64), cells, pos, vel)


# -- tracking ------------------------------------------------------------------

@dataclass
class MoleculeTransfer:
    """A molecule leaving through a processor face, in the receiver's coordinates."""

    id: int
    species: int
    face: int
    start: np.ndarray
    end: np.ndarray
    velocity: np.ndarray


def drift_and_transfer(mesh: Mesh, cell: int, start, end, velocity, max_crossings=MAX_CROSSINGS,
                       mol_id=-1):
    """Move along ``start -> end`` face by face.

    Returns ``("local", cell, position, velocity)`` or
    ``("transfer", rank, remote_face, start, end, velocity)`` when the path
    leaves through a processor face; ``start``/``end`` are then already
    transformed into the neighbour's frame.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    vel = np.asarray(velocity, dtype=float)
    for _ in range(max_crossings):
        hit = mesh.first_face_crossed(cell, start, end)
        if hit is None:
            return ("local", cell, end, vel)
        f, t = hit
        x = start + t * (end - start)
        pi = mesh.face_patch[f]
        if pi < 0:
            cell = int(mesh.neighbour[f] if mesh.owner[f] == cell else mesh.owner[f])
            start = x
            continue
        patch = mesh.patches[pi]
        if patch.kind == "wall":
            n = mesh.face_normals[f]
            end = end - 2.0 * ((end - x) @ n) * n
            vel = vel - 2.0 * (vel @ n) * n
            start = x
            continue
        tr = mesh.face_transform(f)
        if patch.kind == "periodic":
            start, end, vel = tr.apply(x), tr.apply(end), tr.rotate(vel)
            cell = int(mesh.owner[mesh.coupled_face[f]])
            continue
        return ("transfer", patch.neighbour_rank, int(mesh.coupled_face[f]),
                tr.apply(x), tr.apply(end), tr.rotate(vel))
    raise TrackingError(f"molecule {mol_id} exceeded {max_crossings} face crossings "
                        f"(last cell {cell})")


def inside_cells(mesh: Mesh, cells, pts, tol=None) -> np.ndarray:
    """Vectorised containment of ``pts[i]`` in ``cells[i]``."""
    tol = mesh.tol if tol is None else tol
    if len(cells) == 0:
        return np.zeros(0, dtype=bool)
    d = mesh._signed_distances(cells, pts[:, None, :])
    return d.max(axis=1) <= tol


# -- measurement ---------------------------------------------------------------

@dataclass
class CellFieldSample:
    """Per-cell accumulators, summed over measurement samples."""

    count: np.ndarray
    momentum: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray
    samples: int = 0

    @classmethod
    def zeros(cls, n_cells: int) -> "CellFieldSample":
        return cls(np.zeros(n_cells), np.zeros((n_cells, 3)), np.zeros(n_cells), np.zeros(n_cells))

    def add(self, cells, mass, velocities, pe):
        n = len(self.count)
        self.count += np.bincount(cells, minlength=n)
        for c in range(3):
            self.momentum[:, c] += np.bincount(cells, weights=mass * velocities[:, c], minlength=n)
        self.kinetic += np.bincount(cells, weights=0.5 * mass * (velocities ** 2).sum(axis=1), minlength=n)
        self.potential += np.bincount(cells, weights=pe, minlength=n)
        self.samples += 1


def measure_fields(n_cells, cells, mass, velocities, pe, sample: CellFieldSample | None = None):
    sample = CellFieldSample.zeros(n_cells) if sample is None else sample
    sample.add(cells, mass, velocities, pe)
    return sample


@dataclass
class StepReport:
    step: int
    ids: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray
    momentum: np.ndarray
    pair_count: int = 0
    referred_pair_count: int = 0


TIMESERIES_COLUMNS = ("step", "time", "ke_per_mol", "pe_per_mol", "te_per_mol",
                      "px", "py", "pz", "n_molecules")


def merge_reports(reports, dt) -> dict:
    """Combine per-rank reports into one time-series row (sums in global id order)."""
    ids = np.concatenate([r.ids for r in reports])
    order = np.argsort(ids, kind="stable")
    ke = np.concatenate([r.kinetic for r in reports])[order]
    pe = np.concatenate([r.potential for r in reports])[order]
    mom = np.concatenate([r.momentum for r in reports])[order]
    n = len(ids)
    step = reports[0].step
    KE, PE = float(ke.sum()), float(pe.sum())
    p = mom.sum(axis=0)
    row = {"step": step, "time": step * dt,
           "ke_per_mol": KE / n if n else 0.0, "pe_per_mol": PE / n if n else 0.0,
           "te_per_mol": (KE + PE) / n if n else 0.0,
           "px": float(p[0]), "py": float(p[1]), "pz": float(p[2]), "n_molecules": n,
           "abs_momentum": float(np.linalg.norm(mom, axis=1).sum()),
           "pair_count": sum(r.pair_count for r in reports),
           "referred_pair_count": sum(r.referred_pair_count for r in reports)}
    return row


# -- the rank engine -------------------------------------------------------------

class RankEngine:
    """State and per-phase operations of one rank."""

    def __init__(self, topology: RankTopology, molecules: Molecules, config: SimConfig):
        self.topo = topology
        self.portion: MeshPortion = topology.portion
        self.mesh: Mesh = self.portion.mesh
        self.rank = self.portion.rank
        self.config = config
        self.pot = config.potential
        self.mols = molecules.sorted()
        self.dil_i, self.dil_j = flatten_lists(topology.dils)
        self.ref_i, self.ref_j = flatten_lists([rc.interactions for rc in topology.referred])
        self.acc = ForceAccumulator.zeros(len(self.mols))
        self.step = 0
        self.fields = CellFieldSample.zeros(self.mesh.n_cells)
        self.referred_step = -1
        self.ref_positions = np.zeros((0, 3))
        self.ref_species = np.zeros(0, np.int64)
        self.ref_cells = np.zeros(0, np.int64)
        # (source rank, source cell) -> referred cell indices on this rank
        self.needs: dict[int, list[int]] = {}
        for rc in topology.referred:
            self.needs.setdefault(rc.source_rank, []).append(rc.source_cell)
        self.needs = {r: sorted(set(c)) for r, c in self.needs.items()}
        self.serves: dict[int, list[int]] = {}
        ref = topology.referred
        self._ref_y = np.array([rc.transform.y for rc in ref]).reshape(-1, 3)
        self._ref_R = np.array([rc.transform.R for rc in ref]).reshape(-1, 3, 3)
        self._ref_rot = np.array([rc.transform.has_rotation for rc in ref], dtype=bool)

    # refresh plumbing
    @property
    def refresh_sources(self):
        return sorted(r for r in self.needs if r != self.rank)

    @property
    def refresh_targets(self):
        return sorted(r for r in self.serves if r != self.rank)

    def set_serves(self, requests: dict):
        self.serves = {r: list(c) for r, c in requests.items() if c}

    def cell_molecules(self, cells):
        """Positions and species of the molecules in each listed real cell."""
        starts, counts = cell_blocks(self.mols.cells, self.mesh.n_cells)
        out = {}
        for c in cells:
            s, n = starts[c], counts[c]
            out[int(c)] = (self.mols.positions[s:s + n].copy(), self.mols.species[s:s + n].copy())
        return out

    def outgoing_referred(self) -> dict:
        return {r: self.cell_molecules(self.serves[r]) for r in self.refresh_targets}

    def install_referred(self, batches: dict, step: int):
        """Build this step's referred molecules from source batches (rank -> {cell: data})."""
        own = self.cell_molecules(self.needs.get(self.rank, []))
        pos, spc, counts = [], [], []
        for rc in self.topo.referred:
            src = own if rc.source_rank == self.rank else batches.get(rc.source_rank, {})
            try:
                p, s = src[rc.source_cell]
            except KeyError:
                raise ProtocolError(f"rank {self.rank}: no batch for referred cell "
                                    f"({rc.source_rank}, {rc.source_cell})") from None
            pos.append(p)
            spc.append(s)
            counts.append(len(p))
        n_ref = len(self.topo.referred)
        cel = np.repeat(np.arange(n_ref), np.asarray(counts, dtype=np.int64))
        p = np.concatenate(pos) if pos else np.zeros((0, 3))
        out = p + self._ref_y[cel]
        rot = self._ref_rot[cel]
        if rot.any():
            q = p[rot]
            out[rot] = np.einsum("nij,nj->ni", self._ref_R[cel[rot]], q) + self._ref_y[cel[rot]]
        self.ref_positions = out
        self.ref_species = np.concatenate(spc) if spc else np.zeros(0, np.int64)
        self.ref_cells = cel
        self.referred_step = step

    # integration
    def half_kick(self):
        self.mols.velocities += (0.5 * self.config.dt / self.config.mass) * self.acc.forces

    def drift(self) -> dict:
        """Move every molecule by ``v*dt``; returns outgoing transfers per rank."""
        m = self.mols
        end = m.positions + self.config.dt * m.velocities
        stay = inside_cells(self.mesh, m.cells, end)
        m.positions[stay] = end[stay]
        movers = np.flatnonzero(~stay)
        return self._track(movers, m.positions[movers], end[movers])

    def _track(self, movers, starts, ends, cells=None, velocities=None) -> dict:
        m = self.mols
        outgoing: dict[int, list[MoleculeTransfer]] = {}
        gone = []
        for k, i in enumerate(movers):
            c = m.cells[i] if cells is None else cells[k]
            v = m.velocities[i] if velocities is None else velocities[k]
            res = drift_and_transfer(self.mesh, int(c), starts[k], ends[k], v,
                                     self.config.max_crossings, int(m.ids[i]))
            if res[0] == "local":
                _, m.cells[i], m.positions[i], m.velocities[i] = res
            else:
                _, rank, face, s, e, v = res
                outgoing.setdefault(rank, []).append(
                    MoleculeTransfer(int(m.ids[i]), int(m.species[i]), face, s, e, v))
                gone.append(i)
        if gone:
            keep = np.ones(len(m), dtype=bool)
            keep[gone] = False
            self.mols = m.take(keep)
        return outgoing

    def accept_transfers(self, batches: dict) -> dict:
        """Create arriving molecules and finish their paths; may emit further transfers."""
        arrivals = [t for r in sorted(batches) for t in batches[r]]
        if not arrivals:
            return {}
        arrivals.sort(key=lambda t: t.id)
        n0 = len(self.mols)
        cells = np.array([self.mesh.owner[t.face] for t in arrivals], np.int64)
        new = Molecules(np.array([t.id for t in arrivals], np.int64),
                        np.array([t.species for t in arrivals], np.int64), cells.copy(),
                        np.array([t.start for t in arrivals]),
                        np.array([t.velocity for t in arrivals]))
        self.mols = Molecules.concat([self.mols, new])
        idx = np.arange(n0, n0 + len(arrivals))
        return self._track(idx, np.array([t.start for t in arrivals]),
                           np.array([t.end for t in arrivals]), cells)

    def audit_occupancy(self):
        m = self.mols
        ok = inside_cells(self.mesh, m.cells, m.positions, tol=1e3 * self.mesh.tol)
        if not ok.all():
            i = np.flatnonzero(~ok)[0]
            raise EngineError(f"rank {self.rank}: molecule {m.ids[i]} is outside its cell {m.cells[i]}")
        self.mols = m.sorted()

    def compute_forces(self):
        if self.referred_step != self.step:
            raise ProtocolError(f"rank {self.rank}: referred molecules are from step "
                                f"{self.referred_step}, force pass at step {self.step}")
        m = self.mols
        acc = ForceAccumulator.zeros(len(m))
        real_real_pass(self.dil_i, self.dil_j, self.mesh.n_cells, m.positions, m.cells,
                       self.pot, acc, m.ids)
        real_referred_pass(self.ref_i, self.ref_j, len(self.topo.referred), self.ref_positions,
                           self.ref_cells, self.mesh.n_cells, m.positions, m.cells, self.pot,
                           acc, m.ids)
        self.acc = acc

    def report(self) -> StepReport:
        m = self.mols
        mass = self.config.mass
        ke = 0.5 * mass * (m.velocities ** 2).sum(axis=1)
        self.fields.add(m.cells, mass, m.velocities, self.acc.energy)
        return StepReport(self.step, m.ids.copy(), ke, self.acc.energy.copy(), mass * m.velocities,
                          self.acc.pair_count, self.acc.referred_pair_count)


# -- communication ---------------------------------------------------------------

class SerialComm:
    """Single-rank stand-in for the channel network."""

    def __init__(self):
        self.reports: list[StepReport] = []

    def exchange(self, kind, stamp, outgoing: dict, recv_from, send_to=None) -> dict:
        send_to = recv_from if send_to is None else send_to
        if any(outgoing.values()) or recv_from or send_to:
            raise ProtocolError("serial run cannot exchange messages")
        return {}

    def allreduce(self, kind, stamp, value):
        return value

    def gather(self, report):
        self.reports.append(report)


def build_rank_topology(portion: MeshPortion, comm, config: SimConfig, segment_order=None):
    """Referral rounds through ``comm`` followed by DIL construction."""
    builder = RankReferralBuilder(portion, config.r_cut, config.guard, segment_order)
    nbrs = portion.neighbour_ranks
    for rnd in range(config.max_rounds):
        outbox, added = builder.evaluate_round()
        recv = comm.exchange("refer_cell_request", rnd, outbox, nbrs)
        added += builder.receive([q for r in sorted(recv) for q in recv[r]])
        if comm.allreduce("round_flag", rnd, added) == 0:
            break
    else:
        raise EngineError(f"rank {portion.rank}: referral did not converge in {config.max_rounds} rounds")
    referred = builder.finish()
    return RankTopology(portion, build_dils(portion, config.r_cut, config.guard), referred,
                        config.r_cut, config.guard)


def setup_refresh(engine: RankEngine, comm, all_ranks):
    peers = [r for r in all_ranks if r != engine.rank]
    out = {r: engine.needs.get(r, []) for r in peers}
    recv = comm.exchange("subscription", -1, out, peers)
    engine.set_serves(recv)


def refresh_referred(engine: RankEngine, comm):
    """Send current molecules of served cells; rebuild referred molecules from what arrives."""
    recv = comm.exchange("referred_molecule_batch", engine.step, engine.outgoing_referred(),
                         engine.refresh_sources, engine.refresh_targets)
    engine.install_referred(recv, engine.step)


def transfer_phase(engine: RankEngine, comm, outgoing: dict):
    """Deliver crossing molecules until no rank has any in flight."""
    nbrs = engine.portion.neighbour_ranks
    for rnd in range(engine.config.max_crossings):
        pending = sum(len(v) for v in outgoing.values())
        if comm.allreduce("transfer_flag", (engine.step, rnd), pending) == 0:
            return
        recv = comm.exchange("molecule_transfer", (engine.step, rnd), outgoing, nbrs)
        outgoing = engine.accept_transfers(recv)
    raise TrackingError(f"rank {engine.rank}: transfers did not settle")


def run_rank(engine: RankEngine, comm, n_steps: int, n_total: int | None = None):
    """Velocity-Verlet schedule for one rank.

    half-kick, drift/transfer, occupancy audit, referred refresh, forces,
    half-kick, measurement.  Every exchange completes before the next phase.
    """
    interval = engine.config.measure_interval
    refresh_referred(engine, comm)
    engine.compute_forces()
    comm.gather(engine.report())
    for _ in range(n_steps):
        engine.half_kick()
        outgoing = engine.drift()
        engine.step += 1
        transfer_phase(engine, comm, outgoing)
        engine.audit_occupancy()
        count = comm.allreduce("molecule_count", engine.step, len(engine.mols))
        if n_total is not None and count != n_total:
            raise EngineError(f"molecule count changed: {count} != {n_total}")
        refresh_referred(engine, comm)
        engine.compute_forces()
        engine.half_kick()
        if engine.step % interval == 0:
            comm.gather(engine.report())


@dataclass
class RunResult:
    rows: list
    molecules: Molecules
    fields: dict
    topology_reports: list
    forces: np.ndarray = field(default=None)

    def series(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def _final_state(engines):
    mols = Molecules.concat([Molecules(e.mols.ids, e.mols.species,
                                       e.portion.global_cells[e.mols.cells],
                                       e.mols.positions, e.mols.velocities) for e in engines])
    forces = np.concatenate([e.acc.forces for e in engines])
    order = np.argsort(mols.ids)
    return mols.take(order), forces[order]


def merge_fields(engines) -> dict:
    """Per-cell field sums keyed by global cell id."""
    out = {}
    for e in engines:
        f = e.fields
        for c in range(len(f.count)):
            out[int(e.portion.global_cells[c])] = {
                "count": float(f.count[c]), "momentum": f.momentum[c].tolist(),
                "kinetic": float(f.kinetic[c]), "potential": float(f.potential[c]),
                "samples": f.samples}
    return dict(sorted(out.items()))


def run_serial(mesh: Mesh, config: SimConfig, molecules: Molecules | None = None,
               steps: int | None = None) -> RunResult:
    """Single-rank simulation without any message passing."""
    portion = whole_mesh_portion(mesh)
    comm = SerialComm()
    if molecules is None:
        molecules = init_lattice(mesh, config.lattice, config.temperature, config.mass,
                                 config.seed, config.max_molecules)
    topo = build_rank_topology(portion, comm, config)
    engine = RankEngine(topo, molecules, config)
    setup_refresh(engine, comm, [0])
    run_rank(engine, comm, config.steps if steps is None else steps, len(molecules))
    mols, forces = _final_state([engine])
    rows = [merge_reports([r], config.dt) for r in comm.reports]
    return RunResult(rows, mols, merge_fields([engine]), [topo.report()], forces)


def snapshot_text(mols: Molecules) -> str:
    lines = ["# id species x y z vx vy vz"]
    for i in range(len(mols)):
        vals = " ".join(repr(float(v)) for v in (*mols.positions[i], *mols.velocities[i]))
        lines.append(f"{int(mols.ids[i])} {int(mols.species[i])} {vals}")
    return "\n".join(lines) + "\n"


def read_snapshot(text: str, mesh: Mesh) -> Molecules:
    ids, spc, data = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 8:
            raise EngineError(f"snapshot line {lineno}: expected 'id species x y z vx vy vz'")
        try:
            ids.append(int(tok[0]))
            spc.append(int(tok[1]))
            data.append([float(v) for v in tok[2:]])
        except ValueError:
            raise EngineError(f"snapshot line {lineno}: bad number") from None
    data = np.array(data, dtype=float).reshape(-1, 6)
    ids = np.array(ids, np.int64)
    if len(np.unique(ids)) != len(ids):
        raise EngineError("snapshot has duplicate molecule ids")
    cells = mesh.locate_cells(data[:, :3])
    if (cells < 0).any():
        raise EngineError(f"snapshot molecule {ids[np.flatnonzero(cells < 0)[0]]} is outside the mesh")
    return Molecules(ids, np.array(spc, np.int64), cells, data[:, :3], data[:, 3:])

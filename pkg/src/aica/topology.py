"""Cell interaction topology, built once before time stepping.

* Direct interaction lists (DILs): for every real cell, the higher-indexed
  real cells with a vertex within the search radius of one of its vertices.
* Referred cells: images of real cells placed across periodic and processor
  boundaries, found by repeatedly referring cells across patch segments
  until no rank adds anything new.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshPortion
from .transforms import TransformPair, apply, compose

log = logging.getLogger(__name__)

DEFAULT_GUARD_FRACTION = 0.05
MAX_ROUNDS = 64


class TopologyError(Exception):
    pass


def search_radius(r_cut_hat: float, guard: float) -> float:
    if r_cut_hat <= 0.0:
        raise ValueError("r_cut_hat must be positive")
    if r_cut_hat + guard <= 0.0:
        raise ValueError(f"guard {guard} leaves no search radius")
    return r_cut_hat + guard


def _vertex_table(vertex_sets):
    """Stack per-cell vertex arrays; returns (points, start offsets)."""
    counts = np.array([len(v) for v in vertex_sets], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(counts) else np.zeros(0, np.int64)
    pts = np.concatenate(vertex_sets) if len(vertex_sets) else np.zeros((0, 3))
    return pts, starts, counts


def _cells_in_range(query_vertices, table, radius):
    """Indices of table cells with any vertex strictly closer than ``radius`` to any query vertex."""
    pts, starts, counts = table
    if len(pts) == 0 or len(query_vertices) == 0:
        return np.zeros(0, dtype=np.int64)
    d2 = ((pts[:, None, :] - query_vertices[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    nonempty = counts > 0
    per_cell = np.full(len(counts), np.inf)
    per_cell[nonempty] = np.minimum.reduceat(d2, starts[nonempty])
    return np.flatnonzero(per_cell < radius * radius)


def real_cell_vertices(portion: MeshPortion):
    m = portion.mesh
    return [m.points[m.cell_points[c]] for c in range(m.n_cells)]


# -- DILs ---------------------------------------------------------------------

def build_dils(portion: MeshPortion, r_cut_hat: float, guard: float = 0.0) -> list[np.ndarray]:
    """Non-double-counting direct interaction lists for the real cells of ``portion``."""
    r = search_radius(r_cut_hat, guard)
    verts = real_cell_vertices(portion)
    table = _vertex_table(verts)
    dils = []
    for i, v in enumerate(verts):
        near = _cells_in_range(v, table, r)
        dils.append(near[near > i])
    return dils


# -- patch segments -----------------------------------------------------------

@dataclass
class PatchSegment:
    """Faces of one coupled patch that share a single referring transform."""

    patch: str
    faces: np.ndarray
    transform: TransformPair
    dest_rank: int
    kind: str
    origin: tuple = ("internal",)

    @property
    def label(self) -> str:
        return f"{self.patch}[{self.origin[-1] if self.kind == 'periodic' else '/'.join(self.origin)}]"


def build_patch_segments(portion: MeshPortion) -> list[PatchSegment]:
    """Split periodic and processor patches into single-transform segments.

    Periodic halves are separate segments.  Processor patches are created
    one per (neighbour, origin) by :func:`~aica.mesh.decompose`, so each is
    already a segment: cut internal faces apart from severed periodic faces,
    and severed faces grouped by source patch and half.
    """
    m = portion.mesh
    segs = []
    for p in m.patches:
        if p.kind == "periodic" and p.pairs:
            for half, faces in zip("AB", p.halves()):
                t = m.face_transform(faces[0])
                for f in faces[1:]:
                    if not m.face_transform(f).close_to(t, 1e3 * m.tol):
                        raise TopologyError(f"segment {p.name}[{half}] has inconsistent transforms")
                segs.append(PatchSegment(p.name, np.asarray(faces), t, portion.rank, "periodic",
                                         ("periodic", p.name, half)))
        elif p.kind == "processor" and p.faces:
            segs.append(PatchSegment(p.name, np.asarray(p.faces), p.transform, p.neighbour_rank,
                                     "processor", p.origin))
    return segs


# -- referred cells -----------------------------------------------------------

@dataclass
class ReferredCell:
    """Image of a real cell (on ``source_rank``) moved by ``transform``."""

    source_rank: int
    source_cell: int
    transform: TransformPair
    vertices: np.ndarray
    source_global: int = -1
    interactions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def key(self, decimals: int = 9):
        return (self.source_rank, self.source_cell, tuple(np.round(self.transform.y, decimals) + 0.0))


@dataclass
class ReferCellRequest:
    """Proposal to create a referred cell on the receiving rank."""

    source_rank: int
    source_cell: int
    source_global: int
    y: np.ndarray
    R: np.ndarray
    vertices: np.ndarray


class RankReferralBuilder:
    """One rank's side of the iterative referral protocol.

    Each round the rank refers every newly seen cell in range of each of its
    segments.  Periodic segments create cells locally; processor segments
    produce :class:`ReferCellRequest` messages for the neighbour rank.
    """

    def __init__(self, portion: MeshPortion, r_cut_hat: float, guard: float,
                 segment_order=None, dup_tol: float | None = None):
        self.portion = portion
        self.rank = portion.rank
        self.radius = search_radius(r_cut_hat, guard)
        self.tol = portion.mesh.tol if dup_tol is None else dup_tol
        self.segments = build_patch_segments(portion)
        if segment_order is not None:
            self.segments = [self.segments[i] for i in segment_order]
        m = portion.mesh
        self._seg_vertices = [m.points[np.unique(np.concatenate([m.faces[f] for f in s.faces]))]
                              for s in self.segments]
        self._seg_trees = [cKDTree(v) for v in self._seg_vertices]
        self.real_vertices = real_cell_vertices(portion)
        self.referred: list[ReferredCell] = []
        self._index: dict[tuple, list[np.ndarray]] = {}
        self._seen = [0] * len(self.segments)
        self.round = 0

    def _in_range(self, seg_i, vertex_sets):
        if not vertex_sets:
            return np.zeros(0, dtype=np.int64)
        pts, starts, counts = _vertex_table(vertex_sets)
        d, _ = self._seg_trees[seg_i].query(pts, k=1)
        hit = np.minimum.reduceat(d, starts) < self.radius
        return np.flatnonzero(hit)

    def try_add(self, req: ReferCellRequest) -> bool:
        """Create the referred cell unless it duplicates an existing or real cell."""
        if req.source_rank == self.rank and np.linalg.norm(req.y) < self.tol:
            return False
        key = (req.source_rank, req.source_cell)
        ys = self._index.setdefault(key, [])
        for y in ys:
            if np.linalg.norm(y - req.y) < self.tol:
                return False
        ys.append(np.asarray(req.y))
        self.referred.append(ReferredCell(req.source_rank, req.source_cell,
                                          TransformPair(req.y, req.R), req.vertices,
                                          req.source_global))
        return True

    def _propose(self, seg: PatchSegment, src_rank, src_cell, src_global, t, verts):
        tt = compose(seg.transform, t)
        return ReferCellRequest(src_rank, src_cell, src_global, tt.y, tt.R,
                                apply(seg.transform, verts))

    def evaluate_round(self):
        """Evaluate all segments once; returns ``(outbox, n_added_locally)``.

        ``outbox`` maps neighbour rank to the list of requests for it.
        """
        first = self.round == 0
        self.round += 1
        outbox: dict[int, list[ReferCellRequest]] = {}
        added = 0
        g = self.portion.global_cells
        for si, seg in enumerate(self.segments):
            props = []
            if first:
                for c in self._in_range(si, self.real_vertices):
                    props.append(self._propose(seg, self.rank, int(c), int(g[c]),
                                               TransformPair.identity(), self.real_vertices[c]))
            start = self._seen[si]
            new = self.referred[start:]
            self._seen[si] = len(self.referred)
            for k in self._in_range(si, [rc.vertices for rc in new]):
                rc = new[k]
                props.append(self._propose(seg, rc.source_rank, rc.source_cell, rc.source_global,
                                           rc.transform, rc.vertices))
            if seg.dest_rank == self.rank:
                added += sum(self.try_add(p) for p in props)
            else:
                outbox.setdefault(seg.dest_rank, []).extend(props)
        return outbox, added

    def receive(self, requests) -> int:
        return sum(self.try_add(r) for r in requests)

    def finish(self):
        """Bind interactions, drop cells that interact with nothing, sort canonically."""
        bound = []
        table = _vertex_table(self.real_vertices)
        for rc in self.referred:
            rc.interactions = bind_referred_interactions(self.portion, rc, self.radius, 0.0, table)
            if len(rc.interactions):
                bound.append(rc)
        bound.sort(key=lambda rc: rc.key())
        return bound


def bind_referred_interactions(portion: MeshPortion, referred: ReferredCell, r_cut_hat: float,
                               guard: float = 0.0, _table=None) -> np.ndarray:
    """Real cells of ``portion`` with a vertex in range of a vertex of ``referred``."""
    r = search_radius(r_cut_hat, guard)
    table = _table if _table is not None else _vertex_table(real_cell_vertices(portion))
    return _cells_in_range(referred.vertices, table, r)


def build_referred_cells(portions, r_cut_hat: float, guard: float = 0.0, segment_orders=None,
                         max_rounds: int = MAX_ROUNDS, message_log=None):
    """Run the referral protocol over all ranks in-process.

    Requests travel only along processor patches (neighbour ranks).  The
    loop stops after the first round in which no rank added a cell.
    Returns one canonically sorted list of :class:`ReferredCell` per rank.
    """
    builders = [RankReferralBuilder(p, r_cut_hat, guard,
                                    None if segment_orders is None else segment_orders[i])
                for i, p in enumerate(portions)]
    for b in builders:
        nbrs = set(b.portion.neighbour_ranks)
        for s in b.segments:
            if s.kind == "processor" and s.dest_rank not in nbrs:
                raise TopologyError(f"rank {b.rank} segment {s.patch} targets non-neighbour")
    run_rounds(builders, max_rounds, message_log)
    return [b.finish() for b in builders]


def run_rounds(builders, max_rounds=MAX_ROUNDS, message_log=None) -> int:
    for rnd in range(1, max_rounds + 1):
        total = 0
        mail: dict[int, list] = {b.rank: [] for b in builders}
        for b in builders:
            outbox, added = b.evaluate_round()
            total += added
            for dest, reqs in sorted(outbox.items()):
                if message_log is not None:
                    message_log.append((b.rank, dest, len(reqs)))
                mail[dest].extend(reqs)
        for b in builders:
            total += b.receive(mail[b.rank])
        log.debug("referral round %d added %d cells", rnd, total)
        if total == 0:
            return rnd
    raise TopologyError(f"referred-cell construction did not converge in {max_rounds} rounds "
                        f"({sum(len(b.referred) for b in builders)} cells so far)")


@dataclass
class RankTopology:
    """Everything a rank needs for force evaluation."""

    portion: MeshPortion
    dils: list
    referred: list
    r_cut_hat: float
    guard: float

    @property
    def rank(self) -> int:
        return self.portion.rank

    def report(self) -> dict:
        by_src: dict[int, int] = {}
        for rc in self.referred:
            by_src[rc.source_rank] = by_src.get(rc.source_rank, 0) + 1
        return {"rank": self.rank, "real_cells": self.portion.mesh.n_cells,
                "referred_cells": len(self.referred),
                "dil_pairs": int(sum(len(d) for d in self.dils)),
                "referred_by_source_rank": dict(sorted(by_src.items()))}


def build_topology(portions, r_cut_hat: float, guard: float, **kw) -> list[RankTopology]:
    referred = build_referred_cells(portions, r_cut_hat, guard, **kw)
    return [RankTopology(p, build_dils(p, r_cut_hat, guard), ref, r_cut_hat, guard)
            for p, ref in zip(portions, referred)]


def dump_topology(topo: RankTopology) -> str:
    """Plain-text listing of DILs and referred cells (global cell ids)."""
    g = topo.portion.global_cells
    out = [f"rank {topo.rank}", f"dils {len(topo.dils)}"]
    for i, d in enumerate(topo.dils):
        out.append(f"{g[i]}: " + " ".join(str(int(g[j])) for j in sorted(g[d])))
    out.append(f"referred {len(topo.referred)}")
    for rc in topo.referred:
        y = " ".join(f"{v:.9g}" for v in rc.transform.y + 0.0)
        inter = " ".join(str(int(g[j])) for j in sorted(g[rc.interactions]))
        out.append(f"{rc.source_rank} {rc.source_global} [{y}] : {inter}")
    return "\n".join(out) + "\n"


def canonical_referred_set(referred, decimals: int = 9):
    return sorted((rc.source_rank, rc.source_global, tuple(np.round(rc.transform.y, decimals) + 0.0))
                  for rc in referred)

"""Static polyhedral mesh: geometry, validation, decomposition and tracking queries.

Faces are vertex loops whose right-hand normal points out of the owner cell
(and into the neighbour cell for internal faces).  Boundary faces belong to
exactly one patch: ``wall``, ``periodic`` (two coupled halves on the same
rank) or ``processor`` (one half on another rank).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .transforms import TransformPair, boundary_transform

log = logging.getLogger(__name__)

PATCH_KINDS = ("wall", "periodic", "processor")
TOL_FACTOR = 1e-9
FLATNESS_FACTOR = 1e-6


class MeshError(Exception):
    pass


class MeshParseError(MeshError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class MeshValidationError(MeshError):
    pass


class DecompositionError(MeshError):
    pass


@dataclass(frozen=True)
class Patch:
    """Boundary patch.

    ``pairs`` couples faces: for ``periodic`` both entries are local faces
    (first element on half A, second on half B); for ``processor`` the
    second entry is the face index on ``neighbour_rank``.  ``origin`` records
    where a processor face came from: ``("internal",)`` for a cut internal
    face, ``("periodic", patch_name, half)`` for a severed periodic pair.
    """

    name: str
    kind: str
    faces: tuple = ()
    pairs: tuple = ()
    neighbour_rank: int | None = None
    origin: tuple = ("internal",)
    transform: TransformPair | None = None

    @property
    def coupled(self) -> bool:
        return self.kind in ("periodic", "processor")

    def halves(self):
        """Face tuples of half A and half B (periodic patches only)."""
        return tuple(a for a, _ in self.pairs), tuple(b for _, b in self.pairs)


def _polygon_geometry(pts: np.ndarray):
    """Centre and area vector of a polygon given as an ordered loop."""
    if len(pts) == 3:
        S = 0.5 * np.cross(pts[1] - pts[0], pts[2] - pts[0])
        return pts.mean(axis=0), S
    pm = pts.mean(axis=0)
    nxt = np.roll(pts, -1, axis=0)
    a = 0.5 * np.cross(pts - pm, nxt - pm)
    mag = np.linalg.norm(a, axis=1)
    S = a.sum(axis=0)
    cen = (pm + pts + nxt) / 3.0
    if mag.sum() == 0.0:
        return pm, S
    return (mag[:, None] * cen).sum(axis=0) / mag.sum(), S


class Mesh:
    """Unstructured polyhedral mesh with precomputed geometry."""

    def __init__(self, points, faces, owner, neighbour, cells, patches=(),
                 *, validate=True, flatness_tol=None, tol=None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.faces = [tuple(int(v) for v in f) for f in faces]
        self.owner = np.asarray(owner, dtype=np.int64)
        self.neighbour = np.asarray(neighbour, dtype=np.int64)
        self.cells = [tuple(int(f) for f in c) for c in cells]
        self.patches = list(patches)
        self._check_indices()
        lo = self.points.min(axis=0) if len(self.points) else np.zeros(3)
        hi = self.points.max(axis=0) if len(self.points) else np.zeros(3)
        self.bbox = (lo, hi)
        self.diagonal = float(np.linalg.norm(hi - lo))
        self.tol = TOL_FACTOR * self.diagonal if tol is None else float(tol)
        self.flatness_tol = (FLATNESS_FACTOR * self.diagonal if flatness_tol is None
                             else float(flatness_tol))
        self._compute_geometry()
        self._index_patches()
        if validate:
            self.validate()

    # -- construction helpers -------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def is_boundary(self, f: int) -> bool:
        return self.neighbour[f] < 0

    def _check_indices(self):
        npts = len(self.points)
        nf = len(self.faces)
        nc = len(self.cells)
        if len(self.owner) != nf or len(self.neighbour) != nf:
            raise MeshValidationError("owner/neighbour arrays must have one entry per face")
        for i, f in enumerate(self.faces):
            if len(f) < 3:
                raise MeshValidationError(f"face {i} has fewer than 3 vertices")
            for v in f:
                if v < 0 or v >= npts:
                    raise MeshValidationError(
                        f"dangling vertex index {v} in face {i} ({npts} points)")
            if not 0 <= self.owner[i] < nc:
                raise MeshValidationError(f"face {i} owner {self.owner[i]} is not a cell")
            if self.neighbour[i] >= nc or self.neighbour[i] < -1:
                raise MeshValidationError(f"face {i} neighbour {self.neighbour[i]} is not a cell")
        for c, fl in enumerate(self.cells):
            for f in fl:
                if f < 0 or f >= nf:
                    raise MeshValidationError(f"dangling face index {f} in cell {c}")
        for p in self.patches:
            for f in p.faces:
                if f < 0 or f >= nf:
                    raise MeshValidationError(f"dangling face index {f} in patch {p.name}")

    def _compute_geometry(self):
        nf = self.n_faces
        self.face_centres = np.empty((nf, 3))
        self.face_area_vectors = np.empty((nf, 3))
        for i, f in enumerate(self.faces):
            self.face_centres[i], self.face_area_vectors[i] = _polygon_geometry(self.points[list(f)])
        self.face_areas = np.linalg.norm(self.face_area_vectors, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.face_normals = self.face_area_vectors / self.face_areas[:, None]

        nc = self.n_cells
        self.cell_volumes = np.zeros(nc)
        self.cell_centres = np.zeros((nc, 3))
        self.cell_points = []
        max_faces = max((len(c) for c in self.cells), default=0)
        self._cf_index = np.zeros((nc, max_faces), dtype=np.int64)
        self._cf_sign = np.zeros((nc, max_faces))
        self._cf_mask = np.zeros((nc, max_faces), dtype=bool)
        for c, fl in enumerate(self.cells):
            signs = np.array([1.0 if self.owner[f] == c else -1.0 for f in fl])
            self._cf_index[c, :len(fl)] = fl
            self._cf_sign[c, :len(fl)] = signs
            self._cf_mask[c, :len(fl)] = True
            fc = self.face_centres[list(fl)]
            est = fc.mean(axis=0)
            S = self.face_area_vectors[list(fl)] * signs[:, None]
            pyr = np.einsum("ij,ij->i", S, fc - est) / 3.0
            vol = pyr.sum()
            self.cell_volumes[c] = vol
            if vol != 0.0:
                self.cell_centres[c] = (pyr[:, None] * (0.75 * fc + 0.25 * est)).sum(axis=0) / vol
            else:
                self.cell_centres[c] = est
            self.cell_points.append(np.unique(np.concatenate([self.faces[f] for f in fl]))
                                    if fl else np.zeros(0, dtype=np.int64))

    def _index_patches(self):
        self.face_patch = np.full(self.n_faces, -1, dtype=np.int64)
        self.coupled_face = np.full(self.n_faces, -1, dtype=np.int64)
        self._face_transform: dict[int, TransformPair] = {}
        for pi, p in enumerate(self.patches):
            if p.kind not in PATCH_KINDS:
                raise MeshValidationError(f"patch {p.name}: unknown kind {p.kind!r}")
            for f in p.faces:
                if self.face_patch[f] >= 0:
                    raise MeshValidationError(
                        f"face {f} belongs to patches {self.patches[self.face_patch[f]].name} and {p.name}")
                self.face_patch[f] = pi
            if p.kind == "periodic":
                for a, b in p.pairs:
                    self.coupled_face[a] = b
                    self.coupled_face[b] = a
            elif p.kind == "processor":
                for a, b in p.pairs:
                    self.coupled_face[a] = b

    # -- validation -----------------------------------------------------------

    def validate(self):
        self._validate_topology()
        self._validate_geometry()
        self._validate_patches()

    def _validate_topology(self):
        refs: dict[int, list[int]] = {}
        for c, fl in enumerate(self.cells):
            if len(set(fl)) != len(fl):
                raise MeshValidationError(f"cell {c} lists a face twice")
            for f in fl:
                refs.setdefault(f, []).append(c)
        for f in range(self.n_faces):
            expect = sorted([int(self.owner[f])] + ([int(self.neighbour[f])] if self.neighbour[f] >= 0 else []))
            if sorted(refs.get(f, [])) != expect:
                raise MeshValidationError(
                    f"non-closed cell: face {f} is listed by cells {sorted(refs.get(f, []))}, "
                    f"owner/neighbour say {expect}")
            if self.neighbour[f] == self.owner[f]:
                raise MeshValidationError(f"face {f} has the same owner and neighbour")

    def _validate_geometry(self):
        for f, verts in enumerate(self.faces):
            if self.face_areas[f] <= 0.0:
                raise MeshValidationError(f"face {f} has zero area")
            d = (self.points[list(verts)] - self.face_centres[f]) @ self.face_normals[f]
            if np.max(np.abs(d)) > self.flatness_tol:
                raise MeshValidationError(f"face {f} is not planar (deviation {np.max(np.abs(d)):.3g})")
        for c, fl in enumerate(self.cells):
            signs = self._cf_sign[c, :len(fl)]
            closure = (self.face_area_vectors[list(fl)] * signs[:, None]).sum(axis=0)
            scale = self.face_areas[list(fl)].sum()
            if np.linalg.norm(closure) > 1e-8 * scale:
                raise MeshValidationError(f"non-closed cell {c}: open surface")
            if self.cell_volumes[c] <= 0.0:
                raise MeshValidationError(f"negative volume in cell {c}")
            for f, s in zip(fl, signs):
                if s * (self.face_centres[f] - self.cell_centres[c]) @ self.face_normals[f] <= 0.0:
                    raise MeshValidationError(
                        f"face {f} normal does not point out of cell {c}")
            # strongly non-convex cells cannot be tracked by face-plane tests
            pts = self.points[self.cell_points[c]]
            for f, s in zip(fl, signs):
                d = (pts - self.face_centres[f]) @ (s * self.face_normals[f])
                if d.max() > self.flatness_tol:
                    raise MeshValidationError(f"cell {c} is strongly non-convex at face {f}")

    def _validate_patches(self):
        for f in range(self.n_faces):
            if self.neighbour[f] < 0 and self.face_patch[f] < 0:
                raise MeshValidationError(f"boundary face {f} is not on any patch")
            if self.neighbour[f] >= 0 and self.face_patch[f] >= 0:
                raise MeshValidationError(f"internal face {f} is on patch "
                                          f"{self.patches[self.face_patch[f]].name}")
        for i, p in enumerate(self.patches):
            if p.kind == "wall":
                if p.pairs:
                    raise MeshValidationError(f"wall patch {p.name} cannot have pairs")
                continue
            paired = [f for pair in p.pairs for f in (pair if p.kind == "periodic" else pair[:1])]
            if sorted(paired) != sorted(p.faces) or len(set(paired)) != len(paired):
                missing = sorted(set(p.faces) - set(paired))
                raise MeshValidationError(
                    f"unpaired coupled face in patch {p.name}: {missing[:5] or 'duplicate pairing'}")
            if p.kind == "processor":
                if p.neighbour_rank is None:
                    raise MeshValidationError(f"processor patch {p.name} lacks neighbour_rank")
                if p.transform is None:
                    self.patches[i] = p = replace(p, transform=TransformPair.identity())
                continue
            tA = tB = None
            for a, b in p.pairs:
                if len(self.faces[a]) != len(self.faces[b]):
                    raise MeshValidationError(
                        f"patch {p.name}: paired faces {a} and {b} have different vertex counts")
                ta = self.pair_transform(a, b)
                tb = self.pair_transform(b, a)
                self._check_congruent(p.name, a, b, ta)
                if tA is None:
                    tA, tB = ta, tb
                elif not (ta.close_to(tA, 1e3 * self.tol) and tb.close_to(tB, 1e3 * self.tol)):
                    raise MeshValidationError(
                        f"patch {p.name}: face pairs produce inconsistent transforms")
            self.patches[i] = replace(p, transform=tA)
            for a, b in p.pairs:
                self._face_transform[a] = tA
                self._face_transform[b] = tB

    def _check_congruent(self, name, a, b, t):
        src = t.apply(self.points[list(self.faces[a])])
        dst = self.points[list(self.faces[b])]
        tol = 1e3 * self.tol
        for q in src:
            if np.min(np.linalg.norm(dst - q, axis=1)) > tol:
                raise MeshValidationError(
                    f"patch {name}: faces {a} and {b} are not congruent under the patch transform")

    # -- coupling -------------------------------------------------------------

    def pair_transform(self, a: int, b: int) -> TransformPair:
        """Transform referring across local face ``a`` to beyond local face ``b``."""
        return boundary_transform(self.face_centres[a], self.face_normals[a],
                                  self.face_centres[b], self.face_normals[b])

    def face_transform(self, f: int) -> TransformPair:
        """Transform applied to anything leaving through coupled face ``f``."""
        p = self.patches[self.face_patch[f]]
        if p.kind == "processor":
            return p.transform
        return self._face_transform[f]

    # -- queries --------------------------------------------------------------

    def _signed_distances(self, cells, p):
        idx = self._cf_index[cells]
        d = np.einsum("...j,...j->...", p - self.face_centres[idx], self.face_normals[idx])
        d = d * self._cf_sign[cells]
        return np.where(self._cf_mask[cells], d, -np.inf)

    def contains(self, cell: int, p, tol: float | None = None) -> bool:
        tol = self.tol if tol is None else tol
        p = np.asarray(p, dtype=float)
        return bool(self._signed_distances(np.array([cell]), p).max() <= tol)

    def cells_containing(self, p, tol: float | None = None) -> np.ndarray:
        tol = self.tol if tol is None else tol
        p = np.asarray(p, dtype=float)
        d = self._signed_distances(np.arange(self.n_cells), p)
        return np.flatnonzero(d.max(axis=1) <= tol)

    def locate_cell(self, p) -> int | None:
        """Cell containing ``p``; points on a shared face go to its owner."""
        p = np.asarray(p, dtype=float)
        cand = self.cells_containing(p)
        if len(cand) == 0:
            return None
        if len(cand) == 1:
            return int(cand[0])
        keep = set(int(c) for c in cand)
        faces = sorted({f for c in cand for f in self.cells[c]})
        for f in faces:
            o, n = int(self.owner[f]), int(self.neighbour[f])
            if n in keep and o in keep:
                if abs((p - self.face_centres[f]) @ self.face_normals[f]) <= self.tol:
                    keep.discard(n)
        return min(keep)

    def locate_cells(self, pts) -> np.ndarray:
        """Vectorised :meth:`locate_cell`; -1 marks points outside the mesh."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        out = np.full(len(pts), -1, dtype=np.int64)
        cells = np.arange(self.n_cells)
        for i, p in enumerate(pts):
            d = self._signed_distances(cells, p).max(axis=1)
            inside = np.flatnonzero(d <= self.tol)
            if len(inside) == 1:
                out[i] = inside[0]
            elif len(inside) > 1:
                out[i] = self.locate_cell(p)
        return out

    def first_face_crossed(self, cell: int, start, end):
        """First face of ``cell`` hit by the segment ``start -> end``.

        Returns ``(face, t)`` with the crossing at ``start + t*(end-start)``,
        or ``None`` when ``end`` stays inside the cell.  Equal crossing
        parameters go to the lowest face index.
        """
        start = np.asarray(start, dtype=float)
        d = np.asarray(end, dtype=float) - start
        if not d.any():
            return None
        n = self._cf_mask[cell].sum()
        fl = self._cf_index[cell, :n]
        nrm = self.face_normals[fl] * self._cf_sign[cell, :n, None]
        denom = nrm @ d
        num = np.einsum("ij,ij->i", self.face_centres[fl] - start, nrm)
        best = None
        best_t = np.inf
        for k in np.argsort(fl, kind="stable"):
            if denom[k] <= 0.0:
                continue
            t = max(num[k] / denom[k], 0.0)
            if t < best_t - 1e-12:
                best, best_t = int(fl[k]), t
        if best is None or best_t >= 1.0:
            return None
        return best, float(best_t)

    def summary(self) -> dict:
        kinds = {}
        for p in self.patches:
            kinds[p.kind] = kinds.get(p.kind, 0) + 1
        return {"points": self.n_points, "faces": self.n_faces, "cells": self.n_cells,
                "boundary_faces": int((self.neighbour < 0).sum()), "patches": kinds}


# -- file format ---------------------------------------------------------------

HEADER = "aica-mesh v1"


def _tokens(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_mesh(text: str, **kw) -> Mesh:
    """Parse and validate mesh-file text."""
    lines = list(_tokens(text))
    if not lines or " ".join(lines[0][1]) != HEADER:
        raise MeshParseError(lines[0][0] if lines else 1, f"expected header {HEADER!r}")
    pos = 1

    def take(section):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(lines[-1][0], f"missing section {section!r}")
        lineno, tok = lines[pos]
        if tok[0] != section or len(tok) != 2:
            raise MeshParseError(lineno, f"expected '{section} <count>', got {' '.join(tok)!r}")
        pos += 1
        return lineno, _int(tok[1], lineno, "count")

    def row(expect_index, what, min_len):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(lines[-1][0], f"unexpected end of file in {what}")
        lineno, tok = lines[pos]
        pos += 1
        if len(tok) < min_len:
            raise MeshParseError(lineno, f"{what} row needs at least {min_len} fields")
        if _int(tok[0], lineno, f"{what} index") != expect_index:
            raise MeshParseError(lineno, f"{what} index out of order (expected {expect_index})")
        return lineno, tok

    _, npts = take("points")
    points = np.empty((npts, 3))
    for i in range(npts):
        lineno, tok = row(i, "point", 4)
        if len(tok) != 4:
            raise MeshParseError(lineno, "point row must be 'index x y z'")
        points[i] = [_float(t, lineno, "coordinate") for t in tok[1:]]

    _, nf = take("faces")
    faces, owner, neighbour = [], [], []
    for i in range(nf):
        lineno, tok = row(i, "face", 6)
        vals = [_int(t, lineno, "face field") for t in tok[1:]]
        faces.append(vals[:-2])
        owner.append(vals[-2])
        neighbour.append(vals[-1])

    _, nc = take("cells")
    cells = []
    for i in range(nc):
        lineno, tok = row(i, "cell", 2)
        cells.append([_int(t, lineno, "face id") for t in tok[1:]])

    _, npatch = take("patches")
    patches = []
    for _ in range(npatch):
        patches.append(_parse_patch(lines, pos))
        pos = patches[-1][1]
        patches[-1] = patches[-1][0]
    if pos != len(lines):
        raise MeshParseError(lines[pos][0], "trailing content after patches")
    return Mesh(points, faces, owner, neighbour, cells, patches, **kw)


def _parse_patch(lines, pos):
    lineno, tok = lines[pos]
    if tok[0] != "patch" or len(tok) != 3:
        raise MeshParseError(lineno, "expected 'patch <name> <kind>'")
    name, kind = tok[1], tok[2]
    if kind not in PATCH_KINDS:
        raise MeshParseError(lineno, f"unknown patch kind {kind!r}")
    pos += 1
    faces, pairs = [], []
    nbr = None
    origin = ("internal",)
    transform = None
    while True:
        if pos >= len(lines):
            raise MeshParseError(lineno, f"patch {name} not terminated by 'end'")
        ln, tok = lines[pos]
        pos += 1
        key = tok[0]
        if key == "end":
            break
        if key == "faces":
            faces = [_int(t, ln, "face id") for t in tok[1:]]
        elif key == "pairs":
            if len(tok) != 2:
                raise MeshParseError(ln, "expected 'pairs <count>'")
            for _ in range(_int(tok[1], ln, "pair count")):
                if pos >= len(lines):
                    raise MeshParseError(ln, "unexpected end of file in pairs")
                pl, pt = lines[pos]
                pos += 1
                if len(pt) != 2:
                    raise MeshParseError(pl, "pair row must be 'faceA faceB'")
                pairs.append((_int(pt[0], pl, "face id"), _int(pt[1], pl, "face id")))
        elif key == "neighbour_rank":
            nbr = _int(tok[1], ln, "rank")
        elif key == "origin":
            if tok[1:2] == ["internal"] and len(tok) == 2:
                origin = ("internal",)
            elif tok[1:2] == ["periodic"] and len(tok) == 4 and tok[3] in ("A", "B"):
                origin = ("periodic", tok[2], tok[3])
            else:
                raise MeshParseError(ln, "origin must be 'internal' or 'periodic <patch> A|B'")
        elif key == "transform":
            if len(tok) != 13:
                raise MeshParseError(ln, "transform needs 3 translation + 9 rotation values")
            v = [_float(t, ln, "transform value") for t in tok[1:]]
            transform = TransformPair(v[:3], np.reshape(v[3:], (3, 3)))
        else:
            raise MeshParseError(ln, f"unknown patch field {key!r}")
    if kind == "processor" and nbr is None:
        raise MeshParseError(lineno, f"processor patch {name} needs neighbour_rank")
    return Patch(name, kind, tuple(faces), tuple(pairs), nbr, origin, transform), pos


def _int(tok, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise MeshParseError(lineno, f"bad {what}: {tok!r}") from None


def _float(tok, lineno, what):
    try:
        return float(tok)
    except ValueError:
        raise MeshParseError(lineno, f"bad {what}: {tok!r}") from None


def dump_mesh(mesh: Mesh) -> str:
    """Serialise to the text format read by :func:`load_mesh`."""
    out = [HEADER, f"points {mesh.n_points}"]
    out += [f"{i} {p[0]!r} {p[1]!r} {p[2]!r}" for i, p in enumerate(mesh.points.tolist())]
    out.append(f"faces {mesh.n_faces}")
    out += [f"{i} {' '.join(map(str, f))} {mesh.owner[i]} {mesh.neighbour[i]}"
            for i, f in enumerate(mesh.faces)]
    out.append(f"cells {mesh.n_cells}")
    out += [f"{i} {' '.join(map(str, c))}" for i, c in enumerate(mesh.cells)]
    out.append(f"patches {len(mesh.patches)}")
    for p in mesh.patches:
        out.append(f"patch {p.name} {p.kind}")
        out.append("faces " + " ".join(map(str, p.faces)))
        if p.coupled:
            out.append(f"pairs {len(p.pairs)}")
            out += [f"{a} {b}" for a, b in p.pairs]
        if p.kind == "processor":
            out.append(f"neighbour_rank {p.neighbour_rank}")
            out.append("origin " + " ".join(p.origin))
            t = p.transform
            if t is not None:
                out.append("transform " + " ".join(repr(float(x)) for x in (*t.y, *t.R.ravel())))
        out.append("end")
    return "\n".join(out) + "\n"


# -- decomposition -------------------------------------------------------------

@dataclass
class MeshPortion:
    """The part of a mesh owned by one rank, re-indexed locally."""

    rank: int
    mesh: Mesh
    global_cells: np.ndarray
    global_faces: np.ndarray
    global_points: np.ndarray
    n_ranks: int = 1
    global_to_local: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.global_to_local:
            self.global_to_local = {int(g): i for i, g in enumerate(self.global_cells)}

    @property
    def processor_patches(self):
        return [p for p in self.mesh.patches if p.kind == "processor"]

    @property
    def neighbour_ranks(self) -> list[int]:
        return sorted({p.neighbour_rank for p in self.processor_patches})


def whole_mesh_portion(mesh: Mesh) -> MeshPortion:
    return MeshPortion(0, mesh, np.arange(mesh.n_cells), np.arange(mesh.n_faces),
                       np.arange(mesh.n_points), 1)


def decompose(mesh: Mesh, assignment, n_ranks: int | None = None) -> list[MeshPortion]:
    """Split ``mesh`` into per-rank portions following ``assignment[cell] = rank``.

    Internal faces cut by the assignment and periodic pairs whose two faces
    land on different ranks become processor patches on both sides.  One
    processor patch is created per (neighbour rank, origin), so each such
    patch is exactly one referral segment.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (mesh.n_cells,):
        raise DecompositionError(
            f"assignment has {assignment.size} entries for {mesh.n_cells} cells")
    if n_ranks is None:
        n_ranks = int(assignment.max()) + 1 if assignment.size else 1
    if assignment.size and (assignment.min() < 0 or assignment.max() >= n_ranks):
        bad = int(assignment[(assignment < 0) | (assignment >= n_ranks)][0])
        raise DecompositionError(f"rank id {bad} out of range [0, {n_ranks})")
    for r in range(n_ranks):
        if not (assignment == r).any():
            log.warning("rank %d has no cells", r)

    # processor face specs: (rank, nbr, origin, sort key, global face, flip, transform)
    proc: dict[int, list] = {r: [] for r in range(n_ranks)}
    cut = set()
    for f in range(mesh.n_faces):
        n = mesh.neighbour[f]
        if n < 0:
            continue
        ro, rn = assignment[mesh.owner[f]], assignment[n]
        if ro != rn:
            cut.add(f)
            ident = TransformPair.identity()
            proc[ro].append((rn, ("internal",), f, f, False, ident))
            proc[rn].append((ro, ("internal",), f, f, True, ident))
    kept_pairs: dict[str, list] = {}
    for p in mesh.patches:
        if p.kind == "processor":
            raise DecompositionError("cannot decompose a mesh that already has processor patches")
        if p.kind != "periodic":
            continue
        kept_pairs[p.name] = []
        for a, b in p.pairs:
            ra, rb = assignment[mesh.owner[a]], assignment[mesh.owner[b]]
            if ra == rb:
                kept_pairs[p.name].append((a, b))
                continue
            cut.update((a, b))
            proc[ra].append((rb, ("periodic", p.name, "A"), a, a, False, mesh.face_transform(a)))
            proc[rb].append((ra, ("periodic", p.name, "B"), a, b, False, mesh.face_transform(b)))

    portions = []
    local_face_of: list[dict] = []
    for r in range(n_ranks):
        gcells = np.flatnonzero(assignment == r)
        cmap = {int(g): i for i, g in enumerate(gcells)}
        gfaces = [f for f in range(mesh.n_faces) if f not in cut and (
            assignment[mesh.owner[f]] == r)]
        groups: dict[tuple, list] = {}
        for nbr, origin, key, f, flip, t in proc[r]:
            groups.setdefault((nbr, origin), []).append((key, f, flip, t))
        group_keys = sorted(groups, key=lambda k: (k[0], k[1]))
        faces_out = [(f, False) for f in gfaces]
        for k in group_keys:
            groups[k].sort(key=lambda e: e[0])
            faces_out += [(f, flip) for _, f, flip, _ in groups[k]]
        gpts = np.unique(np.concatenate([list(mesh.faces[f]) for f, _ in faces_out])) \
            if faces_out else np.zeros(0, dtype=np.int64)
        pmap = {int(g): i for i, g in enumerate(gpts)}
        lfaces, lown, lnei = [], [], []
        for f, flip in faces_out:
            verts = mesh.faces[f][::-1] if flip else mesh.faces[f]
            lfaces.append([pmap[v] for v in verts])
            if flip:
                lown.append(cmap[int(mesh.neighbour[f])])
                lnei.append(-1)
            else:
                lown.append(cmap[int(mesh.owner[f])])
                n = mesh.neighbour[f]
                lnei.append(cmap[int(n)] if n >= 0 and f not in cut else -1)
        gf_to_lf = {}
        for i, (f, _) in enumerate(faces_out):
            gf_to_lf.setdefault(f, i)
        # keep each cell's face order as in the global mesh
        lcells = [[gf_to_lf[f] for f in mesh.cells[g]] for g in gcells]
        patches = []
        for p in mesh.patches:
            if p.kind == "periodic":
                pairs = tuple((gf_to_lf[a], gf_to_lf[b]) for a, b in kept_pairs[p.name]
                              if assignment[mesh.owner[a]] == r)
                faces = tuple(sorted(f for pr in pairs for f in pr))
                patches.append(replace(p, faces=faces, pairs=pairs, transform=None))
            else:
                faces = tuple(gf_to_lf[f] for f in p.faces if f not in cut and assignment[mesh.owner[f]] == r)
                patches.append(replace(p, faces=faces, pairs=()))
        proc_patches = []
        for k in group_keys:
            nbr, origin = k
            lf = [gf_to_lf[f] for _, f, _, _ in groups[k]]
            name = f"proc{r}to{nbr}" + ("" if origin[0] == "internal" else f"via{origin[1]}{origin[2]}")
            proc_patches.append((name, nbr, origin, lf, groups[k][0][3]))
        portions.append(dict(rank=r, gcells=gcells, gfaces=np.array([f for f, _ in faces_out], dtype=np.int64),
                             gpts=gpts, points=mesh.points[gpts], faces=lfaces, owner=lown,
                             neighbour=lnei, cells=lcells, patches=patches, proc=proc_patches))
        local_face_of.append(gf_to_lf)

    out = []
    for d in portions:
        r = d["rank"]
        patches = list(d["patches"])
        for name, nbr, origin, lf, t in d["proc"]:
            twin_origin = origin if origin[0] == "internal" else (
                "periodic", origin[1], "B" if origin[2] == "A" else "A")
            twin = next(x for x in portions[nbr]["proc"] if x[1] == r and x[2] == twin_origin)
            if len(twin[3]) != len(lf):
                raise DecompositionError(f"processor patch {name} does not match its twin")
            pairs = tuple(zip(lf, twin[3]))
            patches.append(Patch(name, "processor", tuple(lf), pairs, nbr, origin, t))
        lmesh = Mesh(d["points"], d["faces"], d["owner"], d["neighbour"], d["cells"], patches,
                     tol=mesh.tol, flatness_tol=mesh.flatness_tol)
        out.append(MeshPortion(r, lmesh, d["gcells"], d["gfaces"], d["gpts"], n_ranks))
    return out

"""Small mesh generators used by the CLI and the test suite."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, Patch

AXES = "xyz"


def assemble(points, cell_faces, boundary_patch, periodic=(), lengths=None, **kw) -> Mesh:
    """Build a :class:`Mesh` from cells given as lists of vertex loops.

    Loops are re-oriented so normals point out of the owner.  Boundary faces
    are assigned with ``boundary_patch(centre) -> (name, half)`` where
    ``half`` is ``"A"``/``"B"`` for periodic axes and ``None`` for walls.
    Periodic halves on axis ``a`` are paired by matching face centres
    shifted by ``lengths[a]``.
    """
    points = np.asarray(points, dtype=float)
    seen: dict[tuple, int] = {}
    faces, owner, neighbour = [], [], []
    cells = []
    for c, loops in enumerate(cell_faces):
        cc = points[sorted({v for lp in loops for v in lp})].mean(axis=0)
        fl = []
        for lp in loops:
            key = tuple(sorted(lp))
            if key in seen:
                f = seen[key]
                if neighbour[f] != -1:
                    raise ValueError(f"face {lp} shared by more than two cells")
                neighbour[f] = c
            else:
                pts = points[list(lp)]
                n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
                if n @ (pts.mean(axis=0) - cc) < 0:
                    lp = lp[::-1]
                f = len(faces)
                seen[key] = f
                faces.append(list(lp))
                owner.append(c)
                neighbour.append(-1)
            fl.append(f)
        cells.append(fl)

    groups: dict[tuple, list[int]] = {}
    for f, nb in enumerate(neighbour):
        if nb >= 0:
            continue
        centre = points[faces[f]].mean(axis=0)
        groups.setdefault(boundary_patch(centre), []).append(f)

    patches = []
    names = sorted({name for name, _ in groups})
    for name in names:
        A = groups.get((name, "A"))
        if A is None:
            patches.append(Patch(name, "wall", tuple(groups[(name, None)])))
            continue
        B = groups[(name, "B")]
        axis = AXES.index(name[0])
        shift = np.zeros(3)
        shift[axis] = lengths[axis]
        cb = np.array([points[faces[b]].mean(axis=0) for b in B])
        tol = 1e-9 * max(lengths)
        pairs = []
        used = set()
        for a in A:
            d = np.linalg.norm(cb - (points[faces[a]].mean(axis=0) + shift), axis=1)
            k = int(np.argmin(d))
            if d[k] > tol or k in used:
                raise ValueError(f"unmatched periodic face {a} on {name}")
            used.add(k)
            pairs.append((a, B[k]))
        if len(used) != len(B):
            raise ValueError(f"unmatched periodic faces on {name}")
        patches.append(Patch(name, "periodic", tuple(sorted(A + B)), tuple(pairs)))
    return Mesh(points, faces, owner, neighbour, cells, patches, **kw)


def _classifier(lo, hi, periodic, tol):
    def classify(c):
        for a in range(3):
            for side, val in (("A", lo[a]), ("B", hi[a])):
                if abs(c[a] - val) <= tol:
                    if AXES[a] in periodic:
                        return (f"{AXES[a]}Periodic", side)
                    return (f"{AXES[a]}{'Min' if side == 'A' else 'Max'}Wall", None)
        raise ValueError(f"boundary face at {c} is not on the box surface")
    return classify


def graded_coords(n: int, length: float, ratio: float = 1.0) -> np.ndarray:
    """``n`` intervals over ``[0, length]`` with geometric growth ``ratio``."""
    if ratio == 1.0:
        return np.linspace(0.0, length, n + 1)
    w = ratio ** np.arange(n)
    return np.concatenate([[0.0], np.cumsum(w) / w.sum() * length])


def hex_box(n=(1, 1, 1), lengths=(1.0, 1.0, 1.0), periodic="", grading=(1.0, 1.0, 1.0),
            coords=None, **kw) -> Mesh:
    """Tensor-product hexahedral mesh of ``[0,Lx]x[0,Ly]x[0,Lz]``."""
    if isinstance(n, int):
        n = (n, n, n)
    if np.isscalar(lengths):
        lengths = (lengths,) * 3
    if np.isscalar(grading):
        grading = (grading,) * 3
    if coords is None:
        coords = [graded_coords(n[a], lengths[a], grading[a]) for a in range(3)]
    nx, ny, nz = (len(c) - 1 for c in coords)
    lengths = tuple(float(c[-1] - c[0]) for c in coords)
    X, Y, Z = np.meshgrid(*coords, indexing="ij")
    points = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    cells = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = {(a, b, c): vid(i + a, j + b, k + c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
                cells.append([
                    [v[0, 0, 0], v[0, 1, 0], v[0, 1, 1], v[0, 0, 1]],
                    [v[1, 0, 0], v[1, 1, 0], v[1, 1, 1], v[1, 0, 1]],
                    [v[0, 0, 0], v[1, 0, 0], v[1, 0, 1], v[0, 0, 1]],
                    [v[0, 1, 0], v[1, 1, 0], v[1, 1, 1], v[0, 1, 1]],
                    [v[0, 0, 0], v[1, 0, 0], v[1, 1, 0], v[0, 1, 0]],
                    [v[0, 0, 1], v[1, 0, 1], v[1, 1, 1], v[0, 1, 1]],
                ])
    lo = np.array([c[0] for c in coords])
    hi = np.array([c[-1] for c in coords])
    classify = _classifier(lo, hi, periodic, 1e-9 * np.linalg.norm(hi - lo))
    return assemble(points, cells, classify, periodic, lengths, **kw)


def unit_cube(periodic="") -> Mesh:
    return hex_box(1, 1.0, periodic)


def polygon_layer(n: int, length: float, jitter: float = 0.2, seed: int = 0,
                  split_every: int = 3):
    """Periodic 2D mesh of a square: jittered quads, every ``split_every``-th split in two triangles.

    Returns ``(xy, polys)`` with node coordinates and counter-clockwise
    vertex loops.  Boundary nodes only move along the boundary so opposite
    sides stay congruent.
    """
    rng = np.random.default_rng(seed)
    h = length / n
    jit = rng.uniform(-jitter, jitter, size=(n, n, 2)) * h
    jit[0, :, 0] = 0.0
    jit[:, 0, 1] = 0.0
    xy = np.empty(((n + 1) * (n + 1), 2))
    for i in range(n + 1):
        for j in range(n + 1):
            xy[i * (n + 1) + j] = (i * h + jit[i % n, j % n, 0], j * h + jit[i % n, j % n, 1])

    def nid(i, j):
        return i * (n + 1) + j

    polys = []
    for i in range(n):
        for j in range(n):
            q = [nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)]
            if (i + 2 * j) % split_every == 0:
                if (i + j) % 2:
                    polys += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
                else:
                    polys += [[q[0], q[1], q[3]], [q[1], q[2], q[3]]]
            else:
                polys.append(q)
    return xy, polys


def extruded_polygon_box(n: int, length: float, nz: int | None = None, periodic="xyz",
                         jitter: float = 0.2, seed: int = 0, z_ratio: float = 1.0, **kw) -> Mesh:
    """Prism/hexahedron mesh extruded from :func:`polygon_layer` along z."""
    nz = n if nz is None else nz
    xy, polys = polygon_layer(n, length, jitter, seed)
    zs = graded_coords(nz, length, z_ratio)
    npl = len(xy)
    points = np.concatenate([np.column_stack([xy, np.full(npl, z)]) for z in zs])
    cells = []
    for k in range(nz):
        lo, hi = k * npl, (k + 1) * npl
        for poly in polys:
            faces = [[lo + v for v in poly], [hi + v for v in poly]]
            for a, b in zip(poly, poly[1:] + poly[:1]):
                faces.append([lo + a, lo + b, hi + b, hi + a])
            cells.append(faces)
    L = np.full(3, float(length))
    classify = _classifier(np.zeros(3), L, periodic, 1e-9 * np.linalg.norm(L))
    return assemble(points, cells, classify, periodic, tuple(L), **kw)

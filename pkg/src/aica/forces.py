"""Lennard-Jones pair forces: real-real and real-referred accumulation passes.

Candidate pairs are generated block-wise from cell occupancy (all molecules
of cell I against all molecules of cell J) and evaluated with NumPy; the
accumulation order follows the canonical cell ordering so serial runs are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OVERLAP_FLOOR = 1e-6


class OverlapError(Exception):
    pass


@dataclass(frozen=True)
class PairPotential:
    """Truncated and energy-shifted Lennard-Jones potential (force unshifted)."""

    epsilon: float = 1.0
    sigma: float = 1.0
    r_cut: float = 2.5

    def __post_init__(self):
        if self.r_cut <= 0.0:
            raise ValueError("r_cut must be positive")

    @property
    def shift(self) -> float:
        sr6 = (self.sigma / self.r_cut) ** 6
        return 4.0 * self.epsilon * (sr6 * sr6 - sr6)

    def energy_force(self, r2: np.ndarray):
        """Pair energy and ``|F|/r`` for squared separations inside the cut-off."""
        sr2 = self.sigma * self.sigma / r2
        sr6 = sr2 * sr2 * sr2
        sr12 = sr6 * sr6
        u = 4.0 * self.epsilon * (sr12 - sr6) - self.shift
        f_over_r = 24.0 * self.epsilon * (2.0 * sr12 - sr6) / r2
        return u, f_over_r


def lj_pair(r_vec, pot: PairPotential):
    """Force on the first molecule of a pair separated by ``r_vec`` (first minus second), and the pair energy."""
    r_vec = np.asarray(r_vec, dtype=float)
    r2 = float(r_vec @ r_vec)
    if r2 < (OVERLAP_FLOOR * pot.sigma) ** 2:
        raise OverlapError(f"molecules overlap (r = {np.sqrt(r2):.3g})")
    if r2 >= pot.r_cut * pot.r_cut:
        return np.zeros(3), 0.0
    u, f_over_r = pot.energy_force(r2)
    return f_over_r * r_vec, float(u)


@dataclass
class ForceAccumulator:
    forces: np.ndarray
    energy: np.ndarray
    virial: float = 0.0
    pair_count: int = 0
    referred_pair_count: int = 0
    referred_referred_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "ForceAccumulator":
        return cls(np.zeros((n, 3)), np.zeros(n))


def cell_blocks(cells: np.ndarray, n_cells: int):
    """Start offset and count of each cell's run in an array sorted by cell."""
    counts = np.bincount(cells, minlength=n_cells).astype(np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return starts, counts


def block_pairs(sa, na, sb, nb):
    """All index pairs ``(sa[k]+i, sb[k]+j)`` for ``i < na[k]``, ``j < nb[k]``, block by block."""
    size = na * nb
    keep = size > 0
    sa, na, sb, nb, size = sa[keep], na[keep], sb[keep], nb[keep], size[keep]
    total = int(size.sum())
    if total == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e
    blk = np.repeat(np.arange(len(size)), size)
    offs = np.concatenate([[0], np.cumsum(size)[:-1]])
    k = np.arange(total) - offs[blk]
    nbb = nb[blk]
    return sa[blk] + k // nbb, sb[blk] + k % nbb


def flatten_lists(lists):
    """``[[j...], ...]`` -> parallel arrays ``(i, j)``."""
    lens = np.array([len(x) for x in lists], dtype=np.int64)
    if lens.sum() == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e
    i = np.repeat(np.arange(len(lists)), lens)
    j = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists if len(x)])
    return i, j


def _accumulate(acc: ForceAccumulator, idx, vec, weight_sign=1.0):
    n = len(acc.forces)
    for c in range(3):
        acc.forces[:, c] += weight_sign * np.bincount(idx, weights=vec[:, c], minlength=n)


def _evaluate(d, pot, ids_a, ids_b):
    r2 = np.einsum("ij,ij->i", d, d)
    inside = r2 < pot.r_cut * pot.r_cut
    if inside.any():
        rmin = r2[inside].min()
        if rmin < (OVERLAP_FLOOR * pot.sigma) ** 2:
            k = np.flatnonzero(inside & (r2 == rmin))[0]
            raise OverlapError(f"molecules {ids_a[k]} and {ids_b[k]} overlap "
                               f"(r = {np.sqrt(rmin):.3g})")
    return r2, inside


def real_real_pass(dil_i, dil_j, n_cells, positions, cells, pot: PairPotential,
                   acc: ForceAccumulator, ids=None):
    """Forces between real molecules of one rank.

    ``positions``/``cells`` must be sorted by cell.  Each unordered pair is
    visited once, through a DIL entry or, for two molecules in the same
    cell, with the lower array index first.  The force is added to one
    member and subtracted from the other.
    """
    ids = np.arange(len(positions)) if ids is None else ids
    starts, counts = cell_blocks(cells, n_cells)
    a1, b1 = block_pairs(starts[dil_i], counts[dil_i], starts[dil_j], counts[dil_j])
    cs = np.arange(n_cells)
    a2, b2 = block_pairs(starts[cs], counts[cs], starts[cs], counts[cs])
    same = a2 < b2
    a = np.concatenate([a1, a2[same]])
    b = np.concatenate([b1, b2[same]])
    d = positions[a] - positions[b]
    r2, inside = _evaluate(d, pot, ids[a], ids[b])
    a, b, d, r2 = a[inside], b[inside], d[inside], r2[inside]
    u, f_over_r = pot.energy_force(r2)
    f = f_over_r[:, None] * d
    _accumulate(acc, a, f)
    _accumulate(acc, b, f, -1.0)
    n = len(positions)
    half = 0.5 * u
    acc.energy += np.bincount(a, weights=half, minlength=n) + np.bincount(b, weights=half, minlength=n)
    acc.virial += float((f_over_r * r2).sum())
    acc.pair_count += len(a)
    return acc


def real_referred_pass(ref_i, ref_j, n_referred, ref_positions, ref_cells, n_cells, positions,
                       cells, pot: PairPotential, acc: ForceAccumulator, ids=None):
    """Forces on real molecules from referred molecules; nothing flows back.

    ``ref_i``/``ref_j`` list (referred cell, real cell) interaction entries.
    Referred records must be sorted by referred cell.  Each real molecule
    receives the full pair force and half the pair energy; the other half
    is booked on the source rank through its own image of this molecule.
    """
    ids = np.arange(len(positions)) if ids is None else ids
    if len(ref_positions) == 0 or len(positions) == 0:
        return acc
    rs, rc = cell_blocks(ref_cells, n_referred)
    starts, counts = cell_blocks(cells, n_cells)
    q, p = block_pairs(rs[ref_i], rc[ref_i], starts[ref_j], counts[ref_j])
    d = positions[p] - ref_positions[q]
    r2, inside = _evaluate(d, pot, ids[p], np.full(len(q), -1))
    p, d, r2 = p[inside], d[inside], r2[inside]
    u, f_over_r = pot.energy_force(r2)
    _accumulate(acc, p, f_over_r[:, None] * d)
    acc.energy += np.bincount(p, weights=0.5 * u, minlength=len(positions))
    acc.virial += 0.5 * float((f_over_r * r2).sum())
    acc.referred_pair_count += len(p)
    return acc
